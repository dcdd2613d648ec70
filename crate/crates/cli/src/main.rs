//! `symreg`: dataset generation, model training, formula fitting and
//! evaluation from the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symreg_cli::harness::{evaluate_suite, RandomExprDecoder, SuiteProtocol};
use symreg_cli::io::{read_table, DataError};
use symreg_core::dataset::{parse_prefix_str, write_jsonl, DatasetRecord};
use symreg_core::generator::{generator_stats, ExampleStream, GeneratorConfig};
use symreg_core::pipeline::{fit, CandidateDecoder, PipelineConfig, PipelineMode};
use symreg_core::refine::{random_init, refine, subsample, RefineOptions, RefineProblem};
use symreg_core::skeletons::count_skeletons_default;
use symreg_core::{EncodeMode, Expr, Vocab};
use symreg_model::{Checkpoint, Model, ModelConfig, ModelDecoder, TrainConfig};

#[derive(Parser)]
#[command(name = "symreg", about = "Symbolic regression toolkit", version)]
struct Cli {
    /// Base RNG seed for all stochastic steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// JSON file overriding the inference pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Inference mode: skeleton+bfgs | e2e-no-bfgs | e2e+bfgs-random | e2e+bfgs-model.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Bags for inference-time data splitting.
    #[arg(short = 'B', long, global = true)]
    bags: Option<usize>,
    /// Candidates decoded per bag.
    #[arg(short = 'C', long, global = true)]
    candidates: Option<usize>,
    /// Candidates kept for refinement.
    #[arg(short = 'K', long, global = true)]
    keep: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a JSONL dataset of generated (function, points) examples.
    Generate {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        d_max: usize,
    },
    /// Print generator distribution statistics as JSON.
    Stats {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        d_max: usize,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value = "e2e")]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        d_max: usize,
        #[arg(long, default_value_t = 1)]
        b_max: usize,
        #[arg(long, default_value_t = 2)]
        u_max: usize,
        #[arg(long, default_value_t = 1000)]
        val_examples: usize,
        #[arg(long, default_value_t = 200)]
        val_interval: u64,
        /// Token budget per optimizer step.
        #[arg(long)]
        batch_tokens: Option<usize>,
        /// Resume from an existing checkpoint instead of fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit a formula to a CSV or JSONL dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the model-free random-candidate decoder instead of a checkpoint.
        #[arg(long, default_value_t = false)]
        mock_decoder: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or mock decoder) over a stratified suite.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        mock_decoder: bool,
        #[arg(long, default_value_t = 20)]
        problems: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        test_scale: f64,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 2)]
        d_max: usize,
        #[arg(long)]
        out_report: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Exact count of distinct expression skeletons per operator count.
    CountSkeletons {
        #[arg(long, default_value_t = 10)]
        max_ops: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
    },
    /// Refine the constants of a prefix-notation skeleton against a dataset.
    Refine {
        /// Prefix expression, e.g. "mul <> sin mul <> x1"; `<>` marks constant slots.
        #[arg(long)]
        skeleton: String,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated initial constants; omitted = random init.
        #[arg(long)]
        init: Option<String>,
    },
}

enum AppError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Internal(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Internal(m) => m,
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Internal(e.to_string())
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig, AppError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(mode) = &cli.mode {
        cfg.mode = PipelineMode::parse(mode)
            .ok_or_else(|| AppError::Usage(format!("unknown mode `{mode}`")))?;
    }
    if let Some(b) = cli.bags {
        cfg.bags = b;
    }
    if let Some(c) = cli.candidates {
        cfg.candidates_per_bag = c;
    }
    if let Some(k) = cli.keep {
        cfg.refine_budget = k;
    }
    cfg.seed = cli.seed;
    cfg.validate().map_err(AppError::Usage)?;
    Ok(cfg)
}

fn load_model(path: &PathBuf) -> Result<Model, AppError> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let (model, _) = ckpt
        .into_model()
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    Ok(model)
}

fn make_decoder(
    checkpoint: &Option<PathBuf>,
    mock: bool,
    d_max: usize,
) -> Result<(Box<dyn CandidateDecoder>, Vocab), AppError> {
    match (checkpoint, mock) {
        (Some(path), false) => {
            let model = load_model(path)?;
            let vocab = model.vocab.clone();
            Ok((Box::new(ModelDecoder::new(model)), vocab))
        }
        (None, true) => {
            let vocab = Vocab::new(d_max);
            let generator = GeneratorConfig { d_max, ..GeneratorConfig::default() };
            Ok((Box::new(RandomExprDecoder { vocab: vocab.clone(), generator }), vocab))
        }
        (Some(_), true) => {
            Err(AppError::Usage("--checkpoint and --mock-decoder are mutually exclusive".into()))
        }
        (None, false) => Err(AppError::Usage("need --checkpoint or --mock-decoder".into())),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), AppError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), AppError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| AppError::Internal(e.to_string()))?;
    }

    match &cli.command {
        Command::Generate { count, out, d_max } => {
            let cfg = GeneratorConfig { d_max: *d_max, ..GeneratorConfig::default() };
            let stream = ExampleStream::new(cfg, cli.seed);
            let mut records = Vec::with_capacity(*count);
            let mut index = 0u64;
            while records.len() < *count {
                if let Ok(ex) = stream.example_at(index) {
                    records.push(DatasetRecord::from_example(index, &ex));
                }
                index += 1;
                if index > 100 * *count as u64 + 1000 {
                    return Err(AppError::Internal("generator kept rejecting".into()));
                }
            }
            let f = BufWriter::new(File::create(out)?);
            write_jsonl(f, &records).map_err(|e| AppError::Internal(e.to_string()))?;
            eprintln!("wrote {} examples to {}", records.len(), out.display());
        }
        Command::Stats { count, d_max } => {
            let cfg = GeneratorConfig { d_max: *d_max, ..GeneratorConfig::default() };
            let stats = generator_stats(&cfg, *count, cli.seed);
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train {
            steps,
            target,
            out,
            metrics,
            d_max,
            b_max,
            u_max,
            val_examples,
            val_interval,
            batch_tokens,
            resume,
        } => {
            let mode = match target.as_str() {
                "e2e" => EncodeMode::E2e,
                "skeleton" => EncodeMode::SkeletonMode,
                other => return Err(AppError::Usage(format!("unknown target `{other}`"))),
            };
            let mut model = match resume {
                Some(path) => load_model(path)?,
                None => {
                    let mut mc = ModelConfig::toy(*d_max);
                    if let Some(bt) = batch_tokens {
                        mc.batch_tokens = *bt;
                    }
                    Model::new(mc, Vocab::new(*d_max), cli.seed)
                }
            };
            let generator = GeneratorConfig {
                d_max: *d_max,
                b_max: *b_max,
                u_max: *u_max,
                ..GeneratorConfig::default()
            };
            let mut tc = TrainConfig::new(generator, mode);
            tc.steps = *steps;
            tc.train_seed = cli.seed.wrapping_add(1);
            tc.val_seed = cli.seed.wrapping_add(0x4000_0000_0000_0001);
            tc.val_examples = *val_examples;
            tc.val_interval = *val_interval;
            let mut sink: Box<dyn Write> = match metrics {
                Some(path) => Box::new(BufWriter::new(File::create(path)?)),
                None => Box::new(std::io::stderr()),
            };
            let history = symreg_model::train(&mut model, &tc, &mut sink)
                .map_err(|e| AppError::Internal(e.to_string()))?;
            sink.flush()?;
            Checkpoint::from_model(&model, history.last().map_or(0, |m| m.step))
                .save(out)
                .map_err(|e| AppError::Internal(e.to_string()))?;
            if let Some(last) = history.last() {
                eprintln!(
                    "step {} loss {:.4} val acc {:?}",
                    last.step, last.loss, last.val_token_accuracy
                );
            }
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Fit { data, checkpoint, mock_decoder, out } => {
            let table = read_table(data)?;
            let dim = table.x.first().map_or(0, |r| r.len());
            let (decoder, vocab) = make_decoder(checkpoint, *mock_decoder, dim.max(1))?;
            if dim > vocab.d_max {
                return Err(AppError::Data(format!(
                    "dataset has {dim} input dims but the model supports {}",
                    vocab.d_max
                )));
            }
            let cfg = pipeline_config(&cli)?;
            let fitted = fit(&table.x, &table.y, decoder.as_ref(), &vocab, &cfg)
                .map_err(|e| AppError::Data(e.to_string()))?;
            let mut doc = fitted.export();
            // Training-data quality for the report.
            let y_hat: Vec<f64> = table
                .x
                .iter()
                .map(|x| fitted.predict(x).unwrap_or(f64::INFINITY))
                .collect();
            let r2 = symreg_core::metrics::r2_score(&table.y, &y_hat);
            doc["r2_train_raw"] = serde_json::json!(r2.raw);
            doc["r2_train"] = serde_json::json!(r2.clamped);
            write_or_print(out, &serde_json::to_string_pretty(&doc)?)?;
        }
        Command::Evaluate {
            checkpoint,
            mock_decoder,
            problems,
            noise,
            test_scale,
            n_train,
            d_max,
            out_report,
            out_csv,
        } => {
            let (decoder, vocab) = make_decoder(checkpoint, *mock_decoder, *d_max)?;
            let cfg = pipeline_config(&cli)?;
            let generator = GeneratorConfig { d_max: vocab.d_max, ..GeneratorConfig::default() };
            let protocol = SuiteProtocol {
                problems: *problems,
                n_train: *n_train,
                noise: *noise,
                test_scale: *test_scale,
                seed: cli.seed,
                ..SuiteProtocol::new(generator)
            };
            let report = evaluate_suite(decoder.as_ref(), &vocab, &cfg, &protocol);
            let json = serde_json::to_string_pretty(&report)?;
            write_or_print(out_report, &json)?;
            if let Some(path) = out_csv {
                std::fs::write(path, report.to_csv())?;
            }
            eprintln!(
                "evaluated {} problems: mean R2 {:.4}, Acc_0.1 {:.3}",
                report.aggregate.evaluated,
                report.aggregate.mean_r2_clamped,
                report.aggregate.mean_acc[0]
            );
        }
        Command::CountSkeletons { max_ops, dim } => {
            for ops in 0..=*max_ops {
                println!("{ops}\t{}", count_skeletons_default(ops, *dim));
            }
        }
        Command::Refine { skeleton, data, init } => {
            let expr = parse_prefix_str(skeleton)
                .map_err(|e| AppError::Usage(format!("bad skeleton: {e}")))?;
            let sk = symreg_core::Skeleton::from_tree(expr);
            let table = read_table(data)?;
            let dim = table.x.first().map_or(0, |r| r.len());
            let needed = max_var(&sk);
            if needed > dim {
                return Err(AppError::Data(format!(
                    "skeleton uses x{needed} but the dataset has {dim} columns"
                )));
            }
            let init: Vec<f64> = match init {
                Some(text) => {
                    let parsed: Result<Vec<f64>, _> =
                        text.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    let parsed =
                        parsed.map_err(|e| AppError::Usage(format!("bad --init: {e}")))?;
                    if parsed.len() != sk.slots() {
                        return Err(AppError::Usage(format!(
                            "skeleton has {} slots but --init provides {}",
                            sk.slots(),
                            parsed.len()
                        )));
                    }
                    parsed
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
                    random_init(&sk, &mut rng)
                }
            };
            let (mu, sigma, _) = symreg_core::generator::mean_std(&table.x);
            let x_white: Vec<Vec<f64>> = table
                .x
                .iter()
                .map(|row| (0..dim).map(|d| (row[d] - mu[d]) / sigma[d]).collect())
                .collect();
            let sample = symreg_core::generator::SampleSet {
                x: x_white,
                y: table.y.clone(),
                mu,
                sigma,
                source: None,
            };
            let opts = RefineOptions { seed: cli.seed, ..RefineOptions::default() };
            let sub = subsample(&sample, opts.subsample_cap, opts.seed);
            let problem = RefineProblem { skeleton: sk.clone(), init, data: sub };
            let result = refine(&problem, &opts);
            let refined = sk.substitute(&result.theta);
            let doc = serde_json::json!({
                "theta": result.theta,
                "loss": result.loss,
                "initial_loss": result.initial_loss,
                "iterations": result.iterations,
                "status": format!("{:?}", result.status),
                "formula_whitened": refined.infix(),
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(())
}

fn max_var(sk: &symreg_core::Skeleton) -> usize {
    fn walk(e: &Expr) -> usize {
        match e {
            Expr::Var(d) => *d,
            Expr::Const(_) | Expr::Slot(_) => 0,
            Expr::Unary(_, c) => walk(c),
            Expr::Binary(_, a, b) => walk(a).max(walk(b)),
        }
    }
    walk(sk.tree())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
