//! Cross-entropy training loop with Adam, warmup/inverse-square-root
//! scheduling, length-bucketed batches and periodic held-out validation.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use symreg_core::generator::{Example, ExampleStream, GeneratorConfig};
use symreg_core::{EncodeMode, Vocab};

use crate::transformer::{Forward, Model};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at step {step}: loss={loss}, lr={lr}")]
    Divergence { step: u64, loss: f64, lr: f64 },
    #[error("no trainable examples produced by the stream")]
    EmptyStream,
    #[error("io error writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub mode: EncodeMode,
    /// Optimizer steps to run.
    pub steps: u64,
    pub train_seed: u64,
    /// Seed for the held-out validation stream; must differ from train_seed
    /// so the split is disjoint by construction.
    pub val_seed: u64,
    pub val_examples: usize,
    pub val_interval: u64,
}

impl TrainConfig {
    pub fn new(generator: GeneratorConfig, mode: EncodeMode) -> TrainConfig {
        TrainConfig {
            generator,
            mode,
            steps: 1000,
            train_seed: 1,
            val_seed: 2_000_000_001,
            val_examples: 10_000,
            val_interval: 200,
        }
    }
}

/// One JSONL metrics record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub examples_seen: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_majority_baseline: Option<f64>,
}

/// Adam with bias correction; one slot pair per model parameter.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        Adam {
            m: model.params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: model.params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &HashMap<usize, Array2<f64>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&i, g) in grads {
            self.m[i].zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (&self.m[i], &self.v[i]);
            params[i].indexed_iter_mut().for_each(|(idx, p)| {
                let mhat = m[idx] / bc1;
                let vhat = v[idx] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Encoder rows + decoder target for one training example, or None when the
/// example does not fit the model's context.
pub fn prepare_example(
    vocab: &Vocab,
    model_max_points: usize,
    model_max_dec: usize,
    ex: &Example,
    mode: EncodeMode,
) -> Option<(Vec<Vec<u32>>, Vec<u32>)> {
    let target = vocab.encode_expr(&ex.function.expr, mode).ok()?.tokens;
    // Decoder input is BOS + target, so one extra slot is needed.
    if target.len() + 1 > model_max_dec {
        return None;
    }
    let mut rows = vocab.encode_points(&ex.samples).ok()?;
    rows.truncate(model_max_points);
    (!rows.is_empty()).then_some((rows, target))
}

fn bucket_key(n_points: usize) -> usize {
    n_points / 25
}

/// Accumulate one example's gradient, weighted so the batch loss is the mean
/// over all target tokens in the batch.
fn accumulate(
    model: &Model,
    rows: &[Vec<u32>],
    target: &[u32],
    grads: &mut HashMap<usize, Array2<f64>>,
) -> (f64, usize) {
    let mut f = Forward::new(model);
    let (loss_node, n_tokens) = f.example_loss(rows, target);
    let loss = f.tape.scalar(loss_node);
    for (pi, g) in f.tape.backward(loss_node) {
        let weighted = g * n_tokens as f64;
        match grads.get_mut(&pi) {
            Some(acc) => *acc += &weighted,
            None => {
                grads.insert(pi, weighted);
            }
        }
    }
    (loss * n_tokens as f64, n_tokens)
}

/// Teacher-forced token accuracy plus the majority-token baseline on the same
/// label set.
pub fn validate(model: &Model, examples: &[(Vec<Vec<u32>>, Vec<u32>)]) -> (f64, f64) {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut label_hist: HashMap<u32, usize> = HashMap::new();
    for (rows, target) in examples {
        let mut f = Forward::new(model);
        let memory = f.encode(rows);
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(model.vocab.bos());
        input.extend_from_slice(target);
        let logits_node = f.decode_logits(memory, &input);
        let logits = f.tape.value(logits_node);
        let mut labels: Vec<u32> = target.clone();
        labels.push(model.vocab.eos());
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j as u32)
                .unwrap();
            if argmax == label {
                correct += 1;
            }
            *label_hist.entry(label).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return (0.0, 0.0);
    }
    let majority = label_hist.values().copied().max().unwrap_or(0);
    (correct as f64 / total as f64, majority as f64 / total as f64)
}

/// Build a held-out set from a seed-disjoint stream.
pub fn validation_set(model: &Model, cfg: &TrainConfig, count: usize) -> Vec<(Vec<Vec<u32>>, Vec<u32>)> {
    let stream = ExampleStream::new(cfg.generator.clone(), cfg.val_seed);
    let mut out = Vec::with_capacity(count);
    let mut index = 0u64;
    while out.len() < count && index < count as u64 * 50 {
        if let Ok(ex) = stream.example_at(index) {
            if let Some(prep) = prepare_example(
                &model.vocab,
                model.config.max_points,
                model.config.max_dec_len,
                &ex,
                cfg.mode,
            ) {
                out.push(prep);
            }
        }
        index += 1;
    }
    out
}

/// Train in place, streaming metrics as JSONL into `metrics_sink`.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    metrics_sink: &mut dyn Write,
) -> Result<Vec<TrainMetrics>, TrainError> {
    let stream = ExampleStream::new(cfg.generator.clone(), cfg.train_seed);
    let val_set = validation_set(model, cfg, cfg.val_examples);
    let mut adam = Adam::new(model);
    let mut buckets: HashMap<usize, Vec<(Vec<Vec<u32>>, Vec<u32>)>> = HashMap::new();
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut examples_seen = 0u64;
    let mut index = 0u64;
    let stall_limit = cfg.steps.saturating_mul(1_000_000).max(1_000_000);

    while step < cfg.steps {
        if index > stall_limit {
            return Err(TrainError::EmptyStream);
        }
        let Ok(ex) = stream.example_at(index) else {
            index += 1;
            continue;
        };
        index += 1;
        let Some(prep) = prepare_example(
            &model.vocab,
            model.config.max_points,
            model.config.max_dec_len,
            &ex,
            cfg.mode,
        ) else {
            continue;
        };
        let key = bucket_key(prep.0.len());
        let bucket = buckets.entry(key).or_default();
        bucket.push(prep);

        // A bucket forms a batch once it holds the token budget, counting
        // encoder point tokens plus decoder target tokens.
        let bucket_tokens: usize = bucket
            .iter()
            .map(|(rows, t)| rows.len() * rows[0].len() + t.len() + 1)
            .sum();
        if bucket_tokens < model.config.batch_tokens {
            continue;
        }

        let batch = buckets.remove(&key).unwrap();
        let mut grads: HashMap<usize, Array2<f64>> = HashMap::new();
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (rows, target) in &batch {
            let (l, n) = accumulate(model, rows, target, &mut grads);
            loss_sum += l;
            token_sum += n;
        }
        examples_seen += batch.len() as u64;
        let loss = loss_sum / token_sum as f64;
        step += 1;
        let lr = model.config.learning_rate(step);
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step, loss, lr });
        }
        let scale = 1.0 / token_sum as f64;
        for g in grads.values_mut() {
            *g *= scale;
        }
        adam.step(&mut model.params, &grads, lr);

        let validate_now = step % cfg.val_interval == 0 || step == cfg.steps;
        let (acc, base) = if validate_now && !val_set.is_empty() {
            let (a, b) = validate(model, &val_set);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let rec = TrainMetrics {
            step,
            loss,
            lr,
            examples_seen,
            val_token_accuracy: acc,
            val_majority_baseline: base,
        };
        serde_json::to_writer(&mut *metrics_sink, &rec).map_err(std::io::Error::other)?;
        metrics_sink.write_all(b"\n")?;
        history.push(rec);
    }
    if examples_seen == 0 {
        return Err(TrainError::EmptyStream);
    }
    Ok(history)
}

/// Repeatedly fit one fixed batch; used as a capacity sanity check.
pub fn overfit_single_batch(
    model: &mut Model,
    batch: &[(Vec<Vec<u32>>, Vec<u32>)],
    steps: u64,
    lr: f64,
) -> f64 {
    let mut adam = Adam::new(model);
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let mut grads: HashMap<usize, Array2<f64>> = HashMap::new();
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (rows, target) in batch {
            let (l, n) = accumulate(model, rows, target, &mut grads);
            loss_sum += l;
            token_sum += n;
        }
        last = loss_sum / token_sum as f64;
        let scale = 1.0 / token_sum as f64;
        for g in grads.values_mut() {
            *g *= scale;
        }
        adam.step(&mut model.params, &grads, lr);
    }
    last
}
