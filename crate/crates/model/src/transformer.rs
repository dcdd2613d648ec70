//! Encoder-decoder sequence model over point sets.
//!
//! The embedder maps each data point (a fixed-width row of numeric tokens) to
//! one embedding, so the encoder sequence length equals the number of points.
//! The encoder carries no positional information and is therefore permutation
//! equivariant over points; the decoder adds learned positional embeddings.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use symreg_core::Vocab;

use crate::autodiff::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_max: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    /// Hidden width of the 2-layer point embedder.
    pub d_embedder_hidden: usize,
    pub max_dec_len: usize,
    pub max_points: usize,
    // Optimizer schedule: linear warmup then inverse-square-root decay.
    pub warmup_steps: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    /// Minimum number of target tokens per optimizer step.
    pub batch_tokens: usize,
    pub temperature: f64,
}

impl ModelConfig {
    /// Small configuration meant for CPU-scale experiments.
    pub fn toy(d_max: usize) -> ModelConfig {
        ModelConfig {
            d_max,
            d_emb: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 4,
            d_ff: 128,
            d_embedder_hidden: 64,
            max_dec_len: 64,
            max_points: 200,
            // CPU-scale runs are a few thousand steps; a long warmup would
            // leave the whole run at negligible learning rates.
            warmup_steps: 500,
            lr_start: 1e-7,
            lr_peak: 1e-3,
            batch_tokens: 10_000,
            temperature: 1.0,
        }
    }

    /// The reference full-scale configuration; expressible but not a training
    /// target on one machine.
    pub fn full(d_max: usize) -> ModelConfig {
        ModelConfig {
            d_emb: 512,
            n_heads: 16,
            enc_layers: 4,
            dec_layers: 16,
            d_ff: 2048,
            d_embedder_hidden: 512,
            warmup_steps: 10_000,
            lr_peak: 2e-4,
            ..ModelConfig::toy(d_max)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_emb % self.n_heads != 0 {
            return Err(format!("d_emb {} not divisible by heads {}", self.d_emb, self.n_heads));
        }
        if self.d_emb == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err("zero-size model".into());
        }
        Ok(())
    }

    /// Learning rate at a 1-based optimizer step.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            self.lr_start + (self.lr_peak - self.lr_start) * t
        } else {
            self.lr_peak * (self.warmup_steps as f64 / step as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNormP {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnP {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FfnP {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncLayerP {
    pub ln1: LayerNormP,
    pub attn: AttnP,
    pub ln2: LayerNormP,
    pub ffn: FfnP,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecLayerP {
    pub ln1: LayerNormP,
    pub self_attn: AttnP,
    pub ln2: LayerNormP,
    pub cross_attn: AttnP,
    pub ln3: LayerNormP,
    pub ffn: FfnP,
}

/// Parameter layout: indices into the flat parameter store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamLayout {
    pub enc_tok_emb: usize,
    pub dec_tok_emb: usize,
    pub dec_pos_emb: usize,
    pub embed_w1: usize,
    pub embed_b1: usize,
    pub embed_w2: usize,
    pub embed_b2: usize,
    pub enc_layers: Vec<EncLayerP>,
    pub enc_ln: LayerNormP,
    pub dec_layers: Vec<DecLayerP>,
    pub dec_ln: LayerNormP,
    pub out_w: usize,
    pub out_b: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub layout: ParamLayout,
    pub params: Vec<Array2<f64>>,
    pub names: Vec<String>,
}

struct ParamStore<'r> {
    params: Vec<Array2<f64>>,
    names: Vec<String>,
    rng: &'r mut ChaCha8Rng,
}

impl ParamStore<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> usize {
        let v = Array2::from_shape_simple_fn((rows, cols), || {
            self.rng.sample::<f64, _>(StandardNormal) * std
        });
        self.names.push(name.into());
        self.params.push(v);
        self.params.len() - 1
    }

    fn filled(&mut self, name: &str, rows: usize, cols: usize, fill: f64) -> usize {
        self.names.push(name.into());
        self.params.push(Array2::from_elem((rows, cols), fill));
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = self.normal(&format!("{name}.w"), fan_in, fan_out, std);
        let b = self.filled(&format!("{name}.b"), 1, fan_out, 0.0);
        (w, b)
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNormP {
        LayerNormP {
            gamma: self.filled(&format!("{name}.gamma"), 1, dim, 1.0),
            beta: self.filled(&format!("{name}.beta"), 1, dim, 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> AttnP {
        let dk = d / heads;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / (dk as f64).sqrt();
        let mk = |s: &mut Self, part: &str, rows, cols, std| {
            (0..heads)
                .map(|h| s.normal(&format!("{name}.{part}{h}"), rows, cols, std))
                .collect::<Vec<_>>()
        };
        AttnP {
            wq: mk(self, "wq", d, dk, std_in),
            wk: mk(self, "wk", d, dk, std_in),
            wv: mk(self, "wv", d, dk, std_in),
            wo: mk(self, "wo", dk, d, std_out),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> FfnP {
        let (w1, b1) = self.linear(&format!("{name}.fc1"), d, d_ff);
        let (w2, b2) = self.linear(&format!("{name}.fc2"), d_ff, d);
        FfnP { w1, b1, w2, b2 }
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Model {
        use rand::SeedableRng;
        config.validate().expect("invalid model config");
        assert_eq!(config.d_max, vocab.d_max, "config/vocab dimension mismatch");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore { params: Vec::new(), names: Vec::new(), rng: &mut rng };
        let d = config.d_emb;
        let point_width = 3 * (config.d_max + 1) * d;

        let enc_tok_emb = s.normal("enc_tok_emb", vocab.encoder_size(), d, 0.02);
        let dec_tok_emb = s.normal("dec_tok_emb", vocab.decoder_size(), d, 0.02);
        let dec_pos_emb = s.normal("dec_pos_emb", config.max_dec_len, d, 0.02);
        let (embed_w1, embed_b1) = s.linear("embedder.fc1", point_width, config.d_embedder_hidden);
        let (embed_w2, embed_b2) = s.linear("embedder.fc2", config.d_embedder_hidden, d);

        let enc_layers = (0..config.enc_layers)
            .map(|i| EncLayerP {
                ln1: s.layer_norm(&format!("enc{i}.ln1"), d),
                attn: s.attention(&format!("enc{i}.attn"), d, config.n_heads),
                ln2: s.layer_norm(&format!("enc{i}.ln2"), d),
                ffn: s.ffn(&format!("enc{i}"), d, config.d_ff),
            })
            .collect();
        let enc_ln = s.layer_norm("enc.final_ln", d);

        let dec_layers = (0..config.dec_layers)
            .map(|i| DecLayerP {
                ln1: s.layer_norm(&format!("dec{i}.ln1"), d),
                self_attn: s.attention(&format!("dec{i}.self_attn"), d, config.n_heads),
                ln2: s.layer_norm(&format!("dec{i}.ln2"), d),
                cross_attn: s.attention(&format!("dec{i}.cross_attn"), d, config.n_heads),
                ln3: s.layer_norm(&format!("dec{i}.ln3"), d),
                ffn: s.ffn(&format!("dec{i}"), d, config.d_ff),
            })
            .collect();
        let dec_ln = s.layer_norm("dec.final_ln", d);
        let (out_w, out_b) = s.linear("out", d, vocab.decoder_size());

        let layout = ParamLayout {
            enc_tok_emb,
            dec_tok_emb,
            dec_pos_emb,
            embed_w1,
            embed_b1,
            embed_w2,
            embed_b2,
            enc_layers,
            enc_ln,
            dec_layers,
            dec_ln,
            out_w,
            out_b,
        };
        Model { config, vocab, layout, params: s.params, names: s.names }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// One forward pass: lazily mirrors parameters onto a fresh tape.
pub struct Forward<'m> {
    pub tape: Tape,
    model: &'m Model,
    nodes: Vec<Option<NodeId>>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model) -> Forward<'m> {
        Forward { tape: Tape::new(), model, nodes: vec![None; model.params.len()] }
    }

    fn p(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let id = self.tape.param(self.model.params[idx].clone(), idx);
        self.nodes[idx] = Some(id);
        id
    }

    fn linear(&mut self, x: NodeId, w: usize, b: usize) -> NodeId {
        let wn = self.p(w);
        let bn = self.p(b);
        let xw = self.tape.matmul(x, wn);
        self.tape.add_row(xw, bn)
    }

    fn attention(&mut self, q_in: NodeId, kv_in: NodeId, p: &AttnP, mask: Option<NodeId>) -> NodeId {
        let dk = self.model.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out: Option<NodeId> = None;
        for h in 0..self.model.config.n_heads {
            let (wq, wk, wv, wo) = (self.p(p.wq[h]), self.p(p.wk[h]), self.p(p.wv[h]), self.p(p.wo[h]));
            let q = self.tape.matmul(q_in, wq);
            let k = self.tape.matmul(kv_in, wk);
            let v = self.tape.matmul(kv_in, wv);
            let scores = self.tape.matmul_nt(q, k);
            let mut scores = self.tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = self.tape.add(scores, m);
            }
            let attn = self.tape.softmax_rows(scores);
            let ctx = self.tape.matmul(attn, v);
            let proj = self.tape.matmul(ctx, wo);
            out = Some(match out {
                Some(acc) => self.tape.add(acc, proj),
                None => proj,
            });
        }
        out.expect("at least one head")
    }

    fn ffn(&mut self, x: NodeId, p: &FfnP) -> NodeId {
        let h = self.linear(x, p.w1, p.b1);
        let h = self.tape.relu(h);
        self.linear(h, p.w2, p.b2)
    }

    fn norm(&mut self, x: NodeId, p: LayerNormP) -> NodeId {
        let gamma = self.p(p.gamma);
        let beta = self.p(p.beta);
        self.tape.layer_norm(x, gamma, beta)
    }

    /// Map encoded point rows to one embedding per point.
    pub fn embed_points(&mut self, rows: &[Vec<u32>]) -> NodeId {
        let table = self.p(self.model.layout.enc_tok_emb);
        let ids: Vec<Vec<usize>> =
            rows.iter().map(|r| r.iter().map(|&t| t as usize).collect()).collect();
        let concat = self.tape.gather_concat(table, ids);
        let (w1, b1) = (self.model.layout.embed_w1, self.model.layout.embed_b1);
        let (w2, b2) = (self.model.layout.embed_w2, self.model.layout.embed_b2);
        let h = self.linear(concat, w1, b1);
        let h = self.tape.relu(h);
        self.linear(h, w2, b2)
    }

    /// Full encoder: point rows -> memory of shape [N, d_emb].
    pub fn encode(&mut self, rows: &[Vec<u32>]) -> NodeId {
        let mut x = self.embed_points(rows);
        let layers = self.model.layout.enc_layers.clone();
        for layer in &layers {
            let n1 = self.norm(x, layer.ln1);
            let a = self.attention(n1, n1, &layer.attn, None);
            x = self.tape.add(x, a);
            let n2 = self.norm(x, layer.ln2);
            let f = self.ffn(n2, &layer.ffn);
            x = self.tape.add(x, f);
        }
        self.norm(x, self.model.layout.enc_ln)
    }

    fn causal_mask(&mut self, t: usize) -> NodeId {
        let mut m = Array2::zeros((t, t));
        for i in 0..t {
            for j in i + 1..t {
                m[[i, j]] = -1e30;
            }
        }
        self.tape.constant(m)
    }

    /// Decoder logits [T, decoder vocab] for teacher-forced input ids.
    pub fn decode_logits(&mut self, memory: NodeId, input_ids: &[u32]) -> NodeId {
        let t = input_ids.len();
        assert!(t <= self.model.config.max_dec_len, "decoder input too long");
        let tok_table = self.p(self.model.layout.dec_tok_emb);
        let pos_table = self.p(self.model.layout.dec_pos_emb);
        let ids: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();
        let tok = self.tape.gather(tok_table, &ids);
        let pos: Vec<usize> = (0..t).collect();
        let pos = self.tape.gather(pos_table, &pos);
        let mut x = self.tape.add(tok, pos);

        let mask = self.causal_mask(t);
        let layers = self.model.layout.dec_layers.clone();
        for layer in &layers {
            let n1 = self.norm(x, layer.ln1);
            let a = self.attention(n1, n1, &layer.self_attn, Some(mask));
            x = self.tape.add(x, a);
            let n2 = self.norm(x, layer.ln2);
            let c = self.attention(n2, memory, &layer.cross_attn, None);
            x = self.tape.add(x, c);
            let n3 = self.norm(x, layer.ln3);
            let f = self.ffn(n3, &layer.ffn);
            x = self.tape.add(x, f);
        }
        let x = self.norm(x, self.model.layout.dec_ln);
        self.linear(x, self.model.layout.out_w, self.model.layout.out_b)
    }

    /// Teacher-forced token cross entropy for one example. The decoder input
    /// is BOS + target; labels are target + EOS.
    pub fn example_loss(&mut self, rows: &[Vec<u32>], target: &[u32]) -> (NodeId, usize) {
        let memory = self.encode(rows);
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(self.model.vocab.bos());
        input.extend_from_slice(target);
        let logits = self.decode_logits(memory, &input);
        let mut labels: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        labels.push(self.model.vocab.eos() as usize);
        let n = labels.len();
        (self.tape.cross_entropy(logits, labels), n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use symreg_core::{GeneratorConfig, Vocab};

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            d_emb: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 32,
            d_embedder_hidden: 16,
            ..ModelConfig::toy(2)
        };
        Model::new(cfg, Vocab::new(2), 1)
    }

    fn sample_rows(model: &Model, n: usize) -> Vec<Vec<u32>> {
        use rand::SeedableRng;
        let gen_cfg = GeneratorConfig { d_max: 2, ..GeneratorConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = symreg_core::generator::generate_example(&gen_cfg, &mut rng).unwrap();
        let mut rows = model.vocab.encode_points(&ex.samples).unwrap();
        rows.truncate(n);
        rows
    }

    #[test]
    fn embedder_is_pointwise() {
        let model = tiny_model();
        let rows = sample_rows(&model, 6);
        let mut f = Forward::new(&model);
        let full = f.embed_points(&rows);
        let full = f.tape.value(full).clone();
        // Embedding a subset row by row gives the same vectors.
        for (i, row) in rows.iter().enumerate() {
            let mut g = Forward::new(&model);
            let one = g.embed_points(std::slice::from_ref(row));
            let one = g.tape.value(one).clone();
            let diff = (&full.row(i) - &one.row(0)).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(diff == 0.0, "row {i} differs by {diff}");
        }
    }

    #[test]
    fn encoder_permutation_invariance_of_decoder_logits() {
        let model = tiny_model();
        let mut rows = sample_rows(&model, 8);
        let input = vec![model.vocab.bos()];

        let mut f = Forward::new(&model);
        let mem = f.encode(&rows);
        let node_a = f.decode_logits(mem, &input);
        let logits_a = f.tape.value(node_a).clone();

        rows.reverse();
        rows.swap(1, 3);
        let mut g = Forward::new(&model);
        let mem = g.encode(&rows);
        let node_b = g.decode_logits(mem, &input);
        let logits_b = g.tape.value(node_b).clone();

        let diff = (&logits_a - &logits_b).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-5, "logits moved by {diff} under point permutation");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let model = tiny_model();
        let rows = sample_rows(&model, 3);
        let target = vec![model.vocab.decoder_id(&symreg_core::tokenizer::Token::Var(1))];

        let mut f = Forward::new(&model);
        let (loss, _) = f.example_loss(&rows, &target);
        let grads = f.tape.backward(loss);

        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        for (pi, g) in &grads {
            // Spot-check a few entries per parameter.
            for _ in 0..2 {
                let r = rng.gen_range(0..g.nrows());
                let c = rng.gen_range(0..g.ncols());
                let h = 1e-5;
                let eval = |delta: f64| {
                    let mut m2 = Model {
                        config: model.config.clone(),
                        vocab: model.vocab.clone(),
                        layout: model.layout.clone(),
                        params: model.params.clone(),
                        names: model.names.clone(),
                    };
                    m2.params[*pi][[r, c]] += delta;
                    let mut f2 = Forward::new(&m2);
                    let (l, _) = f2.example_loss(&rows, &target);
                    f2.tape.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[[r, c]];
                assert!(
                    (an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-3),
                    "param {pi} [{r},{c}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn learning_rate_schedule_shape() {
        let cfg = ModelConfig::full(2);
        assert!(cfg.learning_rate(1) < 1e-6);
        assert!((cfg.learning_rate(10_000) - 2e-4).abs() < 1e-9);
        // Inverse-square-root decay afterwards.
        assert!((cfg.learning_rate(40_000) - 1e-4).abs() < 1e-9);

        let toy = ModelConfig::toy(2);
        assert!(toy.learning_rate(1) < toy.lr_peak / 100.0);
        assert!((toy.learning_rate(toy.warmup_steps) - toy.lr_peak).abs() < 1e-9);
        assert!(toy.learning_rate(4 * toy.warmup_steps) < toy.lr_peak * 0.51);
    }
}
