//! Decoding strategies: temperature sampling and length-normalized beam
//! search over the trained decoder.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symreg_core::generator::SampleSet;
use symreg_core::pipeline::CandidateDecoder;
use symreg_core::tokenizer::Token;

use crate::transformer::{Forward, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Emitted tokens, without BOS/EOS.
    pub tokens: Vec<u32>,
    /// False when the length limit was hit before EOS; such sequences are
    /// usually malformed and are filtered downstream.
    pub terminated: bool,
    /// Mean log-probability per emitted token (including EOS when present).
    pub score: f64,
}

/// Precompute the encoder memory once for repeated decodes of one point set.
pub struct EncodedInput {
    memory: Array2<f64>,
}

pub fn encode_input(model: &Model, rows: &[Vec<u32>]) -> EncodedInput {
    let mut f = Forward::new(model);
    let m = f.encode(rows);
    EncodedInput { memory: f.tape.value(m).clone() }
}

/// Next-token log-probabilities given the generated prefix.
fn step_logprobs(model: &Model, enc: &EncodedInput, prefix: &[u32]) -> Vec<f64> {
    let mut f = Forward::new(model);
    let mem = f.tape.constant(enc.memory.clone());
    let logits_node = f.decode_logits(mem, prefix);
    let logits = f.tape.value(logits_node);
    let last = logits.row(logits.nrows() - 1);

    let bos = model.vocab.bos() as usize;
    let pad = model.vocab.decoder_pad() as usize;
    let mut lp: Vec<f64> = last.iter().copied().collect();
    // Structural tokens are never valid emissions.
    lp[bos] = f64::NEG_INFINITY;
    lp[pad] = f64::NEG_INFINITY;
    let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = lp.iter().map(|&v| (v - m).exp()).sum();
    let log_z = m + z.ln();
    lp.iter_mut().for_each(|v| *v -= log_z);
    lp
}

/// `count` independent ancestral samples at the given temperature.
/// Temperature 0 (or below the sampling floor) reduces to greedy decoding.
pub fn decode_sample(
    model: &Model,
    enc: &EncodedInput,
    count: usize,
    temperature: f64,
    seed: u64,
) -> Vec<DecodeOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eos = model.vocab.eos();
    let max_new = model.config.max_dec_len - 1;
    (0..count)
        .map(|_| {
            let mut prefix = vec![model.vocab.bos()];
            let mut logprob = 0.0;
            let mut terminated = false;
            while prefix.len() - 1 < max_new {
                let lp = step_logprobs(model, enc, &prefix);
                let choice = if temperature < 1e-8 {
                    argmax(&lp)
                } else {
                    sample_categorical(&lp, temperature, &mut rng)
                };
                logprob += lp[choice];
                if choice as u32 == eos {
                    terminated = true;
                    break;
                }
                prefix.push(choice as u32);
            }
            let tokens: Vec<u32> = prefix[1..].to_vec();
            let n = tokens.len() + usize::from(terminated);
            DecodeOutput { tokens, terminated, score: logprob / n.max(1) as f64 }
        })
        .collect()
}

fn argmax(lp: &[f64]) -> usize {
    lp.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap()
}

fn sample_categorical(lp: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = lp.iter().map(|&v| v / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Length-normalized beam search; results are ranked by non-increasing mean
/// log-probability per token.
pub fn decode_beam(model: &Model, enc: &EncodedInput, beam_size: usize) -> Vec<DecodeOutput> {
    assert!(beam_size >= 1);
    let eos = model.vocab.eos();
    let max_new = model.config.max_dec_len - 1;

    struct Beam {
        prefix: Vec<u32>,
        logprob: f64,
    }
    let mut live = vec![Beam { prefix: vec![model.vocab.bos()], logprob: 0.0 }];
    let mut done: Vec<DecodeOutput> = Vec::new();

    for _ in 0..max_new {
        if live.is_empty() || done.len() >= beam_size {
            break;
        }
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        let lps: Vec<Vec<f64>> =
            live.iter().map(|b| step_logprobs(model, enc, &b.prefix)).collect();
        for (bi, lp) in lps.iter().enumerate() {
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            idx.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(std::cmp::Ordering::Equal));
            for &tok in idx.iter().take(beam_size) {
                expansions.push((bi, tok, live[bi].logprob + lp[tok]));
            }
        }
        expansions
            .sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        let mut next = Vec::new();
        for (bi, tok, logprob) in expansions.into_iter().take(beam_size) {
            if tok as u32 == eos {
                let tokens: Vec<u32> = live[bi].prefix[1..].to_vec();
                let n = tokens.len() + 1;
                done.push(DecodeOutput { tokens, terminated: true, score: logprob / n as f64 });
            } else {
                let mut prefix = live[bi].prefix.clone();
                prefix.push(tok as u32);
                next.push(Beam { prefix, logprob });
            }
        }
        live = next;
    }
    // Unfinished beams surface tagged as unterminated.
    for b in live {
        let tokens: Vec<u32> = b.prefix[1..].to_vec();
        let n = tokens.len().max(1);
        done.push(DecodeOutput { tokens, terminated: false, score: b.logprob / n as f64 });
    }
    done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    done.truncate(beam_size);
    done
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Sampling,
    Beam,
}

/// Adapter exposing a trained model as the pipeline's candidate source.
pub struct ModelDecoder {
    pub model: Model,
    pub strategy: DecodeStrategy,
    pub temperature: f64,
}

impl ModelDecoder {
    pub fn new(model: Model) -> ModelDecoder {
        let temperature = model.config.temperature;
        ModelDecoder { model, strategy: DecodeStrategy::Sampling, temperature }
    }
}

impl CandidateDecoder for ModelDecoder {
    fn decode(&self, bag: &SampleSet, count: usize, seed: u64) -> Vec<Vec<u32>> {
        let Ok(mut rows) = self.model.vocab.encode_points(bag) else {
            return Vec::new();
        };
        rows.truncate(self.model.config.max_points);
        if rows.is_empty() {
            return Vec::new();
        }
        let enc = encode_input(&self.model, &rows);
        let outs = match self.strategy {
            DecodeStrategy::Sampling => {
                decode_sample(&self.model, &enc, count, self.temperature, seed)
            }
            DecodeStrategy::Beam => decode_beam(&self.model, &enc, count),
        };
        outs.into_iter().filter(|o| o.terminated).map(|o| o.tokens).collect()
    }
}

/// Distinct skeleton keys among decoded candidates; parse failures are
/// ignored. Used to compare decoding strategies.
pub fn distinct_skeletons(model: &Model, outputs: &[DecodeOutput]) -> usize {
    let mut keys = std::collections::HashSet::new();
    for o in outputs {
        if let Ok(expr) = model.vocab.decode_expr(&o.tokens) {
            let (sk, _) = symreg_core::expr::skeletonize(&expr);
            keys.insert(sk.key());
        }
    }
    keys.len()
}

#[allow(dead_code)]
fn _token_type_check(t: &Token) -> bool {
    matches!(t, Token::Eos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use symreg_core::Vocab;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            d_emb: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 32,
            d_embedder_hidden: 16,
            max_dec_len: 12,
            ..ModelConfig::toy(2)
        };
        Model::new(cfg, Vocab::new(2), 21)
    }

    fn some_rows(model: &Model) -> Vec<Vec<u32>> {
        use rand::SeedableRng;
        let gen_cfg = symreg_core::GeneratorConfig {
            d_max: 2,
            n_max: 20,
            ..symreg_core::GeneratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = symreg_core::generator::generate_example(&gen_cfg, &mut rng).unwrap();
        let mut rows = model.vocab.encode_points(&ex.samples).unwrap();
        rows.truncate(8);
        rows
    }

    #[test]
    fn fixed_seed_gives_identical_samples() {
        let model = tiny_model();
        let enc = encode_input(&model, &some_rows(&model));
        let a = decode_sample(&model, &enc, 3, 1.0, 99);
        let b = decode_sample(&model, &enc, 3, 1.0, 99);
        assert_eq!(a, b);
        let c = decode_sample(&model, &enc, 3, 1.0, 100);
        assert_ne!(a, c, "different seeds should diverge on an untrained model");
    }

    #[test]
    fn zero_temperature_equals_greedy_and_beam_one() {
        let model = tiny_model();
        let enc = encode_input(&model, &some_rows(&model));
        let greedy = decode_sample(&model, &enc, 2, 0.0, 1);
        assert_eq!(greedy[0], greedy[1], "greedy candidates must be identical");
        let beam = decode_beam(&model, &enc, 1);
        assert_eq!(beam[0].tokens, greedy[0].tokens, "beam size 1 must equal greedy");
    }

    #[test]
    fn beam_scores_are_non_increasing() {
        let model = tiny_model();
        let enc = encode_input(&model, &some_rows(&model));
        let beams = decode_beam(&model, &enc, 5);
        assert!(!beams.is_empty());
        for w in beams.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn candidate_decoder_emits_token_sequences() {
        let model = tiny_model();
        let gen_cfg = symreg_core::GeneratorConfig {
            d_max: 2,
            n_max: 20,
            ..symreg_core::GeneratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = symreg_core::generator::generate_example(&gen_cfg, &mut rng).unwrap();
        let dec = ModelDecoder::new(tiny_model());
        let out = dec.decode(&ex.samples, 4, 3);
        // Untrained models may emit unterminated junk; the contract is only
        // that returned sequences were EOS-terminated.
        assert!(out.len() <= 4);
        let _ = model;
    }
}
