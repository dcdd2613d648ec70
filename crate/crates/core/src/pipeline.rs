//! Inference stack: whitening, bagging, candidate decoding, skeleton-level
//! deduplication, constant refinement and unscaling, with the four ablation
//! modes (skeleton+BFGS, E2E variants).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{skeletonize, Expr};
use crate::generator::{mean_std, SampleSet};
use crate::refine::{random_init, refine, RefineOptions, RefineProblem, RefineResult, RefineStatus};
use crate::tokenizer::{EncodeMode, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Skeleton-trained decoder, constants always fitted from random init.
    SkeletonBfgs,
    E2eNoBfgs,
    E2eBfgsRandom,
    E2eBfgsModel,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::SkeletonBfgs => "skeleton+bfgs",
            PipelineMode::E2eNoBfgs => "e2e-no-bfgs",
            PipelineMode::E2eBfgsRandom => "e2e+bfgs-random",
            PipelineMode::E2eBfgsModel => "e2e+bfgs-model",
        }
    }

    pub fn parse(s: &str) -> Option<PipelineMode> {
        match s {
            "skeleton+bfgs" => Some(PipelineMode::SkeletonBfgs),
            "e2e-no-bfgs" => Some(PipelineMode::E2eNoBfgs),
            "e2e+bfgs-random" => Some(PipelineMode::E2eBfgsRandom),
            "e2e+bfgs-model" => Some(PipelineMode::E2eBfgsModel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Bag-count cap B; the effective count is min(B, ceil(N / bag_size)).
    pub bags: usize,
    /// Candidates decoded per bag (C).
    pub candidates_per_bag: usize,
    /// Candidates kept for refinement (K).
    pub refine_budget: usize,
    pub bag_size: usize,
    pub mode: PipelineMode,
    pub seed: u64,
    pub refine: RefineOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bags: 100,
            candidates_per_bag: 10,
            refine_budget: 10,
            bag_size: 200,
            mode: PipelineMode::E2eBfgsModel,
            seed: 0,
            refine: RefineOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.bags == 0 || self.candidates_per_bag == 0 || self.refine_budget == 0 {
            return Err("B, C and K must all be >= 1".into());
        }
        if self.refine_budget > self.bags * self.candidates_per_bag {
            return Err("K must not exceed B*C".into());
        }
        Ok(())
    }
}

/// Produces decoder token-id sequences for one whitened bag. Implemented by
/// the trained model and by test mocks.
pub trait CandidateDecoder: Sync {
    fn decode(&self, bag: &SampleSet, count: usize, seed: u64) -> Vec<Vec<u32>>;
}

/// Mock decoder that always emits a fixed list of expressions (encoded to
/// tokens), regardless of the bag contents.
pub struct ExprListDecoder {
    pub vocab: Vocab,
    pub exprs: Vec<Arc<Expr>>,
    pub mode: EncodeMode,
}

impl CandidateDecoder for ExprListDecoder {
    fn decode(&self, _bag: &SampleSet, count: usize, _seed: u64) -> Vec<Vec<u32>> {
        self.exprs
            .iter()
            .take(count)
            .filter_map(|e| self.vocab.encode_expr(e, self.mode).ok())
            .map(|s| s.tokens)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    /// Expression in whitened coordinates (constants substituted).
    pub expr_whitened: Arc<Expr>,
    /// Canonical skeleton print used for deduplication.
    pub skeleton_key: String,
    /// MSE on all whitened points before refinement.
    pub pre_refine_mse: f64,
    pub refinement: Option<RefineResult>,
    /// Final expression in original coordinates.
    pub expr: Arc<Expr>,
    /// MSE on all whitened points after refinement.
    pub mse: f64,
}

#[derive(Debug, Clone, Error)]
pub enum PipelineError {
    #[error("no candidate decoded to a well-formed expression")]
    EmptyCandidates,
    #[error("dataset is empty or dimension is zero")]
    EmptyData,
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Ranked candidates, best first.
    pub candidates: Vec<Candidate>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Dimensions whose std was zero; sigma was forced to 1 there.
    pub degenerate_dims: Vec<usize>,
    pub mode: PipelineMode,
    /// Candidates decoded / parsed (diagnostics).
    pub decoded: usize,
    pub parsed: usize,
}

impl FitResult {
    pub fn best(&self) -> &Candidate {
        &self.candidates[0]
    }

    /// Predict on raw (unwhitened) coordinates.
    pub fn predict(&self, x_new: &[f64]) -> Option<f64> {
        self.best().expr.evaluate(x_new).ok()
    }

    /// Exportable fitted-model document.
    pub fn export(&self) -> serde_json::Value {
        let best = self.best();
        serde_json::json!({
            "formula": best.expr.infix(),
            "prefix": best.expr.prefix().split(' ').collect::<Vec<_>>(),
            "mu": self.mu,
            "sigma": self.sigma,
            "mode": self.mode.name(),
            "complexity": best.expr.complexity(),
            "mse_whitened": best.mse,
            "pre_refine_mse": best.pre_refine_mse,
            "refined": best.refinement.is_some(),
            "candidates": self.candidates.len(),
        })
    }
}

/// MSE of a whitened-coordinates expression over a whitened sample set;
/// +inf when any point fails to evaluate.
pub fn candidate_mse(expr: &Expr, data: &SampleSet) -> f64 {
    let mut acc = 0.0;
    for (x, &y) in data.x.iter().zip(&data.y) {
        match expr.evaluate(x) {
            Ok(v) => acc += (v - y) * (v - y),
            Err(_) => return f64::INFINITY,
        }
    }
    acc / data.len() as f64
}

/// Ascending-MSE order with ties broken by node count then skeleton key.
pub fn rank_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        a.mse
            .partial_cmp(&b.mse)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.expr.complexity().cmp(&b.expr.complexity()))
            .then_with(|| a.skeleton_key.cmp(&b.skeleton_key))
    });
}

/// Split shuffled indices into at most `max_bags` bags of `bag_size`.
fn make_bags(n: usize, bag_size: usize, max_bags: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    if n <= bag_size {
        return vec![(0..n).collect()];
    }
    let n_bags = max_bags.min(n.div_ceil(bag_size));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate((n_bags * bag_size).min(n));
    idx.chunks(bag_size).take(n_bags).map(|c| c.to_vec()).collect()
}

/// The full inference stack on a raw (unwhitened) dataset.
pub fn fit(
    x_raw: &[Vec<f64>],
    y: &[f64],
    decoder: &dyn CandidateDecoder,
    vocab: &Vocab,
    cfg: &PipelineConfig,
) -> Result<FitResult, PipelineError> {
    cfg.validate().map_err(PipelineError::BadConfig)?;
    let n = y.len();
    if n == 0 || x_raw.is_empty() || x_raw[0].is_empty() {
        return Err(PipelineError::EmptyData);
    }
    let dim = x_raw[0].len();

    // (1) whiten.
    let (mu, sigma, degenerate_dims) = mean_std(x_raw);
    let x_white: Vec<Vec<f64>> = x_raw
        .iter()
        .map(|row| (0..dim).map(|d| (row[d] - mu[d]) / sigma[d]).collect())
        .collect();
    let data = SampleSet {
        x: x_white,
        y: y.to_vec(),
        mu: mu.clone(),
        sigma: sigma.clone(),
        source: None,
    };

    // (2) bags.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bags = make_bags(n, cfg.bag_size, cfg.bags, &mut rng);

    // (3)-(4) decode and parse; malformed sequences are dropped.
    let mut decoded = 0usize;
    let mut exprs: Vec<Arc<Expr>> = Vec::new();
    for (b, bag_idx) in bags.iter().enumerate() {
        let bag = data.select(bag_idx);
        let seqs = decoder.decode(&bag, cfg.candidates_per_bag, cfg.seed.wrapping_add(b as u64));
        for seq in seqs {
            decoded += 1;
            if let Ok(e) = vocab.decode_expr(&seq) {
                exprs.push(e);
            }
        }
    }

    // Skeleton-mode decoders emit placeholder slots: give each candidate
    // random-init constants up front so it can be scored like any other.
    let mut rng2 = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let exprs: Vec<Arc<Expr>> = exprs
        .into_iter()
        .map(|e| {
            if e.contains_slot() {
                let sk = crate::expr::Skeleton::from_tree(e);
                let init = random_init(&sk, &mut rng2);
                sk.substitute(&init)
            } else {
                e
            }
        })
        .collect();
    let parsed = exprs.len();
    if exprs.is_empty() {
        return Err(PipelineError::EmptyCandidates);
    }

    // (5) score on ALL whitened points.
    let mut scored: Vec<(Arc<Expr>, String, f64)> = exprs
        .into_iter()
        .map(|e| {
            let key = skeletonize(&e).0.key();
            let mse = candidate_mse(&e, &data);
            (e, key, mse)
        })
        .collect();

    // (6) dedup by skeleton key, keeping the best scorer per key.
    scored.sort_by(|a, b| {
        a.1.cmp(&b.1).then(a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal))
    });
    scored.dedup_by(|a, b| a.1 == b.1);

    // (7) keep the top K by pre-refinement error.
    scored.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal));
    scored.truncate(cfg.refine_budget);

    // (8) refinement, mode dependent; runs concurrently per candidate.
    let candidates: Vec<Candidate> = scored
        .into_par_iter()
        .enumerate()
        .map(|(i, (expr, skeleton_key, pre_refine_mse))| {
            let (sk, consts) = skeletonize(&expr);
            let refinement = match cfg.mode {
                PipelineMode::E2eNoBfgs => None,
                PipelineMode::E2eBfgsModel | PipelineMode::SkeletonBfgs => {
                    let opts = RefineOptions {
                        seed: cfg.seed.wrapping_add(i as u64),
                        ..cfg.refine.clone()
                    };
                    Some(refine(
                        &RefineProblem {
                            skeleton: sk.clone(),
                            init: consts.clone(),
                            data: data.clone(),
                        },
                        &opts,
                    ))
                }
                PipelineMode::E2eBfgsRandom => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xab0 + i as u64));
                    let init = random_init(&sk, &mut rng);
                    let opts = RefineOptions {
                        seed: cfg.seed.wrapping_add(i as u64),
                        ..cfg.refine.clone()
                    };
                    Some(refine(
                        &RefineProblem { skeleton: sk.clone(), init, data: data.clone() },
                        &opts,
                    ))
                }
            };
            let expr_whitened = match &refinement {
                Some(r) if r.status != RefineStatus::DomainFailure && r.loss <= r.initial_loss => {
                    sk.substitute(&r.theta)
                }
                _ => expr.clone(),
            };
            let mse = candidate_mse(&expr_whitened, &data);
            // (9) unscale back to original coordinates.
            let unscaled = expr_whitened.substitute_affine(&mu, &sigma);
            Candidate {
                expr_whitened,
                skeleton_key,
                pre_refine_mse,
                refinement,
                expr: unscaled,
                mse,
            }
        })
        .collect();

    // (10) final ranking on post-refinement error.
    let mut candidates = candidates;
    rank_candidates(&mut candidates);

    Ok(FitResult {
        candidates,
        mu,
        sigma,
        degenerate_dims,
        mode: cfg.mode,
        decoded,
        parsed,
    })
}
