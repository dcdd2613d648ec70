//! Synthetic (function, points) example generation.
//!
//! Functions are sampled as random binary trees (uniform over shapes with a
//! given internal node count) decorated with weighted unary operators and
//! per-occurrence affine transforms. Inputs come from a rotated cluster
//! mixture and are whitened per dimension before the targets are computed.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{BinaryOp, DomainCause, EvalError, Expr, OperatorTable, UnaryOp, MAGNITUDE_CAP};
use crate::tokenizer::round_to_4_digits;

/// Table-3 generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Maximum input dimension.
    pub d_max: usize,
    /// Binary op count is drawn from U{D-1, D+b_max}.
    pub b_max: usize,
    /// Unary op count is drawn from U{0, u_max}.
    pub u_max: usize,
    pub operators: OperatorTable,
    /// Point count is drawn from U{10*D, n_max}.
    pub n_max: usize,
    /// Cluster count is drawn from U{1, k_max}.
    pub k_max: usize,
    /// Attempt cap before `generate_example` gives up.
    pub max_attempts: usize,
    /// Affine wraps are sampled per variable occurrence (true) or shared per
    /// variable symbol (false).
    pub affine_per_occurrence: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_max: 10,
            b_max: 5,
            u_max: 5,
            operators: OperatorTable::default(),
            n_max: 200,
            k_max: 10,
            max_attempts: 1000,
            affine_per_occurrence: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_max == 0 || self.n_max == 0 || self.k_max == 0 || self.max_attempts == 0 {
            return Err("all bounds must be positive".into());
        }
        if 10 * self.d_max > self.n_max {
            return Err(format!(
                "n_max={} < 10*d_max={}: the point-count range is empty for large D",
                self.n_max,
                10 * self.d_max
            ));
        }
        self.operators.validate()
    }
}

/// N points with their whitening metadata. When produced by the generator the
/// stored points are already whitened and `mu`/`sigma` describe the transform
/// that was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Ground-truth expression in whitened coordinates, absent for external
    /// data.
    pub source: Option<Arc<Expr>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, |row| row.len())
    }

    /// Selects a subset of rows by index, keeping metadata.
    pub fn select(&self, idx: &[usize]) -> SampleSet {
        SampleSet {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            source: self.source.clone(),
        }
    }
}

/// Per-dimension mean and population std of a raw point cloud. Zero-variance
/// dimensions report sigma = 1 and are flagged.
pub fn mean_std(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = x.len();
    let dim = x.first().map_or(0, |r| r.len());
    let mut mu = vec![0.0; dim];
    for row in x {
        for (d, v) in row.iter().enumerate() {
            mu[d] += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut sigma = vec![0.0; dim];
    for row in x {
        for (d, v) in row.iter().enumerate() {
            sigma[d] += (v - mu[d]) * (v - mu[d]);
        }
    }
    let mut degenerate = Vec::new();
    for (d, s) in sigma.iter_mut().enumerate() {
        *s = (*s / n as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
            degenerate.push(d);
        }
    }
    (mu, sigma, degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectCause {
    /// Some x_i fell outside the function's domain.
    Domain,
    /// Some |y_i| exceeded the magnitude cap.
    MagnitudeCap,
    /// A whitening dimension had zero variance.
    DegenerateStd,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GenError {
    #[error("input sampling rejected: {0:?}")]
    Rejected(RejectCause),
    #[error("gave up after {attempts} attempts ({domain} domain, {cap} cap rejections)")]
    GaveUp { attempts: usize, domain: usize, cap: usize },
}

/// A sampled function with its generation descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledFunction {
    pub expr: Arc<Expr>,
    pub dim: usize,
    pub binary_ops: usize,
    pub unary_ops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub function: SampledFunction,
    pub samples: SampleSet,
    /// Rejected attempts before this example was accepted.
    pub rejections_domain: usize,
    pub rejections_cap: usize,
}

// ---------------------------------------------------------------------------
// Binary tree shapes
// ---------------------------------------------------------------------------

/// Unlabeled binary tree: every internal node has exactly two children.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeShape {
    Leaf,
    Node(Box<TreeShape>, Box<TreeShape>),
}

/// Catalan numbers C_0..C_n.
pub fn catalan_table(n: usize) -> Vec<u128> {
    let mut c = vec![0u128; n + 1];
    c[0] = 1;
    for i in 1..=n {
        c[i] = (0..i).map(|j| c[j] * c[i - 1 - j]).sum();
    }
    c
}

/// Uniform sample over the C_b binary tree shapes with `b` internal nodes.
pub fn sample_tree_shape(b: usize, rng: &mut impl Rng) -> TreeShape {
    let cat = catalan_table(b);
    sample_shape_rec(b, &cat, rng)
}

fn sample_shape_rec(b: usize, cat: &[u128], rng: &mut impl Rng) -> TreeShape {
    if b == 0 {
        return TreeShape::Leaf;
    }
    // Left subtree size i with probability C_i * C_{b-1-i} / C_b.
    let total = cat[b];
    let mut r = rng.gen_range(0..total);
    let mut left = 0;
    for i in 0..b {
        let w = cat[i] * cat[b - 1 - i];
        if r < w {
            left = i;
            break;
        }
        r -= w;
    }
    TreeShape::Node(
        Box::new(sample_shape_rec(left, cat, rng)),
        Box::new(sample_shape_rec(b - 1 - left, cat, rng)),
    )
}

// ---------------------------------------------------------------------------
// Function sampling
// ---------------------------------------------------------------------------

/// Draw from D_aff: sign * mantissa * 10^exponent, rounded to 4 significant
/// digits so the tokenizer represents it exactly.
pub fn sample_affine_constant(rng: &mut impl Rng) -> f64 {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mantissa: f64 = rng.gen_range(0.0..1.0);
    let exponent: f64 = rng.gen_range(-2.0..2.0);
    round_to_4_digits(sign * mantissa * 10f64.powf(exponent))
}

/// Mutable working tree used during sampling only.
#[derive(Debug, Clone)]
enum WorkTree {
    Var(usize),
    Un(UnaryOp, Box<WorkTree>),
    Bin(BinaryOp, Box<WorkTree>, Box<WorkTree>),
}

impl WorkTree {
    fn node_count(&self) -> usize {
        match self {
            WorkTree::Var(_) => 1,
            WorkTree::Un(_, c) => 1 + c.node_count(),
            WorkTree::Bin(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Splice `op` above the node at prefix index `target` (0 = root).
    fn splice_unary(self, op: UnaryOp, target: usize) -> WorkTree {
        fn go(t: WorkTree, op: UnaryOp, target: usize, pos: &mut usize) -> WorkTree {
            let here = *pos;
            *pos += 1;
            if here == target {
                return WorkTree::Un(op, Box::new(t));
            }
            match t {
                WorkTree::Var(_) => t,
                WorkTree::Un(o, c) => WorkTree::Un(o, Box::new(go(*c, op, target, pos))),
                WorkTree::Bin(o, a, b) => {
                    let a = go(*a, op, target, pos);
                    let b = go(*b, op, target, pos);
                    WorkTree::Bin(o, Box::new(a), Box::new(b))
                }
            }
        }
        let mut pos = 0;
        go(self, op, target, &mut pos)
    }
}

fn affine_wrap(inner: Arc<Expr>, a: f64, b: f64) -> Arc<Expr> {
    Expr::binary(
        BinaryOp::Add,
        Expr::binary(BinaryOp::Mul, Expr::constant(a), inner),
        Expr::constant(b),
    )
}

/// Sample a random function per the six-step generation procedure. Returns
/// the decorated expression and its descriptors.
pub fn sample_function(cfg: &GeneratorConfig, rng: &mut impl Rng) -> SampledFunction {
    let dim = rng.gen_range(1..=cfg.d_max);
    sample_function_with_dim(cfg, dim, rng)
}

pub fn sample_function_with_dim(
    cfg: &GeneratorConfig,
    dim: usize,
    rng: &mut impl Rng,
) -> SampledFunction {
    let b_lo = dim.saturating_sub(1);
    let b = rng.gen_range(b_lo..=dim + cfg.b_max);
    let u = rng.gen_range(0..=cfg.u_max);
    sample_function_exact(cfg, dim, b, u, rng)
}

/// Same procedure with D, b, u pinned (used for difficulty stratification).
pub fn sample_function_exact(
    cfg: &GeneratorConfig,
    dim: usize,
    b: usize,
    u: usize,
    rng: &mut impl Rng,
) -> SampledFunction {
    assert!(b + 1 >= dim, "b+1 leaves must cover all {dim} variables");
    let bin_weights = WeightedIndex::new(cfg.operators.binary.iter().map(|(_, w)| *w)).unwrap();
    let un_weights = WeightedIndex::new(cfg.operators.unary.iter().map(|(_, w)| *w)).unwrap();

    // Steps 2-3: binary operator labels on a uniform tree shape.
    let shape = sample_tree_shape(b, rng);

    // Step 4: first `dim` leaves in prefix order get x_1..x_D, the rest are
    // uniform over the D variables.
    let mut next_leaf = 0usize;
    fn label(
        shape: &TreeShape,
        cfg: &GeneratorConfig,
        bin_weights: &WeightedIndex<f64>,
        dim: usize,
        next_leaf: &mut usize,
        rng: &mut impl Rng,
    ) -> WorkTree {
        match shape {
            TreeShape::Leaf => {
                let leaf_idx = *next_leaf;
                *next_leaf += 1;
                let d = if leaf_idx < dim { leaf_idx + 1 } else { rng.gen_range(1..=dim) };
                WorkTree::Var(d)
            }
            TreeShape::Node(l, r) => {
                let op = cfg.operators.binary[bin_weights.sample(rng)].0;
                let l = label(l, cfg, bin_weights, dim, next_leaf, rng);
                let r = label(r, cfg, bin_weights, dim, next_leaf, rng);
                WorkTree::Bin(op, Box::new(l), Box::new(r))
            }
        }
    }
    let mut tree = label(&shape, cfg, &bin_weights, dim, &mut next_leaf, rng);

    // Step 5: splice unary operators above uniformly chosen nodes.
    for _ in 0..u {
        let op = cfg.operators.unary[un_weights.sample(rng)].0;
        let target = rng.gen_range(0..tree.node_count());
        tree = tree.splice_unary(op, target);
    }

    // Step 6: affine wrap around every variable occurrence and unary node.
    let shared: Vec<(f64, f64)> = (0..=dim)
        .map(|_| (sample_affine_constant(rng), sample_affine_constant(rng)))
        .collect();
    fn decorate(
        t: &WorkTree,
        cfg: &GeneratorConfig,
        shared: &[(f64, f64)],
        rng: &mut impl Rng,
    ) -> Arc<Expr> {
        match t {
            WorkTree::Var(d) => {
                let (a, b) = if cfg.affine_per_occurrence {
                    (sample_affine_constant(rng), sample_affine_constant(rng))
                } else {
                    shared[*d]
                };
                affine_wrap(Expr::var(*d), a, b)
            }
            WorkTree::Un(op, c) => {
                let inner = Expr::unary(*op, decorate(c, cfg, shared, rng));
                let (a, b) = (sample_affine_constant(rng), sample_affine_constant(rng));
                affine_wrap(inner, a, b)
            }
            WorkTree::Bin(op, a, b) => {
                Expr::binary(*op, decorate(a, cfg, shared, rng), decorate(b, cfg, shared, rng))
            }
        }
    }
    let expr = decorate(&tree, cfg, &shared, rng);

    SampledFunction { expr, dim, binary_ops: b, unary_ops: u }
}

// ---------------------------------------------------------------------------
// Input sampling
// ---------------------------------------------------------------------------

/// Haar-distributed orthogonal matrix: QR of a standard gaussian matrix with
/// the R diagonal signs folded into Q.
pub fn haar_rotation(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Sample a whitened input cloud for `f` and compute the targets, rejecting
/// the whole set on any domain failure or capped |y|.
pub fn sample_inputs(
    f: &Expr,
    dim: usize,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<SampleSet, GenError> {
    let n = rng.gen_range(10 * dim..=cfg.n_max);
    sample_inputs_n(f, dim, n, cfg, rng)
}

pub fn sample_inputs_n(
    f: &Expr,
    dim: usize,
    n: usize,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<SampleSet, GenError> {
    let k = rng.gen_range(1..=cfg.k_max);
    let mut weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    // Floor allocation; the remainder goes to the last cluster.
    let mut counts: Vec<usize> = weights.iter().map(|w| (w * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    *counts.last_mut().unwrap() += n - assigned;

    let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
    for count in counts {
        let centroid: Vec<f64> =
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let scale: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gaussian = rng.gen_bool(0.5);
        let rot = haar_rotation(dim, rng);
        for _ in 0..count {
            let p: Vec<f64> = (0..dim)
                .map(|d| {
                    let z: f64 = if gaussian {
                        rng.sample(StandardNormal)
                    } else {
                        // Uniform with unit variance before scaling.
                        rng.gen_range(-SQRT3..SQRT3)
                    };
                    centroid[d] + scale[d] * z
                })
                .collect();
            let rotated: Vec<f64> =
                (0..dim).map(|i| (0..dim).map(|j| rot[(i, j)] * p[j]).sum()).collect();
            x.push(rotated);
        }
    }

    // Whiten per dimension.
    let (mu, sigma, degenerate) = mean_std(&x);
    if !degenerate.is_empty() {
        return Err(GenError::Rejected(RejectCause::DegenerateStd));
    }
    for row in &mut x {
        for d in 0..dim {
            row[d] = (row[d] - mu[d]) / sigma[d];
        }
    }

    // Targets on the whitened points; any failure rejects the whole set.
    let mut y = Vec::with_capacity(n);
    for row in &x {
        match f.evaluate(row) {
            Ok(v) => {
                debug_assert!(v.abs() <= MAGNITUDE_CAP);
                y.push(v);
            }
            Err(EvalError::Domain { cause: DomainCause::MagnitudeCap, .. }) => {
                return Err(GenError::Rejected(RejectCause::MagnitudeCap));
            }
            Err(_) => return Err(GenError::Rejected(RejectCause::Domain)),
        }
    }

    Ok(SampleSet { x, y, mu, sigma, source: Some(Arc::new(f.clone())) })
}

const SQRT3: f64 = 1.7320508075688772;

// ---------------------------------------------------------------------------
// Example generation
// ---------------------------------------------------------------------------

/// Sample function/input pairs until one survives rejection.
pub fn generate_example(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Example, GenError> {
    let mut domain = 0usize;
    let mut cap = 0usize;
    for attempt in 1..=cfg.max_attempts {
        let function = sample_function(cfg, rng);
        match sample_inputs(&function.expr, function.dim, cfg, rng) {
            Ok(samples) => {
                return Ok(Example {
                    function,
                    samples,
                    rejections_domain: domain,
                    rejections_cap: cap,
                })
            }
            Err(GenError::Rejected(RejectCause::MagnitudeCap)) => cap += 1,
            Err(GenError::Rejected(_)) => domain += 1,
            Err(e @ GenError::GaveUp { .. }) => return Err(e),
        }
        if attempt == cfg.max_attempts {
            return Err(GenError::GaveUp { attempts: attempt, domain, cap });
        }
    }
    unreachable!()
}

/// Deterministic example stream: example `i` uses its own RNG stream derived
/// from `base_seed` and `i`, so generation parallelizes and train/validation
/// splits are disjoint by index range.
pub struct ExampleStream {
    cfg: GeneratorConfig,
    base_seed: u64,
    next_index: u64,
}

impl ExampleStream {
    pub fn new(cfg: GeneratorConfig, base_seed: u64) -> ExampleStream {
        ExampleStream { cfg, base_seed, next_index: 0 }
    }

    pub fn with_start(cfg: GeneratorConfig, base_seed: u64, start: u64) -> ExampleStream {
        ExampleStream { cfg, base_seed, next_index: start }
    }

    pub fn rng_for(base_seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(index);
        rng
    }

    /// Generate the example at an arbitrary index without advancing.
    pub fn example_at(&self, index: u64) -> Result<Example, GenError> {
        let mut rng = Self::rng_for(self.base_seed, index);
        generate_example(&self.cfg, &mut rng)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }
}

impl Iterator for ExampleStream {
    type Item = (u64, Example);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let idx = self.next_index;
            self.next_index += 1;
            match self.example_at(idx) {
                Ok(ex) => return Some((idx, ex)),
                Err(_) => continue, // pathological stream index, skip it
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Generator statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub examples: usize,
    /// Histogram over input dimension, index d-1.
    pub dim_hist: Vec<usize>,
    /// Histogram over unary op count.
    pub unary_hist: Vec<usize>,
    /// Histogram over binary op count.
    pub binary_hist: Vec<usize>,
    /// Histogram over expression node count (bucketed by 10).
    pub length_hist: Vec<usize>,
    pub rejections_domain: usize,
    pub rejections_cap: usize,
    /// Rejections bucketed by (D, u): key "D=<d>,u=<u>".
    pub rejections_by_bucket: std::collections::BTreeMap<String, usize>,
}

fn bump(hist: &mut Vec<usize>, idx: usize) {
    if hist.len() <= idx {
        hist.resize(idx + 1, 0);
    }
    hist[idx] += 1;
}

/// Empirical generation statistics over `n_examples` accepted examples.
pub fn generator_stats(cfg: &GeneratorConfig, n_examples: usize, seed: u64) -> GeneratorStats {
    assert!(n_examples >= 1);
    let mut stats = GeneratorStats::default();
    let mut index = 0u64;
    while stats.examples < n_examples {
        let mut rng = ExampleStream::rng_for(seed, index);
        index += 1;
        // Count rejections ourselves so they land in per-(D,u) buckets.
        let mut accepted = None;
        for _ in 0..cfg.max_attempts {
            let function = sample_function(cfg, &mut rng);
            match sample_inputs(&function.expr, function.dim, cfg, &mut rng) {
                Ok(samples) => {
                    accepted = Some((function, samples));
                    break;
                }
                Err(GenError::Rejected(cause)) => {
                    let key = format!("D={},u={}", function.dim, function.unary_ops);
                    *stats.rejections_by_bucket.entry(key).or_default() += 1;
                    match cause {
                        RejectCause::MagnitudeCap => stats.rejections_cap += 1,
                        _ => stats.rejections_domain += 1,
                    }
                }
                Err(_) => break,
            }
        }
        let Some((function, _)) = accepted else { continue };
        stats.examples += 1;
        bump(&mut stats.dim_hist, function.dim - 1);
        bump(&mut stats.unary_hist, function.unary_ops);
        bump(&mut stats.binary_hist, function.binary_ops);
        bump(&mut stats.length_hist, function.expr.complexity() / 10);
    }
    stats
}
