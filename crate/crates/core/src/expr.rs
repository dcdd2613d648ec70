//! Expression trees: evaluation, differentiation w.r.t. constants,
//! skeletonization and structural utilities.
//!
//! Trees are immutable; every transformation builds a new tree. Subtrees are
//! reference-counted so clones are cheap and evaluation is safe to run from
//! many threads at once.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Any intermediate or final value whose magnitude exceeds this is treated as
/// a domain failure.
pub const MAGNITUDE_CAP: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 3] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Inv,
    Abs,
    Sqr,
    Sqrt,
    Sin,
    Cos,
    Tan,
    Atan,
    Log,
    Exp,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 10] = [
        UnaryOp::Inv,
        UnaryOp::Abs,
        UnaryOp::Sqr,
        UnaryOp::Sqrt,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tan,
        UnaryOp::Atan,
        UnaryOp::Log,
        UnaryOp::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Inv => "inv",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqr => "sqr",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Atan => "atan",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
        }
    }

    /// Forward value. Partial-domain operators (sqrt, log) return NaN outside
    /// their real domain; poles surface as non-finite values. Both are turned
    /// into [`EvalError`] by the evaluator.
    pub fn apply(self, v: f64) -> f64 {
        match self {
            UnaryOp::Inv => 1.0 / v,
            UnaryOp::Abs => v.abs(),
            UnaryOp::Sqr => v * v,
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Sin => v.sin(),
            UnaryOp::Cos => v.cos(),
            UnaryOp::Tan => v.tan(),
            UnaryOp::Atan => v.atan(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Exp => v.exp(),
        }
    }

    /// d/dv of the operator at input `v`, given the already computed output
    /// `out = apply(v)`.
    fn derivative(self, v: f64, out: f64) -> f64 {
        match self {
            UnaryOp::Inv => -out * out,
            UnaryOp::Abs => {
                if v >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            UnaryOp::Sqr => 2.0 * v,
            UnaryOp::Sqrt => 0.5 / out,
            UnaryOp::Sin => v.cos(),
            UnaryOp::Cos => -v.sin(),
            UnaryOp::Tan => 1.0 + out * out,
            UnaryOp::Atan => 1.0 / (1.0 + v * v),
            UnaryOp::Log => 1.0 / v,
            UnaryOp::Exp => out,
        }
    }
}

/// Operator pools with sampling weights. Division never appears as a binary
/// operator; it is covered by unary `inv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorTable {
    pub binary: Vec<(BinaryOp, f64)>,
    pub unary: Vec<(UnaryOp, f64)>,
}

impl Default for OperatorTable {
    fn default() -> Self {
        OperatorTable {
            binary: vec![(BinaryOp::Add, 1.0), (BinaryOp::Sub, 1.0), (BinaryOp::Mul, 1.0)],
            unary: vec![
                (UnaryOp::Inv, 5.0),
                (UnaryOp::Abs, 1.0),
                (UnaryOp::Sqr, 3.0),
                (UnaryOp::Sqrt, 3.0),
                (UnaryOp::Sin, 1.0),
                (UnaryOp::Cos, 1.0),
                (UnaryOp::Tan, 0.2),
                (UnaryOp::Atan, 0.2),
                (UnaryOp::Log, 0.2),
                (UnaryOp::Exp, 1.0),
            ],
        }
    }
}

impl OperatorTable {
    pub fn validate(&self) -> Result<(), String> {
        if self.binary.is_empty() {
            return Err("binary operator pool is empty".into());
        }
        for (op, w) in &self.binary {
            if *w <= 0.0 {
                return Err(format!("non-positive weight for binary `{}`", op.name()));
            }
        }
        for (op, w) in &self.unary {
            if *w <= 0.0 {
                return Err(format!("non-positive weight for unary `{}`", op.name()));
            }
        }
        Ok(())
    }
}

/// An immutable mathematical expression tree.
///
/// `Slot` nodes only appear inside a [`Skeleton`]; a plain expression never
/// contains them and evaluating one is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    /// Finite numeric constant.
    Const(f64),
    /// Variable `x_d`, 1-based index.
    Var(usize),
    /// Constant placeholder inside a skeleton, 0-based slot index.
    Slot(usize),
    Unary(UnaryOp, Arc<Expr>),
    Binary(BinaryOp, Arc<Expr>, Arc<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainCause {
    /// Input outside the operator's real domain or a non-finite intermediate.
    NonFinite,
    /// An intermediate or final value exceeded [`MAGNITUDE_CAP`].
    MagnitudeCap,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain failure at `{node}` ({cause:?})")]
    Domain { node: &'static str, cause: DomainCause },
    #[error("variable x{index} out of range for input of dimension {dim}")]
    VarOutOfRange { index: usize, dim: usize },
    #[error("unsubstituted skeleton slot {0}")]
    UnboundSlot(usize),
    #[error("non-finite partial derivative")]
    NonFiniteGradient,
}

fn check(node: &'static str, v: f64) -> Result<f64, EvalError> {
    if !v.is_finite() {
        Err(EvalError::Domain { node, cause: DomainCause::NonFinite })
    } else if v.abs() > MAGNITUDE_CAP {
        Err(EvalError::Domain { node, cause: DomainCause::MagnitudeCap })
    } else {
        Ok(v)
    }
}

impl Expr {
    pub fn constant(v: f64) -> Arc<Expr> {
        Arc::new(Expr::Const(v))
    }

    pub fn var(d: usize) -> Arc<Expr> {
        assert!(d >= 1, "variable indices are 1-based");
        Arc::new(Expr::Var(d))
    }

    pub fn unary(op: UnaryOp, child: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Unary(op, child))
    }

    pub fn binary(op: BinaryOp, lhs: Arc<Expr>, rhs: Arc<Expr>) -> Arc<Expr> {
        Arc::new(Expr::Binary(op, lhs, rhs))
    }

    /// Evaluate at `x`; `x[d-1]` is the value of variable `x_d`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => check("const", *c),
            Expr::Var(d) => {
                let v = *x
                    .get(d - 1)
                    .ok_or(EvalError::VarOutOfRange { index: *d, dim: x.len() })?;
                check("var", v)
            }
            Expr::Slot(k) => Err(EvalError::UnboundSlot(*k)),
            Expr::Unary(op, c) => check(op.name(), op.apply(c.evaluate(x)?)),
            Expr::Binary(op, a, b) => check(op.name(), op.apply(a.evaluate(x)?, b.evaluate(x)?)),
        }
    }

    /// Total node count, operators and leaves.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Slot(_) => 1,
            Expr::Unary(_, c) => 1 + c.complexity(),
            Expr::Binary(_, a, b) => 1 + a.complexity() + b.complexity(),
        }
    }

    /// Largest variable index appearing in the tree (0 when none).
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Slot(_) => 0,
            Expr::Var(d) => *d,
            Expr::Unary(_, c) => c.max_var(),
            Expr::Binary(_, a, b) => a.max_var().max(b.max_var()),
        }
    }

    /// Collects which of x_1..x_dim occur; index 0 corresponds to x_1.
    pub fn var_presence(&self, dim: usize) -> Vec<bool> {
        fn walk(e: &Expr, seen: &mut [bool]) {
            match e {
                Expr::Var(d) => {
                    if *d - 1 < seen.len() {
                        seen[*d - 1] = true;
                    }
                }
                Expr::Unary(_, c) => walk(c, seen),
                Expr::Binary(_, a, b) => {
                    walk(a, seen);
                    walk(b, seen);
                }
                _ => {}
            }
        }
        let mut seen = vec![false; dim];
        walk(self, &mut seen);
        seen
    }

    pub fn contains_slot(&self) -> bool {
        match self {
            Expr::Slot(_) => true,
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Unary(_, c) => c.contains_slot(),
            Expr::Binary(_, a, b) => a.contains_slot() || b.contains_slot(),
        }
    }

    /// Partial derivatives of the value at `x` w.r.t. each constant node, in
    /// prefix traversal order. Reverse-mode on the flattened tree; never
    /// finite differences.
    pub fn grad_constants(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        // Flatten in prefix order so constant slots line up with skeletonize.
        enum Node {
            Const(f64),
            Var(usize),
            Unary(UnaryOp, usize),
            Binary(BinaryOp, usize, usize),
        }
        fn flatten(e: &Expr, nodes: &mut Vec<Node>) -> Result<usize, EvalError> {
            let id = nodes.len();
            match e {
                Expr::Const(c) => nodes.push(Node::Const(*c)),
                Expr::Var(d) => nodes.push(Node::Var(*d)),
                Expr::Slot(k) => return Err(EvalError::UnboundSlot(*k)),
                Expr::Unary(op, c) => {
                    nodes.push(Node::Unary(*op, 0));
                    let cid = flatten(c, nodes)?;
                    if let Node::Unary(_, slot) = &mut nodes[id] {
                        *slot = cid;
                    }
                }
                Expr::Binary(op, a, b) => {
                    nodes.push(Node::Binary(*op, 0, 0));
                    let aid = flatten(a, nodes)?;
                    let bid = flatten(b, nodes)?;
                    if let Node::Binary(_, l, r) = &mut nodes[id] {
                        *l = aid;
                        *r = bid;
                    }
                }
            }
            Ok(id)
        }

        let mut nodes = Vec::new();
        flatten(self, &mut nodes)?;

        // Forward pass. In prefix order children carry larger ids than their
        // parent, so iterating in reverse visits children first.
        let mut vals = vec![0.0f64; nodes.len()];
        for i in (0..nodes.len()).rev() {
            vals[i] = match &nodes[i] {
                Node::Const(c) => check("const", *c)?,
                Node::Var(d) => check(
                    "var",
                    *x.get(*d - 1)
                        .ok_or(EvalError::VarOutOfRange { index: *d, dim: x.len() })?,
                )?,
                Node::Unary(op, c) => check(op.name(), op.apply(vals[*c]))?,
                Node::Binary(op, a, b) => check(op.name(), op.apply(vals[*a], vals[*b]))?,
            };
        }

        // Reverse pass: adjoints from root (id 0) down.
        let mut adj = vec![0.0f64; nodes.len()];
        adj[0] = 1.0;
        for i in 0..nodes.len() {
            match &nodes[i] {
                Node::Const(_) | Node::Var(_) => {}
                Node::Unary(op, c) => {
                    adj[*c] += adj[i] * op.derivative(vals[*c], vals[i]);
                }
                Node::Binary(op, a, b) => match op {
                    BinaryOp::Add => {
                        adj[*a] += adj[i];
                        adj[*b] += adj[i];
                    }
                    BinaryOp::Sub => {
                        adj[*a] += adj[i];
                        adj[*b] -= adj[i];
                    }
                    BinaryOp::Mul => {
                        adj[*a] += adj[i] * vals[*b];
                        adj[*b] += adj[i] * vals[*a];
                    }
                },
            }
        }

        let grads: Vec<f64> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, Node::Const(_)))
            .map(|(i, _)| adj[i])
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(EvalError::NonFiniteGradient);
        }
        Ok(grads)
    }

    /// Replace every occurrence of `x_d` by `(x_d - mu[d-1]) / sigma[d-1]`,
    /// built from mul/sub and constants. Evaluating the result at `x` equals
    /// evaluating `self` at the whitened point.
    pub fn substitute_affine(&self, mu: &[f64], sigma: &[f64]) -> Arc<Expr> {
        assert!(sigma.iter().all(|&s| s > 0.0), "sigma must be positive");
        match self {
            Expr::Const(c) => Expr::constant(*c),
            Expr::Slot(k) => Arc::new(Expr::Slot(*k)),
            Expr::Var(d) => {
                let (m, s) = (mu[*d - 1], sigma[*d - 1]);
                if m == 0.0 && s == 1.0 {
                    Expr::var(*d)
                } else {
                    Expr::binary(
                        BinaryOp::Mul,
                        Expr::constant(1.0 / s),
                        Expr::binary(BinaryOp::Sub, Expr::var(*d), Expr::constant(m)),
                    )
                }
            }
            Expr::Unary(op, c) => Expr::unary(*op, c.substitute_affine(mu, sigma)),
            Expr::Binary(op, a, b) => {
                Expr::binary(*op, a.substitute_affine(mu, sigma), b.substitute_affine(mu, sigma))
            }
        }
    }

    /// Prefix (Polish) print: operators and variables by name, constants in
    /// shortest round-trip decimal.
    pub fn prefix(&self) -> String {
        let mut out = Vec::new();
        self.prefix_tokens(&mut out);
        out.join(" ")
    }

    pub fn prefix_tokens(&self, out: &mut Vec<String>) {
        match self {
            Expr::Const(c) => out.push(format!("{c}")),
            Expr::Var(d) => out.push(format!("x{d}")),
            Expr::Slot(_) => out.push("<>".to_string()),
            Expr::Unary(op, c) => {
                out.push(op.name().to_string());
                c.prefix_tokens(out);
            }
            Expr::Binary(op, a, b) => {
                out.push(op.name().to_string());
                a.prefix_tokens(out);
                b.prefix_tokens(out);
            }
        }
    }

    /// Human-readable infix form, fully parenthesized at binary nodes.
    pub fn infix(&self) -> String {
        match self {
            Expr::Const(c) => format!("{c}"),
            Expr::Var(d) => format!("x{d}"),
            Expr::Slot(k) => format!("<{k}>"),
            Expr::Unary(op, c) => match op {
                UnaryOp::Inv => format!("1/({})", c.infix()),
                UnaryOp::Sqr => format!("({})^2", c.infix()),
                _ => format!("{}({})", op.name(), c.infix()),
            },
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinaryOp::Add => "+",
                    BinaryOp::Sub => "-",
                    BinaryOp::Mul => "*",
                };
                format!("({} {} {})", a.infix(), sym, b.infix())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.infix())
    }
}

/// An expression with every constant replaced by an indexed slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    tree: Arc<Expr>,
    slots: usize,
}

impl Skeleton {
    /// Wraps a tree that already uses `Slot` nodes. Slot indices must be
    /// exactly 0..slots in prefix order; use [`skeletonize`] for plain trees.
    pub fn from_tree(tree: Arc<Expr>) -> Skeleton {
        fn count(e: &Expr, next: &mut usize) {
            match e {
                Expr::Slot(k) => {
                    debug_assert_eq!(*k, *next, "slot indices must follow prefix order");
                    *next += 1;
                }
                Expr::Unary(_, c) => count(c, next),
                Expr::Binary(_, a, b) => {
                    count(a, next);
                    count(b, next);
                }
                _ => {}
            }
        }
        let mut n = 0;
        count(&tree, &mut n);
        Skeleton { tree, slots: n }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn tree(&self) -> &Arc<Expr> {
        &self.tree
    }

    /// Canonical key used for candidate deduplication.
    pub fn key(&self) -> String {
        self.tree.prefix()
    }

    /// Fill slots with `constants`; panics if the length does not match.
    pub fn substitute(&self, constants: &[f64]) -> Arc<Expr> {
        assert_eq!(constants.len(), self.slots, "constant vector length mismatch");
        fn fill(e: &Expr, constants: &[f64]) -> Arc<Expr> {
            match e {
                Expr::Slot(k) => Expr::constant(constants[*k]),
                Expr::Const(c) => Expr::constant(*c),
                Expr::Var(d) => Expr::var(*d),
                Expr::Unary(op, c) => Expr::unary(*op, fill(c, constants)),
                Expr::Binary(op, a, b) => Expr::binary(*op, fill(a, constants), fill(b, constants)),
            }
        }
        fill(&self.tree, constants)
    }
}

/// Split a tree into its skeleton and the constants, slot order = prefix order.
pub fn skeletonize(expr: &Expr) -> (Skeleton, Vec<f64>) {
    fn walk(e: &Expr, next: &mut usize, consts: &mut Vec<f64>) -> Arc<Expr> {
        match e {
            Expr::Const(c) => {
                let k = *next;
                *next += 1;
                consts.push(*c);
                Arc::new(Expr::Slot(k))
            }
            Expr::Slot(k) => {
                // Already a slot: keep structure, re-index.
                let _ = k;
                let idx = *next;
                *next += 1;
                consts.push(f64::NAN);
                Arc::new(Expr::Slot(idx))
            }
            Expr::Var(d) => Expr::var(*d),
            Expr::Unary(op, c) => Expr::unary(*op, walk(c, next, consts)),
            Expr::Binary(op, a, b) => {
                Expr::binary(*op, walk(a, next, consts), walk(b, next, consts))
            }
        }
    }
    let mut next = 0;
    let mut consts = Vec::new();
    let tree = walk(expr, &mut next, &mut consts);
    (Skeleton { tree, slots: next }, consts)
}
