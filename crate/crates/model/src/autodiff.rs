//! Tape-based reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape in reverse and accumulates adjoints. Leaves tagged with a
//! parameter index collect gradients for the optimizer.

use ndarray::{Array2, Axis};

pub type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a * b^T, used for attention scores without an explicit transpose node.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// [m,n] + broadcast of a [1,n] row (bias).
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Row-wise softmax; forward value is reused in backward.
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    /// Each output row is the concatenation of `ids[i]` rows of the table.
    GatherConcat { table: NodeId, ids: Vec<Vec<usize>> },
    /// Mean token-level cross entropy of row-wise logits vs target ids.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, param: Option<usize>) -> NodeId {
        self.nodes.push(Node { value, op, param });
        self.nodes.len() - 1
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, None)
    }

    /// Trainable leaf; gradient is reported under `param_idx`.
    pub fn param(&mut self, value: Array2<f64>, param_idx: usize) -> NodeId {
        self.push(value, Op::Leaf, Some(param_idx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b), None)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulNT(a, b), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b), None)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row), None)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = &self.nodes[a].value * s;
        self.push(v, Op::Scale(a, s), None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), None)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxRows(a), None)
    }

    /// Row-wise layer normalization with learnable gain/shift ([1,n] each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let xv = &self.nodes[x].value;
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let v = &xhat * &self.nodes[gamma].value + &self.nodes[beta].value;
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, None)
    }

    pub fn gather_concat(&mut self, table: NodeId, ids: Vec<Vec<usize>>) -> NodeId {
        let t = &self.nodes[table].value;
        let d = t.ncols();
        let width = ids.first().map_or(0, |r| r.len());
        let mut v = Array2::zeros((ids.len(), width * d));
        for (i, row_ids) in ids.iter().enumerate() {
            for (j, &id) in row_ids.iter().enumerate() {
                v.row_mut(i).slice_mut(ndarray::s![j * d..(j + 1) * d]).assign(&t.row(id));
            }
        }
        self.push(v, Op::GatherConcat { table, ids }, None)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.gather_concat(table, ids.iter().map(|&i| vec![i]).collect())
    }

    /// Mean cross entropy over rows; returns a 1x1 scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(&targets) {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
            loss -= row[t].ln();
        }
        loss /= targets.len() as f64;
        let v = Array2::from_elem((1, 1), loss);
        self.push(v, Op::CrossEntropy { logits, targets, probs }, None)
    }

    /// Backpropagate from a scalar node; returns (param_idx, gradient) pairs.
    pub fn backward(&self, from: NodeId) -> Vec<(usize, Array2<f64>)> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[from] = Some(Array2::ones(self.nodes[from].value.dim()));

        for id in (0..=from).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(&self.nodes[*b].value);
                    let db = g.t().dot(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| f64::from(x > 0.0));
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[id].value;
                    let mut da = &g * s;
                    for (mut row, srow) in da.rows_mut().into_iter().zip(s.rows()) {
                        let dot = row.sum();
                        row.iter_mut().zip(srow).for_each(|(r, &sv)| *r -= dot * sv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = &self.nodes[*gamma].value;
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gh = &g * gv;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let ghr = gh.row(i);
                        let xr = xhat.row(i);
                        let m1 = ghr.sum() / n;
                        let m2 = ghr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = inv_std[i] * (ghr[j] - m1 - xr[j] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::GatherConcat { table, ids } => {
                    let d = self.nodes[*table].value.ncols();
                    let mut dt = Array2::zeros(self.nodes[*table].value.dim());
                    for (i, row_ids) in ids.iter().enumerate() {
                        for (j, &tid) in row_ids.iter().enumerate() {
                            let src = g.row(i);
                            let mut dst = dt.row_mut(tid);
                            for k in 0..d {
                                dst[k] += src[j * d + k];
                            }
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut dl = probs * scale;
                    for (i, &t) in targets.iter().enumerate() {
                        dl[[i, t]] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(p), Some(g)) = (node.param, grads[id].take()) {
                out.push((p, g));
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Finite-difference check of a scalar-valued tape program.
    fn fd_check<F>(build: F, params: &[Array2<f64>])
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> =
            params.iter().enumerate().map(|(i, p)| tape.param(p.clone(), i)).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out);

        for (pi, g) in grads {
            for idx in 0..params[pi].len() {
                let (r, c) = (idx / params[pi].ncols(), idx % params[pi].ncols());
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut ps = params.to_vec();
                    ps[pi][[r, c]] += delta;
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> =
                        ps.iter().enumerate().map(|(i, p)| t.param(p.clone(), i)).collect();
                    let o = build(&mut t, &ids);
                    t.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[[r, c]];
                assert!(
                    (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1.0),
                    "param {pi} [{r},{c}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let a = array![[0.3, -0.8], [1.2, 0.5]];
        let b = array![[0.7, 0.1], [-0.4, 0.9]];
        fd_check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1]);
                let d = t.relu(c);
                t.cross_entropy(d, vec![0, 1])
            },
            &[a, b],
        );
    }

    #[test]
    fn layer_norm_and_softmax_gradients() {
        let x = array![[0.3, -0.8, 0.2], [1.2, 0.5, -0.1]];
        let gamma = array![[1.1, 0.9, 1.0]];
        let beta = array![[0.0, 0.1, -0.2]];
        fd_check(
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2]);
                let sm = t.softmax_rows(ln);
                t.cross_entropy(sm, vec![2, 0])
            },
            &[x, gamma, beta],
        );
    }

    #[test]
    fn attention_shaped_gradients() {
        let q = array![[0.3, -0.8], [1.2, 0.5], [0.1, 0.4]];
        let k = array![[0.7, 0.1], [-0.4, 0.9], [0.2, -0.3]];
        let v = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        fd_check(
            |t, ids| {
                let scores = t.matmul_nt(ids[0], ids[1]);
                let scaled = t.scale(scores, 1.0 / 2f64.sqrt());
                let attn = t.softmax_rows(scaled);
                let out = t.matmul(attn, ids[2]);
                t.cross_entropy(out, vec![0, 1, 0])
            },
            &[q, k, v],
        );
    }

    #[test]
    fn gather_concat_gradients() {
        let table = array![[0.3, -0.8], [1.2, 0.5], [0.1, 0.4]];
        let w = array![[0.7], [0.3], [-0.2], [0.9]];
        fd_check(
            |t, ids| {
                let e = t.gather_concat(ids[0], vec![vec![0, 2], vec![1, 1]]);
                let out = t.matmul(e, ids[1]);
                t.cross_entropy(out, vec![0, 0])
            },
            &[table, w],
        );
    }

    #[test]
    fn bias_broadcast_gradients() {
        let x = array![[0.3, -0.8], [1.2, 0.5]];
        let b = array![[0.1, -0.2]];
        fd_check(
            |t, ids| {
                let y = t.add_row(ids[0], ids[1]);
                t.cross_entropy(y, vec![1, 0])
            },
            &[x, b],
        );
    }
}
