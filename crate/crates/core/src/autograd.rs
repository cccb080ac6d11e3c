//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Every op records enough of its forward state to run its vector-Jacobian
//! product. Nodes are appended in topological order, so `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Gather(Vec<(Var, usize)>),
    MeanRows { src: Var, rows: Vec<usize> },
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(Var),
    CausalSoftmax { src: Var, scale: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    CosinePairs { q: Var, k: Var, pairs: Vec<(usize, usize)>, heads: usize },
    AbsDiffSum { src: Var, targets: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1×C` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(a).cols());
        let b = b.data().to_vec();
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    /// Builds a matrix whose row `k` is row `parts[k].1` of `parts[k].0`.
    pub fn gather(&mut self, parts: Vec<(Var, usize)>) -> Var {
        assert!(!parts.is_empty(), "gather of zero rows");
        let cols = self.value(parts[0].0).cols();
        let mut out = Tensor::zeros(parts.len(), cols);
        for (k, &(src, r)) in parts.iter().enumerate() {
            let s = self.value(src);
            assert_eq!(s.cols(), cols, "gather column mismatch");
            out.row_mut(k).copy_from_slice(s.row(r));
        }
        self.push(out, Op::Gather(parts))
    }

    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        self.gather(rows.iter().map(|&r| (src, r)).collect())
    }

    /// `1×C` mean of the listed rows (repeats count with multiplicity).
    pub fn mean_rows(&mut self, src: Var, rows: Vec<usize>) -> Var {
        assert!(!rows.is_empty(), "mean of zero rows");
        let s = self.value(src);
        let mut out = Tensor::zeros(1, s.cols());
        for &r in &rows {
            for (o, v) in out.row_mut(0).iter_mut().zip(s.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / rows.len() as f64);
        self.push(out, Op::MeanRows { src, rows })
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols());
        let mut out = Tensor::zeros(s.rows(), len);
        for r in 0..s.rows() {
            out.row_mut(r).copy_from_slice(&s.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { src, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in &parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows);
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Row-wise layer normalisation with learned `1×C` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = gelu(*v).0;
        }
        self.push(out, Op::Gelu(a))
    }

    /// Softmax over `scale · a[i, 0..=i]` per row; entries above the diagonal are zero.
    pub fn causal_softmax(&mut self, a: Var, scale: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let lim = (i + 1).min(cols);
            let row = &av.row(i)[..lim];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let orow = out.row_mut(i);
            let mut z = 0.0;
            for j in 0..lim {
                let e = (row[j] * scale - m).exp();
                orow[j] = e;
                z += e;
            }
            for o in &mut orow[..lim] {
                *o /= z;
            }
        }
        self.push(out, Op::CausalSoftmax { src: a, scale })
    }

    /// Mean over rows of `-ln max(softmax(logits[i])[targets[i]], PROB_FLOOR)`.
    /// An empty target list yields the constant 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        if targets.is_empty() {
            return self.constant(0.0);
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < probs.cols(), "target class out of range");
            loss -= probs.get(i, t).max(PROB_FLOOR).ln();
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// For each `(j, c)` pair, the cosine between row `j` of `q` and row `c` of
    /// `k`, computed per head over equal column slices and averaged over heads.
    /// Output is `P×1`.
    pub fn cosine_pairs(
        &mut self,
        q: Var,
        k: Var,
        pairs: Vec<(usize, usize)>,
        heads: usize,
    ) -> Result<Var> {
        let qv = self.value(q);
        let kv = self.value(k);
        assert_eq!(qv.cols(), kv.cols());
        assert!(heads > 0 && qv.cols() % heads == 0);
        let d = qv.cols() / heads;
        let mut out = Tensor::zeros(pairs.len(), 1);
        for (p, &(j, c)) in pairs.iter().enumerate() {
            let mut s = 0.0;
            for h in 0..heads {
                let u = &qv.row(j)[h * d..(h + 1) * d];
                let v = &kv.row(c)[h * d..(h + 1) * d];
                s += cosine(u, v).ok_or(Error::ZeroNorm { query: j, key: c })?;
            }
            out.set(p, 0, s / heads as f64);
        }
        Ok(self.push(out, Op::CosinePairs { q, k, pairs, heads }))
    }

    /// `Σ_p |targets[p] - src[p]|` for a `P×1` source.
    pub fn abs_diff_sum(&mut self, src: Var, targets: Vec<f64>) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.len(), targets.len());
        let s = sv.data().iter().zip(&targets).map(|(a, t)| (t - a).abs()).sum();
        self.push(Tensor::scalar(s), Op::AbsDiffSum { src, targets })
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every node
    /// that the loss depends on.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a).add_assign(g);
                self.acc(grads, *b).add_assign(g);
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a).add_assign(g);
                let gb = self.acc(grads, *bias);
                for r in 0..g.rows() {
                    for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = self.acc(grads, *a);
                for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += s * v;
                }
            }
            Op::MatMul(a, b) => {
                gemm(g, false, self.value(*b), true, self.acc(grads, *a), 1.0);
                gemm(self.value(*a), true, g, false, self.acc(grads, *b), 1.0);
            }
            Op::MatMulBt(a, b) => {
                gemm(g, false, self.value(*b), false, self.acc(grads, *a), 1.0);
                gemm(g, true, self.value(*a), false, self.acc(grads, *b), 1.0);
            }
            Op::Gather(parts) => {
                for (k, &(src, r)) in parts.iter().enumerate() {
                    let gs = self.acc(grads, src);
                    for (o, v) in gs.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows { src, rows } => {
                let w = 1.0 / rows.len() as f64;
                let gs = self.acc(grads, *src);
                for &r in rows {
                    for (o, v) in gs.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o += w * v;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let gs = self.acc(grads, *src);
                for r in 0..g.rows() {
                    for (o, v) in gs.row_mut(r)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = self.acc(grads, p);
                    for r in 0..g.rows() {
                        for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *o += v;
                        }
                    }
                    off += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gainv = self.value(*gain).data();
                {
                    let gb = self.acc(grads, *bias);
                    for r in 0..rows {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                {
                    let gg = self.acc(grads, *gain);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                let gx = self.acc(grads, *x);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dxhat[c] = g.get(r, c) * gainv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat.get(r, c);
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    let row = gx.row_mut(r);
                    for c in 0..cols {
                        row[c] += inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = self.acc(grads, *a);
                for ((o, x), v) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                    *o += gelu(*x).1 * v;
                }
            }
            Op::CausalSoftmax { src, scale } => {
                let y = &node.value;
                let ga = self.acc(grads, *src);
                for i in 0..y.rows() {
                    let lim = (i + 1).min(y.cols());
                    let yr = &y.row(i)[..lim];
                    let gr = &g.row(i)[..lim];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let row = ga.row_mut(i);
                    for j in 0..lim {
                        row[j] += scale * yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let w = g.data()[0] / targets.len() as f64;
                let gl = self.acc(grads, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    if probs.get(i, t) < PROB_FLOOR {
                        continue;
                    }
                    let row = gl.row_mut(i);
                    for (c, o) in row.iter_mut().enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *o += w * (probs.get(i, c) - onehot);
                    }
                }
            }
            Op::CosinePairs { q, k, pairs, heads } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let d = qv.cols() / heads;
                let mut gq = Tensor::zeros(qv.rows(), qv.cols());
                let mut gk = Tensor::zeros(kv.rows(), kv.cols());
                for (p, &(j, c)) in pairs.iter().enumerate() {
                    let w = g.get(p, 0) / *heads as f64;
                    for h in 0..*heads {
                        let u = &qv.row(j)[h * d..(h + 1) * d];
                        let v = &kv.row(c)[h * d..(h + 1) * d];
                        let nu = norm(u);
                        let nv = norm(v);
                        let cos = dot(u, v) / (nu * nv);
                        let gqr = &mut gq.row_mut(j)[h * d..(h + 1) * d];
                        for i in 0..d {
                            gqr[i] += w * (v[i] / (nu * nv) - cos * u[i] / (nu * nu));
                        }
                        let gkr = &mut gk.row_mut(c)[h * d..(h + 1) * d];
                        for i in 0..d {
                            gkr[i] += w * (u[i] / (nu * nv) - cos * v[i] / (nv * nv));
                        }
                    }
                }
                self.acc(grads, *q).add_assign(&gq);
                self.acc(grads, *k).add_assign(&gk);
            }
            Op::AbsDiffSum { src, targets } => {
                let sv = self.value(*src).data();
                let w = g.data()[0];
                let gs = self.acc(grads, *src);
                for ((o, a), t) in gs.data_mut().iter_mut().zip(sv).zip(targets) {
                    let diff: f64 = a - t;
                    if diff != 0.0 {
                        *o += w * diff.signum();
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let gv = g.data()[0];
                for &(v, w) in terms {
                    self.acc(grads, v).data_mut()[0] += w * gv;
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}
