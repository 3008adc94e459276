use super::{gemm, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention visibility pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    /// Every query sees every key.
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SliceRows {
        src: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a differentiable computation.
///
/// A tape is single-threaded; independent tapes may run on separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    let c = cols_of(shape);
    if c == 0 {
        shape.first().copied().unwrap_or(0)
    } else {
        shape.iter().product::<usize>() / c
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradient.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf_raw(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("leaf", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_of(self.shape(v))
    }

    pub fn cols(&self, v: Var) -> usize {
        cols_of(self.shape(v))
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated so far, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Matrix product of `m × k` and `k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_matrix("matmul", a)?;
        let (k2, n) = self.expect_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.cols(a);
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|ch| ch.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Relu(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.cols(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.rows(x);
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for c in 0..n {
                    let h = (row[c] - mean) * inv;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * g[c] + b[c];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.expect_matrix("gather_rows", table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        let tv = self.value(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, bound: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let c = self.cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 2 || self.cols(p) != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let r = self.rows(first);
        let mut total = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.rows(p) != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.cols(p);
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(a)))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.expect_matrix("slice_rows", a)?;
        if start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start + len, c]));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![len, c], out, rg, Op::SliceRows { src: a, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![s], rg, Op::Mean(a)))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = self.cols(a);
        let mut out = self.value(a).to_vec();
        if c > 0 {
            out.chunks_mut(c).for_each(softmax_in_place);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Softmax(a))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&i| Some(i)).collect();
        self.masked_cross_entropy(logits, &t)
    }

    /// Like [`Tape::softmax_cross_entropy`] but rows whose target is `None`
    /// contribute nothing, neither to the sum nor to the denominator.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.expect_matrix("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", &[n, v], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Index { index: t, bound: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            let lse = super::log_sum_exp(row);
            total += lse - row[t];
            let p = &mut probs[i * v..(i + 1) * v];
            for (pj, lj) in p.iter_mut().zip(row) {
                *pj = (lj - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Scaled dot-product attention split over `heads` heads.
    ///
    /// `q` is `Tq × d`, `k` is `Tk × d`, `v` is `Tk × dv`; the result is
    /// `Tq × dv`. Each head uses a contiguous slice of the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Result<Var> {
        let (tq, d) = self.expect_matrix("attention", q)?;
        let (tk, dk) = self.expect_matrix("attention", k)?;
        let (tv, dv) = self.expect_matrix("attention", v)?;
        if d != dk || tk != tv {
            return Err(Error::dim("attention", &[tq, d], &[tk, dk]));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Contract(format!(
                "{heads} heads do not divide widths {d}/{dv}"
            )));
        }
        if mask == Mask::Causal && tq != tk {
            return Err(Error::dim("causal attention", &[tq, d], &[tk, dk]));
        }
        if tk == 0 {
            return Err(Error::Contract("attention over zero keys".into()));
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq * dv];
        let mut probs = vec![0.0; heads * tq * tk];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut qh = vec![0.0; tq * dh];
        let mut kh = vec![0.0; tk * dh];
        let mut vh = vec![0.0; tk * dvh];
        let mut oh = vec![0.0; tq * dvh];
        for h in 0..heads {
            extract_head(qv, d, h * dh, dh, &mut qh);
            extract_head(kv, d, h * dh, dh, &mut kh);
            extract_head(vv, dv, h * dvh, dvh, &mut vh);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(tq, dh, tk, &qh, false, &kh, true, 0.0, p);
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let visible = if mask == Mask::Causal { i + 1 } else { tk };
                row[..visible].iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(&mut row[..visible]);
                row[visible..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm(tq, tk, dvh, p, false, &vh, false, 0.0, &mut oh);
            scatter_head(&oh, dv, h * dvh, dvh, &mut out);
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![tq, dv],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Value of `quantized`, gradient routed unchanged to `h`.
    pub fn straight_through(&mut self, h: Var, quantized: Var) -> Result<Var> {
        self.same_shape("straight_through", h, quantized)?;
        let out = self.value(quantized).to_vec();
        let rg = self.rg(&[h]);
        Ok(self.push(self.shape(h).to_vec(), out, rg, Op::StraightThrough(h)))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), out, false, Op::Leaf)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients add onto whatever previous calls left behind; use
    /// [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        for (i, gi) in g.into_iter().enumerate() {
            let Some(gi) = gi else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    let ga = accumulate(g, *a, m * k);
                    gemm(m, n, k, gout, false, &nodes[b.0].value, true, 1.0, ga);
                }
                if wants(*b) {
                    let gb = accumulate(g, *b, k * n);
                    gemm(k, m, n, &nodes[a.0].value, true, gout, false, 1.0, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = accumulate(g, *a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let gb = accumulate(g, *b, gout.len());
                    gb.iter_mut().zip(gout).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let ga = accumulate(g, *a, gout.len());
                    for j in 0..gout.len() {
                        ga[j] += gout[j] * bv[j];
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let gb = accumulate(g, *b, gout.len());
                    for j in 0..gout.len() {
                        gb[j] += gout[j] * av[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    let ga = accumulate(g, *a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if wants(*row) {
                    let n = len(*row);
                    let gr = accumulate(g, *row, n);
                    if n > 0 {
                        for ch in gout.chunks(n) {
                            gr.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = accumulate(g, *a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    let ga = accumulate(g, *a, gout.len());
                    for j in 0..gout.len() {
                        if av[j] > 0.0 {
                            ga[j] += gout[j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = len(*gamma);
                let rows = inv_std.len();
                let gv = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let gg = accumulate(g, *gamma, n);
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += gout[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = accumulate(g, *beta, n);
                    for r in 0..rows {
                        for c in 0..n {
                            gb[c] += gout[r * n + c];
                        }
                    }
                }
                if wants(*x) {
                    let gx = accumulate(g, *x, rows * n);
                    let nf = n as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = gout[r * n + c] * gv[c];
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = gout[r * n + c] * gv[c];
                            gx[r * n + c] +=
                                inv_std[r] / nf * (nf * dh - s1 - xhat[r * n + c] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.0].shape[1];
                    let gt = accumulate(g, *table, len(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += gout[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if wants(*p) {
                        let gp = accumulate(g, *p, n);
                        gp.iter_mut()
                            .zip(&gout[off..off + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].shape[1];
                let rows = nodes[i].shape[0];
                let mut off = 0;
                for p in parts {
                    let c = nodes[p.0].shape[1];
                    if wants(*p) {
                        let gp = accumulate(g, *p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += gout[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Reshape(a) | Op::StraightThrough(a) => {
                if wants(*a) {
                    let ga = accumulate(g, *a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceRows { src, start } => {
                if wants(*src) {
                    let c = nodes[src.0].shape[1];
                    let gs = accumulate(g, *src, len(*src));
                    gs[start * c..start * c + gout.len()]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let ga = accumulate(g, *a, len(*a));
                    ga.iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = len(*a);
                    let ga = accumulate(g, *a, n);
                    let s = gout[0] / n as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = &nodes[i].value;
                    let c = cols_of(&nodes[i].shape);
                    let ga = accumulate(g, *a, y.len());
                    for r in 0..y.len() / c.max(1) {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gout[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let v = nodes[logits.0].shape[1];
                    let s = gout[0] / *count as f64;
                    let gl = accumulate(g, *logits, len(*logits));
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            gl[r * v + j] += s * probs[r * v + j];
                        }
                        gl[r * v + t] -= s;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gout, g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gout: &[f64],
        g: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (tq, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
        let tk = nodes[k.0].shape[0];
        let dv = nodes[v.0].shape[1];
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (wq, wk, wv) = (
            nodes[q.0].requires_grad,
            nodes[k.0].requires_grad,
            nodes[v.0].requires_grad,
        );
        let mut gq = vec![0.0; tq * d];
        let mut gk = vec![0.0; tk * d];
        let mut gv = vec![0.0; tk * dv];
        let mut qh = vec![0.0; tq * dh];
        let mut kh = vec![0.0; tk * dh];
        let mut vh = vec![0.0; tk * dvh];
        let mut goh = vec![0.0; tq * dvh];
        let mut dp = vec![0.0; tq * tk];
        let mut tmp_q = vec![0.0; tq * dh];
        let mut tmp_k = vec![0.0; tk * dh];
        let mut tmp_v = vec![0.0; tk * dvh];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            extract_head(&nodes[q.0].value, d, h * dh, dh, &mut qh);
            extract_head(&nodes[k.0].value, d, h * dh, dh, &mut kh);
            extract_head(&nodes[v.0].value, dv, h * dvh, dvh, &mut vh);
            extract_head(gout, dv, h * dvh, dvh, &mut goh);
            if wv {
                gemm(tk, tq, dvh, p, true, &goh, false, 0.0, &mut tmp_v);
                add_head(&tmp_v, dv, h * dvh, dvh, &mut gv);
            }
            if !(wq || wk) {
                continue;
            }
            gemm(tq, dvh, tk, &goh, false, &vh, true, 0.0, &mut dp);
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..tk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            if wq {
                gemm(tq, tk, dh, &dp, false, &kh, false, 0.0, &mut tmp_q);
                add_head(&tmp_q, d, h * dh, dh, &mut gq);
            }
            if wk {
                gemm(tk, tq, dh, &dp, true, &qh, false, 0.0, &mut tmp_k);
                add_head(&tmp_k, d, h * dh, dh, &mut gk);
            }
        }
        for (var, want, grad) in [(q, wq, gq), (k, wk, gk), (v, wv, gv)] {
            if want {
                let acc = accumulate(g, var, grad.len());
                acc.iter_mut().zip(&grad).for_each(|(x, y)| *x += y);
            }
        }
    }
}

fn extract_head(src: &[f64], width: usize, off: usize, dh: usize, dst: &mut [f64]) {
    for (r, row) in dst.chunks_mut(dh).enumerate() {
        row.copy_from_slice(&src[r * width + off..r * width + off + dh]);
    }
}

fn scatter_head(src: &[f64], width: usize, off: usize, dh: usize, dst: &mut [f64]) {
    for (r, row) in src.chunks(dh).enumerate() {
        dst[r * width + off..r * width + off + dh].copy_from_slice(row);
    }
}

fn add_head(src: &[f64], width: usize, off: usize, dh: usize, dst: &mut [f64]) {
    for (r, row) in src.chunks(dh).enumerate() {
        dst[r * width + off..r * width + off + dh]
            .iter_mut()
            .zip(row)
            .for_each(|(x, y)| *x += y);
    }
}
