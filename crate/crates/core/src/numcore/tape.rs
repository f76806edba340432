//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Every operation appends a node holding its forward value and whatever its
//! backward pass needs. Nodes only reference earlier nodes, so a single
//! reverse sweep visits them in a valid order.
//!
//! Batched forms are accepted where it keeps the networks cheap: `affine`
//! takes `[in]` or `[N, in]`, `conv1d` takes `[C, L]` or `[N, C, L]`, and the
//! softmax losses take `[K]` or `[N, K]` logits and sum over rows.

use rand::Rng;
use rand_distr::StandardNormal;

use super::array::Array;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    Conv1d {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftmaxEntropy {
        logits: Var,
        probs: Vec<f64>,
    },
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
    Interp(Var),
    Revise {
        x: Var,
        contexts: Option<Var>,
    },
}

struct Node {
    value: Array,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adjoints[v.0].as_deref()
    }

    /// Per-parameter gradients aligned with `store`. Parameters that were not
    /// read on the tape get `None`; a parameter read several times has its
    /// contributions summed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for &(node, id) in &self.params {
            let Some(adj) = &self.adjoints[node] else {
                continue;
            };
            match &mut out[id.index()] {
                Some(acc) => acc.iter_mut().zip(adj).for_each(|(a, g)| *a += g),
                slot @ None => *slot = Some(adj.clone()),
            }
        }
        out
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a `[K]` / `[N, K]` shape into `(rows, cols)`.
fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [k] => Ok((1, k)),
        [n, k] => Ok((n, k)),
        _ => Err(Error::shape(format!("expected a vector or matrix, got {shape:?}"))),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn softmax_row(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    max + total.ln()
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.spent = false;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn build(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let value = Array::new(shape, data).expect("shape checked by caller");
        self.push(value, op)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.build(shape, data, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.build(shape, data, op)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Contract(format!("ln of non-positive value {bad}")));
        }
        Ok(self.map(a, f64::ln, Op::Ln(a)))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.build(vec![1], vec![total], Op::Sum(a))
    }

    /// Sum of squares, `Σ a²`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        Ok(self.build(shape, data, Op::Reshape(a)))
    }

    /// Columns `start..end` of a `[K]` or `[N, K]` array.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a))?;
        if start >= end || end > cols {
            return Err(Error::shape(format!("column range {start}..{end} of {cols}")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let shape = if self.shape(a).len() == 1 {
            vec![end - start]
        } else {
            vec![rows, end - start]
        };
        Ok(self.build(shape, data, Op::SliceCols { src: a, start }))
    }

    /// Concatenates along the last axis; all parts share the same rank and
    /// row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rank = self.shape(first).len();
        let (rows, _) = rows_cols(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if r != rows || self.shape(p).len() != rank {
                return Err(Error::shape(format!(
                    "concat_cols: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        Ok(self.build(shape, data, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks `[K]` vectors or `[r, K]` matrices into one `[R, K]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let (_, cols) = rows_cols(self.shape(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if c != cols {
                return Err(Error::shape(format!("stack_rows: width {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.build(vec![rows, cols], data, Op::StackRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = match *self.shape(a) {
            [n, k] => (n, k),
            ref s => return Err(Error::shape(format!("gather_rows needs a matrix, got {s:?}"))),
        };
        if rows.is_empty() {
            return Err(Error::shape("gather_rows with no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} of {n}")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        Ok(self.build(
            vec![rows.len(), cols],
            data,
            Op::GatherRows {
                src: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean over the rows of an `[N, K]` matrix, giving `[K]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, cols) = rows_cols(self.shape(a))?;
        let src = self.data(a);
        let mut data = vec![0.0; cols];
        for r in 0..n {
            data.iter_mut().zip(&src[r * cols..(r + 1) * cols]).for_each(|(d, s)| *d += s);
        }
        data.iter_mut().for_each(|d| *d /= n as f64);
        Ok(self.build(vec![cols], data, Op::MeanRows(a)))
    }

    /// Stride-1 zero-padded "same" 1-D convolution (cross-correlation).
    ///
    /// `x` is `[C_in, L]` or `[N, C_in, L]`, `kernels` is `[C_out, C_in, K]`
    /// with odd `K`, `bias` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (batch, cin, len) = match *self.shape(x) {
            [c, l] => (None, c, l),
            [n, c, l] => (Some(n), c, l),
            ref s => return Err(Error::shape(format!("conv1d signal shape {s:?}"))),
        };
        let (cout, kin, k) = match *self.shape(kernels) {
            [o, i, k] => (o, i, k),
            ref s => return Err(Error::shape(format!("conv1d kernel shape {s:?}"))),
        };
        if kin != cin {
            return Err(Error::shape(format!(
                "conv1d: kernels expect {kin} input channels, signal has {cin}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv1d kernel width {k} must be odd")));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(format!(
                "conv1d bias {:?}, expected [{cout}]",
                self.shape(bias)
            )));
        }
        let n = batch.unwrap_or(1);
        let pad = k / 2;
        let xs = self.data(x);
        let ws = self.data(kernels);
        let bs = self.data(bias);
        let mut out = vec![0.0; n * cout * len];
        for s in 0..n {
            let xin = &xs[s * cin * len..(s + 1) * cin * len];
            for o in 0..cout {
                let row = &mut out[(s * cout + o) * len..(s * cout + o + 1) * len];
                row.iter_mut().for_each(|v| *v = bs[o]);
                for i in 0..cin {
                    let sig = &xin[i * len..(i + 1) * len];
                    let wk = &ws[(o * cin + i) * k..(o * cin + i + 1) * k];
                    for (t, &w) in wk.iter().enumerate() {
                        // output l reads input l + t - pad
                        let lo = pad.saturating_sub(t);
                        let hi = (len + pad).saturating_sub(t).min(len);
                        for l in lo..hi {
                            row[l] += w * sig[l + t - pad];
                        }
                    }
                }
            }
        }
        let shape = match batch {
            Some(n) => vec![n, cout, len],
            None => vec![cout, len],
        };
        Ok(self.build(shape, out, Op::Conv1d { x, kernels, bias }))
    }

    /// `W x + b` for `x` of shape `[in]` or `[N, in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = rows_cols(self.shape(x))?;
        let (dout, win) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape(format!("affine weight shape {s:?}"))),
        };
        if win != din {
            return Err(Error::shape(format!(
                "affine: weight expects {win} inputs, got {din}"
            )));
        }
        if self.shape(b) != [dout] {
            return Err(Error::shape(format!(
                "affine bias {:?}, expected [{dout}]",
                self.shape(b)
            )));
        }
        let xs = self.data(x);
        let ws = self.data(w);
        let bs = self.data(b);
        let mut out = Vec::with_capacity(n * dout);
        for r in 0..n {
            let xr = &xs[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &ws[o * din..(o + 1) * din];
                out.push(bs[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let shape = if self.shape(x).len() == 1 { vec![dout] } else { vec![n, dout] };
        Ok(self.build(shape, out, Op::Affine { x, w, b }))
    }

    /// `Σ_rows −log softmax(logits)[target]`, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = rows_cols(self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::shape(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} outside 0..{k}")));
        }
        let ls = self.data(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let lse = softmax_row(&ls[r * k..(r + 1) * k], &mut probs[r * k..(r + 1) * k]);
            total += lse - ls[r * k + targets[r]];
        }
        Ok(self.build(
            vec![1],
            vec![total],
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_rows H(softmax(logits))` in nats.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.shape(logits))?;
        let ls = self.data(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let row = &ls[r * k..(r + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            let lse = softmax_row(row, p);
            total += lse - p.iter().zip(row).map(|(p, l)| p * l).sum::<f64>();
        }
        Ok(self.build(vec![1], vec![total], Op::SoftmaxEntropy { logits, probs }))
    }

    /// `mu + exp(logvar / 2) ⊙ eps` with the noise supplied by the caller.
    /// Gradients reach `mu` and `logvar`; `eps` is a constant.
    pub fn reparameterize_with(&mut self, mu: Var, logvar: Var, eps: Vec<f64>) -> Result<Var> {
        self.same_shape(mu, logvar, "reparameterize")?;
        if eps.len() != self.value(mu).len() {
            return Err(Error::shape(format!(
                "reparameterize: {} noise values for {}",
                eps.len(),
                self.value(mu).len()
            )));
        }
        let data = self
            .data(mu)
            .iter()
            .zip(self.data(logvar))
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        Ok(self.build(shape, data, Op::Reparam { mu, logvar, eps }))
    }

    /// Like [`Tape::reparameterize_with`], drawing standard-normal noise from `rng`.
    pub fn reparameterize<R: Rng + ?Sized>(&mut self, mu: Var, logvar: Var, rng: &mut R) -> Result<Var> {
        let eps = (0..self.value(mu).len()).map(|_| rng.sample(StandardNormal)).collect();
        self.reparameterize_with(mu, logvar, eps)
    }

    /// Align-corners linear resampling of a length-`n` vector to length `m`.
    pub fn interp_linear(&mut self, v: Var, m: usize) -> Result<Var> {
        let n = match *self.shape(v) {
            [n] => n,
            ref s => return Err(Error::shape(format!("interp_linear needs a vector, got {s:?}"))),
        };
        if n < 2 || m < 2 {
            return Err(Error::Contract(format!(
                "interp_linear needs source and target length >= 2, got {n} -> {m}"
            )));
        }
        let src = self.data(v);
        let data = (0..m)
            .map(|j| {
                let (i0, f) = interp_coord(j, n, m);
                (1.0 - f) * src[i0] + f * src[i0 + 1]
            })
            .collect();
        Ok(self.build(vec![m], data, Op::Interp(v)))
    }

    /// Builds the `[N, 1 + C, B]` backbone input: each spectrum row of `x`
    /// (`[N, B]`) followed by the same `C` context rows (`[C, B]`).
    pub fn revise(&mut self, x: Var, contexts: Option<Var>) -> Result<Var> {
        let (n, b) = match *self.shape(x) {
            [n, b] => (n, b),
            ref s => return Err(Error::shape(format!("revise needs [N, B] spectra, got {s:?}"))),
        };
        let (c, ctx) = match contexts {
            None => (0, &[][..]),
            Some(cv) => match *self.shape(cv) {
                [c, cb] if cb == b => (c, self.data(cv)),
                ref s => {
                    return Err(Error::shape(format!(
                        "contexts {s:?} do not match band count {b}"
                    )))
                }
            },
        };
        let xs = self.data(x);
        let mut data = Vec::with_capacity(n * (c + 1) * b);
        for r in 0..n {
            data.extend_from_slice(&xs[r * b..(r + 1) * b]);
            data.extend_from_slice(ctx);
        }
        Ok(self.build(vec![n, c + 1, b], data, Op::Revise { x, contexts }))
    }

    /// Activation pattern (`input > 0`) of every rectifier on the tape.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.data(a).iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from a scalar root. A tape can be swept once per forward
    /// pass; recording any new operation re-arms it.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::State(
                "backward already ran on this tape without a new forward pass".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if let Op::Param(id) = self.nodes[i].op {
                params.push((i, id));
            }
            adj[i] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        self.spent = true;
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g.len(), |d| add_into(d, g));
                accumulate(&mut adj[b.0], g.len(), |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g.len(), |d| add_into(d, g));
                accumulate(&mut adj[b.0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                accumulate(&mut adj[b.0], g.len(), |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, s) => accumulate(&mut adj[a.0], g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)
            }),
            Op::Shift(a) | Op::Reshape(a) => {
                accumulate(&mut adj[a.0], g.len(), |d| add_into(d, g))
            }
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] / x[k];
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                accumulate(&mut adj[a.0], g.len(), |d| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                accumulate(&mut adj[a.0], len_of(*a), |d| d.iter_mut().for_each(|d| *d += g[0]))
            }
            Op::SliceCols { src, start } => {
                let (rows, cols) = rows_cols(self.shape(*src)).expect("checked in forward");
                let width = g.len() / rows;
                accumulate(&mut adj[src.0], rows * cols, |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(node.value.shape()).expect("checked in forward");
                let mut offset = 0;
                for p in parts {
                    let w = len_of(*p) / rows;
                    accumulate(&mut adj[p.0], rows * w, |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = len_of(*p);
                    accumulate(&mut adj[p.0], len, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { src, rows } => {
                let cols = node.value.shape()[1];
                accumulate(&mut adj[src.0], len_of(*src), |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let cols = g.len();
                let n = len_of(*a) / cols;
                let inv = 1.0 / n as f64;
                accumulate(&mut adj[a.0], n * cols, |d| {
                    for r in 0..n {
                        for c in 0..cols {
                            d[r * cols + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::Conv1d { x, kernels, bias } => self.conv1d_backward(*x, *kernels, *bias, g, adj),
            Op::Affine { x, w, b } => {
                let (n, din) = rows_cols(self.shape(*x)).expect("checked in forward");
                let dout = self.shape(*b)[0];
                let (xs, ws) = (self.data(*x), self.data(*w));
                accumulate(&mut adj[x.0], n * din, |d| {
                    for r in 0..n {
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            if go != 0.0 {
                                let wr = &ws[o * din..(o + 1) * din];
                                for (dv, wv) in d[r * din..(r + 1) * din].iter_mut().zip(wr) {
                                    *dv += go * wv;
                                }
                            }
                        }
                    }
                });
                accumulate(&mut adj[w.0], dout * din, |d| {
                    for r in 0..n {
                        let xr = &xs[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            if go != 0.0 {
                                for (dv, xv) in d[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                    *dv += go * xv;
                                }
                            }
                        }
                    }
                });
                accumulate(&mut adj[b.0], dout, |d| {
                    for r in 0..n {
                        add_into(d, &g[r * dout..(r + 1) * dout]);
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let k = probs.len() / targets.len();
                accumulate(&mut adj[logits.0], probs.len(), |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[r * k + c] += g[0] * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::SoftmaxEntropy { logits, probs } => {
                let ls = self.data(*logits);
                let k = *self.shape(*logits).last().expect("non-empty shape");
                let n = probs.len() / k;
                accumulate(&mut adj[logits.0], probs.len(), |d| {
                    for r in 0..n {
                        let p = &probs[r * k..(r + 1) * k];
                        let l = &ls[r * k..(r + 1) * k];
                        let mean: f64 = p.iter().zip(l).map(|(p, l)| p * l).sum();
                        for c in 0..k {
                            d[r * k + c] -= g[0] * p[c] * (l[c] - mean);
                        }
                    }
                });
            }
            Op::Reparam { mu, logvar, eps } => {
                let lv = self.data(*logvar);
                accumulate(&mut adj[mu.0], g.len(), |d| add_into(d, g));
                accumulate(&mut adj[logvar.0], g.len(), |d| {
                    for k in 0..g.len() {
                        d[k] += g[k] * 0.5 * eps[k] * (0.5 * lv[k]).exp();
                    }
                });
            }
            Op::Interp(v) => {
                let n = len_of(*v);
                let m = g.len();
                accumulate(&mut adj[v.0], n, |d| {
                    for (j, &gj) in g.iter().enumerate() {
                        let (i0, f) = interp_coord(j, n, m);
                        d[i0] += (1.0 - f) * gj;
                        d[i0 + 1] += f * gj;
                    }
                });
            }
            Op::Revise { x, contexts } => {
                let (n, b) = rows_cols(self.shape(*x)).expect("checked in forward");
                let c = node.value.shape()[1] - 1;
                accumulate(&mut adj[x.0], n * b, |d| {
                    for r in 0..n {
                        let base = r * (c + 1) * b;
                        add_into(&mut d[r * b..(r + 1) * b], &g[base..base + b]);
                    }
                });
                if let Some(cv) = contexts {
                    accumulate(&mut adj[cv.0], c * b, |d| {
                        for r in 0..n {
                            let base = r * (c + 1) * b + b;
                            add_into(d, &g[base..base + c * b]);
                        }
                    });
                }
            }
        }
    }

    fn conv1d_backward(&self, x: Var, kernels: Var, bias: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (cout, cin, k) = match *self.shape(kernels) {
            [o, i, k] => (o, i, k),
            _ => unreachable!("checked in forward"),
        };
        let len = *self.shape(x).last().expect("non-empty shape");
        let n = self.value(x).len() / (cin * len);
        let pad = k / 2;
        let xs = self.data(x);
        let ws = self.data(kernels);
        accumulate(&mut adj[bias.0], cout, |d| {
            for s in 0..n {
                for o in 0..cout {
                    d[o] += g[(s * cout + o) * len..(s * cout + o + 1) * len].iter().sum::<f64>();
                }
            }
        });
        accumulate(&mut adj[kernels.0], cout * cin * k, |d| {
            for s in 0..n {
                for o in 0..cout {
                    let go = &g[(s * cout + o) * len..(s * cout + o + 1) * len];
                    for i in 0..cin {
                        let sig = &xs[(s * cin + i) * len..(s * cin + i + 1) * len];
                        for t in 0..k {
                            let lo = pad.saturating_sub(t);
                            let hi = (len + pad).saturating_sub(t).min(len);
                            let mut acc = 0.0;
                            for l in lo..hi {
                                acc += go[l] * sig[l + t - pad];
                            }
                            d[(o * cin + i) * k + t] += acc;
                        }
                    }
                }
            }
        });
        accumulate(&mut adj[x.0], n * cin * len, |d| {
            for s in 0..n {
                for o in 0..cout {
                    let go = &g[(s * cout + o) * len..(s * cout + o + 1) * len];
                    for i in 0..cin {
                        let dsig = &mut d[(s * cin + i) * len..(s * cin + i + 1) * len];
                        let wk = &ws[(o * cin + i) * k..(o * cin + i + 1) * k];
                        for (t, &w) in wk.iter().enumerate() {
                            let lo = pad.saturating_sub(t);
                            let hi = (len + pad).saturating_sub(t).min(len);
                            for l in lo..hi {
                                dsig[l + t - pad] += w * go[l];
                            }
                        }
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Left sample index and blend weight for output `j` of an `n -> m` resample.
fn interp_coord(j: usize, n: usize, m: usize) -> (usize, f64) {
    let t = (j * (n - 1)) as f64 / (m - 1) as f64;
    let i0 = (t.floor() as usize).min(n - 2);
    (i0, t - i0 as f64)
}
