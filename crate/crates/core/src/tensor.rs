//! Minimal reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks it in reverse and returns gradients for the trainable entries of
//! the [`ParamStore`] it borrows. Sequences of different lengths are packed
//! row-wise into one matrix and attention is evaluated per [`Segment`], so
//! no compute is spent on padding.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors with per-tensor trainability.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a
    /// programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Number of scalar parameters, optionally only the trainable ones.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t || !trainable_only)
            .map(|(v, _)| v.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients indexed like the [`ParamStore`] they were computed for.
#[derive(Debug, Clone)]
pub struct Grads {
    values: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One packed sequence: rows `start..start + len`, of which the first
/// `valid` are real tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl Segment {
    pub fn packed(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .into_iter()
            .map(|len| {
                let seg = Segment { start, len, valid: len };
                start += len;
                seg
            })
            .collect()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    MulConst(Var, Matrix),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    SampledSoftmax {
        logits: Var,
        columns: Vec<Vec<usize>>,
        probs: Vec<Vec<f64>>,
        scale: f64,
    },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Option<Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Some(m), Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.is_trainable(id);
        self.push(None, Op::Param(id), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(Some(out), Op::MatMul(a, b), n)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let n = self.needs(a) || self.needs(b);
        self.push(Some(out), Op::MatMulT(a, b), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let n = self.needs(a) || self.needs(b);
        self.push(Some(out), Op::Add(a, b), n)
    }

    /// Adds the single-row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        let n = self.needs(a) || self.needs(row);
        self.push(Some(out), Op::AddRow(a, row), n)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let n = self.needs(a);
        self.push(Some(out), Op::Scale(a, c), n)
    }

    /// Row lookup: `out[i] = table[rows[i]]`.
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.nrows()) {
            return Err(Error::Shape(format!("row {bad} out of range for table of {} rows", t.nrows())));
        }
        let mut out = Matrix::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        let n = self.needs(table);
        Ok(self.push(Some(out), Op::Gather { table, rows }, n))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros((rows.len(), m.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&m.row(r));
        }
        let n = self.needs(a);
        self.push(Some(out), Op::SelectRows(a, rows), n)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &(&xhat * self.value(gain)) + self.value(bias);
        let n = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Some(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            n,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let n = self.needs(a);
        self.push(Some(out), Op::Relu(a), n)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let out = self.value(a) * &mask;
        let n = self.needs(a);
        self.push(Some(out), Op::MulConst(a, mask), n)
    }

    /// Multi-head scaled dot-product attention evaluated independently per
    /// segment. Keys at or beyond a segment's `valid` length are masked;
    /// with `causal` set, position `i` only sees keys `j <= i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        if kv.dim() != (rows, d) || vv.dim() != (rows, d) || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention over q{:?} k{:?} v{:?} with {heads} heads",
                qv.dim(),
                kv.dim(),
                vv.dim()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((rows, d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            if seg.valid == 0 || seg.valid > seg.len || seg.start + seg.len > rows {
                return Err(Error::Shape(format!("bad segment {seg:?} for {rows} rows")));
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![seg.start..seg.start + seg.len, cols.clone()]);
                let kh = kv.slice(s![seg.start..seg.start + seg.valid, cols.clone()]);
                let vh = vv.slice(s![seg.start..seg.start + seg.valid, cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let visible = if causal { (i + 1).min(seg.valid) } else { seg.valid };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..visible {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for j in 0..visible {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    for j in 0..seg.valid {
                        row[j] = if j < visible { row[j] / sum } else { 0.0 };
                    }
                }
                out.slice_mut(s![seg.start..seg.start + seg.len, cols])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let n = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Some(out),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            n,
        ))
    }

    /// Sampled softmax cross-entropy. Row `b` of `logits` is scored over
    /// `columns[b]`, whose first entry is the positive. The per-row losses are
    /// multiplied by `scale` (1/B for a mean) and summed into a 1x1 result.
    pub fn sampled_softmax(&mut self, logits: Var, columns: Vec<Vec<usize>>, scale: f64) -> Result<Var> {
        let lv = self.value(logits);
        if columns.len() != lv.nrows() {
            return Err(Error::Shape(format!(
                "{} candidate lists for {} logit rows",
                columns.len(),
                lv.nrows()
            )));
        }
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(columns.len());
        for (b, cols) in columns.iter().enumerate() {
            let scores: Vec<f64> = cols.iter().map(|&c| lv[[b, c]]).collect();
            let (loss, p) = softmax_xent(&scores)?;
            total += loss * scale;
            probs.push(p);
        }
        let n = self.needs(logits);
        Ok(self.push(
            Some(Matrix::from_elem((1, 1), total)),
            Op::SampledSoftmax {
                logits,
                columns,
                probs,
                scale,
            },
            n,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter that took part in the pass.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones(self.value(loss).dim()));
        let mut out = Grads {
            values: vec![None; self.params.len()],
        };
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, m: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &m,
                    slot => *slot = Some(m),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.values[id.0] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        acc(*a, g.dot(self.value(*b)));
                    }
                    if self.needs(*b) {
                        acc(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Gather { table, rows } => {
                    let mut dt = Matrix::zeros(self.shape(*table));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(*table, dt);
                }
                Op::SelectRows(a, rows) => {
                    let mut da = Matrix::zeros(self.shape(*a));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(*a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*gain) {
                        acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*bias) {
                        acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        let dxhat = &g * self.value(*gain);
                        let d = xhat.ncols() as f64;
                        let mut dx = Matrix::zeros(xhat.dim());
                        for (r, mut out_row) in dx.rows_mut().into_iter().enumerate() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let is = inv_std[r];
                            Zip::from(&mut out_row).and(&dr).and(&xr).for_each(|o, &dv, &xv| {
                                *o = is / d * (d * dv - sum_d - xv * sum_dx);
                            });
                        }
                        acc(*x, dx);
                    }
                }
                Op::Relu(a) => {
                    let mut da = g;
                    Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(*a, da);
                }
                Op::MulConst(a, mask) => acc(*a, g * mask),
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.dim());
                    let mut dk = Matrix::zeros(kv.dim());
                    let mut dv = Matrix::zeros(vv.dim());
                    let mut pi = 0;
                    for seg in segments {
                        for h in 0..*heads {
                            let p = &probs[pi];
                            pi += 1;
                            let cols = h * dh..(h + 1) * dh;
                            let rows_all = seg.start..seg.start + seg.len;
                            let rows_valid = seg.start..seg.start + seg.valid;
                            let go = g.slice(s![rows_all.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows_all.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows_valid.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows_valid.clone(), cols.clone()]);
                            let dp = go.dot(&vh.t());
                            let mut ds = softmax_backward(p.view(), dp.view());
                            ds *= scale;
                            let mut slot = dv.slice_mut(s![rows_valid.clone(), cols.clone()]);
                            slot += &p.t().dot(&go);
                            let mut slot = dq.slice_mut(s![rows_all, cols.clone()]);
                            slot += &ds.dot(&kh);
                            let mut slot = dk.slice_mut(s![rows_valid, cols]);
                            slot += &ds.t().dot(&qh);
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::SampledSoftmax {
                    logits,
                    columns,
                    probs,
                    scale,
                } => {
                    let upstream = g[[0, 0]];
                    let mut dl = Matrix::zeros(self.shape(*logits));
                    for (b, (cols, p)) in columns.iter().zip(probs).enumerate() {
                        for (j, (&c, &pj)) in cols.iter().zip(p).enumerate() {
                            let target = if j == 0 { 1.0 } else { 0.0 };
                            dl[[b, c]] += upstream * scale * (pj - target);
                        }
                    }
                    acc(*logits, dl);
                }
            }
        }
        out
    }
}

fn softmax_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Matrix {
    let mut ds = Matrix::zeros(p.dim());
    for ((mut out, pr), dr) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let inner = pr.dot(&dr);
        Zip::from(&mut out).and(&pr).and(&dr).for_each(|o, &pv, &dv| {
            *o = pv * (dv - inner);
        });
    }
    ds
}

/// `-log softmax(scores)[0]` with max subtraction, plus the softmax itself.
pub fn softmax_xent(scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Shape("empty score list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("sampled softmax scores".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (scores[0] - max);
    Ok((loss, exps.into_iter().map(|e| e / sum).collect()))
}
