//! Minimal reverse-mode autodiff over row-major `f64` matrices, sized for
//! the tiny desk-scale encoder. Values are 2-D; scalars are `1×1`.

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: Vec<Mat>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn to_snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            params: self
                .values
                .iter()
                .zip(&self.names)
                .map(|(v, n)| StoredParam {
                    name: n.clone(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a snapshot with matching names and shapes.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.params.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                snap.params.len()
            )));
        }
        for (i, p) in snap.params.iter().enumerate() {
            if p.name != self.names[i] || p.shape != [self.values[i].nrows(), self.values[i].ncols()] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {} {:?}",
                    self.names[i],
                    self.values[i].dim(),
                    p.name,
                    p.shape
                )));
            }
            self.values[i] = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub params: Vec<StoredParam>,
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    MeanRows(Var),
    Sum(Vec<Var>),
    BceWithLogits(Var, Mat),
    CrossEntropy(Var, usize),
    SpanScores {
        start_proj: Var,
        end_proj: Var,
        bias: Var,
        out: Var,
        spans: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// A computation graph recorded against a parameter store.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.get(id),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let src = self.store.get(table);
        let mut out = Array2::zeros((ids.len(), src.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&src.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a` (T×d) plus the `1×d` row `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Element-wise product of each row of `a` with the `1×d` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
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

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::Rows(a, start, end))
    }

    /// Rows of `a` at `idx`, in order; repeats allowed.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut v = Array2::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&av.row(i));
        }
        self.push(v, Op::SelectRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.rows(a, i, i + 1)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Mean binary cross-entropy of `logits` against same-shaped targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let z = self.value(logits);
        let n = z.len() as f64;
        let loss = Zip::from(z)
            .and(&targets)
            .fold(0.0, |acc, &z, &t| acc + softplus(z) - t * z)
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::BceWithLogits(logits, targets))
    }

    /// Softmax cross-entropy of a `1×n` logit row against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[[0, target]];
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy(logits, target))
    }

    /// Feed-forward span scores `relu(S[s] + E[e] + bias) · out` for each
    /// `(s, e)`; returns a `1×spans` row.
    pub fn span_scores(
        &mut self,
        start_proj: Var,
        end_proj: Var,
        bias: Var,
        out: Var,
        spans: Vec<(usize, usize)>,
    ) -> Var {
        let sp = self.value(start_proj);
        let ep = self.value(end_proj);
        let b = self.value(bias);
        let w = self.value(out);
        let h = sp.ncols();
        let mut scores = Array2::zeros((1, spans.len()));
        for (k, &(s, e)) in spans.iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..h {
                let pre = sp[[s, c]] + ep[[e, c]] + b[[0, c]];
                if pre > 0.0 {
                    acc += pre * w[[c, 0]];
                }
            }
            scores[[0, k]] = acc;
        }
        self.push(
            scores,
            Op::SpanScores {
                start_proj,
                end_proj,
                bias,
                out,
                spans,
            },
        )
    }

    /// Backpropagates from the scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        let mut out = Grads::zeros_like(self.store);

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::Gather(id, ids) => {
                    let slot = out.grads[id.0]
                        .get_or_insert_with(|| Array2::zeros(self.store.get(*id).raw_dim()));
                    for (r, &tok) in ids.iter().enumerate() {
                        let mut dst = slot.row_mut(tok);
                        dst += &g.row(r);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let mut ga = Array2::zeros(y.raw_dim());
                    for ((mut gr, yr), gin) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot: f64 = yr.iter().zip(gin.iter()).map(|(y, g)| y * g).sum();
                        Zip::from(&mut gr)
                            .and(&yr)
                            .and(&gin)
                            .for_each(|o, &y, &g| *o = y * (g - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let gxhat = &g * gv;
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gh = gxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_g: f64 = gh.sum();
                        let sum_gx: f64 = gh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] =
                                inv_std[r] / d * (d * gh[c] - sum_g - xh[c] * sum_gx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::Rows(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.nrows() as f64;
                    let row = g.row(0).mapv(|v| v / n);
                    let ga = Array2::from_shape_fn(av.raw_dim(), |(_, c)| row[c]);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
                Op::BceWithLogits(logits, targets) => {
                    let z = self.value(*logits);
                    let n = z.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let gz = Zip::from(z)
                        .and(targets)
                        .map_collect(|&z, &t| (sigmoid(z) - t) * scale);
                    acc(&mut grads, *logits, gz);
                }
                Op::CrossEntropy(logits, target) => {
                    let z = self.value(*logits);
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut p = z.mapv(|v| (v - max).exp());
                    let sum = p.sum();
                    p.mapv_inplace(|v| v / sum * g[[0, 0]]);
                    p[[0, *target]] -= g[[0, 0]];
                    acc(&mut grads, *logits, p);
                }
                Op::SpanScores {
                    start_proj,
                    end_proj,
                    bias,
                    out: w_out,
                    spans,
                } => {
                    let sp = self.value(*start_proj);
                    let ep = self.value(*end_proj);
                    let b = self.value(*bias);
                    let w = self.value(*w_out);
                    let h = sp.ncols();
                    let mut gs = Array2::zeros(sp.raw_dim());
                    let mut ge = Array2::zeros(ep.raw_dim());
                    let mut gb = Array2::zeros(b.raw_dim());
                    let mut gw = Array2::zeros(w.raw_dim());
                    for (k, &(s, e)) in spans.iter().enumerate() {
                        let gk = g[[0, k]];
                        if gk == 0.0 {
                            continue;
                        }
                        for c in 0..h {
                            let pre = sp[[s, c]] + ep[[e, c]] + b[[0, c]];
                            if pre > 0.0 {
                                gw[[c, 0]] += gk * pre;
                                let gh = gk * w[[c, 0]];
                                gs[[s, c]] += gh;
                                ge[[e, c]] += gh;
                                gb[[0, c]] += gh;
                            }
                        }
                    }
                    acc(&mut grads, *start_proj, gs);
                    acc(&mut grads, *end_proj, ge);
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *w_out, gw);
                }
            }
        }
        out
    }
}

/// AdamW with decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Array2::zeros(store.get(id).raw_dim())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let decay = if store.get(id).nrows() > 1 && store.get(id).ncols() > 1 {
                self.weight_decay
            } else {
                0.0
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
    }
}
