//! Dense 2-D tensors with a small reverse-mode tape.
//!
//! Every graph op checks its output for NaN/Inf and fails fast. Gradients
//! are computed on demand by [`Graph::backward`] and accumulated into a
//! [`ParamStore`] with [`Graph::accumulate_param_grads`]; nothing is zeroed
//! implicitly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for shape [{rows}, {cols}]", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Byte footprint of the values.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// a[n,k] · b[k,m]
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

// a[n,k] · b[m,k]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[n,k]ᵀ · b[n,m]
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability clamp applied before logarithms in the BCE op.
pub const PROB_EPS: f64 = 1e-7;

/// Margins and scales of the circle loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleTerms {
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub pos_scale: f64,
    pub neg_scale: f64,
}

/// One anchor row of the circle loss with its positive and negative rows
/// in the other descriptor matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircleAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    GroupMax { x: Var, argmax: Vec<usize> },
    L2Normalize(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    Bce { p: Var, labels: Vec<f64> },
    Circle {
        a: Var,
        b: Var,
        anchors: Vec<CircleAnchor>,
        terms: CircleTerms,
        count: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Gather(..) => "gather",
            Op::GroupMax { .. } => "group_max",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Mean(_) => "mean",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Bce { .. } => "bce",
            Op::Circle { .. } => "circle_loss",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    label: Option<&'static str>,
}

/// A reverse-mode tape. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` is tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Tags a node so memory accounting can find it by name.
    pub fn set_label(&mut self, v: Var, label: &'static str) {
        self.nodes[v.0].label = Some(label);
    }

    /// `(label or op name, bytes)` for every buffer on the tape.
    pub fn buffers(&self) -> impl Iterator<Item = (&'static str, usize)> + '_ {
        self.nodes
            .iter()
            .map(|n| (n.label.unwrap_or_else(|| n.op.name()), n.value.bytes()))
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTensor(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            tracked,
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that records its gradient (used for gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.params[id.0].value.clone(), Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} · {:?}", ta.shape(), tb.shape()),
            });
        }
        let out = Tensor {
            rows: ta.rows,
            cols: tb.cols,
            data: matmul_nn(&ta.data, &tb.data, ta.rows, ta.cols, tb.cols),
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), tracked)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                detail: format!("{:?} · {:?}ᵀ", ta.shape(), tb.shape()),
            });
        }
        let out = Tensor {
            rows: ta.rows,
            cols: tb.rows,
            data: matmul_nt(&ta.data, &tb.data, ta.rows, ta.cols, tb.rows),
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMulT(a, b), tracked)
    }

    /// Adds a `[1, m]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows != 1 || tb.cols != tx.cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let mut out = tx.clone();
        for row in out.data.chunks_mut(tx.cols.max(1)) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        self.push(out, Op::AddBias(x, bias), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x, c), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let tracked = self.tracked(x);
        self.push(out, Op::Sigmoid(x), tracked)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let cols = out.cols;
        if cols > 0 {
            for row in out.data.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax(x), tracked)
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.rows) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} of {}", tx.rows),
            });
        }
        let mut data = Vec::with_capacity(index.len() * tx.cols);
        for &i in &index {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor {
            rows: index.len(),
            cols: tx.cols,
            data,
        };
        let tracked = self.tracked(x);
        self.push(out, Op::Gather(x, index), tracked)
    }

    /// Max over consecutive groups of `group` rows: `[g·group, c] → [g, c]`.
    /// Ties go to the first row of the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        if group == 0 || tx.rows % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "group_max",
                detail: format!("{} rows in groups of {group}", tx.rows),
            });
        }
        let groups = tx.rows / group;
        let cols = tx.cols;
        let mut data = vec![f64::NEG_INFINITY; groups * cols];
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for r in 0..group {
                let src_row = g * group + r;
                for c in 0..cols {
                    let v = tx.data[src_row * cols + c];
                    let slot = g * cols + c;
                    if v > data[slot] || r == 0 {
                        data[slot] = v;
                        argmax[slot] = src_row;
                    }
                }
            }
        }
        let out = Tensor {
            rows: groups,
            cols,
            data,
        };
        let tracked = self.tracked(x);
        self.push(out, Op::GroupMax { x, argmax }, tracked)
    }

    /// Scales each row to unit L2 norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let cols = out.cols;
        if cols > 0 {
            for row in out.data.chunks_mut(cols) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let tracked = self.tracked(x);
        self.push(out, Op::L2Normalize(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = tx.data.iter().sum::<f64>() / tx.data.len() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(m), Op::Mean(x), tracked)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut tracked = false;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != [1, 1] {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    detail: format!("term of shape {:?}", t.shape()),
                });
            }
            total += w * t.data[0];
            tracked |= self.tracked(v);
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), tracked)
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`,
    /// with `p` clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>) -> Result<Var> {
        let tp = self.value(p);
        if tp.data.len() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                detail: format!("{} probabilities vs {} labels", tp.data.len(), labels.len()),
            });
        }
        let n = labels.len() as f64;
        let loss = -tp
            .data
            .iter()
            .zip(&labels)
            .map(|(&o, &y)| {
                let o = o.clamp(PROB_EPS, 1.0 - PROB_EPS);
                y * o.ln() + (1.0 - y) * (1.0 - o).ln()
            })
            .sum::<f64>()
            / n;
        let tracked = self.tracked(p);
        self.push(Tensor::scalar(loss), Op::Bce { p, labels }, tracked)
    }

    /// Circle loss of the rows of `a` against the rows of `b`, averaged over
    /// `count` anchors (anchors without positives contribute zero).
    pub fn circle_loss(
        &mut self,
        a: Var,
        b: Var,
        anchors: Vec<CircleAnchor>,
        terms: CircleTerms,
        count: usize,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols || count == 0 {
            return Err(Error::ShapeMismatch {
                op: "circle_loss",
                detail: format!("{:?} vs {:?}, count {count}", ta.shape(), tb.shape()),
            });
        }
        for an in &anchors {
            if an.anchor >= ta.rows
                || an.positives.iter().chain(&an.negatives).any(|&j| j >= tb.rows)
            {
                return Err(Error::ShapeMismatch {
                    op: "circle_loss",
                    detail: format!("anchor {} references out-of-range rows", an.anchor),
                });
            }
        }
        let mut total = 0.0;
        for an in &anchors {
            if an.positives.is_empty() {
                continue;
            }
            let (sp, sn) = circle_sums(ta, tb, an, &terms);
            total += (sp * sn).ln_1p();
        }
        let loss = total / count as f64;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::scalar(loss),
            Op::Circle {
                a,
                b,
                anchors,
                terms,
                count,
            },
            tracked,
        )
    }

    /// Reverse pass from a scalar `loss`. Replaces any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if tl.shape() != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", tl.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].tracked {
                *g = None;
            } else if g.is_none() {
                let v = &self.nodes[idx].value;
                *g = Some(Tensor::zeros(v.rows, v.cols));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.params[id.0].grad.add_assign(g);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d = matmul_nt(&g.data, &tb.data, g.rows, g.cols, tb.rows);
                    send(*a, Tensor { rows: ta.rows, cols: ta.cols, data: d }, grads);
                }
                if self.tracked(*b) {
                    let d = matmul_tn(&ta.data, &g.data, ta.rows, ta.cols, g.cols);
                    send(*b, Tensor { rows: tb.rows, cols: tb.cols, data: d }, grads);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d = matmul_nn(&g.data, &tb.data, g.rows, g.cols, tb.cols);
                    send(*a, Tensor { rows: ta.rows, cols: ta.cols, data: d }, grads);
                }
                if self.tracked(*b) {
                    let d = matmul_tn(&g.data, &ta.data, g.rows, g.cols, ta.cols);
                    send(*b, Tensor { rows: tb.rows, cols: tb.cols, data: d }, grads);
                }
            }
            Op::AddBias(x, b) => {
                if self.tracked(*b) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols.max(1)) {
                        for (o, v) in db.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(*b, db, grads);
                }
                send(*x, g.clone(), grads);
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Scale(x, c) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|v| *v *= c);
                send(*x, d, grads);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let mut d = g.clone();
                for (dv, &xv) in d.data.iter_mut().zip(&tx.data) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                send(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                for (dv, &y) in d.data.iter_mut().zip(&out.data) {
                    *dv *= y * (1.0 - y);
                }
                send(*x, d, grads);
            }
            Op::Softmax(x) => {
                let mut d = g.clone();
                let cols = out.cols.max(1);
                for (drow, yrow) in d.data.chunks_mut(cols).zip(out.data.chunks(cols)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                send(*x, d, grads);
            }
            Op::Gather(x, index) => {
                let tx = self.value(*x);
                let mut d = Tensor::zeros(tx.rows, tx.cols);
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..tx.cols {
                        d.data[src * tx.cols + c] += g.data[r * tx.cols + c];
                    }
                }
                send(*x, d, grads);
            }
            Op::GroupMax { x, argmax } => {
                let tx = self.value(*x);
                let mut d = Tensor::zeros(tx.rows, tx.cols);
                for (slot, &src_row) in argmax.iter().enumerate() {
                    let c = slot % tx.cols;
                    d.data[src_row * tx.cols + c] += g.data[slot];
                }
                send(*x, d, grads);
            }
            Op::L2Normalize(x) => {
                let tx = self.value(*x);
                let cols = tx.cols.max(1);
                let mut d = Tensor::zeros(tx.rows, tx.cols);
                for r in 0..tx.rows {
                    let xr = &tx.data[r * cols..(r + 1) * cols];
                    let yr = &out.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        for c in 0..cols {
                            d.data[r * cols + c] = gr[c] / 1e-12;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d.data[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                send(*x, d, grads);
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.data[0] / tx.data.len() as f64;
                send(
                    *x,
                    Tensor {
                        rows: tx.rows,
                        cols: tx.cols,
                        data: vec![v; tx.data.len()],
                    },
                    grads,
                );
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    send(v, Tensor::scalar(w * g.data[0]), grads);
                }
            }
            Op::Bce { p, labels } => {
                let tp = self.value(*p);
                let n = labels.len() as f64;
                let mut d = Tensor::zeros(tp.rows, tp.cols);
                for ((dv, &o), &y) in d.data.iter_mut().zip(&tp.data).zip(labels) {
                    if o > PROB_EPS && o < 1.0 - PROB_EPS {
                        *dv = -g.data[0] * (y / o - (1.0 - y) / (1.0 - o)) / n;
                    }
                }
                send(*p, d, grads);
            }
            Op::Circle {
                a,
                b,
                anchors,
                terms,
                count,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols;
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                let mut db = Tensor::zeros(tb.rows, tb.cols);
                let upstream = g.data[0] / *count as f64;
                for an in anchors {
                    if an.positives.is_empty() {
                        continue;
                    }
                    let (sp, sn) = circle_sums(ta, tb, an, terms);
                    let coef = upstream / (1.0 + sp * sn);
                    let x = ta.row(an.anchor);
                    let mut push = |j: usize, dl_dd: f64| {
                        let y = tb.row(j);
                        let d = row_distance(x, y);
                        if d <= 0.0 {
                            return;
                        }
                        for c in 0..cols {
                            let u = (x[c] - y[c]) / d * dl_dd;
                            da.data[an.anchor * cols + c] += u;
                            db.data[j * cols + c] -= u;
                        }
                    };
                    for &j in &an.positives {
                        let d = row_distance(x, tb.row(j));
                        let e = (terms.pos_scale * (d - terms.pos_margin)).exp();
                        push(j, coef * sn * terms.pos_scale * e);
                    }
                    for &k in &an.negatives {
                        let d = row_distance(x, tb.row(k));
                        let f = (terms.neg_scale * (terms.neg_margin - d)).exp();
                        push(k, -coef * sp * terms.neg_scale * f);
                    }
                }
                send(*a, da, grads);
                send(*b, db, grads);
            }
        }
    }
}

fn row_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn circle_sums(ta: &Tensor, tb: &Tensor, an: &CircleAnchor, terms: &CircleTerms) -> (f64, f64) {
    let x = ta.row(an.anchor);
    let sp: f64 = an
        .positives
        .iter()
        .map(|&j| (terms.pos_scale * (row_distance(x, tb.row(j)) - terms.pos_margin)).exp())
        .sum();
    let sn: f64 = an
        .negatives
        .iter()
        .map(|&k| (terms.neg_scale * (terms.neg_margin - row_distance(x, tb.row(k)))).exp())
        .sum();
    (sp, sn)
}

/// Affine + ReLU stack; the last layer stays linear.
pub fn mlp_forward(g: &mut Graph, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = g.matmul(h, w)?;
        h = g.add_bias(z, b)?;
        if i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Query/key/value projections of single-head attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// `softmax((X·W_Q)(Y·W_K)ᵀ / √d) · (Y·W_V)`.
pub fn cross_attention(g: &mut Graph, queries: Var, keys_values: Var, w: AttentionWeights) -> Result<Var> {
    biased_attention(g, queries, keys_values, w, None)
}

/// Scaled dot-product attention with an optional additive `[q, k]` logit bias.
pub fn biased_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: AttentionWeights,
    bias: Option<Var>,
) -> Result<Var> {
    if g.value(keys_values).rows() == 0 {
        return Err(Error::invalid("cross-attention over an empty key/value set"));
    }
    let q = g.matmul(queries, w.query)?;
    let k = g.matmul(keys_values, w.key)?;
    let v = g.matmul(keys_values, w.value)?;
    let d = g.value(q).cols().max(1) as f64;
    let logits = g.matmul_t(q, k)?;
    g.set_label(logits, "attention_logits");
    let mut scaled = g.scale(logits, 1.0 / d.sqrt())?;
    g.set_label(scaled, "attention_logits");
    if let Some(b) = bias {
        scaled = g.add(scaled, b)?;
        g.set_label(scaled, "attention_logits");
    }
    let weights = g.softmax(scaled)?;
    g.set_label(weights, "attention_scores");
    g.matmul(weights, v)
}

/// A named trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(value.rows, value.cols),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        StoredTensor {
                            shape: vec![p.value.rows, p.value.cols],
                            values: p.value.data.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a checkpoint, parameters in name order.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in &ck.tensors {
            let [rows, cols] = t.shape[..] else {
                return Err(Error::Checkpoint(format!("{name}: expected 2-D shape, got {:?}", t.shape)));
            };
            let value = Tensor::new(rows, cols, t.values.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            store.add(name, value)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: parameter name → shape + row-major values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |p: &Parameter| Tensor::zeros(p.value.rows, p.value.cols);
        Self {
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len()
        || store
            .iter()
            .zip(&state.m)
            .any(|(p, m)| p.value.shape() != m.shape())
    {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: "optimizer state does not match parameters".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.data.len() {
            let g = p.grad.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_checks() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(g.backward(a).is_err());
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn non_finite_fails_fast() {
        let mut g = Graph::new();
        let a = g.constant(t(1, 1, &[1e308])).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFiniteTensor("scale"))));
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(3, 2, &[1.0, -2.0, 3.0, 4.0, 0.5, 0.1])).unwrap();
        let w = g.constant(Tensor::zeros(2, 2)).unwrap();
        let b = g.constant(t(1, 2, &[0.3, -0.7])).unwrap();
        let y = mlp_forward(&mut g, x, &[(w, b)]).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y).row(r), &[0.3, -0.7]);
        }
    }

    #[test]
    fn identity_mlp_passes_non_negative_input() {
        let mut g = Graph::new();
        let data = [1.0, 2.0, 0.0, 4.0];
        let x = g.constant(t(2, 2, &data)).unwrap();
        let w = g.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(Tensor::zeros(1, 2)).unwrap();
        let h = mlp_forward(&mut g, x, &[(w, b)]).unwrap();
        let y = g.relu(h).unwrap();
        assert_eq!(g.value(y).data(), &data);
    }

    #[test]
    fn single_key_attention_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::glorot(4, 3, &mut rng)).unwrap();
        let y = g.constant(Tensor::glorot(1, 3, &mut rng)).unwrap();
        let w = AttentionWeights {
            query: g.constant(Tensor::glorot(3, 3, &mut rng)).unwrap(),
            key: g.constant(Tensor::glorot(3, 3, &mut rng)).unwrap(),
            value: g.constant(Tensor::glorot(3, 3, &mut rng)).unwrap(),
        };
        let out = cross_attention(&mut g, x, y, w).unwrap();
        let proj = g.matmul(y, w.value).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((g.value(out).get(r, c) - g.value(proj).get(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_keys_give_mean_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::glorot(3, 2, &mut rng)).unwrap();
        let key_row = [0.4, -0.9];
        // identical key rows but distinct value rows: keys come from Y·W_K,
        // so use a W_K that annihilates the differing coordinate
        let y = g.constant(t(3, 2, &[key_row[0], 1.0, key_row[0], -2.0, key_row[0], 5.0])).unwrap();
        let w = AttentionWeights {
            query: g.constant(Tensor::glorot(2, 2, &mut rng)).unwrap(),
            key: g.constant(t(2, 2, &[1.0, 0.5, 0.0, 0.0])).unwrap(),
            value: g.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap(),
        };
        let out = cross_attention(&mut g, x, y, w).unwrap();
        for r in 0..3 {
            assert!((g.value(out).get(r, 0) - key_row[0]).abs() < 1e-15);
            assert!((g.value(out).get(r, 1) - 4.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_keys_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 2)).unwrap();
        let y = g.constant(Tensor::zeros(0, 2)).unwrap();
        let w = AttentionWeights {
            query: g.constant(Tensor::zeros(2, 2)).unwrap(),
            key: g.constant(Tensor::zeros(2, 2)).unwrap(),
            value: g.constant(Tensor::zeros(2, 2)).unwrap(),
        };
        assert!(cross_attention(&mut g, x, y, w).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let mut x = Tensor::glorot(6, 9, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        let x = g.constant(x).unwrap();
        let s = g.softmax(x).unwrap();
        for r in 0..6 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_linear_map_gradient() {
        // loss = mean(x·W) over a 1×3 output; d/dW[i][j] = x[i] / 3
        let mut store = ParamStore::new();
        let w = store.add("w", t(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[2.0, -1.0])).unwrap();
        let wv = g.param(&store, w).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let loss = g.mean(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        g.accumulate_param_grads(&mut store);
        let expect = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0];
        for (a, b) in store.get(w).grad.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // a second accumulation without zeroing doubles the gradient
        g.accumulate_param_grads(&mut store);
        for (a, b) in store.get(w).grad.data().iter().zip(expect) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        store.zero_grad();
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(1, 2, &[0.5, -0.25])).unwrap();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.5, -0.25]);
        // after a real step, zero gradients decay the moments
        store.get_mut(id).grad = t(1, 2, &[1.0, 1.0]);
        adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        let m_before = state.m[0].data()[0];
        store.zero_grad();
        adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        assert!((state.m[0].data()[0] - 0.9 * m_before).abs() < 1e-15);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(1, 2, &[0.0, 0.0])).unwrap();
        let mut state = AdamState::new(&store);
        for _ in 0..50 {
            store.get_mut(id).grad = t(1, 2, &[2.0, -3.0]);
            adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        }
        let v = store.get(id).value.data();
        assert!(v[0] < 0.0 && v[1] > 0.0);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-6,
        };
        let grads = [0.5, -1.5, 2.0];
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0)).unwrap();
        let mut state = AdamState::new(&store);
        for g in grads {
            store.get_mut(id).grad = Tensor::scalar(g);
            adam_step(&mut store, &mut state, &cfg).unwrap();
        }
        // hand-rolled recurrence
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.8 * m + 0.2 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-6);
        }
        assert!((store.get(id).value.data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("b", Tensor::glorot(3, 5, &mut rng)).unwrap();
        store.add("a", Tensor::glorot(1, 7, &mut rng)).unwrap();
        let json = store.to_checkpoint().to_json().unwrap();
        let back = ParamStore::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        for p in store.iter() {
            assert_eq!(back.by_name(&p.name).unwrap().value, p.value);
        }
        assert!(ParamStore::from_checkpoint(&Checkpoint::from_json(r#"{"tensors":{"x":{"shape":[2,2],"values":[1.0]}}}"#).unwrap()).is_err());
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(1, 1)).unwrap();
        assert!(store.add("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn bce_anchor_values() {
        let mut g = Graph::new();
        let p = g.constant(t(4, 1, &[0.5; 4])).unwrap();
        let l = g.bce(p, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let p = g.constant(t(2, 1, &[1.0, 0.0])).unwrap();
        let l = g.bce(p, vec![1.0, 0.0]).unwrap();
        assert!(g.value(l).data()[0] <= 1e-6);
        let p = g.constant(t(2, 1, &[0.3, 0.2])).unwrap();
        assert!(g.bce(p, vec![1.0]).is_err());
    }
}
