//! Reverse-mode differentiation over a linear tape of dense primitives.
//!
//! Every forward method appends one node and returns its [`Var`]. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use super::gemm::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// ELU with α = 1.
    Elu,
    Tanh,
    Sigmoid,
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

impl Activation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu(LEAKY_RELU_SLOPE)),
            "elu" => Ok(Activation::Elu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn leaky(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_relu slope must lie in (0,1), got {slope}"
            )));
        }
        Ok(Activation::LeakyRelu(slope))
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[floor, 1 - floor]`.
pub fn bce_mean(probs: &[f64], labels: &[f64], floor: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let mut l = 0.0;
            if y != 0.0 {
                l -= y * p.max(floor).ln();
            }
            if y != 1.0 {
                l -= (1.0 - y) * (1.0 - p).max(floor).ln();
            }
            l
        })
        .sum();
    total / probs.len() as f64
}

/// Sum that depends only on the multiset of terms: they are added in
/// ascending order, so any permutation of the input gives the same bits.
pub fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Weighted, max-shifted softmax within segments.
///
/// `out[e] = w[e]·exp(x[e] − m_s) / Σ_{f∈s} w[f]·exp(x[f] − m_s)` where `m_s`
/// is the largest logit among positive-weight entries of segment `s`.
pub fn segment_softmax(
    logits: &[f64],
    segments: &[usize],
    weights: &[f64],
    count: usize,
) -> Result<Vec<f64>> {
    let n = logits.len();
    if segments.len() != n || weights.len() != n {
        return Err(Error::dim(
            "segment_softmax",
            (n, 1),
            (segments.len(), weights.len()),
        ));
    }
    let mut shift = vec![f64::NEG_INFINITY; count];
    for e in 0..n {
        let s = segments[e];
        if s >= count {
            return Err(Error::Contract(format!(
                "segment id {s} out of range for {count} segments"
            )));
        }
        let w = weights[e];
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Contract(format!(
                "segment weight {w} at entry {e} is not a finite nonnegative number"
            )));
        }
        if w > 0.0 && logits[e] > shift[s] {
            shift[s] = logits[e];
        }
    }
    if let Some(segment) = shift.iter().position(|m| *m == f64::NEG_INFINITY) {
        return Err(Error::DegenerateSegment { segment });
    }
    let mut out = vec![0.0; n];
    let mut norm = vec![0.0; count];
    for e in 0..n {
        if weights[e] > 0.0 {
            let s = segments[e];
            let v = weights[e] * (logits[e] - shift[s]).exp();
            out[e] = v;
            norm[s] += v;
        }
    }
    for e in 0..n {
        out[e] /= norm[segments[e]];
    }
    Ok(out)
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    SegmentSoftmax {
        x: Var,
        segments: Arc<[usize]>,
        count: usize,
    },
    SoftmaxRows(Var),
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    EdgeAggregate {
        alpha: Var,
        x: Var,
        source: Arc<[usize]>,
        target: Arc<[usize]>,
    },
    GatherElements {
        x: Var,
        index: Arc<[(usize, usize)]>,
    },
    ClampedLog {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    WeightedRows(Var, Var),
    Bce {
        x: Var,
        labels: Arc<[f64]>,
        floor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Act { .. } => "activation",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::EdgeAggregate { .. } => "edge_aggregate",
            Op::GatherElements { .. } => "gather_elements",
            Op::ClampedLog { .. } => "clamped_log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::WeightedRows(..) => "weighted_rows",
            Op::Bce { .. } => "bce",
        }
    }

    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::WeightedRows(a, b) => [Some(a), Some(b)],
            Op::EdgeAggregate { alpha, x, .. } => [Some(alpha), Some(x)],
            Op::Transpose(x)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::Affine { x, .. }
            | Op::Act { x, .. }
            | Op::SegmentSoftmax { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::GatherElements { x, .. }
            | Op::ClampedLog { x, .. }
            | Op::Bce { x, .. } => [Some(x), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, false)
    }

    fn input(&mut self, t: Tensor, needs_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(
            View::normal(self.value(a)),
            View::normal(self.value(b)),
            &mut out,
            false,
        );
        self.push(Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(Op::Transpose(x), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.accumulate(tb);
        self.push(Op::Add(a, b), out)
    }

    /// `x + 1ᵀb`: adds the 1×d row `b` to every row of the n×d `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(x, b), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(Op::Mul(a, b), out)
    }

    /// `scale·x + shift` elementwise, with constant scale and shift.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine { x, scale }, out)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Act { x, kind }, out)
    }

    /// Softmax within segments of a column, discounted by nonnegative weights.
    /// See [`segment_softmax`].
    pub fn segment_softmax(
        &mut self,
        x: Var,
        segments: Arc<[usize]>,
        weights: &[f64],
        count: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() != 1 {
            return Err(Error::dim(
                "segment_softmax",
                tx.shape(),
                (segments.len(), 1),
            ));
        }
        let out = segment_softmax(tx.data(), &segments, weights, count)?;
        self.push(
            Op::SegmentSoftmax { x, segments, count },
            Tensor::column(out),
        )
    }

    /// Plain softmax over all entries of a column. The normalizer is an
    /// [`order_free_sum`], so permuting rows permutes the output exactly.
    pub fn softmax_column(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() != 1 || tx.rows() == 0 {
            return Err(Error::dim(
                "softmax_column",
                tx.shape(),
                (tx.rows().max(1), 1),
            ));
        }
        let m = tx.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = tx.data().iter().map(|v| (v - m).exp()).collect();
        let z = order_free_sum(out.clone());
        out.iter_mut().for_each(|v| *v /= z);
        let n = out.len();
        self.push(
            Op::SegmentSoftmax {
                x,
                segments: vec![0; n].into(),
                count: 1,
            },
            Tensor::column(out),
        )
    }

    /// `aᵀh` for an N×1 weight column and N×d rows, each column reduced with
    /// [`order_free_sum`].
    pub fn weighted_rows(&mut self, a: Var, h: Var) -> Result<Var> {
        let (ta, th) = (self.value(a), self.value(h));
        if ta.cols() != 1 || ta.rows() != th.rows() {
            return Err(Error::dim("weighted_rows", ta.shape(), th.shape()));
        }
        let out: Vec<f64> = (0..th.cols())
            .map(|k| {
                order_free_sum(
                    (0..th.rows())
                        .map(|j| ta.data()[j] * th.get(j, k))
                        .collect(),
                )
            })
            .collect();
        let out = Tensor::from_vec(1, th.cols(), out)?;
        self.push(Op::WeightedRows(a, h), out)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Op::SoftmaxRows(x), out)
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            if i >= tx.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {} rows",
                    tx.rows()
                )));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::from_vec(index.len(), d, data)?;
        self.push(Op::GatherRows { x, index }, out)
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start > end || end > tx.rows() {
            return Err(Error::dim("slice_rows", tx.shape(), (start, end)));
        }
        let d = tx.cols();
        let out = Tensor::from_vec(end - start, d, tx.data()[start * d..end * d].to_vec())?;
        self.push(Op::SliceRows { x, start }, out)
    }

    /// Weighted message passing: `out[target[e]] += alpha[e] · x[source[e]]`.
    ///
    /// `alpha` is E×1, `x` is N×d and the output is N×d.
    pub fn edge_aggregate(
        &mut self,
        alpha: Var,
        x: Var,
        source: Arc<[usize]>,
        target: Arc<[usize]>,
    ) -> Result<Var> {
        let (ta, tx) = (self.value(alpha), self.value(x));
        let e = source.len();
        if ta.shape() != (e, 1) || target.len() != e {
            return Err(Error::dim("edge_aggregate", ta.shape(), (e, 1)));
        }
        let n = tx.rows();
        if let Some(bad) = source.iter().chain(target.iter()).find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "edge_aggregate node {bad} out of range for {n} nodes"
            )));
        }
        let mut out = Tensor::zeros(n, tx.cols());
        for k in 0..e {
            let a = ta.data()[k];
            let src = tx.row(source[k]);
            for (o, s) in out.row_mut(target[k]).iter_mut().zip(src) {
                *o += a * s;
            }
        }
        self.push(
            Op::EdgeAggregate {
                alpha,
                x,
                source,
                target,
            },
            out,
        )
    }

    /// Column of the selected `(row, col)` entries.
    pub fn gather_elements(&mut self, x: Var, index: Arc<[(usize, usize)]>) -> Result<Var> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(index.len());
        for &(r, c) in index.iter() {
            if r >= tx.rows() || c >= tx.cols() {
                return Err(Error::dim("gather_elements", tx.shape(), (r, c)));
            }
            data.push(tx.get(r, c));
        }
        self.push(Op::GatherElements { x, index }, Tensor::column(data))
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn clamped_log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(Op::ClampedLog { x, floor }, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(x), out)
    }

    /// 1×d column means of an n×d tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::Contract("mean_rows of an empty tensor".into()));
        }
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let n = t.rows() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        self.push(Op::MeanRows(x), out)
    }

    /// Mean binary cross-entropy of a K×1 probability column against labels.
    pub fn bce(&mut self, x: Var, labels: Arc<[f64]>, floor: f64) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 || t.rows() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce", t.shape(), (labels.len(), 1)));
        }
        let out = Tensor::scalar(bce_mean(t.data(), &labels, floor));
        self.push(Op::Bce { x, labels, floor }, out)
    }

    /// Gradients of the 1×1 node `output` with respect to every input.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got {out_shape:?}"
            )));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let slot = slot(grads, a, self.shape(a));
                    gemm(View::normal(g), View::transposed(self.value(b)), slot, true);
                }
                if self.wants(b) {
                    let slot = slot(grads, b, self.shape(b));
                    gemm(View::transposed(self.value(a)), View::normal(g), slot, true);
                }
            }
            &Op::WeightedRows(a, h) => {
                let (ta, th) = (self.value(a), self.value(h));
                if self.wants(a) {
                    let da: Vec<f64> = (0..th.rows())
                        .map(|j| th.row(j).iter().zip(g.data()).map(|(x, y)| x * y).sum())
                        .collect();
                    self.send(grads, a, Tensor::column(da));
                }
                if self.wants(h) {
                    let mut dh = Tensor::zeros(th.rows(), th.cols());
                    for j in 0..th.rows() {
                        for (o, v) in dh.row_mut(j).iter_mut().zip(g.data()) {
                            *o = ta.data()[j] * v;
                        }
                    }
                    self.send(grads, h, dh);
                }
            }
            &Op::Transpose(x) => self.send(grads, x, g.transpose()),
            &Op::Add(a, b) => {
                self.send_ref(grads, a, g);
                self.send_ref(grads, b, g);
            }
            &Op::AddRow(x, b) => {
                self.send_ref(grads, x, g);
                if self.wants(b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.send(grads, b, db);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, v)| g * v);
                    self.send(grads, a, with_data(g, d));
                }
                if self.wants(b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, v)| g * v);
                    self.send(grads, b, with_data(g, d));
                }
            }
            &Op::Affine { x, scale } => self.send(grads, x, g.map(|v| scale * v)),
            &Op::Act { x, kind } => {
                let tx = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data().iter().zip(y.data()))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv));
                self.send(grads, x, with_data(g, d));
            }
            Op::SegmentSoftmax { x, segments, count } => {
                let mut dot = vec![0.0; *count];
                for (e, &s) in segments.iter().enumerate() {
                    dot[s] += y.data()[e] * g.data()[e];
                }
                let d = segments
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y.data()[e] * (g.data()[e] - dot[s]));
                self.send(grads, *x, with_data(g, d));
            }
            &Op::SoftmaxRows(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(grads, x, dx);
            }
            Op::GatherRows { x, index } => {
                if self.wants(*x) {
                    let slot = slot(grads, *x, self.shape(*x));
                    for (k, &i) in index.iter().enumerate() {
                        for (o, v) in slot.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let slot = slot(grads, x, self.shape(x));
                    let d = g.cols();
                    for (o, v) in slot.data_mut()[start * d..].iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::EdgeAggregate {
                alpha,
                x,
                source,
                target,
            } => {
                let (ta, tx) = (self.value(*alpha), self.value(*x));
                if self.wants(*alpha) {
                    let d = source.iter().zip(target.iter()).map(|(&s, &t)| {
                        g.row(t)
                            .iter()
                            .zip(tx.row(s))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    });
                    let da = Tensor::column(d.collect());
                    self.send(grads, *alpha, da);
                }
                if self.wants(*x) {
                    let slot = slot(grads, *x, tx.shape());
                    for (k, (&s, &t)) in source.iter().zip(target.iter()).enumerate() {
                        let a = ta.data()[k];
                        let src = g.row(t);
                        for (o, v) in slot.row_mut(s).iter_mut().zip(src) {
                            *o += a * v;
                        }
                    }
                }
            }
            Op::GatherElements { x, index } => {
                if self.wants(*x) {
                    let slot = slot(grads, *x, self.shape(*x));
                    for (k, &(r, c)) in index.iter().enumerate() {
                        let cols = slot.cols();
                        slot.data_mut()[r * cols + c] += g.data()[k];
                    }
                }
            }
            &Op::ClampedLog { x, floor } => {
                let tx = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| if v > floor { g / v } else { 0.0 });
                self.send(grads, x, with_data(g, d));
            }
            &Op::Sum(x) => {
                let (r, c) = self.shape(x);
                self.send(grads, x, Tensor::filled(r, c, g.item()));
            }
            &Op::Mean(x) => {
                let (r, c) = self.shape(x);
                self.send(grads, x, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            &Op::MeanRows(x) => {
                let (r, c) = self.shape(x);
                let mut dx = Tensor::zeros(r, c);
                let n = r as f64;
                for i in 0..r {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                self.send(grads, x, dx);
            }
            Op::Bce { x, labels, floor } => {
                let tx = self.value(*x);
                let k = labels.len() as f64;
                let gv = g.item();
                let d: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&p, &l)| {
                        let mut d = 0.0;
                        if l != 0.0 && p > *floor {
                            d -= l / p;
                        }
                        if l != 1.0 && 1.0 - p > *floor {
                            d += (1.0 - l) / (1.0 - p);
                        }
                        gv * d / k
                    })
                    .collect();
                self.send(grads, *x, Tensor::column(d));
            }
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn send_ref(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.accumulate(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn with_data(like: &Tensor, data: impl Iterator<Item = f64>) -> Tensor {
    Tensor::from_vec(like.rows(), like.cols(), data.collect())
        .expect("elementwise gradient keeps the shape")
}
