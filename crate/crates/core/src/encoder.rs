//! Instance encoders: stacked spatial graph-attention layers, and the
//! per-patch two-layer MLP used by plain attention MIL.

use rand::Rng;

use crate::diff::{Activation, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use crate::error::{Error, Result};
use crate::graph::{MessageIndex, PatchBag, SlideGraph};
use crate::params::{glorot, Binder};
use crate::rng;

/// One graph-attention layer: projection `W_G` (d_out×d_in) and attention
/// vector `v` (2·d_out×1). The first half of `v` scores the receiving node,
/// the second half the sending neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    pub w_g: Tensor,
    pub v: Tensor,
}

impl GatLayerParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        GatLayerParams {
            w_g: glorot(d_out, d_in, rng),
            v: glorot(2 * d_out, 1, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_g.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w_g.rows()
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> Result<BoundGatLayer> {
        Ok(BoundGatLayer {
            w_g: b.leaf(&self.w_g)?,
            v: b.leaf(&self.v)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGatLayer {
    pub w_g: Var,
    pub v: Var,
}

/// Output of one attention layer on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    /// N×d_out refined embeddings.
    pub h: Var,
    /// Attention per directed message, aligned with the [`MessageIndex`].
    pub alpha: Var,
}

/// Spatially discounted graph attention:
/// `e = LeakyReLU(v·[W x_j ‖ W x_l])`, `α` = weighted softmax of `e` over
/// each node's neighbours and itself, `h_j = ELU(Σ α_jm W x_m)`.
pub fn gat_layer(
    tape: &mut Tape,
    x: Var,
    index: &MessageIndex,
    layer: &BoundGatLayer,
) -> Result<GatOutput> {
    let xs = tape.value(x).shape();
    if xs.0 != index.nodes {
        return Err(Error::dim("gat_layer", xs, (index.nodes, xs.1)));
    }
    let d_out = tape.value(layer.w_g).rows();
    let wt = tape.transpose(layer.w_g)?;
    let proj = tape.matmul(x, wt)?;

    let v_self = tape.slice_rows(layer.v, 0, d_out)?;
    let v_nbr = tape.slice_rows(layer.v, d_out, 2 * d_out)?;
    let score_self = tape.matmul(proj, v_self)?;
    let score_nbr = tape.matmul(proj, v_nbr)?;
    let per_target = tape.gather_rows(score_self, index.target.clone())?;
    let per_source = tape.gather_rows(score_nbr, index.source.clone())?;
    let e = tape.add(per_target, per_source)?;
    let e = tape.activation(Activation::LeakyRelu(LEAKY_RELU_SLOPE), e)?;

    let alpha = tape.segment_softmax(e, index.target.clone(), &index.weight, index.nodes)?;
    let agg = tape.edge_aggregate(alpha, proj, index.source.clone(), index.target.clone())?;
    let h = tape.activation(Activation::Elu, agg)?;
    Ok(GatOutput { h, alpha })
}

/// Applies the layers in order. Layer widths must chain from the input width.
pub fn encode_on_tape(
    tape: &mut Tape,
    x: Var,
    index: &MessageIndex,
    layers: &[BoundGatLayer],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let width = tape.value(h).cols();
        let expects = tape.value(layer.w_g).cols();
        if width != expects {
            return Err(Error::Config(format!(
                "encoder layer {i} expects width {expects}, receives {width}"
            )));
        }
        h = gat_layer(tape, h, index, layer)?.h;
    }
    Ok(h)
}

/// One attention layer without gradient bookkeeping.
/// Returns the embeddings and the per-message attention.
pub fn gat_layer_forward(
    x: &Tensor,
    graph: &SlideGraph,
    params: &GatLayerParams,
) -> Result<(Tensor, Vec<f64>)> {
    let index = graph.message_index();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let bound = BoundGatLayer {
        w_g: tape.constant(params.w_g.clone())?,
        v: tape.constant(params.v.clone())?,
    };
    let out = gat_layer(&mut tape, xv, &index, &bound)?;
    Ok((
        tape.value(out.h).clone(),
        tape.value(out.alpha).data().to_vec(),
    ))
}

/// Graph-attention encoding of a whole bag.
pub fn encode(bag: &PatchBag, graph: &SlideGraph, layers: &[GatLayerParams]) -> Result<Tensor> {
    if bag.len() != graph.n {
        return Err(Error::dim("encode", (bag.len(), bag.dim()), (graph.n, 0)));
    }
    let index = graph.message_index();
    let mut tape = Tape::new();
    let x = tape.constant(bag.features.clone())?;
    let bound = layers
        .iter()
        .map(|l| {
            Ok(BoundGatLayer {
                w_g: tape.constant(l.w_g.clone())?,
                v: tape.constant(l.v.clone())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let h = encode_on_tape(&mut tape, x, &index, &bound)?;
    Ok(tape.value(h).clone())
}

/// Glorot-initialized attention stack for widths `dims[0] → dims[1] → …`.
pub fn init_gat_layers(dims: &[usize], seed: u64) -> Result<Vec<GatLayerParams>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!("invalid encoder widths {dims:?}")));
    }
    Ok(dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let mut r = rng::stream(seed, &[rng::tag::INIT, 0, i as u64]);
            GatLayerParams::init(w[0], w[1], &mut r)
        })
        .collect())
}

/// `ReLU(W₂·ReLU(W₁x + b₁) + b₂)` applied to each row independently.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    /// hidden×d1.
    pub w1: Tensor,
    /// 1×hidden.
    pub b1: Tensor,
    /// d2×hidden.
    pub w2: Tensor,
    /// 1×d2.
    pub b2: Tensor,
}

impl MlpParams {
    pub fn init(d1: usize, hidden: usize, d2: usize, seed: u64) -> Result<Self> {
        if d1 == 0 || hidden == 0 || d2 == 0 {
            return Err(Error::Config(format!(
                "invalid MLP widths {d1}→{hidden}→{d2}"
            )));
        }
        let mut r1 = rng::stream(seed, &[rng::tag::INIT, 1, 0]);
        let mut r2 = rng::stream(seed, &[rng::tag::INIT, 1, 1]);
        Ok(MlpParams {
            w1: glorot(hidden, d1, &mut r1),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(d2, hidden, &mut r2),
            b2: Tensor::zeros(1, d2),
        })
    }

    pub fn d_out(&self) -> usize {
        self.w2.rows()
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> Result<BoundMlp> {
        Ok(BoundMlp {
            w1: b.leaf(&self.w1)?,
            b1: b.leaf(&self.b1)?,
            w2: b.leaf(&self.w2)?,
            b2: b.leaf(&self.b2)?,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp_on_tape(tape: &mut Tape, x: Var, p: &BoundMlp) -> Result<Var> {
    let w1t = tape.transpose(p.w1)?;
    let h = tape.matmul(x, w1t)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.activation(Activation::Relu, h)?;
    let w2t = tape.transpose(p.w2)?;
    let h = tape.matmul(h, w2t)?;
    let h = tape.add_row(h, p.b2)?;
    tape.activation(Activation::Relu, h)
}

pub fn mlp_encode(x: &Tensor, params: &MlpParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let bound = BoundMlp {
        w1: tape.constant(params.w1.clone())?,
        b1: tape.constant(params.b1.clone())?,
        w2: tape.constant(params.w2.clone())?,
        b2: tape.constant(params.b2.clone())?,
    };
    let h = mlp_on_tape(&mut tape, xv, &bound)?;
    Ok(tape.value(h).clone())
}
