//! Complete model: encoder, pooling head and optional auxiliary head, plus
//! the versioned binary container used to persist it.

use std::path::Path;

use crate::codec::{len_u32, put_u32, Reader};
use crate::config::{AuxTask, TrainConfig};
use crate::diff::{Tape, Tensor, Var};
use crate::encoder::{
    encode_on_tape, init_gat_layers, mlp_on_tape, BoundGatLayer, BoundMlp, GatLayerParams,
    MlpParams,
};
use crate::error::{Error, Result};
use crate::graph::{build_slide_graph, MessageIndex, PatchBag, SlideGraph};
use crate::jigsaw::{
    jigsaw_forward, BoundDiscriminator, BoundJigsawHead, DiscriminatorParams, JigsawHeadParams,
};
use crate::params::Binder;
use crate::pooling::{pool_on_tape, AttentionParams, BoundPool, PoolOutput, PoolParams};
use crate::rng;

const MAGIC: &[u8; 8] = b"JIGMDL01";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Graph(Vec<GatLayerParams>),
    Mlp(MlpParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AuxHead {
    None,
    Positional(JigsawHeadParams),
    Consistency(DiscriminatorParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: TrainConfig,
    pub d1: usize,
    pub encoder: Encoder,
    pub pool: PoolParams,
    pub aux: AuxHead,
}

#[derive(Clone, Debug)]
pub enum BoundEncoder {
    Graph(Vec<BoundGatLayer>),
    Mlp(BoundMlp),
}

#[derive(Clone, Copy, Debug)]
pub enum BoundAux {
    None,
    Positional(BoundJigsawHead),
    Consistency(BoundDiscriminator),
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub pool: BoundPool,
    pub aux: BoundAux,
}

/// Inference result for one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prob: f64,
    /// Per-patch attention, absent for mean pooling.
    pub attention: Option<Vec<f64>>,
    /// Slide embedding.
    pub z: Vec<f64>,
}

impl ModelParams {
    /// Fresh Glorot-initialized parameters for `config` on `d1`-wide features.
    /// Each part draws from its own stream so heads never shift the shared
    /// parameters.
    pub fn init(config: &TrainConfig, d1: usize) -> Result<Self> {
        config.validate()?;
        if d1 == 0 {
            return Err(Error::Config("feature width d1 must be at least 1".into()));
        }
        let seed = config.seed;
        let d2 = config.gat_hidden;
        let variant = config.model_variant;
        let encoder = if variant.uses_graph() {
            let mut dims = vec![d1];
            dims.extend(std::iter::repeat_n(d2, config.gat_layers));
            Encoder::Graph(init_gat_layers(&dims, seed)?)
        } else {
            Encoder::Mlp(MlpParams::init(d1, d2, d2, seed)?)
        };
        let mut pool_rng = rng::stream(seed, &[rng::tag::INIT, 2]);
        let d4 = variant.uses_attention().then_some(config.d4);
        let pool = PoolParams::init(d2, d4, &mut pool_rng)?;
        let mut aux_rng = rng::stream(seed, &[rng::tag::INIT, 3]);
        let aux = match config.aux() {
            AuxTask::None => AuxHead::None,
            AuxTask::Positional => {
                AuxHead::Positional(JigsawHeadParams::init(d2, config.grid_g, &mut aux_rng))
            }
            AuxTask::Consistency => {
                AuxHead::Consistency(DiscriminatorParams::init(d2, &mut aux_rng))
            }
        };
        Ok(ModelParams {
            config: config.clone(),
            d1,
            encoder,
            pool,
            aux,
        })
    }

    /// All parameter tensors: encoder, then pooling, then auxiliary head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = match &self.encoder {
            Encoder::Graph(layers) => layers.iter().flat_map(|l| [&l.w_g, &l.v]).collect(),
            Encoder::Mlp(m) => m.tensors(),
        };
        out.extend(self.pool.tensors());
        match &self.aux {
            AuxHead::None => {}
            AuxHead::Positional(h) => out.extend(h.tensors()),
            AuxHead::Consistency(d) => out.extend(d.tensors()),
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match &mut self.encoder {
            Encoder::Graph(layers) => layers
                .iter_mut()
                .flat_map(|l| [&mut l.w_g, &mut l.v])
                .collect(),
            Encoder::Mlp(m) => m.tensors_mut(),
        };
        out.extend(self.pool.tensors_mut());
        match &mut self.aux {
            AuxHead::None => {}
            AuxHead::Positional(h) => out.extend(h.tensors_mut()),
            AuxHead::Consistency(d) => out.extend(d.tensors_mut()),
        }
        out
    }

    /// Registers every parameter on the tape, in [`ModelParams::tensors`] order.
    pub fn bind(&self, b: &mut Binder<'_>) -> Result<BoundModel> {
        let encoder = match &self.encoder {
            Encoder::Graph(layers) => {
                BoundEncoder::Graph(layers.iter().map(|l| l.bind(b)).collect::<Result<_>>()?)
            }
            Encoder::Mlp(m) => BoundEncoder::Mlp(m.bind(b)?),
        };
        let pool = self.pool.bind(b)?;
        let aux = match &self.aux {
            AuxHead::None => BoundAux::None,
            AuxHead::Positional(h) => BoundAux::Positional(h.bind(b)?),
            AuxHead::Consistency(d) => BoundAux::Consistency(d.bind(b)?),
        };
        Ok(BoundModel { encoder, pool, aux })
    }

    pub fn build_graph(&self, bag: &PatchBag) -> Result<SlideGraph> {
        if bag.dim() != self.d1 {
            return Err(Error::Data(format!(
                "slide {} has feature width {}, model expects {}",
                bag.slide_id,
                bag.dim(),
                self.d1
            )));
        }
        build_slide_graph(
            bag,
            self.config.k_nn,
            self.config.grid_g,
            self.config.sigma_rule,
        )
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, bag: &PatchBag, graph: &SlideGraph) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut Binder::constants(&mut tape))?;
        let x = tape.constant(bag.features.clone())?;
        let (_, out) = forward_on_tape(&mut tape, &bound, x, &graph.message_index())?;
        Ok(Prediction {
            prob: tape.value(out.prob).item(),
            attention: out.attention.map(|a| tape.value(a).data().to_vec()),
            z: tape.value(out.z).data().to_vec(),
        })
    }

    /// Encoded instance embeddings, N×d2.
    pub fn embed(&self, bag: &PatchBag, graph: &SlideGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut Binder::constants(&mut tape))?;
        let x = tape.constant(bag.features.clone())?;
        let h = encode_bound(&mut tape, &bound.encoder, x, &graph.message_index())?;
        Ok(tape.value(h).clone())
    }

    /// N×G² bin probabilities. Needs a positional head.
    pub fn jigsaw_probs(&self, bag: &PatchBag, graph: &SlideGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut Binder::constants(&mut tape))?;
        let BoundAux::Positional(head) = bound.aux else {
            return Err(Error::Unsupported(format!(
                "variant {} has no positional head",
                self.config.model_variant.name()
            )));
        };
        let x = tape.constant(bag.features.clone())?;
        let h = encode_bound(&mut tape, &bound.encoder, x, &graph.message_index())?;
        let probs = jigsaw_forward(&mut tape, h, &head)?;
        Ok(tape.value(probs).clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.config.to_json();
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(config.len(), "config length")?);
        out.extend_from_slice(config.as_bytes());
        put_u32(&mut out, len_u32(self.d1, "d1")?);
        put_u32(&mut out, len_u32(tensors.len(), "tensor count")?);
        for t in tensors {
            put_u32(&mut out, len_u32(t.rows(), "rows")?);
            put_u32(&mut out, len_u32(t.cols(), "cols")?);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return r.fail(format!("unsupported model version {version}"));
        }
        let len = r.u32("config length")? as usize;
        let start = r.offset();
        let text = r.take(len, "config")?;
        let config = std::str::from_utf8(text)
            .map_err(|e| e.to_string())
            .and_then(|t| TrainConfig::parse(t).map_err(|e| e.to_string()))
            .map_err(|msg| Error::Format {
                offset: start,
                msg: format!("embedded config: {msg}"),
            })?;
        let d1 = r.u32("d1")? as usize;
        if d1 == 0 {
            return r.fail("d1 must be at least 1");
        }
        // Each layer stores two tensor headers; reject counts the buffer cannot hold
        // before materializing the layout.
        if config.gat_layers > bytes.len() / 16 {
            return Err(Error::Format {
                offset: start,
                msg: format!("embedded config declares {} layers", config.gat_layers),
            });
        }
        let shapes = layout(&config, d1).ok_or_else(|| Error::Format {
            offset: start,
            msg: "embedded config implies tensors beyond addressable size".into(),
        })?;
        let count = r.u32("tensor count")? as usize;
        if count != shapes.len() {
            return r.fail(format!(
                "{count} tensors stored, config implies {}",
                shapes.len()
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for (i, &(rows, cols)) in shapes.iter().enumerate() {
            let got = (r.u32("rows")? as usize, r.u32("cols")? as usize);
            if got != (rows, cols) {
                return r.fail(format!(
                    "tensor {i} is {got:?}, config implies {:?}",
                    (rows, cols)
                ));
            }
            r.expect_remaining(rows * cols, 8, "tensor data")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = r.f64("tensor data")?;
                if !v.is_finite() {
                    return Err(Error::Format {
                        offset: r.offset() - 8,
                        msg: format!("non-finite value in tensor {i}"),
                    });
                }
                data.push(v);
            }
            tensors.push(Tensor::from_vec(rows, cols, data)?);
        }
        r.finish()?;
        Ok(assemble(config, d1, tensors))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Tensor shapes implied by a configuration, in [`ModelParams::tensors`] order.
/// `None` when a shape overflows.
fn layout(config: &TrainConfig, d1: usize) -> Option<Vec<(usize, usize)>> {
    let d2 = config.gat_hidden;
    let variant = config.model_variant;
    let mut shapes = Vec::new();
    if variant.uses_graph() {
        let mut d_in = d1;
        for _ in 0..config.gat_layers {
            shapes.push((d2, d_in));
            shapes.push((d2.checked_mul(2)?, 1));
            d_in = d2;
        }
    } else {
        shapes.extend([(d2, d1), (1, d2), (d2, d2), (1, d2)]);
    }
    if variant.uses_attention() {
        shapes.extend([(config.d4, d2), (config.d4, 1)]);
    }
    shapes.extend([(1, 1), (d2, 1)]);
    match config.aux() {
        AuxTask::None => {}
        AuxTask::Positional => {
            let bins = config.grid_g.checked_mul(config.grid_g)?;
            shapes.extend([(bins, d2), (1, bins)]);
        }
        AuxTask::Consistency => shapes.extend([(d2, 1), (1, 1)]),
    }
    for &(r, c) in &shapes {
        r.checked_mul(c)?.checked_mul(8)?;
    }
    Some(shapes)
}

/// Rebuilds a model from tensors already checked against [`layout`].
fn assemble(config: TrainConfig, d1: usize, tensors: Vec<Tensor>) -> ModelParams {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("layout-checked tensor count");
    let variant = config.model_variant;
    let encoder = if variant.uses_graph() {
        Encoder::Graph(
            (0..config.gat_layers)
                .map(|_| GatLayerParams {
                    w_g: next(),
                    v: next(),
                })
                .collect(),
        )
    } else {
        Encoder::Mlp(MlpParams {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
    };
    let attention = variant.uses_attention().then(|| AttentionParams {
        v: next(),
        mu: next(),
    });
    let pool = PoolParams {
        attention,
        beta0: next(),
        beta: next(),
    };
    let aux = match config.aux() {
        AuxTask::None => AuxHead::None,
        AuxTask::Positional => AuxHead::Positional(JigsawHeadParams {
            w_aux: next(),
            b_aux: next(),
        }),
        AuxTask::Consistency => AuxHead::Consistency(DiscriminatorParams {
            w_d: next(),
            b_d: next(),
        }),
    };
    ModelParams {
        config,
        d1,
        encoder,
        pool,
        aux,
    }
}

/// Instance embeddings on the tape. The MLP encoder ignores the graph.
pub fn encode_bound(
    tape: &mut Tape,
    encoder: &BoundEncoder,
    x: Var,
    index: &MessageIndex,
) -> Result<Var> {
    match encoder {
        BoundEncoder::Graph(layers) => encode_on_tape(tape, x, index, layers),
        BoundEncoder::Mlp(m) => mlp_on_tape(tape, x, m),
    }
}

/// Encoder followed by pooling; returns the embeddings and the pooling outputs.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &BoundModel,
    x: Var,
    index: &MessageIndex,
) -> Result<(Var, PoolOutput)> {
    let h = encode_bound(tape, &model.encoder, x, index)?;
    let out = pool_on_tape(tape, h, &model.pool)?;
    Ok((h, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelVariant;

    fn small(variant: ModelVariant, aux: Option<AuxTask>) -> TrainConfig {
        TrainConfig {
            model_variant: variant,
            aux_task: aux,
            gat_hidden: 6,
            d4: 3,
            grid_g: 2,
            ..TrainConfig::default()
        }
    }

    fn all_configs() -> Vec<TrainConfig> {
        let mut out: Vec<_> = ModelVariant::ALL.iter().map(|&v| small(v, None)).collect();
        out.push(small(
            ModelVariant::GraphAbmilJigsaw,
            Some(AuxTask::Consistency),
        ));
        out.push(small(ModelVariant::AbmilJigsaw, Some(AuxTask::Consistency)));
        out
    }

    #[test]
    fn layout_matches_init() {
        for cfg in all_configs() {
            let m = ModelParams::init(&cfg, 4).unwrap();
            let shapes: Vec<_> = m.tensors().iter().map(|t| t.shape()).collect();
            assert_eq!(Some(shapes), layout(&cfg, 4), "{:?}", cfg.model_variant);
        }
    }

    #[test]
    fn container_round_trip() {
        for cfg in all_configs() {
            let m = ModelParams::init(&cfg, 5).unwrap();
            let bytes = m.to_bytes().unwrap();
            let back = ModelParams::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn shared_parameters_do_not_depend_on_head() {
        let with = ModelParams::init(&small(ModelVariant::GraphAbmilJigsaw, None), 4).unwrap();
        let without = ModelParams::init(&small(ModelVariant::GraphAbmil, None), 4).unwrap();
        assert_eq!(with.encoder, without.encoder);
        assert_eq!(with.pool, without.pool);
        let shared = without.tensors().len();
        assert_eq!(with.tensors()[..shared], without.tensors()[..]);
    }

    #[test]
    fn container_rejects_corruption() {
        let m = ModelParams::init(&small(ModelVariant::GraphAbmil, None), 3).unwrap();
        let bytes = m.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(
            ModelParams::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        for cut in [4, 12, 20, bytes.len() - 1] {
            assert!(matches!(
                ModelParams::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            ModelParams::from_bytes(&extra),
            Err(Error::Format { offset, .. }) if offset == bytes.len()
        ));

        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            ModelParams::from_bytes(&nan),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn predict_and_embed_shapes() {
        use crate::graph::PatchBag;
        let bag = PatchBag {
            slide_id: "s".into(),
            patient_id: "p".into(),
            label: 0,
            centroids: vec![[0.1, 0.2], [0.5, 0.5], [0.9, 0.3], [0.4, 0.8]],
            features: Tensor::from_vec(4, 3, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap(),
        };
        for cfg in all_configs() {
            let m = ModelParams::init(
                &TrainConfig {
                    k_nn: 2,
                    ..cfg.clone()
                },
                3,
            )
            .unwrap();
            let g = m.build_graph(&bag).unwrap();
            let p = m.predict(&bag, &g).unwrap();
            assert!(p.prob > 0.0 && p.prob < 1.0);
            assert_eq!(p.z.len(), 6);
            assert_eq!(p.attention.is_some(), cfg.model_variant.uses_attention());
            assert_eq!(m.embed(&bag, &g).unwrap().shape(), (4, 6));
            let probs = m.jigsaw_probs(&bag, &g);
            assert_eq!(probs.is_ok(), cfg.aux() == AuxTask::Positional);
        }
    }
}
