//! Finite-difference verification of every differentiable primitive, each
//! model block, and the full joint objective of every variant.

use std::sync::Arc;

use rand::Rng as _;

use crate::config::{AuxTask, ModelVariant, TrainConfig};
use crate::diff::{grad_check_many, Activation, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use crate::encoder::{gat_layer, BoundGatLayer};
use crate::error::Result;
use crate::graph::{build_slide_graph, PatchBag};
use crate::jigsaw::{
    consistency_loss, jigsaw_forward, jigsaw_loss, BoundDiscriminator, BoundJigsawHead,
};
use crate::model::ModelParams;
use crate::params::Binder;
use crate::pooling::{mil_loss_on_tape, pool_on_tape, BoundPool};
use crate::rng::{self, Rng};
use crate::trainer::{slide_objective, PreparedSlide};

/// Pass threshold on the relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Coordinates sampled per full-objective check.
const OBJECTIVE_COORDS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

fn uniform(r: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Entries of magnitude in [0.05, 1.5] with random sign, clear of kinks at 0.
fn off_zero(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v = r.random_range(0.05..1.5);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Reduces `x` to a scalar through fixed random weights so that every entry
/// receives a distinct gradient.
fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone())?;
    let m = tape.mul(x, c)?;
    tape.sum(m)
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One randomized instantiation: inputs, the function, and optional coordinates.
struct Case {
    inputs: Vec<Tensor>,
    f: Check,
    coords: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64, f64),
    /// Magnitude in [0.05, 1.5] with random sign.
    OffZero,
}

fn sample(r: &mut Rng, (rows, cols): (usize, usize), init: Init) -> Tensor {
    match init {
        Init::Uniform(lo, hi) => uniform(r, rows, cols, lo, hi),
        Init::OffZero => off_zero(r, rows, cols),
    }
}

const U1: Init = Init::Uniform(-1.0, 1.0);

fn unary(
    r: &mut Rng,
    shape: (usize, usize),
    init: Init,
    op: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Case {
    let x = sample(r, shape, init);
    let probe = {
        let mut t = Tape::new();
        let v = t.constant(x.clone()).expect("finite");
        let y = op(&mut t, v).expect("probe");
        t.value(y).shape()
    };
    let w = uniform(r, probe.0, probe.1, -1.0, 1.0);
    Case {
        inputs: vec![x],
        f: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, &w)
        }),
        coords: None,
    }
}

fn binary(
    r: &mut Rng,
    (sa, ia): ((usize, usize), Init),
    (sb, ib): ((usize, usize), Init),
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
) -> Case {
    let a = sample(r, sa, ia);
    let b = sample(r, sb, ib);
    let probe = {
        let mut t = Tape::new();
        let va = t.constant(a.clone()).expect("finite");
        let vb = t.constant(b.clone()).expect("finite");
        let y = op(&mut t, va, vb).expect("probe");
        t.value(y).shape()
    };
    let w = uniform(r, probe.0, probe.1, -1.0, 1.0);
    Case {
        inputs: vec![a, b],
        f: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
        coords: None,
    }
}

fn small_bag(r: &mut Rng, n: usize, d1: usize) -> PatchBag {
    PatchBag {
        slide_id: "check".into(),
        patient_id: "check".into(),
        label: r.random_range(0..2),
        centroids: (0..n).map(|_| [r.random(), r.random()]).collect(),
        features: uniform(r, n, d1, -1.0, 1.0),
    }
}

type Builder = fn(&mut Rng) -> Case;

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |r| {
            binary(r, ((3, 4), U1), ((4, 2), U1), |t, a, b| t.matmul(a, b))
        }),
        ("transpose", |r| unary(r, (3, 4), U1, |t, x| t.transpose(x))),
        ("add", |r| {
            binary(r, ((3, 4), U1), ((3, 4), U1), |t, a, b| t.add(a, b))
        }),
        ("add_row", |r| {
            binary(r, ((3, 4), U1), ((1, 4), U1), |t, a, b| t.add_row(a, b))
        }),
        ("mul", |r| {
            binary(r, ((3, 4), U1), ((3, 4), U1), |t, a, b| t.mul(a, b))
        }),
        ("affine", |r| {
            unary(r, (3, 4), U1, |t, x| t.affine(x, 1.7, -0.3))
        }),
        ("scale", |r| unary(r, (3, 4), U1, |t, x| t.scale(x, -2.5))),
        ("relu", |r| {
            unary(r, (3, 4), Init::OffZero, |t, x| {
                t.activation(Activation::Relu, x)
            })
        }),
        ("leaky_relu", |r| {
            unary(r, (3, 4), Init::OffZero, |t, x| {
                t.activation(Activation::LeakyRelu(LEAKY_RELU_SLOPE), x)
            })
        }),
        ("elu", |r| {
            unary(r, (3, 4), Init::OffZero, |t, x| {
                t.activation(Activation::Elu, x)
            })
        }),
        ("tanh", |r| {
            unary(r, (3, 4), Init::Uniform(-2.0, 2.0), |t, x| {
                t.activation(Activation::Tanh, x)
            })
        }),
        ("sigmoid", |r| {
            unary(r, (3, 4), Init::Uniform(-3.0, 3.0), |t, x| {
                t.activation(Activation::Sigmoid, x)
            })
        }),
        ("segment_softmax", |r| {
            let segments: Arc<[usize]> = vec![0, 0, 0, 1, 1, 2, 2, 2, 2].into();
            let mut weights: Vec<f64> = (0..9).map(|_| r.random_range(0.1..1.0)).collect();
            weights[1] = 0.0;
            unary(r, (9, 1), Init::Uniform(-3.0, 3.0), move |t, x| {
                t.segment_softmax(x, segments.clone(), &weights, 3)
            })
        }),
        ("softmax_column", |r| {
            unary(r, (6, 1), Init::Uniform(-3.0, 3.0), |t, x| {
                t.softmax_column(x)
            })
        }),
        ("softmax_rows", |r| {
            unary(r, (3, 5), Init::Uniform(-3.0, 3.0), |t, x| {
                t.softmax_rows(x)
            })
        }),
        ("gather_rows", |r| {
            let index: Arc<[usize]> = vec![2, 0, 2, 3].into();
            unary(r, (4, 3), U1, move |t, x| t.gather_rows(x, index.clone()))
        }),
        ("slice_rows", |r| {
            unary(r, (5, 3), U1, |t, x| t.slice_rows(x, 1, 4))
        }),
        ("edge_aggregate", |r| {
            let source: Arc<[usize]> = vec![0, 1, 1, 2, 3, 0, 3].into();
            let target: Arc<[usize]> = vec![0, 0, 1, 1, 2, 3, 3].into();
            binary(
                r,
                ((7, 1), Init::Uniform(0.0, 1.0)),
                ((4, 3), U1),
                move |t, a, x| t.edge_aggregate(a, x, source.clone(), target.clone()),
            )
        }),
        ("gather_elements", |r| {
            let index: Arc<[(usize, usize)]> = vec![(0, 1), (2, 2), (0, 1), (1, 0)].into();
            unary(r, (3, 3), U1, move |t, x| {
                t.gather_elements(x, index.clone())
            })
        }),
        ("clamped_log", |r| {
            unary(r, (3, 4), Init::Uniform(0.1, 2.0), |t, x| {
                t.clamped_log(x, 1e-12)
            })
        }),
        ("sum", |r| unary(r, (3, 4), U1, |t, x| t.sum(x))),
        ("mean", |r| unary(r, (3, 4), U1, |t, x| t.mean(x))),
        ("mean_rows", |r| unary(r, (3, 4), U1, |t, x| t.mean_rows(x))),
        ("weighted_rows", |r| {
            binary(r, ((5, 1), U1), ((5, 3), U1), |t, a, h| {
                t.weighted_rows(a, h)
            })
        }),
        ("bce", |r| {
            let labels: Arc<[f64]> = vec![1.0, 0.0, 1.0, 0.0, 0.3].into();
            unary(r, (5, 1), Init::Uniform(0.05, 0.95), move |t, x| {
                t.bce(x, labels.clone(), 1e-12)
            })
        }),
    ]
}

fn blocks() -> Vec<(&'static str, Builder)> {
    vec![
        ("gat_layer", |r| {
            let bag = small_bag(r, 12, 6);
            let graph = build_slide_graph(&bag, 4, 3, Default::default()).expect("graph");
            let index = graph.message_index();
            Case {
                inputs: vec![
                    uniform(r, 8, 6, -0.6, 0.6),
                    uniform(r, 16, 1, -0.6, 0.6),
                    bag.features,
                ],
                f: Box::new(move |t, v| {
                    let layer = BoundGatLayer { w_g: v[0], v: v[1] };
                    let out = gat_layer(t, v[2], &index, &layer)?;
                    t.sum(out.h)
                }),
                coords: None,
            }
        }),
        ("attention_pool_classify", |r| {
            let label = r.random_range(0..2u8);
            Case {
                inputs: vec![
                    uniform(r, 7, 4, -1.0, 1.0),
                    uniform(r, 3, 4, -1.0, 1.0),
                    uniform(r, 3, 1, -1.0, 1.0),
                    uniform(r, 1, 1, -1.0, 1.0),
                    uniform(r, 4, 1, -1.0, 1.0),
                ],
                f: Box::new(move |t, v| {
                    let pool = BoundPool {
                        attention: Some((v[1], v[2])),
                        beta0: v[3],
                        beta: v[4],
                    };
                    let out = pool_on_tape(t, v[0], &pool)?;
                    mil_loss_on_tape(t, out.prob, label)
                }),
                coords: None,
            }
        }),
        ("mean_pool_classify", |r| {
            let label = r.random_range(0..2u8);
            Case {
                inputs: vec![
                    uniform(r, 7, 4, -1.0, 1.0),
                    uniform(r, 1, 1, -1.0, 1.0),
                    uniform(r, 4, 1, -1.0, 1.0),
                ],
                f: Box::new(move |t, v| {
                    let pool = BoundPool {
                        attention: None,
                        beta0: v[1],
                        beta: v[2],
                    };
                    let out = pool_on_tape(t, v[0], &pool)?;
                    mil_loss_on_tape(t, out.prob, label)
                }),
                coords: None,
            }
        }),
        ("jigsaw_loss", |r| {
            let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..9)).collect();
            let mask = vec![0, 2, 3, 5, 7];
            Case {
                inputs: vec![
                    uniform(r, 8, 4, -1.0, 1.0),
                    uniform(r, 9, 4, -1.0, 1.0),
                    uniform(r, 1, 9, -0.5, 0.5),
                ],
                f: Box::new(move |t, v| {
                    let head = BoundJigsawHead {
                        w_aux: v[1],
                        b_aux: v[2],
                    };
                    let probs = jigsaw_forward(t, v[0], &head)?;
                    jigsaw_loss(t, probs, &labels, &mask)
                }),
                coords: None,
            }
        }),
        ("consistency_loss", |r| Case {
            inputs: vec![
                uniform(r, 6, 4, -1.0, 1.0),
                uniform(r, 6, 4, -1.0, 1.0),
                uniform(r, 4, 1, -1.0, 1.0),
                uniform(r, 1, 1, -0.5, 0.5),
            ],
            f: Box::new(|t, v| {
                let disc = BoundDiscriminator {
                    w_d: v[2],
                    b_d: v[3],
                };
                consistency_loss(t, v[0], v[1], &disc)
            }),
            coords: None,
        }),
    ]
}

/// Joint objective of `variant` at λ = 0.7, differentiated w.r.t. every
/// parameter; 20 coordinates sampled across all tensors.
fn objective_case(r: &mut Rng, variant: ModelVariant, aux: Option<AuxTask>) -> Case {
    let config = TrainConfig {
        model_variant: variant,
        aux_task: aux,
        k_nn: 4,
        grid_g: 3,
        gat_hidden: 8,
        d4: 5,
        mask_keep_rate: 0.7,
        seed: r.random(),
        ..TrainConfig::default()
    };
    let bag = small_bag(r, 12, 6);
    let model = ModelParams::init(&config, 6).expect("valid config");
    let slide = PreparedSlide::new(bag, &config).expect("valid bag");
    let inputs: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let coords = (0..OBJECTIVE_COORDS)
        .map(|_| {
            let mut k = r.random_range(0..total);
            let mut t = 0;
            while k >= inputs[t].len() {
                k -= inputs[t].len();
                t += 1;
            }
            (t, k)
        })
        .collect();
    let aux_seed: u64 = r.random();
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let bound = model.bind(&mut Binder::replay(t, v))?;
            // Fresh stream per evaluation: every perturbation sees the same mask.
            let mut aux_rng = rng::stream(aux_seed, &[]);
            let obj = slide_objective(
                t,
                &bound,
                &slide,
                model.config.mask_keep_rate,
                0.7,
                &mut aux_rng,
            )?;
            Ok(obj.total)
        }),
        coords: Some(coords),
    }
}

fn run_case(case: Case) -> Result<f64> {
    let report = grad_check_many(&case.f, &case.inputs, EPS, case.coords.as_deref())?;
    Ok(report.max_rel_error)
}

/// Runs every check `trials` times with fresh random inputs.
pub fn run_gradcheck_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let mut push = |name: &str, build: &mut dyn FnMut(&mut Rng) -> Case| -> Result<()> {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut r = rng::stream(seed, &[name.len() as u64, trial as u64, hash(name)]);
            worst = worst.max(run_case(build(&mut r))?);
        }
        report.checks.push(CheckResult {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
        });
        Ok(())
    };
    for (name, build) in primitives().into_iter().chain(blocks()) {
        push(name, &mut |r| build(r))?;
    }
    let objectives = [
        ("objective/abmil", ModelVariant::Abmil, None),
        ("objective/abmil+jigsaw", ModelVariant::AbmilJigsaw, None),
        ("objective/graph-mil", ModelVariant::GraphMil, None),
        ("objective/graph-abmil", ModelVariant::GraphAbmil, None),
        (
            "objective/graph-abmil+jigsaw",
            ModelVariant::GraphAbmilJigsaw,
            None,
        ),
        (
            "objective/graph-abmil+consistency",
            ModelVariant::GraphAbmilJigsaw,
            Some(AuxTask::Consistency),
        ),
    ];
    for (name, variant, aux) in objectives {
        push(name, &mut |r| objective_case(r, variant, aux))?;
    }
    Ok(report)
}

fn hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_gradcheck_suite(2, 1).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        assert!(report
            .checks
            .iter()
            .any(|c| c.name == "objective/graph-abmil+jigsaw"));
    }
}
