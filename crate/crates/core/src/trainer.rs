//! Joint objective, per-slide Adam training, cross-validation and evaluation.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::calibrate::maybe_update;
use crate::config::{AuxTask, TrainConfig};
use crate::data::Manifest;
use crate::diff::{adam_step, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{MessageIndex, PatchBag, SlideGraph};
use crate::jigsaw::{
    bin_accuracy, consistency_loss, corrupt_features, jigsaw_forward, jigsaw_loss, sample_mask,
};
use crate::model::{encode_bound, forward_on_tape, BoundAux, BoundModel, ModelParams};
use crate::params::Binder;
use crate::pooling::mil_loss_on_tape;
use crate::rng::{self, Rng};

/// A slide with its graph built once for the whole run.
#[derive(Clone, Debug)]
pub struct PreparedSlide {
    pub bag: PatchBag,
    pub graph: SlideGraph,
    pub index: MessageIndex,
}

impl PreparedSlide {
    pub fn new(bag: PatchBag, config: &TrainConfig) -> Result<Self> {
        bag.validate()?;
        let graph =
            crate::graph::build_slide_graph(&bag, config.k_nn, config.grid_g, config.sigma_rule)?;
        let index = graph.message_index();
        Ok(PreparedSlide { bag, graph, index })
    }
}

pub fn prepare_slides(bags: &[PatchBag], config: &TrainConfig) -> Result<Vec<PreparedSlide>> {
    bags.iter()
        .map(|b| PreparedSlide::new(b.clone(), config))
        .collect()
}

/// Tape nodes of the per-slide objective `MIL + λ·aux`.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub mil: Var,
    pub aux: Option<Var>,
    /// The node to differentiate. Equals `mil` when λ is zero or there is
    /// no auxiliary head, so the auxiliary branch contributes nothing.
    pub total: Var,
    pub prob: Var,
}

/// Records the joint objective for one slide. `rng` drives the supervision
/// mask or the feature shuffle of the auxiliary task.
pub fn slide_objective(
    tape: &mut Tape,
    model: &BoundModel,
    slide: &PreparedSlide,
    keep_rate: f64,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Objective> {
    let x = tape.constant(slide.bag.features.clone())?;
    let (h, pooled) = forward_on_tape(tape, model, x, &slide.index)?;
    let mil = mil_loss_on_tape(tape, pooled.prob, slide.bag.label)?;
    let aux = match model.aux {
        BoundAux::None => None,
        BoundAux::Positional(head) => {
            let probs = jigsaw_forward(tape, h, &head)?;
            let mask = sample_mask(slide.bag.len(), keep_rate, rng)?;
            Some(jigsaw_loss(tape, probs, &slide.graph.bin_labels, &mask)?)
        }
        BoundAux::Consistency(disc) => {
            let (fake, _) = corrupt_features(&slide.bag.features, rng);
            let x_fake = tape.constant(fake)?;
            let h_fake = encode_bound(tape, &model.encoder, x_fake, &slide.index)?;
            Some(consistency_loss(tape, h, h_fake, &disc)?)
        }
    };
    let total = match aux {
        Some(a) if lambda != 0.0 => {
            let weighted = tape.scale(a, lambda)?;
            tape.add(mil, weighted)?
        }
        _ => mil,
    };
    Ok(Objective {
        mil,
        aux,
        total,
        prob: pooled.prob,
    })
}

/// Losses and gradients of one slide, gradients in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub total: f64,
    pub mil: f64,
    pub aux: Option<f64>,
    pub prob: f64,
    pub grads: Vec<Tensor>,
}

pub fn train_slide_step(
    model: &ModelParams,
    slide: &PreparedSlide,
    lambda: f64,
    rng: &mut Rng,
    epoch: usize,
) -> Result<StepOutput> {
    let diverged = |detail: String| Error::Divergence {
        slide_id: slide.bag.slide_id.clone(),
        epoch,
        detail,
    };
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let bound = model.bind(&mut binder)?;
    let vars = binder.finish();
    let obj = slide_objective(
        &mut tape,
        &bound,
        slide,
        model.config.mask_keep_rate,
        lambda,
        rng,
    )
    .map_err(|e| match e {
        Error::NonFinite { op } => diverged(format!("non-finite output of {op}")),
        other => other,
    })?;
    let total = tape.value(obj.total).item();
    if !total.is_finite() {
        return Err(diverged(format!("loss {total}")));
    }
    let grads = tape.backward(obj.total).map_err(|e| match e {
        Error::NonFinite { op } => diverged(format!("non-finite gradient in {op}")),
        other => other,
    })?;
    Ok(StepOutput {
        total,
        mil: tape.value(obj.mil).item(),
        aux: obj.aux.map(|a| tape.value(a).item()),
        prob: tape.value(obj.prob).item(),
        grads: vars.iter().map(|&v| grads.wrt(v)).collect(),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fold: usize,
    pub mil_loss: f64,
    /// Zero for variants without an auxiliary head.
    pub jigsaw_loss: f64,
    /// λ in effect during the epoch; zero without an auxiliary head.
    pub lambda: f64,
    pub train_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    /// `(fold, test AUC)`.
    pub test_auc: Vec<(usize, f64)>,
}

/// Observer for parameter snapshots after every Adam step.
pub trait StepObserver {
    fn after_step(&mut self, epoch: usize, slide: usize, model: &ModelParams);
}

impl StepObserver for () {
    fn after_step(&mut self, _: usize, _: usize, _: &ModelParams) {}
}

impl<F: FnMut(usize, usize, &ModelParams)> StepObserver for F {
    fn after_step(&mut self, epoch: usize, slide: usize, model: &ModelParams) {
        self(epoch, slide, model)
    }
}

/// Trains one model on `slides`. Slide order is reshuffled every epoch and
/// each slide draws its auxiliary randomness from its own stream.
pub fn train_fold(
    slides: &[PreparedSlide],
    config: &TrainConfig,
    fold: usize,
    observer: &mut dyn StepObserver,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    config.validate()?;
    let Some(first) = slides.first() else {
        return Err(Error::Config("training set is empty".into()));
    };
    let positives = slides.iter().filter(|s| s.bag.label == 1).count();
    if positives == 0 || positives == slides.len() {
        return Err(Error::Config(format!(
            "training set of fold {fold} holds a single class"
        )));
    }
    let d1 = first.bag.dim();
    if let Some(s) = slides.iter().find(|s| s.bag.dim() != d1) {
        return Err(Error::Data(format!(
            "slide {} has feature width {}, expected {d1}",
            s.bag.slide_id,
            s.bag.dim()
        )));
    }
    let mut model = ModelParams::init(config, d1)?;
    let mut adam = AdamState::new(model.tensors());
    let hyper = config.adam();
    let has_aux = config.aux() != AuxTask::None;
    let mut lambda = config.lambda_state()?;
    let labels: Vec<u8> = slides.iter().map(|s| s.bag.label).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..slides.len()).collect();

    for epoch in 1..=config.epochs {
        let mut shuffle = rng::stream(config.seed, &[rng::tag::SHUFFLE, fold as u64, epoch as u64]);
        order.shuffle(&mut shuffle);
        let lam = if has_aux { lambda.lambda() } else { 0.0 };
        let (mut mil_sum, mut aux_sum) = (0.0, 0.0);
        let mut probs = vec![0.0; slides.len()];
        for &i in &order {
            let mut r = rng::stream(
                config.seed,
                &[rng::tag::SLIDE, fold as u64, i as u64, epoch as u64],
            );
            let step = train_slide_step(&model, &slides[i], lam, &mut r, epoch)?;
            mil_sum += step.mil;
            aux_sum += step.aux.unwrap_or(0.0);
            probs[i] = step.prob;
            let mut params = model.tensors_mut();
            adam_step(&mut params, &step.grads, &mut adam, &hyper)?;
            if params.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    slide_id: slides[i].bag.slide_id.clone(),
                    epoch,
                    detail: "non-finite parameter after update".into(),
                });
            }
            observer.after_step(epoch, i, &model);
        }
        let n = slides.len() as f64;
        let aux_mean = aux_sum / n;
        history.push(EpochRecord {
            epoch,
            fold,
            mil_loss: mil_sum / n,
            jigsaw_loss: aux_mean,
            lambda: lam,
            train_auc: roc_auc(&probs, &labels)?,
        });
        if has_aux {
            lambda = maybe_update(&lambda, aux_mean)?;
        }
    }
    Ok((model, history))
}

/// Trains on every slide as a single fold 0.
pub fn train(dataset: &[PatchBag], config: &TrainConfig) -> Result<(ModelParams, RunHistory)> {
    let slides = prepare_slides(dataset, config)?;
    let (model, epochs) = train_fold(&slides, config, 0, &mut ())?;
    Ok((
        model,
        RunHistory {
            epochs,
            test_auc: Vec::new(),
        },
    ))
}

/// Mann–Whitney AUC: `(concordant + ½·tied) / (positives · negatives)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("roc_auc", (scores.len(), 1), (labels.len(), 1)));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("score is NaN".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = scores.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes among the labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the concordant count plus the tied count, kept in integers.
    let (mut twice, mut neg_below) = (0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group_pos = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count() as u64;
        let group_neg = (end - start) as u64 - group_pos;
        twice += 2 * group_pos * neg_below + group_pos * group_neg;
        neg_below += group_neg;
        start = end;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Fold of every manifest slide. Patients are shuffled by `seed` and dealt
/// round-robin, so all slides of a patient share a fold.
pub fn kfold_split(manifest: &Manifest, k_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if k_folds < 2 {
        return Err(Error::Config(format!(
            "need at least 2 folds, got {k_folds}"
        )));
    }
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = HashMap::new();
    for s in &manifest.slides {
        seen.entry(s.patient_id.as_str()).or_insert_with(|| {
            patients.push(s.patient_id.as_str());
        });
    }
    if patients.len() < k_folds {
        return Err(Error::Config(format!(
            "{} patients cannot fill {k_folds} folds",
            patients.len()
        )));
    }
    patients.shuffle(&mut rng::stream(seed, &[rng::tag::FOLDS]));
    let fold_of: HashMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i % k_folds))
        .collect();
    Ok(manifest
        .slides
        .iter()
        .map(|s| fold_of[s.patient_id.as_str()])
        .collect())
}

/// Slide probabilities from gradient-free forward passes, and their AUC.
pub fn evaluate_prepared(model: &ModelParams, slides: &[PreparedSlide]) -> Result<(f64, Vec<f64>)> {
    let scores = slides
        .iter()
        .map(|s| Ok(model.predict(&s.bag, &s.graph)?.prob))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = slides.iter().map(|s| s.bag.label).collect();
    Ok((roc_auc(&scores, &labels)?, scores))
}

pub fn evaluate(model: &ModelParams, slides: &[PatchBag]) -> Result<(f64, Vec<f64>)> {
    let prepared = slides
        .iter()
        .map(|b| {
            let graph = model.build_graph(b)?;
            let index = graph.message_index();
            Ok(PreparedSlide {
                bag: b.clone(),
                graph,
                index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(model, &prepared)
}

/// Share of patches, pooled over `slides`, whose most probable grid cell is
/// the true one.
pub fn jigsaw_accuracy(model: &ModelParams, slides: &[PreparedSlide]) -> Result<f64> {
    let (mut hits, mut total) = (0.0, 0usize);
    for s in slides {
        let probs = model.jigsaw_probs(&s.bag, &s.graph)?;
        hits += bin_accuracy(&probs, &s.graph.bin_labels) * s.bag.len() as f64;
        total += s.bag.len();
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no patches to score".into()));
    }
    Ok(hits / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub patch_index: usize,
    pub cx: f64,
    pub cy: f64,
    pub attention: f64,
}

/// Per-patch attention in bag order, with the bag's own centroids.
pub fn export_attention(model: &ModelParams, bag: &PatchBag) -> Result<Vec<AttentionRow>> {
    if !model.config.model_variant.uses_attention() {
        return Err(Error::Unsupported(format!(
            "variant {} pools by mean and has no attention",
            model.config.model_variant.name()
        )));
    }
    let graph = model.build_graph(bag)?;
    let pred = model.predict(bag, &graph)?;
    let a = pred.attention.expect("attention head present");
    Ok(bag
        .centroids
        .iter()
        .zip(a)
        .enumerate()
        .map(|(patch_index, (c, attention))| AttentionRow {
            patch_index,
            cx: c[0],
            cy: c[1],
            attention,
        })
        .collect())
}

/// Result of a k-fold run.
#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub history: RunHistory,
    pub models: Vec<ModelParams>,
    /// Fold of every slide, in dataset order.
    pub folds: Vec<usize>,
    /// Test-fold score of every slide, in dataset order.
    pub test_scores: Vec<f64>,
}

impl CvOutcome {
    pub fn mean_test_auc(&self) -> f64 {
        let aucs = &self.history.test_auc;
        aucs.iter().map(|a| a.1).sum::<f64>() / aucs.len() as f64
    }
}

/// Patient-grouped k-fold cross-validation. Folds train concurrently; the
/// outcome is independent of scheduling.
pub fn cross_validate(
    manifest: &Manifest,
    bags: &[PatchBag],
    config: &TrainConfig,
    k_folds: usize,
) -> Result<CvOutcome> {
    config.validate()?;
    if manifest.slides.len() != bags.len() {
        return Err(Error::Contract(
            "manifest and bag list differ in length".into(),
        ));
    }
    let folds = kfold_split(manifest, k_folds, config.seed)?;
    let slides = prepare_slides(bags, config)?;
    let results: Vec<Result<(ModelParams, Vec<EpochRecord>, f64, Vec<(usize, f64)>)>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..k_folds)
                .map(|f| {
                    let (slides, folds) = (&slides, &folds);
                    scope.spawn(move || {
                        let train: Vec<PreparedSlide> = slides
                            .iter()
                            .zip(folds)
                            .filter(|(_, &g)| g != f)
                            .map(|(s, _)| s.clone())
                            .collect();
                        let test_ids: Vec<usize> =
                            (0..slides.len()).filter(|&i| folds[i] == f).collect();
                        let test: Vec<PreparedSlide> =
                            test_ids.iter().map(|&i| slides[i].clone()).collect();
                        let (model, log) = train_fold(&train, config, f, &mut ())?;
                        let (auc, scores) = evaluate_prepared(&model, &test)?;
                        Ok((model, log, auc, test_ids.into_iter().zip(scores).collect()))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect()
        });
    let mut outcome = CvOutcome {
        history: RunHistory::default(),
        models: Vec::with_capacity(k_folds),
        folds,
        test_scores: vec![0.0; bags.len()],
    };
    for (f, r) in results.into_iter().enumerate() {
        let (model, log, auc, scores) = r?;
        outcome.history.epochs.extend(log);
        outcome.history.test_auc.push((f, auc));
        outcome.models.push(model);
        for (i, s) in scores {
            outcome.test_scores[i] = s;
        }
    }
    Ok(outcome)
}

/// `epoch,fold,mil_loss,jigsaw_loss,lambda,train_auc`, one row per epoch per fold.
pub fn history_csv(history: &RunHistory) -> String {
    let mut out = String::from("epoch,fold,mil_loss,jigsaw_loss,lambda,train_auc\n");
    for r in &history.epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.fold, r.mil_loss, r.jigsaw_loss, r.lambda, r.train_auc
        ));
    }
    out
}

/// `fold,test_auc`.
pub fn metrics_csv(history: &RunHistory) -> String {
    let mut out = String::from("fold,test_auc\n");
    for (fold, auc) in &history.test_auc {
        out.push_str(&format!("{fold},{auc}\n"));
    }
    out
}

/// `patch_index,cx,cy,attention` with 9 significant digits.
pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut out = String::from("patch_index,cx,cy,attention\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.patch_index,
            sig9(r.cx),
            sig9(r.cy),
            sig9(r.attention)
        ));
    }
    out
}

/// Decimal rendering with exactly nine significant digits; scientific
/// notation outside `1e-6 ≤ |v| < 1e15`.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-6..15).contains(&exp) {
        return sci;
    }
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let body = if exp >= 0 {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            format!("{digits}{}", "0".repeat(int_len - digits.len()))
        } else {
            format!("{}.{}", &digits[..int_len], &digits[int_len..])
        }
    } else {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    };
    format!("{sign}{body}")
}
