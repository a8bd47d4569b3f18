use jigmil::calibrate::LambdaMode;
use jigmil::data::{generate_synthetic_dataset, load_dataset, write_dataset, SynthSpec, SynthTask};
use jigmil::diff::Tensor;
use jigmil::trainer::{cross_validate, history_csv, metrics_csv, prepare_slides, train_fold};
use jigmil::{ModelParams, ModelVariant, TrainConfig};

fn spec(task: SynthTask, slides: usize) -> SynthSpec {
    SynthSpec {
        task,
        n_slides: slides,
        patches_per_slide: 30,
        d1: 6,
        ..SynthSpec::default()
    }
}

fn config(variant: ModelVariant, epochs: usize) -> TrainConfig {
    TrainConfig {
        model_variant: variant,
        k_nn: 8,
        grid_g: 4,
        gat_hidden: 16,
        d4: 8,
        epochs,
        ..TrainConfig::default()
    }
}

/// Shared (encoder and pooling) tensors after every optimizer step.
fn trajectory(config: &TrainConfig, shared: usize) -> Vec<Vec<Tensor>> {
    let data = generate_synthetic_dataset(&spec(SynthTask::Spatial, 10)).unwrap();
    let slides = prepare_slides(&data.bags, config).unwrap();
    let mut steps = Vec::new();
    let mut observer = |_: usize, _: usize, m: &ModelParams| {
        steps.push(m.tensors()[..shared].iter().map(|t| (*t).clone()).collect());
    };
    train_fold(&slides, config, 0, &mut observer).unwrap();
    steps
}

#[test]
fn zero_lambda_reproduces_the_plain_trajectory_bitwise() {
    for (with, without) in [
        (ModelVariant::GraphAbmilJigsaw, ModelVariant::GraphAbmil),
        (ModelVariant::AbmilJigsaw, ModelVariant::Abmil),
    ] {
        let plain = config(without, 3);
        let shared = ModelParams::init(&plain, 6).unwrap().tensors().len();
        let ablated = TrainConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_fixed: 0.0,
            ..config(with, 3)
        };
        let a = trajectory(&ablated, shared);
        let b = trajectory(&plain, shared);
        assert_eq!(a.len(), 30);
        assert_eq!(a, b, "{} at λ = 0 drifted from {}", with.name(), without.name());
    }
}

#[test]
fn nonzero_lambda_changes_the_trajectory() {
    let plain = config(ModelVariant::GraphAbmil, 1);
    let shared = ModelParams::init(&plain, 6).unwrap().tensors().len();
    let joint = config(ModelVariant::GraphAbmilJigsaw, 1);
    assert_ne!(trajectory(&joint, shared), trajectory(&plain, shared));
}

#[test]
fn cross_validation_is_deterministic() {
    let data = generate_synthetic_dataset(&spec(SynthTask::Spatial, 12)).unwrap();
    let cfg = config(ModelVariant::GraphAbmilJigsaw, 2);
    let a = cross_validate(&data.manifest, &data.bags, &cfg, 3).unwrap();
    let b = cross_validate(&data.manifest, &data.bags, &cfg, 3).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
    assert_eq!(a.models, b.models);
    assert_eq!(a.history.epochs.len(), 6);
    assert_eq!(a.history.test_auc.len(), 3);
}

#[test]
fn em_lambda_stays_within_prior_bounds_during_training() {
    let data = generate_synthetic_dataset(&spec(SynthTask::Spatial, 12)).unwrap();
    let cfg = TrainConfig {
        lambda_alpha: 2.0,
        lambda_beta: 4.0,
        ..config(ModelVariant::GraphAbmilJigsaw, 4)
    };
    let out = cross_validate(&data.manifest, &data.bags, &cfg, 3).unwrap();
    for r in &out.history.epochs {
        assert!(r.lambda > 0.0 && r.lambda <= 0.5, "λ = {}", r.lambda);
    }
}

#[test]
fn presence_training_reduces_mil_loss() {
    let data = generate_synthetic_dataset(&spec(SynthTask::Presence, 16)).unwrap();
    let cfg = config(ModelVariant::GraphAbmil, 10);
    let slides = prepare_slides(&data.bags, &cfg).unwrap();
    let (_, log) = train_fold(&slides, &cfg, 0, &mut ()).unwrap();
    assert_eq!(log.len(), 10);
    assert!(log[9].mil_loss < log[0].mil_loss);
}

#[test]
fn datasets_survive_the_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic_dataset(&spec(SynthTask::Presence, 4)).unwrap();
    let path = write_dataset(dir.path(), &data.manifest, &data.bags).unwrap();
    let (manifest, bags) = load_dataset(&path).unwrap();
    assert_eq!(manifest, data.manifest);
    assert_eq!(bags, data.bags);
}
