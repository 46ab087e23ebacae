use zj_core::architect::{apply_plan, compile_plan, parse_config, AdaptationPlan};
use zj_core::tuner::{self, accuracy, blobs, LossSpec, Optimizer, RegSpec, Split, TrainConfig};
use zj_core::zoo::{build_model, Activation, Init, Model, ModelSpec};
use zj_core::Error;

fn mlp(widths: &[usize]) -> ModelSpec {
    ModelSpec::mlp(widths, Activation::Gelu).unwrap()
}

fn plain(spec: &ModelSpec, seed: u64) -> Model {
    Model::plain(spec.clone(), build_model(spec, Init::Seeded(seed)).unwrap().quantized())
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 0.05, batch_size: 16, seed: 3, ..TrainConfig::default() }
}

#[test]
fn cross_entropy_separates_blobs() {
    let data = blobs(3, 2, 300, 0.3, 7).unwrap();
    let spec = mlp(&[2, 16, 3]);
    let out = tuner::train(&plain(&spec, 1), None, None, &data, &LossSpec::ce(), &RegSpec::default(), &cfg(50)).unwrap();
    let (x, y) = data.split(Split::Train);
    assert_eq!(accuracy(&out.model, &x, &y).unwrap(), 1.0);
    assert_eq!(out.history.len(), 50);
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
}

#[test]
fn distillation_from_itself_is_stationary() {
    let data = blobs(3, 2, 120, 0.5, 1).unwrap();
    let spec = mlp(&[2, 8, 3]);
    let teacher = plain(&spec, 4);
    let loss: LossSpec = "kd_kl:1:T=2".parse().unwrap();
    let out = tuner::train(&teacher, Some(&teacher), None, &data, &loss, &RegSpec::default(), &cfg(2)).unwrap();
    assert!(out.history[0].terms["kd_kl"].abs() < 1e-12);
    for (p, w) in teacher.params.iter() {
        assert!(out.model.params.get(p).unwrap().max_abs_diff(w) < 1e-9, "{p}");
    }
}

#[test]
fn same_seed_same_bits() {
    let data = blobs(3, 4, 150, 0.5, 2).unwrap();
    let spec = mlp(&[4, 8, 3]);
    let teacher = plain(&spec, 9);
    let student = plain(&spec, 5);
    let loss: LossSpec = "ce:1;kd_kl:0.5;rkd_dist:0.1".parse().unwrap();
    let reg: RegSpec = "l2:1e-3;bss:1e-3:k=1".parse().unwrap();
    let c = TrainConfig { optimizer: Optimizer::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, ..cfg(3) };
    let a = tuner::train(&student, Some(&teacher), None, &data, &loss, &reg, &c).unwrap();
    let b = tuner::train(&student, Some(&teacher), None, &data, &loss, &reg, &c).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let lines = |h: &[tuner::EpochRecord]| h.iter().map(|r| r.to_json(false)).collect::<Vec<_>>();
    assert_eq!(lines(&a.history), lines(&b.history));
    assert_eq!(teacher.params, plain(&spec, 9).params);
}

#[test]
fn every_term_trains() {
    let data = blobs(3, 4, 90, 0.5, 3).unwrap();
    let student_spec = mlp(&[4, 6, 5, 3]);
    let teacher_spec = mlp(&[4, 10, 5, 3]);
    let student = plain(&student_spec, 1);
    let teacher = plain(&teacher_spec, 2);
    let reference = student.params.clone();
    let loss: LossSpec = "ce:1;kd_kl:0.5;kd_ncm:0.5:tau=4;fitnet:0.3:pairs=layers[0].out>layers[0].out+feature>feature;\
                          fsp:0.2:pairs=layers[1].pre>feature;rkd_dist:0.1;rkd_angle:0.1"
        .parse()
        .unwrap();
    let reg: RegSpec = "l2:1e-4;l2_sp:1e-3;spec_norm:1e-4:iters=5;bss:1e-3:k=2".parse().unwrap();
    let out = tuner::train(&student, Some(&teacher), Some(&reference), &data, &loss, &reg, &cfg(2)).unwrap();
    let keys: Vec<&String> = out.history[0].terms.keys().collect();
    assert_eq!(keys.len(), 11);
    assert!(out.history.iter().all(|r| r.loss.is_finite()));
    let line = out.history[0].to_json(true);
    assert!(line.contains("\"rkd_angle\"") && line.contains("\"wall_ms\""));
}

#[test]
fn missing_supervision_is_a_config_error() {
    let data = blobs(2, 2, 40, 0.5, 3).unwrap();
    let m = plain(&mlp(&[2, 4, 2]), 1);
    let kd: LossSpec = "kd_kl:1".parse().unwrap();
    assert!(matches!(tuner::train(&m, None, None, &data, &kd, &RegSpec::default(), &cfg(1)), Err(Error::Config(_))));
    let sp: RegSpec = "l2_sp:1".parse().unwrap();
    assert!(matches!(tuner::train(&m, None, None, &data, &LossSpec::ce(), &sp, &cfg(1)), Err(Error::Config(_))));
    let bad: LossSpec = "rkd_dist:1:hook=layers[9].out".parse().unwrap();
    assert!(matches!(tuner::train(&m, Some(&m), None, &data, &bad, &RegSpec::default(), &cfg(1)), Err(Error::MissingHook(_))));
}

#[test]
fn divergence_names_the_term() {
    let data = blobs(2, 2, 40, 0.5, 3).unwrap();
    let m = plain(&mlp(&[2, 4, 2]), 1);
    let c = TrainConfig { lr: 1e200, optimizer: Optimizer::Sgd { momentum: 0.0 }, ..cfg(3) };
    match tuner::train(&m, None, None, &data, &LossSpec::ce(), &RegSpec::default(), &c) {
        Err(Error::NonFiniteLoss { term, .. }) => assert!(!term.is_empty()),
        other => panic!("{:?}", other.map(|o| o.history)),
    }
}

#[test]
fn convex_probe_loss_never_rises() {
    let data = blobs(3, 2, 150, 0.5, 4).unwrap();
    let spec = mlp(&[2, 3]);
    let c = TrainConfig { lr: 0.05, optimizer: Optimizer::Sgd { momentum: 0.0 }, ..cfg(15) };
    let out = tuner::train(&plain(&spec, 2), None, None, &data, &LossSpec::ce(), &RegSpec::default(), &c).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{} -> {}", w[0].loss, w[1].loss);
    }
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
}

#[test]
fn frozen_paths_survive_training() {
    let data = blobs(3, 4, 90, 0.4, 5).unwrap();
    let spec = mlp(&[4, 8, 8, 3]);
    let base = build_model(&spec, Init::Seeded(6)).unwrap().quantized();
    for src in [
        "(LinearProbe.adapt):",
        "(PartialK.adapt|k=2):",
        "(BitFit.adapt):",
        "(LoRA.adapt|r=2):->(layers[0:2]){inout}",
        "(Adapter.adapt|dim=3):->(layers[*]){out}",
        "(SSF.adapt):->(layers[*]){out}",
    ] {
        let plan: AdaptationPlan = compile_plan(&parse_config(src).unwrap(), &spec).unwrap();
        let m = apply_plan(&spec, &base, &plan, 1).unwrap();
        let out = tuner::train(&m, None, None, &data, &LossSpec::ce(), &RegSpec::default(), &cfg(3)).unwrap();
        for p in &plan.freeze {
            assert_eq!(out.model.params.get(p).unwrap(), base.get(p).unwrap(), "{src}: {p}");
        }
        assert_ne!(out.model.params, m.params, "{src}");
    }
}

