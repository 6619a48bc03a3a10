use hoiu::model::{Model, ModelConfig};
use hoiu::scenegen::{generate, DifficultyProfile, SceneRecord, Split};
use hoiu::trainer::{
    batch_indices, clip_grad_norm, fit, resume, train_step, AdamW, FitOutput, TrainConfig, TrainError, TrainState,
    CSV_HEADER,
};

fn scenes(n: usize, split: Split) -> Vec<SceneRecord> {
    generate(21, n, &DifficultyProfile::default(), split).unwrap()
}

fn small_model(seed: u64) -> Model {
    Model::new(ModelConfig::miniature(), seed).unwrap()
}

fn bits(m: &Model) -> Vec<u64> {
    m.params().iter().flat_map(|p| p.data.iter().map(|x| x.to_bits())).collect()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_lr_leaves_parameters_but_moves_optimizer_state() {
    let data = scenes(2, Split::Train);
    let batch: Vec<&SceneRecord> = data.iter().collect();
    let mut model = small_model(0);
    let before = bits(&model);
    let mut opt = AdamW::new(model.params());
    let fresh = opt.clone();
    let c = TrainConfig { lr: 0.0, ..cfg(1) };
    train_step(&mut model, &mut opt, &batch, &c).unwrap();
    assert_eq!(bits(&model), before);
    assert_ne!(opt, fresh);
    assert_eq!(opt.step, 1);
}

#[test]
fn weight_decay_is_decoupled() {
    let mut model = small_model(1);
    let before: Vec<f64> = model.params().iter().flat_map(|p| p.data.clone()).collect();
    let mut opt = AdamW::new(model.params());
    let c = TrainConfig {
        lr: 1e-2,
        weight_decay: 0.5,
        ..TrainConfig::default()
    };
    let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
    opt.update(model.params_mut(), &zeros, &c);
    let after: Vec<f64> = model.params().iter().flat_map(|p| p.data.clone()).collect();
    for (a, b) in after.iter().zip(&before) {
        assert!((a - b * (1.0 - 1e-2 * 0.5)).abs() <= 1e-15 * b.abs().max(1.0));
    }
}

#[test]
fn clipping_scales_to_max_norm() {
    let mut g = vec![vec![3.0, 0.0], vec![4.0]];
    let norm = clip_grad_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut small = vec![vec![0.1]];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

#[test]
fn batches_cover_each_epoch_once() {
    let n = 10;
    let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(7, s, 2, n)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..n).collect::<Vec<_>>());
    assert_eq!(batch_indices(7, 3, 4, n), batch_indices(7, 3, 4, n));
}

#[test]
fn same_seed_gives_identical_loss_sequences() {
    let (train, val) = (scenes(6, Split::Train), scenes(2, Split::Val));
    let run = || {
        let mut s = TrainState::new(small_model(2));
        fit(&mut s, &train, &val, &cfg(6), None).unwrap();
        (s.log, bits(&s.model))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.0.train_csv(), b.0.train_csv());
    assert_eq!(a.1, b.1);
    assert!(a.0.train_csv().starts_with(CSV_HEADER));
    assert_eq!(a.0.train.len(), 6);
}

#[test]
fn resume_matches_uninterrupted_run_bit_exactly() {
    let (train, val) = (scenes(6, Split::Train), scenes(2, Split::Val));
    let c = TrainConfig {
        checkpoint_every: 2,
        val_every: 2,
        ..cfg(6)
    };

    let mut full = TrainState::new(small_model(4));
    fit(&mut full, &train, &val, &c, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = FitOutput { dir: dir.path().to_path_buf() };
    let mut first = TrainState::new(small_model(4));
    fit(&mut first, &train, &val, &TrainConfig { steps: 4, ..c.clone() }, Some(&out)).unwrap();
    let mut resumed = resume(dir.path()).unwrap().expect("checkpoint written");
    assert_eq!(resumed.opt.step, 4);
    fit(&mut resumed, &train, &val, &c, Some(&out)).unwrap();

    assert_eq!(bits(&resumed.model), bits(&full.model));
    assert_eq!(resumed.opt, full.opt);
    assert_eq!(resumed.log.train, full.log.train);
    let csv = std::fs::read_to_string(out.train_csv()).unwrap();
    assert_eq!(csv, full.log.train_csv());
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let (train, val) = (scenes(2, Split::Train), scenes(1, Split::Val));
    let dir = tempfile::tempdir().unwrap();
    let out = FitOutput { dir: dir.path().to_path_buf() };
    let model = small_model(5);
    let init = bits(&model);
    let mut s = TrainState::new(model);
    fit(&mut s, &train, &val, &cfg(0), Some(&out)).unwrap();
    assert!(s.log.train.is_empty());
    assert_eq!(s.log.val.len(), 1);
    let back = resume(dir.path()).unwrap().unwrap();
    assert_eq!(back.opt.step, 0);
    assert_eq!(bits(&back.model), init);
    assert!(out.final_checkpoint().exists());
}

#[test]
fn invalid_inputs_are_errors() {
    let train = scenes(2, Split::Train);
    let mut s = TrainState::new(small_model(0));
    assert!(matches!(fit(&mut s, &[], &[], &cfg(1), None), Err(TrainError::EmptyBatch)));
    let bad = TrainConfig { batch_size: 0, ..cfg(1) };
    assert!(matches!(fit(&mut s, &train, &[], &bad, None), Err(TrainError::InvalidConfig(_))));
    let mut opt = AdamW::new(s.model.params());
    assert!(matches!(train_step(&mut s.model, &mut opt, &[], &cfg(1)), Err(TrainError::EmptyBatch)));
}

#[test]
fn non_finite_loss_is_reported() {
    let train = scenes(1, Split::Train);
    let mut model = small_model(0);
    model.params_mut().get_mut("head.human_cls.1.b").unwrap().data[0] = f64::NAN;
    let mut opt = AdamW::new(model.params());
    let batch: Vec<&SceneRecord> = train.iter().collect();
    match train_step(&mut model, &mut opt, &batch, &cfg(1)) {
        Err(TrainError::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn config_json_rejects_unknown_fields() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.001, "bogus": 1}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.001}"#).unwrap();
    assert_eq!(c.lr, 0.001);
    assert_eq!(c.batch_size, TrainConfig::default().batch_size);
}
