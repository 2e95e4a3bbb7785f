mod common;

use common::*;
use mstrnn::datasets::{generate, SynthSpec, Task};
use mstrnn::model::{InputShape, Model, ModelSpec};
use mstrnn::objective::{loss_and_gradients, GradientBundle};
use mstrnn::tensor::SeededRng;
use mstrnn::training::*;

#[test]
fn small_step_does_not_increase_the_loss() {
    let mut violations = 0;
    for i in 0..20u64 {
        let mut rng = SeededRng::new(100 + i);
        let spec = match i % 3 {
            0 => toy_mstrnn(vec![3, 2]),
            1 => toy_mstnn(vec![3, 2]),
            _ => toy_lrcn(vec![3, 2]),
        };
        let mut model = Model::build(spec, &mut rng).unwrap();
        let frames = random_frames(&mut rng, 4, &[1, 8, 8]);
        let targets = labels(&[rng.below(3), rng.below(2)], &[3, 2]);
        let (before, grads) = loss_and_gradients(&model, &frames, &targets, 2).unwrap();
        sgd_update(&mut model, &grads, 1e-4, 0.0).unwrap();
        let (after, _) = loss_and_gradients(&model, &frames, &targets, 2).unwrap();
        if after > before {
            violations += 1;
        }
    }
    assert!(violations <= 1, "{violations} of 20 steps increased the loss");
}

#[test]
fn weight_decay_skips_biases() {
    let mut model = Model::build(toy_mstrnn(vec![4]), &mut SeededRng::new(2)).unwrap();
    for p in model.params_mut() {
        p.fill(0.5);
    }
    let zero = GradientBundle::zeros_for(&model);
    sgd_update(&mut model, &zero, 0.1, 0.01).unwrap();
    for (p, info) in model.params().iter().zip(model.param_info()) {
        let expect = if info.is_bias { 0.5 } else { 0.5 * (1.0 - 0.1 * 0.01) };
        assert!(p.data().iter().all(|&v| v == expect), "{}", info.name);
    }
}

fn tiny_setup() -> (mstrnn::datasets::Dataset, ModelSpec) {
    let mut s = SynthSpec::new(Task::Concat3);
    s.subjects = 1;
    s.height = 16;
    s.width = 16;
    s.frames_per_primitive = 3;
    let ds = generate(&s).unwrap().subset(&[0, 5, 13, 26]);
    let mut spec = toy_mstrnn(ds.head_sizes());
    spec.input = InputShape::new(3, 14, 14);
    (ds, spec)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        crop_margin: 2,
        delay: 2,
        seed: 9,
        checkpoints: CheckpointPolicy::Off,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_log() {
    let (ds, spec) = tiny_setup();
    let run = || {
        let model = Model::build(spec.clone(), &mut SeededRng::new(4)).unwrap();
        train(model, &ds, Some(&ds), &tiny_config(), None).unwrap()
    };
    let (ma, la) = run();
    let (mb, lb) = run();
    assert_eq!(la.loss_column(), lb.loss_column());
    assert_eq!(ma.params(), mb.params());
    let cfg = TrainConfig { seed: 10, ..tiny_config() };
    let (_, lc) = train(Model::build(spec, &mut SeededRng::new(4)).unwrap(), &ds, None, &cfg, None).unwrap();
    assert_ne!(la.loss_column(), lc.loss_column());
}

#[test]
fn log_rows_follow_the_schedule() {
    let (ds, spec) = tiny_setup();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(spec.clone(), &mut SeededRng::new(4)).unwrap();
    let (_, log) = train(model, &ds, Some(&ds), &cfg, Some(dir.path())).unwrap();
    assert_eq!(log.rows.len(), 3);
    for (e, row) in log.rows.iter().enumerate() {
        assert_eq!(row.epoch, e);
        assert_eq!(row.lr, lr_at_epoch(cfg.lr0, cfg.lr_decay, e));
        assert!(row.train_loss.is_finite());
        assert!(row.val_joint.unwrap() <= row.val_heads.as_ref().unwrap()[0]);
    }
    // Policy Off writes nothing even with a directory.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);

    let every = TrainConfig { checkpoints: CheckpointPolicy::Every, ..cfg };
    let model = Model::build(spec, &mut SeededRng::new(4)).unwrap();
    train(model, &ds, None, &every, Some(dir.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch_0000.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt"]);
}

#[test]
fn trainer_rejects_mismatched_frames() {
    let (ds, spec) = tiny_setup();
    let model = Model::build(spec, &mut SeededRng::new(4)).unwrap();
    let cfg = TrainConfig { crop_margin: 0, ..tiny_config() };
    assert!(Trainer::new(model, &ds, None, cfg).is_err());
}
