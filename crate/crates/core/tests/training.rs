use megphone::data::{Dataset, PhonemeWindow, SignalMatrix, Split};
use megphone::inventory::PhonemeInventory;
use megphone::models::{to_bytes, BlockNorm, Model, ModelSpec};
use megphone::sampling::SamplingPlan;
use megphone::training::{adamw_step, evaluate, train, AdamState, AdamWConfig, EvalMode, TrainConfig, TrainLog};
use megphone::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct ScalarAdamW {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    fn step(&mut self, theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let m_hat = self.m / (1.0 - 0.9f64.powi(self.t));
        let v_hat = self.v / (1.0 - 0.999f64.powi(self.t));
        theta - lr * (m_hat / (v_hat.sqrt() + 1e-8) + wd * theta)
    }
}

#[test]
fn adamw_tracks_scalar_reference_for_100_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = AdamWConfig::new(1e-3, 1e-2);
    let n = 7;
    let init: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut p64 = init.clone();
    let mut p32: Vec<f32> = init.iter().map(|&v| v as f32).collect();
    let mut s64 = AdamState::<f64>::new(n);
    let mut s32 = AdamState::<f32>::new(n);
    let mut oracle: Vec<ScalarAdamW> = (0..n).map(|_| ScalarAdamW { m: 0.0, v: 0.0, t: 0 }).collect();
    let mut want = init;
    for _ in 0..100 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        adamw_step(&mut p64, &g, &mut s64, &cfg).unwrap();
        let g32: Vec<f32> = g.iter().map(|&v| v as f32).collect();
        adamw_step(&mut p32, &g32, &mut s32, &cfg).unwrap();
        for i in 0..n {
            want[i] = oracle[i].step(want[i], g[i], 1e-3, 1e-2);
        }
    }
    for i in 0..n {
        assert!((p64[i] - want[i]).abs() < 1e-12);
        assert!((p32[i] as f64 - want[i]).abs() < 1e-6);
    }
}

fn toy_dataset(per_class: usize, c: usize, t: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(PhonemeInventory::default(), c, t);
    for split in [Split::Train, Split::Validation] {
        for i in 0..2 * per_class {
            let d = (0..c * t).map(|_| StandardNormal.sample(&mut rng)).collect();
            let w = PhonemeWindow::new(SignalMatrix::new(c, t, d).unwrap(), i % 2, split, "toy").unwrap();
            ds.push(w).unwrap();
        }
    }
    ds
}

fn toy_spec(c: usize, t: usize) -> ModelSpec {
    ModelSpec {
        hidden_dim: 8,
        group_norm_groups: 4,
        n_blocks: 2,
        n_classes: 2,
        in_channels: c,
        n_times: t,
        ..Default::default()
    }
}

fn toy_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        batch_size: 4,
        sampling: SamplingPlan {
            group_size: 1,
            ..Default::default()
        },
        eval_grouped: false,
        ..Default::default()
    }
}

#[test]
fn memorizes_a_two_class_toy_set() {
    let ds = toy_dataset(10, 4, 32, 1);
    let model = Model::build(toy_spec(4, 32), 0).unwrap();
    let out = train(model, &ds, &toy_config(50, 3e-3), |_| {}).map_err(|f| f.error).unwrap();
    let last = out.log.records.last().unwrap();
    assert_eq!(last.train_f1, 1.0);
    let train_split = ds.split(Split::Train);
    let eval = evaluate(&out.last, &train_split, EvalMode::Ungrouped, 8).unwrap();
    assert_eq!(eval.f1_macro, 1.0);
    assert!(out.log.records.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let ds = toy_dataset(6, 4, 32, 2);
    let mut cfg = toy_config(3, 1e-3);
    cfg.augment.enabled = true;
    cfg.sampling.group_size = 2;
    cfg.sampling.repeats = 2;
    let mut spec = toy_spec(4, 32);
    spec.block_norm = BlockNorm::Batch;
    let run = || train(Model::build(spec.clone(), 3).unwrap(), &ds, &cfg, |_| {}).map_err(|f| f.error).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(to_bytes(&a.best).unwrap(), to_bytes(&b.best).unwrap());
    assert_eq!(to_bytes(&a.last).unwrap(), to_bytes(&b.last).unwrap());
}

#[test]
fn best_epoch_is_earliest_argmax_and_flagged_once() {
    let ds = toy_dataset(8, 4, 32, 3);
    let out = train(Model::build(toy_spec(4, 32), 1).unwrap(), &ds, &toy_config(6, 1e-3), |_| {})
        .map_err(|f| f.error)
        .unwrap();
    let scores: Vec<f64> = out.log.records.iter().map(|r| r.val_f1).collect();
    let mut want = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[want] {
            want = i;
        }
    }
    assert_eq!(out.log.best_epoch, Some(want));
    let flagged: Vec<usize> = out.log.records.iter().filter(|r| r.is_best).map(|r| r.epoch).collect();
    assert_eq!(flagged, vec![want]);
    let val = ds.split(Split::Validation);
    let best_f1 = evaluate(&out.best, &val, EvalMode::Ungrouped, 8).unwrap().f1_macro;
    assert_eq!(best_f1, scores[want]);
}

#[test]
fn evaluation_leaves_batch_norm_buffers_alone() {
    let ds = toy_dataset(4, 4, 32, 4);
    let mut spec = toy_spec(4, 32);
    spec.block_norm = BlockNorm::Batch;
    let out = train(Model::build(spec, 0).unwrap(), &ds, &toy_config(1, 1e-3), |_| {})
        .map_err(|f| f.error)
        .unwrap();
    let before = out.last.clone();
    let val = ds.split(Split::Validation);
    evaluate(&out.last, &val, EvalMode::Ungrouped, 3).unwrap();
    evaluate(&out.last, &val, EvalMode::Grouped(2), 3).unwrap();
    assert_eq!(before, out.last);
    assert_ne!(before.buffers()["extra_norm.running_var"].data(), &[1.0; 8]);
}

#[test]
fn log_csv_has_the_documented_columns() {
    let ds = toy_dataset(4, 4, 32, 5);
    let out = train(Model::build(toy_spec(4, 32), 0).unwrap(), &ds, &toy_config(2, 1e-3), |_| {})
        .map_err(|f| f.error)
        .unwrap();
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,train_f1,val_f1,is_best,train_f1_ungrouped");
    assert_eq!(lines.count(), 2);
}

#[test]
fn diverging_run_reports_a_numeric_fault() {
    let ds = toy_dataset(4, 4, 32, 6);
    let err = train(Model::build(toy_spec(4, 32), 0).unwrap(), &ds, &toy_config(3, 1e36), |_| {}).unwrap_err();
    assert!(matches!(err.error, Error::NumericFault { .. } | Error::Tensor(_)), "{}", err.error);
}

#[test]
fn too_large_groups_are_a_config_error() {
    let ds = toy_dataset(2, 4, 32, 7);
    let mut cfg = toy_config(1, 1e-3);
    cfg.sampling.group_size = 50;
    let err = train(Model::build(toy_spec(4, 32), 0).unwrap(), &ds, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));
    assert_eq!(err.log, TrainLog::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adamw_single_step_matches_oracle(theta in -5.0f64..5.0, g in -3.0f64..3.0, lr in 1e-5f64..1e-1, wd in 0.0f64..0.1) {
        let mut p = [theta];
        let mut s = AdamState::<f64>::new(1);
        adamw_step(&mut p, &[g], &mut s, &AdamWConfig::new(lr, wd)).unwrap();
        let want = ScalarAdamW { m: 0.0, v: 0.0, t: 0 }.step(theta, g, lr, wd);
        prop_assert!((p[0] - want).abs() < 1e-12);
    }
}
