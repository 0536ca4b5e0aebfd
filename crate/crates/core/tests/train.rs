use ffinet::config::ModelConfig;
use ffinet::container::Container;
use ffinet::data::{build_dataset, Dataset, SequenceSpec};
use ffinet::model::{forward, init_params};
use ffinet::params::{Leaf, Tree};
use ffinet::tensor::{grad_check, Tape, Tensor};
use ffinet::train::{
    adam_step, draw_batch, lambda_sweep, log_csv, onecycle_lr, prediction_loss, recovery_loss, sweep_csv, total_loss,
    AdamHyper, AdamState, Checkpoint, TrainConfig, Trainer, LOG_HEADER,
};
use ffinet::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        t_in: 2,
        t_out: 2,
        channels: 1,
        height: 16,
        width: 16,
        enc_width: 4,
        hidden: 16,
        enc_depth: 2,
        trans_depth: 2,
        fourier_units: 1,
        lambda: 1.0,
        ..ModelConfig::default()
    }
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig { batch: 3, steps, seed: 21, ..Default::default() }
}

fn tiny_data() -> Dataset {
    let spec = SequenceSpec { frames: 6, height: 16, width: 16, num_sprites: 1, ..Default::default() };
    build_dataset(6, &spec, 4).unwrap()
}

fn loss_value(f: impl FnOnce(&mut Tape<f64>) -> ffinet::Result<ffinet::tensor::Var<f64>>) -> f64 {
    let mut tape = Tape::new();
    f(&mut tape).unwrap().value().item().unwrap()
}

#[test]
fn mse_losses_match_elementwise_oracle() {
    let mut g = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f64>::rand_uniform(&[2, 3, 1, 4, 5], 0.0, 1.0, &mut g);
    let b = Tensor::<f64>::rand_uniform(&[2, 3, 1, 4, 5], 0.0, 1.0, &mut g);
    let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    for loss in [prediction_loss::<f64>, recovery_loss::<f64>] {
        let got = loss_value(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            loss(t, &x, &y)
        });
        assert!((got - oracle).abs() < 1e-12);
        assert_eq!(loss_value(|t| {
            let x = t.constant(a.clone());
            loss(t, &x, &x)
        }), 0.0);
        let shifted = loss_value(|t| {
            let (x, y) = (t.constant(a.map(|v| v + 1.0)), t.constant(a.clone()));
            loss(t, &x, &y)
        });
        assert!((shifted - 1.0).abs() < 1e-12);
    }
    let mut tape = Tape::<f64>::new();
    let (x, y) = (tape.constant(a), tape.constant(Tensor::zeros(&[2, 3, 1, 4, 4])));
    assert!(prediction_loss(&mut tape, &x, &y).is_err());
}

#[test]
fn total_loss_cases() {
    let mut tape = Tape::<f64>::new();
    let (p, r) = (tape.constant(Tensor::scalar(2.0)), tape.constant(Tensor::scalar(4.0)));
    assert_eq!(total_loss(&mut tape, &p, &r, 0.5).unwrap().value().item().unwrap(), 4.0);
    assert_eq!(total_loss(&mut tape, &p, &r, 1.0).unwrap().value().item().unwrap(), 6.0);
    let zero = total_loss(&mut tape, &p, &r, 0.0).unwrap();
    assert_eq!(zero.value().item().unwrap().to_bits(), 2.0f64.to_bits());
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig { height: 8, width: 8, lambda: 0.5, ..tiny_model() };
    let p = init_params::<f64>(&cfg, 3).unwrap();
    let mut g = ChaCha8Rng::seed_from_u64(2);
    let clean = Tensor::<f64>::rand_uniform(&[1, 2, 1, 8, 8], 0.0, 1.0, &mut g);
    let occluded = clean.map(|v| v * 0.5);
    let target = Tensor::<f64>::rand_uniform(&[1, 2, 1, 8, 8], 0.0, 1.0, &mut g);
    let report = grad_check(
        |tape, v| {
            let pv = p.rebuild(v);
            let x = tape.constant(occluded.clone());
            let out = forward(tape, &x, &pv, &cfg, true)?;
            let y = tape.constant(target.clone());
            let c = tape.constant(clean.clone());
            let lp = prediction_loss(tape, &out.predicted, &y)?;
            let lr = recovery_loss(tape, out.recovered.as_ref().unwrap(), &c)?;
            total_loss(tape, &lp, &lr, cfg.lambda)
        },
        &p.to_vec(),
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn adam_first_step_matches_closed_form() {
    let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let g = vec![Tensor::<f64>::new(&[4], vec![0.3, -2.0, 1e-6, 0.0]).unwrap()];
    let mut params = vec![Leaf(Tensor::<f64>::new(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap())];
    let mut state = AdamState::zeros_like(&params.to_vec());
    adam_step(&mut params, &g, &mut state, 0.01, h).unwrap();
    for (i, (&p, &gi)) in params[0].0.data().iter().zip(g[0].data()).enumerate() {
        let expected = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
        assert!((p - expected).abs() < 1e-15, "coordinate {i}: {p} vs {expected}");
    }
    assert_eq!(params[0].0.data()[3], 1.0);
    assert_eq!(state.t, 1);
}

#[test]
fn adam_constant_gradient_steps_by_lr() {
    let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let g = vec![Tensor::<f64>::new(&[2], vec![0.7, -3.0]).unwrap()];
    let mut params = vec![Leaf(Tensor::<f64>::zeros(&[2]))];
    let mut state = AdamState::zeros_like(&params.to_vec());
    let mut prev = params[0].0.clone();
    for _ in 0..200 {
        adam_step(&mut params, &g, &mut state, 0.01, h).unwrap();
        let d: Vec<f64> = params[0].0.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
        assert!((d[0] + 0.01).abs() < 1e-9 && (d[1] - 0.01).abs() < 1e-9, "{d:?}");
        prev = params[0].0.clone();
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let h = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let start = Tensor::<f64>::new(&[3], vec![0.5, -0.25, 3.0]).unwrap();
    let mut params = vec![Leaf(start.clone())];
    let mut state = AdamState::zeros_like(&params.to_vec());
    for _ in 0..5 {
        adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, 0.1, h).unwrap();
    }
    assert_eq!(params[0].0, start);
}

/// Reference one-cycle schedule written from its two cosine phases.
fn onecycle_oracle(step: usize, total: usize) -> f64 {
    let (max, lo, hi) = (0.01, 0.01 / 25.0, 0.01 / 1e4);
    let peak = 0.3 * total as f64;
    let s = step as f64;
    if s <= peak {
        lo + (max - lo) * (1.0 - (std::f64::consts::PI * s / peak).cos()) / 2.0
    } else {
        hi + (max - hi) * (1.0 + (std::f64::consts::PI * (s - peak) / (total as f64 - peak)).cos()) / 2.0
    }
}

#[test]
fn onecycle_grid_rises_then_falls() {
    let lr: Vec<f64> = (0..=100).map(|s| onecycle_lr(s, 100, 0.01, 0.3, 25.0, 1e4)).collect();
    assert!((lr[0] - 0.01 / 25.0).abs() < 1e-15);
    assert!((lr[30] - 0.01).abs() < 1e-15);
    assert!((lr[100] - 1e-6).abs() < 1e-15);
    for s in 0..30 {
        assert!(lr[s + 1] > lr[s], "step {s}");
    }
    for s in 30..100 {
        assert!(lr[s + 1] < lr[s], "step {s}");
    }
    for (s, &v) in lr.iter().enumerate() {
        assert!((v - onecycle_oracle(s, 100)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn onecycle_stays_within_bounds(total in 2usize..2000, frac in 0.0f64..=1.0, pct in 0.05f64..0.95) {
        let step = (frac * total as f64) as usize;
        let lr = onecycle_lr(step, total, 0.01, pct, 25.0, 1e4);
        prop_assert!(lr > 0.0 && lr <= 0.01 + 1e-15);
    }
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let (data, model, train) = (tiny_data(), tiny_model(), tiny_train(10));
    let a = draw_batch(&data, &model, &train, 3).unwrap();
    let b = draw_batch(&data, &model, &train, 3).unwrap();
    assert_eq!(a.indices, b.indices);
    assert_eq!(a.observed, b.observed);
    assert_ne!(a.observed, a.clean);
    let c = draw_batch(&data, &model, &train, 4).unwrap();
    assert!(a.indices != c.indices || a.clean != c.clean);
    assert_eq!(a.target.shape(), &[3, 2, 1, 16, 16]);

    let plain = draw_batch(&data, &model, &TrainConfig { occlude: false, ..train }, 3).unwrap();
    assert_eq!(plain.observed, plain.clean);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = tiny_data();
    let run = || {
        let mut t = Trainer::<f32>::new(tiny_model(), tiny_train(4)).unwrap();
        t.run(&data, None, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(log_csv(&a), log_csv(&b));
    assert!(log_csv(&a).starts_with(LOG_HEADER));
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|r| r.loss_rec.is_finite()));
}

#[test]
fn lambda_zero_skips_recovery() {
    let data = tiny_data();
    let model = ModelConfig { lambda: 0.0, ..tiny_model() };
    let mut t = Trainer::<f32>::new(model, tiny_train(2)).unwrap();
    let rows = t.run(&data, None, |_| {}).unwrap();
    for r in rows {
        assert!(r.loss_rec.is_nan());
        assert_eq!(r.loss_total, r.loss_pre);
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.ffin");

    let mut full = Trainer::<f32>::new(tiny_model(), tiny_train(6)).unwrap();
    let full_log = full.run(&data, None, |_| {}).unwrap();

    let mut first = Trainer::<f32>::new(tiny_model(), tiny_train(6)).unwrap();
    let mut log = Vec::new();
    for _ in 0..3 {
        log.push(first.advance(&data).unwrap());
    }
    first.ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded, first.ckpt);
    let mut second = Trainer::resume(loaded).unwrap();
    log.extend(second.run(&data, None, |_| {}).unwrap());

    assert_eq!(log, full_log);
    assert_eq!(second.ckpt, full.ckpt);
}

#[test]
fn checkpoint_round_trips_and_checks_version() {
    let data = tiny_data();
    let mut t = Trainer::<f64>::new(tiny_model(), tiny_train(2)).unwrap();
    t.advance(&data).unwrap();
    let c = t.ckpt.to_container().unwrap();
    for prefix in ["param/", "adam_m/", "adam_v/"] {
        assert!(c.records.iter().any(|r| r.name.starts_with(prefix)));
    }
    for name in ["meta/config", "meta/step", "meta/rng"] {
        assert!(c.contains(name));
    }
    let bytes = c.to_bytes();
    let back = Checkpoint::<f64>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, t.ckpt);
    assert_eq!(back.to_container().unwrap().to_bytes(), bytes);

    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Container::from_bytes(&wrong), Err(Error::Version { found: 7, .. })));
}

#[test]
fn non_finite_loss_aborts() {
    let mut data = tiny_data();
    data.frames.data_mut()[0..256 * 36].iter_mut().for_each(|v| *v = f32::NAN);
    let train = TrainConfig { occlude: false, batch: 6, ..tiny_train(3) };
    let mut t = Trainer::<f32>::new(tiny_model(), train).unwrap();
    let err = t.advance(&data);
    assert!(matches!(err, Err(Error::Diverged { step: 1, .. })), "{err:?}");
}

#[test]
fn mismatched_dataset_is_rejected() {
    let spec = SequenceSpec { frames: 6, height: 32, width: 32, ..Default::default() };
    let data = build_dataset(2, &spec, 0).unwrap();
    let mut t = Trainer::<f32>::new(tiny_model(), tiny_train(1)).unwrap();
    assert!(matches!(t.advance(&data), Err(Error::Dimension { .. })));
    assert!(Trainer::<f32>::new(tiny_model(), TrainConfig { pct_start: 1.0, ..tiny_train(1) }).is_err());
}

#[test]
fn sweep_emits_one_row_per_lambda() {
    let data = tiny_data();
    let rows = lambda_sweep(&tiny_model(), &tiny_train(2), &data, &data, None, &[0.0, 1.0]).unwrap();
    let csv = sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,loss_pre,loss_rec,mse,mae,ssim,psnr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
}
