mod common;

use common::{random, rng};
use ffinet::params::{bind, initialize, Tree};
use ffinet::spectral::{ffc, fft_inception, fourier_unit, BlockSettings, FfcParams, FourierUnitParams, InceptionParams};
use ffinet::tensor::{grad_check, group_norm, leaky_relu, Tape, Tensor};

fn eye(c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
}

fn fu_params(c: usize, seed: u64) -> FourierUnitParams<Tensor<f64>> {
    let mut p = initialize(&FourierUnitParams::spec(c), &mut rng(seed));
    // Nonzero biases and affine terms so their gradients are exercised.
    p.visit_mut(|name, t| {
        if !name.ends_with("weight") {
            *t = t.zip_map(&random(t.shape(), seed + t.numel() as u64), |a, r| a + 0.3 * r).unwrap();
        }
    });
    p
}

#[test]
fn fourier_unit_identity_path_doubles_residual() {
    let c = 4;
    let mut p = fu_params(c, 1);
    for conv in [&mut p.pre.conv, &mut p.post.conv] {
        conv.weight = eye(c);
        conv.bias = Tensor::zeros(&[c]);
    }
    p.freq.conv.weight = eye(2 * c);
    p.freq.conv.bias = Tensor::zeros(&[2 * c]);
    let settings = BlockSettings { freq_norm_act: false, ..Default::default() };

    let u = random(&[2, c, 6, 5], 2);
    let mut tape = Tape::no_grad();
    let pv = bind(&p, &mut tape);
    let uv = tape.constant(u.clone());
    let out = fourier_unit(&mut tape, &uv, &pv, &settings).unwrap();

    let slope = settings.leaky_slope;
    let s = leaky_relu(&group_norm(&u, 2, &p.pre.norm.gamma, &p.pre.norm.beta, 1e-5).unwrap(), slope);
    let doubled = s.map(|v| 2.0 * v);
    let expect = leaky_relu(&group_norm(&doubled, 2, &p.post.norm.gamma, &p.post.norm.beta, 1e-5).unwrap(), slope);
    assert!(out.value().max_abs_diff(&expect).unwrap() < 1e-10);
}

#[test]
fn fourier_unit_receptive_field_is_global() {
    let c = 3;
    let p: FourierUnitParams<Tensor<f64>> = fu_params(c, 5);
    let settings = BlockSettings::default();
    let eval = |u: &Tensor<f64>| {
        let mut tape = Tape::no_grad();
        let pv = bind(&p, &mut tape);
        let uv = tape.constant(u.clone());
        fourier_unit(&mut tape, &uv, &pv, &settings).unwrap().to_tensor()
    };
    let u = random(&[1, c, 8, 8], 6);
    let base = eval(&u);
    let mut worst = 0;
    for k in 0..5 {
        let mut v = u.clone();
        let idx = (k * 37 + 11) % v.numel();
        v.data_mut()[idx] += 0.5;
        let delta = eval(&v);
        let unchanged = base.data().iter().zip(delta.data()).filter(|(a, b)| (*a - *b).abs() <= 1e-9).count();
        worst = worst.max(unchanged);
    }
    assert_eq!(worst, 0);
}

#[test]
fn fourier_unit_gradients() {
    let c = 4;
    let p = fu_params(c, 7);
    let mut point = vec![random(&[2, c, 5, 6], 8)];
    point.extend(p.to_vec());
    let report = grad_check(
        |tape, v| {
            let pv = p.rebuild(&v[1..]);
            let y = fourier_unit(tape, &v[0], &pv, &BlockSettings::default())?;
            let y = tape.square(&y)?;
            tape.sum(&y)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn ffc_params(half: usize, seed: u64) -> FfcParams<Tensor<f64>> {
    let mut p = initialize(&FfcParams::spec(half), &mut rng(seed));
    p.fu = fu_params(half, seed + 1);
    p.visit_mut(|name, t| {
        if name.ends_with("beta") || name.ends_with("bias") {
            *t = random(t.shape(), seed + 2).map(|v| 0.2 * v);
        }
    });
    p
}

fn run_ffc(p: &FfcParams<Tensor<f64>>, l: &Tensor<f64>, g: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::no_grad();
    let pv = bind(p, &mut tape);
    let (lv, gv) = (tape.constant(l.clone()), tape.constant(g.clone()));
    let (a, b) = ffc(&mut tape, &lv, &gv, &pv, &BlockSettings::default()).unwrap();
    (a.to_tensor(), b.to_tensor())
}

#[test]
fn ffc_preserves_shapes() {
    let p = ffc_params(8, 1);
    let (a, b) = run_ffc(&p, &random(&[2, 8, 8, 8], 2), &random(&[2, 8, 8, 8], 3));
    assert_eq!(a.shape(), &[2, 8, 8, 8]);
    assert_eq!(b.shape(), &[2, 8, 8, 8]);
}

#[test]
fn ffc_bias_only_case() {
    let half = 4;
    let mut p = ffc_params(half, 10);
    for conv in [&mut p.local_to_local, &mut p.global_to_local, &mut p.local_to_global] {
        conv.weight = Tensor::zeros(conv.weight.shape());
        conv.bias = Tensor::zeros(conv.bias.shape());
    }
    // Zero the Fourier Unit's output projection so its path contributes 0.
    p.fu.post.norm.gamma = Tensor::zeros(&[half]);
    p.fu.post.norm.beta = Tensor::zeros(&[half]);
    let (a, b) = run_ffc(&p, &random(&[1, half, 5, 5], 11), &random(&[1, half, 5, 5], 12));
    for (out, beta) in [(a, &p.local_norm.beta), (b, &p.global_norm.beta)] {
        for (i, v) in out.data().iter().enumerate() {
            let bt = beta.data()[i / 25];
            let expect = if bt >= 0.0 { bt } else { 0.2 * bt };
            assert!((v - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn ffc_cross_connects_global_into_local() {
    let p = ffc_params(4, 20);
    let l = random(&[1, 4, 6, 6], 21);
    let (with_g, _) = run_ffc(&p, &l, &random(&[1, 4, 6, 6], 22));
    let (without_g, _) = run_ffc(&p, &l, &Tensor::zeros(&[1, 4, 6, 6]));
    assert!(with_g.max_abs_diff(&without_g).unwrap() > 1e-3);
}

#[test]
fn ffc_gradients() {
    let half = 2;
    let p = ffc_params(half, 30);
    let mut point = vec![random(&[1, half, 5, 5], 31), random(&[1, half, 5, 5], 32)];
    point.extend(p.to_vec());
    let report = grad_check(
        |tape, v| {
            let pv = p.rebuild(&v[2..]);
            let (a, b) = ffc(tape, &v[0], &v[1], &pv, &BlockSettings::default())?;
            let both = tape.concat(&[&a, &b], 1)?;
            let sq = tape.square(&both)?;
            tape.sum(&sq)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn inception_counts_one_fft_per_unit() {
    for units in 1..=3 {
        let p: InceptionParams<Tensor<f32>> =
            initialize(&InceptionParams::spec(12, 6, 16, units).unwrap(), &mut rng(0));
        let mut tape = Tape::no_grad();
        let pv = bind(&p, &mut tape);
        let z = tape.constant(Tensor::rand_uniform(&[2, 12, 8, 8], 0.0, 1.0, &mut rng(1)));
        let y = fft_inception(&mut tape, &z, &pv, &BlockSettings::default()).unwrap();
        assert_eq!(y.shape(), &[2, 6, 8, 8]);
        assert_eq!(tape.counters().get("rfft2"), units);
        assert_eq!(tape.counters().get("irfft2"), units);
    }
}

#[test]
fn inception_gradients() {
    let layout = InceptionParams::spec(4, 6, 16, 1).unwrap();
    let mut p: InceptionParams<Tensor<f64>> = initialize(&layout, &mut rng(40));
    p.fourier[0] = fu_params(8, 41);
    let mut point = vec![random(&[1, 4, 8, 8], 42)];
    point.extend(p.to_vec());
    let report = grad_check(
        |tape, v| {
            let pv = p.rebuild(&v[1..]);
            let y = fft_inception(tape, &v[0], &pv, &BlockSettings::default())?;
            let y = tape.square(&y)?;
            tape.sum(&y)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn blocks_are_pure() {
    let p = ffc_params(4, 50);
    let (l, g) = (random(&[1, 4, 6, 6], 51), random(&[1, 4, 6, 6], 52));
    assert_eq!(run_ffc(&p, &l, &g), run_ffc(&p, &l, &g));
}
