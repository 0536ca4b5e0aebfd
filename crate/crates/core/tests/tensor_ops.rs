mod common;

use common::{conv_matrix, group_stats, naive_conv2d, naive_dft2, random};
use ffinet::tensor::{
    conv2d, conv_transpose2d, grad_check, group_norm, irfft2, rfft2, ConvGeom, Tape, Tensor, Var,
};
use proptest::prelude::*;

fn dims(t: &Tensor<f64>) -> [usize; 4] {
    t.shape().try_into().unwrap()
}

#[test]
fn conv2d_matches_direct_summation() {
    let x = random(&[1, 2, 4, 4], 10);
    let w = random(&[3, 2, 3, 3], 11);
    let b = random(&[3], 12);
    let y = conv2d(&x, &w, Some(&b), ConvGeom::new(1, 1, 1)).unwrap();
    let (expect, shape) = naive_conv2d(x.data(), dims(&x), w.data(), dims(&w), Some(b.data()), 1, 1, 1);
    assert_eq!(y.shape(), shape);
    let err = y.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "max error {err}");
}

#[test]
fn grouped_conv_equals_per_group_convs() {
    let g = 4;
    let x = random(&[2, 8, 6, 5], 20);
    let w = random(&[12, 2, 3, 3], 21);
    let geom = ConvGeom::new(2, 1, g);
    let full = conv2d(&x, &w, None, geom).unwrap();
    let parts: Vec<Tensor<f64>> = (0..g)
        .map(|i| {
            let xs = x.narrow(1, 2 * i, 2).unwrap();
            let ws = w.narrow(0, 3 * i, 3).unwrap();
            conv2d(&xs, &ws, None, ConvGeom::new(2, 1, 1)).unwrap()
        })
        .collect();
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    assert_eq!(full, Tensor::concat(&refs, 1).unwrap());
}

#[test]
fn conv_transpose_equals_transposed_matrix() {
    // conv2d: [1, 4, 7, 7] -> [1, 6, 4, 4] with stride 2, pad 1, 2 groups.
    let in_shape = [1, 4, 7, 7];
    let w = random(&[6, 2, 3, 3], 30);
    let (m, n_out, n_in, out_shape) = conv_matrix(in_shape, w.data(), dims(&w), 2, 1, 2);
    let y = random(&out_shape, 31);
    // The transposed conv maps [1, 6, 4, 4] back to [1, 4, 7, 7] with the
    // same weight reinterpreted as [Cin=6, Cout/g=2, 3, 3].
    let geom = ConvGeom::new(2, 1, 2);
    let z = conv_transpose2d(&y, &w, None, geom).unwrap();
    assert_eq!(z.shape(), in_shape);
    let mut expect = vec![0.0; n_in];
    for r in 0..n_out {
        for (k, e) in expect.iter_mut().enumerate() {
            *e += m[r * n_in + k] * y.data()[r];
        }
    }
    let err = z.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "max error {err}");
}

#[test]
fn conv_transpose_is_vjp_of_conv() {
    let x = random(&[2, 4, 8, 8], 40);
    let w = random(&[4, 2, 3, 3], 41);
    let geom = ConvGeom::new(2, 1, 2);
    let v = random(&[2, 4, 4, 4], 42);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = tape.conv2d(&xv, &Var::constant(w.clone()), None, geom).unwrap();
    let yv = tape.mul(&y, &Var::constant(v.clone())).unwrap();
    let loss = tape.sum(&yv).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let vjp = grads.get(&xv).unwrap();
    let t = conv_transpose2d(&v, &w, None, geom.with_output_padding(1)).unwrap();
    assert!(vjp.max_abs_diff(&t).unwrap() < 1e-5);
}

#[test]
fn decoder_upsample_shape() {
    let x = Tensor::<f32>::ones(&[1, 3, 8, 8]);
    let w = Tensor::zeros(&[3, 3, 3, 3]);
    let y = conv_transpose2d(&x, &w, None, ConvGeom::new(2, 1, 1).with_output_padding(1)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 16, 16]);
}

#[test]
fn group_norm_standardizes_groups() {
    let x = random(&[2, 6, 5, 5], 50).map(|v| 3.0 * v + 1.5);
    let y = group_norm(&x, 3, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-5).unwrap();
    for (mean, var) in group_stats(y.data(), dims(&y), 3) {
        assert!(mean.abs() < 1e-10);
        // var = v / (v + eps) for the input variance v ≈ 3
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
}

#[test]
fn rfft2_matches_naive_dft() {
    for (h, w) in [(1, 1), (3, 5), (4, 4), (6, 7), (8, 3)] {
        let x = random(&[2, h, w], (h * 10 + w) as u64);
        let spec = rfft2(&x).unwrap();
        let wf = w / 2 + 1;
        assert_eq!(spec.re.shape(), &[2, h, wf]);
        for img in 0..2 {
            let full = naive_dft2(&x.data()[img * h * w..(img + 1) * h * w], h, w);
            for k in 0..h {
                for l in 0..wf {
                    let (re, im) = full[k * w + l];
                    let i = (img * h + k) * wf + l;
                    assert!((spec.re.data()[i] - re).abs() < 1e-10);
                    assert!((spec.im.data()[i] - im).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn cosine_lands_in_column_one() {
    let (h, w) = (4, 8);
    let x = Tensor::<f64>::from_fn(&[h, w], |i| (2.0 * std::f64::consts::PI * (i % w) as f64 / w as f64).cos());
    let spec = rfft2(&x).unwrap();
    let wf = w / 2 + 1;
    for k in 0..h {
        for l in 0..wf {
            let mag = spec.re.data()[k * wf + l].hypot(spec.im.data()[k * wf + l]);
            if k == 0 && l == 1 {
                assert!((mag - (h * w) as f64 / 2.0).abs() < 1e-10);
            } else {
                assert!(mag < 1e-10, "bin ({k},{l}) = {mag}");
            }
        }
    }
}

#[test]
fn dc_spectrum_inverts_to_constant() {
    let re = Tensor::<f64>::from_fn(&[4, 3], |i| if i == 0 { 16.0 * 0.3 } else { 0.0 });
    let spec = ffinet::tensor::ComplexSpectrum { re, im: Tensor::zeros(&[4, 3]), width: 4 };
    let x = irfft2(&spec, 4).unwrap();
    assert!(x.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
}

#[test]
fn fft_round_trip_all_small_sizes() {
    let mut sizes: Vec<(usize, usize)> = (1..=8).flat_map(|h| (1..=8).map(move |w| (h, w))).collect();
    sizes.push((16, 16));
    for (h, w) in sizes {
        let x = random(&[3, h, w], (h * 31 + w) as u64);
        let back = irfft2(&rfft2(&x).unwrap(), w).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-10, "{h}x{w}");
        let xs = x.cast::<f32>();
        let back = irfft2(&rfft2(&xs).unwrap(), w).unwrap();
        assert!(back.max_abs_diff(&xs).unwrap() < 1e-5, "{h}x{w} f32");
    }
}

#[test]
fn parseval_identity() {
    for (h, w) in [(4, 4), (5, 6), (7, 7), (16, 16)] {
        let x = random(&[h, w], 99 + h as u64);
        let spec = rfft2(&x).unwrap();
        let wf = w / 2 + 1;
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = (0..h * wf)
            .map(|i| {
                let l = i % wf;
                let c = if l == 0 || 2 * l == w { 1.0 } else { 2.0 };
                c * (spec.re.data()[i].powi(2) + spec.im.data()[i].powi(2))
            })
            .sum::<f64>()
            / (h * w) as f64;
        assert!(((energy - spectral) / energy).abs() < 1e-6);
    }
}

#[test]
fn conv_square_loss_gradient() {
    let x = random(&[1, 2, 5, 5], 60);
    let w = random(&[3, 2, 3, 3], 61);
    let b = random(&[3], 62);
    let report = grad_check(
        |tape, v| {
            let y = tape.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::new(1, 1, 1))?;
            let y = tape.square(&y)?;
            tape.sum(&y)
        },
        &[x, w, b],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_primitive_passes_grad_check() {
    let eps = 1e-4;
    let weights = random(&[2, 4, 8, 8], 70);
    let weighted = move |tape: &mut Tape<f64>, y: &Var<f64>| -> ffinet::Result<Var<f64>> {
        let c = Var::constant(weights.narrow(2, 0, y.shape()[2]).unwrap().narrow(3, 0, y.shape()[3]).unwrap().narrow(1, 0, y.shape()[1]).unwrap());
        let p = tape.mul(y, &c)?;
        let s = tape.square(&p)?;
        tape.sum(&s)
    };

    let cases: Vec<(&str, Vec<Tensor<f64>>)> = vec![
        ("conv2d_grouped_strided", vec![random(&[2, 4, 5, 6], 71), random(&[4, 2, 3, 3], 72), random(&[4], 73)]),
        ("conv_transpose2d", vec![random(&[2, 4, 3, 3], 74), random(&[4, 1, 3, 3], 75), random(&[4], 76)]),
        ("group_norm", vec![random(&[2, 4, 5, 6], 77), random(&[4], 78), random(&[4], 79)]),
        ("fft", vec![random(&[2, 4, 5, 6], 80)]),
    ];
    for (name, point) in cases {
        let report = grad_check(
            |tape, v| {
                let y = match name {
                    "conv2d_grouped_strided" => tape.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::new(2, 1, 2))?,
                    "conv_transpose2d" => tape.conv_transpose2d(
                        &v[0],
                        &v[1],
                        Some(&v[2]),
                        ConvGeom::new(2, 1, 4).with_output_padding(1),
                    )?,
                    "group_norm" => tape.group_norm(&v[0], 2, &v[1], &v[2], 1e-5)?,
                    _ => {
                        let spec = tape.rfft2(&v[0])?;
                        let re = tape.square(&spec.re)?;
                        let mixed = tape.add(&re, &spec.im)?;
                        let spec = ffinet::tensor::ComplexSpectrum { re: mixed, im: spec.im.clone(), width: 6 };
                        tape.irfft2(&spec, 6)?
                    }
                };
                weighted(tape, &y)
            },
            &point,
            eps,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn ops_are_bit_reproducible() {
    let x = random(&[2, 4, 9, 7], 90).cast::<f32>();
    let w = random(&[6, 2, 3, 3], 91).cast::<f32>();
    let a = conv2d(&x, &w, None, ConvGeom::new(2, 1, 2)).unwrap();
    let b = conv2d(&x, &w, None, ConvGeom::new(2, 1, 2)).unwrap();
    assert_eq!(a.data(), b.data());
    let sa = rfft2(&x).unwrap();
    let sb = rfft2(&x).unwrap();
    assert_eq!(sa.re, sb.re);
    assert_eq!(sa.im, sb.im);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_round_trip_random_shapes(h in 1usize..10, w in 1usize..10, seed in 0u64..1000) {
        let x = random(&[2, h, w], seed);
        let back = irfft2(&rfft2(&x).unwrap(), w).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn conv_matches_naive(
        cin_g in 1usize..3, cout_g in 1usize..3, groups in 1usize..3,
        h in 3usize..7, w in 3usize..7, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let x = random(&[2, cin_g * groups, h, w], seed);
        let wt = random(&[cout_g * groups, cin_g, k, k], seed + 1);
        let y = conv2d(&x, &wt, None, ConvGeom::new(stride, pad, groups)).unwrap();
        let (expect, shape) = naive_conv2d(x.data(), dims(&x), wt.data(), dims(&wt), None, stride, pad, groups);
        prop_assert_eq!(y.shape(), &shape[..]);
        let err = y.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10);
    }
}
