//! Brute-force reference implementations shared by the integration tests.
//! None of these call into the library's kernels.

#![allow(dead_code)]

use std::f64::consts::PI;

use ffinet::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Direct grouped cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [b, cin, h, w]: [usize; 4],
    wt: &[f64],
    [cout, cin_g, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            let g = co / cout_g;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + c) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((co * cin_g + ci) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    let _ = cin;
    (out, [b, cout, oh, ow])
}

/// Dense matrix `M` (row-major, `len(out) × len(in)`) of the linear map
/// `x ↦ conv2d(x, w)` without bias, built by probing unit vectors.
pub fn conv_matrix(
    in_shape: [usize; 4],
    wt: &[f64],
    w_shape: [usize; 4],
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize, [usize; 4]) {
    let n_in: usize = in_shape.iter().product();
    let mut cols = Vec::with_capacity(n_in);
    let mut out_shape = [0; 4];
    for k in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[k] = 1.0;
        let (col, s) = naive_conv2d(&e, in_shape, wt, w_shape, None, stride, pad, groups);
        out_shape = s;
        cols.push(col);
    }
    let n_out = cols[0].len();
    let mut m = vec![0.0; n_out * n_in];
    for (k, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            m[r * n_in + k] = *v;
        }
    }
    (m, n_out, n_in, out_shape)
}

/// Full complex 2-D DFT of one real `h × w` image, by double sum.
pub fn naive_dft2(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let theta = 2.0 * PI * ((k * y) as f64 / h as f64 + (l * xx) as f64 / w as f64);
                    re += x[y * w + xx] * theta.cos();
                    im -= x[y * w + xx] * theta.sin();
                }
            }
            out[k * w + l] = (re, im);
        }
    }
    out
}

/// Mean and (biased) variance of each `(sample, group)` block.
pub fn group_stats(x: &[f64], [b, c, h, w]: [usize; 4], groups: usize) -> Vec<(f64, f64)> {
    let len = c / groups * h * w;
    (0..b * groups)
        .map(|i| {
            let block = &x[i * len..(i + 1) * len];
            let mean = block.iter().sum::<f64>() / len as f64;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            (mean, var)
        })
        .collect()
}

/// Labels 4-connected components of pixels equal to `value` with an
/// explicit stack; one entry per component, true if it reaches the border.
pub fn components(h: usize, w: usize, m: &[f32], value: f32) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut touches = Vec::new();
    for start in 0..h * w {
        if m[start] != value || label[start] != usize::MAX {
            continue;
        }
        let id = touches.len();
        let mut border = false;
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            border |= y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let mut near = Vec::with_capacity(4);
            if y > 0 {
                near.push(i - w);
            }
            if y + 1 < h {
                near.push(i + w);
            }
            if x > 0 {
                near.push(i - 1);
            }
            if x + 1 < w {
                near.push(i + 1);
            }
            for j in near {
                if m[j] == value && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
        touches.push(border);
    }
    touches
}
