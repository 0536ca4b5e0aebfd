//! Real 2-D FFT over the last two axes, carried as paired real tensors.
//!
//! Convention: the forward transform is unnormalized and keeps the
//! `⌊W/2⌋ + 1` non-redundant columns; the inverse scales by `1 / (H·W)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Half spectrum of a real signal. `re` and `im` share the shape
/// `[..., H, ⌊width/2⌋ + 1]`; `width` is the source signal width.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum<T> {
    pub re: T,
    pub im: T,
    pub width: usize,
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Weight of half-spectrum column `l` in the Hermitian-completed sum.
fn column_weight(l: usize, w: usize) -> usize {
    if l == 0 || 2 * l == w {
        1
    } else {
        2
    }
}

struct Plans<S: Scalar> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<S>>,
    row_inv: Arc<dyn Fft<S>>,
    col_fwd: Arc<dyn Fft<S>>,
    col_inv: Arc<dyn Fft<S>>,
    scratch: Vec<Complex<S>>,
}

impl<S: Scalar> Plans<S> {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(w);
        let row_inv = planner.plan_fft_inverse(w);
        let col_fwd = planner.plan_fft_forward(h);
        let col_inv = planner.plan_fft_inverse(h);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            h,
            w,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex::default(); scratch_len],
        }
    }

    fn columns(&mut self, buf: &mut [Complex<S>], inverse: bool) {
        let wf = half_width(self.w);
        let mut col = vec![Complex::default(); self.h];
        let plan = if inverse { &self.col_inv } else { &self.col_fwd };
        for l in 0..wf {
            for k in 0..self.h {
                col[k] = buf[k * wf + l];
            }
            plan.process_with_scratch(&mut col, &mut self.scratch);
            for k in 0..self.h {
                buf[k * wf + l] = col[k];
            }
        }
    }

    /// Unnormalized forward half spectrum of one `h × w` image.
    fn forward_half(&mut self, img: &[S], re: &mut [S], im: &mut [S]) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut buf = vec![Complex::default(); h * wf];
        let mut row = vec![Complex::default(); w];
        for y in 0..h {
            for (r, &v) in row.iter_mut().zip(&img[y * w..(y + 1) * w]) {
                *r = Complex::new(v, S::zero());
            }
            self.row_fwd.process_with_scratch(&mut row, &mut self.scratch);
            buf[y * wf..(y + 1) * wf].copy_from_slice(&row[..wf]);
        }
        self.columns(&mut buf, false);
        for ((c, r), i) in buf.iter().zip(re.iter_mut()).zip(im.iter_mut()) {
            *r = c.re;
            *i = c.im;
        }
    }

    /// `Re Σ_{k, l<wf} G[k,l]·e^{+iθ}` over the half spectrum, optionally
    /// Hermitian-completing the missing columns. With completion and a
    /// `1/(h·w)` scale this is the inverse real FFT.
    fn backward_half(&mut self, re: &[S], im: &[S], out: &mut [S], hermitian: bool, scale: S) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut buf: Vec<Complex<S>> = re.iter().zip(im).map(|(&r, &i)| Complex::new(r, i)).collect();
        self.columns(&mut buf, true);
        let mut row = vec![Complex::default(); w];
        for y in 0..h {
            let z = &buf[y * wf..(y + 1) * wf];
            row.fill(Complex::default());
            row[..wf].copy_from_slice(z);
            if hermitian {
                row[0].im = S::zero();
                if w % 2 == 0 {
                    row[w / 2].im = S::zero();
                }
                for l in wf..w {
                    row[l] = row[w - l].conj();
                }
            }
            self.row_inv.process_with_scratch(&mut row, &mut self.scratch);
            for (o, c) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
                *o = c.re * scale;
            }
        }
    }
}

fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need at least rank 2, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let count = shape.iter().product::<usize>() / (h * w);
    Ok((count, h, w))
}

fn spectrum_shape(shape: &[usize], w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 2") = half_width(w);
    s
}

fn rfft2_raw<S: Scalar>(x: &Tensor<S>) -> Result<ComplexSpectrum<Tensor<S>>> {
    let (count, h, w) = image_dims(x.shape(), "rfft2")?;
    let wf = half_width(w);
    let mut plans = Plans::new(h, w);
    let mut re = vec![S::zero(); count * h * wf];
    let mut im = vec![S::zero(); count * h * wf];
    for ((img, r), i) in x
        .data()
        .chunks(h * w)
        .zip(re.chunks_mut(h * wf))
        .zip(im.chunks_mut(h * wf))
    {
        plans.forward_half(img, r, i);
    }
    let shape = spectrum_shape(x.shape(), w);
    Ok(ComplexSpectrum {
        re: Tensor::new(&shape, re)?,
        im: Tensor::new(&shape, im)?,
        width: w,
    })
}

fn check_spectrum<S: Scalar>(re: &Tensor<S>, im: &Tensor<S>, out_width: usize) -> Result<(usize, usize)> {
    if re.shape() != im.shape() {
        return Err(Error::dim(
            "irfft2",
            format!("real {:?} vs imaginary {:?}", re.shape(), im.shape()),
        ));
    }
    let (count, h, wf) = image_dims(re.shape(), "irfft2")?;
    if out_width == 0 || half_width(out_width) != wf {
        return Err(Error::dim(
            "irfft2",
            format!("spectrum has {wf} columns, inconsistent with output width {out_width}"),
        ));
    }
    Ok((count, h))
}

fn irfft2_raw<S: Scalar>(re: &Tensor<S>, im: &Tensor<S>, out_width: usize) -> Result<Tensor<S>> {
    let (count, h) = check_spectrum(re, im, out_width)?;
    let (w, wf) = (out_width, half_width(out_width));
    let mut plans = Plans::new(h, w);
    let scale = S::one() / S::of((h * w) as f64);
    let mut out = vec![S::zero(); count * h * w];
    for ((r, i), o) in re
        .data()
        .chunks(h * wf)
        .zip(im.data().chunks(h * wf))
        .zip(out.chunks_mut(h * w))
    {
        plans.backward_half(r, i, o, true, scale);
    }
    let mut shape = re.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = w;
    Tensor::new(&shape, out)
}

/// Unnormalized forward real 2-D DFT over the last two axes.
pub fn rfft2<S: Scalar>(x: &Tensor<S>) -> Result<ComplexSpectrum<Tensor<S>>> {
    rfft2_raw(x)
}

/// Inverse of [`rfft2`], producing a real signal of width `out_width`.
pub fn irfft2<S: Scalar>(spec: &ComplexSpectrum<Tensor<S>>, out_width: usize) -> Result<Tensor<S>> {
    irfft2_raw(&spec.re, &spec.im, out_width)
}

impl<S: Scalar> Tape<S> {
    pub fn rfft2(&mut self, x: &Var<S>) -> Result<ComplexSpectrum<Var<S>>> {
        let spec = rfft2_raw(x.value())?;
        let width = spec.width;
        let shape = x.shape().to_vec();
        let mut outs = self
            .record_multi("rfft2", &[x], vec![spec.re, spec.im], move |g, _| {
                let (count, h, w) = image_dims(&shape, "rfft2")?;
                let wf = half_width(w);
                let mut plans = Plans::new(h, w);
                let mut dx = vec![S::zero(); count * h * w];
                for ((r, i), o) in g[0]
                    .data()
                    .chunks(h * wf)
                    .zip(g[1].data().chunks(h * wf))
                    .zip(dx.chunks_mut(h * w))
                {
                    plans.backward_half(r, i, o, false, S::one());
                }
                Ok(vec![Some(Tensor::new(&shape, dx)?)])
            })?
            .into_iter();
        let (re, im) = (outs.next().expect("re"), outs.next().expect("im"));
        Ok(ComplexSpectrum { re, im, width })
    }

    pub fn irfft2(&mut self, spec: &ComplexSpectrum<Var<S>>, out_width: usize) -> Result<Var<S>> {
        let out = irfft2_raw(spec.re.value(), spec.im.value(), out_width)?;
        let w = out_width;
        self.record("irfft2", &[&spec.re, &spec.im], out, move |g, _| {
            let half = rfft2_raw(g)?;
            let (count, h, _) = image_dims(g.shape(), "irfft2")?;
            let wf = half_width(w);
            let norm = S::one() / S::of((h * w) as f64);
            let weights: Vec<S> = (0..wf).map(|l| S::of(column_weight(l, w) as f64) * norm).collect();
            let scale = |t: Tensor<S>| {
                let mut t = t;
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = *v * weights[i % wf];
                }
                t
            };
            debug_assert_eq!(half.re.numel(), count * h * wf);
            Ok(vec![Some(scale(half.re)), Some(scale(half.im))])
        })
    }
}
