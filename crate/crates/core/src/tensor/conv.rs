//! Grouped 2-D convolution and transposed convolution via im2col + gemm.
//!
//! Both ops are cross-correlations with zero padding. Work is split per batch
//! sample (in parallel) and, inside a sample, into tiles of output rows so the
//! im2col buffer stays bounded for large frames.

use std::ops::Range;

use rayon::prelude::*;

use super::linalg::{gemm, MatMut, MatRef};
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per tile.
const TILE_ELEMS: usize = 1 << 20;

/// Stride, zero padding, group count, and (transposed only) output padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub output_padding: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
            output_padding: 0,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::dim(op, "stride and groups must be positive"));
        }
        Ok(())
    }
}

/// `⌊(n + 2p − k) / s⌋ + 1`, or `None` if the padded input is smaller than the kernel.
pub fn conv_output_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// `(n − 1)·s − 2p + k + output_padding`, or `None` if that is not positive.
pub fn conv_transpose_output_extent(
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((n - 1) * stride + k + output_padding)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
}

/// Geometry of one im2col: an image of `c × ih × iw` scanned by a
/// `kh × kw` window producing `oh × ow` positions.
#[derive(Debug, Clone, Copy)]
struct Patch {
    c: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patch {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn image_len(&self) -> usize {
        self.c * self.ih * self.iw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.k() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn tiles(&self) -> impl Iterator<Item = Range<usize>> {
        let step = self.rows_per_tile();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r| r..(r + step).min(oh))
    }

    /// Valid output columns `lo..hi` for kernel column `j`.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > j { (p - j).div_ceil(s) } else { 0 };
        let hi = if self.iw + p > j {
            ((self.iw + p - j - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols` (`k × rows.len()·ow`, row-major) from `img`.
    fn im2col<S: Scalar>(&self, img: &[S], rows: Range<usize>, cols: &mut [S]) {
        let tile = rows.len() * self.ow;
        let (s, p) = (self.stride, self.pad);
        for ci in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * tile;
                    let (lo, hi) = self.valid_cols(j);
                    for (t, oy) in rows.clone().enumerate() {
                        let dst = &mut cols[row + t * self.ow..row + (t + 1) * self.ow];
                        let iy = (oy * s + i) as isize - p as isize;
                        if iy < 0 || iy >= self.ih as isize || lo >= hi {
                            dst.fill(S::zero());
                            continue;
                        }
                        let src = &img[(ci * self.ih + iy as usize) * self.iw..][..self.iw];
                        dst[..lo].fill(S::zero());
                        dst[hi..].fill(S::zero());
                        let x0 = lo * s + j - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (d, ox) in dst[lo..hi].iter_mut().zip(0..) {
                                *d = src[x0 + ox * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patch::im2col`]: scatters `cols` back into `img` additively.
    fn col2im<S: Scalar>(&self, cols: &[S], rows: Range<usize>, img: &mut [S]) {
        let tile = rows.len() * self.ow;
        let (s, p) = (self.stride, self.pad);
        for ci in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * tile;
                    let (lo, hi) = self.valid_cols(j);
                    if lo >= hi {
                        continue;
                    }
                    for (t, oy) in rows.clone().enumerate() {
                        let iy = (oy * s + i) as isize - p as isize;
                        if iy < 0 || iy >= self.ih as isize {
                            continue;
                        }
                        let src = &cols[row + t * self.ow..row + (t + 1) * self.ow];
                        let dst = &mut img[(ci * self.ih + iy as usize) * self.iw..][..self.iw];
                        let x0 = lo * s + j - p;
                        for (v, ox) in src[lo..hi].iter().zip(0..) {
                            let d = &mut dst[x0 + ox * s];
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

/// Validated layout shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
struct Layout {
    batch: usize,
    groups: usize,
    /// Channels per group on the "positions" side.
    pos_c: usize,
    patch: Patch,
}

impl Layout {
    /// Weight rows of group `g`, a row-major `pos_c × k` block in both ops.
    fn weight_block<'a, S>(&self, w: &'a [S], g: usize) -> &'a [S] {
        let len = w.len() / self.groups;
        &w[g * len..(g + 1) * len]
    }
}

fn conv_layout<S: Scalar>(
    op: &'static str,
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeom,
) -> Result<(Layout, usize)> {
    geom.validate(op)?;
    let [b, cin, h, wd] = x.dims4(op)?;
    let [cout, cin_g, kh, kw] = w.dims4(op)?;
    let g = geom.groups;
    if cin % g != 0 || cout % g != 0 {
        return Err(Error::dim(
            op,
            format!("channels {cin}->{cout} not divisible by {g} groups"),
        ));
    }
    if cin_g * g != cin {
        return Err(Error::dim(
            op,
            format!("weight expects {} input channels, input has {cin}", cin_g * g),
        ));
    }
    check_bias(op, bias, cout)?;
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, kh, geom.stride, geom.padding),
        conv_output_extent(wd, kw, geom.stride, geom.padding),
    ) else {
        return Err(Error::dim(
            op,
            format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
        ));
    };
    let layout = Layout {
        batch: b,
        groups: g,
        pos_c: cout / g,
        patch: Patch {
            c: cin_g,
            ih: h,
            iw: wd,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.padding,
            oh,
            ow,
        },
    };
    Ok((layout, cout))
}

fn conv_transpose_layout<S: Scalar>(
    op: &'static str,
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeom,
) -> Result<(Layout, usize)> {
    geom.validate(op)?;
    if geom.output_padding >= geom.stride {
        return Err(Error::dim(op, "output_padding must be smaller than stride"));
    }
    let [b, cin, h, wd] = x.dims4(op)?;
    let [w_cin, cout_g, kh, kw] = w.dims4(op)?;
    let g = geom.groups;
    if w_cin != cin || cin % g != 0 {
        return Err(Error::dim(
            op,
            format!("weight has {w_cin} input channels, input has {cin}, groups {g}"),
        ));
    }
    let cout = cout_g * g;
    check_bias(op, bias, cout)?;
    let ext = |n, k| conv_transpose_output_extent(n, k, geom.stride, geom.padding, geom.output_padding);
    let (Some(oh), Some(ow)) = (ext(h, kh), ext(wd, kw)) else {
        return Err(Error::dim(op, "non-positive output extent"));
    };
    // The output is the image side of an im2col whose positions are the input.
    let layout = Layout {
        batch: b,
        groups: g,
        pos_c: cin / g,
        patch: Patch {
            c: cout_g,
            ih: oh,
            iw: ow,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.padding,
            oh: h,
            ow: wd,
        },
    };
    Ok((layout, cout))
}

fn check_bias<S: Scalar>(op: &'static str, bias: Option<&Tensor<S>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(
                op,
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            ));
        }
    }
    Ok(())
}

fn add_bias<S: Scalar>(out: &mut [S], bias: Option<&Tensor<S>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data().iter().cycle()) {
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
}

fn bias_grad<S: Scalar>(gout: &Tensor<S>, channels: usize) -> Tensor<S> {
    let plane = gout.numel() / (gout.shape()[0] * channels);
    let mut db = vec![S::zero(); channels];
    for (i, chunk) in gout.data().chunks(plane).enumerate() {
        db[i % channels] = db[i % channels] + chunk.iter().copied().sum::<S>();
    }
    Tensor::new(&[channels], db).expect("bias gradient shape")
}

/// Positions-side (`pos`) = `W · im2col(image)`: the conv2d forward and the
/// transposed-conv input gradient.
fn patches_to_positions<S: Scalar>(l: &Layout, w: &[S], image: &[S], pos: &mut [S]) {
    let p = l.patch;
    let (k, npos) = (p.k(), p.positions());
    let img_len = p.image_len();
    pos.par_chunks_mut(l.groups * l.pos_c * npos)
        .zip(image.par_chunks(l.groups * img_len))
        .for_each(|(pos_n, img_n)| {
            let mut cols = Vec::new();
            for g in 0..l.groups {
                let wg = MatRef::row_major(l.weight_block(w, g), l.pos_c, k);
                let img = &img_n[g * img_len..(g + 1) * img_len];
                let out = &mut pos_n[g * l.pos_c * npos..(g + 1) * l.pos_c * npos];
                if p.pointwise() {
                    let b = MatRef::row_major(img, k, npos);
                    gemm(S::one(), wg, b, S::zero(), MatMut::row_major(out, l.pos_c, npos));
                    continue;
                }
                for rows in p.tiles() {
                    let tile = rows.len() * p.ow;
                    cols.resize(k * tile, S::zero());
                    p.im2col(img, rows.clone(), &mut cols);
                    let c = MatMut::strided(&mut out[rows.start * p.ow..], l.pos_c, tile, npos, 1);
                    gemm(S::one(), wg, MatRef::row_major(&cols, k, tile), S::zero(), c);
                }
            }
        });
}

/// Image-side += col2im(`Wᵀ · positions`): the conv2d input gradient and the
/// transposed-conv forward. `image` must be zeroed by the caller.
fn positions_to_patches<S: Scalar>(l: &Layout, w: &[S], pos: &[S], image: &mut [S]) {
    let p = l.patch;
    let (k, npos) = (p.k(), p.positions());
    let img_len = p.image_len();
    image
        .par_chunks_mut(l.groups * img_len)
        .zip(pos.par_chunks(l.groups * l.pos_c * npos))
        .for_each(|(img_n, pos_n)| {
            let mut cols = Vec::new();
            for g in 0..l.groups {
                let wt = MatRef::row_major(l.weight_block(w, g), l.pos_c, k).t();
                let src = &pos_n[g * l.pos_c * npos..(g + 1) * l.pos_c * npos];
                let img = &mut img_n[g * img_len..(g + 1) * img_len];
                if p.pointwise() {
                    let b = MatRef::row_major(src, l.pos_c, npos);
                    gemm(S::one(), wt, b, S::one(), MatMut::row_major(img, k, npos));
                    continue;
                }
                for rows in p.tiles() {
                    let tile = rows.len() * p.ow;
                    cols.resize(k * tile, S::zero());
                    let b = MatRef::strided(&src[rows.start * p.ow..], l.pos_c, tile, npos, 1);
                    gemm(S::one(), wt, b, S::zero(), MatMut::row_major(&mut cols, k, tile));
                    p.col2im(&cols, rows, img);
                }
            }
        });
}

/// Weight gradient `Σ_n positions_n · im2col(image_n)ᵀ`, summed over samples
/// in a fixed order.
fn weight_grad<S: Scalar>(l: &Layout, image: &[S], pos: &[S], w_len: usize) -> Vec<S> {
    let p = l.patch;
    let (k, npos) = (p.k(), p.positions());
    let img_len = p.image_len();
    let partials: Vec<Vec<S>> = image
        .par_chunks(l.groups * img_len)
        .zip(pos.par_chunks(l.groups * l.pos_c * npos))
        .map(|(img_n, pos_n)| {
            let mut dw = vec![S::zero(); w_len];
            let block = w_len / l.groups;
            let mut cols = Vec::new();
            for g in 0..l.groups {
                let img = &img_n[g * img_len..(g + 1) * img_len];
                let src = &pos_n[g * l.pos_c * npos..(g + 1) * l.pos_c * npos];
                let dwg = &mut dw[g * block..(g + 1) * block];
                if p.pointwise() {
                    let a = MatRef::row_major(src, l.pos_c, npos);
                    let b = MatRef::row_major(img, k, npos).t();
                    gemm(S::one(), a, b, S::zero(), MatMut::row_major(dwg, l.pos_c, k));
                    continue;
                }
                for rows in p.tiles() {
                    let tile = rows.len() * p.ow;
                    cols.resize(k * tile, S::zero());
                    p.im2col(img, rows.clone(), &mut cols);
                    let a = MatRef::strided(&src[rows.start * p.ow..], l.pos_c, tile, npos, 1);
                    let b = MatRef::row_major(&cols, k, tile).t();
                    gemm(S::one(), a, b, S::one(), MatMut::row_major(dwg, l.pos_c, k));
                }
            }
            dw
        })
        .collect();
    let mut total = vec![S::zero(); w_len];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t = *t + v;
        }
    }
    total
}

/// Grouped 2-D cross-correlation.
///
/// `x: [B, Cin, H, W]`, `weight: [Cout, Cin/g, kh, kw]`, `bias: [Cout]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeom,
) -> Result<Tensor<S>> {
    let (l, cout) = conv_layout("conv2d", x, weight, bias, geom)?;
    let p = l.patch;
    let mut out = vec![S::zero(); l.batch * cout * p.positions()];
    patches_to_positions(&l, weight.data(), x.data(), &mut out);
    add_bias(&mut out, bias, p.positions());
    Tensor::new(&[l.batch, cout, p.oh, p.ow], out)
}

/// Transposed convolution, the adjoint of [`conv2d`] with respect to its input.
///
/// `x: [B, Cin, H, W]`, `weight: [Cin, Cout/g, kh, kw]`, `bias: [Cout]`.
pub fn conv_transpose2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeom,
) -> Result<Tensor<S>> {
    let (l, cout) = conv_transpose_layout("conv_transpose2d", x, weight, bias, geom)?;
    let p = l.patch;
    let mut out = vec![S::zero(); l.batch * cout * p.ih * p.iw];
    positions_to_patches(&l, weight.data(), x.data(), &mut out);
    add_bias(&mut out, bias, p.ih * p.iw);
    Tensor::new(&[l.batch, cout, p.ih, p.iw], out)
}

impl<S: Scalar> Tape<S> {
    pub fn conv2d(
        &mut self,
        x: &Var<S>,
        weight: &Var<S>,
        bias: Option<&Var<S>>,
        geom: ConvGeom,
    ) -> Result<Var<S>> {
        let out = conv2d(x.value(), weight.value(), bias.map(Var::value), geom)?;
        let (l, cout) = conv_layout("conv2d", x.value(), weight.value(), None, geom)?;
        let (xs, ws) = (x.shared(), weight.shared());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record("conv2d", &inputs, out, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); xs.numel()];
                positions_to_patches(&l, ws.data(), g.data(), &mut dx);
                Tensor::new(xs.shape(), dx)
            });
            let dw = needs[1].then(|| {
                Tensor::new(ws.shape(), weight_grad(&l, xs.data(), g.data(), ws.numel()))
            });
            let mut grads = vec![dx.transpose()?, dw.transpose()?];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, cout)));
            }
            Ok(grads)
        })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: &Var<S>,
        weight: &Var<S>,
        bias: Option<&Var<S>>,
        geom: ConvGeom,
    ) -> Result<Var<S>> {
        let out = conv_transpose2d(x.value(), weight.value(), bias.map(Var::value), geom)?;
        let (l, cout) =
            conv_transpose_layout("conv_transpose2d", x.value(), weight.value(), None, geom)?;
        let (xs, ws) = (x.shared(), weight.shared());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record("conv_transpose2d", &inputs, out, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); xs.numel()];
                patches_to_positions(&l, ws.data(), g.data(), &mut dx);
                Tensor::new(xs.shape(), dx)
            });
            let dw = needs[1].then(|| {
                Tensor::new(ws.shape(), weight_grad(&l, g.data(), xs.data(), ws.numel()))
            });
            let mut grads = vec![dx.transpose()?, dw.transpose()?];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| bias_grad(g, cout)));
            }
            Ok(grads)
        })
    }
}
