//! Fourier Unit, fast Fourier convolution, and FFT-Inception blocks.

use crate::error::{Error, Result};
use crate::params::{param_tree, Conv, ConvBlock, Norm, ParamSpec};
use crate::tensor::{ComplexSpectrum, ConvGeom, Scalar, Tape, Var};

/// Group count of the grouped branches inside an inception block.
pub const INCEPTION_GROUPS: usize = 8;

/// Shared hyperparameters of every normalized convolution block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSettings {
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub leaky_slope: f64,
    /// When false the frequency-domain convolution is applied without its
    /// group norm and activation.
    pub freq_norm_act: bool,
}

impl Default for BlockSettings {
    fn default() -> Self {
        Self { gn_groups: 2, gn_eps: 1e-5, leaky_slope: 0.2, freq_norm_act: true }
    }
}

impl BlockSettings {
    /// Largest group count not above `gn_groups` that divides `channels`.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.gn_groups.max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
    }
}

pub fn apply_conv<S: Scalar>(tape: &mut Tape<S>, x: &Var<S>, conv: &Conv<Var<S>>) -> Result<Var<S>> {
    if conv.transpose {
        tape.conv_transpose2d(x, &conv.weight, Some(&conv.bias), conv.geom)
    } else {
        tape.conv2d(x, &conv.weight, Some(&conv.bias), conv.geom)
    }
}

/// `σ(GN(x))`.
pub fn norm_act<S: Scalar>(tape: &mut Tape<S>, x: &Var<S>, norm: &Norm<Var<S>>, s: &BlockSettings) -> Result<Var<S>> {
    let groups = s.groups_for(x.shape()[1]);
    let y = tape.group_norm(x, groups, &norm.gamma, &norm.beta, S::of(s.gn_eps))?;
    tape.leaky_relu(&y, S::of(s.leaky_slope))
}

/// `σ(GN(conv(x)))`.
pub fn conv_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Var<S>,
    block: &ConvBlock<Var<S>>,
    s: &BlockSettings,
) -> Result<Var<S>> {
    let y = apply_conv(tape, x, &block.conv)?;
    norm_act(tape, &y, &block.norm, s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierUnitParams<P> {
    pub pre: ConvBlock<P>,
    pub freq: ConvBlock<P>,
    pub post: ConvBlock<P>,
}
param_tree!(FourierUnitParams { leaf: [], sub: [pre, freq, post], keep: [] });

impl FourierUnitParams<ParamSpec> {
    pub fn spec(c: usize) -> Self {
        let pw = ConvGeom::default();
        Self {
            pre: ConvBlock::spec(c, c, 1, pw),
            freq: ConvBlock::spec(2 * c, 2 * c, 1, pw),
            post: ConvBlock::spec(c, c, 1, pw),
        }
    }
}

/// Fourier Unit on `[B, c, H, W]`; the output has the same shape.
pub fn fourier_unit<S: Scalar>(
    tape: &mut Tape<S>,
    u: &Var<S>,
    p: &FourierUnitParams<Var<S>>,
    s: &BlockSettings,
) -> Result<Var<S>> {
    let width = *u.shape().last().ok_or_else(|| Error::dim("fourier_unit", "scalar input"))?;
    let spatial = conv_block(tape, u, &p.pre, s)?;
    let spec = tape.rfft2(&spatial)?;
    let stacked = tape.concat(&[&spec.re, &spec.im], 1)?;
    let mixed = if s.freq_norm_act {
        conv_block(tape, &stacked, &p.freq, s)?
    } else {
        apply_conv(tape, &stacked, &p.freq.conv)?
    };
    let (re, im) = tape.split_half(&mixed, 1)?;
    let back = tape.irfft2(&ComplexSpectrum { re, im, width }, width)?;
    let merged = tape.add(&back, &spatial)?;
    conv_block(tape, &merged, &p.post, s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfcParams<P> {
    pub local_to_local: Conv<P>,
    pub global_to_local: Conv<P>,
    pub local_to_global: Conv<P>,
    pub fu: FourierUnitParams<P>,
    pub local_norm: Norm<P>,
    pub global_norm: Norm<P>,
}
param_tree!(FfcParams {
    leaf: [],
    sub: [local_to_local, global_to_local, local_to_global, fu, local_norm, global_norm],
    keep: []
});

impl FfcParams<ParamSpec> {
    /// Block over two branches of `half` channels each.
    pub fn spec(half: usize) -> Self {
        let g = ConvGeom::new(1, 1, 1);
        Self {
            local_to_local: Conv::spec(half, half, 3, g),
            global_to_local: Conv::spec(half, half, 3, g),
            local_to_global: Conv::spec(half, half, 3, g),
            fu: FourierUnitParams::spec(half),
            local_norm: Norm::spec(half),
            global_norm: Norm::spec(half),
        }
    }
}

/// Two-branch fast Fourier convolution. Returns `(local, global)`.
pub fn ffc<S: Scalar>(
    tape: &mut Tape<S>,
    local: &Var<S>,
    global: &Var<S>,
    p: &FfcParams<Var<S>>,
    s: &BlockSettings,
) -> Result<(Var<S>, Var<S>)> {
    if local.shape() != global.shape() {
        return Err(Error::dim(
            "ffc",
            format!("local {:?} vs global {:?}", local.shape(), global.shape()),
        ));
    }
    let ll = apply_conv(tape, local, &p.local_to_local)?;
    let gl = apply_conv(tape, global, &p.global_to_local)?;
    let sum = tape.add(&ll, &gl)?;
    let new_local = norm_act(tape, &sum, &p.local_norm, s)?;

    let lg = apply_conv(tape, local, &p.local_to_global)?;
    let gg = fourier_unit(tape, global, &p.fu, s)?;
    let sum = tape.add(&lg, &gg)?;
    let new_global = norm_act(tape, &sum, &p.global_norm, s)?;
    Ok((new_local, new_global))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionParams<P> {
    pub reduce: ConvBlock<P>,
    pub branch3: ConvBlock<P>,
    pub branch5: ConvBlock<P>,
    pub fourier: Vec<FourierUnitParams<P>>,
    pub fuse: ConvBlock<P>,
}
param_tree!(InceptionParams { leaf: [], sub: [reduce, branch3, branch5, fourier, fuse], keep: [] });

impl InceptionParams<ParamSpec> {
    /// Block `c_in → c_out` with inner width `hidden / 2` and `units`
    /// chained Fourier Units.
    pub fn spec(c_in: usize, c_out: usize, hidden: usize, units: usize) -> Result<Self> {
        let half = hidden / 2;
        if hidden % 2 != 0 || half == 0 || half % INCEPTION_GROUPS != 0 {
            return Err(Error::Config(format!(
                "inception width {hidden} must be even with half divisible by {INCEPTION_GROUPS}"
            )));
        }
        if units == 0 {
            return Err(Error::Config("inception block needs at least one Fourier Unit".into()));
        }
        let pw = ConvGeom::default();
        Ok(Self {
            reduce: ConvBlock::spec(c_in, half, 1, pw),
            branch3: ConvBlock::spec(half, half, 3, ConvGeom::new(1, 1, INCEPTION_GROUPS)),
            branch5: ConvBlock::spec(half, half, 5, ConvGeom::new(1, 2, INCEPTION_GROUPS)),
            fourier: (0..units).map(|_| FourierUnitParams::spec(half)).collect(),
            fuse: ConvBlock::spec(3 * half, c_out, 1, pw),
        })
    }
}

/// FFT-Inception block: reduce, three parallel branches, concatenate, fuse.
pub fn fft_inception<S: Scalar>(
    tape: &mut Tape<S>,
    z: &Var<S>,
    p: &InceptionParams<Var<S>>,
    s: &BlockSettings,
) -> Result<Var<S>> {
    let reduced = conv_block(tape, z, &p.reduce, s)?;
    let b3 = conv_block(tape, &reduced, &p.branch3, s)?;
    let b5 = conv_block(tape, &reduced, &p.branch5, s)?;
    let mut bf = reduced;
    for fu in &p.fourier {
        bf = fourier_unit(tape, &bf, fu, s)?;
    }
    let cat = tape.concat(&[&b3, &b5, &bf], 1)?;
    conv_block(tape, &cat, &p.fuse, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{bind, initialize, Tree};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fourier_unit_preserves_shape() {
        let p: FourierUnitParams<Tensor<f32>> = initialize(&FourierUnitParams::spec(8), &mut rng(0));
        let mut tape = Tape::no_grad();
        let p = bind(&p, &mut tape);
        let u = tape.constant(Tensor::rand_uniform(&[2, 8, 16, 16], -1.0, 1.0, &mut rng(1)));
        let y = fourier_unit(&mut tape, &u, &p, &BlockSettings::default()).unwrap();
        assert_eq!(y.shape(), &[2, 8, 16, 16]);
        assert_eq!(tape.counters().get("rfft2"), 1);
    }

    #[test]
    fn inception_channel_plan() {
        let p = InceptionParams::spec(640, 512, 512, 3).unwrap();
        assert_eq!(p.reduce.conv.weight.shape, [256, 640, 1, 1]);
        assert_eq!(p.branch3.conv.weight.shape, [256, 32, 3, 3]);
        assert_eq!(p.branch5.conv.weight.shape, [256, 32, 5, 5]);
        assert_eq!(p.fuse.conv.weight.shape, [512, 768, 1, 1]);
        assert_eq!(p.fourier.len(), 3);
        assert!(matches!(InceptionParams::spec(8, 8, 24, 1), Err(Error::Config(_))));
    }

    #[test]
    fn ffc_rejects_width_mismatch() {
        let p: FfcParams<Tensor<f64>> = initialize(&FfcParams::spec(4), &mut rng(0));
        let mut tape = Tape::new();
        let p = bind(&p, &mut tape);
        let a = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(ffc(&mut tape, &a, &b, &p, &BlockSettings::default()), Err(Error::Dimension { .. })));
        assert_eq!(p.names().len(), 6 + 12 + 4);
    }

    #[test]
    fn group_count_falls_back_to_divisor() {
        let s = BlockSettings { gn_groups: 4, ..Default::default() };
        assert_eq!(s.groups_for(8), 4);
        assert_eq!(s.groups_for(6), 3);
        assert_eq!(s.groups_for(1), 1);
    }
}
