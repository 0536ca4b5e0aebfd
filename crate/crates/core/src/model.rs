//! Encoder, inpainter, translator, and decoder assembled into the full
//! predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{bind, initialize, param_tree, Conv, ConvBlock, ParamSpec, Tree};
use crate::spectral::{apply_conv, conv_block, ffc, fft_inception, BlockSettings, FfcParams, InceptionParams};
use crate::tensor::{ConvGeom, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub encoder: Vec<ConvBlock<P>>,
    pub inpainter: Vec<FfcParams<P>>,
    pub translator: Vec<InceptionParams<P>>,
    pub decoder: Vec<ConvBlock<P>>,
    /// Final 1×1 projection back to frame channels.
    pub head: Conv<P>,
}
param_tree!(ModelParams { leaf: [], sub: [encoder, inpainter, translator, decoder, head], keep: [] });

fn encoder_stride(index: usize) -> usize {
    if index % 2 == 1 {
        2
    } else {
        1
    }
}

/// Parameter shapes and initializers for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Result<ModelParams<ParamSpec>> {
    cfg.validate()?;
    let cw = cfg.enc_width;
    let n = cfg.enc_depth;
    let encoder = (0..n)
        .map(|i| {
            let cin = if i == 0 { cfg.channels } else { cw };
            ConvBlock::spec(cin, cw, 3, ConvGeom::new(encoder_stride(i), 1, 1))
        })
        .collect();
    let half = cfg.t_in * cw / 2;
    let inpainter = (0..2).map(|_| FfcParams::spec(half)).collect();

    let (c_in, c_out) = (cfg.t_in * cw, cfg.t_out * cw);
    let translator = (0..cfg.trans_depth)
        .map(|j| {
            let cin = if j == 0 { c_in } else { cfg.hidden };
            let cout = if j + 1 == cfg.trans_depth { c_out } else { cfg.hidden };
            InceptionParams::spec(cin, cout, cfg.hidden, cfg.fourier_units)
        })
        .collect::<Result<_>>()?;

    let decoder = (0..n)
        .map(|j| {
            let stride = encoder_stride(n - 1 - j);
            let geom = ConvGeom::new(stride, 1, 1).with_output_padding(stride - 1);
            ConvBlock::spec_transpose(cw, cw, 3, geom)
        })
        .collect();
    let head = Conv::spec(cw, cfg.channels, 1, ConvGeom::default());
    Ok(ModelParams { encoder, inpainter, translator, decoder, head })
}

/// Seeded initialization in canonical parameter order.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<S>>> {
    let layout = layout(cfg)?;
    Ok(initialize(&layout, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::dim(op, format!("expected {want:?}, got {got:?}")));
    }
    Ok(())
}

/// `[B, T, C, H, W]` frames to packed features `[B, T·C̃, H′, W′]`.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    frames: &Var<S>,
    p: &ModelParams<Var<S>>,
    cfg: &ModelConfig,
) -> Result<Var<S>> {
    let s = frames.shape();
    if s.len() != 5 {
        return Err(Error::dim("encode", format!("expected [B, T, C, H, W], got {s:?}")));
    }
    let b = s[0];
    expect_shape("encode", &s[1..], &[cfg.t_in, cfg.channels, cfg.height, cfg.width])?;
    let settings = cfg.block_settings();
    let mut x = tape.reshape(frames, &[b * cfg.t_in, cfg.channels, cfg.height, cfg.width])?;
    for block in &p.encoder {
        x = conv_block(tape, &x, block, &settings)?;
    }
    let (h, w) = cfg.latent_size();
    tape.reshape(&x, &[b, cfg.t_in * cfg.enc_width, h, w])
}

/// Two fast Fourier convolutions over the channel halves.
pub fn inpaint<S: Scalar>(
    tape: &mut Tape<S>,
    features: &Var<S>,
    p: &ModelParams<Var<S>>,
    settings: &BlockSettings,
) -> Result<Var<S>> {
    let (mut local, mut global) = tape.split_half(features, 1)?;
    for block in &p.inpainter {
        (local, global) = ffc(tape, &local, &global, block, settings)?;
    }
    tape.concat(&[&local, &global], 1)
}

/// Stacked inception blocks, `T·C̃ → T′·C̃` channels.
pub fn translate<S: Scalar>(
    tape: &mut Tape<S>,
    features: &Var<S>,
    p: &ModelParams<Var<S>>,
    settings: &BlockSettings,
) -> Result<Var<S>> {
    let mut z = features.clone();
    for block in &p.translator {
        z = fft_inception(tape, &z, block, settings)?;
    }
    Ok(z)
}

/// Frame-wise decoder: `[B, K·C̃, H′, W′]` to `[B, K, C, H, W]`.
pub fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    features: &Var<S>,
    frames: usize,
    p: &ModelParams<Var<S>>,
    cfg: &ModelConfig,
) -> Result<Var<S>> {
    let s = features.shape();
    let (h, w) = cfg.latent_size();
    if s.len() != 4 {
        return Err(Error::dim("decode", format!("expected rank 4, got {s:?}")));
    }
    let b = s[0];
    expect_shape("decode", &s[1..], &[frames * cfg.enc_width, h, w])?;
    let settings = cfg.block_settings();
    let mut x = tape.reshape(features, &[b * frames, cfg.enc_width, h, w])?;
    for block in &p.decoder {
        x = conv_block(tape, &x, block, &settings)?;
    }
    let x = apply_conv(tape, &x, &p.head)?;
    tape.reshape(&x, &[b, frames, cfg.channels, cfg.height, cfg.width])
}

/// Predicted future frames and recovered input frames.
#[derive(Debug, Clone)]
pub struct Outputs<V> {
    pub predicted: V,
    pub recovered: Option<V>,
}

/// Full pass. The recovery branch decodes the inpainted features with the
/// same decoder and is skipped when `with_recovery` is false.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    occluded: &Var<S>,
    p: &ModelParams<Var<S>>,
    cfg: &ModelConfig,
    with_recovery: bool,
) -> Result<Outputs<Var<S>>> {
    let settings = cfg.block_settings();
    let encoded = encode(tape, occluded, p, cfg)?;
    let z = if cfg.use_inpainter {
        inpaint(tape, &encoded, p, &settings)?
    } else {
        encoded
    };
    let future = translate(tape, &z, p, &settings)?;
    let predicted = decode(tape, &future, cfg.t_out, p, cfg)?;
    let recovered = if with_recovery {
        Some(decode(tape, &z, cfg.t_in, p, cfg)?)
    } else {
        None
    };
    Ok(Outputs { predicted, recovered })
}

/// Configuration plus stored parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FfiNet<S> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<S>>,
}

impl<S: Scalar> FfiNet<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config, config.seed)?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        crate::params::count(&self.params)
    }

    /// Inference without gradient recording. Returns `(predicted, recovered)`.
    pub fn predict(&self, occluded: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::no_grad();
        let p = bind(&self.params, &mut tape);
        let x = tape.constant(occluded.clone());
        let out = forward(&mut tape, &x, &p, &self.config, true)?;
        let recovered = out.recovered.expect("recovery requested");
        Ok((out.predicted.to_tensor(), recovered.to_tensor()))
    }

    /// Predicted frames only, skipping the recovery branch.
    pub fn forecast(&self, occluded: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::no_grad();
        let p = bind(&self.params, &mut tape);
        let x = tape.constant(occluded.clone());
        Ok(forward(&mut tape, &x, &p, &self.config, false)?.predicted.to_tensor())
    }

    pub fn names(&self) -> Vec<String> {
        self.params.names()
    }
}
