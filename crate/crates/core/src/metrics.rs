//! Frame-level MSE, MAE, SSIM, PSNR and the evaluation driver.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FfiNet;
use crate::occlusion::{apply_masks, MaskSet};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rank() < 3 {
        return Err(Error::dim(op, format!("expected [..., C, H, W], got {:?}", a.shape())));
    }
    Ok(())
}

fn per_frame(op: &'static str, pred: &Tensor<f32>, target: &Tensor<f32>, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_pair(op, pred, target)?;
    let s = pred.shape();
    let frame = s[s.len() - 3..].iter().product::<usize>();
    let frames = pred.numel() / frame;
    let total: f64 = pred
        .data()
        .chunks(frame)
        .zip(target.data().chunks(frame))
        .map(|(p, t)| p.iter().zip(t).map(|(&a, &b)| f(a as f64 - b as f64)).sum::<f64>())
        .sum();
    Ok(total / frames as f64)
}

/// Squared error summed over each `[C, H, W]` frame, averaged over frames.
pub fn frame_mse(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    per_frame("frame_mse", pred, target, |d| d * d)
}

/// Absolute error summed over each `[C, H, W]` frame, averaged over frames.
pub fn frame_mae(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    per_frame("frame_mae", pred, target, f64::abs)
}

/// Normalized 1-D Gaussian of length `n` centered on the middle tap.
fn gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|j| g[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW.min(h).min(w);
    let g = gaussian(k, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-windowed SSIM of two `[C, H, W]` (or `[H, W]`) frames with
/// dynamic range 1, averaged over window positions and channels. Frames
/// smaller than the window use a window of the frame's smaller side.
pub fn ssim(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() < 2 || pred.rank() > 3 {
        return Err(Error::dim("ssim", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = h * w;
    let channels = pred.numel() / plane;
    let total: f64 = (0..channels)
        .map(|c| {
            let a: Vec<f64> = pred.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = target.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
            ssim_plane(&a, &b, h, w)
        })
        .sum();
    Ok(total / channels as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at
/// [`PSNR_CAP`].
pub fn psnr(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    pred.expect_same_shape(target, "psnr")?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pred.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Metrics of one predicted frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameScores {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl FrameScores {
    pub fn of(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Self> {
        Ok(Self {
            mse: frame_mse(pred, target)?,
            mae: frame_mae(pred, target)?,
            ssim: ssim(pred, target)?,
            psnr: psnr(pred, target)?,
        })
    }

    fn mean(items: &[FrameScores]) -> Self {
        let n = items.len() as f64;
        let mut m = FrameScores::default();
        for s in items {
            m.mse += s.mse;
            m.mae += s.mae;
            m.ssim += s.ssim;
            m.psnr += s.psnr;
        }
        FrameScores { mse: m.mse / n, mae: m.mae / n, ssim: m.ssim / n, psnr: m.psnr / n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: FrameScores,
    /// Entry `t` averages lead time `t + 1` over sequences.
    pub per_horizon: Vec<FrameScores>,
    /// Frame-averaged scores of each sequence, in dataset order.
    pub per_sequence: Vec<FrameScores>,
    pub sequences: usize,
    /// Multiplier applied to MSE/MAE when displayed; stored values are raw.
    pub display_scale: f64,
}

impl EvalReport {
    fn rows(&self) -> Vec<(&'static str, String, f64)> {
        let mut rows = Vec::new();
        let mut push = |horizon: String, s: &FrameScores| {
            rows.push(("mse", horizon.clone(), s.mse));
            rows.push(("mae", horizon.clone(), s.mae));
            rows.push(("ssim", horizon.clone(), s.ssim));
            rows.push(("psnr", horizon, s.psnr));
        };
        push("all".into(), &self.overall);
        for (t, s) in self.per_horizon.iter().enumerate() {
            push((t + 1).to_string(), s);
        }
        rows
    }

    /// `metric,horizon,value` rows; `all` is the average over lead times.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,horizon,value\n");
        for (m, h, v) in self.rows() {
            let _ = writeln!(s, "{m},{h},{v}");
        }
        s
    }

    pub fn table(&self) -> String {
        let k = self.display_scale;
        let mut s = String::new();
        let _ = writeln!(s, "sequences: {}", self.sequences);
        let _ = writeln!(s, "{:>8} {:>12} {:>12} {:>8} {:>8}", "horizon", "MSE", "MAE", "SSIM", "PSNR");
        let mut line = |h: &str, f: &FrameScores| {
            let _ = writeln!(
                s,
                "{h:>8} {:>12.4} {:>12.4} {:>8.4} {:>8.3}",
                f.mse * k,
                f.mae * k,
                f.ssim,
                f.psnr
            );
        };
        for (t, f) in self.per_horizon.iter().enumerate() {
            line(&(t + 1).to_string(), f);
        }
        line("all", &self.overall);
        s
    }
}

/// Anything that maps observed frames to future frames.
pub trait Predictor {
    /// `(observed, predicted)` frame counts.
    fn horizon(&self) -> (usize, usize);

    /// Predictions `[B, T′, C, H, W]` for the (possibly occluded) inputs of
    /// dataset sequences `indices`.
    fn predict(&self, indices: &[usize], inputs: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<S: Scalar> Predictor for FfiNet<S> {
    fn horizon(&self) -> (usize, usize) {
        (self.config.t_in, self.config.t_out)
    }

    fn predict(&self, _indices: &[usize], inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forecast(&inputs.cast())?.cast())
    }
}

/// Reference predictor that returns the true future frames.
pub struct GroundTruth<'a> {
    pub dataset: &'a Dataset,
    pub t_in: usize,
    pub t_out: usize,
}

impl Predictor for GroundTruth<'_> {
    fn horizon(&self) -> (usize, usize) {
        (self.t_in, self.t_out)
    }

    fn predict(&self, indices: &[usize], _inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.dataset.batch(indices)?.narrow(1, self.t_in, self.t_out)
    }
}

/// Evaluation options.
#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub masks: Option<&'a MaskSet>,
    pub fill: f32,
    pub batch: usize,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { masks: None, fill: 0.0, batch: 8 }
    }
}

/// Runs `model` over every sequence, clamps predictions to `[0, 1]`, and
/// aggregates per-frame scores.
pub fn evaluate(model: &impl Predictor, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let (t_in, t_out) = model.horizon();
    let n = dataset.len();
    if dataset.sequence_len() < t_in + t_out {
        return Err(Error::dim(
            "evaluate",
            format!("sequences have {} frames, need {}", dataset.sequence_len(), t_in + t_out),
        ));
    }
    if let Some(m) = opts.masks {
        if m.masks.shape()[0] < n || m.masks.shape()[1] < t_in {
            return Err(Error::dim("evaluate", format!("mask set {:?} too small", m.masks.shape())));
        }
    }
    let mut frames: Vec<Vec<FrameScores>> = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(opts.batch.max(1)) {
        let seqs = dataset.batch(chunk)?;
        let mut inputs = seqs.narrow(1, 0, t_in)?;
        if let Some(m) = opts.masks {
            let masks = m.batch(chunk)?.narrow(1, 0, t_in)?;
            inputs = apply_masks(&inputs, &masks, opts.fill)?;
        }
        let targets = seqs.narrow(1, t_in, t_out)?;
        let pred = model.predict(chunk, &inputs)?.map(|v| v.clamp(0.0, 1.0));
        if pred.shape() != targets.shape() {
            return Err(Error::dim("evaluate", format!("prediction {:?} vs target {:?}", pred.shape(), targets.shape())));
        }
        for b in 0..chunk.len() {
            let scores = (0..t_out)
                .map(|t| {
                    let p = pred.narrow(0, b, 1)?.narrow(1, t, 1)?;
                    let g = targets.narrow(0, b, 1)?.narrow(1, t, 1)?;
                    let s = p.shape()[2..].to_vec();
                    FrameScores::of(&p.reshape(&s)?, &g.reshape(&s)?)
                })
                .collect::<Result<Vec<_>>>()?;
            frames.push(scores);
        }
    }
    let per_sequence: Vec<FrameScores> = frames.iter().map(|f| FrameScores::mean(f)).collect();
    let per_horizon: Vec<FrameScores> = (0..t_out)
        .map(|t| FrameScores::mean(&frames.iter().map(|f| f[t]).collect::<Vec<_>>()))
        .collect();
    let all: Vec<FrameScores> = frames.into_iter().flatten().collect();
    Ok(EvalReport {
        overall: FrameScores::mean(&all),
        per_horizon,
        per_sequence,
        sequences: n,
        display_scale: 1.0,
    })
}
