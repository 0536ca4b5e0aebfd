//! Joint loss, Adam, the one-cycle schedule, the training loop, and
//! checkpoints.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{fmt_f64, parse, parse_kv, ModelConfig};
use crate::container::{Container, Payload, ToPayload};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::model::{forward, init_params, layout, FfiNet, ModelParams};
use crate::occlusion::{apply_masks, MaskMode, MaskPolicy, MaskSet, MaskSpec};
use crate::params::{bind, Tree};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub steps: usize,
    pub pct_start: f64,
    pub div_start: f64,
    pub div_final: f64,
    pub seed: u64,
    /// Apply fresh training masks to the observed frames.
    pub occlude: bool,
    pub mask: MaskSpec,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 16,
            steps: 1000,
            pct_start: 0.3,
            div_start: 25.0,
            div_final: 1e4,
            seed: 0,
            occlude: true,
            mask: MaskSpec::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_lr > 0.0
            && self.max_lr.is_finite()
            && self.pct_start > 0.0
            && self.pct_start < 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch > 0
            && self.div_start >= 1.0
            && self.div_final >= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        self.mask.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "max_lr" | "lr" => self.max_lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "pct_start" => self.pct_start = parse(key, value)?,
            "div_start" => self.div_start = parse(key, value)?,
            "div_final" => self.div_final = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            "occlude" => self.occlude = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "mask_n_min" => self.mask.n_min = parse(key, value)?,
            "mask_n_max" => self.mask.n_max = parse(key, value)?,
            "mask_r_min" => self.mask.r_min = parse(key, value)?,
            "mask_r_max" => self.mask.r_max = parse(key, value)?,
            "mask_margin" => self.mask.margin = parse(key, value)?,
            "mask_fill" => self.mask.fill = parse(key, value)?,
            "mask_area_min" => self.mask.area_min = parse(key, value)?,
            "mask_area_max" => self.mask.area_max = parse(key, value)?,
            "mask_max_attempts" => self.mask.max_attempts = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let m = &self.mask;
        let pairs = [
            ("max_lr", fmt_f64(self.max_lr)),
            ("beta1", fmt_f64(self.beta1)),
            ("beta2", fmt_f64(self.beta2)),
            ("eps", fmt_f64(self.eps)),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("pct_start", fmt_f64(self.pct_start)),
            ("div_start", fmt_f64(self.div_start)),
            ("div_final", fmt_f64(self.div_final)),
            ("train_seed", self.seed.to_string()),
            ("occlude", self.occlude.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("mask_n_min", m.n_min.to_string()),
            ("mask_n_max", m.n_max.to_string()),
            ("mask_r_min", fmt_f64(m.r_min)),
            ("mask_r_max", fmt_f64(m.r_max)),
            ("mask_margin", fmt_f64(m.margin)),
            ("mask_fill", format!("{:?}", m.fill)),
            ("mask_area_min", fmt_f64(m.area_min)),
            ("mask_area_max", fmt_f64(m.area_max)),
            ("mask_max_attempts", m.max_attempts.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Mean squared error between predicted and ground-truth future frames.
pub fn prediction_loss<S: Scalar>(tape: &mut Tape<S>, pred: &Var<S>, target: &Var<S>) -> Result<Var<S>> {
    tape.mse(pred, target)
}

/// Mean squared error between recovered frames and the clean inputs.
pub fn recovery_loss<S: Scalar>(tape: &mut Tape<S>, recovered: &Var<S>, clean: &Var<S>) -> Result<Var<S>> {
    tape.mse(recovered, clean)
}

/// `l_pre + λ·l_rec`; with `λ = 0` the prediction loss is returned as is.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, l_pre: &Var<S>, l_rec: &Var<S>, lambda: f64) -> Result<Var<S>> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(l_pre.clone());
    }
    let weighted = tape.scale(l_rec, S::of(lambda))?;
    tape.add(l_pre, &weighted)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps }
    }
}

/// First and second moments, one tensor per parameter in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(params: &[Tensor<S>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every leaf of `params`, with gradients
/// given in the tree's canonical order.
pub fn adam_step<S: Scalar, T: Tree<Tensor<S>>>(
    params: &mut T,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    h: AdamHyper,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} optimizer slots",
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (S::of(h.beta1), S::of(h.beta2));
    let (one, eps) = (S::one(), S::of(h.eps));
    let (step, c2) = (S::of(lr / c1), S::of(c2));
    let mut i = 0;
    let mut mismatch = None;
    params.visit_mut(|name, p| {
        if i >= grads.len() {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        }
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        i += 1;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        }
        let pd = p.data_mut();
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *x = *x - step * *mi / ((*vi / c2).sqrt() + eps);
        }
    });
    match mismatch {
        Some(name) => Err(Error::Contract(format!("shape mismatch in optimizer update of {name}"))),
        None if i != grads.len() => Err(Error::Contract(format!("{} gradients for {i} parameters", grads.len()))),
        None => Ok(()),
    }
}

/// One-cycle learning rate: cosine warmup from `max_lr / div_start` to
/// `max_lr` over the first `pct_start` of the run, then cosine decay to
/// `max_lr / div_final` at `step = total_steps`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, pct_start: f64, div_start: f64, div_final: f64) -> f64 {
    let anneal = |from: f64, to: f64, frac: f64| to + (from - to) / 2.0 * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos());
    let initial = max_lr / div_start;
    let last = max_lr / div_final;
    let warm = pct_start * total_steps as f64;
    let s = step as f64;
    if s <= warm {
        if warm == 0.0 {
            return max_lr;
        }
        anneal(initial, max_lr, s / warm)
    } else {
        anneal(max_lr, last, (s - warm) / (total_steps as f64 - warm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss_pre: f64,
    pub loss_rec: f64,
    pub loss_total: f64,
}

pub const LOG_HEADER: &str = "step,lr,loss_pre,loss_rec,loss_total";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.loss_pre, self.loss_rec, self.loss_total)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<Tensor<S>>,
    pub adam: AdamState<S>,
    /// Completed optimizer steps.
    pub step: usize,
}

const RNG_ALGORITHM: &str = "chacha8";

impl<S: Scalar + ToPayload> Checkpoint<S> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let names = self.params.names();
        let values = self.params.to_vec();
        for (name, p) in names.iter().zip(&values) {
            c.insert_tensor(&format!("param/{name}"), p)?;
        }
        for (name, m) in names.iter().zip(&self.adam.m) {
            c.insert_tensor(&format!("adam_m/{name}"), m)?;
        }
        for (name, v) in names.iter().zip(&self.adam.v) {
            c.insert_tensor(&format!("adam_v/{name}"), v)?;
        }
        c.insert_text("meta/config", &format!("{}{}", self.model.to_kv(), self.train.to_kv()))?;
        let mut step = (self.step as u64).to_le_bytes().to_vec();
        step.extend_from_slice(&self.adam.t.to_le_bytes());
        c.insert("meta/step", &[16], Payload::U8(step))?;
        c.insert_text(
            "meta/rng",
            &format!(
                "algorithm = {RNG_ALGORITHM}\nseed = {}\nnext_stream = {}\nmodel_seed = {}\n",
                self.train.seed, self.step, self.model.seed
            ),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let text = c.text("meta/config")?;
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        for (k, v) in parse_kv(&text)? {
            if !model.set(&k, &v)? && !train.set(&k, &v)? {
                return Err(Error::Format(format!("unknown checkpoint config key {k:?}")));
            }
        }
        let template = layout(&model)?;
        let names = template.names();
        let load = |prefix: &str| -> Result<Vec<Tensor<S>>> {
            names.iter().map(|n| c.tensor::<S>(&format!("{prefix}/{n}"))).collect()
        };
        let values = load("param")?;
        let mut shapes_ok = true;
        for (spec, v) in template.to_vec().iter().zip(&values) {
            shapes_ok &= spec.shape == v.shape();
        }
        if !shapes_ok {
            return Err(Error::Format("checkpoint parameter shapes do not match its config".into()));
        }
        let params = template.rebuild(&values);
        let (_, step_bytes) = c.bytes("meta/step")?;
        if step_bytes.len() != 16 {
            return Err(Error::Format("meta/step must hold two u64 values".into()));
        }
        let step = u64::from_le_bytes(step_bytes[..8].try_into().unwrap()) as usize;
        let t = u64::from_le_bytes(step_bytes[8..].try_into().unwrap());
        let rng = c.text("meta/rng")?;
        if !parse_kv(&rng)?.iter().any(|(k, v)| k == "algorithm" && v == RNG_ALGORITHM) {
            return Err(Error::Format("unsupported generator in meta/rng".into()));
        }
        let adam = AdamState { m: load("adam_m")?, v: load("adam_v")?, t };
        Ok(Self { model, train, params, adam, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn net(&self) -> FfiNet<S> {
        FfiNet { config: self.model.clone(), params: self.params.clone() }
    }
}

/// A batch drawn for one training step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub indices: Vec<usize>,
    /// Clean observed frames `[B, T, C, H, W]`.
    pub clean: Tensor<f32>,
    /// Observed frames after occlusion (equal to `clean` when disabled).
    pub observed: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Batch and masks of step `step`, derived only from `(seed, step)` so a
/// resumed run draws exactly what an uninterrupted run would.
pub fn draw_batch(data: &Dataset, model: &ModelConfig, train: &TrainConfig, step: usize) -> Result<StepBatch> {
    let (t_in, t_out) = (model.t_in, model.t_out);
    let n = data.len();
    let span = data.sequence_len();
    if span < t_in + t_out {
        return Err(Error::dim("train", format!("sequences have {span} frames, need {}", t_in + t_out)));
    }
    let fs = data.frames.shape();
    if fs[2..] != [model.channels, model.height, model.width] {
        return Err(Error::dim(
            "train",
            format!("dataset frames {:?} do not match model geometry", &fs[2..]),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(step as u64);
    let indices: Vec<usize> = if train.batch <= n {
        sample(&mut rng, n, train.batch).into_vec()
    } else {
        (0..train.batch).map(|_| rng.random_range(0..n)).collect()
    };
    let slack = span - (t_in + t_out);
    let parts = indices
        .iter()
        .map(|&i| {
            let start = if slack > 0 { rng.random_range(0..=slack) } else { 0 };
            data.frames.narrow(0, i, 1)?.narrow(1, start, t_in + t_out)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let seqs = Tensor::concat(&refs, 0)?;
    let clean = seqs.narrow(1, 0, t_in)?;
    let target = seqs.narrow(1, t_in, t_out)?;
    let observed = if train.occlude {
        let policy = MaskPolicy::new(MaskMode::Train, train.seed, train.mask.clone());
        let masks = policy.masks(step as u64, &indices, t_in, model.height, model.width)?;
        apply_masks(&clean, &masks, train.mask.fill)?
    } else {
        clean.clone()
    };
    Ok(StepBatch { indices, clean, observed, target })
}

/// Losses and gradients (canonical order) of one batch.
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<Tensor<S>>,
    cfg: &ModelConfig,
    batch: &StepBatch,
) -> Result<(f64, f64, f64, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let pv = bind(params, &mut tape);
    let x = tape.constant(batch.observed.cast());
    let with_recovery = cfg.lambda > 0.0;
    let out = forward(&mut tape, &x, &pv, cfg, with_recovery)?;
    let target = tape.constant(batch.target.cast());
    let l_pre = prediction_loss(&mut tape, &out.predicted, &target)?;
    let (l_rec, total) = match &out.recovered {
        Some(rec) => {
            let clean = tape.constant(batch.clean.cast());
            let l_rec = recovery_loss(&mut tape, rec, &clean)?;
            let total = total_loss(&mut tape, &l_pre, &l_rec, cfg.lambda)?;
            (l_rec.value().item()?.as_f64(), total)
        }
        None => (f64::NAN, l_pre.clone()),
    };
    let lp = l_pre.value().item()?.as_f64();
    let lt = total.value().item()?.as_f64();
    let grads = tape.backward(&total)?;
    let g: Vec<Tensor<S>> = pv.to_vec().iter().map(|v| grads.get_or_zeros(v)).collect();
    Ok((lp, l_rec, lt, g))
}

/// Training state that advances one optimizer step at a time.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub ckpt: Checkpoint<S>,
}

impl<S: Scalar + ToPayload> Trainer<S> {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = init_params(&model, model.seed)?;
        let adam = AdamState::zeros_like(&params.to_vec());
        Ok(Self { ckpt: Checkpoint { model, train, params, adam, step: 0 } })
    }

    pub fn resume(ckpt: Checkpoint<S>) -> Result<Self> {
        ckpt.model.validate()?;
        ckpt.train.validate()?;
        Ok(Self { ckpt })
    }

    pub fn step(&self) -> usize {
        self.ckpt.step
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.ckpt.train;
        onecycle_lr(step, t.steps, t.max_lr, t.pct_start, t.div_start, t.div_final)
    }

    /// Runs one optimizer step and returns its log row.
    pub fn advance(&mut self, data: &Dataset) -> Result<LogRow> {
        let s = self.ckpt.step;
        let batch = draw_batch(data, &self.ckpt.model, &self.ckpt.train, s)?;
        let (loss_pre, loss_rec, loss_total, grads) = loss_and_grads(&self.ckpt.params, &self.ckpt.model, &batch)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged { step: s + 1, detail: format!("non-finite value in {op}") },
                e => e,
            })?;
        if !loss_total.is_finite() {
            return Err(Error::Diverged { step: s + 1, detail: format!("loss {loss_total} (pre {loss_pre}, rec {loss_rec})") });
        }
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            let name = &self.ckpt.params.names()[bad];
            return Err(Error::Diverged { step: s + 1, detail: format!("non-finite gradient in {name}") });
        }
        let lr = self.lr(s);
        let hyper = AdamHyper::from(&self.ckpt.train);
        adam_step(&mut self.ckpt.params, &grads, &mut self.ckpt.adam, lr, hyper)?;
        self.ckpt.step += 1;
        Ok(LogRow { step: s + 1, lr, loss_pre, loss_rec, loss_total })
    }

    /// Advances until the configured step count, calling `on_row` after each
    /// step and saving to `ckpt_path` at the configured cadence and at the end.
    pub fn run(
        &mut self,
        data: &Dataset,
        ckpt_path: Option<&Path>,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        let every = self.ckpt.train.checkpoint_every;
        while self.ckpt.step < self.ckpt.train.steps {
            let row = self.advance(data)?;
            on_row(&row);
            rows.push(row);
            if let Some(p) = ckpt_path {
                if every > 0 && self.ckpt.step % every == 0 {
                    self.ckpt.save(p)?;
                }
            }
        }
        if let Some(p) = ckpt_path {
            self.ckpt.save(p)?;
        }
        Ok(rows)
    }
}

/// Trains from scratch and returns the final state with its log.
pub fn train<S: Scalar + ToPayload>(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
) -> Result<(Checkpoint<S>, Vec<LogRow>)> {
    let mut t = Trainer::new(model.clone(), train.clone())?;
    let rows = t.run(data, None, |_| {})?;
    Ok((t.ckpt, rows))
}

/// One λ setting of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_loss_pre: f64,
    pub final_loss_rec: f64,
    pub report: EvalReport,
}

pub const SWEEP_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];

/// Trains one model per λ with otherwise identical settings and evaluates
/// each on the same data and masks.
pub fn lambda_sweep(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    masks: Option<&MaskSet>,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = ModelConfig { lambda, ..model.clone() };
            let (ckpt, rows) = train::<f32>(&cfg, train_cfg, train_data)?;
            let last = rows.last().copied();
            let opts = EvalOptions { masks, fill: train_cfg.mask.fill, ..Default::default() };
            let report = evaluate(&ckpt.net(), eval_data, &opts)?;
            Ok(SweepRow {
                lambda,
                final_loss_pre: last.map_or(f64::NAN, |r| r.loss_pre),
                final_loss_rec: last.map_or(f64::NAN, |r| r.loss_rec),
                report,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,loss_pre,loss_rec,mse,mae,ssim,psnr\n");
    for r in rows {
        let o = &r.report.overall;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.lambda, r.final_loss_pre, r.final_loss_rec, o.mse, o.mae, o.ssim, o.psnr
        );
    }
    s
}

/// Default checkpoint file name inside a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.ffin")
}
