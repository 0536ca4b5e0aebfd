//! Resolution of flags, config files and presets into one run description,
//! and the manifest written next to every run's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ffinet::config::{fmt_f64, parse, parse_kv};
use ffinet::data::SequenceSpec;
use ffinet::train::TrainConfig;
use ffinet::ModelConfig;

pub const DEFAULT_PRESET: &str = "mmnist-tiny";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    /// 32-bit floats.
    Std,
    /// 64-bit floats.
    High,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::Std => "std",
            Precision::High => "high",
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Model preset (mmnist, taxibj, human36m, kitti-caltech, kth, or a `-tiny` variant).
    #[arg(long)]
    pub preset: Option<String>,
    /// Flat `key = value` file; a run manifest also works here.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for model init, training, data and masks.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Recovery loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Occlude observed frames during training.
    #[arg(long, value_enum)]
    pub occlude: Option<Switch>,
    /// Bypass the inpainter.
    #[arg(long)]
    pub no_inpainter: bool,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Record that bit-reproducible execution was requested. Every code
    /// path is deterministic regardless.
    #[arg(long)]
    pub deterministic: bool,
    /// Number of sequences (gen-data) or mask sequences (gen-masks).
    #[arg(long)]
    pub count: Option<usize>,
}

/// Fully resolved description of one invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub command: String,
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_sprites: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub integer_motion: bool,
    pub count: usize,
    pub data_seed: u64,
    pub mask_seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub data: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: PathBuf,
    pub artifacts: Vec<(String, PathBuf)>,
}

impl Settings {
    /// Preset, then config file, then flags; later sources win.
    pub fn resolve(command: &str, flags: &Common) -> Result<Self> {
        let file = match &flags.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_kv(&text)?
            }
            None => Vec::new(),
        };
        let preset = flags
            .preset
            .clone()
            .or_else(|| file.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone()))
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let model = ModelConfig::preset(&preset)?;
        let spec = SequenceSpec::default();
        let mut s = Settings {
            command: command.to_string(),
            preset,
            train: TrainConfig { seed: model.seed, ..TrainConfig::default() },
            num_sprites: spec.num_sprites,
            speed_min: spec.speed_min,
            speed_max: spec.speed_max,
            integer_motion: spec.integer_motion,
            count: 256,
            data_seed: model.seed,
            mask_seed: model.seed,
            model,
            precision: Precision::Std,
            deterministic: false,
            data: None,
            masks: None,
            ckpt: None,
            out: PathBuf::from("runs").join(command),
            artifacts: Vec::new(),
        };
        for (k, v) in &file {
            if !s.set(k, v)? {
                bail!("unknown config key {k:?}");
            }
        }
        s.apply_flags(flags);
        s.model.validate()?;
        s.train.validate()?;
        s.sequence_spec().validate()?;
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(true);
        }
        match key {
            "num_sprites" => self.num_sprites = parse(key, value)?,
            "speed_min" => self.speed_min = parse(key, value)?,
            "speed_max" => self.speed_max = parse(key, value)?,
            "integer_motion" => self.integer_motion = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "mask_seed" => self.mask_seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "precision" => {
                self.precision = Precision::from_str(value, true).map_err(|e| anyhow::anyhow!("precision: {e}"))?
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "masks" => self.masks = Some(PathBuf::from(value)),
            "ckpt" => self.ckpt = Some(PathBuf::from(value)),
            // Identification and output records of an earlier run.
            "preset" | "command" | "version" | "out" => {}
            k if k.starts_with("artifact_") => {}
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn apply_flags(&mut self, f: &Common) {
        if let Some(seed) = f.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.data_seed = seed;
            self.mask_seed = seed;
        }
        if let Some(v) = f.steps {
            self.train.steps = v;
        }
        if let Some(v) = f.batch {
            self.train.batch = v;
        }
        if let Some(v) = f.lambda {
            self.model.lambda = v;
        }
        if let Some(v) = f.occlude {
            self.train.occlude = v == Switch::On;
        }
        if f.no_inpainter {
            self.model.use_inpainter = false;
        }
        if let Some(v) = f.count {
            self.count = v;
        }
        if let Some(v) = f.precision {
            self.precision = v;
        }
        self.deterministic |= f.deterministic;
        for (slot, flag) in [(&mut self.data, &f.data), (&mut self.masks, &f.masks), (&mut self.ckpt, &f.ckpt)] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(out) = &f.out {
            self.out = out.clone();
        }
    }

    pub fn sequence_spec(&self) -> SequenceSpec {
        SequenceSpec {
            frames: self.model.t_in + self.model.t_out,
            height: self.model.height,
            width: self.model.width,
            num_sprites: self.num_sprites,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            integer_motion: self.integer_motion,
            ..SequenceSpec::default()
        }
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        match path {
            Some(p) if p.exists() => Ok(p),
            Some(p) => bail!("{flag} {} does not exist", p.display()),
            None => bail!("`{}` needs {flag}", self.command),
        }
    }

    /// Path of an output artifact inside the run directory. Refuses to
    /// overwrite any input file.
    pub fn output(&mut self, key: &str, file: &str) -> Result<PathBuf> {
        let path = self.out.join(file);
        for input in [&self.data, &self.masks, &self.ckpt].into_iter().flatten() {
            if same_file(input, &path) {
                bail!("output {} would overwrite input {}", path.display(), input.display());
            }
        }
        self.artifacts.push((key.to_string(), path.clone()));
        Ok(path)
    }

    pub fn manifest(&self) -> String {
        let mut s = String::from("# ffinet run manifest\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("command", self.command.clone());
        kv("version", env!("CARGO_PKG_VERSION").to_string());
        kv("preset", self.preset.clone());
        kv("precision", self.precision.name().to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("out", self.out.display().to_string());
        for (k, p) in [("data", &self.data), ("masks", &self.masks), ("ckpt", &self.ckpt)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("data_seed", self.data_seed.to_string());
        kv("mask_seed", self.mask_seed.to_string());
        kv("count", self.count.to_string());
        kv("num_sprites", self.num_sprites.to_string());
        kv("speed_min", fmt_f64(self.speed_min));
        kv("speed_max", fmt_f64(self.speed_max));
        kv("integer_motion", self.integer_motion.to_string());
        for (k, p) in &self.artifacts {
            kv(&format!("artifact_{k}"), p.display().to_string());
        }
        s.push_str("# model\n");
        s.push_str(&self.model.to_kv());
        s.push_str("# training\n");
        s.push_str(&self.train.to_kv());
        s
    }

    pub fn write_manifest(&self) -> Result<PathBuf> {
        let path = self.out.join("manifest.txt");
        std::fs::write(&path, self.manifest()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}
