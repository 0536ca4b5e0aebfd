//! Model hyperparameters, named presets, and the flat `key = value` format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spectral::{BlockSettings, INCEPTION_GROUPS};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input frame count `T`.
    pub t_in: usize,
    /// Predicted frame count `T′`.
    pub t_out: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder width `C̃`.
    pub enc_width: usize,
    /// Translator width `Ĉ`.
    pub hidden: usize,
    /// Encoder and decoder depth `Ñ`.
    pub enc_depth: usize,
    /// Translator depth `N̂`.
    pub trans_depth: usize,
    /// Fourier Units per inception block `M`.
    pub fourier_units: usize,
    /// Recovery-loss weight `λ`.
    pub lambda: f64,
    pub leaky_slope: f64,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub seed: u64,
    pub use_inpainter: bool,
}

pub const PRESETS: [&str; 10] = [
    "mmnist",
    "taxibj",
    "human36m",
    "kitti-caltech",
    "kth",
    "mmnist-tiny",
    "taxibj-tiny",
    "human36m-tiny",
    "kitti-caltech-tiny",
    "kth-tiny",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_in: 10,
            t_out: 10,
            channels: 1,
            height: 64,
            width: 64,
            enc_width: 64,
            hidden: 512,
            enc_depth: 4,
            trans_depth: 6,
            fourier_units: 3,
            lambda: 0.5,
            leaky_slope: 0.2,
            gn_groups: 2,
            gn_eps: 1e-5,
            seed: 0,
            use_inpainter: true,
        }
    }
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn row(
        (height, width, channels): (usize, usize, usize),
        (t_in, t_out): (usize, usize),
        enc_width: usize,
        hidden: usize,
        enc_depth: usize,
        trans_depth: usize,
        fourier_units: usize,
        lambda: f64,
    ) -> Self {
        Self {
            t_in,
            t_out,
            channels,
            height,
            width,
            enc_width,
            hidden,
            enc_depth,
            trans_depth,
            fourier_units,
            lambda,
            ..Self::default()
        }
    }

    /// Full-scale experimental settings, plus `-tiny` variants at 32 pixels
    /// that keep each row's frame layout and loss weight.
    pub fn preset(name: &str) -> Result<Self> {
        let full = match name.trim_end_matches("-tiny") {
            "mmnist" => Self::row((64, 64, 1), (10, 10), 64, 512, 4, 6, 3, 0.5),
            "taxibj" => Self::row((32, 32, 2), (4, 4), 64, 256, 3, 4, 2, 1.0),
            "human36m" => Self::row((128, 128, 3), (4, 4), 64, 64, 1, 10, 2, 1.0),
            "kitti-caltech" => Self::row((128, 160, 3), (10, 1), 64, 128, 1, 6, 2, 1.0),
            "kth" => Self::row((128, 128, 1), (10, 20), 32, 128, 3, 8, 1, 1.0),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        if !name.ends_with("-tiny") {
            return Ok(full);
        }
        let (t_in, t_out) = match name {
            "mmnist-tiny" => (4, 4),
            _ => (full.t_in, full.t_out),
        };
        Ok(Self {
            t_in,
            t_out,
            height: 32,
            width: if full.width > full.height { 40 } else { 32 },
            enc_width: 16,
            hidden: 64,
            enc_depth: full.enc_depth.min(2),
            trans_depth: 2,
            fourier_units: 1,
            ..full
        })
    }

    /// Number of stride-2 stages, `⌊Ñ/2⌋`.
    pub fn downsamples(&self) -> usize {
        self.enc_depth / 2
    }

    /// Latent spatial size `(H′, W′)`.
    pub fn latent_size(&self) -> (usize, usize) {
        let f = 1 << self.downsamples();
        (self.height / f, self.width / f)
    }

    pub fn block_settings(&self) -> BlockSettings {
        BlockSettings {
            gn_groups: self.gn_groups,
            gn_eps: self.gn_eps,
            leaky_slope: self.leaky_slope,
            freq_norm_act: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("enc_width", self.enc_width),
            ("hidden", self.hidden),
            ("enc_depth", self.enc_depth),
            ("trans_depth", self.trans_depth),
            ("fourier_units", self.fourier_units),
            ("gn_groups", self.gn_groups),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{k} must be positive"));
        }
        let f = 1 << self.downsamples();
        if self.height % f != 0 || self.width % f != 0 {
            return fail(format!(
                "{}x{} frames are not divisible by {f} for depth {}",
                self.height, self.width, self.enc_depth
            ));
        }
        if self.hidden % 2 != 0 || (self.hidden / 2) % INCEPTION_GROUPS != 0 {
            return fail(format!(
                "hidden width {} must halve to a multiple of {INCEPTION_GROUPS}",
                self.hidden
            ));
        }
        if (self.t_in * self.enc_width) % 2 != 0 {
            return fail(format!(
                "inpainter needs an even channel count, got {}",
                self.t_in * self.enc_width
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.leaky_slope.is_finite() && self.gn_eps > 0.0) {
            return fail("leaky_slope must be finite and gn_eps positive".into());
        }
        Ok(())
    }

    /// Sets one field from its text form. Returns `false` for keys this
    /// type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "t_in" => self.t_in = parse(key, value)?,
            "t_out" => self.t_out = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "enc_width" => self.enc_width = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "enc_depth" => self.enc_depth = parse(key, value)?,
            "trans_depth" => self.trans_depth = parse(key, value)?,
            "fourier_units" => self.fourier_units = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "gn_groups" => self.gn_groups = parse(key, value)?,
            "gn_eps" => self.gn_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "use_inpainter" => self.use_inpainter = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let pairs: [(&str, String); 16] = [
            ("t_in", self.t_in.to_string()),
            ("t_out", self.t_out.to_string()),
            ("channels", self.channels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("enc_width", self.enc_width.to_string()),
            ("hidden", self.hidden.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("trans_depth", self.trans_depth.to_string()),
            ("fourier_units", self.fourier_units.to_string()),
            ("lambda", fmt_f64(self.lambda)),
            ("leaky_slope", fmt_f64(self.leaky_slope)),
            ("gn_groups", self.gn_groups.to_string()),
            ("gn_eps", fmt_f64(self.gn_eps)),
            ("seed", self.seed.to_string()),
            ("use_inpainter", self.use_inpainter.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a complete `key = value` document, rejecting unknown keys.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        Ok(cfg)
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

/// Splits `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
