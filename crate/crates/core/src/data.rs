//! Bouncing-sprite sequences and datasets stored in the container format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{fmt_f64, parse, parse_kv};
use crate::container::{Container, Payload};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 12;
pub const EXTERNAL_SPRITE_SIZE: usize = 28;

/// Stroke segments of a seven-segment digit: top, upper-left, upper-right,
/// middle, lower-left, lower-right, bottom.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],
    [false, false, true, false, false, true, false],
    [true, false, true, true, true, false, true],
    [true, false, true, true, false, true, true],
    [false, true, true, true, false, true, false],
    [true, true, false, true, false, true, true],
    [true, true, false, true, true, true, true],
    [true, false, true, false, false, true, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// 12×12 binary bitmap of `digit`, drawn with two-pixel strokes.
pub fn glyph(digit: usize) -> Tensor<f32> {
    let seg = SEGMENTS[digit % 10];
    let on = |y: usize, x: usize| {
        let (top, mid, bot) = (1..3, 5..7, 9..11);
        let (left, right, span) = (2..4, 8..10, 2..10);
        let upper = 1..7;
        let lower = 5..11;
        (seg[0] && top.contains(&y) && span.contains(&x))
            || (seg[1] && upper.contains(&y) && left.contains(&x))
            || (seg[2] && upper.contains(&y) && right.contains(&x))
            || (seg[3] && mid.contains(&y) && span.contains(&x))
            || (seg[4] && lower.contains(&y) && left.contains(&x))
            || (seg[5] && lower.contains(&y) && right.contains(&x))
            || (seg[6] && bot.contains(&y) && span.contains(&x))
    };
    Tensor::from_fn(&[GLYPH_SIZE, GLYPH_SIZE], |i| if on(i / GLYPH_SIZE, i % GLYPH_SIZE) { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sprites {
    /// The ten built-in digit glyphs.
    Digits,
    /// Caller-supplied square grayscale sprites with values in `[0, 1]`.
    External(Vec<Tensor<f32>>),
}

impl Sprites {
    fn list(&self) -> Vec<Tensor<f32>> {
        match self {
            Sprites::Digits => (0..10).map(glyph).collect(),
            Sprites::External(v) => v.clone(),
        }
    }

    fn size(&self) -> (usize, usize) {
        match self {
            Sprites::Digits => (GLYPH_SIZE, GLYPH_SIZE),
            Sprites::External(v) => v.iter().fold((0, 0), |(h, w), s| (h.max(s.shape()[0]), w.max(s.shape()[1]))),
        }
    }
}

/// Loads `[N, 28, 28]` sprites from a container record named `sprites`,
/// stored either as u8 (scaled by 1/255) or as floats in `[0, 1]`.
pub fn load_sprites(path: impl AsRef<Path>) -> Result<Sprites> {
    let c = Container::read(path)?;
    let rec = c.get("sprites")?;
    if rec.shape.len() != 3 || rec.shape[1] != EXTERNAL_SPRITE_SIZE || rec.shape[2] != EXTERNAL_SPRITE_SIZE {
        return Err(Error::SequenceSpec(format!("sprites must be [N, 28, 28], got {:?}", rec.shape)));
    }
    let all: Tensor<f32> = match &rec.payload {
        Payload::U8(b) => Tensor::new(&rec.shape, b.iter().map(|&v| v as f32 / 255.0).collect())?,
        _ => c.tensor("sprites")?,
    };
    let n = rec.shape[0];
    let sprites = (0..n)
        .map(|i| {
            all.narrow(0, i, 1)?
                .reshape(&[EXTERNAL_SPRITE_SIZE, EXTERNAL_SPRITE_SIZE])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sprites::External(sprites))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_sprites: usize,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Integer start positions and velocities; otherwise positions
    /// accumulate in subpixel precision and are rounded for drawing.
    pub integer_motion: bool,
    pub sprites: Sprites,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            frames: 20,
            height: 64,
            width: 64,
            num_sprites: 2,
            speed_min: 2.0,
            speed_max: 4.0,
            integer_motion: false,
            sprites: Sprites::Digits,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let (sh, sw) = self.sprites.size();
        if self.frames == 0 {
            return Err(Error::SequenceSpec("need at least one frame".into()));
        }
        if sh > self.height || sw > self.width {
            return Err(Error::SequenceSpec(format!(
                "{sh}x{sw} sprite does not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        if let Sprites::External(v) = &self.sprites {
            if v.is_empty() || v.iter().any(|s| s.rank() != 2) {
                return Err(Error::SequenceSpec("external sprites must be a non-empty list of 2-D images".into()));
            }
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return Err(Error::SequenceSpec(format!(
                "invalid speed range [{}, {}]",
                self.speed_min, self.speed_max
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "frames = {}\nheight = {}\nwidth = {}\nnum_sprites = {}\nspeed_min = {}\nspeed_max = {}\ninteger_motion = {}\nsprites = {}\n",
            self.frames,
            self.height,
            self.width,
            self.num_sprites,
            fmt_f64(self.speed_min),
            fmt_f64(self.speed_max),
            self.integer_motion,
            match self.sprites {
                Sprites::Digits => "digits",
                Sprites::External(_) => "external",
            }
        )
    }

    /// Parses [`to_kv`](Self::to_kv) output. External sprites are not
    /// embedded; they come back as [`Sprites::Digits`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_kv(text)? {
            match k.as_str() {
                "frames" => s.frames = parse(&k, &v)?,
                "height" => s.height = parse(&k, &v)?,
                "width" => s.width = parse(&k, &v)?,
                "num_sprites" => s.num_sprites = parse(&k, &v)?,
                "speed_min" => s.speed_min = parse(&k, &v)?,
                "speed_max" => s.speed_max = parse(&k, &v)?,
                "integer_motion" => s.integer_motion = parse(&k, &v)?,
                _ => {}
            }
        }
        Ok(s)
    }
}

/// Position and velocity of one sprite along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub pos: f64,
    pub vel: f64,
    /// Largest admissible position (canvas extent minus sprite extent).
    pub limit: f64,
}

impl Axis {
    /// Advances one frame, reflecting elastically off `0` and `limit`.
    pub fn step(&mut self) {
        if self.limit <= 0.0 {
            self.pos = 0.0;
            return;
        }
        self.pos += self.vel;
        loop {
            if self.pos < 0.0 {
                self.pos = -self.pos;
                self.vel = -self.vel;
            } else if self.pos > self.limit {
                self.pos = 2.0 * self.limit - self.pos;
                self.vel = -self.vel;
            } else {
                break;
            }
        }
    }
}

/// Per-axis trajectories of every sprite: `[sprite][frame] -> (y, x)`.
pub fn trajectories(spec: &SequenceSpec, rng: &mut impl Rng) -> Vec<(usize, Vec<(f64, f64)>)> {
    let sprites = spec.sprites.list();
    (0..spec.num_sprites)
        .map(|_| {
            let id = rng.random_range(0..sprites.len());
            let (sh, sw) = (sprites[id].shape()[0], sprites[id].shape()[1]);
            let (ly, lx) = ((spec.height - sh) as f64, (spec.width - sw) as f64);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = if spec.speed_max > spec.speed_min {
                rng.random_range(spec.speed_min..=spec.speed_max)
            } else {
                spec.speed_min
            };
            let (mut vy, mut vx) = (speed * theta.sin(), speed * theta.cos());
            let (mut py, mut px) = (rng.random_range(0.0..=ly), rng.random_range(0.0..=lx));
            if spec.integer_motion {
                (vy, vx, py, px) = (vy.round(), vx.round(), py.round(), px.round());
            }
            let mut ay = Axis { pos: py, vel: vy, limit: ly };
            let mut ax = Axis { pos: px, vel: vx, limit: lx };
            let mut path = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                path.push((ay.pos, ax.pos));
                ay.step();
                ax.step();
            }
            (id, path)
        })
        .collect()
}

/// Draws sprites at explicit top-left positions, compositing by maximum.
pub fn render(canvas: (usize, usize), sprites: &[(&Tensor<f32>, usize, usize)]) -> Tensor<f32> {
    let (h, w) = canvas;
    let mut out: Tensor<f32> = Tensor::zeros(&[1, h, w]);
    let dst = out.data_mut();
    for &(s, top, left) in sprites {
        let (sh, sw) = (s.shape()[0], s.shape()[1]);
        for y in 0..sh.min(h.saturating_sub(top)) {
            for x in 0..sw.min(w.saturating_sub(left)) {
                let d = &mut dst[(top + y) * w + left + x];
                *d = d.max(s.data()[y * sw + x].clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// One sequence `[frames, 1, H, W]` with values in `[0, 1]`.
pub fn generate_sequence(spec: &SequenceSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sequence_from_rng(spec, &mut rng)
}

fn sequence_from_rng(spec: &SequenceSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let sprites = spec.sprites.list();
    let paths = trajectories(spec, rng);
    let frames: Vec<Tensor<f32>> = (0..spec.frames)
        .map(|t| {
            let placed: Vec<_> = paths
                .iter()
                .map(|(id, p)| (&sprites[*id], p[t].0.round() as usize, p[t].1.round() as usize))
                .collect();
            render((spec.height, spec.width), &placed)
        })
        .collect();
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    Tensor::concat(&refs, 0)?.reshape(&[spec.frames, 1, spec.height, spec.width])
}

/// Generated sequences plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, frames, C, H, W]`.
    pub frames: Tensor<f32>,
    pub spec: SequenceSpec,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sequence_len(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Gathers sequences `indices` into a batch `[B, frames, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let parts = indices
            .iter()
            .map(|&i| self.frames.narrow(0, i, 1))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert_tensor("frames", &self.frames)?;
        c.insert_text("meta/sequence", &format!("{}seed = {}\n", self.spec.to_kv(), self.seed))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let frames: Tensor<f32> = c.tensor("frames")?;
        if frames.rank() != 5 {
            return Err(Error::Format(format!("frames must be rank 5, got {:?}", frames.shape())));
        }
        let (spec, seed) = match c.text("meta/sequence") {
            Ok(text) => {
                let seed = parse_kv(&text)?
                    .into_iter()
                    .find(|(k, _)| k == "seed")
                    .map(|(k, v)| parse(&k, &v))
                    .transpose()?
                    .unwrap_or(0);
                (SequenceSpec::from_kv(&text)?, seed)
            }
            Err(Error::MissingRecord(_)) => (SequenceSpec::default(), 0),
            Err(e) => return Err(e),
        };
        Ok(Self { frames, spec, seed })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// `n` sequences, each drawn from its own stream of a generator seeded by
/// `split_seed`.
pub fn build_dataset(n: usize, spec: &SequenceSpec, split_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::SequenceSpec("dataset needs at least one sequence".into()));
    }
    let seqs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
            rng.set_stream(i as u64);
            sequence_from_rng(spec, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<f32>> = seqs.iter().collect();
    let frames = Tensor::concat(&refs, 0)?.reshape(&[n, spec.frames, 1, spec.height, spec.width])?;
    Ok(Dataset { frames, spec: spec.clone(), seed: split_seed })
}
