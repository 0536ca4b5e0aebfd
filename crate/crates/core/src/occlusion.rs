//! Free-form occlusion masks bounded by closed cubic Bezier contours.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{Container, Payload};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples drawn along each Bezier segment when flattening the contour.
const SEGMENT_SAMPLES: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub n_min: usize,
    pub n_max: usize,
    /// Radius range as fractions of `min(H, W)`.
    pub r_min: f64,
    pub r_max: f64,
    /// The center is drawn at least this fraction of the frame from each edge.
    pub margin: f64,
    pub fill: f32,
    pub area_min: f64,
    pub area_max: f64,
    pub max_attempts: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            n_min: 4,
            n_max: 10,
            r_min: 0.1,
            r_max: 0.3,
            margin: 0.1,
            fill: 0.0,
            area_min: 0.01,
            area_max: 0.35,
            max_attempts: 100,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = 3 <= self.n_min
            && self.n_min <= self.n_max
            && 0.0 < self.r_min
            && self.r_min <= self.r_max
            && self.r_max <= 0.5
            && (0.0..0.5).contains(&self.margin)
            && self.fill.is_finite()
            && 0.0 <= self.area_min
            && self.area_min <= self.area_max
            && self.area_max <= 1.0
            && self.max_attempts > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask spec {self:?}")))
        }
    }
}

type Point = (f64, f64);

/// Closed polygon approximating the smooth curve through `points` (in
/// `(x, y)` pixel coordinates), using Catmull-Rom tangents as Bezier handles.
pub fn contour(points: &[Point]) -> Vec<Point> {
    let n = points.len();
    let at = |i: isize| points[i.rem_euclid(n as isize) as usize];
    let mut poly = Vec::with_capacity(n * SEGMENT_SAMPLES);
    for i in 0..n as isize {
        let (p0, p1) = (at(i), at(i + 1));
        let (prev, next) = (at(i - 1), at(i + 2));
        let b1 = (p0.0 + (p1.0 - prev.0) / 6.0, p0.1 + (p1.1 - prev.1) / 6.0);
        let b2 = (p1.0 - (next.0 - p0.0) / 6.0, p1.1 - (next.1 - p0.1) / 6.0);
        for k in 0..SEGMENT_SAMPLES {
            let t = k as f64 / SEGMENT_SAMPLES as f64;
            let u = 1.0 - t;
            let (c0, c1, c2, c3) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
            poly.push((
                c0 * p0.0 + c1 * b1.0 + c2 * b2.0 + c3 * p1.0,
                c0 * p0.1 + c1 * b1.1 + c2 * b2.1 + c3 * p1.1,
            ));
        }
    }
    poly
}

/// Even-odd scanline fill of a closed polygon, sampling pixel centers.
pub fn fill_polygon(h: usize, w: usize, poly: &[Point]) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    let mut xs = Vec::new();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        xs.clear();
        for (i, &(x0, y0)) in poly.iter().enumerate() {
            let (x1, y1) = poly[(i + 1) % poly.len()];
            if (y0 <= yc) != (y1 <= yc) {
                xs.push(x0 + (yc - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
            for x in start..end.max(start) {
                out[y * w + x] = 1;
            }
        }
    }
    out
}

/// Rasterized interior of the smooth closed curve through `points`.
pub fn contour_mask(h: usize, w: usize, points: &[Point]) -> Vec<u8> {
    fill_polygon(h, w, &contour(points))
}

fn flood(h: usize, w: usize, grid: &[u8], value: u8, seeds: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    for s in seeds {
        if grid[s] == value && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if grid[j] == value && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    seen
}

/// One 4-connected occluded component with a background connected to the
/// frame border (no holes).
pub fn is_simple_blob(h: usize, w: usize, m: &[u8]) -> bool {
    let Some(first) = m.iter().position(|&v| v == 1) else {
        return false;
    };
    let comp = flood(h, w, m, 1, [first]);
    if comp.iter().zip(m).any(|(&c, &v)| v == 1 && !c) {
        return false;
    }
    let border = (0..w).chain((h - 1) * w..h * w).chain((0..h).map(|y| y * w)).chain((0..h).map(|y| y * w + w - 1));
    let outside = flood(h, w, m, 0, border);
    !outside.iter().zip(m).any(|(&o, &v)| v == 0 && !o)
}

fn area_ok(m: &[u8], spec: &MaskSpec) -> bool {
    let frac = m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64;
    (spec.area_min..=spec.area_max).contains(&frac)
}

/// Binary mask `[1, H, W]` (1 = occluded), regenerated until it is a single
/// simple blob within the area bounds of `spec`.
pub fn generate_mask(h: usize, w: usize, rng: &mut impl Rng, spec: &MaskSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Config("mask frame must be non-empty".into()));
    }
    let side = h.min(w) as f64;
    for _ in 0..spec.max_attempts {
        let n = rng.random_range(spec.n_min..=spec.n_max);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let cx = rng.random_range(spec.margin * w as f64..=(1.0 - spec.margin) * w as f64);
        let cy = rng.random_range(spec.margin * h as f64..=(1.0 - spec.margin) * h as f64);
        let points: Vec<Point> = angles
            .iter()
            .map(|&a| {
                let r = rng.random_range(spec.r_min..=spec.r_max) * side;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let m = contour_mask(h, w, &points);
        if area_ok(&m, spec) && is_simple_blob(h, w, &m) {
            return Tensor::new(&[1, h, w], m.into_iter().map(f32::from).collect());
        }
    }
    Err(Error::MaskGeneration { attempts: spec.max_attempts })
}

/// `frames·(1 − mask) + fill·mask`, with `[B, T, 1, H, W]` masks broadcast
/// over the channel axis of `[B, T, C, H, W]` frames.
pub fn apply_masks(frames: &Tensor<f32>, masks: &Tensor<f32>, fill: f32) -> Result<Tensor<f32>> {
    let fs = frames.shape();
    let ms = masks.shape();
    if fs.len() != 5 || ms.len() != 5 || ms[2] != 1 || fs[..2] != ms[..2] || fs[3..] != ms[3..] {
        return Err(Error::dim("apply_masks", format!("frames {fs:?} vs masks {ms:?}")));
    }
    let (c, plane) = (fs[2], fs[3] * fs[4]);
    let mut out = frames.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let m = &masks.data()[(i / c) * plane..(i / c + 1) * plane];
        for (v, &k) in chunk.iter_mut().zip(m) {
            if k != 0.0 {
                *v = *v * (1.0 - k) + fill * k;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Fresh masks on every draw.
    Train,
    /// One fixed mask per (sequence, frame), determined by the seed.
    Eval,
}

/// Source of masks for training batches or evaluation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPolicy {
    pub mode: MaskMode,
    pub seed: u64,
    pub spec: MaskSpec,
    /// Reuse one mask for every frame of a sequence.
    pub static_per_sequence: bool,
}

const TRAIN_KEY: u64 = 0x7472_6169_6e00_0000;

impl MaskPolicy {
    pub fn new(mode: MaskMode, seed: u64, spec: MaskSpec) -> Self {
        Self { mode, seed, spec, static_per_sequence: false }
    }

    fn rng_for(&self, draw: u64, item: usize, frame: usize) -> ChaCha8Rng {
        let frame = if self.static_per_sequence { 0 } else { frame };
        let (key, stream) = match self.mode {
            MaskMode::Train => (self.seed ^ TRAIN_KEY, draw),
            MaskMode::Eval => (self.seed, item as u64),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(stream);
        // Each frame owns a disjoint slice of the stream.
        let offset = match self.mode {
            MaskMode::Train => (item as u128) << 40 | (frame as u128) << 20,
            MaskMode::Eval => (frame as u128) << 24,
        };
        rng.set_word_pos(offset << 4);
        rng
    }

    /// Masks `[B, T, 1, H, W]`. In eval mode `items` are sequence indices;
    /// in train mode `draw` selects an independent stream and `items` only
    /// index positions within the batch.
    pub fn masks(&self, draw: u64, items: &[usize], frames: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
        let jobs: Vec<(usize, usize, usize)> = items
            .iter()
            .enumerate()
            .flat_map(|(b, &item)| (0..frames).map(move |t| (b, item, t)))
            .collect();
        let masks = jobs
            .par_iter()
            .map(|&(b, item, t)| {
                let id = if self.mode == MaskMode::Train { b } else { item };
                generate_mask(h, w, &mut self.rng_for(draw, id, t), &self.spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = masks.iter().collect();
        Tensor::concat(&refs, 0)?.reshape(&[items.len(), frames, 1, h, w])
    }
}

/// Binary masks `[N, T, 1, H, W]` for an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Tensor<f32>,
    pub seed: u64,
}

impl MaskSet {
    pub fn generate(n: usize, frames: usize, h: usize, w: usize, seed: u64, spec: &MaskSpec) -> Result<Self> {
        let policy = MaskPolicy::new(MaskMode::Eval, seed, spec.clone());
        let items: Vec<usize> = (0..n).collect();
        Ok(Self { masks: policy.masks(0, &items, frames, h, w)?, seed })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let parts = indices.iter().map(|&i| self.masks.narrow(0, i, 1)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let bytes = self.masks.data().iter().map(|&v| u8::from(v != 0.0)).collect();
        c.insert("masks", self.masks.shape(), Payload::U8(bytes))?;
        c.insert_text("meta/masks", &format!("seed = {}\n", self.seed))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (shape, bytes) = c.bytes("masks")?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::Format("mask record is not binary".into()));
        }
        let masks = Tensor::new(shape, bytes.iter().map(|&b| f32::from(b)).collect())?;
        let seed = match c.text("meta/masks") {
            Ok(t) => crate::config::parse_kv(&t)?
                .into_iter()
                .find(|(k, _)| k == "seed")
                .map(|(k, v)| crate::config::parse(&k, &v))
                .transpose()?
                .unwrap_or(0),
            Err(_) => 0,
        };
        Ok(Self { masks, seed })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_has_a_hole() {
        let mut m = vec![1u8; 25];
        m[12] = 0;
        assert!(!is_simple_blob(5, 5, &m));
        m[12] = 1;
        assert!(is_simple_blob(5, 5, &m));
    }

    #[test]
    fn two_blobs_are_rejected() {
        let mut m = vec![0u8; 25];
        m[0] = 1;
        m[24] = 1;
        assert!(!is_simple_blob(5, 5, &m));
        assert!(!is_simple_blob(5, 5, &[0; 25]));
    }

    #[test]
    fn impossible_spec_exhausts_retries() {
        let spec = MaskSpec { area_min: 0.9, area_max: 1.0, max_attempts: 5, ..Default::default() };
        let err = generate_mask(32, 32, &mut ChaCha8Rng::seed_from_u64(0), &spec).unwrap_err();
        assert!(matches!(err, Error::MaskGeneration { attempts: 5 }));
    }

    #[test]
    fn invalid_spec() {
        let spec = MaskSpec { n_min: 2, ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
