//! Netpbm export of frame sequences as horizontal strips.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use ffinet::tensor::Tensor;

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[T, C, H, W]` frames side by side. Three channels become a
/// colour pixmap (`.ppm`); any other count becomes a graymap (`.pgm`) with
/// channels stacked vertically. Returns the path written, with the
/// extension chosen here.
pub fn write_strip(path: &Path, frames: &Tensor<f32>) -> Result<PathBuf> {
    let s = frames.shape();
    if s.len() != 4 {
        bail!("expected [T, C, H, W] frames, got {s:?}");
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = frames.data();
    let at = |f: usize, ch: usize, y: usize, x: usize| d[((f * c + ch) * h + y) * w + x];
    let (magic, rows, ext) = if c == 3 { ("P6", h, "ppm") } else { ("P5", h * c, "pgm") };
    let mut px = Vec::with_capacity(rows * t * w * if c == 3 { 3 } else { 1 });
    for row in 0..rows {
        for f in 0..t {
            for x in 0..w {
                if c == 3 {
                    px.extend((0..3).map(|ch| byte(at(f, ch, row, x))));
                } else {
                    px.push(byte(at(f, row / h, row % h, x)));
                }
            }
        }
    }
    let path = path.with_extension(ext);
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write!(file, "{magic}\n{} {rows}\n255\n", t * w)?;
    file.write_all(&px)?;
    file.flush()?;
    Ok(path)
}
