//! Image file plumbing: binary PPM/PGM writers for generated data and
//! masks, and a decoder that yields planar float tensors.
//!
//! In-memory convention everywhere: `[3, H, W]`, channel-planar, values in
//! `[0, 1]`. Files are 8-bit, so a write→read round trip quantizes to
//! multiples of 1/255.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write `[3, H, W]` values in `[0, 1]` as binary PPM (P6, maxval 255).
/// Out-of-range values are clipped rather than wrapped.
pub fn save_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape {
            op: "save_ppm",
            shape: shape.to_vec(),
            reason: "expected [3, height, width]".into(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    let plane = h * w;
    let mut row = Vec::with_capacity(3 * w);
    for p in 0..plane {
        for c in 0..3 {
            row.push(quantize(data[c * plane + p]));
        }
        if row.len() == 3 * w {
            out.write_all(&row)?;
            row.clear();
        }
    }
    out.flush()?;
    Ok(())
}

/// Write `[H, W]` bytes as binary PGM (P5, maxval 255).
pub fn save_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::invalid(
            "save_pgm",
            format!("{} pixels for {height}x{width}", pixels.len()),
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Decode a PNG or PPM file to `[3, H, W]` in `[0, 1]`. Grayscale and
/// alpha inputs are converted to plain RGB first.
pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f64; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
