//! Augmentation pipeline and its seeding scheme.
//!
//! Train mode: upscale by 85/64 (keeping the crop ratio within 1% of the
//! reference 448/600 protocol), random crop back to the model input size,
//! horizontal flip with p = 0.5, gaussian blur with p = 0.5 and sigma drawn
//! from [0.1, 2]. Test mode: the same upscale, then a center crop — fully
//! deterministic.
//!
//! Every sample's randomness comes from its own generator seeded by
//! (run seed, epoch, sample index), so batch composition and scheduling
//! cannot change what any image looks like.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upscale-before-crop ratio, numerator/denominator.
pub const SCALE_NUM: usize = 85;
pub const SCALE_DEN: usize = 64;

/// Pre-crop size for a given model input size: `round(crop * 85/64)`.
pub fn scaled_size(crop: usize) -> usize {
    (crop * SCALE_NUM + SCALE_DEN / 2) / SCALE_DEN
}

/// Center-crop offset (same for both axes).
pub fn center_offset(crop: usize) -> usize {
    (scaled_size(crop) - crop) / 2
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-sample augmentation generator. The three coordinates are hashed
/// stagewise so nearby (seed, epoch, index) triples land far apart.
pub fn sample_rng(run_seed: u64, epoch: usize, sample_index: usize) -> ChaCha8Rng {
    let mut s = splitmix64(run_seed);
    s = splitmix64(s ^ epoch as u64);
    s = splitmix64(s ^ sample_index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor<f64>, oh: usize, ow: usize) -> Result<Tensor<f64>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "resize",
            shape: shape.to_vec(),
            reason: "expected [channels, height, width]".into(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = img.data();
    let mut out = vec![0.0f64; c * oh * ow];
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| data[ch * h * w + yy * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * oh * ow + y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn crop(img: &Tensor<f64>, y0: usize, x0: usize, size: usize) -> Result<Tensor<f64>> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if y0 + size > h || x0 + size > w {
        return Err(Error::invalid(
            "crop",
            format!("{size} at ({y0},{x0}) exceeds {h}x{w}"),
        ));
    }
    let data = img.data();
    let mut out = vec![0.0f64; c * size * size];
    for ch in 0..c {
        for y in 0..size {
            let src = ch * h * w + (y0 + y) * w + x0;
            let dst = ch * size * size + y * size;
            out[dst..dst + size].copy_from_slice(&data[src..src + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn hflip(img: &Tensor<f64>) -> Tensor<f64> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = img.data();
    let mut out = vec![0.0f64; data.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = data[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

/// Separable gaussian blur, kernel radius `ceil(3*sigma)`, edges clamped.
pub fn gaussian_blur(img: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("blur", format!("sigma {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = img.data();
    let mut mid = vec![0.0f64; data.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += k * data[ch * h * w + y * w + sx];
                }
                mid[ch * h * w + y * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; data.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += k * mid[ch * h * w + sy * w + x];
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Scale → random crop → flip(p=.5) → blur(p=.5, sigma in [0.1, 2]).
/// Draw order is fixed: crop y, crop x, flip coin, blur coin, sigma.
pub fn train_augment(
    img: &Tensor<f64>,
    crop_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    let scaled = scaled_size(crop_size);
    let big = resize_bilinear(img, scaled, scaled)?;
    let span = scaled - crop_size;
    let y0 = rng.gen_range(0..=span);
    let x0 = rng.gen_range(0..=span);
    let mut out = crop(&big, y0, x0, crop_size)?;
    if rng.gen_range(0.0..1.0) < 0.5 {
        out = hflip(&out);
    }
    if rng.gen_range(0.0..1.0) < 0.5 {
        let sigma = rng.gen_range(0.1..2.0);
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out)
}

/// Scale → center crop. No randomness.
pub fn test_augment(img: &Tensor<f64>, crop_size: usize) -> Result<Tensor<f64>> {
    let scaled = scaled_size(crop_size);
    let big = resize_bilinear(img, scaled, scaled)?;
    let off = center_offset(crop_size);
    crop(&big, off, off, crop_size)
}

/// Map a source-image box `[y0, x0, y1, x1]` (half-open) into test-crop
/// coordinates: scale by 85/64, subtract the center offset, clip to the
/// crop. Degenerate results clip to empty boxes.
pub fn test_frame_box(b: [f64; 4], src: usize, crop_size: usize) -> [f64; 4] {
    let scale = scaled_size(crop_size) as f64 / src as f64;
    let off = center_offset(crop_size) as f64;
    let lim = crop_size as f64;
    let y0 = (b[0] * scale - off).clamp(0.0, lim);
    let x0 = (b[1] * scale - off).clamp(0.0, lim);
    let y1 = (b[2] * scale - off).clamp(0.0, lim);
    let x1 = (b[3] * scale - off).clamp(0.0, lim);
    [y0, x0, y1.max(y0), x1.max(x0)]
}
