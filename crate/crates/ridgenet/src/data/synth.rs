//! Synthetic ridge-texture generator.
//!
//! Each subject gets a smooth random orientation field; white noise filtered
//! by Gabor kernels oriented along that field and softly binarized yields a
//! ridge-like base pattern at a per-subject ridge frequency. Each image of
//! the subject is the base pattern under a small rotation/translation jitter
//! plus additive Gaussian noise, written as binary PGM files in the
//! directory-per-subject ingest layout.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

use super::pnm::{self, GrayImage};
use super::warp::round_u8;

/// Hard caps on the intra-class jitter.
pub const MAX_JITTER_ROTATION_DEG: f64 = 3.0;
pub const MAX_JITTER_TRANSLATION_PX: f64 = 2.0;
pub const MAX_JITTER_NOISE_SIGMA: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub num_subjects: usize,
    pub images_per_subject: usize,
    pub image_size: usize,
    /// Ridge frequency range in cycles per pixel.
    pub ridge_freq_range: (f64, f64),
    /// Base seed; each subject derives a distinct orientation-field seed.
    pub seed: u64,
    pub jitter_rotation_deg: f64,
    pub jitter_translation_px: f64,
    pub jitter_noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_subjects: 20,
            images_per_subject: 10,
            image_size: 64,
            ridge_freq_range: (0.07, 0.13),
            seed: 0,
            jitter_rotation_deg: MAX_JITTER_ROTATION_DEG,
            jitter_translation_px: MAX_JITTER_TRANSLATION_PX,
            jitter_noise_sigma: 6.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 || self.images_per_subject == 0 {
            return Err(Error::invalid(
                "synthetic generation needs at least one subject and one image".to_string(),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::invalid(format!(
                "synthetic image size {} is below the minimum of 16",
                self.image_size
            )));
        }
        let (lo, hi) = self.ridge_freq_range;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::invalid(format!(
                "ridge frequency range ({lo}, {hi}) must satisfy 0 < lo <= hi < 0.5 cycles/px"
            )));
        }
        if self.jitter_rotation_deg > MAX_JITTER_ROTATION_DEG
            || self.jitter_translation_px > MAX_JITTER_TRANSLATION_PX
            || self.jitter_noise_sigma > MAX_JITTER_NOISE_SIGMA
            || self.jitter_rotation_deg < 0.0
            || self.jitter_translation_px < 0.0
            || self.jitter_noise_sigma < 0.0
        {
            return Err(Error::invalid(format!(
                "jitter (rot {} deg, trans {} px, noise sigma {}) exceeds the caps ({}, {}, {})",
                self.jitter_rotation_deg,
                self.jitter_translation_px,
                self.jitter_noise_sigma,
                MAX_JITTER_ROTATION_DEG,
                MAX_JITTER_TRANSLATION_PX,
                MAX_JITTER_NOISE_SIGMA
            )));
        }
        Ok(())
    }
}

/// Number of quantized kernel orientations in the Gabor bank.
const ORIENTATION_BINS: usize = 24;

/// Smooth orientation field from a coarse seeded grid, via bilinear
/// interpolation of a 2-vector field (angles themselves wrap, so the
/// interpolation runs on (cos 2t, sin 2t) components).
fn orientation_field(r: &mut impl Rng, size: usize) -> Vec<f64> {
    const GRID: usize = 4;
    let mut gx = [[0.0f64; GRID]; GRID];
    let mut gy = [[0.0f64; GRID]; GRID];
    for row in 0..GRID {
        for col in 0..GRID {
            let a: f64 = r.gen_range(0.0..PI);
            gx[row][col] = (2.0 * a).cos();
            gy[row][col] = (2.0 * a).sin();
        }
    }
    let mut field = vec![0.0f64; size * size];
    let scale = GRID as f64 / size as f64;
    for y in 0..size {
        let gy_pos = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (GRID - 1) as f64);
        let r0 = gy_pos.floor() as usize;
        let r1 = (r0 + 1).min(GRID - 1);
        let fy = gy_pos - r0 as f64;
        for x in 0..size {
            let gx_pos = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (GRID - 1) as f64);
            let c0 = gx_pos.floor() as usize;
            let c1 = (c0 + 1).min(GRID - 1);
            let fx = gx_pos - c0 as f64;
            let vx = gx[r0][c0] * (1.0 - fx) * (1.0 - fy)
                + gx[r0][c1] * fx * (1.0 - fy)
                + gx[r1][c0] * (1.0 - fx) * fy
                + gx[r1][c1] * fx * fy;
            let vy = gy[r0][c0] * (1.0 - fx) * (1.0 - fy)
                + gy[r0][c1] * fx * (1.0 - fy)
                + gy[r1][c0] * (1.0 - fx) * fy
                + gy[r1][c1] * fx * fy;
            field[y * size + x] = 0.5 * vy.atan2(vx);
        }
    }
    field
}

/// One oriented Gabor kernel: Gaussian envelope times a cosine wave
/// perpendicular to the ridge direction.
fn gabor_kernel(theta: f64, freq: f64, radius: usize) -> Vec<f64> {
    let sigma = 0.5 / freq;
    let wave = theta + PI / 2.0;
    let (sin_w, cos_w) = wave.sin_cos();
    let k = 2 * radius + 1;
    let mut kernel = vec![0.0f64; k * k];
    for dy in 0..k {
        for dx in 0..k {
            let u = dx as f64 - radius as f64;
            let v = dy as f64 - radius as f64;
            let along = u * cos_w + v * sin_w;
            let across = -u * sin_w + v * cos_w;
            let env = (-(along * along + 0.25 * across * across) / (2.0 * sigma * sigma)).exp();
            kernel[dy * k + dx] = env * (2.0 * PI * freq * along).cos();
        }
    }
    kernel
}

/// Subject base pattern as gray levels in [0, 255] (f64 for later warping).
fn base_pattern(subject_seed: u64, size: usize, freq_range: (f64, f64)) -> Vec<f64> {
    let mut r = rng::stream(subject_seed);
    let freq: f64 = r.gen_range(freq_range.0..=freq_range.1);
    let theta = orientation_field(&mut r, size);
    let noise: Vec<f64> = (0..size * size).map(|_| r.gen_range(-1.0..1.0)).collect();

    let radius = ((1.1 / freq).ceil() as usize).clamp(4, size / 2);
    let bank: Vec<Vec<f64>> = (0..ORIENTATION_BINS)
        .map(|q| gabor_kernel(q as f64 * PI / ORIENTATION_BINS as f64, freq, radius))
        .collect();
    let k = 2 * radius + 1;

    let mut response = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = theta[y * size + x].rem_euclid(PI);
            let bin = ((t / PI * ORIENTATION_BINS as f64).round() as usize) % ORIENTATION_BINS;
            let kernel = &bank[bin];
            let mut acc = 0.0;
            for dy in 0..k {
                let sy = (y + dy).saturating_sub(radius).min(size - 1);
                for dx in 0..k {
                    let sx = (x + dx).saturating_sub(radius).min(size - 1);
                    acc += kernel[dy * k + dx] * noise[sy * size + sx];
                }
            }
            response[y * size + x] = acc;
        }
    }

    let mean = response.iter().sum::<f64>() / response.len() as f64;
    let var = response.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / response.len() as f64;
    let inv_std = 1.0 / var.sqrt().max(1e-9);
    response
        .iter()
        .map(|&v| {
            let soft = (2.0 * (v - mean) * inv_std).tanh();
            // Dark ridges on a light background.
            127.5 * (1.0 - 0.9 * soft)
        })
        .collect()
}

fn bilinear_f64(buf: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (size - 1) as f64);
    let yc = y.clamp(0.0, (size - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    buf[y0 * size + x0] * (1.0 - fx) * (1.0 - fy)
        + buf[y0 * size + x1] * fx * (1.0 - fy)
        + buf[y1 * size + x0] * (1.0 - fx) * fy
        + buf[y1 * size + x1] * fx * fy
}

fn jittered_image(
    base: &[f64],
    size: usize,
    subject_seed: u64,
    image_index: usize,
    params: &SynthParams,
) -> GrayImage {
    let mut r = rng::stream(rng::mix(&[0x6a69_7474_6572, subject_seed, image_index as u64]));
    let theta: f64 = r
        .gen_range(-params.jitter_rotation_deg..=params.jitter_rotation_deg)
        .to_radians();
    let tx: f64 = r.gen_range(-params.jitter_translation_px..=params.jitter_translation_px);
    let ty: f64 = r.gen_range(-params.jitter_translation_px..=params.jitter_translation_px);
    let normal = Normal::new(0.0, params.jitter_noise_sigma.max(1e-12)).unwrap();

    let c = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut pixels = vec![0u8; size * size];
    for oy in 0..size {
        for ox in 0..size {
            let dx = ox as f64 - c - tx;
            let dy = oy as f64 - c - ty;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            let mut v = bilinear_f64(base, size, sx, sy);
            if params.jitter_noise_sigma > 0.0 {
                v += normal.sample(&mut r);
            }
            pixels[oy * size + ox] = round_u8(v);
        }
    }
    GrayImage::new(size, size, pixels)
}

/// Derive the orientation-field seed of one subject.
pub fn subject_seed(params: &SynthParams, subject: usize) -> u64 {
    rng::mix(&[0x7379_6e74_68, params.seed, subject as u64])
}

/// Render one subject/image pair without touching the filesystem.
pub fn synth_image(params: &SynthParams, subject: usize, image_index: usize) -> Result<GrayImage> {
    params.validate()?;
    let seed = subject_seed(params, subject);
    let base = base_pattern(seed, params.image_size, params.ridge_freq_range);
    Ok(jittered_image(
        &base,
        params.image_size,
        seed,
        image_index,
        params,
    ))
}

/// Generate the whole dataset under `out_dir` in the ingest layout
/// (`<out_dir>/s<NNN>/i<NN>.pgm`). Deterministic: identical params produce
/// byte-identical files.
pub fn synth_generate(params: &SynthParams, out_dir: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for s in 0..params.num_subjects {
        let dir = out_dir.join(format!("s{s:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let seed = subject_seed(params, s);
        let base = base_pattern(seed, params.image_size, params.ridge_freq_range);
        for i in 0..params.images_per_subject {
            let img = jittered_image(&base, params.image_size, seed, i, params);
            pnm::write_pgm_binary(dir.join(format!("i{i:02}.pgm")), &img)?;
        }
    }
    Ok(())
}
