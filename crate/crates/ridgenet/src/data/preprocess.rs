//! Resize to network resolution and normalize to `[-1, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::pnm::GrayImage;

/// Bilinear resize to `target_size x target_size`, scale to `[0,1]`, then
/// normalize `(x - 0.5)/0.5`. Grayscale is replicated across `channels`.
/// The returned buffer is `channels * target_size * target_size` long.
pub fn preprocess(image: &GrayImage, target_size: usize, channels: usize) -> Result<Vec<f32>> {
    if target_size < 8 {
        return Err(Error::invalid(format!(
            "preprocess target size {target_size} is below the minimum of 8"
        )));
    }
    if channels == 0 {
        return Err(Error::invalid("preprocess needs at least one channel".to_string()));
    }
    if image.width == 0 || image.height == 0 {
        return Err(Error::invalid("preprocess rejects a degenerate (0-extent) image".to_string()));
    }

    let plane = target_size * target_size;
    let mut out = vec![0.0f32; channels * plane];
    let sx = image.width as f64 / target_size as f64;
    let sy = image.height as f64 / target_size as f64;
    for oy in 0..target_size {
        let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = src_y - y0 as f64;
        for ox in 0..target_size {
            let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = src_x - x0 as f64;
            let v = image.get(x0, y0) as f64 * (1.0 - fx) * (1.0 - fy)
                + image.get(x1, y0) as f64 * fx * (1.0 - fy)
                + image.get(x0, y1) as f64 * (1.0 - fx) * fy
                + image.get(x1, y1) as f64 * fx * fy;
            let unit = v / 255.0;
            out[oy * target_size + ox] = ((unit - 0.5) / 0.5) as f32;
        }
    }
    for c in 1..channels {
        let (lead, tail) = out.split_at_mut(c * plane);
        tail[..plane].copy_from_slice(&lead[..plane]);
    }
    Ok(out)
}

/// Stack preprocessed rows into a `[B, C, S, S]` batch tensor.
pub fn batch_tensor(rows: &[Vec<f32>], channels: usize, size: usize) -> Result<Tensor<f32>> {
    let plane = channels * size * size;
    if rows.is_empty() {
        return Err(Error::invalid("cannot build an empty batch".to_string()));
    }
    let mut data = Vec::with_capacity(rows.len() * plane);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != plane {
            return Err(Error::invalid(format!(
                "batch row {i} has {} values, expected {plane}",
                row.len()
            )));
        }
        data.extend_from_slice(row);
    }
    Tensor::from_vec(&[rows.len(), channels, size, size], data)
}
