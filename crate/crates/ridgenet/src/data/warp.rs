//! Bilinear image warps shared by the augmentation pipeline and the
//! synthetic generator.

use super::pnm::GrayImage;

/// Bilinear sample with border replication (coordinates clamp to the edge).
pub(crate) fn bilinear_u8(img: &GrayImage, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let p00 = img.get(x0, y0) as f64;
    let p10 = img.get(x1, y0) as f64;
    let p01 = img.get(x0, y1) as f64;
    let p11 = img.get(x1, y1) as f64;
    p00 * (1.0 - fx) * (1.0 - fy) + p10 * fx * (1.0 - fy) + p01 * (1.0 - fx) * fy + p11 * fx * fy
}

pub(crate) fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Rotate about the image center by `theta` radians, then translate by
/// `(tx, ty)` pixels, resampling bilinearly with border replication.
pub(crate) fn rotate_translate(img: &GrayImage, theta: f64, tx: f64, ty: f64) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0u8; w * h];
    for oy in 0..h {
        for ox in 0..w {
            // Inverse map: undo the translation, then the rotation.
            let dx = ox as f64 - cx - tx;
            let dy = oy as f64 - cy - ty;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out[oy * w + ox] = round_u8(bilinear_u8(img, sx, sy));
        }
    }
    GrayImage::new(w, h, out)
}

/// Resize the `cw x ch` window anchored at `(x0, y0)` back to the full
/// output resolution (half-pixel-center sampling).
pub(crate) fn resize_region(
    img: &GrayImage,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
    out_w: usize,
    out_h: usize,
) -> GrayImage {
    let sx = cw as f64 / out_w as f64;
    let sy = ch as f64 / out_h as f64;
    let mut out = vec![0u8; out_w * out_h];
    for oy in 0..out_h {
        let src_y = (oy as f64 + 0.5) * sy - 0.5 + y0 as f64;
        for ox in 0..out_w {
            let src_x = (ox as f64 + 0.5) * sx - 0.5 + x0 as f64;
            out[oy * out_w + ox] = round_u8(bilinear_u8(img, src_x, src_y));
        }
    }
    GrayImage::new(out_w, out_h, out)
}
