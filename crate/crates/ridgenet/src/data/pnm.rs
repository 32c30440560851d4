//! Minimal portable graymap/pixmap codec (P2/P5 grayscale, P3/P6 color).
//!
//! Color rasters are reduced to grayscale at read time with the usual
//! luminance weights (0.299, 0.587, 0.114). Only 8-bit rasters (maxval <=
//! 255) are supported.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(width * height, pixels.len(), "raster length mismatch");
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

fn luma(r: u8, g: u8, b: u8) -> u8 {
    let v = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Decode a PNM file already read into memory. `context` names the source
/// in errors.
pub fn decode_pnm(bytes: &[u8], context: &Path) -> Result<GrayImage> {
    let bad = |reason: &str| Error::UnreadableImage {
        path: context.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 2 {
        return Err(bad("file too short for a PNM header"));
    }
    let magic = &bytes[..2];
    let kind = match magic {
        b"P2" => Kind::PlainGray,
        b"P5" => Kind::RawGray,
        b"P3" => Kind::PlainRgb,
        b"P6" => Kind::RawRgb,
        _ => {
            return Err(bad(&format!(
                "unknown magic {:?} (supported: P2, P3, P5, P6)",
                String::from_utf8_lossy(magic)
            )))
        }
    };

    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        *slot = read_header_int(bytes, &mut pos).ok_or_else(|| bad("malformed header"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (must be 1..=255)")));
    }
    let scale = 255.0 / maxval as f64;
    let rescale = |v: usize| ((v as f64 * scale) + 0.5).floor().clamp(0.0, 255.0) as u8;

    let n = width * height;
    let pixels = match kind {
        Kind::RawGray | Kind::RawRgb => {
            // Exactly one whitespace byte separates the header from the raster.
            if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
                return Err(bad("missing raster separator"));
            }
            pos += 1;
            let per = if kind == Kind::RawGray { 1 } else { 3 };
            let raster = bytes
                .get(pos..pos + n * per)
                .ok_or_else(|| bad("raster shorter than declared dimensions"))?;
            match kind {
                Kind::RawGray => raster.iter().map(|&v| rescale(v as usize)).collect(),
                _ => raster
                    .chunks_exact(3)
                    .map(|c| luma(rescale(c[0] as usize), rescale(c[1] as usize), rescale(c[2] as usize)))
                    .collect(),
            }
        }
        Kind::PlainGray | Kind::PlainRgb => {
            let per = if kind == Kind::PlainGray { 1 } else { 3 };
            let mut vals = Vec::with_capacity(n * per);
            for _ in 0..n * per {
                let v = read_header_int(bytes, &mut pos)
                    .ok_or_else(|| bad("raster has fewer samples than declared"))?;
                if v > maxval {
                    return Err(bad(&format!("sample {v} exceeds maxval {maxval}")));
                }
                vals.push(v);
            }
            match kind {
                Kind::PlainGray => vals.into_iter().map(rescale).collect(),
                _ => vals
                    .chunks_exact(3)
                    .map(|c| luma(rescale(c[0]), rescale(c[1]), rescale(c[2])))
                    .collect(),
            }
        }
    };

    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

#[derive(PartialEq, Clone, Copy)]
enum Kind {
    PlainGray,
    RawGray,
    PlainRgb,
    RawRgb,
}

/// Read a whitespace/comment-delimited decimal integer.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn encode_pgm_binary(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm_plain(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P2\n{} {}\n255\n", img.width, img.height).into_bytes();
    for row in img.pixels.chunks(img.width.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.extend_from_slice(line.join(" ").as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn write_pgm_binary(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm_binary(img))
        .map_err(|e| Error::io(path, e))
}

pub fn write_pgm_plain(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm_plain(img))
        .map_err(|e| Error::io(path, e))
}
