//! Occlusion-sensitivity saliency.
//!
//! Slide an NxN square of zeroed raw pixels across the image with stride S,
//! re-classify each occluded copy, and aggregate per-pixel importance: the
//! fraction of covering windows whose prediction flipped away from the true
//! label. A secondary graded map records the drop in true-class probability.
//! Zeroing happens in raw pixel space, before preprocessing.

use std::path::{Path, PathBuf};

use crate::data::pnm::{self, GrayImage};
use crate::data::preprocess::{batch_tensor, preprocess};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::ops::Phase;
use crate::tensor::{no_grad, ops};
use crate::trainer::argmax_row;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaliencyConfig {
    /// Occluder side length N, in raw pixels.
    pub window: usize,
    /// Stride S between window positions.
    pub stride: usize,
}

impl SaliencyConfig {
    /// Defaults: N = extent/8, S = N/2 (each at least 1).
    pub fn defaults_for(extent: usize) -> Self {
        let window = (extent / 8).max(1);
        SaliencyConfig {
            window,
            stride: (window / 2).max(1),
        }
    }

    fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::invalid(
                "saliency window and stride must be positive".to_string(),
            ));
        }
        if self.window > width.min(height) {
            return Err(Error::invalid(format!(
                "saliency window {} exceeds the {}x{} image",
                self.window, width, height
            )));
        }
        Ok(())
    }
}

/// Number of window positions along one axis: floor((extent - n)/s) + 1.
pub fn grid_extent(extent: usize, n: usize, s: usize) -> usize {
    if n > extent {
        0
    } else {
        (extent - n) / s + 1
    }
}

/// One occluded classification outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    /// Left edge of the window, in pixels.
    pub x: usize,
    /// Top edge of the window, in pixels.
    pub y: usize,
    pub predicted_class: usize,
    pub true_class_prob: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Row-major over grid positions (y outer).
    pub records: Vec<WindowRecord>,
    /// Per-pixel flip fraction in [0, 1]; 0 where no window covers.
    pub pixel_importance: Vec<f64>,
    /// Covering-window count per pixel; 0 marks the unreachable margin.
    pub coverage: Vec<u32>,
    /// Secondary graded map: mean clamped true-class probability drop per
    /// pixel, max-normalized to [0, 1].
    pub confidence_drop: Vec<f64>,
    pub true_class: usize,
    pub baseline_class: usize,
    pub baseline_true_prob: f64,
}

/// Zero out the n x n square whose top-left corner is (x, y).
pub fn occlude(image: &GrayImage, x: usize, y: usize, n: usize) -> Result<GrayImage> {
    if x + n > image.width || y + n > image.height {
        return Err(Error::invalid(format!(
            "occlusion square {n}x{n} at ({x}, {y}) leaves the {}x{} image",
            image.width, image.height
        )));
    }
    let mut out = image.clone();
    for yy in y..y + n {
        out.pixels[yy * image.width + x..yy * image.width + x + n].fill(0);
    }
    Ok(out)
}

fn classify_rows(
    model: &Model<f32>,
    rows: &[Vec<f32>],
    true_class: usize,
) -> Result<Vec<(usize, f64)>> {
    let classes = model.config.num_classes;
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(32) {
        let x = batch_tensor(chunk, model.config.input_channels, model.config.input_size)?;
        let probs = no_grad(|| -> Result<_> {
            let logits = model.forward(&x, Phase::Eval)?;
            ops::softmax(&logits)
        })?;
        let pd = probs.data();
        for bi in 0..chunk.len() {
            let row = &pd[bi * classes..(bi + 1) * classes];
            out.push((argmax_row(row), row[true_class] as f64));
        }
    }
    Ok(out)
}

/// Classify every window position and aggregate the per-pixel maps.
pub fn occlusion_sweep(
    model: &Model<f32>,
    sample: &Sample,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    let image = &sample.image;
    config.validate(image.width, image.height)?;
    let true_class = sample.subject_id;
    if true_class >= model.config.num_classes {
        return Err(Error::invalid(format!(
            "true label {true_class} is outside the model's {} classes",
            model.config.num_classes
        )));
    }

    let size = model.config.input_size;
    let channels = model.config.input_channels;
    let baseline_row = preprocess(image, size, channels)?;
    let (baseline_class, baseline_true_prob) =
        classify_rows(model, std::slice::from_ref(&baseline_row), true_class)?[0];

    let grid_w = grid_extent(image.width, config.window, config.stride);
    let grid_h = grid_extent(image.height, config.window, config.stride);
    let mut positions = Vec::with_capacity(grid_w * grid_h);
    let mut rows = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let (x, y) = (gx * config.stride, gy * config.stride);
            positions.push((x, y));
            rows.push(preprocess(&occlude(image, x, y, config.window)?, size, channels)?);
        }
    }
    let outcomes = classify_rows(model, &rows, true_class)?;
    let records: Vec<WindowRecord> = positions
        .into_iter()
        .zip(outcomes)
        .map(|((x, y), (predicted_class, true_class_prob))| WindowRecord {
            x,
            y,
            predicted_class,
            true_class_prob,
            flipped: predicted_class != true_class,
        })
        .collect();

    let (pixel_importance, coverage, confidence_drop) = aggregate(
        &records,
        image.width,
        image.height,
        config.window,
        baseline_true_prob,
    );

    Ok(SaliencyMap {
        width: image.width,
        height: image.height,
        window: config.window,
        stride: config.stride,
        grid_w,
        grid_h,
        records,
        pixel_importance,
        coverage,
        confidence_drop,
        true_class,
        baseline_class,
        baseline_true_prob,
    })
}

/// Deterministic reduction of window records to pixel maps; independent of
/// record order.
fn aggregate(
    records: &[WindowRecord],
    width: usize,
    height: usize,
    window: usize,
    baseline_true_prob: f64,
) -> (Vec<f64>, Vec<u32>, Vec<f64>) {
    let mut flips = vec![0u32; width * height];
    let mut coverage = vec![0u32; width * height];
    let mut drops = vec![0.0f64; width * height];
    for r in records {
        let drop = (baseline_true_prob - r.true_class_prob).max(0.0);
        for y in r.y..r.y + window {
            let base = y * width;
            for x in r.x..r.x + window {
                coverage[base + x] += 1;
                if r.flipped {
                    flips[base + x] += 1;
                }
                drops[base + x] += drop;
            }
        }
    }
    let importance: Vec<f64> = flips
        .iter()
        .zip(&coverage)
        .map(|(&f, &c)| if c == 0 { 0.0 } else { f as f64 / c as f64 })
        .collect();
    let mut conf: Vec<f64> = drops
        .iter()
        .zip(&coverage)
        .map(|(&d, &c)| if c == 0 { 0.0 } else { d / c as f64 })
        .collect();
    let max = conf.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut conf {
            *v /= max;
        }
    }
    (importance, coverage, conf)
}

/// Write the map as files: `<prefix>_map.pgm` (plain graymap, round(255 *
/// importance)), `<prefix>_confidence.pgm` (graded map), and
/// `<prefix>_grid.csv` (per-window records). Returns the written paths.
pub fn render_map(map: &SaliencyMap, out_prefix: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let prefix = out_prefix.as_ref().to_string_lossy().into_owned();
    let to_gray = |values: &[f64]| GrayImage {
        width: map.width,
        height: map.height,
        pixels: values
            .iter()
            .map(|&v| ((v * 255.0) + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect(),
    };

    let map_path = PathBuf::from(format!("{prefix}_map.pgm"));
    pnm::write_pgm_plain(&map_path, &to_gray(&map.pixel_importance))?;
    let conf_path = PathBuf::from(format!("{prefix}_confidence.pgm"));
    pnm::write_pgm_plain(&conf_path, &to_gray(&map.confidence_drop))?;

    let mut csv = String::from("x,y,predicted_class,true_class_prob,flipped\n");
    for r in &map.records {
        csv.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.x, r.y, r.predicted_class, r.true_class_prob, r.flipped
        ));
    }
    let csv_path = PathBuf::from(format!("{prefix}_grid.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(vec![map_path, conf_path, csv_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_resnet, ModelConfig, Variant};

    fn test_image(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i % 251) as u8 + 1).collect())
    }

    #[test]
    fn occlude_full_image_zeroes_everything() {
        let img = test_image(8, 8);
        let out = occlude(&img, 0, 0, 8).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0));
    }

    #[test]
    fn occlude_single_pixel() {
        let img = test_image(8, 8);
        let out = occlude(&img, 0, 0, 1).unwrap();
        let changed = out
            .pixels
            .iter()
            .zip(&img.pixels)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 1);
        assert_eq!(out.get(0, 0), 0);
    }

    #[test]
    fn disjoint_occlusions_commute() {
        let img = test_image(12, 12);
        let ab = occlude(&occlude(&img, 0, 0, 3).unwrap(), 6, 6, 3).unwrap();
        let ba = occlude(&occlude(&img, 6, 6, 3).unwrap(), 0, 0, 3).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn out_of_bounds_square_rejected() {
        let img = test_image(8, 8);
        assert!(occlude(&img, 6, 0, 4).is_err());
        assert!(occlude(&img, 0, 8, 1).is_err());
    }

    #[test]
    fn grid_extent_formula() {
        assert_eq!(grid_extent(224, 28, 28), 8);
        for extent in [16usize, 32] {
            for n in 1..=extent {
                for s in 1..=n {
                    let mut count = 0;
                    let mut pos = 0;
                    while pos + n <= extent {
                        count += 1;
                        pos += s;
                    }
                    assert_eq!(grid_extent(extent, n, s), count, "H={extent} N={n} S={s}");
                }
            }
        }
    }

    fn tiny_model(classes: usize) -> Model<f32> {
        let config = ModelConfig::new(Variant::ResnetMini, 1, 16, classes).unwrap();
        build_resnet(config, 3).unwrap()
    }

    fn sample_with(img: GrayImage, label: usize) -> Sample {
        Sample {
            subject_id: label,
            subject_name: format!("s{label:03}"),
            image_name: "i00.pgm".to_string(),
            image: img,
            source_path: "mem".into(),
            is_augmented: false,
        }
    }

    #[test]
    fn constant_model_never_flips() {
        let model = tiny_model(3);
        // Kill the head: logits identically zero, prediction is always 0.
        let w = &model.head_weight().value;
        w.set_data(&vec![0.0; w.numel()]);
        let b = &model
            .params()
            .into_iter()
            .find(|p| p.name == "head.bias")
            .unwrap()
            .value;
        b.set_data(&vec![0.0; b.numel()]);

        let sample = sample_with(test_image(16, 16), 0);
        let config = SaliencyConfig { window: 4, stride: 4 };
        let map = occlusion_sweep(&model, &sample, &config).unwrap();
        assert_eq!(map.baseline_class, 0);
        assert!(map.records.iter().all(|r| !r.flipped));
        assert!(map.pixel_importance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_is_order_independent() {
        let records = vec![
            WindowRecord { x: 0, y: 0, predicted_class: 1, true_class_prob: 0.1, flipped: true },
            WindowRecord { x: 4, y: 0, predicted_class: 0, true_class_prob: 0.9, flipped: false },
            WindowRecord { x: 0, y: 4, predicted_class: 2, true_class_prob: 0.2, flipped: true },
        ];
        let mut reversed = records.clone();
        reversed.reverse();
        let a = aggregate(&records, 8, 8, 4, 0.9);
        let b = aggregate(&reversed, 8, 8, 4, 0.9);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn uncovered_margin_is_flagged() {
        let model = tiny_model(2);
        let sample = sample_with(test_image(16, 16), 0);
        // Stride larger than reach: single window in the top-left corner.
        let config = SaliencyConfig { window: 8, stride: 16 };
        let map = occlusion_sweep(&model, &sample, &config).unwrap();
        assert_eq!((map.grid_w, map.grid_h), (1, 1));
        assert_eq!(map.coverage[0], 1);
        assert_eq!(map.coverage[15], 0, "right margin uncovered");
        assert_eq!(map.pixel_importance[15], 0.0);
    }

    #[test]
    fn sweep_with_stride_and_coverage() {
        let model = tiny_model(2);
        let sample = sample_with(test_image(16, 16), 1);
        let config = SaliencyConfig { window: 8, stride: 4 };
        let map = occlusion_sweep(&model, &sample, &config).unwrap();
        assert_eq!((map.grid_w, map.grid_h), (3, 3));
        assert_eq!(map.records.len(), 9);
        // S <= N: every pixel is covered at least once.
        assert!(map.coverage.iter().all(|&c| c >= 1));
        assert!(map
            .pixel_importance
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn window_larger_than_image_rejected() {
        let model = tiny_model(2);
        let sample = sample_with(test_image(16, 16), 0);
        let config = SaliencyConfig { window: 17, stride: 1 };
        assert!(occlusion_sweep(&model, &sample, &config).is_err());
    }

    #[test]
    fn render_writes_graymaps_and_csv() {
        let tmp = tempfile::tempdir().unwrap();
        let prefix = tmp.path().join("sal");

        // All-zero map.
        let zero = SaliencyMap {
            width: 8,
            height: 8,
            window: 4,
            stride: 4,
            grid_w: 2,
            grid_h: 2,
            records: (0..4)
                .map(|i| WindowRecord {
                    x: (i % 2) * 4,
                    y: (i / 2) * 4,
                    predicted_class: 0,
                    true_class_prob: 1.0,
                    flipped: false,
                })
                .collect(),
            pixel_importance: vec![0.0; 64],
            coverage: vec![1; 64],
            confidence_drop: vec![0.0; 64],
            true_class: 0,
            baseline_class: 0,
            baseline_true_prob: 1.0,
        };
        let files = render_map(&zero, &prefix).unwrap();
        let img = pnm::read_pnm(&files[0]).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 0));
        let csv = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4, "header plus grid rows");

        // One flipped non-overlapping window lights exactly its square.
        let mut one = zero.clone();
        one.records[3].flipped = true;
        one.records[3].predicted_class = 1;
        let (imp, cov, conf) = (
            aggregate(&one.records, 8, 8, 4, 1.0).0,
            aggregate(&one.records, 8, 8, 4, 1.0).1,
            aggregate(&one.records, 8, 8, 4, 1.0).2,
        );
        one.pixel_importance = imp;
        one.coverage = cov;
        one.confidence_drop = conf;
        let files = render_map(&one, tmp.path().join("sal2")).unwrap();
        let img = pnm::read_pnm(&files[0]).unwrap();
        let lit: usize = img.pixels.iter().filter(|&&v| v == 255).count();
        let dark: usize = img.pixels.iter().filter(|&&v| v == 0).count();
        assert_eq!(lit, 16, "exactly one 4x4 square at 255");
        assert_eq!(dark, 48);
        for y in 4..8 {
            for x in 4..8 {
                assert_eq!(img.get(x, y), 255);
            }
        }
    }
}
