//! Shared oracles and helpers for the integration suites.
//!
//! The reference implementations here are deliberately independent of the
//! library's compute paths: the convolution oracle is a direct seven-loop
//! sum, and the model gradient checker drives finite differences through
//! parameter perturbation only.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ridgenet::data::pnm::GrayImage;
use ridgenet::data::{Dataset, Sample};
use ridgenet::model::Model;
use ridgenet::tensor::ops::Phase;
use ridgenet::tensor::{no_grad, Element, Tensor};
use ridgenet::trainer::loss::total_loss;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<E: Element>(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<E> {
    (0..n).map(|_| E::from_f64(r.gen_range(lo..hi))).collect()
}

/// Direct seven-nested-loop convolution: the semantic reference for conv2d.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    x: &[f32],
    (b, ci, h, w): (usize, usize, usize, usize),
    weight: &[f32],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> (Vec<f32>, usize, usize) {
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; b * co * ho * wo];
    for bi in 0..b {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * ci + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((oc * ci + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[oc];
                    }
                    out[((bi * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// In-memory dataset: `subjects` classes of `per_subject` tiny images.
pub fn listing_dataset(subjects: usize, per_subject: usize) -> Dataset {
    let mut samples = Vec::new();
    let mut classes = Vec::new();
    for s in 0..subjects {
        let name = format!("s{s:03}");
        for i in 0..per_subject {
            samples.push(Sample {
                subject_id: s,
                subject_name: name.clone(),
                image_name: format!("i{i:02}.pgm"),
                image: GrayImage::filled(4, 4, ((s * 31 + i * 7) % 256) as u8),
                source_path: PathBuf::from(format!("mem/{name}/i{i:02}.pgm")),
                is_augmented: false,
            });
        }
        classes.push(name);
    }
    Dataset::new(samples, classes)
}

/// Outcome counts of a sampled finite-difference pass over model parameters.
#[derive(Debug, Default)]
pub struct FdSummary {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kink: usize,
    pub skipped_noise: usize,
}

/// Compare analytic parameter gradients of the full model + loss graph
/// against central finite differences at sampled coordinates.
///
/// Coordinates whose one-sided difference quotients disagree by more than
/// 10% straddle a kink (relu/maxpool switching) where a central difference
/// is not a valid derivative estimate; they are skipped and counted.
/// Coordinates with |gradient| below `noise_floor` are skipped as below the
/// finite-difference noise floor of the precision in use (relevant at f32).
pub fn fd_check_model<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    labels: &Tensor<E>,
    lambda1: f64,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
    noise_floor: f64,
) -> FdSummary {
    let loss_value = |model: &Model<E>| -> f64 {
        no_grad(|| {
            let logits = model.forward(x, Phase::Train).unwrap();
            total_loss(&logits, labels, &model.head_weight().value, lambda1)
                .unwrap()
                .item()
                .as_f64()
        })
    };

    // Analytic gradients.
    model.zero_grads();
    let logits = model.forward(x, Phase::Train).unwrap();
    let loss = total_loss(&logits, labels, &model.head_weight().value, lambda1).unwrap();
    loss.backward().unwrap();

    let f0 = loss_value(model);
    let mut r = rng(seed);
    let mut summary = FdSummary::default();
    for p in model.params() {
        let grad = p.value.grad().unwrap_or_else(|| vec![E::zero(); p.value.numel()]);
        let mut data = p.value.to_vec();
        for _ in 0..coords_per_tensor {
            let i = r.gen_range(0..data.len());
            let g = grad[i].as_f64();
            if g.abs() < noise_floor {
                summary.skipped_noise += 1;
                continue;
            }
            let orig = data[i];
            data[i] = orig + E::from_f64(h);
            p.value.set_data(&data);
            let f_plus = loss_value(model);
            data[i] = orig - E::from_f64(h);
            p.value.set_data(&data);
            let f_minus = loss_value(model);
            data[i] = orig;
            p.value.set_data(&data);

            let d_plus = (f_plus - f0) / h;
            let d_minus = (f0 - f_minus) / h;
            let disagreement =
                (d_plus - d_minus).abs() / d_plus.abs().max(d_minus.abs()).max(1e-8);
            if disagreement > 0.1 {
                summary.skipped_kink += 1;
                continue;
            }

            let fd = (f_plus - f_minus) / (2.0 * h);
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            summary.max_rel_err = summary.max_rel_err.max(err);
            summary.checked += 1;
        }
    }
    summary
}

/// Recursively collect (relative path, bytes) of every file under a root.
pub fn dir_contents(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
