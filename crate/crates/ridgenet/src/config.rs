//! Flat key=value run configuration.
//!
//! Every key has a documented default; unknown keys are rejected. Values
//! from a config file override the defaults, and command-line flags override
//! the file. Each CLI run writes the fully-resolved configuration next to
//! its outputs, and re-running from that echoed file reproduces the run.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::augment::{AugmentKind, AugmentationSpec};
use crate::data::synth::SynthParams;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainableSelector, Variant};
use crate::saliency::SaliencyConfig;
use crate::trainer::{OptimizerKind, TrainConfig};

/// `(key, default, description)` registry of every configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.variant", "resnet_mini", "resnet_mini|resnet18|resnet50"),
    ("model.input_channels", "1", "image planes fed to the stem"),
    ("model.input_size", "auto", "network input resolution; auto = 64 for resnet_mini, 224 otherwise"),
    ("model.num_classes", "auto", "head width; auto = number of dataset subjects"),
    ("model.init_seed", "0", "parameter initialization seed"),
    ("train.epochs", "100", "maximum training epochs"),
    ("train.batch_size", "24", "samples per optimizer step"),
    ("train.learning_rate", "0.0001", "optimizer learning rate"),
    ("train.lambda1", "0.0001", "weight of the Frobenius penalty on the head"),
    ("train.optimizer", "adam", "adam|sgd"),
    ("train.adam_beta1", "0.9", "Adam first-moment decay"),
    ("train.adam_beta2", "0.999", "Adam second-moment decay"),
    ("train.adam_eps", "1e-8", "Adam denominator epsilon"),
    ("train.seed", "0", "shuffle seed"),
    ("train.bn_freeze", "false", "freeze batch-norm running statistics while training"),
    ("train.trainable", "all", "all|head_only|stages_from:K"),
    ("train.early_stop_patience", "0", "stop after this many epochs without validation improvement; 0 = off"),
    ("train.stop_at_train_accuracy", "0", "stop once train accuracy reaches this value; 0 = off"),
    ("train.val_per_subject", "1", "validation images held out per subject"),
    ("train.split_seed", "0", "seed for the split computed when no split file is given"),
    ("augment.factor", "3", "effective copies of each training image"),
    ("augment.pool", "hflip,vflip,random_crop,small_distortion", "comma-separated transform pool"),
    ("augment.crop_lo", "0.9", "lower crop fraction"),
    ("augment.crop_hi", "1.0", "upper crop fraction"),
    ("augment.rotation_deg", "10", "distortion rotation range, +/- degrees"),
    ("augment.translation_frac", "0.05", "distortion translation range, +/- fraction per axis"),
    ("augment.seed", "0", "augmentation seed"),
    ("synth.subjects", "20", "synthetic subjects to generate"),
    ("synth.per_subject", "10", "images per synthetic subject"),
    ("synth.size", "64", "synthetic image side length"),
    ("synth.seed", "0", "synthetic generator seed"),
    ("synth.freq_lo", "0.07", "lower ridge frequency, cycles/px"),
    ("synth.freq_hi", "0.13", "upper ridge frequency, cycles/px"),
    ("synth.jitter_rotation_deg", "3", "within-subject rotation jitter, +/- degrees (cap 3)"),
    ("synth.jitter_translation_px", "2", "within-subject translation jitter, +/- pixels (cap 2)"),
    ("synth.jitter_noise_sigma", "6", "additive Gaussian noise sigma, gray levels (cap 8)"),
    ("saliency.window", "auto", "occluder side length N; auto = image_size/8"),
    ("saliency.stride", "auto", "occluder stride S; auto = N/2"),
    ("saliency.image", "", "image to explain"),
    ("saliency.label", "0", "true class index of the image"),
    ("paths.data_root", "", "dataset root directory"),
    ("paths.split_file", "", "split plan file; empty = derive from train.split_seed"),
    ("paths.checkpoint_in", "", "checkpoint to start from; empty = fresh initialization"),
    ("paths.checkpoint_out", "", "where to write the best checkpoint; empty = <report_dir>/best.fpnt"),
    ("paths.report_dir", ".", "where reports and the config echo are written"),
    ("paths.out", "", "output target of synth (directory), split (file), saliency (prefix)"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!(
                "unknown configuration key \"{key}\""
            )));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    /// Parse `key=value` lines ('#' comment lines and blanks allowed).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {} is not key=value: {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Fully-resolved `key=value` lines, sorted by key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_echo(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.echo()).map_err(|e| Error::io(path, e))
    }

    pub fn echo_pairs(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key).parse().map_err(|_| {
            Error::Config(format!(
                "configuration key \"{key}\" has unparsable value {:?}",
                self.get(key)
            ))
        })
    }

    pub fn usize_key(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64_key(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64_key(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool_key(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!(
                "configuration key \"{key}\" must be a boolean, got {other:?}"
            ))),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(self.get("model.variant"))
    }

    /// Input resolution after resolving `auto` against the variant.
    pub fn input_size(&self) -> Result<usize> {
        match self.get("model.input_size") {
            "auto" => Ok(match self.variant()? {
                Variant::ResnetMini => 64,
                _ => 224,
            }),
            _ => self.usize_key("model.input_size"),
        }
    }

    /// Head width; `auto` resolves to the dataset's class count.
    pub fn num_classes(&self, dataset_classes: usize) -> Result<usize> {
        match self.get("model.num_classes") {
            "auto" => Ok(dataset_classes),
            _ => self.usize_key("model.num_classes"),
        }
    }

    pub fn model_config(&self, dataset_classes: usize) -> Result<ModelConfig> {
        ModelConfig::new(
            self.variant()?,
            self.usize_key("model.input_channels")?,
            self.input_size()?,
            self.num_classes(dataset_classes)?,
        )
    }

    pub fn augmentation_spec(&self) -> Result<AugmentationSpec> {
        let pool_raw = self.get("augment.pool");
        let mut pool = Vec::new();
        for item in pool_raw.split(',') {
            let item = item.trim();
            if !item.is_empty() {
                pool.push(AugmentKind::parse(item)?);
            }
        }
        let spec = AugmentationSpec {
            factor: self.usize_key("augment.factor")?,
            pool,
            crop_fraction_range: (self.f64_key("augment.crop_lo")?, self.f64_key("augment.crop_hi")?),
            rotation_range_deg: self.f64_key("augment.rotation_deg")?,
            translation_frac: self.f64_key("augment.translation_frac")?,
            seed: self.u64_key("augment.seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            epochs: self.usize_key("train.epochs")?,
            batch_size: self.usize_key("train.batch_size")?,
            learning_rate: self.f64_key("train.learning_rate")?,
            lambda1: self.f64_key("train.lambda1")?,
            optimizer: OptimizerKind::parse(self.get("train.optimizer"))?,
            adam_betas: (
                self.f64_key("train.adam_beta1")?,
                self.f64_key("train.adam_beta2")?,
            ),
            adam_eps: self.f64_key("train.adam_eps")?,
            seed: self.u64_key("train.seed")?,
            bn_freeze: self.bool_key("train.bn_freeze")?,
            trainable: TrainableSelector::parse(self.get("train.trainable"))?,
            augment: self.augmentation_spec()?,
            early_stop_patience: self.usize_key("train.early_stop_patience")?,
            stop_at_train_accuracy: self.f64_key("train.stop_at_train_accuracy")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn synth_params(&self) -> Result<SynthParams> {
        let params = SynthParams {
            num_subjects: self.usize_key("synth.subjects")?,
            images_per_subject: self.usize_key("synth.per_subject")?,
            image_size: self.usize_key("synth.size")?,
            ridge_freq_range: (self.f64_key("synth.freq_lo")?, self.f64_key("synth.freq_hi")?),
            seed: self.u64_key("synth.seed")?,
            jitter_rotation_deg: self.f64_key("synth.jitter_rotation_deg")?,
            jitter_translation_px: self.f64_key("synth.jitter_translation_px")?,
            jitter_noise_sigma: self.f64_key("synth.jitter_noise_sigma")?,
        };
        params.validate()?;
        Ok(params)
    }

    /// Saliency window/stride after resolving `auto` against the image extent.
    pub fn saliency_config(&self, image_extent: usize) -> Result<SaliencyConfig> {
        let window = match self.get("saliency.window") {
            "auto" | "0" => (image_extent / 8).max(1),
            _ => self.usize_key("saliency.window")?,
        };
        let stride = match self.get("saliency.stride") {
            "auto" | "0" => (window / 2).max(1),
            _ => self.usize_key("saliency.stride")?,
        };
        Ok(SaliencyConfig { window, stride })
    }
}
