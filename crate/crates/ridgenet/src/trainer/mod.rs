//! Training loop with validation-based epoch selection, and evaluation.
//!
//! Each epoch shuffles the (augmentation-expanded) train set with a seeded
//! generator, steps the optimizer over batches, measures validation
//! accuracy, and snapshots the best-epoch checkpoint (ties keep the earliest
//! epoch). Evaluation runs eval-mode forwards over un-augmented inputs and
//! reports top-1 accuracy, per-class accuracy, and a confusion matrix.

pub mod adam;
pub mod loss;

use rand::seq::SliceRandom;

use crate::data::augment::{augment, AugmentationSpec};
use crate::data::preprocess::{batch_tensor, preprocess};
use crate::data::split::SplitPlan;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::checkpoint::checkpoint_to_bytes;
use crate::model::{Model, TrainableSelector};
use crate::rng;
use crate::tensor::ops::Phase;
use crate::tensor::no_grad;

pub use adam::{Optimizer, OptimizerKind};

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the Frobenius penalty on the head weights.
    pub lambda1: f64,
    pub optimizer: OptimizerKind,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Use (and keep) running statistics in normalization layers while
    /// training.
    pub bn_freeze: bool,
    pub trainable: TrainableSelector,
    pub augment: AugmentationSpec,
    /// Stop when validation accuracy has not improved for this many epochs
    /// (0 disables the rule).
    pub early_stop_patience: usize,
    /// Stop once an epoch's train accuracy reaches this value (0 disables).
    pub stop_at_train_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 24,
            learning_rate: 1e-4,
            lambda1: 1e-4,
            optimizer: OptimizerKind::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            bn_freeze: false,
            trainable: TrainableSelector::All,
            augment: AugmentationSpec::default(),
            early_stop_patience: 0,
            stop_at_train_accuracy: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive".to_string()));
        }
        if self.lambda1 < 0.0 {
            return Err(Error::invalid("lambda1 must be nonnegative".to_string()));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Squared Frobenius norm of the head weights after the epoch.
    pub head_frobenius_sq: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based; maximizes validation accuracy, earliest on ties.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Serialized checkpoint of the best-epoch model.
    pub best_checkpoint: Vec<u8>,
}

impl TrainReport {
    /// CSV: `# key=value` preamble (the resolved config), then per-epoch rows.
    pub fn to_csv(&self, config_echo: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in config_echo {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&format!("# best_epoch={}\n", self.best_epoch));
        out.push_str("epoch,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Per-class accuracy; classes absent from the test set report 0.
    pub per_class: Vec<f64>,
    /// Row-major `[true][predicted]` counts.
    pub confusion: Vec<usize>,
    pub class_names: Vec<String>,
    pub total: usize,
}

impl EvalReport {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Confusion matrix CSV with class identifiers on the header row and
    /// column.
    pub fn confusion_csv(&self) -> String {
        let c = self.num_classes();
        let mut out = String::from("class");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..c {
                out.push_str(&format!(",{}", self.confusion[i * c + j]));
            }
            out.push('\n');
        }
        out
    }

    /// Accuracy summary CSV: overall line then one line per class.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("class,accuracy,test_count\n");
        out.push_str(&format!("(all),{:.6},{}\n", self.accuracy, self.total));
        let c = self.num_classes();
        for (i, name) in self.class_names.iter().enumerate() {
            let row_total: usize = self.confusion[i * c..(i + 1) * c].iter().sum();
            out.push_str(&format!(",{:.6},{}\n", self.per_class[i], row_total).replacen(',', &format!("{name},"), 1));
        }
        out
    }
}

/// Index of the row maximum; ties resolve to the lowest class index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct PreparedSet {
    rows: Vec<Vec<f32>>,
    labels: Vec<usize>,
}

fn prepare_eval_set(
    dataset: &Dataset,
    indices: &[usize],
    size: usize,
    channels: usize,
) -> Result<PreparedSet> {
    let mut rows = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        rows.push(preprocess(&s.image, size, channels)?);
        labels.push(s.subject_id);
    }
    Ok(PreparedSet { rows, labels })
}

/// Fine-tune `model` on the train subset of `plan`, selecting the best epoch
/// by validation accuracy.
pub fn train(
    model: &mut Model<f32>,
    dataset: &Dataset,
    plan: &SplitPlan,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, dataset, plan, config, |_| {})
}

/// [`train`] with a per-epoch observer (progress lines, live plotting).
pub fn train_with(
    model: &mut Model<f32>,
    dataset: &Dataset,
    plan: &SplitPlan,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    config.validate()?;
    let idx = plan.indices(dataset)?;
    if idx.train.is_empty() || idx.val.is_empty() || idx.test.is_empty() {
        return Err(Error::Data(format!(
            "split must have nonempty train/val/test subsets, got {}/{}/{}",
            idx.train.len(),
            idx.val.len(),
            idx.test.len()
        )));
    }
    if dataset.num_classes() != model.config.num_classes {
        return Err(Error::invalid(format!(
            "model head width {} does not match the dataset's {} classes",
            model.config.num_classes,
            dataset.num_classes()
        )));
    }
    model.set_trainable(config.trainable)?;

    let size = model.config.input_size;
    let channels = model.config.input_channels;
    let classes = model.config.num_classes;

    // Expand the train set by the augmentation factor and cache every
    // network input up front. Augmented images are pure functions of
    // (seed, sample uid, draw), so the cache is valid across epochs.
    let mut entries: Vec<(usize, usize)> = Vec::new(); // (position in cache, label)
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for &i in &idx.train {
        let sample = &dataset.samples[i];
        for draw in 0..config.augment.factor {
            let augmented = augment(sample, &config.augment, draw)?;
            rows.push(preprocess(&augmented.image, size, channels)?);
            labels.push(sample.subject_id);
            entries.push((rows.len() - 1, sample.subject_id));
        }
    }
    let val = prepare_eval_set(dataset, &idx.val, size, channels)?;

    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.adam_betas,
        config.adam_eps,
    );
    let mut shuffle_rng = rng::stream(rng::mix(&[0x7472_61696e, config.seed]));
    let params = model.params();

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: -1.0,
        best_checkpoint: Vec::new(),
    };

    for epoch in 1..=config.epochs {
        entries.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_no, chunk) in entries.chunks(config.batch_size).enumerate() {
            let batch_rows: Vec<Vec<f32>> = chunk.iter().map(|&(r, _)| rows[r].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&(_, l)| l).collect();
            let x = batch_tensor(&batch_rows, channels, size).map_err(|e| {
                Error::Data(format!("epoch {epoch}, batch {batch_no}: {e}"))
            })?;
            let p = loss::one_hot::<f32>(&batch_labels, classes)?;

            let logits = model.forward_with(&x, Phase::Train, config.bn_freeze)?;
            let loss = loss::total_loss(&logits, &p, &model.head_weight().value, config.lambda1)?;

            model.zero_grads();
            loss.backward()?;
            optimizer.step(&params)?;

            loss_sum += loss.item() as f64 * chunk.len() as f64;
            let ld = logits.data();
            for (bi, &lab) in batch_labels.iter().enumerate() {
                if argmax_row(&ld[bi * classes..(bi + 1) * classes]) == lab {
                    correct += 1;
                }
            }
        }

        let train_loss = loss_sum / entries.len() as f64;
        let train_accuracy = correct as f64 / entries.len() as f64;
        let val_accuracy = accuracy_on(model, &val, config.batch_size, classes)?;
        let head_frobenius_sq = model
            .head_weight()
            .value
            .data()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum();

        if val_accuracy > report.best_val_accuracy {
            report.best_val_accuracy = val_accuracy;
            report.best_epoch = epoch;
            model.set_meta("epoch", &epoch.to_string());
            model.set_meta("val_accuracy", &format!("{val_accuracy:.6}"));
            report.best_checkpoint = checkpoint_to_bytes(model);
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            train_accuracy,
            val_accuracy,
            head_frobenius_sq,
        };
        on_epoch(&stats);
        report.epochs.push(stats);

        if config.stop_at_train_accuracy > 0.0 && train_accuracy >= config.stop_at_train_accuracy {
            break;
        }
        if config.early_stop_patience > 0 && epoch - report.best_epoch >= config.early_stop_patience
        {
            break;
        }
    }
    Ok(report)
}

fn accuracy_on(
    model: &Model<f32>,
    set: &PreparedSet,
    batch_size: usize,
    classes: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for (rows, labs) in set
        .rows
        .chunks(batch_size)
        .zip(set.labels.chunks(batch_size))
    {
        let x = batch_tensor(rows, model.config.input_channels, model.config.input_size)?;
        let logits = no_grad(|| model.forward(&x, Phase::Eval))?;
        let ld = logits.data();
        for (bi, &lab) in labs.iter().enumerate() {
            if argmax_row(&ld[bi * classes..(bi + 1) * classes]) == lab {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.rows.len() as f64)
}

/// Evaluate on a test subset: eval-mode forwards, no augmentation.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset, test_indices: &[usize]) -> Result<EvalReport> {
    if test_indices.is_empty() {
        return Err(Error::Data("evaluation needs a nonempty test set".to_string()));
    }
    if dataset.num_classes() != model.config.num_classes {
        return Err(Error::invalid(format!(
            "model head width {} does not match the dataset's {} classes",
            model.config.num_classes,
            dataset.num_classes()
        )));
    }
    let classes = model.config.num_classes;
    let set = prepare_eval_set(
        dataset,
        test_indices,
        model.config.input_size,
        model.config.input_channels,
    )?;

    let mut confusion = vec![0usize; classes * classes];
    for (rows, labs) in set.rows.chunks(32).zip(set.labels.chunks(32)) {
        let x = batch_tensor(rows, model.config.input_channels, model.config.input_size)?;
        let logits = no_grad(|| model.forward(&x, Phase::Eval))?;
        let ld = logits.data();
        for (bi, &lab) in labs.iter().enumerate() {
            let pred = argmax_row(&ld[bi * classes..(bi + 1) * classes]);
            confusion[lab * classes + pred] += 1;
        }
    }

    let total = set.rows.len();
    let trace: usize = (0..classes).map(|i| confusion[i * classes + i]).sum();
    let per_class = (0..classes)
        .map(|i| {
            let row: usize = confusion[i * classes..(i + 1) * classes].iter().sum();
            if row == 0 {
                0.0
            } else {
                confusion[i * classes + i] as f64 / row as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: trace as f64 / total as f64,
        per_class,
        confusion,
        class_names: dataset.classes.clone(),
        total,
    })
}

#[cfg(test)]
mod tests;
