use super::*;
use crate::data::split::split;
use crate::data::synth::{synth_generate, SynthParams};
use crate::data::{ingest_dataset, Dataset};
use crate::model::{build_resnet, ModelConfig, Variant};

fn tiny_synth(subjects: usize, per_subject: usize) -> Dataset {
    let tmp = tempfile::tempdir().unwrap();
    let params = SynthParams {
        num_subjects: subjects,
        images_per_subject: per_subject,
        image_size: 16,
        ..Default::default()
    };
    synth_generate(&params, tmp.path()).unwrap();
    ingest_dataset(tmp.path()).unwrap()
}

fn mini_model(classes: usize) -> Model<f32> {
    let config = ModelConfig::new(Variant::ResnetMini, 1, 16, classes).unwrap();
    build_resnet(config, 11).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        augment: AugmentationSpec {
            factor: 1,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn huge_lambda_shrinks_head_norm_every_epoch() {
    let ds = tiny_synth(3, 6);
    let plan = split(&ds, 0, 1).unwrap();
    let mut model = mini_model(3);
    let config = TrainConfig {
        lambda1: 1e6,
        ..quick_config(5)
    };
    let report = train(&mut model, &ds, &plan, &config).unwrap();
    assert_eq!(report.epochs.len(), 5);
    for w in report.epochs.windows(2) {
        assert!(
            w[1].head_frobenius_sq < w[0].head_frobenius_sq,
            "head norm must strictly decrease: {} -> {}",
            w[0].head_frobenius_sq,
            w[1].head_frobenius_sq
        );
    }
}

#[test]
fn fixed_seed_reproduces_the_report() {
    let ds = tiny_synth(3, 6);
    let plan = split(&ds, 1, 1).unwrap();
    let config = quick_config(2);
    let run = |ds: &Dataset| {
        let mut model = mini_model(3);
        train(&mut model, ds, &plan, &config).unwrap()
    };
    let a = run(&ds);
    let b = run(&ds);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.best_checkpoint, b.best_checkpoint, "checkpoint bytes differ");
    for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
        assert_eq!(ea.train_accuracy, eb.train_accuracy);
        assert_eq!(ea.val_accuracy, eb.val_accuracy);
    }
}

#[test]
fn head_only_training_leaves_body_bitwise_unchanged() {
    let ds = tiny_synth(3, 6);
    let plan = split(&ds, 2, 1).unwrap();
    let mut model = mini_model(3);
    let body_before: Vec<(String, Vec<u32>)> = model
        .params()
        .iter()
        .filter(|p| !p.name.starts_with("head."))
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    let head_before: Vec<u32> = model
        .head_weight()
        .value
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();

    let config = TrainConfig {
        trainable: TrainableSelector::HeadOnly,
        bn_freeze: true,
        ..quick_config(5)
    };
    train(&mut model, &ds, &plan, &config).unwrap();

    for (name, bits) in &body_before {
        let p = model.params().into_iter().find(|p| &p.name == name).unwrap();
        let now: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(&now, bits, "{name} drifted under head-only training");
    }
    let head_after: Vec<u32> = model
        .head_weight()
        .value
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    assert_ne!(head_before, head_after, "head must actually train");
}

#[test]
fn full_training_moves_every_parameter() {
    let ds = tiny_synth(3, 6);
    let plan = split(&ds, 3, 1).unwrap();
    let mut model = mini_model(3);
    let before: Vec<Vec<u32>> = model
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let config = quick_config(3);
    train(&mut model, &ds, &plan, &config).unwrap();
    for (p, snap) in model.params().iter().zip(&before) {
        let now: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
        assert_ne!(&now, snap, "{} did not move under full fine-tuning", p.name);
    }
}

#[test]
fn constant_predictor_scores_one_over_k() {
    let ds = tiny_synth(4, 6);
    let plan = split(&ds, 4, 1).unwrap();
    let idx = plan.indices(&ds).unwrap();
    let model = mini_model(4);
    // Zero head: all logits 0, ties resolve to class 0.
    let w = &model.head_weight().value;
    w.set_data(&vec![0.0; w.numel()]);
    let b = &model.params().into_iter().find(|p| p.name == "head.bias").unwrap().value;
    b.set_data(&vec![0.0; b.numel()]);

    let report = evaluate(&model, &ds, &idx.test).unwrap();
    assert!((report.accuracy - 0.25).abs() < 1e-12, "{}", report.accuracy);
    // Confusion: every prediction lands in column 0.
    for (i, row) in report.confusion.chunks(4).enumerate() {
        assert_eq!(row[0], 4, "row {i}: {row:?}");
        assert_eq!(row[1..].iter().sum::<usize>(), 0);
    }
    let trace: usize = (0..4).map(|i| report.confusion[i * 4 + i]).sum();
    assert_eq!(trace as f64 / report.total as f64, report.accuracy);
}

#[test]
fn confusion_rows_match_test_counts_and_csv_shape() {
    let ds = tiny_synth(3, 7);
    let plan = split(&ds, 5, 2).unwrap();
    let idx = plan.indices(&ds).unwrap();
    let model = mini_model(3);
    let report = evaluate(&model, &ds, &idx.test).unwrap();
    for row in report.confusion.chunks(3) {
        assert_eq!(row.iter().sum::<usize>(), 4, "4 test images per subject");
    }
    let csv = report.confusion_csv();
    assert_eq!(csv.lines().count(), 4, "header plus one row per class");
    assert!(csv.starts_with("class,s000,s001,s002"));
    let summary = report.summary_csv();
    assert!(summary.contains("(all),"));
}

#[test]
fn rejects_empty_test_and_class_mismatch() {
    let ds = tiny_synth(3, 6);
    let model = mini_model(3);
    assert!(evaluate(&model, &ds, &[]).is_err());
    let wrong = mini_model(5);
    assert!(evaluate(&wrong, &ds, &[0]).is_err());

    let plan = split(&ds, 6, 1).unwrap();
    let mut wrong = mini_model(5);
    assert!(train(&mut wrong, &ds, &plan, &quick_config(1)).is_err());
}

#[test]
fn early_stop_cuts_the_run() {
    let ds = tiny_synth(3, 6);
    let plan = split(&ds, 7, 1).unwrap();
    let mut model = mini_model(3);
    let config = TrainConfig {
        early_stop_patience: 2,
        ..quick_config(50)
    };
    let report = train(&mut model, &ds, &plan, &config).unwrap();
    assert!(
        report.epochs.len() < 50,
        "with patience 2 the run should stop early (ran {} epochs)",
        report.epochs.len()
    );
    let last = report.epochs.last().unwrap().epoch;
    assert_eq!(last - report.best_epoch, 2, "stopped exactly at patience");
}

#[test]
fn best_epoch_maximizes_validation_accuracy() {
    let ds = tiny_synth(3, 8);
    let plan = split(&ds, 8, 1).unwrap();
    let mut model = mini_model(3);
    let report = train(&mut model, &ds, &plan, &quick_config(4)).unwrap();
    let max = report
        .epochs
        .iter()
        .map(|e| e.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_val_accuracy, max);
    let first_max = report.epochs.iter().find(|e| e.val_accuracy == max).unwrap();
    assert_eq!(report.best_epoch, first_max.epoch, "ties keep the earliest");
    // The snapshot is loadable and carries the epoch in its metadata.
    let loaded = crate::model::checkpoint::checkpoint_from_bytes(&report.best_checkpoint).unwrap();
    let meta = loaded.metadata();
    let epoch_meta = meta.iter().find(|(k, _)| k == "epoch").unwrap();
    assert_eq!(epoch_meta.1, report.best_epoch.to_string());
}

#[test]
fn csv_preamble_echoes_config() {
    let report = TrainReport {
        epochs: vec![EpochStats {
            epoch: 1,
            train_loss: 1.5,
            train_accuracy: 0.25,
            val_accuracy: 0.5,
            head_frobenius_sq: 0.0,
        }],
        best_epoch: 1,
        best_val_accuracy: 0.5,
        best_checkpoint: Vec::new(),
    };
    let echo = vec![
        ("train.batch_size".to_string(), "24".to_string()),
        ("train.learning_rate".to_string(), "0.0001".to_string()),
        ("train.epochs".to_string(), "100".to_string()),
    ];
    let csv = report.to_csv(&echo);
    assert!(csv.contains("# train.batch_size=24\n"));
    assert!(csv.contains("# train.learning_rate=0.0001\n"));
    assert!(csv.contains("# train.epochs=100\n"));
    assert!(csv.contains("epoch,train_loss,train_acc,val_acc\n"));
    assert!(csv.ends_with("1,1.500000,0.250000,0.500000\n"));
}
