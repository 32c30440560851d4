//! Command-line surface: synth, split, train, eval, saliency.
//!
//! Exit codes: 0 on success, 1 on usage/configuration errors, 2 on
//! data/model errors — each with a one-line diagnostic on stderr. Every run
//! writes its fully-resolved configuration alongside its outputs; re-running
//! from that echoed file reproduces the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::pnm;
use crate::data::split::{split, SplitPlan};
use crate::data::synth::synth_generate;
use crate::data::{ingest_dataset, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::checkpoint::load_checkpoint;
use crate::model::{build_resnet, Model};
use crate::saliency::{occlusion_sweep, render_map};
use crate::trainer::{evaluate, train_with};

#[derive(Parser)]
#[command(
    name = "ridgenet",
    about = "Few-shot fingerprint recognition: synthesize data, split, train, evaluate, explain",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// key=value config file (defaults apply for missing keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set train.epochs=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ridge-image dataset
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of subjects
        #[arg(long)]
        subjects: Option<usize>,
        /// Images per subject
        #[arg(long = "per-subject")]
        per_subject: Option<usize>,
        /// Image side length in pixels
        #[arg(long)]
        size: Option<usize>,
        /// Generator seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a per-subject train/val/test split plan
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset root directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split seed
        #[arg(long)]
        seed: Option<u64>,
        /// Validation images per subject
        #[arg(long = "val-per-subject")]
        val_per_subject: Option<usize>,
        /// Output plan file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and keep the best-validation-epoch checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split plan file (computed from train.split_seed when absent)
        #[arg(long)]
        split: Option<PathBuf>,
        /// Starting checkpoint (fresh initialization when absent)
        #[arg(long = "checkpoint-in")]
        checkpoint_in: Option<PathBuf>,
        /// Where to write the best checkpoint
        #[arg(long = "checkpoint-out")]
        checkpoint_out: Option<PathBuf>,
        /// Report directory
        #[arg(long = "report-dir")]
        report_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test subset of a split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split plan file
        #[arg(long)]
        split: Option<PathBuf>,
        /// Report directory
        #[arg(long = "report-dir")]
        report_dir: Option<PathBuf>,
    },
    /// Occlusion-sensitivity map for one image
    Saliency {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image to explain (PGM/PPM)
        #[arg(long)]
        image: Option<PathBuf>,
        /// True class index of the image
        #[arg(long)]
        label: Option<usize>,
        /// Occluder side length N
        #[arg(long)]
        window: Option<usize>,
        /// Occluder stride S
        #[arg(long)]
        stride: Option<usize>,
        /// Output prefix for the map files
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            }
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve_config(common: &Common, overrides: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for pair in &common.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        config.set(k.trim(), v)?;
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    Ok(config)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn require_path(config: &RunConfig, key: &str, what: &str) -> Result<PathBuf> {
    let v = config.get(key);
    if v.is_empty() {
        return Err(Error::Config(format!(
            "{what} is required (configuration key \"{key}\")"
        )));
    }
    Ok(PathBuf::from(v))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            subjects,
            per_subject,
            size,
            seed,
            out,
        } => {
            let config = resolve_config(
                &common,
                &[
                    ("synth.subjects", subjects.map(|v| v.to_string())),
                    ("synth.per_subject", per_subject.map(|v| v.to_string())),
                    ("synth.size", size.map(|v| v.to_string())),
                    ("synth.seed", seed.map(|v| v.to_string())),
                    ("paths.out", path_str(&out)),
                ],
            )?;
            let params = config.synth_params()?;
            let out_dir = require_path(&config, "paths.out", "the output directory (--out)")?;
            synth_generate(&params, &out_dir)?;
            config.write_echo(out_dir.join("config_echo.txt"))?;
            println!(
                "wrote {} subjects x {} images ({}px) to {}",
                params.num_subjects,
                params.images_per_subject,
                params.image_size,
                out_dir.display()
            );
            Ok(())
        }
        Command::Split {
            common,
            data,
            seed,
            val_per_subject,
            out,
        } => {
            let config = resolve_config(
                &common,
                &[
                    ("paths.data_root", path_str(&data)),
                    ("train.split_seed", seed.map(|v| v.to_string())),
                    ("train.val_per_subject", val_per_subject.map(|v| v.to_string())),
                    ("paths.out", path_str(&out)),
                ],
            )?;
            let root = require_path(&config, "paths.data_root", "the dataset root (--data)")?;
            let out_file = require_path(&config, "paths.out", "the output file (--out)")?;
            let dataset = ingest_dataset(&root)?;
            let plan = split(
                &dataset,
                config.u64_key("train.split_seed")?,
                config.usize_key("train.val_per_subject")?,
            )?;
            plan.save(&out_file)?;
            config.write_echo(sibling_echo(&out_file))?;
            let idx = plan.indices(&dataset)?;
            println!(
                "split {} subjects: {} train / {} val / {} test -> {}",
                dataset.num_classes(),
                idx.train.len(),
                idx.val.len(),
                idx.test.len(),
                out_file.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            data,
            split: split_file,
            checkpoint_in,
            checkpoint_out,
            report_dir,
        } => {
            let config = resolve_config(
                &common,
                &[
                    ("paths.data_root", path_str(&data)),
                    ("paths.split_file", path_str(&split_file)),
                    ("paths.checkpoint_in", path_str(&checkpoint_in)),
                    ("paths.checkpoint_out", path_str(&checkpoint_out)),
                    ("paths.report_dir", path_str(&report_dir)),
                ],
            )?;
            run_train(&config)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split: split_file,
            report_dir,
        } => {
            let config = resolve_config(
                &common,
                &[
                    ("paths.checkpoint_in", path_str(&checkpoint)),
                    ("paths.data_root", path_str(&data)),
                    ("paths.split_file", path_str(&split_file)),
                    ("paths.report_dir", path_str(&report_dir)),
                ],
            )?;
            run_eval(&config)
        }
        Command::Saliency {
            common,
            checkpoint,
            image,
            label,
            window,
            stride,
            out,
        } => {
            let config = resolve_config(
                &common,
                &[
                    ("paths.checkpoint_in", path_str(&checkpoint)),
                    ("saliency.image", path_str(&image)),
                    ("saliency.label", label.map(|v| v.to_string())),
                    ("saliency.window", window.map(|v| v.to_string())),
                    ("saliency.stride", stride.map(|v| v.to_string())),
                    ("paths.out", path_str(&out)),
                ],
            )?;
            run_saliency(&config)
        }
    }
}

fn sibling_echo(out_file: &Path) -> PathBuf {
    let mut name = out_file.file_name().unwrap_or_default().to_os_string();
    name.push(".config_echo.txt");
    out_file.with_file_name(name)
}

fn load_or_build_model(config: &RunConfig, dataset: &Dataset) -> Result<Model<f32>> {
    let checkpoint_in = config.get("paths.checkpoint_in");
    if checkpoint_in.is_empty() {
        let model_config = config.model_config(dataset.num_classes())?;
        build_resnet(model_config, config.u64_key("model.init_seed")?)
    } else {
        let mut model = load_checkpoint(checkpoint_in)?;
        let classes = config.num_classes(dataset.num_classes())?;
        if model.config.num_classes != classes {
            // Transfer: keep the pre-trained body, swap the head.
            model.replace_head(classes, config.u64_key("model.init_seed")?)?;
        }
        Ok(model)
    }
}

fn run_train(config: &RunConfig) -> Result<()> {
    let root = require_path(config, "paths.data_root", "the dataset root (--data)")?;
    let report_dir = PathBuf::from(config.get("paths.report_dir"));
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;

    let dataset = ingest_dataset(&root)?;
    let split_file = config.get("paths.split_file");
    let plan = if split_file.is_empty() {
        let plan = split(
            &dataset,
            config.u64_key("train.split_seed")?,
            config.usize_key("train.val_per_subject")?,
        )?;
        plan.save(report_dir.join("split.tsv"))?;
        plan
    } else {
        SplitPlan::load(split_file)?
    };

    let mut model = load_or_build_model(config, &dataset)?;
    let train_config = config.train_config()?;
    let report = train_with(&mut model, &dataset, &plan, &train_config, |e| {
        eprintln!(
            "epoch {}: train_loss={:.6} train_acc={:.4} val_acc={:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
        );
    })?;

    let report_path = report_dir.join("train_report.csv");
    std::fs::write(&report_path, report.to_csv(&config.echo_pairs()))
        .map_err(|e| Error::io(&report_path, e))?;

    let checkpoint_out = match config.get("paths.checkpoint_out") {
        "" => report_dir.join("best.fpnt"),
        p => PathBuf::from(p),
    };
    std::fs::write(&checkpoint_out, &report.best_checkpoint)
        .map_err(|e| Error::io(&checkpoint_out, e))?;
    config.write_echo(report_dir.join("config_echo.txt"))?;

    println!(
        "best validation accuracy {:.6} at epoch {} ({} epochs run); checkpoint: {}",
        report.best_val_accuracy,
        report.best_epoch,
        report.epochs.len(),
        checkpoint_out.display()
    );
    Ok(())
}

fn run_eval(config: &RunConfig) -> Result<()> {
    let checkpoint = require_path(config, "paths.checkpoint_in", "the checkpoint (--checkpoint)")?;
    let root = require_path(config, "paths.data_root", "the dataset root (--data)")?;
    let split_file = require_path(config, "paths.split_file", "the split plan (--split)")?;
    let report_dir = PathBuf::from(config.get("paths.report_dir"));
    std::fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;

    let model = load_checkpoint(&checkpoint)?;
    let dataset = ingest_dataset(&root)?;
    let plan = SplitPlan::load(&split_file)?;
    let idx = plan.indices(&dataset)?;
    let report = evaluate(&model, &dataset, &idx.test)?;

    let confusion_path = report_dir.join("confusion.csv");
    std::fs::write(&confusion_path, report.confusion_csv())
        .map_err(|e| Error::io(&confusion_path, e))?;
    let summary_path = report_dir.join("eval_summary.csv");
    std::fs::write(&summary_path, report.summary_csv())
        .map_err(|e| Error::io(&summary_path, e))?;
    config.write_echo(report_dir.join("config_echo.txt"))?;

    println!("test accuracy {:.6} on {} samples", report.accuracy, report.total);
    Ok(())
}

fn run_saliency(config: &RunConfig) -> Result<()> {
    let checkpoint = require_path(config, "paths.checkpoint_in", "the checkpoint (--checkpoint)")?;
    let image_path = require_path(config, "saliency.image", "the input image (--image)")?;
    let out_prefix = require_path(config, "paths.out", "the output prefix (--out)")?;
    let label = config.usize_key("saliency.label")?;

    let model = load_checkpoint(&checkpoint)?;
    let image = pnm::read_pnm(&image_path)?;
    let saliency_config = config.saliency_config(image.width.min(image.height))?;
    let sample = Sample {
        subject_id: label,
        subject_name: format!("class{label}"),
        image_name: image_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        image,
        source_path: image_path.clone(),
        is_augmented: false,
    };
    let map = occlusion_sweep(&model, &sample, &saliency_config)?;
    let files = render_map(&map, &out_prefix)?;
    config.write_echo(PathBuf::from(format!(
        "{}_config_echo.txt",
        out_prefix.to_string_lossy()
    )))?;

    let flips = map.records.iter().filter(|r| r.flipped).count();
    println!(
        "baseline class {} (true-class prob {:.4}); {}x{} grid, {} of {} windows flip; files: {}",
        map.baseline_class,
        map.baseline_true_prob,
        map.grid_w,
        map.grid_h,
        flips,
        map.records.len(),
        files
            .iter()
            .map(|f| f.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(run(["ridgenet"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["ridgenet", "--help"]), 0);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["ridgenet", "frobnicate"]), 1);
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        assert_eq!(
            run(["ridgenet", "synth", "--set", "bogus.key=1", "--out", "/tmp/x"]),
            1
        );
    }

    #[test]
    fn missing_required_path_is_usage_error() {
        assert_eq!(run(["ridgenet", "synth"]), 1, "no --out");
    }

    #[test]
    fn missing_data_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        let missing = tmp.path().join("nope");
        assert_eq!(
            run([
                "ridgenet",
                "split",
                "--data",
                missing.to_str().unwrap(),
                "--out",
                tmp.path().join("plan.tsv").to_str().unwrap(),
            ]),
            2
        );
    }
}
