//! Training runs with per-epoch logging and checkpoints, checkpoint
//! evaluation and attention export.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgagan_core::dataset::{fold_partition, TrainingSample};
use dgagan_core::eval::{self, attention_summary, attention_volume, evaluate_identity, evaluate_model, ReportRow};
use dgagan_core::models::ModelVariant;
use dgagan_core::train::{TrainConfig, Trainer};
use dgagan_core::volume::{Role, Volume};

use crate::checkpoint;
use crate::error::{csv_err, io, Error, Result};
use crate::lvol::write_volume;
use crate::report::{append_metric_row, fmt_metric, truncate_metric_log, MetricRow};

pub const CHECKPOINT: &str = "checkpoint.lckp";
pub const METRICS: &str = "metrics.csv";
pub const VISITS: &str = "visits.csv";

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT)
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS)
    }

    pub fn visits(&self) -> PathBuf {
        self.dir.join(VISITS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resume {
    /// Start from scratch, replacing any earlier run in the directory.
    Fresh,
    /// Continue from the directory's checkpoint when one exists.
    IfPresent,
}

/// Optional early stop, used to interrupt a run deliberately.
#[derive(Debug, Clone, Copy, Default)]
pub struct StopAfter(pub Option<usize>);

fn append_visits(path: &Path, epoch: usize, subjects: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["epoch", "position", "subject"]).map_err(csv_err(path))?;
    }
    for (i, s) in subjects.iter().enumerate() {
        w.write_record([epoch.to_string(), i.to_string(), s.clone()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

fn truncate_visits(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let rows: Vec<csv::StringRecord> = r
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(path))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["epoch", "position", "subject"]).map_err(csv_err(path))?;
    for row in rows.iter().filter(|r| r.get(0).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= keep)) {
        w.write_record(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

/// Trains `variant` on every fold except `fold`, appending one metric row
/// per epoch and rewriting the checkpoint after each epoch.
pub fn train_run(
    variant: ModelVariant,
    config: TrainConfig,
    samples: &[TrainingSample],
    fold: usize,
    paths: &RunPaths,
    resume: Resume,
    stop: StopAfter,
) -> Result<(Trainer, Vec<MetricRow>)> {
    fs::create_dir_all(&paths.dir).map_err(io(&paths.dir))?;
    let ckpt = paths.checkpoint();
    let mut trainer = match resume {
        Resume::IfPresent if ckpt.exists() => {
            let t = checkpoint::load(&ckpt)?;
            if t.variant() != variant || t.fold != fold {
                return Err(Error::Usage(format!(
                    "{}: checkpoint holds {} fold {}, asked for {variant} fold {fold}",
                    ckpt.display(),
                    t.variant(),
                    t.fold
                )));
            }
            t
        }
        _ => {
            for p in [paths.metrics(), paths.visits(), ckpt.clone()] {
                if p.exists() {
                    fs::remove_file(&p).map_err(io(&p))?;
                }
            }
            Trainer::new(variant, config, fold)?
        }
    };
    truncate_metric_log(&paths.metrics(), trainer.epochs_done)?;
    truncate_visits(&paths.visits(), trainer.epochs_done)?;
    let (train, _) = fold_partition(samples, fold);
    if train.is_empty() {
        return Err(Error::Usage(format!("fold {fold} leaves no training samples")));
    }
    let mut rows = Vec::new();
    while !trainer.is_finished() {
        if stop.0.is_some_and(|e| trainer.epochs_done >= e) {
            break;
        }
        let start = Instant::now();
        let metrics = trainer.run_epoch(&train)?;
        let row = MetricRow {
            variant: variant.name().into(),
            fold,
            metrics,
            wall_time: start.elapsed().as_secs_f64(),
        };
        append_metric_row(&paths.metrics(), &row)?;
        append_visits(&paths.visits(), row.metrics.epoch, &row.metrics.subjects)?;
        checkpoint::save(&ckpt, &trainer)?;
        rows.push(row);
    }
    Ok((trainer, rows))
}

/// Validation samples of `fold`.
pub fn validation(samples: &[TrainingSample], fold: usize) -> Vec<&TrainingSample> {
    fold_partition(samples, fold).1
}

/// Report rows of a trained model on its validation fold (or `fold`).
pub fn evaluate_checkpoint(trainer: &Trainer, samples: &[TrainingSample], fold: Option<usize>) -> Result<Vec<ReportRow>> {
    let val = validation(samples, fold.unwrap_or(trainer.fold));
    if val.is_empty() {
        return Err(Error::Usage(format!("fold {} has no validation samples", fold.unwrap_or(trainer.fold))));
    }
    Ok(evaluate_model(trainer.variant(), &trainer.models.generator, &val, trainer.config.patch)?)
}

pub fn identity_rows(samples: &[TrainingSample], fold: usize) -> Result<Vec<ReportRow>> {
    Ok(evaluate_identity(&validation(samples, fold))?)
}

/// Attention statistics of one exported sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub sample: String,
    pub map_path: PathBuf,
    pub mask_path: PathBuf,
    pub mean_inside: f64,
    pub mean_outside: f64,
    pub ratio: f64,
}

/// Writes the Grad-CAM volume and lesion mask of every validation sample
/// of a guided-attention checkpoint, plus `attention_summary.csv`.
pub fn export_attention(trainer: &Trainer, samples: &[TrainingSample], out: &Path) -> Result<Vec<AttentionExport>> {
    let variant = trainer.variant();
    let d = match (&trainer.models.discriminator, variant.spec().guided_attention) {
        (Some(d), true) => d,
        _ => {
            return Err(Error::Usage(format!(
                "attention export needs a {} checkpoint, found {variant}",
                ModelVariant::Dgagan
            )))
        }
    };
    fs::create_dir_all(out).map_err(io(out))?;
    let roi = variant.spec().t0_roi_channel;
    let mut exports = Vec::new();
    for s in validation(samples, trainer.fold) {
        let label = eval::sample_label(s);
        let map = attention_volume(d, s, trainer.config.patch, roi)?;
        let map_path = out.join(format!("{label}_attention.lvol"));
        let mask_path = out.join(format!("{label}_lesion.lvol"));
        write_volume(&map_path, &Volume::from_tensor(&map, Role::Attention)?)?;
        write_volume(&mask_path, &Volume::from_tensor(&s.lesion, Role::LesionMask)?)?;
        let summary = attention_summary(&map, s)
            .ok_or_else(|| Error::Usage(format!("sample {label}: lesion mask is empty or covers the volume")))?;
        exports.push(AttentionExport {
            sample: label,
            map_path,
            mask_path,
            mean_inside: summary.mean_inside,
            mean_outside: summary.mean_outside,
            ratio: summary.ratio,
        });
    }
    let path = out.join("attention_summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["sample", "mean_inside", "mean_outside", "ratio"]).map_err(csv_err(&path))?;
    for e in &exports {
        w.write_record([e.sample.clone(), fmt_metric(e.mean_inside), fmt_metric(e.mean_outside), fmt_metric(e.ratio)])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io(&path))?;
    Ok(exports)
}
