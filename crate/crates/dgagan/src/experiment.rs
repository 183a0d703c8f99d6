//! The seeded desk-scale comparison: phantom cohort, every variant on every
//! fold, evaluation against the identity baseline and attention export.

use std::path::{Path, PathBuf};

use dgagan_core::dataset::kfold_split;
use dgagan_core::eval::{summarize, ReportRow, SummaryRow};
use dgagan_core::models::ModelVariant;
use dgagan_core::phantom::{generate_phantom_cohort, PhantomConfig};
use dgagan_core::train::TrainConfig;

use crate::error::Result;
use crate::manifest::{self, load_samples, write_cohort};
use crate::report::{self, append_metric_row, write_report, write_summary};
use crate::run::{self, export_attention, AttentionExport, Resume, RunPaths, StopAfter};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub subjects: usize,
    pub extents: [usize; 3],
    pub folds: usize,
    pub seed: u64,
    pub variants: Vec<ModelVariant>,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Five 32³ subjects, five folds, all variants with the desk settings.
    pub fn desk(seed: u64) -> Self {
        Self {
            subjects: 5,
            extents: [32; 3],
            folds: 5,
            seed,
            variants: ModelVariant::ALL.to_vec(),
            train: TrainConfig::desk(seed),
        }
    }
}

/// Outcome of one variant on one held-out fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub variant: ModelVariant,
    pub fold: usize,
    pub first_l1: f64,
    pub last_l1: f64,
    pub rows: Vec<ReportRow>,
    pub attention: Vec<AttentionExport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub runs: Vec<FoldOutcome>,
    pub identity: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

pub const COHORT_DIR: &str = "cohort";
pub const METRICS: &str = "metrics.csv";
pub const REPORT: &str = "report.csv";
pub const SUMMARY: &str = "summary.csv";

impl ExperimentOutcome {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS)
    }

    pub fn variant_runs(&self, v: ModelVariant) -> impl Iterator<Item = &FoldOutcome> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Pooled summary row of `variant` (`identity` for the baseline).
    pub fn pooled(&self, variant: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.fold.is_none())
    }

    /// Variants ordered by pooled lesion-ROI PSNR std, smallest first.
    pub fn roi_std_ordering(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = ModelVariant::ALL
            .iter()
            .filter_map(|v| self.pooled(v.name()).map(|r| (v.name().to_string(), r.psnr_roi.std)))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1));
        out
    }
}

pub fn run_dir(out: &Path, variant: ModelVariant, fold: usize) -> PathBuf {
    out.join("runs").join(variant.name()).join(format!("fold{fold}"))
}

/// Runs the whole comparison under `out`, from scratch.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    let cohort = generate_phantom_cohort(&PhantomConfig::new(cfg.subjects, cfg.extents, cfg.seed))?;
    let folds = kfold_split(cfg.subjects, cfg.folds, cfg.seed)?;
    let cohort_dir = out.join(COHORT_DIR);
    write_cohort(&cohort_dir, &cohort, &folds, cfg.folds, cfg.seed)?;
    let (_, samples) = load_samples(&cohort_dir.join(manifest::FILE_NAME))?;

    let metrics = out.join(METRICS);
    if metrics.exists() {
        std::fs::remove_file(&metrics).map_err(crate::error::io(&metrics))?;
    }
    let mut runs = Vec::new();
    let mut identity = Vec::new();
    for fold in 0..cfg.folds {
        identity.extend(run::identity_rows(&samples, fold)?);
    }
    for &variant in &cfg.variants {
        for fold in 0..cfg.folds {
            let paths = RunPaths::new(run_dir(out, variant, fold));
            let (trainer, log) = run::train_run(variant, cfg.train.clone(), &samples, fold, &paths, Resume::Fresh, StopAfter::default())?;
            for row in &log {
                append_metric_row(&metrics, row)?;
            }
            let rows = run::evaluate_checkpoint(&trainer, &samples, None)?;
            let attention = if variant.spec().guided_attention {
                export_attention(&trainer, &samples, &out.join("attention").join(format!("fold{fold}")))?
            } else {
                Vec::new()
            };
            runs.push(FoldOutcome {
                variant,
                fold,
                first_l1: log.first().map_or(f64::NAN, |r| r.metrics.l1),
                last_l1: log.last().map_or(f64::NAN, |r| r.metrics.l1),
                rows,
                attention,
            });
        }
    }
    let all: Vec<ReportRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).chain(identity.iter().cloned()).collect();
    write_report(&out.join(REPORT), &all)?;
    let summary = summarize(&all);
    write_summary(&out.join(SUMMARY), &summary)?;
    Ok(ExperimentOutcome {
        dir: out.to_path_buf(),
        runs,
        identity,
        summary,
    })
}

/// Metric log rows with the wall-clock column dropped, for run-to-run
/// comparison.
pub fn deterministic_metric_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let wall = report::METRIC_HEADER.iter().position(|h| *h == "wall_time");
    Ok(report::read_metric_log(path)?
        .into_iter()
        .map(|mut r| {
            if let Some(i) = wall {
                r.remove(i);
            }
            r
        })
        .collect())
}
