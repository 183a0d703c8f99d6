//! Command-line surface of the `dgagan` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dgagan_core::dataset::kfold_split;
use dgagan_core::eval::summarize;
use dgagan_core::gradcheck;
use dgagan_core::models::ModelVariant;
use dgagan_core::phantom::{generate_phantom_cohort, PhantomConfig};
use dgagan_core::train::TrainConfig;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentConfig, SUMMARY};
use crate::manifest::{load_samples, write_cohort, FILE_NAME};
use crate::report::{fmt_metric, write_report, write_summary};
use crate::run::{self, export_attention, Resume, RunPaths, StopAfter};

#[derive(Debug, Parser)]
#[command(name = "dgagan", version, about = "Lesion-focused follow-up FLAIR prediction with attention-guided GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort and its manifest.
    PhantomGen(PhantomArgs),
    /// Train one variant with one fold held out.
    Train(TrainArgs),
    /// Score a checkpoint on its held-out fold.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Export discriminator attention maps of a guided checkpoint.
    AttnExport(AttnArgs),
    /// Run the full seeded comparison on a fresh phantom cohort.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 5)]
    pub subjects: usize,
    /// Volume extents as D,H,W (or one value for a cube).
    #[arg(long, value_parser = parse_extents, default_value = "32")]
    pub extents: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 3)]
    pub lesions: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: ModelVariant,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory for the checkpoint and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Cubic patch edge.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Continue from the checkpoint in `--out` if there is one.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs are done (the run can be resumed).
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out fold; defaults to the checkpoint's.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub report: PathBuf,
    /// Also score the identity baseline.
    #[arg(long)]
    pub with_identity: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<ModelVariant, String> {
    ModelVariant::parse(s).ok_or_else(|| {
        let names: Vec<_> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}, expected one of {}", names.join(", "))
    })
}

fn parse_extents(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("expected one or three extents, got {}", parts.len())),
    }
}

fn require(path: &std::path::Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{}: no such file", path.display())))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen(a) => {
            let mut cfg = PhantomConfig::new(a.subjects, a.extents, a.seed);
            cfg.lesions_per_subject = a.lesions;
            let cohort = generate_phantom_cohort(&cfg)?;
            let folds = kfold_split(a.subjects, a.folds, a.seed)?;
            write_cohort(&a.out, &cohort, &folds, a.folds, a.seed)?;
            println!("wrote {} subjects to {}", cohort.len(), a.out.join(FILE_NAME).display());
        }
        Command::Train(a) => {
            require(&a.manifest)?;
            let (_, samples) = load_samples(&a.manifest)?;
            let mut cfg = TrainConfig::desk(a.seed);
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(p) = a.patch {
                cfg.patch = [p; 3];
            }
            cfg.augment = !a.no_augment;
            let paths = RunPaths::new(&a.out);
            let resume = if a.resume { Resume::IfPresent } else { Resume::Fresh };
            let (trainer, rows) = run::train_run(a.variant, cfg, &samples, a.fold, &paths, resume, StopAfter(a.stop_after))?;
            for r in &rows {
                println!("epoch {} l1 {}", r.metrics.epoch, fmt_metric(r.metrics.l1));
            }
            println!("{} epochs done, checkpoint {}", trainer.epochs_done, paths.checkpoint().display());
        }
        Command::Eval(a) => {
            require(&a.checkpoint)?;
            require(&a.manifest)?;
            let trainer = checkpoint::load(&a.checkpoint)?;
            let (_, samples) = load_samples(&a.manifest)?;
            let mut rows = run::evaluate_checkpoint(&trainer, &samples, a.fold)?;
            if a.with_identity {
                rows.extend(run::identity_rows(&samples, a.fold.unwrap_or(trainer.fold))?);
            }
            write_report(&a.report, &rows)?;
            let summary_path = a.report.with_file_name(SUMMARY);
            write_summary(&summary_path, &summarize(&rows))?;
            for r in &rows {
                println!(
                    "{} fold {} {}: psnr {} ssim {} roi psnr {}",
                    r.variant,
                    r.fold,
                    r.sample,
                    fmt_metric(r.metrics.psnr_whole),
                    fmt_metric(r.metrics.ssim_whole),
                    fmt_metric(r.metrics.psnr_roi)
                );
            }
        }
        Command::Gradcheck(a) => {
            let results = gradcheck::run_suite(a.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {:<40} max rel err {:.3e}", r.name, r.max_relative_error);
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Usage(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::AttnExport(a) => {
            require(&a.checkpoint)?;
            require(&a.manifest)?;
            let trainer = checkpoint::load(&a.checkpoint)?;
            let (_, samples) = load_samples(&a.manifest)?;
            for e in export_attention(&trainer, &samples, &a.out)? {
                println!("{} inside/outside ratio {}", e.map_path.display(), fmt_metric(e.ratio));
            }
        }
        Command::Experiment(a) => {
            let mut cfg = ExperimentConfig::desk(a.seed);
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let outcome = run_experiment(&cfg, &a.out)?;
            for r in outcome.summary.iter().filter(|r| r.fold.is_none()) {
                println!("{:<9} psnr {}  ssim {}  roi psnr {}", r.variant, r.psnr_whole, r.ssim_whole, r.psnr_roi);
            }
        }
    }
    Ok(())
}
