//! CSV outputs: per-epoch metric logs, per-sample evaluation rows and the
//! mean ± std summary.

use std::fs::{self, File, OpenOptions};
use std::path::Path;

use dgagan_core::eval::{MeanStd, ReportRow, SummaryRow};
use dgagan_core::train::EpochMetrics;

use crate::error::{csv_err, io, Result};

/// Sentinel text for an infinite PSNR.
pub const INF: &str = "inf";
/// How prediction and target were brought to `[0, 1]` before scoring.
pub const RESCALING: &str = "independent-minmax";

pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        INF.into()
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_metric).unwrap_or_default()
}

pub const METRIC_HEADER: [&str; 9] = [
    "variant", "fold", "epoch", "l_d", "l_g_adv", "l_l1", "l_e", "omega", "wall_time",
];

/// One metric-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub fold: usize,
    pub metrics: EpochMetrics,
    pub wall_time: f64,
}

impl MetricRow {
    pub fn record(&self) -> [String; 9] {
        let m = &self.metrics;
        [
            self.variant.clone(),
            self.fold.to_string(),
            m.epoch.to_string(),
            opt(m.l_d),
            opt(m.l_g_adv),
            fmt_metric(m.l1),
            opt(m.l_e),
            // the weight only means something next to an attention loss
            opt(m.l_e.map(|_| m.omega)),
            format!("{:.3}", self.wall_time),
        ]
    }
}

fn writer(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io(path))?;
    Ok(csv::Writer::from_writer(file))
}

/// Appends one row, writing the header first when the file is new.
pub fn append_metric_row(path: &Path, row: &MetricRow) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = writer(path, true)?;
    if fresh {
        w.write_record(METRIC_HEADER).map_err(csv_err(path))?;
    }
    w.write_record(row.record()).map_err(csv_err(path))?;
    w.flush().map_err(io(path))
}

/// Rows of a metric log as raw strings, header excluded.
pub fn read_metric_log(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.records()
        .map(|rec| Ok(rec.map_err(csv_err(path))?.iter().map(str::to_string).collect()))
        .collect()
}

/// Rewrites a metric log keeping only rows with `epoch <= keep`.
pub fn truncate_metric_log(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = read_metric_log(path)?;
    let mut w = writer(path, false)?;
    w.write_record(METRIC_HEADER).map_err(csv_err(path))?;
    for row in rows.iter().filter(|r| r.get(2).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= keep)) {
        w.write_record(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub const REPORT_HEADER: [&str; 7] = ["variant", "fold", "sample", "psnr_whole", "ssim_whole", "psnr_roi", "rescaling"];

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = writer(path, false)?;
    w.write_record(REPORT_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.fold.to_string(),
            r.sample.clone(),
            fmt_metric(r.metrics.psnr_whole),
            fmt_metric(r.metrics.ssim_whole),
            fmt_metric(r.metrics.psnr_roi),
            RESCALING.into(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "variant",
    "fold",
    "n",
    "psnr_whole",
    "ssim_whole",
    "psnr_roi",
    "psnr_whole_mean",
    "psnr_whole_std",
    "ssim_whole_mean",
    "ssim_whole_std",
    "psnr_roi_mean",
    "psnr_roi_std",
];

fn pm(m: &MeanStd) -> String {
    if m.mean.is_finite() {
        m.to_string()
    } else {
        format!("{} ± {}", fmt_metric(m.mean), fmt_metric(m.std))
    }
}

/// Table-style summary; `fold` is `all` for the pooled row.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(path, false)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.fold.map_or_else(|| "all".to_string(), |f| f.to_string()),
            r.psnr_whole.n.to_string(),
            pm(&r.psnr_whole),
            pm(&r.ssim_whole),
            pm(&r.psnr_roi),
            fmt_metric(r.psnr_whole.mean),
            fmt_metric(r.psnr_whole.std),
            fmt_metric(r.ssim_whole.mean),
            fmt_metric(r.ssim_whole.std),
            fmt_metric(r.psnr_roi.mean),
            fmt_metric(r.psnr_roi.std),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

/// Reads back an evaluation report.
pub fn read_report(path: &Path) -> Result<Vec<Vec<String>>> {
    read_metric_log(path)
}
