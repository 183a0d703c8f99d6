//! Whole-volume evaluation: patch-wise prediction, reassembly, and the
//! per-sample and summary metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{extract_attention, AttentionSummary};
use crate::dataset::TrainingSample;
use crate::error::{invalid, Result};
use crate::math;
use crate::metrics::{psnr, ssim};
use crate::models::{Discriminator, Generator, ModelVariant};
use crate::patch::{aggregate_patches, split_patches};
use crate::tensor::Tensor;
use crate::volume::rescale_unit;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub psnr_whole: f64,
    pub ssim_whole: f64,
    pub psnr_roi: f64,
}

/// Predicts every grid patch and averages the overlaps; `[1, D, H, W]`.
pub fn predict_volume(generator: &Generator, sample: &TrainingSample, patch: [usize; 3], roi_channel: bool) -> Result<Tensor> {
    let grid = split_patches(sample.extents(), patch)?;
    let x = sample.input(roi_channel);
    let preds = grid
        .starts()
        .into_iter()
        .map(|s| generator.predict(&grid.extract(&x, s)?))
        .collect::<Result<Vec<_>>>()?;
    aggregate_patches(&grid, &preds)
}

/// Scores a `[1, D, H, W]` prediction against the sample target after
/// independent `[0, 1]` rescaling of both; the ROI is the target-time
/// lesion mask.
pub fn score_prediction(sample: &TrainingSample, prediction: &Tensor) -> Result<SampleMetrics> {
    let shape = sample.lesion.shape().to_vec();
    let y = rescale_unit(&sample.target).reshape(&shape)?;
    let p = rescale_unit(prediction).reshape(&shape)?;
    if sample.lesion.sum() == 0.0 {
        return Err(invalid(alloc::format!(
            "sample {} has an empty lesion mask",
            sample.subject
        )));
    }
    Ok(SampleMetrics {
        psnr_whole: psnr(&y, &p, None)?,
        ssim_whole: ssim(&y, &p)?,
        psnr_roi: psnr(&y, &p, Some(&sample.lesion))?,
    })
}

/// The copy-forward baseline: t1 FLAIR predicted as the t0 FLAIR.
pub fn identity_metrics(sample: &TrainingSample) -> Result<SampleMetrics> {
    score_prediction(sample, &sample.flair_t0())
}

/// Grad-CAM map of the discriminator on the real pair, computed per patch
/// and averaged over overlaps; `[D, H, W]`, values in `[0, 1]`.
pub fn attention_volume(
    discriminator: &Discriminator,
    sample: &TrainingSample,
    patch: [usize; 3],
    roi_channel: bool,
) -> Result<Tensor> {
    let grid = split_patches(sample.extents(), patch)?;
    let x = sample.input(roi_channel);
    let mut maps = Vec::with_capacity(grid.len());
    for s in grid.starts() {
        let xp = grid.extract(&x, s)?;
        let yp = grid.extract(&sample.target, s)?;
        let mut g = crate::Graph::new();
        let p = discriminator.params.bind(&mut g, false);
        let xv = g.constant(xp);
        let yv = g.constant(yp);
        let out = discriminator.forward(&mut g, &p, xv, yv)?;
        let map = extract_attention(discriminator, g.value(out.tap), patch)?;
        maps.push(map.upsampled);
    }
    aggregate_patches(&grid, &maps)
}

pub fn attention_summary(map: &Tensor, sample: &TrainingSample) -> Option<AttentionSummary> {
    AttentionSummary::new(map, &sample.lesion)
}

/// One validation sample of one variant and fold.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Variant name, or `identity` for the copy-forward baseline.
    pub variant: String,
    pub fold: usize,
    pub sample: String,
    pub metrics: SampleMetrics,
}

pub fn sample_label(sample: &TrainingSample) -> String {
    alloc::format!("{}-t{}", sample.subject, sample.timepoint)
}

pub const IDENTITY: &str = "identity";

/// Metric rows of `samples` under `generator`.
pub fn evaluate_model(
    variant: ModelVariant,
    generator: &Generator,
    samples: &[&TrainingSample],
    patch: [usize; 3],
) -> Result<Vec<ReportRow>> {
    let roi = variant.spec().t0_roi_channel;
    samples
        .iter()
        .map(|s| {
            let pred = predict_volume(generator, s, patch, roi)?;
            Ok(ReportRow {
                variant: variant.name().into(),
                fold: s.fold,
                sample: sample_label(s),
                metrics: score_prediction(s, &pred)?,
            })
        })
        .collect()
}

pub fn evaluate_identity(samples: &[&TrainingSample]) -> Result<Vec<ReportRow>> {
    samples
        .iter()
        .map(|s| {
            Ok(ReportRow {
                variant: IDENTITY.into(),
                fold: s.fold,
                sample: sample_label(s),
                metrics: identity_metrics(s)?,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: math::sqrt(var),
            n: values.len(),
        })
    }
}

impl core::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Mean ± std of the three metrics for one variant (and optionally fold).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub fold: Option<usize>,
    pub psnr_whole: MeanStd,
    pub ssim_whole: MeanStd,
    pub psnr_roi: MeanStd,
}

fn summarize_rows(variant: &str, fold: Option<usize>, rows: &[&ReportRow]) -> Option<SummaryRow> {
    let col = |f: fn(&SampleMetrics) -> f64| rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>();
    Some(SummaryRow {
        variant: variant.into(),
        fold,
        psnr_whole: MeanStd::of(&col(|m| m.psnr_whole))?,
        ssim_whole: MeanStd::of(&col(|m| m.ssim_whole))?,
        psnr_roi: MeanStd::of(&col(|m| m.psnr_roi))?,
    })
}

/// Per-fold rows followed by the all-fold row of every variant, in first
/// appearance order.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = Vec::new();
    for v in variants {
        let of_variant: Vec<&ReportRow> = rows.iter().filter(|r| r.variant == v).collect();
        let mut folds: Vec<usize> = of_variant.iter().map(|r| r.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        for f in folds {
            let sub: Vec<&ReportRow> = of_variant.iter().copied().filter(|r| r.fold == f).collect();
            out.extend(summarize_rows(v, Some(f), &sub));
        }
        out.extend(summarize_rows(v, None, &of_variant));
    }
    out
}
