//! Training pairs built from consecutive timepoints, and subject-level folds.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::phantom::{SubjectTimeline, FLAIR, MODALITIES};
use crate::tensor::Tensor;
use crate::volume::normalize_symmetric;

/// One `t0 -> t1` pair, intensities normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `[M, D, H, W]` t0 modalities.
    pub modalities: Tensor,
    /// `[1, D, H, W]` t1 FLAIR.
    pub target: Tensor,
    /// `[D, H, W]` t1 lesion mask.
    pub lesion: Tensor,
    /// `[D, H, W]` t0 lesion mask.
    pub lesion_t0: Tensor,
    /// `[D, H, W]` white-matter mask.
    pub wm: Tensor,
    pub subject: String,
    pub fold: usize,
    /// Index of the earlier timepoint within the subject timeline.
    pub timepoint: usize,
}

impl TrainingSample {
    pub fn extents(&self) -> [usize; 3] {
        let s = self.lesion.shape();
        [s[0], s[1], s[2]]
    }

    /// Generator input: the modalities, plus the t0 lesion mask as an extra
    /// channel when `roi_channel` is set.
    pub fn input(&self, roi_channel: bool) -> Tensor {
        let mut data = self.modalities.data().to_vec();
        let mut c = self.modalities.shape()[0];
        if roi_channel {
            data.extend_from_slice(self.lesion_t0.data());
            c += 1;
        }
        let [d, h, w] = self.extents();
        Tensor::new(&[c, d, h, w], data).expect("sample channels share extents")
    }

    /// Normalized t0 FLAIR, `[1, D, H, W]`.
    pub fn flair_t0(&self) -> Tensor {
        let [d, h, w] = self.extents();
        let n = d * h * w;
        Tensor::new(&[1, d, h, w], self.modalities.data()[FLAIR * n..(FLAIR + 1) * n].to_vec())
            .expect("flair channel")
    }
}

pub fn input_channels(roi_channel: bool) -> usize {
    MODALITIES.len() + usize::from(roi_channel)
}

/// Every consecutive timepoint pair of every subject; `folds[i]` is the
/// fold of subject `i`.
pub fn build_samples(cohort: &[SubjectTimeline], folds: &[usize]) -> Result<Vec<TrainingSample>> {
    if folds.len() != cohort.len() {
        return Err(invalid(format!(
            "{} fold assignments for {} subjects",
            folds.len(),
            cohort.len()
        )));
    }
    let mut out = Vec::new();
    for (subject, &fold) in cohort.iter().zip(folds) {
        for (t, pair) in subject.timepoints.windows(2).enumerate() {
            let (t0, t1) = (&pair[0], &pair[1]);
            let [d, h, w] = t0.lesion.extents();
            let mut data = Vec::with_capacity(MODALITIES.len() * d * h * w);
            for m in &t0.modalities {
                data.extend(normalize_symmetric(m)?.data().iter().map(|&v| f64::from(v)));
            }
            let target = normalize_symmetric(&t1.modalities[FLAIR])?;
            out.push(TrainingSample {
                modalities: Tensor::new(&[t0.modalities.len(), d, h, w], data)?,
                target: target.to_tensor().reshape(&[1, d, h, w])?,
                lesion: t1.lesion.to_tensor(),
                lesion_t0: t0.lesion.to_tensor(),
                wm: t1.wm.to_tensor(),
                subject: subject.id.clone(),
                fold,
                timepoint: t,
            });
        }
    }
    Ok(out)
}

/// Seeded shuffle of subjects dealt round-robin into `k` folds.
pub fn kfold_split(n_subjects: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n_subjects {
        return Err(invalid(format!("{k} folds for {n_subjects} subjects")));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = alloc::vec![0; n_subjects];
    for (pos, &subject) in order.iter().enumerate() {
        folds[subject] = pos % k;
    }
    Ok(folds)
}

/// Training and validation samples of one fold.
pub fn fold_partition(samples: &[TrainingSample], fold: usize) -> (Vec<&TrainingSample>, Vec<&TrainingSample>) {
    samples.iter().partition(|s| s.fold != fold)
}
