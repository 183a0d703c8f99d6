//! Cohort manifest: subjects, timepoints, per-role file paths and folds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dgagan_core::dataset::{build_samples, TrainingSample};
use dgagan_core::phantom::{SubjectTimeline, Timepoint, MODALITIES};
use dgagan_core::volume::Role;
use serde::{Deserialize, Serialize};

use crate::error::{io, json, Error, Result};
use crate::lvol::{read_volume, write_volume};

pub const FILE_NAME: &str = "manifest.json";
pub const LESION_KEY: &str = "lesion_mask";
pub const WM_KEY: &str = "wm_mask";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub extents: [usize; 3],
    pub seed: u64,
    pub folds: usize,
    pub modalities: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub fold: usize,
    pub interval: String,
    pub timepoints: Vec<TimepointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimepointEntry {
    pub index: usize,
    /// Role key (modality name, `lesion_mask`, `wm_mask`) to a path relative
    /// to the manifest directory.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn fold_assignments(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.fold).collect()
    }
}

/// Writes every volume under `dir` and the manifest beside them.
pub fn write_cohort(dir: &Path, cohort: &[SubjectTimeline], folds: &[usize], k: usize, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let extents = cohort
        .first()
        .and_then(|s| s.timepoints.first())
        .map(|t| t.lesion.extents())
        .ok_or_else(|| Error::Usage("empty cohort".into()))?;
    let mut subjects = Vec::with_capacity(cohort.len());
    for (s, &fold) in cohort.iter().zip(folds) {
        let sub_dir = dir.join(&s.id);
        fs::create_dir_all(&sub_dir).map_err(io(&sub_dir))?;
        let mut timepoints = Vec::new();
        for (i, tp) in s.timepoints.iter().enumerate() {
            let mut files = BTreeMap::new();
            let mut put = |key: &str, v: &dgagan_core::volume::Volume| -> Result<()> {
                let rel = format!("{}/tp{i}_{key}.lvol", s.id);
                write_volume(&dir.join(&rel), v)?;
                files.insert(key.to_string(), rel);
                Ok(())
            };
            for (name, v) in MODALITIES.iter().zip(&tp.modalities) {
                put(name, v)?;
            }
            put(LESION_KEY, &tp.lesion)?;
            put(WM_KEY, &tp.wm)?;
            timepoints.push(TimepointEntry { index: i, files });
        }
        subjects.push(SubjectEntry {
            id: s.id.clone(),
            fold,
            interval: s.interval.clone(),
            timepoints,
        });
    }
    let manifest = Manifest {
        extents,
        seed,
        folds: k,
        modalities: MODALITIES.iter().map(|m| m.to_string()).collect(),
        subjects,
    };
    let path = dir.join(FILE_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(json(&path))?;
    fs::write(&path, text).map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(json(path))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads the manifest at `path` and every volume it lists.
pub fn load_cohort(path: &Path) -> Result<(Manifest, Vec<SubjectTimeline>)> {
    let manifest = read_manifest(path)?;
    let base = base_dir(path);
    let mut cohort = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        let mut timepoints = Vec::with_capacity(s.timepoints.len());
        for tp in &s.timepoints {
            let load = |key: &str, role: Role| -> Result<dgagan_core::volume::Volume> {
                let rel = tp.files.get(key).ok_or_else(|| {
                    Error::Usage(format!("{}: subject {} timepoint {} lacks {key}", path.display(), s.id, tp.index))
                })?;
                read_volume(&base.join(rel), role)
            };
            let modalities = manifest
                .modalities
                .iter()
                .map(|m| load(m, Role::Modality))
                .collect::<Result<Vec<_>>>()?;
            timepoints.push(Timepoint {
                modalities,
                lesion: load(LESION_KEY, Role::LesionMask)?,
                wm: load(WM_KEY, Role::WmMask)?,
            });
        }
        cohort.push(SubjectTimeline {
            id: s.id.clone(),
            timepoints,
            interval: s.interval.clone(),
        });
    }
    Ok((manifest, cohort))
}

/// All training pairs of the cohort listed at `path`.
pub fn load_samples(path: &Path) -> Result<(Manifest, Vec<TrainingSample>)> {
    let (manifest, cohort) = load_cohort(path)?;
    let samples = build_samples(&cohort, &manifest.fold_assignments())?;
    Ok((manifest, samples))
}
