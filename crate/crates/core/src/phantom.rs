//! Synthetic longitudinal cohort: one ellipsoidal "brain" per subject with an
//! annular white-matter band and evolving ellipsoidal lesions inside it.
//!
//! Each lesion's fate is visible at the earlier scan so the follow-up is
//! predictable from the inputs: a lesion about to grow carries a T2/PD
//! edema rim where it will extend, one about to develop a hypointense core
//! already shows a darker T1 centre, and one about to shrink is fainter on
//! FLAIR and T2.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::math;
use crate::nn::standard_normal;
use crate::seed::derive_seed;
use crate::volume::{Role, Volume};

pub const MODALITIES: [&str; 4] = ["t1", "t2", "pd", "flair"];
pub const FLAIR: usize = 3;
pub const MIN_EXTENT: usize = 16;
pub const INTERVAL: &str = "approximately one year";

/// Intensity scale of the synthetic scanner.
const SCALE: f64 = 400.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub extents: [usize; 3],
    pub lesions_per_subject: usize,
    pub timepoints: usize,
    /// Noise standard deviation relative to the white-matter FLAIR level.
    pub noise: f64,
    pub seed: u64,
}

impl PhantomConfig {
    pub fn new(n_subjects: usize, extents: [usize; 3], seed: u64) -> Self {
        Self {
            n_subjects,
            extents,
            lesions_per_subject: 3,
            timepoints: 2,
            noise: 0.02,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timepoint {
    /// T1, T2, PD and FLAIR, in [`MODALITIES`] order.
    pub modalities: Vec<Volume>,
    pub lesion: Volume,
    pub wm: Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTimeline {
    pub id: String,
    pub timepoints: Vec<Timepoint>,
    pub interval: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionFate {
    Grow,
    Shrink,
    CentralHypointensity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub center: [usize; 3],
    pub radii: [f64; 3],
    pub fate: LesionFate,
}

impl Lesion {
    fn scale_at(&self, t: usize) -> f64 {
        let t = t as f64;
        match self.fate {
            LesionFate::Grow => 1.0 + 0.6 * t,
            LesionFate::Shrink => (1.0 - 0.35 * t).max(0.45),
            LesionFate::CentralHypointensity => 1.0,
        }
    }

    /// Normalized ellipsoidal distance of a voxel from the lesion centre at
    /// timepoint `t` (≤ 1 inside).
    fn rho(&self, p: [usize; 3], t: usize) -> f64 {
        let s = self.scale_at(t);
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a] as f64) / (self.radii[a] * s);
            acc += d * d;
        }
        math::sqrt(acc)
    }

    fn has_core(&self, t: usize) -> bool {
        self.fate == LesionFate::CentralHypointensity && t >= 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
}

/// Tissue intensities per modality: background, CSF, GM, WM, lesion.
const TABLE: [[f64; 5]; 4] = [
    [0.0, 0.25, 0.60, 0.85, 0.50],
    [0.0, 0.95, 0.60, 0.45, 0.85],
    [0.0, 0.80, 0.75, 0.62, 0.82],
    [0.0, 0.15, 0.55, 0.45, 0.92],
];

/// Per-modality contrast curve applied after the tissue lookup.
const GAMMA: [f64; 4] = [0.9, 1.2, 1.0, 1.1];

struct Anatomy {
    extents: [usize; 3],
    center: [f64; 3],
    radii: [f64; 3],
    phases: [f64; 3],
}

impl Anatomy {
    fn draw(extents: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        Self {
            extents,
            center: extents.map(|e| (e as f64 - 1.0) / 2.0),
            radii: extents.map(|e| e as f64 * 0.45 * rng.random_range(0.93..1.0)),
            phases: [0, 1, 2].map(|_| rng.random_range(0.0..2.0 * core::f64::consts::PI)),
        }
    }

    fn rho(&self, p: [usize; 3]) -> f64 {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a]) / self.radii[a];
            acc += d * d;
        }
        math::sqrt(acc)
    }

    fn tissue(&self, p: [usize; 3]) -> Tissue {
        match self.rho(p) {
            r if r >= 1.0 => Tissue::Background,
            r if r < 0.2 || r >= 0.9 => Tissue::Csf,
            r if (0.3..0.8).contains(&r) => Tissue::Wm,
            _ => Tissue::Gm,
        }
    }

    /// Smooth multiplicative field, close to 1.
    fn field(&self, p: [usize; 3]) -> f64 {
        let u = |a: usize| 2.0 * core::f64::consts::PI * p[a] as f64 / self.extents[a] as f64;
        1.0 + 0.06 * math::sin(u(0) + self.phases[0]) * math::cos(u(1) + self.phases[1])
            + 0.04 * math::sin(u(2) + self.phases[2])
    }
}

fn for_each_voxel(extents: [usize; 3], mut f: impl FnMut([usize; 3])) {
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                f([z, y, x]);
            }
        }
    }
}

fn linear(extents: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * extents[1] + p[1]) * extents[2] + p[2]
}

/// Voxels covered by the lesion at any timepoint of the timeline.
fn footprint(lesion: &Lesion, extents: [usize; 3], timepoints: usize) -> Option<Vec<[usize; 3]>> {
    let max_scale = (0..timepoints).map(|t| lesion.scale_at(t)).fold(1.0, f64::max);
    let mut out = Vec::new();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let r = math::floor(lesion.radii[a] * max_scale) as usize + 1;
        if lesion.center[a] < r || lesion.center[a] + r >= extents[a] {
            return None;
        }
        lo[a] = lesion.center[a] - r;
        hi[a] = lesion.center[a] + r;
    }
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let p = [z, y, x];
                if (0..timepoints).any(|t| lesion.rho(p, t) <= 1.0) {
                    out.push(p);
                }
            }
        }
    }
    Some(out)
}

const PLACEMENT_ATTEMPTS: usize = 400;

fn place_lesions(
    anatomy: &Anatomy,
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Lesion>> {
    let extents = cfg.extents;
    let min_extent = *extents.iter().min().unwrap_or(&0) as f64;
    let wm: Vec<[usize; 3]> = {
        let mut v = Vec::new();
        for_each_voxel(extents, |p| {
            if anatomy.tissue(p) == Tissue::Wm {
                v.push(p);
            }
        });
        v
    };
    let mut occupied = vec![false; extents.iter().product()];
    let mut lesions = Vec::with_capacity(cfg.lesions_per_subject);
    for i in 0..cfg.lesions_per_subject {
        let fate = if i == 0 {
            LesionFate::Grow
        } else {
            match rng.random_range(0..3u32) {
                0 => LesionFate::Grow,
                1 => LesionFate::Shrink,
                _ => LesionFate::CentralHypointensity,
            }
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            if wm.is_empty() {
                break;
            }
            let center = wm[rng.random_range(0..wm.len())];
            let base = (min_extent * rng.random_range(0.05..0.075)).max(1.0);
            let radii = [0, 1, 2].map(|_| base * rng.random_range(0.85..1.2));
            let lesion = Lesion { center, radii, fate };
            let Some(cells) = footprint(&lesion, extents, cfg.timepoints) else {
                continue;
            };
            // Keep a one-voxel gap between lesions.
            let clear = cells.iter().all(|&p| {
                anatomy.tissue(p) == Tissue::Wm
                    && neighbourhood(p, extents).all(|q| !occupied[linear(extents, q)])
            });
            if clear {
                for &p in &cells {
                    occupied[linear(extents, p)] = true;
                }
                placed = Some(lesion);
                break;
            }
        }
        match placed {
            Some(l) => lesions.push(l),
            None => {
                return Err(invalid(format!(
                    "lesion {i} does not fit inside the white-matter band of a {extents:?} volume"
                )))
            }
        }
    }
    Ok(lesions)
}

fn neighbourhood(p: [usize; 3], extents: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..27).filter_map(move |k| {
        let off = [k / 9, (k / 3) % 3, k % 3];
        let mut q = [0; 3];
        for a in 0..3 {
            let v = (p[a] + off[a]).checked_sub(1)?;
            if v >= extents[a] {
                return None;
            }
            q[a] = v;
        }
        Some(q)
    })
}

/// Appearance modifiers of one voxel at timepoint `t`.
#[derive(Default, Clone, Copy)]
struct Appearance {
    lesion: bool,
    core: bool,
    core_cue: bool,
    rim: bool,
    fading: bool,
}

fn appearance(lesions: &[Lesion], p: [usize; 3], t: usize) -> Appearance {
    let mut a = Appearance::default();
    for l in lesions {
        let rho = l.rho(p, t);
        if rho <= 1.0 {
            a.lesion = true;
            let core = rho <= 0.55;
            a.core |= core && l.has_core(t);
            a.core_cue |= core && l.fate == LesionFate::CentralHypointensity;
            a.fading |= l.fate == LesionFate::Shrink;
        } else if l.fate == LesionFate::Grow && l.rho(p, t + 1) <= 1.0 {
            a.rim = true;
        }
    }
    a
}

fn intensity(modality: usize, tissue: Tissue, a: Appearance) -> f64 {
    let row = &TABLE[modality];
    let mut v = match tissue {
        Tissue::Background => row[0],
        Tissue::Csf => row[1],
        Tissue::Gm => row[2],
        Tissue::Wm => row[3],
    };
    if a.lesion {
        v = row[4];
        if a.fading {
            v = match modality {
                1 => 0.70,
                3 => 0.76,
                _ => v,
            };
        }
        if a.core_cue && modality == 0 {
            v = 0.36;
        }
        if a.core {
            v = match modality {
                0 => 0.22,
                3 => 0.30,
                _ => v,
            };
        }
    } else if a.rim {
        match modality {
            1 => v += 0.25,
            2 => v += 0.12,
            _ => {}
        }
    }
    libm::pow(v, GAMMA[modality])
}

fn subject(cfg: &PhantomConfig, index: usize) -> Result<SubjectTimeline> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64]));
    let extents = cfg.extents;
    let anatomy = Anatomy::draw(extents, &mut rng);
    let lesions = place_lesions(&anatomy, cfg, &mut rng)?;
    let sigma = cfg.noise * TABLE[FLAIR][3];
    let mut timepoints = Vec::with_capacity(cfg.timepoints);
    for t in 0..cfg.timepoints {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64, t as u64 + 1]));
        let lesion = Volume::from_fn(extents, Role::LesionMask, |z, y, x| {
            f32::from(lesions.iter().any(|l| l.rho([z, y, x], t) <= 1.0) as u8)
        })?;
        let wm = Volume::from_fn(extents, Role::WmMask, |z, y, x| {
            f32::from((anatomy.tissue([z, y, x]) == Tissue::Wm) as u8)
        })?;
        let mut modalities = Vec::with_capacity(MODALITIES.len());
        for m in 0..MODALITIES.len() {
            let v = Volume::from_fn(extents, Role::Modality, |z, y, x| {
                let p = [z, y, x];
                let tissue = anatomy.tissue(p);
                if tissue == Tissue::Background {
                    return 0.0;
                }
                let clean = intensity(m, tissue, appearance(&lesions, p, t)) * anatomy.field(p);
                let noisy = clean + sigma * standard_normal(&mut noise_rng);
                (SCALE * noisy.max(0.0)) as f32
            })?;
            modalities.push(v);
        }
        timepoints.push(Timepoint { modalities, lesion, wm });
    }
    Ok(SubjectTimeline {
        id: format!("subject-{:02}", index + 1),
        timepoints,
        interval: INTERVAL.into(),
    })
}

/// Deterministic cohort of `n_subjects` timelines.
pub fn generate_phantom_cohort(cfg: &PhantomConfig) -> Result<Vec<SubjectTimeline>> {
    if cfg.extents.iter().any(|&e| e < MIN_EXTENT) {
        return Err(invalid(format!(
            "phantom extents {:?} below the {MIN_EXTENT}^3 minimum",
            cfg.extents
        )));
    }
    if cfg.timepoints < 2 {
        return Err(invalid("a timeline needs at least two timepoints"));
    }
    if cfg.n_subjects == 0 {
        return Err(invalid("cohort needs at least one subject"));
    }
    (0..cfg.n_subjects).map(|i| subject(cfg, i)).collect()
}

/// Lesions of one subject, for inspection and tests.
pub fn subject_lesions(cfg: &PhantomConfig, index: usize) -> Result<Vec<Lesion>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64]));
    let anatomy = Anatomy::draw(cfg.extents, &mut rng);
    place_lesions(&anatomy, cfg, &mut rng)
}
