//! Random rigid-plus-scale augmentation applied identically to every channel
//! and mask of a sample.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::TrainingSample;
use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

pub const MAX_ANGLE_DEG: f64 = 18.0;
pub const SCALE_RANGE: (f64, f64) = (0.85, 1.15);
/// Normalized background intensity used outside the field of view.
pub const IMAGE_FILL: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotation about the x (W), y (H) and z (D) axes, applied in that order.
    pub angles_deg: [f64; 3],
    pub scale: f64,
    /// Mirror along D, H, W.
    pub flips: [bool; 3],
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        angles_deg: [0.0; 3],
        scale: 1.0,
        flips: [false; 3],
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        let angles_deg = [0, 1, 2].map(|_| rng.random_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG));
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let flips = [0, 1, 2].map(|_| rng.random_bool(0.5));
        Self {
            angles_deg,
            scale,
            flips,
        }
    }

    /// Output-to-source map in `(D, H, W)` index coordinates about the
    /// volume centre: `q = c + F Rᵀ (p - c) / s` with `R = Rz Ry Rx`.
    fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        let rad = self.angles_deg.map(|a| a * core::f64::consts::PI / 180.0);
        let (sx, cx) = (math::sin(rad[0]), math::cos(rad[0]));
        let (sy, cy) = (math::sin(rad[1]), math::cos(rad[1]));
        let (sz, cz) = (math::sin(rad[2]), math::cos(rad[2]));
        // Rotations in (x, y, z) coordinates.
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let r = matmul(&rz, &matmul(&ry, &rx));
        // Permute (x, y, z) to (D, H, W) = (z, y, x) and transpose.
        let perm = [2, 1, 0];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let sign = if self.flips[i] { -1.0 } else { 1.0 };
                m[i][j] = sign * r[perm[j]][perm[i]] / self.scale;
            }
        }
        m
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Source coordinates of every output voxel for one draw.
struct SourceMap {
    extents: [usize; 3],
    coords: Vec<[f64; 3]>,
}

const EDGE: f64 = 1e-9;

impl SourceMap {
    fn new(extents: [usize; 3], params: &AugmentParams) -> Self {
        let m = params.inverse_matrix();
        let c = extents.map(|e| (e as f64 - 1.0) / 2.0);
        let mut coords = Vec::with_capacity(extents.iter().product());
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                for x in 0..extents[2] {
                    let v = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                    coords.push([0, 1, 2].map(|i| c[i] + m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2]));
                }
            }
        }
        Self { extents, coords }
    }

    fn inside(&self, q: &[f64; 3]) -> bool {
        (0..3).all(|a| q[a] >= -EDGE && q[a] <= self.extents[a] as f64 - 1.0 + EDGE)
    }

    fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.extents[1] + p[1]) * self.extents[2] + p[2]
    }

    fn trilinear(&self, src: &[f64], out: &mut [f64]) {
        for (o, q) in out.iter_mut().zip(&self.coords) {
            if !self.inside(q) {
                *o = IMAGE_FILL;
                continue;
            }
            let mut lo = [0usize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let qa = q[a].clamp(0.0, self.extents[a] as f64 - 1.0);
                let f = math::floor(qa);
                lo[a] = (f as usize).min(self.extents[a].saturating_sub(2));
                frac[a] = qa - lo[a] as f64;
            }
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut p = lo;
                for a in 0..3 {
                    if corner >> (2 - a) & 1 == 1 {
                        w *= frac[a];
                        p[a] = (p[a] + 1).min(self.extents[a] - 1);
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                if w != 0.0 {
                    acc += w * src[self.index(p)];
                }
            }
            *o = acc;
        }
    }

    fn nearest(&self, src: &[f64], out: &mut [f64]) {
        for (o, q) in out.iter_mut().zip(&self.coords) {
            *o = if self.inside(q) {
                let p = [0, 1, 2].map(|a| (math::round(q[a]) as usize).min(self.extents[a] - 1));
                src[self.index(p)]
            } else {
                0.0
            };
        }
    }

    fn resample(&self, t: &Tensor, mask: bool) -> Tensor {
        let n = self.coords.len();
        let mut out = alloc::vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            if mask {
                self.nearest(src, dst);
            } else {
                self.trilinear(src, dst);
            }
        }
        Tensor::new(t.shape(), out).expect("shape preserved")
    }
}

/// Applies one fixed transform to all images (trilinear, background fill)
/// and masks (nearest neighbour, zero fill).
pub fn apply_augmentation(sample: &TrainingSample, params: &AugmentParams) -> Result<TrainingSample> {
    let map = SourceMap::new(sample.extents(), params);
    Ok(TrainingSample {
        modalities: map.resample(&sample.modalities, false),
        target: map.resample(&sample.target, false),
        lesion: map.resample(&sample.lesion, true),
        lesion_t0: map.resample(&sample.lesion_t0, true),
        wm: map.resample(&sample.wm, true),
        subject: sample.subject.clone(),
        fold: sample.fold,
        timepoint: sample.timepoint,
    })
}

/// Draws a transform from `seed` and applies it.
pub fn augment(sample: &TrainingSample, seed: u64) -> Result<TrainingSample> {
    let params = AugmentParams::draw(&mut ChaCha8Rng::seed_from_u64(seed));
    apply_augmentation(sample, &params)
}
