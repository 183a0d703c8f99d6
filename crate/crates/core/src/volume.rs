//! Single-channel 3D rasters with a semantic role.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Role {
    Modality,
    LesionMask,
    WmMask,
    Prediction,
    Attention,
}

impl Role {
    pub fn is_mask(self) -> bool {
        matches!(self, Role::LesionMask | Role::WmMask)
    }
}

/// Row-major `(D, H, W)` raster of 32-bit samples, W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    role: Role,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], role: Role, data: Vec<f32>) -> Result<Self> {
        if let Some(axis) = extents.iter().position(|&e| e == 0) {
            return Err(Error::ExtentUnderflow { axis, extent: 0 });
        }
        let n = extents.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "volume",
                expected: extents.to_vec(),
                found: vec![data.len()],
            });
        }
        if role.is_mask() && !data.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::NonBinaryMask);
        }
        if role == Role::Modality && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "modality volume" });
        }
        Ok(Self { extents, role, data })
    }

    pub fn filled(extents: [usize; 3], role: Role, value: f32) -> Result<Self> {
        Self::new(extents, role, vec![value; extents.iter().product()])
    }

    pub fn from_fn(extents: [usize; 3], role: Role, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [d, h, w] = extents;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(extents, role, data)
    }

    /// Values are rounded to f32.
    pub fn from_tensor(t: &Tensor, role: Role) -> Result<Self> {
        let extents = match *t.shape() {
            [d, h, w] | [1, d, h, w] => [d, h, w],
            _ => {
                return Err(Error::Rank {
                    op: "volume from tensor",
                    expected: 3,
                    found: t.rank(),
                })
            }
        };
        Self::new(extents, role, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(self, role: Role) -> Result<Self> {
        Self::new(self.extents, role, self.data)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// `[D, H, W]` tensor in double precision (exact).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&self.extents, |i| f64::from(self.data[i]))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Affine map of `[min, max]` onto `[-1, 1]`.
pub fn normalize_symmetric(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::Domain {
            op: "normalize_symmetric",
            detail: "constant volume".into(),
        });
    }
    let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    let data = v
        .data
        .iter()
        .map(|&x| ((f64::from(x) - lo) / span * 2.0 - 1.0) as f32)
        .collect();
    Volume::new(v.extents, v.role, data)
}

/// Affine map of `[min, max]` onto `[0, 1]`; a constant volume maps to 0.
pub fn rescale_unit(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / span)
}
