//! Grad-CAM attention from a discriminator tap and its supervision loss.
//!
//! The channel weights are the spatial means of `∂s/∂f` taken on a separate
//! tape that only contains the score head, so they enter the map as
//! constants: the supervision loss reaches the discriminator through the tap
//! activation alone and no second-order terms are needed.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::ScoreHead;
use crate::tensor::Tensor;

/// Range below which a map is treated as flat during min–max scaling.
pub const RANGE_GUARD: f64 = 1e-12;

/// One weight per tap channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCamWeights(pub Vec<f64>);

/// Grad-CAM map at tap resolution and resampled to the mask grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Raw map, `[d, h, w]`, non-negative.
    pub raw: Tensor,
    /// Min–max scaled map upsampled to the mask extents, `[D, H, W]`.
    pub upsampled: Tensor,
    pub min: f64,
    pub max: f64,
}

/// Spatial means of `∂score/∂tap` per channel, from a dedicated tape.
pub fn gradcam_weights<H: ScoreHead + ?Sized>(head: &H, tap: &Tensor) -> Result<GradCamWeights> {
    let [k, d, h, w] = tap.dims4("gradcam_weights")?;
    let mut g = Graph::new();
    let p = head.head_params().bind(&mut g, false);
    let f = g.leaf(tap.clone());
    let s = head.head(&mut g, &p, f)?;
    let mut grads = g.backward(s)?;
    let n = d * h * w;
    let weights = match grads.take(f) {
        Some(ds) => ds.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect(),
        None => alloc::vec![0.0; k],
    };
    Ok(GradCamWeights(weights))
}

/// `ReLU(Σ_k w_k f_k)` as a `[1, d, h, w]` variable; `w` is constant.
pub fn gradcam_map(g: &mut Graph, tap: Var, w: &GradCamWeights) -> Result<Var> {
    let [k, d, h, wd] = g.value(tap).dims4("gradcam_map")?;
    if w.0.len() != k {
        return Err(Error::ShapeMismatch {
            op: "gradcam_map",
            expected: alloc::vec![k],
            found: alloc::vec![w.0.len()],
        });
    }
    let weights = g.constant(Tensor::new(&[1, k], w.0.clone())?);
    let flat = g.reshape(tap, &[k, d * h * wd])?;
    let combined = g.matmul(weights, flat)?;
    let a = g.relu(combined)?;
    g.reshape(a, &[1, d, h, wd])
}

/// `(A − min A) / max(range, guard)`; a flat map becomes all zeros.
pub fn min_max_normalize(g: &mut Graph, a: Var) -> Result<Var> {
    let lo = g.min(a)?;
    let hi = g.max(a)?;
    let range = g.value(hi).item()? - g.value(lo).item()?;
    let shifted = g.sub(a, lo)?;
    if range < RANGE_GUARD {
        return g.mul_scalar(shifted, 1.0 / RANGE_GUARD);
    }
    let span = g.sub(hi, lo)?;
    g.div(shifted, span)
}

pub fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::NonBinaryMask)
    }
}

/// Normalized, upsampled map against the lesion mask: mean squared error.
///
/// `map` is `[1, d, h, w]` (as returned by [`gradcam_map`]); `mask` is the
/// `[D, H, W]` lesion mask.
pub fn attention_supervision_loss(g: &mut Graph, map: Var, mask: &Tensor) -> Result<Var> {
    Ok(attention_supervision(g, map, mask)?.0)
}

/// Loss and the normalized, upsampled map it compares against the mask.
pub fn attention_supervision(g: &mut Graph, map: Var, mask: &Tensor) -> Result<(Var, Var)> {
    check_binary(mask)?;
    let target = upsampled_normalized(g, map, mask.shape())?;
    let m = g.constant(mask.clone().reshape(g.shape(target))?);
    let diff = g.sub(target, m)?;
    let sq = g.square(diff)?;
    Ok((g.mean(sq)?, target))
}

/// Mean map value inside and outside the mask and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSummary {
    pub mean_inside: f64,
    pub mean_outside: f64,
    pub ratio: f64,
}

impl AttentionSummary {
    /// `None` when the mask is empty or covers everything.
    pub fn new(map: &Tensor, mask: &Tensor) -> Option<Self> {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&a, &m) in map.data().iter().zip(mask.data()) {
            if m != 0.0 {
                si += a;
                ni += 1;
            } else {
                so += a;
                no += 1;
            }
        }
        if ni == 0 || no == 0 || map.numel() != mask.numel() {
            return None;
        }
        let (mean_inside, mean_outside) = (si / ni as f64, so / no as f64);
        Some(Self {
            mean_inside,
            mean_outside,
            ratio: mean_inside / mean_outside,
        })
    }
}

fn upsampled_normalized(g: &mut Graph, map: Var, extents: &[usize]) -> Result<Var> {
    if extents.len() != 3 {
        return Err(Error::Rank {
            op: "attention mask",
            expected: 3,
            found: extents.len(),
        });
    }
    let norm = min_max_normalize(g, map)?;
    g.upsample_trilinear(norm, [extents[0], extents[1], extents[2]])
}

/// Full Grad-CAM extraction for inspection: weights, map, scaling and
/// resampling to `extents`.
pub fn extract_attention<H: ScoreHead + ?Sized>(
    head: &H,
    tap: &Tensor,
    extents: [usize; 3],
) -> Result<AttentionMap> {
    let w = gradcam_weights(head, tap)?;
    let mut g = Graph::new();
    let t = g.constant(tap.clone());
    let a = gradcam_map(&mut g, t, &w)?;
    let raw = g.value(a).clone();
    let up = upsampled_normalized(&mut g, a, &extents)?;
    let dims = raw.shape()[1..].to_vec();
    Ok(AttentionMap {
        min: raw.min(),
        max: raw.max(),
        raw: raw.reshape(&dims)?,
        upsampled: g.value(up).clone().reshape(&extents)?,
    })
}
