//! Training objectives and the attention-loss schedule.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Weight given to every voxel of a patch that holds a single region.
pub const DEGENERATE_WEIGHT_FLOOR: f64 = 0.05;

/// Default smoothed target for real pairs.
pub const REAL_LABEL: f64 = 0.9;

/// Ceiling of the attention-loss weight.
pub const OMEGA_MAX: f64 = 10.0;

/// `L_D = −[t·log σ(s_real) + log(1 − σ(s_fake))]`, evaluated through
/// softplus so extreme logits stay finite.
pub fn discriminator_loss(g: &mut Graph, s_real: Var, s_fake: Var, real_target: f64) -> Result<Var> {
    let neg_real = g.neg(s_real)?;
    let real_term = g.softplus(neg_real)?;
    let real_term = g.mul_scalar(real_term, real_target)?;
    let fake_term = g.softplus(s_fake)?;
    g.add(real_term, fake_term)
}

/// Non-saturating generator loss `−log σ(s_fake)`.
pub fn generator_adversarial_loss(g: &mut Graph, s_fake: Var) -> Result<Var> {
    let neg = g.neg(s_fake)?;
    g.softplus(neg)
}

/// Mean absolute error.
pub fn l1_loss(g: &mut Graph, target: Var, pred: Var) -> Result<Var> {
    if g.shape(target) != g.shape(pred) {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            expected: g.shape(target).to_vec(),
            found: g.shape(pred).to_vec(),
        });
    }
    let d = g.sub(target, pred)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Region partition of one patch and its per-voxel L1 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionWeights {
    pub m: usize,
    pub m_lesion: usize,
    pub m_wm: usize,
    pub m_other: usize,
    /// `1 − m_region / m` per voxel, shaped like the masks.
    pub weights: Tensor,
    /// Set when one region fills the patch and the floor was applied.
    pub degenerate: bool,
}

impl RegionWeights {
    /// Lesion voxels take precedence over white matter where both are set.
    pub fn new(lesion: &Tensor, wm: &Tensor) -> Result<Self> {
        lesion.expect_shape(wm.shape(), "region_weights")?;
        crate::attention::check_binary(lesion)?;
        crate::attention::check_binary(wm)?;
        let m = lesion.numel();
        if m == 0 {
            return Err(crate::error::invalid("region_weights: empty patch"));
        }
        let region = |i: usize| -> u8 {
            if lesion.data()[i] == 1.0 {
                0
            } else if wm.data()[i] == 1.0 {
                1
            } else {
                2
            }
        };
        let mut counts = [0usize; 3];
        for i in 0..m {
            counts[region(i) as usize] += 1;
        }
        let degenerate = counts.contains(&m);
        let w = |r: u8| {
            if degenerate {
                DEGENERATE_WEIGHT_FLOOR
            } else {
                1.0 - counts[r as usize] as f64 / m as f64
            }
        };
        let table = [w(0), w(1), w(2)];
        let weights = Tensor::from_fn(lesion.shape(), |i| table[region(i) as usize]);
        Ok(Self {
            m,
            m_lesion: counts[0],
            m_wm: counts[1],
            m_other: counts[2],
            weights,
            degenerate,
        })
    }
}

/// `(1 / 2m) Σ ω_i |y_i − g_i|`.
pub fn weighted_l1(g: &mut Graph, target: Var, pred: Var, rw: &RegionWeights) -> Result<Var> {
    if g.shape(target) != g.shape(pred) {
        return Err(Error::ShapeMismatch {
            op: "weighted_l1",
            expected: g.shape(target).to_vec(),
            found: g.shape(pred).to_vec(),
        });
    }
    if g.value(pred).numel() != rw.m {
        return Err(Error::ShapeMismatch {
            op: "weighted_l1",
            expected: rw.weights.shape().to_vec(),
            found: g.shape(pred).to_vec(),
        });
    }
    let shape = g.shape(pred).to_vec();
    let w = g.constant(rw.weights.clone().reshape(&shape)?);
    let d = g.sub(target, pred)?;
    let a = g.abs(d)?;
    let wa = g.mul(w, a)?;
    let s = g.sum(wa)?;
    g.mul_scalar(s, 1.0 / (2.0 * rw.m as f64))
}

/// Attention-loss weight: zero for the first third of training, a linear
/// ramp to [`OMEGA_MAX`] over the second third, then constant.
pub fn omega_schedule(epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return 0.0;
    }
    let e = epoch.min(total_epochs) as f64;
    let start = total_epochs as f64 / 3.0;
    let end = 2.0 * total_epochs as f64 / 3.0;
    if e < start {
        0.0
    } else if e < end {
        OMEGA_MAX * (e - start) / (end - start)
    } else {
        OMEGA_MAX
    }
}

/// `L_G = L_adv + λ·L_l1`.
pub fn generator_objective(g: &mut Graph, adversarial: Var, l1: Var, lambda_l1: f64) -> Result<Var> {
    let scaled = g.mul_scalar(l1, lambda_l1)?;
    g.add(adversarial, scaled)
}

/// `L_D + ω·L_e`.
pub fn discriminator_objective(g: &mut Graph, l_d: Var, l_e: Option<Var>, omega: f64) -> Result<Var> {
    match l_e {
        Some(le) => {
            let scaled = g.mul_scalar(le, omega)?;
            g.add(l_d, scaled)
        }
        None => Ok(l_d),
    }
}

/// Plain-value helper for reports and tests.
pub fn mean_abs(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape(), "mean_abs")?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| crate::math::abs(x - y))
        .sum::<f64>()
        / a.numel() as f64)
}
