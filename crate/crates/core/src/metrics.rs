//! Image-quality metrics on volumes scaled to `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10·log10(1 / MSE)`; `+∞` when the volumes agree exactly. With a mask the
/// error is averaged over mask voxels only.
pub fn psnr(target: &Tensor, pred: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    target.expect_shape(pred.shape(), "psnr")?;
    let (mut sse, mut n) = (0.0, 0usize);
    match mask {
        Some(m) => {
            if m.numel() != target.numel() {
                return Err(Error::ShapeMismatch {
                    op: "psnr mask",
                    expected: target.shape().to_vec(),
                    found: m.shape().to_vec(),
                });
            }
            for ((a, b), &w) in target.data().iter().zip(pred.data()).zip(m.data()) {
                if w != 0.0 {
                    sse += (a - b) * (a - b);
                    n += 1;
                }
            }
        }
        None => {
            for (a, b) in target.data().iter().zip(pred.data()) {
                sse += (a - b) * (a - b);
            }
            n = target.numel();
        }
    }
    if n == 0 {
        return Err(invalid("psnr: empty mask"));
    }
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * math::log10(mse))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering along the three axes.
fn filter(src: &[f64], dims: [usize; 3], w: &[f64; SSIM_WINDOW]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = src.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut next_dims = d;
        next_dims[axis] = d[axis] + 1 - SSIM_WINDOW;
        let stride = match axis {
            0 => d[1] * d[2],
            1 => d[2],
            _ => 1,
        };
        let mut out = vec![0.0; next_dims.iter().product()];
        let mut o = 0;
        for z in 0..next_dims[0] {
            for y in 0..next_dims[1] {
                for x in 0..next_dims[2] {
                    let base = (z * d[1] + y) * d[2] + x;
                    let mut acc = 0.0;
                    for (k, &wk) in w.iter().enumerate() {
                        acc += wk * cur[base + k * stride];
                    }
                    out[o] = acc;
                    o += 1;
                }
            }
        }
        cur = out;
        d = next_dims;
    }
    (cur, d)
}

/// Mean local SSIM over every full Gaussian window position.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape(), "ssim")?;
    let dims: [usize; 3] = match a.shape() {
        [d, h, w] | [1, d, h, w] => [*d, *h, *w],
        s => {
            return Err(Error::Rank {
                op: "ssim",
                expected: 3,
                found: s.len(),
            })
        }
    };
    if dims.iter().any(|&e| e < SSIM_WINDOW) {
        return Err(invalid(alloc::format!(
            "ssim: volume {dims:?} smaller than the {SSIM_WINDOW}^3 window"
        )));
    }
    let w = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let (mu_x, _) = filter(x, dims, &w);
    let (mu_y, _) = filter(y, dims, &w);
    let (xx, _) = filter(&prod(&|p, _| p * p), dims, &w);
    let (yy, _) = filter(&prod(&|_, q| q * q), dims, &w);
    let (xy, _) = filter(&prod(&|p, q| p * q), dims, &w);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cxy = xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / n as f64)
}
