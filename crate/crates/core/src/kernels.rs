//! Raw numeric kernels behind the differentiable operations.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! the graph layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::direct;
use crate::error::{Error, Result};
use crate::math;

/// `C = A·B` (or `C += A·B` when `accumulate`), with optional transposes.
///
/// `A` is `m×k` (stored `k×m` when `a_t`), `B` is `k×n` (stored `n×k` when
/// `b_t`), `C` is `m×n` with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(0.0);
            }
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    assert!(c.len() >= (m - 1) * ldc + n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Stride, dilation and zero padding of a 3D convolution, per axis (D, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub const UNIT: Self = Self {
        stride: [1; 3],
        dilation: [1; 3],
        padding: [0; 3],
    };

    /// Stride 1, isotropic dilation, and the padding that preserves extents
    /// for an odd kernel of size `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: [1; 3],
            dilation: [dilation; 3],
            padding: [dilation * (k - 1) / 2; 3],
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            dilation: [1; 3],
            padding: [padding; 3],
        }
    }

    /// Output extents for the given input and kernel extents.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            if self.stride[axis] == 0 || self.dilation[axis] == 0 {
                return Err(crate::error::invalid("conv3d: stride and dilation must be >= 1"));
            }
            let span = self.dilation[axis] as i64 * (kernel[axis] as i64 - 1) + 1;
            let padded = input[axis] as i64 + 2 * self.padding[axis] as i64;
            let extent = if padded < span {
                0
            } else {
                (padded - span) / self.stride[axis] as i64 + 1
            };
            if extent < 1 {
                return Err(Error::ExtentUnderflow { axis, extent: padded - span + 1 });
            }
            out[axis] = extent as usize;
        }
        Ok(out)
    }
}

pub(crate) struct ConvShape {
    pub c_in: usize,
    pub input: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn direct(&self) -> Option<direct::DirectShape> {
        let ok = self.geom.stride == [1; 3]
            && (0..3).all(|a| self.geom.padding[a] <= self.geom.dilation[a] * (self.kernel[a] - 1));
        ok.then(|| direct::DirectShape {
            c_in: self.c_in,
            c_out: self.c_out,
            kernel: self.kernel,
            dilation: self.geom.dilation,
            output: self.output,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.geom.stride == [1; 3] && self.geom.padding == [0; 3]
    }

    /// Output depth slices processed per im2col chunk.
    fn depth_chunk(&self) -> usize {
        const BUDGET: usize = 1 << 20;
        let per_slice = self.rows() * self.output[1] * self.output[2];
        (BUDGET / per_slice.max(1)).clamp(1, self.output[0])
    }
}

fn im2col(x: &[f64], s: &ConvShape, od0: usize, od1: usize, col: &mut [f64]) {
    let [d, h, w] = s.input;
    let [k0, k1, k2] = s.kernel;
    let [_, ho, wo] = s.output;
    let g = &s.geom;
    let ncol = (od1 - od0) * ho * wo;
    for ci in 0..s.c_in {
        for kd in 0..k0 {
            for kh in 0..k1 {
                for kw in 0..k2 {
                    let r = ((ci * k0 + kd) * k1 + kh) * k2 + kw;
                    let row = &mut col[r * ncol..(r + 1) * ncol];
                    let off_w = (kw * g.dilation[2]) as isize - g.padding[2] as isize;
                    for (j, od) in (od0..od1).enumerate() {
                        let id = (od * g.stride[0] + kd * g.dilation[0]) as isize
                            - g.padding[0] as isize;
                        for oh in 0..ho {
                            let dst = &mut row[(j * ho + oh) * wo..(j * ho + oh + 1) * wo];
                            let ih = (oh * g.stride[1] + kh * g.dilation[1]) as isize
                                - g.padding[1] as isize;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            let src = &x[base..base + w];
                            if g.stride[2] == 1 {
                                let lo = (-off_w).clamp(0, wo as isize) as usize;
                                let hi = (w as isize - off_w).clamp(lo as isize, wo as isize) as usize;
                                dst[..lo].fill(0.0);
                                dst[hi..].fill(0.0);
                                let s0 = (lo as isize + off_w) as usize;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            } else {
                                for (ow, v) in dst.iter_mut().enumerate() {
                                    let iw = (ow * g.stride[2]) as isize + off_w;
                                    *v = if iw >= 0 && iw < w as isize {
                                        src[iw as usize]
                                    } else {
                                        0.0
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], s: &ConvShape, od0: usize, od1: usize, dx: &mut [f64]) {
    let [d, h, w] = s.input;
    let [k0, k1, k2] = s.kernel;
    let [_, ho, wo] = s.output;
    let g = &s.geom;
    let ncol = (od1 - od0) * ho * wo;
    for ci in 0..s.c_in {
        for kd in 0..k0 {
            for kh in 0..k1 {
                for kw in 0..k2 {
                    let r = ((ci * k0 + kd) * k1 + kh) * k2 + kw;
                    let row = &col[r * ncol..(r + 1) * ncol];
                    let off_w = (kw * g.dilation[2]) as isize - g.padding[2] as isize;
                    for (j, od) in (od0..od1).enumerate() {
                        let id = (od * g.stride[0] + kd * g.dilation[0]) as isize
                            - g.padding[0] as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * g.stride[1] + kh * g.dilation[1]) as isize
                                - g.padding[1] as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = &row[(j * ho + oh) * wo..(j * ho + oh + 1) * wo];
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            let dst = &mut dx[base..base + w];
                            if g.stride[2] == 1 {
                                let lo = (-off_w).clamp(0, wo as isize) as usize;
                                let hi = (w as isize - off_w).clamp(lo as isize, wo as isize) as usize;
                                let s0 = (lo as isize + off_w) as usize;
                                for (a, b) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *a += b;
                                }
                            } else {
                                for (ow, v) in src.iter().enumerate() {
                                    let iw = (ow * g.stride[2]) as isize + off_w;
                                    if iw >= 0 && iw < w as isize {
                                        dst[iw as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f64], kernel: &[f64], s: &ConvShape) -> Vec<f64> {
    let n_out = s.out_spatial();
    let mut out = vec![0.0; s.c_out * n_out];
    let rows = s.rows();
    if s.is_pointwise() {
        gemm(s.c_out, rows, n_out, kernel, false, x, false, &mut out, n_out, false);
        return out;
    }
    if let Some(ds) = s.direct() {
        let xp = direct::Padded::new(x, s.c_in, s.input, s.geom.padding);
        return direct::forward(&xp, kernel, &ds);
    }
    let [dout, ho, wo] = s.output;
    let chunk = s.depth_chunk();
    let mut col = vec![0.0; rows * chunk * ho * wo];
    let mut od0 = 0;
    while od0 < dout {
        let od1 = (od0 + chunk).min(dout);
        let ncol = (od1 - od0) * ho * wo;
        im2col(x, s, od0, od1, &mut col[..rows * ncol]);
        gemm(
            s.c_out,
            rows,
            ncol,
            kernel,
            false,
            &col[..rows * ncol],
            false,
            &mut out[od0 * ho * wo..],
            n_out,
            false,
        );
        od0 = od1;
    }
    out
}

/// Gradients of a convolution with respect to its input and kernel; either
/// may be skipped.
pub(crate) fn conv3d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    s: &ConvShape,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n_out = s.out_spatial();
    let rows = s.rows();
    let n_in = s.input.iter().product::<usize>();
    let mut dx = want_dx.then(|| vec![0.0; s.c_in * n_in]);
    let mut dk = want_dk.then(|| vec![0.0; s.c_out * rows]);
    if s.is_pointwise() {
        if let Some(dk) = dk.as_mut() {
            gemm(s.c_out, n_out, rows, dy, false, x, true, dk, rows, false);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, s.c_out, n_out, kernel, true, dy, false, dx, n_out, false);
        }
        return (dx, dk);
    }
    if let Some(ds) = s.direct() {
        if want_dk {
            let xp = direct::Padded::new(x, s.c_in, s.input, s.geom.padding);
            let dyp = direct::Padded::new(dy, s.c_out, s.output, [0; 3]);
            dk = Some(direct::kernel_grad(&xp, &dyp, &ds));
        }
        if want_dx {
            let pad: [usize; 3] =
                core::array::from_fn(|a| s.geom.dilation[a] * (s.kernel[a] - 1) - s.geom.padding[a]);
            let dyp = direct::Padded::new(dy, s.c_out, s.output, pad);
            let taps = s.kernel.iter().product();
            let flipped = direct::flip_transpose(kernel, s.c_out, s.c_in, taps);
            let back = direct::DirectShape {
                c_in: s.c_out,
                c_out: s.c_in,
                kernel: s.kernel,
                dilation: s.geom.dilation,
                output: s.input,
            };
            dx = Some(direct::forward(&dyp, &flipped, &back));
        }
        return (dx, dk);
    }
    let [dout, ho, wo] = s.output;
    let chunk = s.depth_chunk();
    let mut col = vec![0.0; rows * chunk * ho * wo];
    let mut dy_chunk = vec![0.0; s.c_out * chunk * ho * wo];
    let mut od0 = 0;
    while od0 < dout {
        let od1 = (od0 + chunk).min(dout);
        let ncol = (od1 - od0) * ho * wo;
        // Contiguous copy of this chunk's output gradient, [c_out, ncol].
        for co in 0..s.c_out {
            let src = &dy[co * n_out + od0 * ho * wo..co * n_out + od0 * ho * wo + ncol];
            dy_chunk[co * ncol..(co + 1) * ncol].copy_from_slice(src);
        }
        let dyc = &dy_chunk[..s.c_out * ncol];
        if let Some(dk) = dk.as_mut() {
            im2col(x, s, od0, od1, &mut col[..rows * ncol]);
            gemm(s.c_out, ncol, rows, dyc, false, &col[..rows * ncol], true, dk, rows, true);
        }
        if let Some(dx) = dx.as_mut() {
            let c = &mut col[..rows * ncol];
            gemm(rows, s.c_out, ncol, kernel, true, dyc, false, c, ncol, false);
            col2im_add(c, s, od0, od1, dx);
        }
        od0 = od1;
    }
    (dx, dk)
}

/// Per-channel standardization; returns `(y, xhat, inv_std)`.
pub(crate) fn instance_norm_forward(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / channels;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / math::sqrt(var + eps);
        inv_std[c] = inv;
        for i in 0..n {
            let h = (xs[i] - mean) * inv;
            xhat[c * n + i] = h;
            y[c * n + i] = gamma[c] * h + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn instance_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let channels = inv_std.len();
    let n = dy.len() / channels;
    let nf = n as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let dys = &dy[c * n..(c + 1) * n];
        let hs = &xhat[c * n..(c + 1) * n];
        let mut sum_dy = 0.0;
        let mut sum_dy_h = 0.0;
        for i in 0..n {
            sum_dy += dys[i];
            sum_dy_h += dys[i] * hs[i];
        }
        dbeta[c] = sum_dy;
        dgamma[c] = sum_dy_h;
        let g = gamma[c];
        let k = g * inv_std[c] / nf;
        for i in 0..n {
            dx[c * n + i] = k * (nf * dys[i] - sum_dy - hs[i] * sum_dy_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling with a cubic window of `factor`; returns values and argmax
/// flat indices into `x`.
pub(crate) fn max_pool(x: &[f64], dims: [usize; 4], factor: usize) -> (Vec<f64>, Vec<usize>) {
    let [c, d, h, w] = dims;
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..factor {
                        for b in 0..factor {
                            let row = ((ci * d + z * factor + a) * h + y * factor + b) * w;
                            for e in 0..factor {
                                let i = row + xx * factor + e;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

/// Align-corners linear interpolation taps along one axis.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (math::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) struct Trilinear {
    taps: [Vec<(usize, usize, f64)>; 3],
    src: [usize; 3],
    dst: [usize; 3],
}

impl Trilinear {
    pub fn new(src: [usize; 3], dst: [usize; 3]) -> Self {
        Self {
            taps: [
                linear_taps(src[0], dst[0]),
                linear_taps(src[1], dst[1]),
                linear_taps(src[2], dst[2]),
            ],
            src,
            dst,
        }
    }

    pub fn forward(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let [sd, sh, sw] = self.src;
        let [dd, dh, dw] = self.dst;
        let mut out = vec![0.0; channels * dd * dh * dw];
        let mut o = 0;
        for c in 0..channels {
            let base = c * sd * sh * sw;
            for &(z0, z1, fz) in &self.taps[0] {
                for &(y0, y1, fy) in &self.taps[1] {
                    for &(x0, x1, fx) in &self.taps[2] {
                        let at = |z: usize, y: usize, xx: usize| x[base + (z * sh + y) * sw + xx];
                        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                        let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                        let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                        let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                        let c0 = c00 * (1.0 - fy) + c01 * fy;
                        let c1 = c10 * (1.0 - fy) + c11 * fy;
                        out[o] = c0 * (1.0 - fz) + c1 * fz;
                        o += 1;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, dy: &[f64], channels: usize) -> Vec<f64> {
        let [sd, sh, sw] = self.src;
        let mut dx = vec![0.0; channels * sd * sh * sw];
        let mut o = 0;
        for c in 0..channels {
            let base = c * sd * sh * sw;
            for &(z0, z1, fz) in &self.taps[0] {
                for &(y0, y1, fy) in &self.taps[1] {
                    for &(x0, x1, fx) in &self.taps[2] {
                        let g = dy[o];
                        o += 1;
                        for (z, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                    dx[base + (z * sh + y) * sw + xx] += g * wz * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

pub(crate) fn upsample_nearest(x: &[f64], dims: [usize; 4], f: usize) -> Vec<f64> {
    let [c, d, h, w] = dims;
    let (od, oh, ow) = (d * f, h * f, w * f);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row = ((ci * d + z / f) * h + y / f) * w;
                for xx in 0..ow {
                    out.push(x[row + xx / f]);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(dy: &[f64], dims: [usize; 4], f: usize) -> Vec<f64> {
    let [c, d, h, w] = dims;
    let (od, oh, ow) = (d * f, h * f, w * f);
    let mut dx = vec![0.0; c * d * h * w];
    let mut o = 0;
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row = ((ci * d + z / f) * h + y / f) * w;
                for xx in 0..ow {
                    dx[row + xx / f] += dy[o];
                    o += 1;
                }
            }
        }
    }
    dx
}
