//! Direct stride-1 3D convolution, register-blocked over output channels
//! and runs of eight output voxels along the fastest axis.

use alloc::vec;
use alloc::vec::Vec;

const LANES: usize = 8;

/// Zero-padded copy of a `[C, D, H, W]` volume. Rows carry `LANES` voxels of
/// trailing slack so eight-wide loads never leave the buffer.
pub(crate) struct Padded {
    pub data: Vec<f64>,
    pub dims: [usize; 3],
    pub row: usize,
}

impl Padded {
    pub fn new(x: &[f64], c: usize, dims: [usize; 3], pad: [usize; 3]) -> Self {
        let pd = [dims[0] + 2 * pad[0], dims[1] + 2 * pad[1], dims[2] + 2 * pad[2]];
        let row = pd[2] + LANES;
        let mut data = vec![0.0; c * pd[0] * pd[1] * row];
        for ci in 0..c {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    let src = ((ci * dims[0] + z) * dims[1] + y) * dims[2];
                    let dst = ((ci * pd[0] + z + pad[0]) * pd[1] + y + pad[1]) * row + pad[2];
                    data[dst..dst + dims[2]].copy_from_slice(&x[src..src + dims[2]]);
                }
            }
        }
        Self { data, dims: pd, row }
    }

    #[inline(always)]
    fn row_at(&self, c: usize, z: usize, y: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.row
    }
}

pub(crate) struct DirectShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub output: [usize; 3],
}

#[inline(always)]
fn load(src: &[f64], at: usize) -> [f64; LANES] {
    let mut v = [0.0; LANES];
    v.copy_from_slice(&src[at..at + LANES]);
    v
}

fn forward_block<const CB: usize>(
    x: &Padded,
    w: &[f64],
    s: &DirectShape,
    co0: usize,
    out: &mut [f64],
) {
    let [k0, k1, k2] = s.kernel;
    let [d0, d1, d2] = s.dilation;
    let [od, oh, ow] = s.output;
    let taps = k0 * k1 * k2;
    let per_out = s.c_in * taps;
    let n_out = od * oh * ow;
    for z in 0..od {
        for y in 0..oh {
            let mut w0 = 0;
            while w0 < ow {
                let mut acc = [[0.0; LANES]; CB];
                for ci in 0..s.c_in {
                    for kd in 0..k0 {
                        for kh in 0..k1 {
                            let base = x.row_at(ci, z + kd * d0, y + kh * d1) + w0;
                            let tap0 = (ci * k0 + kd) * k1 * k2 + kh * k2;
                            for kw in 0..k2 {
                                let xs = load(&x.data, base + kw * d2);
                                for (cb, a) in acc.iter_mut().enumerate() {
                                    let wv = w[(co0 + cb) * per_out + tap0 + kw];
                                    for j in 0..LANES {
                                        a[j] += wv * xs[j];
                                    }
                                }
                            }
                        }
                    }
                }
                let len = LANES.min(ow - w0);
                for (cb, a) in acc.iter().enumerate() {
                    let at = (co0 + cb) * n_out + (z * oh + y) * ow + w0;
                    out[at..at + len].copy_from_slice(&a[..len]);
                }
                w0 += LANES;
            }
        }
    }
}

/// Stride-1 cross-correlation over an already padded input.
pub(crate) fn forward(x: &Padded, w: &[f64], s: &DirectShape) -> Vec<f64> {
    let n_out: usize = s.output.iter().product();
    let mut out = vec![0.0; s.c_out * n_out];
    let mut co = 0;
    while co < s.c_out {
        let left = s.c_out - co;
        if left >= 8 {
            forward_block::<8>(x, w, s, co, &mut out);
            co += 8;
        } else if left >= 4 {
            forward_block::<4>(x, w, s, co, &mut out);
            co += 4;
        } else if left >= 2 {
            forward_block::<2>(x, w, s, co, &mut out);
            co += 2;
        } else {
            forward_block::<1>(x, w, s, co, &mut out);
            co += 1;
        }
    }
    out
}

fn kernel_grad_block<const CB: usize>(
    x: &Padded,
    dy: &Padded,
    s: &DirectShape,
    co0: usize,
    dw: &mut [f64],
) {
    let [k0, k1, k2] = s.kernel;
    let [d0, d1, d2] = s.dilation;
    let [od, oh, ow] = s.output;
    let taps = k0 * k1 * k2;
    let per_out = s.c_in * taps;
    for ci in 0..s.c_in {
        for kd in 0..k0 {
            for kh in 0..k1 {
                for kw in 0..k2 {
                    let mut acc = [[0.0; LANES]; CB];
                    for z in 0..od {
                        for y in 0..oh {
                            let xb = x.row_at(ci, z + kd * d0, y + kh * d1) + kw * d2;
                            let mut w0 = 0;
                            while w0 < ow {
                                let xs = load(&x.data, xb + w0);
                                for (cb, a) in acc.iter_mut().enumerate() {
                                    let gs = load(&dy.data, dy.row_at(co0 + cb, z, y) + w0);
                                    for j in 0..LANES {
                                        a[j] += gs[j] * xs[j];
                                    }
                                }
                                w0 += LANES;
                            }
                        }
                    }
                    let tap = ((ci * k0 + kd) * k1 + kh) * k2 + kw;
                    for (cb, a) in acc.iter().enumerate() {
                        dw[(co0 + cb) * per_out + tap] = a.iter().sum();
                    }
                }
            }
        }
    }
}

/// Kernel gradient. `dy` is the output gradient stored with row slack and no
/// padding, so lanes past the row end read zeros.
pub(crate) fn kernel_grad(x: &Padded, dy: &Padded, s: &DirectShape) -> Vec<f64> {
    let taps: usize = s.kernel.iter().product();
    let mut dw = vec![0.0; s.c_out * s.c_in * taps];
    let mut co = 0;
    while co < s.c_out {
        let left = s.c_out - co;
        if left >= 4 {
            kernel_grad_block::<4>(x, dy, s, co, &mut dw);
            co += 4;
        } else if left >= 2 {
            kernel_grad_block::<2>(x, dy, s, co, &mut dw);
            co += 2;
        } else {
            kernel_grad_block::<1>(x, dy, s, co, &mut dw);
            co += 1;
        }
    }
    dw
}

/// Swaps the channel axes of a `[C_out, C_in, k0, k1, k2]` kernel and
/// reverses its taps, turning the input-gradient computation into another
/// stride-1 correlation.
pub(crate) fn flip_transpose(w: &[f64], c_out: usize, c_in: usize, taps: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..taps {
                out[(ci * c_out + co) * taps + (taps - 1 - t)] = w[(co * c_in + ci) * taps + t];
            }
        }
    }
    out
}
