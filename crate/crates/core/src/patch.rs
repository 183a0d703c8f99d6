//! Corner-anchored patch grids and overlap-averaging reassembly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    /// Start offsets per axis: `{0, extent - patch}`, deduplicated.
    pub offsets: [Vec<usize>; 3],
    /// Number of patches covering each voxel, row-major.
    pub coverage: Vec<u32>,
}

/// Two start offsets per axis, `0` and `extent - patch` (one when equal).
pub fn split_patches(volume: [usize; 3], patch: [usize; 3]) -> Result<PatchGrid> {
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > volume[a] {
            return Err(invalid(alloc::format!(
                "patch {patch:?} does not fit volume {volume:?}"
            )));
        }
        // two corner offsets per axis leave a gap otherwise
        if 2 * patch[a] < volume[a] {
            return Err(invalid(alloc::format!(
                "patch {patch:?} is less than half of volume {volume:?}"
            )));
        }
    }
    let offsets = [0, 1, 2].map(|a| {
        let last = volume[a] - patch[a];
        if last == 0 {
            vec![0]
        } else {
            vec![0, last]
        }
    });
    let mut grid = PatchGrid {
        volume,
        patch,
        offsets,
        coverage: vec![0; volume.iter().product()],
    };
    for start in grid.starts() {
        let cov = &mut grid.coverage;
        for_each(volume, patch, start, |dst, _| cov[dst] += 1);
    }
    Ok(grid)
}

fn for_each(volume: [usize; 3], patch: [usize; 3], start: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let mut src = 0;
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            let row = ((start[0] + z) * volume[1] + start[1] + y) * volume[2] + start[2];
            for x in 0..patch[2] {
                f(row + x, src);
                src += 1;
            }
        }
    }
}

impl PatchGrid {
    /// Patch corners, z-major.
    pub fn starts(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for &z in &self.offsets[0] {
            for &y in &self.offsets[1] {
                for &x in &self.offsets[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.offsets.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn visit(&self, start: [usize; 3], f: impl FnMut(usize, usize)) {
        for_each(self.volume, self.patch, start, f)
    }

    fn channels(&self, t: &Tensor, op: &'static str) -> Result<usize> {
        let s = t.shape();
        if s.len() < 3 || s[s.len() - 3..] != self.volume {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.volume.to_vec(),
                found: s.to_vec(),
            });
        }
        Ok(s[..s.len() - 3].iter().product())
    }

    /// Cuts the patch at `start` from a `[..., D, H, W]` tensor.
    pub fn extract(&self, t: &Tensor, start: [usize; 3]) -> Result<Tensor> {
        let c = self.channels(t, "extract_patch")?;
        let n = self.volume.iter().product::<usize>();
        let m = self.patch.iter().product::<usize>();
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            let (src, dst) = (&t.data()[ch * n..(ch + 1) * n], &mut out[ch * m..(ch + 1) * m]);
            self.visit(start, |vi, pi| dst[pi] = src[vi]);
        }
        let mut shape = t.shape()[..t.rank() - 3].to_vec();
        shape.extend_from_slice(&self.patch);
        Tensor::new(&shape, out)
    }

    /// All patches of `t`, in [`PatchGrid::starts`] order.
    pub fn extract_all(&self, t: &Tensor) -> Result<Vec<Tensor>> {
        self.starts().into_iter().map(|s| self.extract(t, s)).collect()
    }
}

/// Per-voxel mean of the covering patches.
pub fn aggregate_patches(grid: &PatchGrid, patches: &[Tensor]) -> Result<Tensor> {
    let starts = grid.starts();
    if patches.len() != starts.len() {
        return Err(invalid(alloc::format!(
            "aggregate_patches: {} of {} patches present",
            patches.len(),
            starts.len()
        )));
    }
    let m = grid.patch.iter().product::<usize>();
    let n = grid.volume.iter().product::<usize>();
    let lead = patches[0].shape()[..patches[0].rank().saturating_sub(3)].to_vec();
    let c = lead.iter().product::<usize>();
    let mut acc = vec![0.0; c * n];
    for (p, &start) in patches.iter().zip(&starts) {
        let mut expected = lead.clone();
        expected.extend_from_slice(&grid.patch);
        p.expect_shape(&expected, "aggregate_patches")?;
        for ch in 0..c {
            let src = &p.data()[ch * m..(ch + 1) * m];
            let dst = &mut acc[ch * n..(ch + 1) * n];
            grid.visit(start, |vi, pi| dst[vi] += src[pi]);
        }
    }
    for ch in 0..c {
        for (v, &k) in acc[ch * n..(ch + 1) * n].iter_mut().zip(&grid.coverage) {
            *v /= f64::from(k);
        }
    }
    let mut shape = lead;
    shape.extend_from_slice(&grid.volume);
    Tensor::new(&shape, acc)
}
