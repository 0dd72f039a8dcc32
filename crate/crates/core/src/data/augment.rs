//! Mixup, slice dropout, cube masking and atlas region masks.
//!
//! Dense samples are channel-major `6 x nx x ny x nz` buffers; only the
//! vector channels 0-2 are ever masked.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use super::grid::DENSE_CHANNELS;
use crate::error::{invalid_config, invalid_input, Result};
use crate::seed::Rng;
use crate::sim::Anatomy;

fn cells(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid_config(format!(
            "{name} must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Mixes rows `i` and `perm[i]` with weight `lambdas[i]`.
pub fn mixup_with(x: &mut [f64], y: &mut [f64], dim: usize, lambdas: &[f64], perm: &[usize]) {
    let n = y.len();
    assert_eq!(x.len(), n * dim);
    assert!(lambdas.len() == n && perm.len() == n);
    let x0 = x.to_vec();
    let y0 = y.to_vec();
    for i in 0..n {
        let (l, j) = (lambdas[i], perm[i]);
        for k in 0..dim {
            x[i * dim + k] = l * x0[i * dim + k] + (1.0 - l) * x0[j * dim + k];
        }
        y[i] = l * y0[i] + (1.0 - l) * y0[j];
    }
}

/// Mixup with per-pair `lambda ~ Beta(alpha, alpha)` and a random pairing.
pub fn mixup(x: &mut [f64], y: &mut [f64], dim: usize, alpha: f64, rng: &mut Rng) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid_config(format!(
            "mixup alpha must be > 0, got {alpha}"
        )));
    }
    let n = y.len();
    if n < 2 {
        return Err(invalid_input("mixup needs a batch of at least 2"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid_config(e.to_string()))?;
    let lambdas: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    mixup_with(x, y, dim, &lambdas, &perm);
    Ok(())
}

/// Planes dropped along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMask {
    pub planes: [Vec<bool>; 3],
}

impl PlaneMask {
    pub fn none(dims: [usize; 3]) -> Self {
        Self {
            planes: [
                vec![false; dims[0]],
                vec![false; dims[1]],
                vec![false; dims[2]],
            ],
        }
    }

    pub fn sample(dims: [usize; 3], p: f64, rng: &mut Rng) -> Self {
        let mut m = Self::none(dims);
        for axis in m.planes.iter_mut() {
            for d in axis.iter_mut() {
                *d = rng.random::<f64>() < p;
            }
        }
        m
    }

    pub fn apply(&self, sample: &mut [f64], dims: [usize; 3]) {
        let nc = cells(dims);
        assert_eq!(sample.len(), DENSE_CHANNELS * nc);
        let [nx, ny, nz] = dims;
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if self.planes[0][x] || self.planes[1][y] || self.planes[2][z] {
                        let c = (x * ny + y) * nz + z;
                        for k in 0..3 {
                            sample[k * nc + c] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Independently drops each lattice plane with probability `p`, per sample.
pub fn slice_dropout(batch: &mut [f64], dims: [usize; 3], p: f64, rng: &mut Rng) -> Result<()> {
    check_prob("slice dropout p", p)?;
    if p == 0.0 {
        return Ok(());
    }
    for sample in batch.chunks_mut(DENSE_CHANNELS * cells(dims)) {
        PlaneMask::sample(dims, p, rng).apply(sample, dims);
    }
    Ok(())
}

/// Inclusive axis-aligned box spanned by two lattice cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxMask {
    pub a: [usize; 3],
    pub b: [usize; 3],
}

impl BoxMask {
    pub fn sample(dims: [usize; 3], rng: &mut Rng) -> Self {
        let mut pick = || {
            [
                rng.random_range(0..dims[0]),
                rng.random_range(0..dims[1]),
                rng.random_range(0..dims[2]),
            ]
        };
        let a = pick();
        let b = pick();
        Self { a, b }
    }

    pub fn apply(&self, sample: &mut [f64], dims: [usize; 3]) {
        let nc = cells(dims);
        assert_eq!(sample.len(), DENSE_CHANNELS * nc);
        let lo = [0, 1, 2].map(|i| self.a[i].min(self.b[i]));
        let hi = [0, 1, 2].map(|i| self.a[i].max(self.b[i]).min(dims[i] - 1));
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let c = (x * dims[1] + y) * dims[2] + z;
                    for k in 0..3 {
                        sample[k * nc + c] = 0.0;
                    }
                }
            }
        }
    }
}

/// Masks a random box in each sample with probability `p_apply`.
pub fn cube_mask(batch: &mut [f64], dims: [usize; 3], p_apply: f64, rng: &mut Rng) -> Result<()> {
    check_prob("cube mask p_apply", p_apply)?;
    if p_apply == 0.0 {
        return Ok(());
    }
    for sample in batch.chunks_mut(DENSE_CHANNELS * cells(dims)) {
        if rng.random::<f64>() < p_apply {
            BoxMask::sample(dims, rng).apply(sample, dims);
        }
    }
    Ok(())
}

pub const MIN_REGION_VOXELS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum RegionMask {
    /// Voxel indices to zero, sorted.
    Voxels(Vec<usize>),
    Rejected {
        region: u32,
        voxels: usize,
    },
}

/// Voxels of `region` plus brain voxels within `buffer` lattice steps
/// (Chebyshev distance) of any of them.
pub fn region_mask(anat: &Anatomy, region: u32, buffer: usize) -> RegionMask {
    let core = anat.region_voxels(region);
    if core.len() < MIN_REGION_VOXELS {
        return RegionMask::Rejected {
            region,
            voxels: core.len(),
        };
    }
    let b = buffer as i64;
    let mut hit = vec![false; anat.n_voxels()];
    for &v in &core {
        let c = anat.voxel_cells[v];
        for dx in -b..=b {
            for dy in -b..=b {
                for dz in -b..=b {
                    let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if let Some(u) = anat.voxel_at_signed(q) {
                        hit[u] = true;
                    }
                }
            }
        }
    }
    RegionMask::Voxels((0..hit.len()).filter(|&v| hit[v]).collect())
}

/// Zeroes the vector components of `voxels` in a flat `3 x n_voxels` sample.
pub fn mask_flat(sample: &mut [f64], voxels: &[usize]) {
    for &v in voxels {
        sample[3 * v..3 * v + 3].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::sim::build_template_anatomy;
    use proptest::prelude::*;

    const D4: [usize; 3] = [4, 4, 4];

    fn dense(dims: [usize; 3], fill: f64) -> Vec<f64> {
        let nc = cells(dims);
        (0..DENSE_CHANNELS * nc)
            .map(|i| {
                if i < 3 * nc {
                    fill + i as f64
                } else {
                    -(i as f64)
                }
            })
            .collect()
    }

    fn zeroed_cells(s: &[f64], dims: [usize; 3]) -> usize {
        let nc = cells(dims);
        (0..nc)
            .filter(|&c| (0..3).all(|k| s[k * nc + c] == 0.0))
            .count()
    }

    #[test]
    fn mixup_identity_and_midpoint() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        let mut y = vec![1.0, 0.0];
        mixup_with(&mut x, &mut y, 2, &[1.0, 1.0], &[1, 0]);
        assert_eq!((x, y), (vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 0.0]));
        let mut x = vec![0.0, 2.0];
        let mut y = vec![0.0, 1.0];
        mixup_with(&mut x, &mut y, 1, &[0.5, 0.5], &[1, 0]);
        assert_eq!(x, vec![1.0, 1.0]);
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn mixup_rejects_bad_alpha() {
        let mut r = seed::rng(0);
        assert!(mixup(&mut [0.0; 2], &mut [0.0; 2], 1, 0.0, &mut r).is_err());
        assert!(mixup(&mut [0.0; 1], &mut [0.0; 1], 1, 1.0, &mut r).is_err());
    }

    proptest! {
        #[test]
        fn mixup_stays_in_pair_hull(s in 0u64..500, alpha in 0.05f64..2.0) {
            let mut r = seed::rng(s);
            let x0: Vec<f64> = (0..24).map(|i| ((i * 7 + s as usize) % 11) as f64).collect();
            let mut x = x0.clone();
            let mut y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
            mixup(&mut x, &mut y, 4, alpha, &mut r).unwrap();
            for i in 0..6 {
                for k in 0..4 {
                    let v = x[i * 4 + k];
                    let in_some_pair = (0..6).any(|j| {
                        let (a, b) = (x0[i * 4 + k], x0[j * 4 + k]);
                        v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12
                    });
                    prop_assert!(in_some_pair);
                }
                prop_assert!((0.0..=1.0).contains(&y[i]));
            }
        }

        #[test]
        fn masks_keep_positions_and_are_idempotent(s in 0u64..500) {
            let mut r = seed::rng(s);
            let orig = dense(D4, 1.0);
            let nc = cells(D4);
            let pm = PlaneMask::sample(D4, 0.3, &mut r);
            let bm = BoxMask::sample(D4, &mut r);
            let mut once = orig.clone();
            pm.apply(&mut once, D4);
            bm.apply(&mut once, D4);
            prop_assert_eq!(&once[3 * nc..], &orig[3 * nc..]);
            let mut twice = once.clone();
            pm.apply(&mut twice, D4);
            bm.apply(&mut twice, D4);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn single_plane_zeroes_sixteen_cells() {
        let mut m = PlaneMask::none(D4);
        m.planes[0][2] = true;
        let mut s = dense(D4, 1.0);
        m.apply(&mut s, D4);
        assert_eq!(zeroed_cells(&s, D4), 16);
    }

    #[test]
    fn slice_dropout_extremes() {
        let mut r = seed::rng(3);
        let orig = dense(D4, 1.0);
        let mut s = orig.clone();
        slice_dropout(&mut s, D4, 0.0, &mut r).unwrap();
        assert_eq!(s, orig);
        slice_dropout(&mut s, D4, 1.0, &mut r).unwrap();
        assert_eq!(zeroed_cells(&s, D4), 64);
        assert!(slice_dropout(&mut s, D4, 1.5, &mut r).is_err());
    }

    #[test]
    fn box_counts() {
        let mut s = dense(D4, 1.0);
        BoxMask {
            a: [0, 0, 0],
            b: [1, 1, 1],
        }
        .apply(&mut s, D4);
        assert_eq!(zeroed_cells(&s, D4), 8);
        let mut s = dense(D4, 1.0);
        BoxMask {
            a: [2, 3, 1],
            b: [2, 3, 1],
        }
        .apply(&mut s, D4);
        assert_eq!(zeroed_cells(&s, D4), 1);
    }

    #[test]
    fn cube_mask_zero_probability_is_identity() {
        let mut r = seed::rng(1);
        let orig = dense(D4, 1.0);
        let mut s = orig.clone();
        cube_mask(&mut s, D4, 0.0, &mut r).unwrap();
        assert_eq!(s, orig);
        assert!(cube_mask(&mut s, D4, -0.1, &mut r).is_err());
    }

    #[test]
    fn region_mask_counts_and_buffer_monotone() {
        let anat = build_template_anatomy(15.0, 75.0, 4).unwrap();
        let id = *anat
            .region_ids()
            .iter()
            .max_by_key(|&&r| anat.region_voxels(r).len())
            .unwrap();
        let n = anat.region_voxels(id).len();
        let RegionMask::Voxels(b0) = region_mask(&anat, id, 0) else {
            panic!()
        };
        assert_eq!(b0.len(), n);
        let RegionMask::Voxels(b1) = region_mask(&anat, id, 1) else {
            panic!()
        };
        assert!(b1.len() > b0.len() && b0.iter().all(|v| b1.contains(v)));
        assert_eq!(
            region_mask(&anat, 999, 0),
            RegionMask::Rejected {
                region: 999,
                voxels: 0
            }
        );
        let mut flat = vec![1.0; 3 * anat.n_voxels()];
        mask_flat(&mut flat, &b0);
        assert_eq!(flat.iter().filter(|&&x| x == 0.0).count(), 3 * n);
    }
}
