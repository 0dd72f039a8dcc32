//! Dense box layout for voxel features.

use crate::sim::Anatomy;

pub const DENSE_CHANNELS: usize = 6;

/// Bounding box of an anatomy's brain voxels with positional channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub dims: [usize; 3],
    /// Box cell of each voxel, flat index with x slowest.
    pub voxel_cell: Vec<usize>,
    /// Per box cell: voxel index, if inside the brain.
    pub cell_voxel: Vec<Option<usize>>,
    /// Per voxel, position normalised to [-1, 1] along each axis.
    pub positions: Vec<[f64; 3]>,
    /// Integer box coordinates per voxel.
    pub voxel_coords: Vec<[usize; 3]>,
}

impl GridLayout {
    pub fn from_anatomy(anat: &Anatomy) -> Self {
        let n = anat.n_voxels();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for c in &anat.voxel_cells {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut cell_voxel = vec![None; n_cells];
        let mut voxel_cell = Vec::with_capacity(n);
        let mut voxel_coords = Vec::with_capacity(n);
        for (v, c) in anat.voxel_cells.iter().enumerate() {
            let b = [c[0] - lo[0], c[1] - lo[1], c[2] - lo[2]];
            let idx = (b[0] * dims[1] + b[1]) * dims[2] + b[2];
            cell_voxel[idx] = Some(v);
            voxel_cell.push(idx);
            voxel_coords.push(b);
        }
        let positions = voxel_coords
            .iter()
            .map(|b| {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if dims[a] > 1 {
                        2.0 * b[a] as f64 / (dims[a] - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                }
                p
            })
            .collect();
        Self {
            dims,
            voxel_cell,
            cell_voxel,
            positions,
            voxel_coords,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_cell.len()
    }

    pub fn dense_len(&self) -> usize {
        DENSE_CHANNELS * self.n_cells()
    }

    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn cell_coords(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), y, z]
    }

    /// Scatters a flat vec sample (3 values per voxel) into `out`
    /// (channel-major, 6 x cells). Channels 3-5 carry positions.
    pub fn inscribe_into(&self, flat: &[f64], out: &mut [f64]) {
        assert_eq!(flat.len(), 3 * self.n_voxels());
        assert_eq!(out.len(), self.dense_len());
        out.fill(0.0);
        let nc = self.n_cells();
        for (v, &cell) in self.voxel_cell.iter().enumerate() {
            for k in 0..3 {
                out[k * nc + cell] = flat[3 * v + k];
                out[(3 + k) * nc + cell] = self.positions[v][k];
            }
        }
    }

    pub fn inscribe(&self, flat: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dense_len()];
        self.inscribe_into(flat, &mut out);
        out
    }

    /// Gathers the vec channels back over the inside voxels.
    pub fn gather(&self, dense: &[f64]) -> Vec<f64> {
        let nc = self.n_cells();
        let mut flat = vec![0.0; 3 * self.n_voxels()];
        for (v, &cell) in self.voxel_cell.iter().enumerate() {
            for k in 0..3 {
                flat[3 * v + k] = dense[k * nc + cell];
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::build_template_anatomy;
    use proptest::prelude::*;

    fn grid() -> GridLayout {
        GridLayout::from_anatomy(&build_template_anatomy(20.0, 75.0, 1).unwrap())
    }

    #[test]
    fn zero_features_leave_positions() {
        let g = grid();
        let d = g.inscribe(&vec![0.0; 3 * g.n_voxels()]);
        let nc = g.n_cells();
        assert!(d[..3 * nc].iter().all(|&x| x == 0.0));
        for (v, &c) in g.voxel_cell.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(d[(3 + k) * nc + c], g.positions[v][k]);
            }
        }
    }

    #[test]
    fn single_voxel_lands_in_one_cell() {
        let g = grid();
        let mut f = vec![0.0; 3 * g.n_voxels()];
        f[3 * 5..3 * 5 + 3].copy_from_slice(&[1.0, 2.0, 3.0]);
        let d = g.inscribe(&f);
        let nc = g.n_cells();
        let hits: Vec<usize> = (0..nc)
            .filter(|&c| d[c] != 0.0 || d[nc + c] != 0.0 || d[2 * nc + c] != 0.0)
            .collect();
        assert_eq!(hits, vec![g.voxel_cell[5]]);
        let c = hits[0];
        assert_eq!([d[c], d[nc + c], d[2 * nc + c]], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn positional_extrema_are_unit() {
        let g = grid();
        for a in 0..3 {
            let min = g
                .positions
                .iter()
                .map(|p| p[a])
                .fold(f64::INFINITY, f64::min);
            let max = g
                .positions
                .iter()
                .map(|p| p[a])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((min, max), (-1.0, 1.0));
        }
    }

    proptest! {
        #[test]
        fn scatter_gather_roundtrip(seed in 0u64..1000) {
            let g = grid();
            let f: Vec<f64> = (0..3 * g.n_voxels()).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 - 500.0).collect();
            prop_assert_eq!(g.gather(&g.inscribe(&f)), f);
        }
    }
}
