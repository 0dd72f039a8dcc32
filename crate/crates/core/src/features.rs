//! Dimensionality reductions used in ablations: per-voxel PCA of the three
//! vector components and atlas parcel summary statistics.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};

use crate::error::{invalid_config, invalid_input, Result};
use crate::sim::Anatomy;

pub const PARCEL_FEATURES: usize = 12;

/// Per-voxel principal axes, fit on training data only.
#[derive(Debug, Clone)]
pub struct VoxelPca {
    pub n_components: usize,
    /// Rows are principal axes, strongest first.
    pub bases: Vec<Matrix3<f64>>,
}

impl VoxelPca {
    /// Fits on one or more vec estimates ((3 * voxels) x samples) from the training split.
    pub fn fit(train: &[&DMatrix<f64>], n_components: usize) -> Result<Self> {
        if !(1..=3).contains(&n_components) {
            return Err(invalid_config(format!(
                "PCA components must be 1, 2 or 3, got {n_components}"
            )));
        }
        let rows = train
            .first()
            .map(|d| d.nrows())
            .ok_or_else(|| invalid_input("no training data for PCA"))?;
        if rows % 3 != 0 || train.iter().any(|d| d.nrows() != rows) {
            return Err(invalid_input(
                "PCA expects vec estimates with matching voxel counts",
            ));
        }
        let nv = rows / 3;
        let total: usize = train.iter().map(|d| d.ncols()).sum();
        let mut bases = Vec::with_capacity(nv);
        for v in 0..nv {
            let mut mean = Vector3::zeros();
            for d in train {
                for t in 0..d.ncols() {
                    mean += Vector3::new(d[(3 * v, t)], d[(3 * v + 1, t)], d[(3 * v + 2, t)]);
                }
            }
            mean /= total as f64;
            let mut cov = Matrix3::zeros();
            for d in train {
                for t in 0..d.ncols() {
                    let x =
                        Vector3::new(d[(3 * v, t)], d[(3 * v + 1, t)], d[(3 * v + 2, t)]) - mean;
                    cov += x * x.transpose();
                }
            }
            cov /= total as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let mut basis = Matrix3::zeros();
            for (i, &o) in order.iter().enumerate() {
                basis
                    .row_mut(i)
                    .copy_from(&eig.eigenvectors.column(o).transpose());
            }
            bases.push(basis);
        }
        Ok(Self {
            n_components,
            bases,
        })
    }

    /// (voxels * n_components) x samples.
    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.n_components;
        DMatrix::from_fn(self.bases.len() * k, data.ncols(), |row, t| {
            let (v, c) = (row / k, row % k);
            let b = &self.bases[v];
            (0..3).map(|a| b[(c, a)] * data[(3 * v + a, t)]).sum()
        })
    }

    /// Back-projection to (3 * voxels) x samples.
    pub fn reconstruct(&self, reduced: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.n_components;
        DMatrix::from_fn(self.bases.len() * 3, reduced.ncols(), |row, t| {
            let (v, a) = (row / 3, row % 3);
            let b = &self.bases[v];
            (0..k).map(|c| b[(c, a)] * reduced[(v * k + c, t)]).sum()
        })
    }
}

/// Parcel summaries: for each parcel and axis, mean / population std / max / min
/// over member voxels. Row `12 * p + 4 * axis + stat`.
#[derive(Debug, Clone)]
pub struct ParcelFeatures {
    pub parcels: Vec<u32>,
    pub data: DMatrix<f64>,
}

pub fn parcel_features(data: &DMatrix<f64>, anatomy: &Anatomy) -> Result<ParcelFeatures> {
    if data.nrows() != 3 * anatomy.n_voxels() {
        return Err(invalid_input(
            "parcel features need a vec estimate on the atlas grid",
        ));
    }
    let mut parcels = Vec::new();
    let mut members = Vec::new();
    for r in anatomy.region_ids() {
        let vs = anatomy.region_voxels(r);
        if vs.is_empty() {
            log::warn!("parcel {r} has no voxels; excluded");
            continue;
        }
        parcels.push(r);
        members.push(vs);
    }
    let nt = data.ncols();
    let mut out = DMatrix::zeros(PARCEL_FEATURES * parcels.len(), nt);
    for (p, vs) in members.iter().enumerate() {
        let n = vs.len() as f64;
        for axis in 0..3 {
            for t in 0..nt {
                let vals = vs.iter().map(|&v| data[(3 * v + axis, t)]);
                let mean = vals.clone().sum::<f64>() / n;
                let var = vals.clone().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
                let min = vals.fold(f64::INFINITY, f64::min);
                let base = PARCEL_FEATURES * p + 4 * axis;
                out[(base, t)] = mean;
                out[(base + 1, t)] = var.sqrt();
                out[(base + 2, t)] = max;
                out[(base + 3, t)] = min;
            }
        }
    }
    Ok(ParcelFeatures { parcels, data: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Affine, Lattice};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn full_basis_reconstructs_exactly() {
        let d = DMatrix::from_fn(6, 40, |r, t| ((r * 17 + t * 5) % 13) as f64 - 6.0);
        let pca = VoxelPca::fit(&[&d], 3).unwrap();
        for b in &pca.bases {
            assert!((b * b.transpose() - Matrix3::identity()).abs().max() < 1e-9);
        }
        let rec = pca.reconstruct(&pca.transform(&d));
        assert!((rec - d).abs().max() < 1e-9);
    }

    #[test]
    fn planar_signal_needs_two_components() {
        let u = Vector3::new(1.0, 2.0, -1.0).normalize();
        let w = Vector3::new(0.5, -0.2, 0.3).normalize();
        let d = DMatrix::from_fn(3, 100, |a, t| {
            let x = u * (t as f64 * 0.1).sin() * 3.0 + w * (t as f64 * 0.37).cos();
            x[a]
        });
        let pca = VoxelPca::fit(&[&d], 2).unwrap();
        let rec = pca.reconstruct(&pca.transform(&d));
        assert!((rec - d).abs().max() < 1e-9);
    }

    #[test]
    fn one_component_of_isotropic_noise_captures_a_third() {
        let mut rng = crate::seed::rng(7);
        let d = DMatrix::from_fn(3, 20_000, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pca = VoxelPca::fit(&[&d], 1).unwrap();
        let z = pca.transform(&d);
        let captured = z.iter().map(|x| x * x).sum::<f64>() / d.iter().map(|x| x * x).sum::<f64>();
        assert!((captured - 1.0 / 3.0).abs() < 0.05, "{captured}");
    }

    #[test]
    fn invalid_component_count() {
        let d = DMatrix::zeros(3, 5);
        assert!(VoxelPca::fit(&[&d], 0).is_err());
        assert!(VoxelPca::fit(&[&d], 4).is_err());
    }

    fn line_anatomy(labels: &[u32]) -> Anatomy {
        let lattice = Lattice {
            spacing: 10.0,
            dims: [labels.len(), 1, 1],
        };
        let mut a = Anatomy::from_mask(
            10.0,
            100.0,
            lattice,
            vec![true; labels.len()],
            Affine::identity(),
        )
        .unwrap();
        a.atlas = labels.to_vec();
        a
    }

    #[test]
    fn parcel_statistics() {
        let a = line_anatomy(&[1, 1, 2, 0]);
        // x values: voxel0 = 1, voxel1 = 3, voxel2 = 5
        let d = DMatrix::from_fn(12, 1, |r, _| {
            if r % 3 == 0 {
                [1.0, 3.0, 5.0, 9.0][r / 3]
            } else {
                0.0
            }
        });
        let f = parcel_features(&d, &a).unwrap();
        assert_eq!(f.parcels, vec![1, 2]);
        assert_eq!(f.data.nrows(), 2 * PARCEL_FEATURES);
        let x = f.data.column(0);
        assert_eq!([x[0], x[1], x[2], x[3]], [2.0, 1.0, 3.0, 1.0]);
        // singleton parcel
        assert_eq!([x[12], x[13], x[14], x[15]], [5.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn parcel_features_ignore_voxel_order() {
        let a = line_anatomy(&[1, 1, 1]);
        let d = DMatrix::from_fn(9, 2, |r, t| (r * 3 + t) as f64 * 0.7);
        let b = line_anatomy(&[1, 1, 1]);
        let perm = [2usize, 0, 1];
        let dp = DMatrix::from_fn(9, 2, |r, t| d[(3 * perm[r / 3] + r % 3, t)]);
        assert_eq!(
            parcel_features(&d, &a).unwrap().data,
            parcel_features(&dp, &b).unwrap().data
        );
    }
}
