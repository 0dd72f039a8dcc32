use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};

/// Eigenvalues below this fraction of the largest are dropped by the whitener.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovForm {
    Regular,
    Diagonal,
    Scalar,
}

impl CovForm {
    pub const ALL: [CovForm; 3] = [CovForm::Regular, CovForm::Diagonal, CovForm::Scalar];

    pub fn name(&self) -> &'static str {
        match self {
            CovForm::Regular => "regular",
            CovForm::Diagonal => "diagonal",
            CovForm::Scalar => "scalar",
        }
    }
}

impl fmt::Display for CovForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CovForm {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        CovForm::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                invalid_config(format!(
                    "unknown covariance form `{s}`; expected one of regular, diagonal, scalar"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    pub matrix: DMatrix<f64>,
    pub form: CovForm,
}

/// Population (1/N) covariance of the columns selected by `mask`.
pub fn empirical_covariance(data: &DMatrix<f64>, mask: Option<&[bool]>) -> (DMatrix<f64>, usize) {
    let cols: Vec<usize> = match mask {
        Some(m) => (0..data.ncols()).filter(|&c| m[c]).collect(),
        None => (0..data.ncols()).collect(),
    };
    let n = cols.len();
    let ns = data.nrows();
    if n == 0 {
        return (DMatrix::zeros(ns, ns), 0);
    }
    let sel = DMatrix::from_fn(ns, n, |r, j| data[(r, cols[j])]);
    let mean = sel.column_mean();
    let centred = DMatrix::from_fn(ns, n, |r, j| sel[(r, j)] - mean[r]);
    let cov = (&centred * centred.transpose()) / n as f64;
    // exact symmetry
    let cov = (&cov + cov.transpose()) * 0.5;
    (cov, n)
}

/// Noise covariance over the samples where `silence` is true.
pub fn estimate_noise_covariance(
    data: &DMatrix<f64>,
    silence: &[bool],
    form: CovForm,
) -> Result<NoiseCovariance> {
    if silence.len() != data.ncols() {
        return Err(invalid_input(
            "silence mask length differs from sample count",
        ));
    }
    let n_sil = silence.iter().filter(|&&s| s).count();
    let ns = data.nrows();
    let needed = match form {
        CovForm::Regular => 3 * ns,
        _ => 2,
    };
    if n_sil < needed {
        return Err(invalid_input(format!(
            "{form} noise covariance needs at least {needed} silence samples, got {n_sil}"
        )));
    }
    let (full, _) = empirical_covariance(data, Some(silence));
    let matrix = match form {
        CovForm::Regular => full,
        CovForm::Diagonal => DMatrix::from_diagonal(&full.diagonal()),
        CovForm::Scalar => DMatrix::identity(ns, ns) * full.diagonal().mean(),
    };
    Ok(NoiseCovariance { matrix, form })
}

/// Symmetric `W` with `W C W^T` equal to the projector onto the retained eigenspace of `C`.
pub fn build_whitener(cov: &NoiseCovariance) -> Result<DMatrix<f64>> {
    let c = &cov.matrix;
    let n = c.nrows();
    if c.iter().all(|&x| x == 0.0) {
        return Err(invalid_input("covariance is all zero; cannot whiten"));
    }
    if cov.form != CovForm::Regular {
        let d = c.diagonal();
        let max = d.max();
        return Ok(DMatrix::from_fn(n, n, |i, j| {
            if i == j && d[i] > RANK_TOL * max {
                1.0 / d[i].sqrt()
            } else {
                0.0
            }
        }));
    }
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.max();
    if max <= 0.0 {
        return Err(invalid_input("covariance has no positive eigenvalue"));
    }
    let scale = eig.eigenvalues.map(|l| {
        if l > RANK_TOL * max {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    });
    let u = &eig.eigenvectors;
    let w = u * DMatrix::from_diagonal(&scale) * u.transpose();
    Ok((&w + w.transpose()) * 0.5)
}

/// Number of eigenvalues the whitener keeps.
pub fn retained_rank(cov: &NoiseCovariance) -> usize {
    let eig = SymmetricEigen::new(cov.matrix.clone());
    let max = eig.eigenvalues.max();
    eig.eigenvalues
        .iter()
        .filter(|&&l| l > RANK_TOL * max)
        .count()
}
