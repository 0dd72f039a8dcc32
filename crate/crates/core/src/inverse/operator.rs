//! Linear inverse operators: minimum norm, dSPM, sLORETA and LCMV.
//!
//! All operators are built in whitened coordinates `G = W L` with the
//! regularization `lambda^2 = 1 / snr^2`. dSPM and sLORETA are per-row
//! positive rescalings of the minimum-norm operator; the scales are kept in
//! `normalization` so callers can verify that relation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::covariance::{build_whitener, empirical_covariance, NoiseCovariance};
use crate::error::{invalid_config, invalid_input, Result};
use crate::sim::{Anatomy, LeadField};

/// Relative diagonal loading of the LCMV data covariance.
pub const LCMV_LOADING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MinNorm,
    Dspm,
    Sloreta,
    Lcmv,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MinNorm, Method::Dspm, Method::Sloreta, Method::Lcmv];

    pub fn name(&self) -> &'static str {
        match self {
            Method::MinNorm => "min_norm",
            Method::Dspm => "dspm",
            Method::Sloreta => "sloreta",
            Method::Lcmv => "lcmv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                invalid_config(format!(
                "unknown reconstruction method `{s}`; expected one of min_norm, dspm, sloreta, lcmv"
            ))
            })
    }
}

/// Source prior scaling for the tomographic methods.
///
/// `Unit` uses an identity source covariance, giving exactly
/// `K = G^T (G G^T + lambda^2 I)^-1 W`. `Trace` scales the prior so the
/// whitened lead field has unit average power per retained channel, which
/// makes `snr` meaningful independent of physical units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorScaling {
    Unit,
    #[default]
    Trace,
}

#[derive(Debug, Clone)]
pub struct InverseOperator {
    /// (3 * voxels) x sensors
    pub weights: DMatrix<f64>,
    pub method: Method,
    pub snr: f64,
    pub lambda2: f64,
    pub subject_id: String,
    /// Per-row divisor applied to the minimum-norm rows (all ones for min_norm and lcmv).
    pub normalization: Vec<f64>,
    /// Rows zeroed because their lead-field column is degenerate (lcmv only).
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelType {
    Vec,
    Mag,
}

impl FromStr for VoxelType {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vec" => Ok(VoxelType::Vec),
            "mag" => Ok(VoxelType::Mag),
            _ => Err(invalid_config(format!(
                "unknown voxel type `{s}`; expected vec or mag"
            ))),
        }
    }
}

impl fmt::Display for VoxelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoxelType::Vec => "vec",
            VoxelType::Mag => "mag",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SourceEstimate {
    /// Vec: (3 * voxels) x samples, row `3v + k`. Mag: voxels x samples.
    pub data: DMatrix<f64>,
    pub voxel_type: VoxelType,
    pub anatomy: Arc<Anatomy>,
    pub sampling_rate_hz: f64,
}

impl SourceEstimate {
    pub fn n_voxels(&self) -> usize {
        self.anatomy.n_voxels()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    /// Euclidean norm over the three components of each voxel.
    pub fn magnitude(&self) -> Result<SourceEstimate> {
        match self.voxel_type {
            VoxelType::Mag => Ok(self.clone()),
            VoxelType::Vec => Ok(SourceEstimate {
                data: vec_to_mag(&self.data),
                voxel_type: VoxelType::Mag,
                anatomy: self.anatomy.clone(),
                sampling_rate_hz: self.sampling_rate_hz,
            }),
        }
    }
}

pub fn vec_to_mag(data: &DMatrix<f64>) -> DMatrix<f64> {
    let nv = data.nrows() / 3;
    DMatrix::from_fn(nv, data.ncols(), |v, t| {
        let (a, b, c) = (data[(3 * v, t)], data[(3 * v + 1, t)], data[(3 * v + 2, t)]);
        (a * a + b * b + c * c).sqrt()
    })
}

pub fn lambda2_from_snr(snr: f64) -> f64 {
    1.0 / (snr * snr)
}

/// `G^T (G G^T + lambda^2 I)^-1`, the whitened-space minimum-norm kernel.
pub fn min_norm_kernel(g: &DMatrix<f64>, lambda2: f64) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    let gram = g * g.transpose() + DMatrix::identity(n, n) * lambda2;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| invalid_input("regularized gram matrix is not positive definite"))?;
    // (G G^T + l I)^-1 G, transposed
    let solved = chol.solve(g);
    Ok(solved.transpose())
}

pub struct InverseInputs<'a> {
    pub leadfield: &'a LeadField,
    pub noise_cov: &'a NoiseCovariance,
    pub snr: f64,
    pub method: Method,
    pub prior: PriorScaling,
    /// Sensor data covariance, required for LCMV.
    pub data_cov: Option<&'a DMatrix<f64>>,
    pub subject_id: &'a str,
}

pub fn make_inverse_operator(inputs: &InverseInputs<'_>) -> Result<InverseOperator> {
    let l = &inputs.leadfield.matrix;
    let cov = &inputs.noise_cov.matrix;
    if cov.nrows() != l.nrows() {
        return Err(invalid_input(format!(
            "noise covariance is {}x{} but the lead field has {} sensors",
            cov.nrows(),
            cov.ncols(),
            l.nrows()
        )));
    }
    if !(inputs.snr > 0.0) {
        return Err(invalid_config(format!(
            "snr must be positive, got {}",
            inputs.snr
        )));
    }
    let lambda2 = lambda2_from_snr(inputs.snr);
    let w = build_whitener(inputs.noise_cov)?;
    let g = &w * l;
    let rows = g.ncols();

    if inputs.method == Method::Lcmv {
        let data_cov = inputs
            .data_cov
            .ok_or_else(|| invalid_input("LCMV needs a data covariance"))?;
        return lcmv(&g, &w, data_cov, inputs, lambda2);
    }

    let scale = match inputs.prior {
        PriorScaling::Unit => 1.0,
        PriorScaling::Trace => {
            let rank = w.diagonal().iter().filter(|&&x| x != 0.0).count().max(1) as f64;
            let rank = if inputs.noise_cov.form == super::CovForm::Regular {
                super::covariance::retained_rank(inputs.noise_cov) as f64
            } else {
                rank
            };
            ((&g * g.transpose()).trace() / rank)
                .sqrt()
                .max(f64::MIN_POSITIVE)
        }
    };
    let gs = &g / scale;
    // whitened-space operator in source units of the unscaled problem
    let kw = min_norm_kernel(&gs, lambda2)? / scale;
    let normalization: Vec<f64> = match inputs.method {
        Method::MinNorm => vec![1.0; rows],
        // noise sensitivity: whitened noise is identity, so row norms of kw
        Method::Dspm => (0..rows).map(|k| kw.row(k).norm()).collect(),
        Method::Sloreta => {
            let res = &kw * &g;
            (0..rows).map(|k| res[(k, k)].max(0.0).sqrt()).collect()
        }
        Method::Lcmv => unreachable!(),
    };
    let mut weights = &kw * &w;
    for (k, &s) in normalization.iter().enumerate() {
        if s > 0.0 && s != 1.0 {
            weights.row_mut(k).scale_mut(1.0 / s);
        }
    }
    Ok(InverseOperator {
        weights,
        method: inputs.method,
        snr: inputs.snr,
        lambda2,
        subject_id: inputs.subject_id.to_string(),
        normalization,
        degenerate_rows: Vec::new(),
    })
}

fn lcmv(
    g: &DMatrix<f64>,
    w: &DMatrix<f64>,
    data_cov: &DMatrix<f64>,
    inputs: &InverseInputs<'_>,
    lambda2: f64,
) -> Result<InverseOperator> {
    let n = g.nrows();
    if data_cov.nrows() != n || data_cov.ncols() != n {
        return Err(invalid_input(
            "data covariance does not match the sensor count",
        ));
    }
    let cw = w * data_cov * w.transpose();
    let load = LCMV_LOADING * cw.trace() / n as f64;
    let cw = (&cw + cw.transpose()) * 0.5 + DMatrix::identity(n, n) * load;
    let chol = cw
        .cholesky()
        .ok_or_else(|| invalid_input("loaded data covariance is not positive definite"))?;
    let cinv_g = chol.solve(g);
    let rows = g.ncols();
    let mut filters = DMatrix::zeros(rows, n);
    let mut degenerate = Vec::new();
    for k in 0..rows {
        let gk = g.column(k);
        let denom = gk.dot(&cinv_g.column(k));
        if gk.norm() == 0.0 || !(denom.abs() > f64::EPSILON * gk.norm_squared()) {
            degenerate.push(k);
            continue;
        }
        let wk: DVector<f64> = cinv_g.column(k) / denom;
        filters.row_mut(k).copy_from(&wk.transpose());
    }
    if !degenerate.is_empty() {
        log::warn!(
            "{} LCMV source components have a degenerate lead field; zeroed",
            degenerate.len()
        );
    }
    Ok(InverseOperator {
        weights: filters * w,
        method: Method::Lcmv,
        snr: inputs.snr,
        lambda2,
        subject_id: inputs.subject_id.to_string(),
        normalization: vec![1.0; rows],
        degenerate_rows: degenerate,
    })
}

/// Data covariance for LCMV over the whole recording.
pub fn data_covariance(data: &DMatrix<f64>) -> DMatrix<f64> {
    empirical_covariance(data, None).0
}

pub fn apply_inverse(
    op: &InverseOperator,
    data: &DMatrix<f64>,
    anatomy: Arc<Anatomy>,
    sampling_rate_hz: f64,
    voxel_type: VoxelType,
) -> Result<SourceEstimate> {
    if data.nrows() != op.weights.ncols() {
        return Err(invalid_input(format!(
            "recording has {} channels, operator expects {}",
            data.nrows(),
            op.weights.ncols()
        )));
    }
    if op.weights.nrows() != 3 * anatomy.n_voxels() {
        return Err(invalid_input("operator rows do not match anatomy voxels"));
    }
    let vec = &op.weights * data;
    let data = match voxel_type {
        VoxelType::Vec => vec,
        VoxelType::Mag => vec_to_mag(&vec),
    };
    Ok(SourceEstimate {
        data,
        voxel_type,
        anatomy,
        sampling_rate_hz,
    })
}
