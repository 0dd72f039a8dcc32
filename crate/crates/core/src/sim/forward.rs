//! Spherical-conductor forward model for radial magnetometers.
//!
//! Uses the closed-form field of a current dipole in a homogeneous sphere
//! (Sarvas 1987). The field depends on the moment only through `q x r0`, so
//! a dipole at the centre or pointing radially produces no external field.

use nalgebra::{DMatrix, Vector3};

use super::anatomy::Anatomy;
use super::sensors::SensorArray;
use crate::error::{invalid_input, Result};
use crate::par;

/// mu0 / 4pi scaled so that positions in metres and moments in nA*m give fT.
const FIELD_SCALE: f64 = 1e-7 * 1e-9 / 1e-15;

#[derive(Debug, Clone)]
pub struct LeadField {
    /// sensors x (3 * voxels); column `3*v + k` is voxel `v`, Cartesian component `k`.
    pub matrix: DMatrix<f64>,
    pub n_voxels: usize,
    /// Voxels whose columns were zeroed because they sit at the sphere centre.
    pub zeroed_voxels: Vec<usize>,
}

impl LeadField {
    pub fn n_sensors(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn column_index(voxel: usize, component: usize) -> usize {
        3 * voxel + component
    }

    pub fn voxel_of_column(col: usize) -> (usize, usize) {
        (col / 3, col % 3)
    }
}

/// Radial field (fT) at sensor `r` (mm) from dipole `q` (nA*m) at `r0` (mm).
pub fn dipole_field(r0_mm: [f64; 3], q: [f64; 3], r_mm: [f64; 3], orientation: [f64; 3]) -> f64 {
    let r0 = Vector3::from(r0_mm) * 1e-3;
    let r = Vector3::from(r_mm) * 1e-3;
    let q = Vector3::from(q);
    let qxr0 = q.cross(&r0);
    // Moments parallel to r0 up to rounding are treated as exactly radial.
    if qxr0.norm() <= 1e-12 * q.norm() * r0.norm() {
        return 0.0;
    }
    let a = r - r0;
    let an = a.norm();
    let rn = r.norm();
    let ar = a.dot(&r);
    let f = an * (rn * an + rn * rn - r0.dot(&r));
    let grad_f =
        r * (an * an / rn + ar / an + 2.0 * an + 2.0 * rn) - r0 * (an + 2.0 * rn + ar / an);
    let b = (qxr0 * f - grad_f * qxr0.dot(&r)) * (FIELD_SCALE / (f * f));
    b.dot(&Vector3::from(orientation))
}

pub fn compute_lead_field(anatomy: &Anatomy, sensors: &SensorArray) -> Result<LeadField> {
    let head = anatomy.head_radius_mm;
    for c in &anatomy.centers {
        if norm(*c) >= head {
            return Err(invalid_input("voxel outside the head sphere"));
        }
    }
    for p in &sensors.positions {
        if norm(*p) <= head {
            return Err(invalid_input("sensor inside the head sphere"));
        }
    }
    let nv = anatomy.n_voxels();
    let ns = sensors.len();
    let mut zeroed = Vec::new();
    for (v, c) in anatomy.centers.iter().enumerate() {
        if *c == [0.0; 3] {
            log::warn!("voxel {v} sits at the sphere centre; its lead-field columns are zero");
            zeroed.push(v);
        }
    }
    // columns computed in parallel, assembled in order
    let cols: Vec<Vec<f64>> = par::map_range(3 * nv, |col| {
        let (v, k) = LeadField::voxel_of_column(col);
        let mut q = [0.0; 3];
        q[k] = 1.0;
        (0..ns)
            .map(|s| {
                dipole_field(
                    anatomy.centers[v],
                    q,
                    sensors.positions[s],
                    sensors.orientations[s],
                )
            })
            .collect()
    });
    let matrix = DMatrix::from_fn(ns, 3 * nv, |s, col| cols[col][s]);
    Ok(LeadField {
        matrix,
        n_voxels: nv,
        zeroed_voxels: zeroed,
    })
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}
