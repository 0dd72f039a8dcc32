//! Resampling source estimates between anatomies.
//!
//! Anatomies are related through their template->subject affines, so a
//! target voxel centre `p` maps to `M p` in the source frame with
//! `M = from.affine * to.affine^-1`. Values are trilinearly interpolated on
//! the source lattice when all eight surrounding cells are brain voxels and
//! taken from the nearest voxel otherwise. A target voxel whose nearest
//! source cell is outside the brain gets zeros and is flagged. Vector
//! components are rotated by the rotation factor of `M`.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{invalid_config, Result};
use crate::inverse::{SourceEstimate, VoxelType};
use crate::sim::{Affine, Anatomy};

#[derive(Debug, Clone)]
pub struct Morphed {
    pub estimate: SourceEstimate,
    /// Target voxels that fell outside the source brain.
    pub outside: Vec<usize>,
}

/// Per-target-voxel interpolation stencil: (source voxel, weight) pairs.
#[derive(Debug, Clone)]
pub struct MorphMap {
    pub stencils: Vec<Vec<(usize, f64)>>,
    pub rotation: Option<Matrix3<f64>>,
    pub outside: Vec<usize>,
    pub n_source_voxels: usize,
}

pub fn mapping_affine(from: &Anatomy, to: &Anatomy) -> Result<Affine> {
    Ok(from.subject_affine.compose(&to.subject_affine.inverse()?))
}

pub fn build_morph_map(from: &Anatomy, to: &Anatomy) -> Result<MorphMap> {
    let m = mapping_affine(from, to)?;
    let identity = m.is_identity() && from == to;
    let rotation = if m.linear() == Matrix3::identity() {
        None
    } else {
        Some(m.rotation())
    };
    let mut stencils = Vec::with_capacity(to.n_voxels());
    let mut outside = Vec::new();
    for (tv, &p) in to.centers.iter().enumerate() {
        if identity {
            stencils.push(vec![(tv, 1.0)]);
            continue;
        }
        let q = from.lattice.continuous_index(m.apply(p));
        let nearest = q.map(|x| x.round() as i64);
        let Some(nv) = from.voxel_at_signed(nearest) else {
            outside.push(tv);
            stencils.push(Vec::new());
            continue;
        };
        let base = q.map(|x| x.floor() as i64);
        let frac = [
            q[0] - base[0] as f64,
            q[1] - base[1] as f64,
            q[2] - base[2] as f64,
        ];
        let mut st = Vec::with_capacity(8);
        let mut complete = true;
        for corner in 0..8 {
            let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let w: f64 = (0..3)
                .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            let c = [
                base[0] + off[0] as i64,
                base[1] + off[1] as i64,
                base[2] + off[2] as i64,
            ];
            match from.voxel_at_signed(c) {
                Some(v) => {
                    if w != 0.0 {
                        st.push((v, w));
                    }
                }
                None if w == 0.0 => {}
                None => {
                    complete = false;
                    break;
                }
            }
        }
        stencils.push(if complete { st } else { vec![(nv, 1.0)] });
    }
    Ok(MorphMap {
        stencils,
        rotation,
        outside,
        n_source_voxels: from.n_voxels(),
    })
}

impl MorphMap {
    /// Applies the map to vec (3 rows per voxel) or mag (1 row per voxel) data.
    pub fn apply(&self, data: &DMatrix<f64>, voxel_type: VoxelType) -> DMatrix<f64> {
        let comps = match voxel_type {
            VoxelType::Vec => 3,
            VoxelType::Mag => 1,
        };
        assert_eq!(data.nrows(), comps * self.n_source_voxels);
        let nt = data.ncols();
        let mut out = DMatrix::zeros(comps * self.stencils.len(), nt);
        for (tv, st) in self.stencils.iter().enumerate() {
            for &(sv, w) in st {
                for k in 0..comps {
                    for t in 0..nt {
                        out[(comps * tv + k, t)] += w * data[(comps * sv + k, t)];
                    }
                }
            }
            if let (Some(r), VoxelType::Vec) = (&self.rotation, voxel_type) {
                // target-frame vector = R^T * source-frame vector
                let rt = r.transpose();
                for t in 0..nt {
                    let v =
                        Vector3::new(out[(3 * tv, t)], out[(3 * tv + 1, t)], out[(3 * tv + 2, t)]);
                    let u = rt * v;
                    for k in 0..3 {
                        out[(3 * tv + k, t)] = u[k];
                    }
                }
            }
        }
        out
    }
}

pub fn morph_estimate(est: &SourceEstimate, from: &Anatomy, to: &Arc<Anatomy>) -> Result<Morphed> {
    let map = build_morph_map(from, to)?;
    let data = map.apply(&est.data, est.voxel_type);
    Ok(Morphed {
        estimate: SourceEstimate {
            data,
            voxel_type: est.voxel_type,
            anatomy: to.clone(),
            sampling_rate_hz: est.sampling_rate_hz,
        },
        outside: map.outside,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    InDomain,
    ToTemplate,
    ToSubject,
}

impl FromStr for EvalKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(EvalKind::InDomain),
            "to_template" => Ok(EvalKind::ToTemplate),
            "to_subject" => Ok(EvalKind::ToSubject),
            _ => Err(invalid_config(format!(
                "unknown evaluation kind `{s}`; expected in_domain, to_template or to_subject"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MorphTarget {
    /// No morph: the data stays on the grid it was reconstructed on.
    Identity,
    Template,
    Subject(String),
}

/// Which grid evaluation data is mapped to for a given evaluation kind.
/// Inter-subject models live on the template grid; single-subject models on
/// their own subject's grid.
pub fn morph_direction_for_eval(
    kind: EvalKind,
    target_subject: Option<&str>,
) -> Result<MorphTarget> {
    match kind {
        EvalKind::InDomain => Ok(MorphTarget::Identity),
        EvalKind::ToTemplate => Ok(MorphTarget::Template),
        EvalKind::ToSubject => target_subject
            .map(|s| MorphTarget::Subject(s.to_string()))
            .ok_or_else(|| invalid_config("to_subject evaluation needs a target subject")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_template_anatomy, derive_subject_anatomy, subject_from_affine};

    fn smooth_field(anat: &Anatomy, affine: &Affine, n_t: usize) -> DMatrix<f64> {
        // low spatial frequency field defined in template coordinates, expressed in anat's frame
        let inv = affine.inverse().unwrap();
        let r = affine.rotation();
        DMatrix::from_fn(3 * anat.n_voxels(), n_t, |row, t| {
            let (v, k) = (row / 3, row % 3);
            let p = inv.apply(anat.centers[v]);
            let base = Vector3::new(
                (p[0] / 60.0 + t as f64 * 0.3).sin(),
                (p[1] / 70.0).cos() * (1.0 + t as f64),
                p[2] / 50.0,
            );
            (r * base)[k]
        })
    }

    fn est(anat: &Arc<Anatomy>, data: DMatrix<f64>) -> SourceEstimate {
        SourceEstimate {
            data,
            voxel_type: VoxelType::Vec,
            anatomy: anat.clone(),
            sampling_rate_hz: 100.0,
        }
    }

    #[test]
    fn identity_morph() {
        let t = Arc::new(build_template_anatomy(15.0, 75.0, 1).unwrap());
        let d = DMatrix::from_fn(3 * t.n_voxels(), 4, |r, c| (r * 7 + c) as f64);
        let m = morph_estimate(&est(&t, d.clone()), &t, &t).unwrap();
        assert!((m.estimate.data - d).abs().max() < 1e-9);
        assert!(m.outside.is_empty());
    }

    #[test]
    fn one_voxel_translation_shifts_values() {
        let t = build_template_anatomy(15.0, 75.0, 1).unwrap();
        // subject = template shifted by +1 voxel in x
        let s = subject_from_affine(&t, Affine::translation([15.0, 0.0, 0.0])).unwrap();
        let to = Arc::new(t.clone());
        let d = DMatrix::from_fn(3 * s.n_voxels(), 2, |r, c| {
            (r as f64 * 0.5).sin() + c as f64
        });
        let m = morph_estimate(&est(&Arc::new(s.clone()), d.clone()), &s, &to).unwrap();
        let mut checked = 0;
        for (tv, cell) in t.voxel_cells.iter().enumerate() {
            let shifted = [cell[0] as i64 + 1, cell[1] as i64, cell[2] as i64];
            if let Some(sv) = s.voxel_at_signed(shifted) {
                for k in 0..3 {
                    for c in 0..2 {
                        assert!(
                            (m.estimate.data[(3 * tv + k, c)] - d[(3 * sv + k, c)]).abs() < 1e-9
                        );
                    }
                }
                checked += 1;
            }
        }
        assert!(checked > t.n_voxels() / 2);
    }

    #[test]
    fn round_trip_preserves_smooth_fields() {
        let t = Arc::new(build_template_anatomy(15.0, 75.0, 2).unwrap());
        let s = Arc::new(derive_subject_anatomy(&t, 11, 0.1).unwrap());
        let field = smooth_field(&s, &s.subject_affine, 3);
        let to_t = morph_estimate(&est(&s, field.clone()), &s, &t).unwrap();
        let back = morph_estimate(&to_t.estimate, &t, &s).unwrap();
        // interior: voxels whose 26-neighbourhood is entirely inside
        let interior: Vec<usize> = (0..s.n_voxels())
            .filter(|&v| {
                let c = s.voxel_cells[v].map(|x| x as i64);
                (-2..=2).all(|dx| {
                    (-2..=2).all(|dy| {
                        (-2..=2).all(|dz| {
                            s.voxel_at_signed([c[0] + dx, c[1] + dy, c[2] + dz])
                                .is_some()
                        })
                    })
                })
            })
            .collect();
        assert!(!interior.is_empty());
        let (mut num, mut den) = (0.0, 0.0);
        for &v in &interior {
            for k in 0..3 {
                for c in 0..3 {
                    num += (back.estimate.data[(3 * v + k, c)] - field[(3 * v + k, c)]).powi(2);
                    den += field[(3 * v + k, c)].powi(2);
                }
            }
        }
        assert!((num / den).sqrt() < 0.05, "{}", (num / den).sqrt());
    }

    #[test]
    fn morph_is_linear() {
        let t = Arc::new(build_template_anatomy(15.0, 75.0, 2).unwrap());
        let s = Arc::new(derive_subject_anatomy(&t, 5, 0.15).unwrap());
        let f = DMatrix::from_fn(3 * s.n_voxels(), 2, |r, c| ((r * 3 + c) % 7) as f64);
        let g = DMatrix::from_fn(3 * s.n_voxels(), 2, |r, c| ((r + 5 * c) % 11) as f64 - 4.0);
        let m = |d: DMatrix<f64>| morph_estimate(&est(&s, d), &s, &t).unwrap().estimate.data;
        let lhs = m(&f * 2.0 - &g * 0.5);
        let rhs = m(f) * 2.0 - m(g) * 0.5;
        assert!((lhs - rhs).abs().max() < 1e-9);
    }

    #[test]
    fn outside_flags_are_zero() {
        let t = Arc::new(build_template_anatomy(15.0, 75.0, 2).unwrap());
        let s = Arc::new(subject_from_affine(&t, Affine::translation([-30.0, 0.0, 0.0])).unwrap());
        let f = DMatrix::from_element(3 * s.n_voxels(), 1, 1.0);
        let m = morph_estimate(&est(&s, f), &s, &t).unwrap();
        assert!(!m.outside.is_empty());
        for &v in &m.outside {
            assert!((0..3).all(|k| m.estimate.data[(3 * v + k, 0)] == 0.0));
        }
    }

    #[test]
    fn rotation_preserves_magnitude() {
        let t = Arc::new(build_template_anatomy(15.0, 75.0, 2).unwrap());
        let s = Arc::new(derive_subject_anatomy(&t, 3, 0.0).unwrap());
        let rot = Affine::from_parts(
            nalgebra::Rotation3::from_euler_angles(0.0, 0.0, 0.1).into_inner(),
            Vector3::zeros(),
        );
        let s2 = Arc::new(subject_from_affine(&s, rot).unwrap());
        let f = DMatrix::from_element(3 * s2.n_voxels(), 1, 1.0);
        let m = morph_estimate(&est(&s2, f), &s2, &t).unwrap();
        for v in 0..t.n_voxels() {
            if m.outside.contains(&v) {
                continue;
            }
            let n: f64 = (0..3)
                .map(|k| m.estimate.data[(3 * v + k, 0)].powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(n <= 3f64.sqrt() + 1e-9);
        }
    }

    #[test]
    fn eval_routing() {
        assert_eq!(
            morph_direction_for_eval(EvalKind::InDomain, None).unwrap(),
            MorphTarget::Identity
        );
        assert_eq!(
            morph_direction_for_eval(EvalKind::ToTemplate, Some("b0")).unwrap(),
            MorphTarget::Template
        );
        assert_eq!(
            morph_direction_for_eval(EvalKind::ToSubject, Some("b1")).unwrap(),
            MorphTarget::Subject("b1".into())
        );
        assert!("sideways".parse::<EvalKind>().is_err());
    }
}
