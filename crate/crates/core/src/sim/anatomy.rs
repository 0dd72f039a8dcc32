//! Synthetic anatomies on a regular cubic lattice.
//!
//! The lattice is centred on the head-sphere origin with a half-voxel offset,
//! so no voxel centre ever sits on a coordinate axis or at the origin.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, Vector4};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid_config, invalid_input, Result};
use crate::seed;

/// Brain ellipsoid semi-axes as fractions of the head radius.
const BRAIN_AXES: [f64; 3] = [0.96, 1.0, 0.92];
const BRAIN_SCALE: f64 = 0.985;
/// Voxels must stay this far inside the conductor sphere (mm).
const SURFACE_MARGIN_MM: f64 = 1.0;
const MIN_INSIDE_VOXELS: usize = 50;
pub const DEFAULT_REGIONS: usize = 12;
pub const DEFAULT_UNASSIGNED_FRACTION: f64 = 1.0 / 3.0;

/// Bounding lattice shared by every anatomy with the same voxel size and head radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl Lattice {
    pub fn covering(head_radius_mm: f64, spacing: f64) -> Self {
        let n = 2 * (head_radius_mm / spacing).ceil() as usize;
        Self {
            spacing,
            dims: [n, n, n],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index with x slowest, z fastest.
    pub fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn unflat(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn cell_center(&self, c: [usize; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (c[a] as f64 + 0.5 - self.dims[a] as f64 / 2.0) * self.spacing;
        }
        p
    }

    /// Continuous lattice coordinate of a point (cell centres sit on integers).
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = p[a] / self.spacing + self.dims[a] as f64 / 2.0 - 0.5;
        }
        q
    }
}

/// Affine map between the template frame and a subject frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub Matrix4<f64>);

impl Affine {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_parts(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::from(t))
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.linear().determinant();
        if det.abs() < 1e-12 {
            return Err(invalid_input("affine is not invertible"));
        }
        self.0
            .try_inverse()
            .map(Self)
            .ok_or_else(|| invalid_input("affine is not invertible"))
    }

    pub fn compose(&self, other: &Affine) -> Self {
        Self(self.0 * other.0)
    }

    /// Rotation factor of the polar decomposition of the linear part.
    pub fn rotation(&self) -> Matrix3<f64> {
        let svd = self.linear().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            // reflections are not produced by the generator; keep a proper rotation anyway
            let mut u2 = u;
            let mut col = u2.column_mut(2);
            col *= -1.0;
            r = u2 * vt;
        }
        r
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Matrix4::identity()
    }
}

#[derive(Debug, Clone)]
pub struct Anatomy {
    pub voxel_size_mm: f64,
    pub head_radius_mm: f64,
    pub lattice: Lattice,
    /// Per lattice cell.
    pub inside_mask: Vec<bool>,
    /// Lattice cell of each voxel, in voxel order.
    pub voxel_cells: Vec<[usize; 3]>,
    pub centers: Vec<[f64; 3]>,
    /// Region id per voxel; 0 = unassigned.
    pub atlas: Vec<u32>,
    /// Maps template coordinates to this subject's coordinates.
    pub subject_affine: Affine,
    cell_to_voxel: Vec<Option<usize>>,
}

impl PartialEq for Anatomy {
    fn eq(&self, o: &Self) -> bool {
        self.voxel_size_mm == o.voxel_size_mm
            && self.head_radius_mm == o.head_radius_mm
            && self.lattice == o.lattice
            && self.inside_mask == o.inside_mask
            && self.centers == o.centers
            && self.atlas == o.atlas
            && self.subject_affine == o.subject_affine
    }
}

impl Anatomy {
    /// Builds an anatomy from an explicit inside mask. Atlas labels default to 0.
    pub fn from_mask(
        voxel_size_mm: f64,
        head_radius_mm: f64,
        lattice: Lattice,
        inside_mask: Vec<bool>,
        subject_affine: Affine,
    ) -> Result<Self> {
        if inside_mask.len() != lattice.n_cells() {
            return Err(invalid_input("inside mask does not match lattice"));
        }
        let mut cell_to_voxel = vec![None; lattice.n_cells()];
        let mut voxel_cells = Vec::new();
        let mut centers = Vec::new();
        for (i, &inside) in inside_mask.iter().enumerate() {
            if inside {
                let c = lattice.unflat(i);
                cell_to_voxel[i] = Some(voxel_cells.len());
                voxel_cells.push(c);
                centers.push(lattice.cell_center(c));
            }
        }
        let atlas = vec![0; centers.len()];
        Ok(Self {
            voxel_size_mm,
            head_radius_mm,
            lattice,
            inside_mask,
            voxel_cells,
            centers,
            atlas,
            subject_affine,
            cell_to_voxel,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.centers.len()
    }

    pub fn voxel_at(&self, c: [usize; 3]) -> Option<usize> {
        self.cell_to_voxel[self.lattice.flat(c)]
    }

    /// Voxel at a signed lattice coordinate, if inside the lattice and the brain.
    pub fn voxel_at_signed(&self, c: [i64; 3]) -> Option<usize> {
        let d = self.lattice.dims;
        if (0..3).any(|a| c[a] < 0 || c[a] >= d[a] as i64) {
            return None;
        }
        self.voxel_at([c[0] as usize, c[1] as usize, c[2] as usize])
    }

    pub fn region_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.atlas.iter().copied().filter(|&r| r != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn region_voxels(&self, region: u32) -> Vec<usize> {
        (0..self.n_voxels())
            .filter(|&v| self.atlas[v] == region)
            .collect()
    }

    pub fn region_centroid(&self, region: u32) -> Option<[f64; 3]> {
        let vs = self.region_voxels(region);
        if vs.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for &v in &vs {
            for a in 0..3 {
                c[a] += self.centers[v][a];
            }
        }
        Some(c.map(|x| x / vs.len() as f64))
    }
}

fn in_template_brain(p: [f64; 3], head_radius: f64) -> bool {
    let s: f64 = (0..3)
        .map(|a| {
            let r = BRAIN_AXES[a] * BRAIN_SCALE * head_radius;
            (p[a] / r).powi(2)
        })
        .sum();
    s < 1.0
}

fn in_head(p: [f64; 3], head_radius: f64) -> bool {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    n < head_radius - SURFACE_MARGIN_MM
}

fn check_sizes(voxel_size_mm: f64, head_radius_mm: f64) -> Result<()> {
    if !(5.0..=30.0).contains(&voxel_size_mm) {
        return Err(invalid_config(format!(
            "voxel_size_mm must lie in [5, 30], got {voxel_size_mm}"
        )));
    }
    if head_radius_mm <= 2.0 * voxel_size_mm {
        return Err(invalid_config(format!(
            "head_radius_mm ({head_radius_mm}) must exceed twice the voxel size ({voxel_size_mm})"
        )));
    }
    Ok(())
}

/// Template anatomy: brain ellipsoid on the half-offset lattice with a k-means atlas.
pub fn build_template_anatomy(
    voxel_size_mm: f64,
    head_radius_mm: f64,
    seed: u64,
) -> Result<Anatomy> {
    build_template_with_atlas(
        voxel_size_mm,
        head_radius_mm,
        DEFAULT_REGIONS,
        DEFAULT_UNASSIGNED_FRACTION,
        seed,
    )
}

pub fn build_template_with_atlas(
    voxel_size_mm: f64,
    head_radius_mm: f64,
    n_regions: usize,
    unassigned_fraction: f64,
    seed: u64,
) -> Result<Anatomy> {
    check_sizes(voxel_size_mm, head_radius_mm)?;
    if n_regions < 8 {
        return Err(invalid_config("atlas needs at least 8 regions"));
    }
    let lattice = Lattice::covering(head_radius_mm, voxel_size_mm);
    let mask: Vec<bool> = (0..lattice.n_cells())
        .map(|i| {
            let p = lattice.cell_center(lattice.unflat(i));
            in_template_brain(p, head_radius_mm) && in_head(p, head_radius_mm)
        })
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count < MIN_INSIDE_VOXELS {
        return Err(invalid_config(format!(
            "voxel size {voxel_size_mm}mm yields only {count} inside voxels (need >= {MIN_INSIDE_VOXELS})"
        )));
    }
    let mut anat = Anatomy::from_mask(
        voxel_size_mm,
        head_radius_mm,
        lattice,
        mask,
        Affine::identity(),
    )?;
    anat.atlas = kmeans_atlas(
        &anat.centers,
        n_regions,
        unassigned_fraction,
        seed::derive(seed, &[seed::tag("atlas")]),
    );
    Ok(anat)
}

/// Region labels via seeded k-means; the outermost `unassigned_fraction` of
/// each cluster (by distance to its centroid) is left unlabelled, keeping the
/// labelled cores contiguous.
fn kmeans_atlas(centers: &[[f64; 3]], k: usize, unassigned_fraction: f64, seed: u64) -> Vec<u32> {
    let n = centers.len();
    let k = k.min(n);
    let mut rng = seed::rng(seed);
    let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();

    // k-means++ seeding
    let mut cents = vec![centers[rng.random_range(0..n)]];
    while cents.len() < k {
        let w: Vec<f64> = centers
            .iter()
            .map(|&p| {
                cents
                    .iter()
                    .map(|&c| d2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = w.iter().sum();
        let mut t = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &wi) in w.iter().enumerate() {
            if t < wi {
                pick = i;
                break;
            }
            t -= wi;
        }
        cents.push(centers[pick]);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &p) in centers.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| d2(p, cents[a]).total_cmp(&d2(p, cents[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in centers.iter().enumerate() {
            counts[assign[i]] += 1;
            for a in 0..3 {
                sums[assign[i]][a] += p[a];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                cents[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
        if !changed {
            break;
        }
    }

    // stable region numbering: order clusters by centroid (x, y, z)
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        cents[a][0]
            .total_cmp(&cents[b][0])
            .then(cents[a][1].total_cmp(&cents[b][1]))
            .then(cents[a][2].total_cmp(&cents[b][2]))
    });
    let mut label_of = vec![0u32; k];
    for (rank, &c) in order.iter().enumerate() {
        label_of[c] = rank as u32 + 1;
    }

    let mut labels: Vec<u32> = assign.iter().map(|&c| label_of[c]).collect();
    for c in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
        members.sort_by(|&a, &b| {
            d2(centers[b], cents[c])
                .total_cmp(&d2(centers[a], cents[c]))
                .then(a.cmp(&b))
        });
        let drop = (members.len() as f64 * unassigned_fraction).round() as usize;
        for &i in members.iter().take(drop) {
            labels[i] = 0;
        }
    }
    labels
}

/// Random small affine: rotation <= 10 deg, per-axis scale 1 +/- distortion,
/// translation <= voxel/2.
pub fn random_subject_affine(
    voxel_size_mm: f64,
    distortion_scale: f64,
    subject_seed: u64,
) -> Affine {
    if distortion_scale == 0.0 {
        return Affine::identity();
    }
    let mut rng = seed::rng(seed::derive(subject_seed, &[seed::tag("affine")]));
    let axis: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
    let angle = rng.random_range(-10.0f64..=10.0).to_radians();
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
    let scale = Matrix3::from_diagonal(&Vector3::from_fn(|_, _| {
        1.0 + rng.random_range(-distortion_scale..=distortion_scale)
    }));
    let dir: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
    let t = dir.normalize() * rng.random_range(0.0..=voxel_size_mm / 2.0);
    Affine::from_parts(rot * scale, t)
}

/// Subject anatomy: the template brain carried through a random affine and
/// re-voxelized on the same lattice.
pub fn derive_subject_anatomy(
    template: &Anatomy,
    subject_seed: u64,
    distortion_scale: f64,
) -> Result<Anatomy> {
    if !(0.0..=0.2).contains(&distortion_scale) {
        return Err(invalid_config(format!(
            "distortion_scale must lie in [0, 0.2], got {distortion_scale}"
        )));
    }
    let affine = random_subject_affine(template.voxel_size_mm, distortion_scale, subject_seed);
    subject_from_affine(template, affine)
}

/// Re-voxelizes the template brain under an explicit template->subject affine.
pub fn subject_from_affine(template: &Anatomy, affine: Affine) -> Result<Anatomy> {
    if affine.is_identity() {
        return Ok(template.clone());
    }
    let inv = affine.inverse()?;
    let lattice = template.lattice.clone();
    let r = template.head_radius_mm;
    let mask: Vec<bool> = (0..lattice.n_cells())
        .map(|i| {
            let p = lattice.cell_center(lattice.unflat(i));
            in_head(p, r) && template_contains(template, inv.apply(p))
        })
        .collect();
    if mask.iter().filter(|&&m| m).count() < MIN_INSIDE_VOXELS {
        return Err(invalid_config("subject anatomy has too few inside voxels"));
    }
    let mut anat = Anatomy::from_mask(template.voxel_size_mm, r, lattice, mask, affine)?;
    anat.atlas = anat
        .centers
        .iter()
        .map(|&p| {
            let q = inv.apply(p);
            nearest_voxel(template, q)
                .map(|v| template.atlas[v])
                .unwrap_or(0)
        })
        .collect();
    Ok(anat)
}

/// Whether a template-frame point falls in a template voxel's cell.
fn template_contains(template: &Anatomy, p: [f64; 3]) -> bool {
    let q = template.lattice.continuous_index(p);
    let c = q.map(|x| x.round() as i64);
    template.voxel_at_signed(c).is_some()
}

pub(crate) fn nearest_voxel(anat: &Anatomy, p: [f64; 3]) -> Option<usize> {
    anat.centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, (0..3).map(|a| (c[a] - p[a]).powi(2)).sum::<f64>()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}
