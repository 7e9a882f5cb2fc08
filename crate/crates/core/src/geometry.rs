//! Point clouds, rigid transforms, ground-truth overlap labels and the
//! registration metrics built on them.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::spatial::SpatialIndex;

pub type Vec3 = Vector3<f64>;

/// Tolerance on `RᵀR − I` and `det R − 1` when validating rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default overlap radius for unit-scale scenes.
pub const DEFAULT_OVERLAP_RADIUS: f64 = 0.0375;

/// Default RMSE threshold for a registration to count as successful.
pub const DEFAULT_RECALL_RMSE: f64 = 0.2;

/// An ordered set of 3D points. Point ids are the positions `0..n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFiniteCoordinate(i));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Result<Self> {
        Self::new(xyz.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, id: usize) -> &Vec3 {
        &self.points[id]
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.points.len()
    }

    /// New cloud made of the given ids, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(ids.len());
        for &id in ids {
            let p = self
                .points
                .get(id)
                .ok_or_else(|| Error::invalid(format!("id {id} out of range ({})", self.len())))?;
            points.push(*p);
        }
        Ok(Self { points })
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.len() as f64)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }
}

/// A proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation not orthonormal (max |RᵀR−I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!("det R = {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12)
            .ok_or_else(|| Error::InvalidTransform("zero rotation axis".into()))?;
        let rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self::new(rotation, translation)
    }

    /// Rotation drawn uniformly from SO(3) (unit quaternion from four
    /// Gaussians), translation uniform in `[-max_translation, max_translation]³`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        let t = Vec3::from_fn(|_, _| rng.random_range(-max_translation..=max_translation));
        Self {
            rotation: quat.to_rotation_matrix().into_inner(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Homogeneous 4×4 matrix in row-major order.
    #[rustfmt::skip]
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidTransform(
                "last row of homogeneous matrix must be 0 0 0 1".into(),
            ));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_error(&self, other: &RigidTransform) -> f64 {
        // ‖R₁ − R₂‖_F = 2√2·sin(θ/2); stable for small angles unlike acos
        let chord = (self.rotation - other.rotation).norm();
        2.0 * (chord / (2.0 * std::f64::consts::SQRT_2)).clamp(0.0, 1.0).asin()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
    }
}

/// Per-point membership of the overlap region.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapLabels {
    pub labels: Vec<bool>,
    pub radius: f64,
}

impl OverlapLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.positive_count() as f64 / self.labels.len() as f64
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }
}

fn label_against(points: &PointCloud, t: &RigidTransform, index: &SpatialIndex, radius: f64) -> Vec<bool> {
    points
        .points()
        .iter()
        .map(|p| {
            let q = t.apply(p);
            index.nearest(&q).map(|n| n.distance <= radius).unwrap_or(false)
        })
        .collect()
}

/// Labels every point of `src` (resp. `tgt`) whose nearest cross-cloud
/// neighbor after ground-truth alignment lies within `radius`.
///
/// `t_true` maps `src` coordinates into the `tgt` frame.
pub fn ground_truth_overlap(
    src: &PointCloud,
    tgt: &PointCloud,
    t_true: &RigidTransform,
    radius: f64,
) -> Result<(OverlapLabels, OverlapLabels)> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("overlap radius must be > 0, got {radius}")));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tgt_index = SpatialIndex::build(tgt);
    let src_index = SpatialIndex::build(src);
    let src_labels = label_against(src, t_true, &tgt_index, radius);
    let tgt_labels = label_against(tgt, &t_true.inverse(), &src_index, radius);
    Ok((
        OverlapLabels {
            labels: src_labels,
            radius,
        },
        OverlapLabels {
            labels: tgt_labels,
            radius,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src: Vec3,
    pub tgt: Vec3,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(src: Vec3, tgt: Vec3) -> Self {
        Self {
            src,
            tgt,
            weight: 1.0,
        }
    }
}

/// Weighted least-squares rigid transform mapping `src` onto `tgt`.
pub fn kabsch_align(correspondences: &[Correspondence]) -> Result<RigidTransform> {
    if correspondences.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 correspondences, got {}",
            correspondences.len()
        )));
    }
    if correspondences.iter().any(|c| !(c.weight >= 0.0 && c.weight.is_finite())) {
        return Err(Error::invalid("correspondence weights must be finite and ≥ 0"));
    }
    let total: f64 = correspondences.iter().map(|c| c.weight).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("total correspondence weight must be positive"));
    }

    let src_mean = correspondences
        .iter()
        .fold(Vec3::zeros(), |acc, c| acc + c.src * c.weight)
        / total;
    let tgt_mean = correspondences
        .iter()
        .fold(Vec3::zeros(), |acc, c| acc + c.tgt * c.weight)
        / total;

    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for c in correspondences {
        let a = c.src - src_mean;
        let b = c.tgt - tgt_mean;
        cross += c.weight * a * b.transpose();
        spread += c.weight * a * a.transpose();
    }

    // Rank of the weighted source scatter: collinear or coincident inputs
    // leave the rotation about their common axis undetermined.
    let mut spread_sv: Vec<f64> = spread.singular_values().iter().copied().collect();
    spread_sv.sort_by(|a, b| b.total_cmp(a));
    if spread_sv[0] <= f64::MIN_POSITIVE || spread_sv[1] <= 1e-12 * spread_sv[0] {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear or coincident".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = tgt_mean - rotation * src_mean;
    RigidTransform::new(rotation, translation)
}

/// RMSE of `|estimated·p − truth·p|` over `eval_points`.
pub fn registration_rmse(
    estimated: &RigidTransform,
    truth: &RigidTransform,
    eval_points: &PointCloud,
) -> Result<f64> {
    if eval_points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sq: f64 = eval_points
        .points()
        .iter()
        .map(|p| (estimated.apply(p) - truth.apply(p)).norm_squared())
        .sum();
    Ok((sq / eval_points.len() as f64).sqrt())
}

pub fn registration_success(
    estimated: &RigidTransform,
    truth: &RigidTransform,
    eval_points: &PointCloud,
    rmse_threshold: f64,
) -> Result<bool> {
    Ok(registration_rmse(estimated, truth, eval_points)? < rmse_threshold)
}
