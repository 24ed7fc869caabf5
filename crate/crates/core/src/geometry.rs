//! Point clouds, rigid transforms and registration metrics.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::GridIndex;

pub type Vec3 = Vector3<f64>;

/// Success thresholds for a registration: translation below 0.6 m and rotation below 5 degrees.
pub const SUCCESS_TRANSLATION_M: f64 = 0.6;
pub const SUCCESS_ROTATION_DEG: f64 = 5.0;

/// Orthogonality / determinant tolerance accepted by [`RigidTransform::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Raw 3D points with optional per-point intensity in `[0, 1]`.
///
/// Intensity is passed through unchanged to the encoder; callers are expected
/// to supply values already scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub coords: Vec<Vec3>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Vec3>) -> Self {
        Self {
            coords,
            intensity: None,
        }
    }

    pub fn with_intensity(coords: Vec<Vec3>, intensity: Vec<f64>) -> Result<Self> {
        let cloud = Self {
            coords,
            intensity: Some(intensity),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Checks the per-point intensity count and that every coordinate is finite.
    pub fn validate(&self) -> Result<()> {
        if let Some(intensity) = &self.intensity {
            if intensity.len() != self.coords.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} intensities for {} points",
                    intensity.len(),
                    self.coords.len()
                )));
            }
        }
        if let Some(i) = self.coords.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    /// Per-point scalar input feature: the intensity, or 1.0 when absent.
    pub fn point_features(&self) -> Vec<f64> {
        match &self.intensity {
            Some(v) => v.clone(),
            None => vec![1.0; self.coords.len()],
        }
    }
}

/// Rotation in SO(3) followed by a translation in meters: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::InvalidArgument(
                "rotation is not a proper orthonormal matrix".into(),
            ));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the z (vertical) axis by `angle` radians.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vec3::zeros(),
        }
    }

    /// Rotation of `angle` radians about a (not necessarily normalized) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        if !r.iter().all(|c| c.is_finite()) {
            return false;
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major 4×4 homogeneous matrix.
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

    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::ShapeMismatch(format!(
                "homogeneous transform needs 16 values, got {}",
                m.len()
            )));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }

    /// Geodesic rotation angle of this transform in degrees.
    pub fn angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Maps every point through `transform`; intensity is carried over unchanged.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud {
        coords: cloud.coords.iter().map(|p| transform.apply(p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// Norm of the translation difference, in meters.
pub fn translation_error(estimate: &RigidTransform, ground_truth: &RigidTransform) -> f64 {
    (estimate.translation - ground_truth.translation).norm()
}

/// Geodesic angle between the two rotations, in degrees.
pub fn rotation_error(estimate: &RigidTransform, ground_truth: &RigidTransform) -> f64 {
    let trace = (estimate.rotation.transpose() * ground_truth.rotation).trace();
    // trace drift can push the cosine just outside [-1, 1]
    let c = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    pub translation_error: f64,
    pub rotation_error: f64,
    pub success: bool,
}

impl RegistrationMetrics {
    pub fn evaluate(estimate: &RigidTransform, ground_truth: &RigidTransform) -> Self {
        let te = translation_error(estimate, ground_truth);
        let re = rotation_error(estimate, ground_truth);
        Self {
            translation_error: te,
            rotation_error: re,
            success: te < SUCCESS_TRANSLATION_M && re < SUCCESS_ROTATION_DEG,
        }
    }
}

/// Replaces all points inside each occupied voxel by their centroid.
///
/// Output order is ascending lexicographic voxel index.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let inv = 1.0 / voxel_size;
    let mut voxels: BTreeMap<[i64; 3], (Vec3, f64, usize)> = BTreeMap::new();
    for (i, p) in cloud.coords.iter().enumerate() {
        let key = [
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        ];
        let w = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        let entry = voxels.entry(key).or_insert((Vec3::zeros(), 0.0, 0));
        entry.0 += p;
        entry.1 += w;
        entry.2 += 1;
    }
    let mut coords = Vec::with_capacity(voxels.len());
    let mut intensity = cloud.intensity.as_ref().map(|_| Vec::with_capacity(voxels.len()));
    for (sum, wsum, count) in voxels.into_values() {
        let n = count as f64;
        coords.push(sum / n);
        if let Some(v) = intensity.as_mut() {
            v.push(wsum / n);
        }
    }
    Ok(PointCloud { coords, intensity })
}

/// Fraction of source points that, after applying `gt`, have a target point closer than `gamma`.
pub fn overlap_ratio(
    source: &PointCloud,
    target: &PointCloud,
    gt: &RigidTransform,
    gamma: f64,
) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("overlap ratio of an empty source cloud".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if target.is_empty() {
        return Ok(0.0);
    }
    let grid = GridIndex::new(&target.coords, gamma);
    let hits = source
        .coords
        .iter()
        .filter(|p| grid.any_within(&gt.apply(p), gamma))
        .count();
    Ok(hits as f64 / source.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        RigidTransform::from_axis_angle(axis, rng.random_range(0.0..3.1), t)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
                .collect(),
        )
    }

    #[test]
    fn voxel_merges_points_into_centroid() {
        let cloud = PointCloud::with_intensity(
            vec![Vec3::new(0.01, 0.02, 0.0), Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.0, 0.05)],
            vec![0.0, 0.3, 0.6],
        )
        .unwrap();
        let out = voxel_downsample(&cloud, 0.3).unwrap();
        assert_eq!(out.len(), 1);
        let c = Vec3::new(0.31 / 3.0, 0.12 / 3.0, 0.15 / 3.0);
        assert!((out.coords[0] - c).norm() < 1e-12);
        assert!((out.intensity.unwrap()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn voxel_keeps_distinct_voxels() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::zeros()]);
        let out = voxel_downsample(&cloud, 0.3).unwrap();
        // ascending voxel order puts the origin first
        assert_eq!(out.coords, vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
    }

    #[test]
    fn voxel_large_cell_collapses_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 10_000, 1.0);
        // every point of the unit box falls in voxel (0, 0, 0) of a 10 m grid
        assert!(cloud.coords.iter().all(|p| p.iter().all(|c| (c / 10.0).floor() == 0.0)));
        let out = voxel_downsample(&cloud, 10.0).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn voxel_rejects_nonpositive_size_and_passes_empty() {
        assert!(voxel_downsample(&PointCloud::default(), 0.0).is_err());
        assert!(voxel_downsample(&PointCloud::default(), 0.3).unwrap().is_empty());
    }

    #[test]
    fn transform_basics() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(apply_transform(&cloud, &RigidTransform::identity()), cloud);
        let rotated = apply_transform(&cloud, &RigidTransform::rotation_z(FRAC_PI_2));
        assert!((rotated.coords[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn transform_roundtrip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_transform(&mut rng);
        let cloud = random_cloud(&mut rng, 100, 20.0);
        let back = apply_transform(&apply_transform(&cloud, &t), &t.inverse());
        for (a, b) in cloud.coords.iter().zip(&back.coords) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        assert_eq!(t.compose(&RigidTransform::identity()), t);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation.norm() < 1e-9);

        let q = RigidTransform::rotation_z(std::f64::consts::FRAC_PI_4);
        let composed = q.compose(&q);
        // matrix-product oracle: [[0,-1,0],[1,0,0],[0,0,1]]
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((composed.rotation - expected).abs().max() < 1e-12);
        // compose applies the right operand first
        let a = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::rotation_z(FRAC_PI_2);
        let p = a.compose(&b).apply(&Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn new_rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
        assert!(RigidTransform::new(m * 1.01, Vec3::zeros()).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transform(&mut rng);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn error_metrics() {
        let id = RigidTransform::identity();
        assert_eq!(translation_error(&id, &id), 0.0);
        assert_eq!(rotation_error(&id, &id), 0.0);
        let t = RigidTransform::from_translation(Vec3::new(3.0, 4.0, 0.0));
        assert_eq!(translation_error(&t, &id), 5.0);
        let r = RigidTransform::rotation_z(FRAC_PI_2);
        assert!((rotation_error(&id, &r) - 90.0).abs() < 1e-12);
        let m = RegistrationMetrics::evaluate(&RigidTransform::from_translation(Vec3::new(0.59, 0.0, 0.0)), &id);
        assert!(m.success);
        let m = RegistrationMetrics::evaluate(&RigidTransform::rotation_z(5.001f64.to_radians()), &id);
        assert!(!m.success);
    }

    #[test]
    fn rotation_error_matches_quaternion_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let qa = nalgebra::UnitQuaternion::from_matrix(&a.rotation);
            let qb = nalgebra::UnitQuaternion::from_matrix(&b.rotation);
            let oracle = qa.angle_to(&qb).to_degrees();
            assert!((rotation_error(&a, &b) - oracle).abs() < 1e-6);
            let te = ((a.translation.x - b.translation.x).powi(2)
                + (a.translation.y - b.translation.y).powi(2)
                + (a.translation.z - b.translation.z).powi(2))
            .sqrt();
            assert!((translation_error(&a, &b) - te).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let source = random_cloud(&mut rng, 200, 10.0);
        let gt = random_transform(&mut rng);
        let target = apply_transform(&source, &gt);
        assert_eq!(overlap_ratio(&source, &target, &gt, 0.3).unwrap(), 1.0);

        let far = apply_transform(&target, &RigidTransform::from_translation(Vec3::new(100.0, 0.0, 0.0)));
        assert_eq!(overlap_ratio(&source, &far, &gt, 0.3).unwrap(), 0.0);

        // keep the first half aligned, push the second half far away in the target
        let mut split = target.clone();
        for p in split.coords.iter_mut().skip(100) {
            *p += Vec3::new(500.0, 0.0, 0.0);
        }
        let ratio = overlap_ratio(&source, &split, &gt, 0.3).unwrap();
        assert!((ratio - 0.5).abs() <= 1.0 / 200.0);

        assert!(overlap_ratio(&PointCloud::default(), &target, &gt, 0.3).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::with_intensity(vec![Vec3::zeros()], vec![]).is_err());
        let bad = PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]);
        assert!(bad.validate().is_err());
    }
}
