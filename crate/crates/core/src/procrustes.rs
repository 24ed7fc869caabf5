//! Closed-form least-squares rigid alignment of corresponded point sets.

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

/// Collinearity threshold: second singular value relative to the largest.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Fits `(R, t)` minimizing the mean squared residual `‖R xᵢ + t − yᵢ‖²`.
///
/// Centroids and the cross-covariance `H = Σ (xᵢ − x̄)(yᵢ − ȳ)ᵀ` give
/// `H = U S Vᵀ`, then `R = V diag(1, 1, det(Vᵀ U)) Uᵀ` and `t = ȳ − R x̄`.
/// The sign correction keeps `det(R) = +1` even for mirrored inputs.
pub fn fit_rigid(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            available: source.len(),
        });
    }
    let n = source.len() as f64;
    let x_mean = source.iter().sum::<Vec3>() / n;
    let y_mean = target.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        h += (x - x_mean) * (y - y_mean).transpose();
    }

    let svd = SVD::new(h, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD did not converge".into())),
    };
    let mut s = svd.singular_values.as_slice().to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] < RANK_TOLERANCE * s[0] {
        return Err(Error::Degenerate(
            "corresponded points are coincident or collinear".into(),
        ));
    }

    let v = v_t.transpose();
    let d = (v_t * u).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    // nalgebra orders singular values descending, so the last column is the smallest
    let rotation = v * correction * u.transpose();
    let translation = y_mean - rotation * x_mean;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Mean squared residual `(1/N) Σ ‖R xᵢ + t − yᵢ‖²`.
pub fn residual_error(source: &[Vec3], target: &[Vec3], transform: &RigidTransform) -> f64 {
    assert_eq!(source.len(), target.len(), "corresponded sets differ in length");
    if source.is_empty() {
        return 0.0;
    }
    let sum: f64 = source
        .iter()
        .zip(target)
        .map(|(x, y)| (transform.apply(x) - y).norm_squared())
        .sum();
    sum / source.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    #[test]
    fn identical_sets_give_identity() {
        let x = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        let t = fit_rigid(&x, &x).unwrap();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_exact_transform() {
        let x = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.5),
            Vec3::new(-1.0, 2.0, 1.0),
            Vec3::new(0.3, -0.7, 2.0),
        ];
        let gt = RigidTransform {
            rotation: RigidTransform::rotation_z(FRAC_PI_2).rotation,
            translation: Vec3::new(1.0, 2.0, 3.0),
        };
        let y: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
        let t = fit_rigid(&x, &y).unwrap();
        assert!((t.rotation - gt.rotation).abs().max() < 1e-9);
        assert!((t.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn mirrored_input_still_yields_proper_rotation() {
        // target is a reflection of the source: the unconstrained optimum has det = -1
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec3> = (0..20).map(|_| rand_vec(&mut rng, 5.0)).collect();
        let y: Vec<Vec3> = x.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let t = fit_rigid(&x, &y).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn near_planar_input_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0))
            .collect();
        let gt = RigidTransform::from_axis_angle(Vec3::new(0.3, 1.0, 0.2), 1.1, Vec3::new(0.5, 0.0, -2.0));
        let y: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
        let t = fit_rigid(&x, &y).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((t.rotation - gt.rotation).abs().max() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let two = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        assert!(matches!(fit_rigid(&two, &two), Err(Error::InsufficientPoints { .. })));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_rigid(&line, &line), Err(Error::Degenerate(_))));
        let same = vec![Vec3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(fit_rigid(&same, &same), Err(Error::Degenerate(_))));
        assert!(fit_rigid(&line, &line[..4]).is_err());
    }

    #[test]
    fn residual_values() {
        let t = RigidTransform::identity();
        assert_eq!(residual_error(&[Vec3::zeros()], &[Vec3::new(2.0, 0.0, 0.0)], &t), 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<Vec3> = (0..25).map(|_| rand_vec(&mut rng, 3.0)).collect();
        let y: Vec<Vec3> = (0..25).map(|_| rand_vec(&mut rng, 3.0)).collect();
        let tr = RigidTransform::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.4, Vec3::new(0.1, 0.2, 0.3));
        let mut oracle = 0.0;
        for i in 0..25 {
            let p = tr.rotation * x[i] + tr.translation;
            for d in 0..3 {
                oracle += (p[d] - y[i][d]).powi(2);
            }
        }
        oracle /= 25.0;
        assert!((residual_error(&x, &y, &tr) - oracle).abs() < 1e-12);
    }
}
