//! Sample-consensus rigid fitting over putative correspondences.
//!
//! Minimal sets of three correspondences are drawn with a ChaCha8 stream
//! (`rand_chacha`, seeded from a `u64`), so a seed reproduces the same run on
//! any platform. Samples are drawn sequentially in batches and scored in
//! parallel; results are consumed in draw order, so the outcome does not
//! depend on the thread count.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::procrustes::fit_rigid;

pub const SAMPLE_SIZE: usize = 3;

const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold κ in meters.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.5,
            confidence: 0.999,
            max_iterations: 100_000,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inliers: Vec<usize>,
    /// Minimal sets drawn, including rejected degenerate ones.
    pub iterations: usize,
    pub elapsed_secs: f64,
}

impl RegistrationResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
}

/// Indices `i` with `‖R xᵢ + t − yᵢ‖ ≤ κ`.
pub fn count_inliers(source: &[Vec3], target: &[Vec3], transform: &RigidTransform, kappa: f64) -> Vec<usize> {
    let k2 = kappa * kappa;
    source
        .iter()
        .zip(target)
        .enumerate()
        .filter(|(_, (x, y))| (transform.apply(x) - *y).norm_squared() <= k2)
        .map(|(i, _)| i)
        .collect()
}

/// Draws needed so that, with probability `confidence`, at least one minimal
/// set of `sample_size` is outlier-free: `⌈ln(1 − p) / ln(1 − wˢ)⌉`, clamped
/// to `[1, max_iterations]`.
pub fn adaptive_iterations(inlier_ratio: f64, confidence: f64, sample_size: usize, max_iterations: usize) -> usize {
    let max_iterations = max_iterations.max(1);
    if !(inlier_ratio > 0.0) {
        return max_iterations;
    }
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let all_inliers = inlier_ratio.powi(sample_size as i32);
    let denom = (-all_inliers).ln_1p();
    if denom == 0.0 {
        return max_iterations;
    }
    let n = ((1.0 - confidence).ln() / denom).ceil();
    if n >= max_iterations as f64 {
        max_iterations
    } else {
        (n as usize).max(1)
    }
}

fn draw_sample(rng: &mut ChaCha8Rng, n: usize) -> [usize; 3] {
    // three distinct indices, uniformly: shift later draws past earlier picks
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut c = rng.random_range(0..n - 2);
    if c >= lo {
        c += 1;
    }
    if c >= hi {
        c += 1;
    }
    [a, b, c]
}

fn hypothesis(source: &[Vec3], target: &[Vec3], s: [usize; 3]) -> Option<RigidTransform> {
    let t = [target[s[0]], target[s[1]], target[s[2]]];
    if t[0] == t[1] || t[0] == t[2] || t[1] == t[2] {
        return None;
    }
    fit_rigid(&[source[s[0]], source[s[1]], source[s[2]]], &t).ok()
}

/// Best-consensus rigid transform, refit on its full inlier set.
pub fn ransac_register(source: &[Vec3], target: &[Vec3], cfg: &RansacConfig) -> Result<RegistrationResult> {
    let start = Instant::now();
    cfg.validate()?;
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source vs {} target correspondences",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < SAMPLE_SIZE {
        return Err(Error::InsufficientPoints {
            needed: SAMPLE_SIZE,
            available: n,
        });
    }
    let kappa = cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    let mut bound = cfg.max_iterations;
    let (mut drawn, mut valid) = (0usize, 0usize);

    'outer: while drawn < cfg.max_iterations && valid < bound {
        let batch = BATCH.min(cfg.max_iterations - drawn);
        let samples: Vec<[usize; 3]> = (0..batch).map(|_| draw_sample(&mut rng, n)).collect();
        let scored: Vec<Option<(RigidTransform, Vec<usize>)>> = samples
            .into_par_iter()
            .map(|s| {
                hypothesis(source, target, s).map(|t| {
                    let inl = count_inliers(source, target, &t, kappa);
                    (t, inl)
                })
            })
            .collect();
        for result in scored {
            drawn += 1;
            if let Some((t, inl)) = result {
                valid += 1;
                if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
                    bound = adaptive_iterations(inl.len() as f64 / n as f64, cfg.confidence, SAMPLE_SIZE, cfg.max_iterations);
                    best = Some((t, inl));
                }
            }
            if drawn >= cfg.max_iterations || valid >= bound {
                break 'outer;
            }
        }
    }

    let (mut transform, mut inliers) = match best {
        Some((t, inl)) if inl.len() >= SAMPLE_SIZE => (t, inl),
        Some((_, inl)) => {
            return Err(Error::RegistrationFailed(format!(
                "best hypothesis has {} inliers after {drawn} samples",
                inl.len()
            )))
        }
        None => {
            return Err(Error::RegistrationFailed(format!(
                "all {drawn} minimal samples were degenerate"
            )))
        }
    };
    let xs: Vec<Vec3> = inliers.iter().map(|&i| source[i]).collect();
    let ys: Vec<Vec3> = inliers.iter().map(|&i| target[i]).collect();
    if let Ok(refit) = fit_rigid(&xs, &ys) {
        let refit_inliers = count_inliers(source, target, &refit, kappa);
        if refit_inliers.len() >= inliers.len() {
            transform = refit;
            inliers = refit_inliers;
        }
    }
    Ok(RegistrationResult {
        transform,
        inliers,
        iterations: drawn,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
