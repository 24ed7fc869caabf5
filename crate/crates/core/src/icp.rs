//! Point-to-point ICP refinement.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, Vec3};
use crate::procrustes::fit_rigid;
use crate::spatial::GridIndex;

#[derive(Debug, Clone, PartialEq)]
pub struct IcpConfig {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Stop when the relative change of the mean squared pair distance drops below this.
    pub relative_tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_correspondence_distance: 1.0,
            max_iterations: 50,
            relative_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcpStatus {
    Converged,
    MaxIterations,
    /// No target point within range of any source point; the initial guess is returned.
    NoPairs,
    /// Pairs became too few or degenerate to fit; the last estimate is returned.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Mean squared distance over the pairs of the last pairing step.
    pub residual: f64,
    pub pairs: usize,
    pub status: IcpStatus,
}

fn pair_up(src: &[Vec3], grid: &GridIndex, t: &RigidTransform, max_dist: f64) -> (Vec<Vec3>, Vec<Vec3>, f64) {
    let found: Vec<(Vec3, Vec3, f64)> = src
        .par_iter()
        .filter_map(|p| {
            grid.nearest_within(&t.apply(p), max_dist)
                .map(|(j, d)| (*p, grid.points()[j], d * d))
        })
        .collect();
    let sum: f64 = found.iter().map(|f| f.2).sum();
    let mean = if found.is_empty() { 0.0 } else { sum / found.len() as f64 };
    let (xs, ys) = found.into_iter().map(|(x, y, _)| (x, y)).unzip();
    (xs, ys, mean)
}

pub fn icp_refine(source: &PointCloud, target: &PointCloud, init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("ICP needs non-empty clouds".into()));
    }
    if !(cfg.max_correspondence_distance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max correspondence distance must be positive, got {}",
            cfg.max_correspondence_distance
        )));
    }
    let max_dist = cfg.max_correspondence_distance;
    let grid = GridIndex::new(&target.coords, max_dist);
    let mut transform = *init;
    let (mut xs, mut ys, mut residual) = pair_up(&source.coords, &grid, &transform, max_dist);
    if xs.is_empty() {
        warn!("ICP found no pairs within {max_dist} m; keeping the initial transform");
        return Ok(IcpResult {
            transform,
            iterations: 0,
            residual: 0.0,
            pairs: 0,
            status: IcpStatus::NoPairs,
        });
    }
    let mut status = IcpStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if residual == 0.0 {
            status = IcpStatus::Converged;
            break;
        }
        let Ok(next) = fit_rigid(&xs, &ys) else {
            status = IcpStatus::Degenerate;
            break;
        };
        iterations += 1;
        let (nx, ny, next_residual) = pair_up(&source.coords, &grid, &next, max_dist);
        if nx.len() < 3 {
            status = IcpStatus::Degenerate;
            break;
        }
        transform = next;
        let change = (residual - next_residual).abs() / residual;
        (xs, ys, residual) = (nx, ny, next_residual);
        if change < cfg.relative_tolerance {
            status = IcpStatus::Converged;
            break;
        }
    }
    Ok(IcpResult {
        transform,
        iterations,
        residual,
        pairs: xs.len(),
        status,
    })
}
