//! End-to-end registration of one cloud pair.

use std::time::Instant;

use crate::attention::attend;
use crate::encoder::encode;
use crate::error::{Error, Result, Stage};
use crate::geometry::{voxel_downsample, PointCloud, RigidTransform};
use crate::icp::{icp_refine, IcpConfig, IcpStatus};
use crate::matcher::{extract_correspondences, match_probability_map, CorrespondenceSet};
use crate::model::Model;
use crate::ransac::{ransac_register, RansacConfig, RegistrationResult};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.3;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub voxel_size: f64,
    pub temperature: f64,
    pub ransac: RansacConfig,
    /// ICP refinement after RANSAC; `None` disables it.
    pub icp: Option<IcpConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size: DEFAULT_VOXEL_SIZE,
            temperature: DEFAULT_TEMPERATURE,
            ransac: RansacConfig::default(),
            icp: None,
        }
    }
}

/// Wall-clock milliseconds per stage, indexed like [`Stage::ALL`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings(pub [f64; 6]);

impl StageTimings {
    pub fn get(&self, stage: Stage) -> f64 {
        self.0[stage as usize]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    /// Final transform (after ICP when enabled) with RANSAC bookkeeping.
    pub result: RegistrationResult,
    pub ransac_transform: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub icp_status: Option<IcpStatus>,
    pub timings: StageTimings,
}

fn timed<T>(timings: &mut StageTimings, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.at(stage));
    timings.0[stage as usize] = start.elapsed().as_secs_f64() * 1e3;
    out
}

/// Estimates the transform mapping `source` into `target`'s frame.
pub fn register_pair(source: &PointCloud, target: &PointCloud, model: &Model, cfg: &PipelineConfig) -> Result<Registration> {
    let mut timings = StageTimings::default();
    let (src, tgt) = timed(&mut timings, Stage::Downsample, || {
        for (side, c) in [("source", source), ("target", target)] {
            c.validate().map_err(|e| Error::InvalidArgument(format!("{side}: {e}")))?;
        }
        Ok((voxel_downsample(source, cfg.voxel_size)?, voxel_downsample(target, cfg.voxel_size)?))
    })?;
    let (kx, ky) = timed(&mut timings, Stage::Encode, || {
        let (a, b) = rayon::join(|| encode(&src, &model.encoder), || encode(&tgt, &model.encoder));
        let side = |s: &str, e: Error| Error::InvalidArgument(format!("{s} cloud: {e}"));
        Ok((a.map_err(|e| side("source", e))?, b.map_err(|e| side("target", e))?))
    })?;
    let (fx, fy) = timed(&mut timings, Stage::Attention, || attend(&kx, &ky, &model.attention))?;
    let correspondences = timed(&mut timings, Stage::Match, || {
        let phi = match_probability_map(fx.features.view(), fy.features.view(), cfg.temperature)?;
        extract_correspondences(phi.view(), &kx.coords, &ky.coords)
    })?;
    let ransac = timed(&mut timings, Stage::Ransac, || {
        ransac_register(&correspondences.source, &correspondences.target, &cfg.ransac)
    })?;
    let ransac_transform = ransac.transform;
    let mut result = ransac;
    let mut icp_status = None;
    if let Some(icp_cfg) = &cfg.icp {
        let refined = timed(&mut timings, Stage::Icp, || icp_refine(&src, &tgt, &ransac_transform, icp_cfg))?;
        icp_status = Some(refined.status);
        result.transform = refined.transform;
    }
    Ok(Registration {
        result,
        ransac_transform,
        correspondences,
        icp_status,
        timings,
    })
}
