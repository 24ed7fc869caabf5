//! Command implementations behind the `pcreg` binary.

pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use pcreg::error::Stage;
use pcreg::io::read_cloud;
use pcreg::model::Model;
use pcreg::pipeline::register_pair;
use pcreg::scenes::{dataset_load, dataset_save, dataset_statistics, generate_dataset, ScenePair};
use pcreg::training::{train, EpochRecord};
use pcreg::{Error, RegistrationMetrics, RigidTransform};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error as ThisError;

pub use config::Settings;
use report::{write_csv, BenchRow, EvalSummaryRow, SampleRow, StatisticsRow};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const REGISTRATION: i32 = 4;
}

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {message}")]
    Report { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_input_error() => exit::INPUT,
            CliError::Core(Error::Stage { .. }) => exit::REGISTRATION,
            CliError::Core(Error::InvalidArgument(_)) => exit::INPUT,
            CliError::Core(_) => exit::FAILURE,
            CliError::Report { .. } => exit::INPUT,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Generates `count` pairs into `out`, with `statistics.csv` alongside the manifest.
pub fn cmd_generate(settings: &Settings, out: &Path, count: usize, seed: u64) -> CliResult<Vec<ScenePair>> {
    let pairs = generate_dataset(&settings.scene, count, seed)?;
    dataset_save(&pairs, out)?;
    if !pairs.is_empty() {
        let stats = dataset_statistics(&pairs)?;
        let mut rows = Vec::new();
        for (quantity, table) in [
            ("distance_m", &stats.distance),
            ("rotation_deg", &stats.rotation),
            ("overlap", &stats.overlap),
        ] {
            rows.extend(table.iter().map(|&(value, cumulative_fraction)| StatisticsRow {
                quantity: quantity.to_string(),
                value,
                cumulative_fraction,
            }));
        }
        write_csv(&out.join("statistics.csv"), &rows)?;
    }
    info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(pairs)
}

/// Splits a dataset into training and validation parts (validation from the end).
pub fn split(pairs: &[ScenePair], validation_fraction: f64) -> CliResult<(&[ScenePair], &[ScenePair])> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("training needs at least 2 pairs, dataset has {}", pairs.len())).into());
    }
    let val = ((pairs.len() as f64 * validation_fraction).round() as usize).clamp(1, pairs.len() - 1);
    Ok(pairs.split_at(pairs.len() - val))
}

/// Trains on `dataset`, writes the best weights to `weights` and the epoch log to `log`.
pub fn cmd_train(settings: &Settings, dataset: &Path, weights: &Path, log: &Path, seed: u64) -> CliResult<Vec<EpochRecord>> {
    let pairs = dataset_load(dataset)?;
    let (train_pairs, val_pairs) = split(&pairs, settings.validation_fraction)?;
    let cfg = pcreg::training::TrainConfig {
        seed,
        ..settings.train.clone()
    };
    let outcome = train(train_pairs, val_pairs, &settings.model, &cfg, |r| {
        info!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {}",
            r.epoch, r.train_loss, r.val_loss, r.learning_rate
        )
    })?;
    outcome.model.save(weights)?;
    let rows: Vec<report::EpochRow> = outcome.log.iter().map(report::EpochRow::from).collect();
    write_csv(log, &rows)?;
    info!("best validation loss at epoch {}", outcome.best_epoch);
    Ok(outcome.log)
}

/// Machine-readable outcome of `register`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegisterRecord {
    /// Row-major 4 × 4 homogeneous transform.
    pub transform: Vec<f64>,
    pub inliers: usize,
    pub ransac_iterations: usize,
    pub icp: bool,
    pub stage_ms: std::collections::BTreeMap<String, f64>,
}

pub fn format_transform(t: &RigidTransform) -> String {
    let m = t.to_row_major();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:>14.9}", m[4 * r + c])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn cmd_register(
    settings: &Settings,
    source: &Path,
    target: &Path,
    weights: &Path,
    icp: bool,
) -> CliResult<RegisterRecord> {
    let model = Model::load(weights)?;
    let source = read_cloud(source)?;
    let target = read_cloud(target)?;
    let cfg = pipeline_config(settings, icp, None);
    let reg = register_pair(&source, &target, &model, &cfg)?;
    Ok(RegisterRecord {
        transform: reg.result.transform.to_row_major().to_vec(),
        inliers: reg.result.inlier_count(),
        ransac_iterations: reg.result.iterations,
        icp,
        stage_ms: Stage::ALL
            .iter()
            .map(|&s| (s.name().to_string(), reg.timings.get(s)))
            .collect(),
    })
}

fn pipeline_config(settings: &Settings, icp: bool, seed: Option<u64>) -> pcreg::PipelineConfig {
    let mut cfg = settings.pipeline.clone();
    cfg.icp = icp.then(|| settings.icp.clone());
    if let Some(seed) = seed {
        cfg.ransac.seed = seed;
    }
    cfg
}

/// Overlap bins of the evaluation summary: samples with overlap strictly above each bound.
pub const OVERLAP_BINS: [f64; 4] = [0.6, 0.5, 0.4, 0.0];

pub fn summarize(rows: &[SampleRow]) -> Vec<EvalSummaryRow> {
    OVERLAP_BINS
        .iter()
        .map(|&lo| {
            let bin: Vec<&SampleRow> = rows.iter().filter(|r| r.overlap > lo).collect();
            let n = bin.len();
            let mean = |f: &dyn Fn(&SampleRow) -> f64| (n > 0).then(|| bin.iter().map(|r| f(r)).sum::<f64>() / n as f64);
            let time_mean = mean(&|r| r.elapsed_s * 1e3);
            let time_std = time_mean.map(|m| {
                (bin.iter().map(|r| (r.elapsed_s * 1e3 - m).powi(2)).sum::<f64>() / n as f64).sqrt()
            });
            EvalSummaryRow {
                bin: format!(">{lo}"),
                count: n,
                mte_m: mean(&|r| r.te_m),
                mre_deg: mean(&|r| r.re_deg),
                recall: mean(&|r| if r.success { 1.0 } else { 0.0 }),
                time_mean_ms: time_mean,
                time_std_ms: time_std,
            }
        })
        .collect()
}

/// Registers every pair of `dataset`; failures become unsuccessful rows.
/// Writes `samples.csv` and `summary.csv` into `out`.
pub fn cmd_eval(
    settings: &Settings,
    dataset: &Path,
    weights: &Path,
    icp: bool,
    seed: u64,
    out: &Path,
) -> CliResult<(Vec<SampleRow>, Vec<EvalSummaryRow>)> {
    let model = Model::load(weights)?;
    let pairs = dataset_load(dataset)?;
    let cfg = pipeline_config(settings, icp, Some(seed));
    let mut rows: Vec<SampleRow> = pairs
        .par_iter()
        .map(|p| {
            let start = Instant::now();
            let outcome = register_pair(&p.source, &p.target, &model, &cfg);
            let elapsed_s = start.elapsed().as_secs_f64();
            match outcome {
                Ok(reg) => {
                    let m = RegistrationMetrics::evaluate(&reg.result.transform, &p.ground_truth);
                    SampleRow {
                        scene_id: p.scene_id.clone(),
                        overlap: p.overlap,
                        te_m: m.translation_error,
                        re_deg: m.rotation_error,
                        success: m.success,
                        inliers: reg.result.inlier_count(),
                        elapsed_s,
                        error: String::new(),
                    }
                }
                Err(e) => {
                    warn!("{}: {e}", p.scene_id);
                    SampleRow {
                        scene_id: p.scene_id.clone(),
                        overlap: p.overlap,
                        te_m: f64::NAN,
                        re_deg: f64::NAN,
                        success: false,
                        inliers: 0,
                        elapsed_s,
                        error: e.to_string(),
                    }
                }
            }
        })
        .collect();
    rows.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let summary = summarize(&rows);
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_csv(&out.join("samples.csv"), &rows)?;
    write_csv(&out.join("summary.csv"), &summary)?;
    Ok((rows, summary))
}

/// Per-stage wall-clock statistics over `repetitions` passes of the dataset.
///
/// `load` is called once and is not timed; only work inside the pipeline is.
pub fn cmd_bench(
    settings: &Settings,
    load: impl FnOnce() -> CliResult<Vec<ScenePair>>,
    weights: &Path,
    repetitions: usize,
    seed: u64,
) -> CliResult<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()).into());
    }
    let model = Model::load(weights)?;
    let pairs = load()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one pair".into()).into());
    }
    let cfg = pipeline_config(settings, true, Some(seed));
    let mut samples: Vec<[f64; 7]> = Vec::new();
    for _ in 0..repetitions {
        for p in &pairs {
            let start = Instant::now();
            let reg = register_pair(&p.source, &p.target, &model, &cfg)?;
            let total = start.elapsed().as_secs_f64() * 1e3;
            let mut s = [0.0; 7];
            s[..6].copy_from_slice(&reg.timings.0);
            s[6] = total;
            samples.push(s);
        }
    }
    let names = Stage::ALL.iter().map(|s| s.name()).chain(["end_to_end"]);
    let n = samples.len() as f64;
    Ok(names
        .enumerate()
        .map(|(i, name)| {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n;
            BenchRow {
                stage: name.to_string(),
                mean_ms: mean,
                std_ms: var.sqrt(),
                samples: samples.len(),
            }
        })
        .collect())
}
