//! Correspondence supervision and a small Adam training loop.
//!
//! For source key point `i` with label `δᵢ` and ground-truth match `ĵᵢ`, the
//! per-pair objective is
//!
//! ```text
//! L = (1/N_c) Σᵢ δᵢ [ −φᵢĵ + λ/(N−1) Σ_{j≠ĵ} φᵢⱼ ]
//! ```
//!
//! Gradients are exact reverse-mode derivatives of the full forward pass;
//! max operations route the gradient to the winning element.

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{attend_backward, attend_trace};
use crate::encoder::{encode_backward, encode_trace};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, voxel_downsample, PointCloud, RigidTransform, Vec3};
use crate::matcher::{match_backward, match_trace};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{DEFAULT_TEMPERATURE, DEFAULT_VOXEL_SIZE};
use crate::scenes::ScenePair;
use crate::spatial::knn_points;

pub const DEFAULT_LABEL_RADIUS: f64 = 1.6;
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceLabels {
    pub positive: Vec<bool>,
    /// Nearest target key point per source key point (meaningful where `positive`).
    pub target_index: Vec<usize>,
    pub count: usize,
}

/// Marks source key points whose aligned position has a target key point within `radius`.
pub fn correspondence_labels(x: &[Vec3], y: &[Vec3], gt: &RigidTransform, radius: f64) -> Result<CorrespondenceLabels> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("label radius must be positive, got {radius}")));
    }
    let aligned: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
    let nearest = knn_points(&aligned, y, 1)?;
    let mut positive = Vec::with_capacity(x.len());
    let mut target_index = Vec::with_capacity(x.len());
    for list in nearest {
        let (j, d) = list[0];
        positive.push(d <= radius);
        target_index.push(j);
    }
    let count = positive.iter().filter(|&&b| b).count();
    Ok(CorrespondenceLabels {
        positive,
        target_index,
        count,
    })
}

fn check_loss_inputs(phi: ArrayView2<f64>, labels: &CorrespondenceLabels) -> Result<()> {
    if labels.positive.len() != phi.nrows() || labels.target_index.len() != phi.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} map rows",
            labels.positive.len(),
            phi.nrows()
        )));
    }
    if phi.ncols() < 2 {
        return Err(Error::InvalidArgument("loss needs at least two target key points".into()));
    }
    if labels.count == 0 {
        return Err(Error::NoCorrespondences("pair has no labelled correspondences".into()));
    }
    Ok(())
}

pub fn loss(phi: ArrayView2<f64>, labels: &CorrespondenceLabels, lambda: f64) -> Result<f64> {
    check_loss_inputs(phi, labels)?;
    let scale = lambda / (phi.ncols() - 1) as f64;
    let mut total = 0.0;
    for (i, row) in phi.rows().into_iter().enumerate() {
        if !labels.positive[i] {
            continue;
        }
        let hit = labels.target_index[i];
        let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != hit).map(|(_, &p)| p).sum();
        total += -row[hit] + scale * rest;
    }
    Ok(total / labels.count as f64)
}

/// `∂L/∂φ`.
pub fn loss_gradient_phi(phi: ArrayView2<f64>, labels: &CorrespondenceLabels, lambda: f64) -> Result<Array2<f64>> {
    check_loss_inputs(phi, labels)?;
    let inv = 1.0 / labels.count as f64;
    let off = inv * lambda / (phi.ncols() - 1) as f64;
    let mut d = Array2::zeros(phi.raw_dim());
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        if labels.positive[i] {
            row.fill(off);
            row[labels.target_index[i]] = -inv;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub label_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            lambda: DEFAULT_LAMBDA,
            label_radius: DEFAULT_LABEL_RADIUS,
        }
    }
}

/// Loss of one pair; clouds are used as given (no downsampling).
pub fn pair_loss(model: &Model, source: &PointCloud, target: &PointCloud, gt: &RigidTransform, cfg: &LossConfig) -> Result<f64> {
    Ok(forward_backward(model, source, target, gt, cfg, false)?.0)
}

/// Loss of one pair and its gradient with respect to every trainable tensor.
pub fn loss_gradient(
    model: &Model,
    source: &PointCloud,
    target: &PointCloud,
    gt: &RigidTransform,
    cfg: &LossConfig,
) -> Result<(f64, Model)> {
    let (l, grad) = forward_backward(model, source, target, gt, cfg, true)?;
    Ok((l, grad.expect("requested")))
}

fn forward_backward(
    model: &Model,
    source: &PointCloud,
    target: &PointCloud,
    gt: &RigidTransform,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Model>)> {
    let (kx, tx) = encode_trace(source, &model.encoder)?;
    let (ky, ty) = encode_trace(target, &model.encoder)?;
    let labels = correspondence_labels(&kx.coords, &ky.coords, gt, cfg.label_radius)?;
    if labels.count == 0 {
        return Err(Error::NoCorrespondences("pair has no labelled correspondences".into()));
    }
    let (fx, fy, at) = attend_trace(&kx, &ky, &model.attention)?;
    let (phi, mt) = match_trace(fx.view(), fy.view(), cfg.temperature)?;
    let l = loss(phi.view(), &labels, cfg.lambda)?;
    if !want_grad {
        return Ok((l, None));
    }
    let d_phi = loss_gradient_phi(phi.view(), &labels, cfg.lambda)?;
    let (d_fx, d_fy) = match_backward(&phi, &mt, d_phi.view());
    let mut grad = model.zeros_like();
    let (d_kx, d_ky) = attend_backward(&model.attention, &at, d_fx.view(), d_fy.view(), &mut grad.attention);
    encode_backward(&model.encoder, &tx, d_kx, &mut grad.encoder);
    encode_backward(&model.encoder, &ty, d_ky, &mut grad.encoder);
    Ok((l, Some(grad)))
}

/// Independent random yaw rotations of both clouds; the ground truth is
/// adjusted so the pair stays exactly aligned.
pub fn augment<R: Rng + ?Sized>(pair: &ScenePair, rng: &mut R) -> ScenePair {
    let a = RigidTransform::rotation_z(rng.random_range(0.0..std::f64::consts::TAU));
    let b = RigidTransform::rotation_z(rng.random_range(0.0..std::f64::consts::TAU));
    ScenePair {
        scene_id: pair.scene_id.clone(),
        source: apply_transform(&pair.source, &a),
        target: apply_transform(&pair.target, &b),
        ground_truth: b.compose(&pair.ground_truth).compose(&a.inverse()),
        overlap: pair.overlap,
        separation: pair.separation,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossConfig,
    pub voxel_size: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_halving_period: 5,
            epochs: 20,
            batch_size: 6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-4,
            loss: LossConfig::default(),
            voxel_size: DEFAULT_VOXEL_SIZE,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.learning_rate", self.learning_rate),
            ("train.epsilon", self.epsilon),
            ("train.voxel_size", self.voxel_size),
            ("train.temperature", self.loss.temperature),
            ("train.label_radius", self.loss.label_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::Config("train.lambda must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return Err(Error::Config("epochs, batch size and halving period must be positive".into()));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights after the epoch with the lowest validation loss.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, model: &mut Model, grad: &Model, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let grads = grad.params();
        for (((_, w), g), (m, v)) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..w.len() {
                let gi = g.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Downsamples both clouds of every pair once, up front.
fn prepare(pairs: &[ScenePair], voxel: f64) -> Result<Vec<ScenePair>> {
    pairs
        .par_iter()
        .map(|p| {
            Ok(ScenePair {
                source: voxel_downsample(&p.source, voxel)?,
                target: voxel_downsample(&p.target, voxel)?,
                ..p.clone()
            })
        })
        .collect()
}

fn mean_usable(results: Vec<(String, Result<f64>)>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (id, r) in results {
        match r {
            Ok(l) => {
                sum += l;
                n += 1;
            }
            Err(Error::NoCorrespondences(_)) => warn!("skipping {id}: no labelled correspondences"),
            Err(e) => return Err(e),
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Trains a freshly initialized model; `on_epoch` sees each record as it is produced.
pub fn train(
    train_pairs: &[ScenePair],
    val_pairs: &[ScenePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs non-empty splits, got {} training and {} validation pairs",
            train_pairs.len(),
            val_pairs.len()
        )));
    }
    let train_set = prepare(train_pairs, cfg.voxel_size)?;
    let val_set = prepare(val_pairs, cfg.voxel_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(model_cfg, &mut rng)?;
    let mut adam = Adam::new(&model);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let results: Vec<(usize, Result<(f64, Model)>)> = jobs
                .into_par_iter()
                .map(|(i, seed)| {
                    let p = &train_set[i];
                    let sample = if cfg.augment {
                        augment(p, &mut ChaCha8Rng::seed_from_u64(seed))
                    } else {
                        p.clone()
                    };
                    (i, loss_gradient(&model, &sample.source, &sample.target, &sample.ground_truth, &cfg.loss))
                })
                .collect();
            let mut grad: Option<Model> = None;
            let mut used = 0usize;
            for (i, r) in results {
                match r {
                    Ok((l, g)) => {
                        epoch_sum += l;
                        used += 1;
                        match &mut grad {
                            Some(acc) => acc.add_scaled(&g, 1.0),
                            None => grad = Some(g),
                        }
                    }
                    Err(Error::NoCorrespondences(_)) => {
                        warn!("skipping {}: no labelled correspondences", train_set[i].scene_id)
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(mut g) = grad {
                let scale = 1.0 / used as f64;
                for (_, t) in g.params_mut() {
                    t.iter_mut().for_each(|v| *v *= scale);
                }
                adam.update(&mut model, &g, lr, cfg);
                epoch_n += used;
            }
        }
        if epoch_n == 0 {
            return Err(Error::NoCorrespondences(
                "no training pair has labelled correspondences".into(),
            ));
        }
        let val_results: Vec<(String, Result<f64>)> = val_set
            .par_iter()
            .map(|p| {
                (p.scene_id.clone(), pair_loss(&model, &p.source, &p.target, &p.ground_truth, &cfg.loss))
            })
            .collect();
        let val_loss = mean_usable(val_results)?
            .ok_or_else(|| Error::NoCorrespondences("no validation pair has labelled correspondences".into()))?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_sum / epoch_n as f64,
            val_loss,
            learning_rate: lr,
        };
        on_epoch(&record);
        log.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch + 1, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(positive: Vec<bool>, target_index: Vec<usize>) -> CorrespondenceLabels {
        let count = positive.iter().filter(|&&b| b).count();
        CorrespondenceLabels {
            positive,
            target_index,
            count,
        }
    }

    #[test]
    fn loss_spot_values() {
        let one_hot = array![[0.0, 1.0, 0.0]];
        assert_eq!(loss(one_hot.view(), &labels(vec![true], vec![1]), 10.0).unwrap(), -1.0);
        let uniform = array![[0.5, 0.5]];
        assert_eq!(loss(uniform.view(), &labels(vec![true], vec![0]), 10.0).unwrap(), 4.5);
        assert!(matches!(
            loss(uniform.view(), &labels(vec![false], vec![0]), 10.0),
            Err(Error::NoCorrespondences(_))
        ));
    }

    #[test]
    fn loss_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, m) = (7, 5);
        let mut phi = Array2::from_shape_simple_fn((n, m), || rng.random_range(0.0..1.0));
        for mut r in phi.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        let l = labels(
            (0..n).map(|i| i % 3 != 0).collect(),
            (0..n).map(|i| (i * 2) % m).collect(),
        );
        let lambda = 3.0;
        let mut oracle = 0.0;
        for i in 0..n {
            if !l.positive[i] {
                continue;
            }
            for j in 0..m {
                if j == l.target_index[i] {
                    oracle -= phi[(i, j)];
                } else {
                    oracle += lambda / (m - 1) as f64 * phi[(i, j)];
                }
            }
        }
        oracle /= l.count as f64;
        assert!((loss(phi.view(), &l, lambda).unwrap() - oracle).abs() < 1e-14);

        let d = loss_gradient_phi(phi.view(), &l, lambda).unwrap();
        let h = 1e-7;
        for idx in 0..phi.len() {
            let mut p = phi.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            let fd = (loss(p.view(), &l, lambda).unwrap() - loss(phi.view(), &l, lambda).unwrap()) / h;
            assert!((fd - d.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn moving_mass_to_the_match_lowers_loss() {
        let l = labels(vec![true], vec![0]);
        let a = loss(array![[0.4, 0.3, 0.3]].view(), &l, 10.0).unwrap();
        let b = loss(array![[0.5, 0.2, 0.3]].view(), &l, 10.0).unwrap();
        assert!(b < a);
    }

    #[test]
    fn labels_cases() {
        let x: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64 * 3.0, 0.0, 0.0)).collect();
        let gt = RigidTransform::from_axis_angle(Vec3::z(), 0.4, Vec3::new(1.0, 2.0, 0.0));
        let y: Vec<Vec3> = x.iter().map(|p| gt.apply(p)).collect();
        let l = correspondence_labels(&x, &y, &gt, 1.6).unwrap();
        assert_eq!(l.count, 6);
        assert_eq!(l.target_index, (0..6).collect::<Vec<_>>());

        let far: Vec<Vec3> = y.iter().map(|p| p + Vec3::new(100.0, 0.0, 0.0)).collect();
        assert_eq!(correspondence_labels(&x, &far, &gt, 1.6).unwrap().count, 0);

        // first half kept in place, second half pushed out of range
        let half: Vec<Vec3> = y
            .iter()
            .enumerate()
            .map(|(i, p)| if i < 3 { *p } else { p + Vec3::new(0.0, 50.0, 0.0) })
            .collect();
        let l = correspondence_labels(&x, &half, &gt, 1.6).unwrap();
        assert_eq!(l.positive, vec![true, true, true, false, false, false]);
    }

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        assert_eq!(cfg.learning_rate_at(4), 0.01);
        assert_eq!(cfg.learning_rate_at(5), 0.005);
        assert_eq!(cfg.learning_rate_at(19), 0.01 / 8.0);
    }
}
