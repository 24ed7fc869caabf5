//! Hierarchical point-wise feature encoder: four set-abstraction layers and one
//! feature-propagation layer.
//!
//! A set-abstraction layer samples centers by farthest point sampling,
//! gathers a radius neighborhood around each, runs a shared MLP on every
//! neighbor's `[feature, offset-from-center]` and max-pools per center.
//! The propagation layer interpolates the coarsest features back onto the
//! third layer's centers (inverse-distance weights over the 3 nearest) and
//! fuses them with that layer's own features through another shared MLP.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::model::{EncoderWeights, FpLayer, SaLayer};
use crate::nn::MlpTrace;
use crate::spatial::{farthest_point_sample, knn_points, radius_neighbors};

/// Lower bound on interpolation distances.
pub const MIN_INTERP_DISTANCE: f64 = 1e-8;

/// Centers processed per block during inference.
const CENTER_BLOCK: usize = 256;

/// Key points with one feature row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPointSet {
    pub coords: Vec<Vec3>,
    pub features: Array2<f64>,
}

impl KeyPointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// FPS centers and their neighborhoods (nearest first, center always included).
#[derive(Debug, Clone)]
pub struct Grouping {
    pub centers: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

impl Grouping {
    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.neighbors.len() + 1);
        off.push(0);
        for nb in &self.neighbors {
            off.push(off.last().unwrap() + nb.len());
        }
        off
    }
}

pub fn group(
    coords: &[Vec3],
    num_samples: usize,
    radius: f64,
    max_neighbors: usize,
    seed_index: usize,
) -> Result<Grouping> {
    let centers = farthest_point_sample(coords, num_samples, seed_index)?;
    let queries: Vec<Vec3> = centers.iter().map(|&c| coords[c]).collect();
    let mut neighbors = radius_neighbors(&queries, coords, radius, max_neighbors)?;
    for (nb, &c) in neighbors.iter_mut().zip(&centers) {
        if !nb.contains(&c) {
            // only reachable with more than `max_neighbors` duplicates of the center
            match nb.last_mut() {
                Some(last) => *last = c,
                None => nb.push(c),
            }
        }
    }
    Ok(Grouping { centers, neighbors })
}

/// Stacks `[feature, offset]` rows for the given centers.
fn grouped_inputs(
    coords: &[Vec3],
    features: ArrayView2<f64>,
    grouping: &Grouping,
    range: std::ops::Range<usize>,
) -> Array2<f64> {
    let fdim = features.ncols();
    let rows: usize = grouping.neighbors[range.clone()].iter().map(Vec::len).sum();
    let mut g = Array2::zeros((rows, fdim + 3));
    let mut r = 0;
    for c in range {
        let center = coords[grouping.centers[c]];
        for &j in &grouping.neighbors[c] {
            let mut row = g.row_mut(r);
            row.slice_mut(s![..fdim]).assign(&features.row(j));
            let d = coords[j] - center;
            row[fdim] = d.x;
            row[fdim + 1] = d.y;
            row[fdim + 2] = d.z;
            r += 1;
        }
    }
    g
}

/// Element-wise max over each center's rows. Returns pooled features and the
/// winning row per output element (lowest point index on ties).
fn max_pool(h: &Array2<f64>, neighbors: &[Vec<usize>]) -> (Array2<f64>, Array2<u32>) {
    let dim = h.ncols();
    let mut out = Array2::zeros((neighbors.len(), dim));
    let mut arg = Array2::zeros((neighbors.len(), dim));
    let mut row = 0usize;
    for (o, nb) in neighbors.iter().enumerate() {
        for d in 0..dim {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = row;
            let mut best_pt = usize::MAX;
            for (q, &pt) in nb.iter().enumerate() {
                let v = h[(row + q, d)];
                if v > best || (v == best && pt < best_pt) {
                    best = v;
                    best_row = row + q;
                    best_pt = pt;
                }
            }
            out[(o, d)] = best;
            arg[(o, d)] = best_row as u32;
        }
        row += nb.len();
    }
    (out, arg)
}

/// One set-abstraction layer; returns the sampled coordinates and pooled features.
pub fn sa_layer(
    coords: &[Vec3],
    features: ArrayView2<f64>,
    layer: &SaLayer,
    max_neighbors: usize,
    seed_index: usize,
) -> Result<(Vec<Vec3>, Array2<f64>)> {
    check_rows(coords.len(), features.nrows())?;
    let grouping = group(coords, layer.num_samples, layer.radius, max_neighbors, seed_index)?;
    let n = grouping.centers.len();
    let blocks: Vec<std::ops::Range<usize>> =
        (0..n).step_by(CENTER_BLOCK).map(|s| s..(s + CENTER_BLOCK).min(n)).collect();
    let pooled: Vec<Array2<f64>> = blocks
        .into_par_iter()
        .map(|range| {
            let g = grouped_inputs(coords, features, &grouping, range.clone());
            let h = layer.mlp.forward(g.view());
            max_pool(&h, &grouping.neighbors[range]).0
        })
        .collect();
    let views: Vec<ArrayView2<f64>> = pooled.iter().map(|a| a.view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).expect("blocks share width");
    let sampled = grouping.centers.iter().map(|&c| coords[c]).collect();
    Ok((sampled, out))
}

#[derive(Debug, Clone)]
pub struct SaTrace {
    pub grouping: Grouping,
    pub mlp: MlpTrace,
    pub argmax: Array2<u32>,
    pub input_rows: usize,
    pub input_dim: usize,
}

pub fn sa_layer_trace(
    coords: &[Vec3],
    features: ArrayView2<f64>,
    layer: &SaLayer,
    max_neighbors: usize,
    seed_index: usize,
) -> Result<(Vec<Vec3>, Array2<f64>, SaTrace)> {
    check_rows(coords.len(), features.nrows())?;
    let grouping = group(coords, layer.num_samples, layer.radius, max_neighbors, seed_index)?;
    let n = grouping.centers.len();
    let g = grouped_inputs(coords, features, &grouping, 0..n);
    let mlp = layer.mlp.forward_trace(g);
    let (out, argmax) = max_pool(mlp.output(), &grouping.neighbors);
    let sampled = grouping.centers.iter().map(|&c| coords[c]).collect();
    Ok((
        sampled,
        out,
        SaTrace {
            grouping,
            mlp,
            argmax,
            input_rows: coords.len(),
            input_dim: features.ncols(),
        },
    ))
}

/// Gradient of a set-abstraction layer: accumulates weight gradients into `grad`
/// and returns the gradient with respect to the input features.
pub fn sa_layer_backward(layer: &SaLayer, trace: &SaTrace, d_out: ArrayView2<f64>, grad: &mut SaLayer) -> Array2<f64> {
    let h = trace.mlp.output();
    let mut d_h = Array2::zeros(h.raw_dim());
    for ((o, d), &row) in trace.argmax.indexed_iter() {
        d_h[(row as usize, d)] += d_out[(o, d)];
    }
    let d_g = layer.mlp.backward(&trace.mlp, d_h, &mut grad.mlp);
    let mut d_in = Array2::zeros((trace.input_rows, trace.input_dim));
    let offsets = trace.grouping.offsets();
    for (c, nb) in trace.grouping.neighbors.iter().enumerate() {
        for (q, &j) in nb.iter().enumerate() {
            let src = d_g.row(offsets[c] + q);
            let mut dst = d_in.row_mut(j);
            dst += &src.slice(s![..trace.input_dim]);
        }
    }
    d_in
}

/// Three nearest upper points per lower point with normalized inverse-distance weights.
pub fn interpolation_weights(lower: &[Vec3], upper: &[Vec3]) -> Result<Vec<[(usize, f64); 3]>> {
    if upper.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            available: upper.len(),
        });
    }
    let nn = knn_points(lower, upper, 3)?;
    Ok(nn
        .into_iter()
        .map(|list| {
            let inv: Vec<f64> = list.iter().map(|&(_, d)| 1.0 / d.max(MIN_INTERP_DISTANCE)).collect();
            let total: f64 = inv.iter().sum();
            std::array::from_fn(|m| (list[m].0, inv[m] / total))
        })
        .collect())
}

fn fp_inputs(
    lower_features: ArrayView2<f64>,
    upper_features: ArrayView2<f64>,
    weights: &[[(usize, f64); 3]],
) -> Array2<f64> {
    let skip = lower_features.ncols();
    let up = upper_features.ncols();
    let mut x = Array2::zeros((weights.len(), skip + up));
    for (i, w) in weights.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.slice_mut(s![..skip]).assign(&lower_features.row(i));
        let mut interp = row.slice_mut(s![skip..]);
        for &(j, wj) in w {
            interp.scaled_add(wj, &upper_features.row(j));
        }
    }
    x
}

/// Feature propagation onto `lower_coords`.
pub fn fp_layer(
    lower_coords: &[Vec3],
    lower_features: ArrayView2<f64>,
    upper_coords: &[Vec3],
    upper_features: ArrayView2<f64>,
    layer: &FpLayer,
) -> Result<Array2<f64>> {
    check_rows(lower_coords.len(), lower_features.nrows())?;
    check_rows(upper_coords.len(), upper_features.nrows())?;
    let w = interpolation_weights(lower_coords, upper_coords)?;
    let x = fp_inputs(lower_features, upper_features, &w);
    Ok(layer.mlp.forward(x.view()))
}

#[derive(Debug, Clone)]
pub struct FpTrace {
    pub weights: Vec<[(usize, f64); 3]>,
    pub mlp: MlpTrace,
    pub skip_dim: usize,
    pub upper_rows: usize,
}

pub fn fp_layer_trace(
    lower_coords: &[Vec3],
    lower_features: ArrayView2<f64>,
    upper_coords: &[Vec3],
    upper_features: ArrayView2<f64>,
    layer: &FpLayer,
) -> Result<(Array2<f64>, FpTrace)> {
    check_rows(lower_coords.len(), lower_features.nrows())?;
    check_rows(upper_coords.len(), upper_features.nrows())?;
    let weights = interpolation_weights(lower_coords, upper_coords)?;
    let x = fp_inputs(lower_features, upper_features, &weights);
    let mlp = layer.mlp.forward_trace(x);
    let out = mlp.output().clone();
    Ok((
        out,
        FpTrace {
            weights,
            mlp,
            skip_dim: lower_features.ncols(),
            upper_rows: upper_coords.len(),
        },
    ))
}

/// Returns `(d_lower_features, d_upper_features)`.
pub fn fp_layer_backward(
    layer: &FpLayer,
    trace: &FpTrace,
    d_out: Array2<f64>,
    grad: &mut FpLayer,
) -> (Array2<f64>, Array2<f64>) {
    let d_x = layer.mlp.backward(&trace.mlp, d_out, &mut grad.mlp);
    let skip = trace.skip_dim;
    let d_lower = d_x.slice(s![.., ..skip]).to_owned();
    let up_dim = d_x.ncols() - skip;
    let mut d_upper = Array2::zeros((trace.upper_rows, up_dim));
    for (i, w) in trace.weights.iter().enumerate() {
        let src = d_x.slice(s![i, skip..]);
        for &(j, wj) in w {
            d_upper.row_mut(j).scaled_add(wj, &src);
        }
    }
    (d_lower, d_upper)
}

fn check_rows(coords: usize, features: usize) -> Result<()> {
    if coords != features {
        return Err(Error::ShapeMismatch(format!("{coords} coordinates vs {features} feature rows")));
    }
    Ok(())
}

fn check_cloud(cloud: &PointCloud, weights: &EncoderWeights) -> Result<Array2<f64>> {
    cloud.validate()?;
    let needed = weights.min_points();
    if cloud.len() < needed {
        return Err(Error::InvalidArgument(format!(
            "cloud has {} points but the encoder samples {needed} in its first layer; \
             use a smaller voxel size or a denser scan",
            cloud.len()
        )));
    }
    if weights.input_dim != 1 {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} input features per point, clouds carry 1",
            weights.input_dim
        )));
    }
    let f = cloud.point_features();
    Ok(Array2::from_shape_vec((f.len(), 1), f).expect("one feature per point"))
}

/// Encodes a cloud into key points (the third layer's centers) with propagated features.
pub fn encode(cloud: &PointCloud, weights: &EncoderWeights) -> Result<KeyPointSet> {
    let input = check_cloud(cloud, weights)?;
    let mp = weights.max_neighbors;
    let (c1, f1) = sa_layer(&cloud.coords, input.view(), &weights.sa[0], mp, 0)?;
    let (c2, f2) = sa_layer(&c1, f1.view(), &weights.sa[1], mp, 0)?;
    let (c3, f3) = sa_layer(&c2, f2.view(), &weights.sa[2], mp, 0)?;
    let (c4, f4) = sa_layer(&c3, f3.view(), &weights.sa[3], mp, 0)?;
    let features = fp_layer(&c3, f3.view(), &c4, f4.view(), &weights.fp)?;
    Ok(KeyPointSet { coords: c3, features })
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub sa: Vec<SaTrace>,
    pub fp: FpTrace,
}

pub fn encode_trace(cloud: &PointCloud, weights: &EncoderWeights) -> Result<(KeyPointSet, EncoderTrace)> {
    let input = check_cloud(cloud, weights)?;
    let mp = weights.max_neighbors;
    let (c1, f1, t1) = sa_layer_trace(&cloud.coords, input.view(), &weights.sa[0], mp, 0)?;
    let (c2, f2, t2) = sa_layer_trace(&c1, f1.view(), &weights.sa[1], mp, 0)?;
    let (c3, f3, t3) = sa_layer_trace(&c2, f2.view(), &weights.sa[2], mp, 0)?;
    let (c4, f4, t4) = sa_layer_trace(&c3, f3.view(), &weights.sa[3], mp, 0)?;
    let (features, tfp) = fp_layer_trace(&c3, f3.view(), &c4, f4.view(), &weights.fp)?;
    Ok((
        KeyPointSet { coords: c3, features },
        EncoderTrace {
            sa: vec![t1, t2, t3, t4],
            fp: tfp,
        },
    ))
}

/// Accumulates encoder weight gradients for an upstream gradient on the key-point features.
pub fn encode_backward(weights: &EncoderWeights, trace: &EncoderTrace, d_features: Array2<f64>, grad: &mut EncoderWeights) {
    let (d_f3_skip, d_f4) = fp_layer_backward(&weights.fp, &trace.fp, d_features, &mut grad.fp);
    let d_f3_up = sa_layer_backward(&weights.sa[3], &trace.sa[3], d_f4.view(), &mut grad.sa[3]);
    let d_f3 = d_f3_skip + d_f3_up;
    let d_f2 = sa_layer_backward(&weights.sa[2], &trace.sa[2], d_f3.view(), &mut grad.sa[2]);
    let d_f1 = sa_layer_backward(&weights.sa[1], &trace.sa[1], d_f2.view(), &mut grad.sa[1]);
    // input features (intensity) are data, so the first layer's input gradient is dropped
    let _ = sa_layer_backward(&weights.sa[0], &trace.sa[0], d_f1.view(), &mut grad.sa[0]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::nn::{Dense, Mlp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        let coords = (0..n)
            .map(|_| Vec3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent / 4.0)))
            .collect();
        let w = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        PointCloud::with_intensity(coords, w).unwrap()
    }

    #[test]
    fn singleton_neighborhood_equals_mlp_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = vec![Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0), Vec3::new(0.0, 10.0, 0.0)];
        let feats = Array2::from_shape_vec((3, 1), vec![0.2, 0.5, 0.9]).unwrap();
        let layer = SaLayer {
            num_samples: 3,
            radius: 1.0,
            mlp: Mlp::init(4, &[5, 3], &mut rng),
        };
        let (_, out) = sa_layer(&coords, feats.view(), &layer, 64, 0).unwrap();
        // centers come out in FPS order: 0, then the farthest (ties → lowest index) 1, then 2
        for (o, &c) in [0usize, 1, 2].iter().enumerate() {
            let x = Array2::from_shape_vec((1, 4), vec![feats[(c, 0)], 0.0, 0.0, 0.0]).unwrap();
            let want = layer.mlp.forward(x.view());
            assert_eq!(out.row(o), want.row(0));
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cloud(&mut rng, 100, 5.0);
        let layer = SaLayer {
            num_samples: 20,
            radius: 1.0,
            mlp: Mlp::zeros(4, &[8, 8]),
        };
        let f = Array2::from_shape_vec((100, 1), c.point_features()).unwrap();
        let (_, out) = sa_layer(&c.coords, f.view(), &layer, 64, 0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sa_requires_enough_points() {
        let layer = SaLayer {
            num_samples: 5,
            radius: 1.0,
            mlp: Mlp::zeros(4, &[2]),
        };
        let coords = vec![Vec3::zeros(); 3];
        let f = Array2::zeros((3, 1));
        assert!(matches!(
            sa_layer(&coords, f.view(), &layer, 64, 0),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn fp_interpolation_cases() {
        let upper = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(3.0, 3.0, 0.0)];
        let w = interpolation_weights(&[Vec3::new(1.0, 0.0, 0.0)], &upper).unwrap();
        assert_eq!(w[0][0].0, 1);
        assert!(w[0][0].1 > 1.0 - 1e-6);

        let uf = Array2::from_shape_fn((4, 3), |(_, d)| [0.3, -1.0, 2.0][d]);
        let lower = vec![Vec3::new(0.2, 0.3, 0.1), Vec3::new(2.0, 1.0, 0.0)];
        let lf = Array2::zeros((2, 0));
        let w = interpolation_weights(&lower, &upper).unwrap();
        let x = fp_inputs(lf.view(), uf.view(), &w);
        for row in x.rows() {
            for (d, v) in row.iter().enumerate() {
                assert!((v - [0.3, -1.0, 2.0][d]).abs() < 1e-12);
            }
        }
        assert!(interpolation_weights(&lower, &upper[..2]).is_err());
    }

    #[test]
    fn fp_matches_direct_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let upper: Vec<Vec3> = (0..10).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let lower: Vec<Vec3> = (0..7).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let uf = Array2::from_shape_simple_fn((10, 2), || rng.random_range(-1.0..1.0));
        let lf = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-1.0..1.0));
        let layer = FpLayer {
            mlp: Mlp {
                layers: vec![Dense {
                    weight: Array2::eye(5),
                    bias: ndarray::Array1::from_elem(5, 10.0),
                }],
            },
        };
        let out = fp_layer(&lower, lf.view(), &upper, uf.view(), &layer).unwrap();
        for (i, p) in lower.iter().enumerate() {
            let mut d: Vec<(f64, usize)> = upper.iter().enumerate().map(|(j, u)| ((u - p).norm(), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let inv: Vec<f64> = d[..3].iter().map(|x| 1.0 / x.0).collect();
            let tot: f64 = inv.iter().sum();
            for k in 0..2 {
                let want: f64 = (0..3).map(|m| inv[m] / tot * uf[(d[m].1, k)]).sum::<f64>() + 10.0;
                assert!((out[(i, 3 + k)] - want).abs() < 1e-12);
            }
            for k in 0..3 {
                assert!((out[(i, k)] - (lf[(i, k)] + 10.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::init(&ModelConfig::desk(), &mut rng).unwrap();
        let c = cloud(&mut rng, 1500, 40.0);
        let a = encode(&c, &model.encoder).unwrap();
        let b = encode(&c, &model.encoder).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert_eq!(a.dim(), 32);
        assert!(a.features.iter().all(|v| v.is_finite()));
        let small = PointCloud::new(c.coords[..1000].to_vec());
        assert!(encode(&small, &model.encoder).is_err());
    }

    #[test]
    fn traced_encode_matches_blocked_encode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::init(&ModelConfig::desk(), &mut rng).unwrap();
        let c = cloud(&mut rng, 1200, 40.0);
        let a = encode(&c, &model.encoder).unwrap();
        let (b, _) = encode_trace(&c, &model.encoder).unwrap();
        assert_eq!(a.coords, b.coords);
        assert!((&a.features - &b.features).iter().all(|v| v.abs() < 1e-12));
    }
}
