//! Self- and cross-attention over key points using a gated graph-convolution residual.
//!
//! For node `i` with neighbors `N(i)` and `zᵢⱼ = [fᵢ, fⱼ]`:
//!
//! ```text
//! f̂ᵢ = fᵢ + max_{j ∈ N(i)} sigmoid(zᵢⱼ W_f) ⊙ softplus(zᵢⱼ W_s)
//! ```
//!
//! with the max taken element-wise. Since `zᵢⱼ W = fᵢ W_top + fⱼ W_bottom`,
//! both halves are computed once per node rather than once per edge.

use ndarray::{s, Array2, ArrayView2};

use crate::encoder::KeyPointSet;
use crate::error::{Error, Result};
use crate::model::AttentionWeights;
use crate::nn::{sigmoid, softplus};
use crate::spatial::{knn, knn_graph, Metric};

/// Per-node neighbor lists.
pub type Graph = Vec<Vec<usize>>;

#[derive(Debug, Clone)]
pub struct CgconvTrace {
    a_node: Array2<f64>,
    a_nb: Array2<f64>,
    s_node: Array2<f64>,
    s_nb: Array2<f64>,
    /// Winning neighbor per (node, dim).
    argmax: Array2<u32>,
}

fn check_cgconv(
    features: ArrayView2<f64>,
    graph: &[Vec<usize>],
    neighbor_features: ArrayView2<f64>,
    wf: ArrayView2<f64>,
    ws: ArrayView2<f64>,
) -> Result<()> {
    let d = features.ncols();
    if neighbor_features.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "node dim {d} vs neighbor dim {}",
            neighbor_features.ncols()
        )));
    }
    for (name, w) in [("W_f", wf), ("W_s", ws)] {
        if w.dim() != (2 * d, d) {
            return Err(Error::ShapeMismatch(format!(
                "{name} has shape {:?}, expected ({}, {d})",
                w.dim(),
                2 * d
            )));
        }
    }
    if graph.len() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, features have {} rows",
            graph.len(),
            features.nrows()
        )));
    }
    for (i, nb) in graph.iter().enumerate() {
        if nb.is_empty() {
            return Err(Error::ShapeMismatch(format!("node {i} has no neighbors")));
        }
        if let Some(&j) = nb.iter().find(|&&j| j >= neighbor_features.nrows()) {
            return Err(Error::ShapeMismatch(format!("node {i} references neighbor {j} out of range")));
        }
    }
    Ok(())
}

pub fn cgconv(
    features: ArrayView2<f64>,
    graph: &[Vec<usize>],
    neighbor_features: ArrayView2<f64>,
    wf: ArrayView2<f64>,
    ws: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(cgconv_trace(features, graph, neighbor_features, wf, ws)?.0)
}

pub fn cgconv_trace(
    features: ArrayView2<f64>,
    graph: &[Vec<usize>],
    neighbor_features: ArrayView2<f64>,
    wf: ArrayView2<f64>,
    ws: ArrayView2<f64>,
) -> Result<(Array2<f64>, CgconvTrace)> {
    check_cgconv(features, graph, neighbor_features, wf, ws)?;
    let d = features.ncols();
    let a_node = features.dot(&wf.slice(s![..d, ..]));
    let a_nb = neighbor_features.dot(&wf.slice(s![d.., ..]));
    let s_node = features.dot(&ws.slice(s![..d, ..]));
    let s_nb = neighbor_features.dot(&ws.slice(s![d.., ..]));

    let mut out = features.to_owned();
    let mut argmax = Array2::zeros((features.nrows(), d));
    for (i, nb) in graph.iter().enumerate() {
        for c in 0..d {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = usize::MAX;
            for &j in nb {
                let m = sigmoid(a_node[(i, c)] + a_nb[(j, c)]) * softplus(s_node[(i, c)] + s_nb[(j, c)]);
                if m > best || (m == best && j < best_j) {
                    best = m;
                    best_j = j;
                }
            }
            out[(i, c)] += best;
            argmax[(i, c)] = best_j as u32;
        }
    }
    Ok((
        out,
        CgconvTrace {
            a_node,
            a_nb,
            s_node,
            s_nb,
            argmax,
        },
    ))
}

/// Backpropagates through one cgconv application. Accumulates into `d_wf`/`d_ws`
/// and returns `(d_features, d_neighbor_features)`.
#[allow(clippy::too_many_arguments)]
pub fn cgconv_backward(
    features: ArrayView2<f64>,
    neighbor_features: ArrayView2<f64>,
    wf: ArrayView2<f64>,
    ws: ArrayView2<f64>,
    trace: &CgconvTrace,
    d_out: ArrayView2<f64>,
    d_wf: &mut Array2<f64>,
    d_ws: &mut Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d = features.ncols();
    let mut da_node = Array2::zeros(trace.a_node.raw_dim());
    let mut da_nb = Array2::zeros(trace.a_nb.raw_dim());
    let mut ds_node = Array2::zeros(trace.s_node.raw_dim());
    let mut ds_nb = Array2::zeros(trace.s_nb.raw_dim());
    for ((i, c), &j) in trace.argmax.indexed_iter() {
        let g = d_out[(i, c)];
        if g == 0.0 {
            continue;
        }
        let j = j as usize;
        let a = trace.a_node[(i, c)] + trace.a_nb[(j, c)];
        let sv = trace.s_node[(i, c)] + trace.s_nb[(j, c)];
        let sig = sigmoid(a);
        let ga = g * softplus(sv) * sig * (1.0 - sig);
        let gs = g * sig * sigmoid(sv);
        da_node[(i, c)] += ga;
        da_nb[(j, c)] += ga;
        ds_node[(i, c)] += gs;
        ds_nb[(j, c)] += gs;
    }
    {
        let mut top = d_wf.slice_mut(s![..d, ..]);
        top += &features.t().dot(&da_node);
        let mut bot = d_wf.slice_mut(s![d.., ..]);
        bot += &neighbor_features.t().dot(&da_nb);
        let mut top = d_ws.slice_mut(s![..d, ..]);
        top += &features.t().dot(&ds_node);
        let mut bot = d_ws.slice_mut(s![d.., ..]);
        bot += &neighbor_features.t().dot(&ds_nb);
    }
    let mut d_feat = d_out.to_owned();
    d_feat += &da_node.dot(&wf.slice(s![..d, ..]).t());
    d_feat += &ds_node.dot(&ws.slice(s![..d, ..]).t());
    let mut d_nb = da_nb.dot(&wf.slice(s![d.., ..]).t());
    d_nb += &ds_nb.dot(&ws.slice(s![d.., ..]).t());
    (d_feat, d_nb)
}

/// Spatial k-NN graph of a key-point set (self excluded).
pub fn self_graph(keypoints: &KeyPointSet, k: usize) -> Result<Graph> {
    knn_graph(&keypoints.coords, k)
}

/// Bipartite graph: each row of `from` linked to its `k` highest dot-product rows of `to`.
pub fn cross_graph(from: ArrayView2<f64>, to: ArrayView2<f64>, k: usize) -> Result<Graph> {
    knn(from, to, k, Metric::DotProduct)
}

pub fn self_attention(keypoints: &KeyPointSet, weights: &AttentionWeights) -> Result<KeyPointSet> {
    let graph = self_graph(keypoints, weights.k)?;
    let f = keypoints.features.view();
    let features = cgconv(f, &graph, f, weights.self_wf.view(), weights.self_ws.view())?;
    Ok(KeyPointSet {
        coords: keypoints.coords.clone(),
        features,
    })
}

/// Cross attention with shared weights applied symmetrically to both clouds.
pub fn cross_attention(
    source: &KeyPointSet,
    target: &KeyPointSet,
    weights: &AttentionWeights,
) -> Result<(KeyPointSet, KeyPointSet)> {
    let k = weights.k;
    for (side, set) in [("source", source), ("target", target)] {
        if set.len() < k {
            return Err(Error::InvalidArgument(format!(
                "{side} has {} key points, cross attention needs k = {k}",
                set.len()
            )));
        }
    }
    let (fx, fy) = (source.features.view(), target.features.view());
    let gxy = cross_graph(fx, fy, k)?;
    let gyx = cross_graph(fy, fx, k)?;
    let (wf, ws) = (weights.cross_wf.view(), weights.cross_ws.view());
    let new_x = cgconv(fx, &gxy, fy, wf, ws)?;
    let new_y = cgconv(fy, &gyx, fx, wf, ws)?;
    Ok((
        KeyPointSet {
            coords: source.coords.clone(),
            features: new_x,
        },
        KeyPointSet {
            coords: target.coords.clone(),
            features: new_y,
        },
    ))
}

/// Self attention on both clouds followed by one round of cross attention.
pub fn attend(
    source: &KeyPointSet,
    target: &KeyPointSet,
    weights: &AttentionWeights,
) -> Result<(KeyPointSet, KeyPointSet)> {
    let sx = self_attention(source, weights)?;
    let sy = self_attention(target, weights)?;
    cross_attention(&sx, &sy, weights)
}

/// Intermediate values of [`attend`] needed for backpropagation.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    fx0: Array2<f64>,
    fy0: Array2<f64>,
    self_x: CgconvTrace,
    self_y: CgconvTrace,
    fx1: Array2<f64>,
    fy1: Array2<f64>,
    cross_x: CgconvTrace,
    cross_y: CgconvTrace,
}

pub fn attend_trace(
    source: &KeyPointSet,
    target: &KeyPointSet,
    weights: &AttentionWeights,
) -> Result<(Array2<f64>, Array2<f64>, AttentionTrace)> {
    let k = weights.k;
    let gx = self_graph(source, k)?;
    let gy = self_graph(target, k)?;
    let (fx0, fy0) = (source.features.view(), target.features.view());
    let (sw_f, sw_s) = (weights.self_wf.view(), weights.self_ws.view());
    let (fx1, self_x) = cgconv_trace(fx0, &gx, fx0, sw_f, sw_s)?;
    let (fy1, self_y) = cgconv_trace(fy0, &gy, fy0, sw_f, sw_s)?;
    let gxy = cross_graph(fx1.view(), fy1.view(), k)?;
    let gyx = cross_graph(fy1.view(), fx1.view(), k)?;
    let (cw_f, cw_s) = (weights.cross_wf.view(), weights.cross_ws.view());
    let (fx2, cross_x) = cgconv_trace(fx1.view(), &gxy, fy1.view(), cw_f, cw_s)?;
    let (fy2, cross_y) = cgconv_trace(fy1.view(), &gyx, fx1.view(), cw_f, cw_s)?;
    Ok((
        fx2,
        fy2,
        AttentionTrace {
            fx0: source.features.clone(),
            fy0: target.features.clone(),
            self_x,
            self_y,
            fx1,
            fy1,
            cross_x,
            cross_y,
        },
    ))
}

/// Returns gradients with respect to the encoder features `(d_fx, d_fy)` and
/// accumulates attention weight gradients into `grad`.
pub fn attend_backward(
    weights: &AttentionWeights,
    trace: &AttentionTrace,
    d_fx2: ArrayView2<f64>,
    d_fy2: ArrayView2<f64>,
    grad: &mut AttentionWeights,
) -> (Array2<f64>, Array2<f64>) {
    let (cw_f, cw_s) = (weights.cross_wf.view(), weights.cross_ws.view());
    let (dx_a, dy_a) = cgconv_backward(
        trace.fx1.view(),
        trace.fy1.view(),
        cw_f,
        cw_s,
        &trace.cross_x,
        d_fx2,
        &mut grad.cross_wf,
        &mut grad.cross_ws,
    );
    let (dy_b, dx_b) = cgconv_backward(
        trace.fy1.view(),
        trace.fx1.view(),
        cw_f,
        cw_s,
        &trace.cross_y,
        d_fy2,
        &mut grad.cross_wf,
        &mut grad.cross_ws,
    );
    let d_fx1 = dx_a + dx_b;
    let d_fy1 = dy_a + dy_b;
    let (sw_f, sw_s) = (weights.self_wf.view(), weights.self_ws.view());
    let (dx0, dx0_nb) = cgconv_backward(
        trace.fx0.view(),
        trace.fx0.view(),
        sw_f,
        sw_s,
        &trace.self_x,
        d_fx1.view(),
        &mut grad.self_wf,
        &mut grad.self_ws,
    );
    let (dy0, dy0_nb) = cgconv_backward(
        trace.fy0.view(),
        trace.fy0.view(),
        sw_f,
        sw_s,
        &trace.self_y,
        d_fy1.view(),
        &mut grad.self_wf,
        &mut grad.self_ws,
    );
    (dx0 + dx0_nb, dy0 + dy0_nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HALF_LN2: f64 = 0.5 * std::f64::consts::LN_2;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> KeyPointSet {
        KeyPointSet {
            coords: (0..n)
                .map(|_| Vec3::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..2.0)))
                .collect(),
            features: Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn zero_weights_shift_by_half_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_set(&mut rng, 40, 8);
        let y = random_set(&mut rng, 40, 8);
        let w = AttentionWeights::zeros(8, 4);
        let sx = self_attention(&x, &w).unwrap();
        for (a, b) in sx.features.iter().zip(x.features.iter()) {
            assert!((a - b - HALF_LN2).abs() < 1e-12);
        }
        let (cx, cy) = cross_attention(&x, &y, &w).unwrap();
        for (a, b) in cx.features.iter().zip(x.features.iter()) {
            assert!((a - b - HALF_LN2).abs() < 1e-12);
        }
        for (a, b) in cy.features.iter().zip(y.features.iter()) {
            assert!((a - b - HALF_LN2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_neighbor_is_the_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        let wf = Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
        let ws = Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
        let graph = vec![vec![1], vec![2], vec![0]];
        let out = cgconv(f.view(), &graph, f.view(), wf.view(), ws.view()).unwrap();
        for i in 0..3 {
            let j = graph[i][0];
            let z = ndarray::concatenate![ndarray::Axis(0), f.row(i), f.row(j)];
            let a = z.dot(&wf);
            let sv = z.dot(&ws);
            for c in 0..2 {
                let want = f[(i, c)] + sigmoid(a[c]) * softplus(sv[c]);
                assert!((out[(i, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_set(&mut rng, 30, 6);
        let w = AttentionWeights::init(6, 5, &mut rng);
        let out = self_attention(&x, &w).unwrap();
        assert!(out.features.iter().zip(x.features.iter()).all(|(a, b)| a >= b));
    }

    #[test]
    fn dominant_target_is_everyones_neighbor() {
        let n = 12;
        let mut fx = Array2::zeros((n, n + 1));
        for i in 0..n {
            fx[(i, i)] = 1.0;
            fx[(i, n)] = 1.0;
        }
        // target rows are orthogonal to every source row except row 5, which shares the last axis
        let mut fy = Array2::zeros((n, n + 1));
        for j in 0..n {
            if j == 5 {
                fy[(j, n)] = 1.0;
            } else {
                fy[(j, (j + 1) % n)] = 0.0;
            }
        }
        let g = cross_graph(fx.view(), fy.view(), 3).unwrap();
        assert!(g.iter().all(|nb| nb[0] == 5));
    }

    #[test]
    fn cross_requires_k_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_set(&mut rng, 10, 4);
        let y = random_set(&mut rng, 3, 4);
        assert!(cross_attention(&x, &y, &AttentionWeights::zeros(4, 5)).is_err());
        assert!(self_attention(&y, &AttentionWeights::zeros(4, 3)).is_err());
    }

    #[test]
    fn self_attention_ignores_the_other_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_set(&mut rng, 20, 4);
        let w = AttentionWeights::init(4, 3, &mut rng);
        let a = self_attention(&x, &w).unwrap();
        let _ = random_set(&mut rng, 20, 4);
        let b = self_attention(&x, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_set(&mut rng, 10, 3);
        let y = random_set(&mut rng, 10, 3);
        let w = AttentionWeights::init(3, 3, &mut rng);
        let probe_x = Array2::from_shape_simple_fn((10, 3), || rng.random_range(-1.0..1.0));
        let probe_y = Array2::from_shape_simple_fn((10, 3), || rng.random_range(-1.0..1.0));
        let loss = |w: &AttentionWeights, x: &KeyPointSet, y: &KeyPointSet| {
            let (a, b) = attend(x, y, w).unwrap();
            (&a.features * &probe_x).sum() + (&b.features * &probe_y).sum()
        };
        let (_, _, trace) = attend_trace(&x, &y, &w).unwrap();
        let mut grad = AttentionWeights::zeros(3, 3);
        let (dfx, _) = attend_backward(&w, &trace, probe_x.view(), probe_y.view(), &mut grad);
        let h = 1e-6;
        for idx in 0..w.self_wf.len() {
            let mut p = w.clone();
            let mut m = w.clone();
            p.self_wf.as_slice_mut().unwrap()[idx] += h;
            m.self_wf.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&p, &x, &y) - loss(&m, &x, &y)) / (2.0 * h);
            assert!((fd - grad.self_wf.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        for idx in 0..w.cross_ws.len() {
            let mut p = w.clone();
            let mut m = w.clone();
            p.cross_ws.as_slice_mut().unwrap()[idx] += h;
            m.cross_ws.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&p, &x, &y) - loss(&m, &x, &y)) / (2.0 * h);
            assert!((fd - grad.cross_ws.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        for idx in 0..x.features.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.features.as_slice_mut().unwrap()[idx] += h;
            m.features.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&w, &p, &y) - loss(&w, &m, &y)) / (2.0 * h);
            assert!((fd - dfx.as_slice().unwrap()[idx]).abs() < 1e-6, "feature {idx}");
        }
    }
}
