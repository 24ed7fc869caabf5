//! Softmax matching of refined key-point features and hard correspondence extraction.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Rows scaled to unit Euclidean norm; zero rows stay zero. Also returns the norms.
pub fn normalize_rows(f: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = f.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut u = f.to_owned();
    for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (u, norms)
}

/// In-place row softmax with max subtraction.
fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Cached values of [`match_probability_map`] for backpropagation.
#[derive(Debug, Clone)]
pub struct MatchTrace {
    pub ux: Array2<f64>,
    pub uy: Array2<f64>,
    pub nx: Array1<f64>,
    pub ny: Array1<f64>,
    pub temperature: f64,
}

/// `φ = softmax_rows(ûx ûyᵀ / T)` over unit-normalized feature rows.
pub fn match_probability_map(fx: ArrayView2<f64>, fy: ArrayView2<f64>, temperature: f64) -> Result<Array2<f64>> {
    Ok(match_trace(fx, fy, temperature)?.0)
}

pub fn match_trace(fx: ArrayView2<f64>, fy: ArrayView2<f64>, temperature: f64) -> Result<(Array2<f64>, MatchTrace)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if fx.ncols() != fy.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "source features have dim {}, target {}",
            fx.ncols(),
            fy.ncols()
        )));
    }
    if fx.iter().chain(fy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features contain non-finite values".into()));
    }
    let (ux, nx) = normalize_rows(fx);
    let (uy, ny) = normalize_rows(fy);
    let mut phi = ux.dot(&uy.t());
    phi /= temperature;
    softmax_rows(&mut phi);
    Ok((
        phi,
        MatchTrace {
            ux,
            uy,
            nx,
            ny,
            temperature,
        },
    ))
}

/// Gradient through the row normalization: `(du − u (u·du)) / ‖f‖`, zero for zero rows.
fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, mut du: Array2<f64>) -> Array2<f64> {
    for ((mut g, ur), &n) in du.rows_mut().into_iter().zip(u.rows()).zip(norms) {
        if n > 0.0 {
            let proj = ur.dot(&g);
            Zip::from(&mut g).and(&ur).for_each(|g, &u| *g = (*g - u * proj) / n);
        } else {
            g.fill(0.0);
        }
    }
    du
}

/// Backpropagates `d_phi` to the raw source and target features.
pub fn match_backward(phi: &Array2<f64>, trace: &MatchTrace, d_phi: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    // softmax: dS = φ ⊙ (dφ − Σⱼ φ dφ)
    let mut d_s = Array2::zeros(phi.raw_dim());
    for ((mut ds, p), dp) in d_s.rows_mut().into_iter().zip(phi.rows()).zip(d_phi.rows()) {
        let inner = p.dot(&dp);
        Zip::from(&mut ds).and(&p).and(&dp).for_each(|ds, &p, &dp| *ds = p * (dp - inner));
    }
    d_s /= trace.temperature;
    let d_ux = d_s.dot(&trace.uy);
    let d_uy = d_s.t().dot(&trace.ux);
    (
        normalize_backward(&trace.ux, &trace.nx, d_ux),
        normalize_backward(&trace.uy, &trace.ny, d_uy),
    )
}

/// Hard matches: every source key point paired with its most probable target key point.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
    pub indices: Vec<usize>,
    pub peak: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Row-wise argmax of `φ` (lowest index on ties).
pub fn extract_correspondences(phi: ArrayView2<f64>, x: &[Vec3], y: &[Vec3]) -> Result<CorrespondenceSet> {
    if phi.dim() != (x.len(), y.len()) {
        return Err(Error::ShapeMismatch(format!(
            "map is {:?} for {} source and {} target points",
            phi.dim(),
            x.len(),
            y.len()
        )));
    }
    let mut indices = Vec::with_capacity(x.len());
    let mut peak = Vec::with_capacity(x.len());
    for row in phi.rows() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        indices.push(best);
        peak.push(row[best]);
    }
    Ok(CorrespondenceSet {
        source: x.to_vec(),
        target: indices.iter().map(|&j| y[j]).collect(),
        indices,
        peak,
    })
}
