//! Spatial queries: uniform-grid index, farthest point sampling, radius and k-NN search.
//!
//! Every query resolves ties by the lowest point index so results are
//! reproducible regardless of traversal order or thread count.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Below this many indexed points, queries fall back to an exhaustive scan.
pub const BRUTE_FORCE_BELOW: usize = 1000;

/// Default cap on radius-neighborhood size.
pub const DEFAULT_MAX_NEIGHBORS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Smallest Euclidean distance first.
    Euclidean,
    /// Largest dot product first.
    DotProduct,
}

#[inline]
fn cmp_candidates(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Uniform grid over a borrowed point set.
pub struct GridIndex<'a> {
    points: &'a [Vec3],
    inv_cell: f64,
    cell: f64,
    cells: HashMap<[i64; 3], (u32, u32)>,
    order: Vec<u32>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell size must be positive");
        let inv_cell = 1.0 / cell;
        let key = |p: &Vec3| -> [i64; 3] {
            [
                (p.x * inv_cell).floor() as i64,
                (p.y * inv_cell).floor() as i64,
                (p.z * inv_cell).floor() as i64,
            ]
        };
        let mut keyed: Vec<([i64; 3], u32)> =
            points.iter().enumerate().map(|(i, p)| (key(p), i as u32)).collect();
        keyed.sort_unstable();
        let mut cells = HashMap::new();
        let mut order = Vec::with_capacity(keyed.len());
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        let mut start = 0usize;
        while start < keyed.len() {
            let k = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == k {
                order.push(keyed[end].1);
                end += 1;
            }
            for d in 0..3 {
                lo[d] = lo[d].min(k[d]);
                hi[d] = hi[d].max(k[d]);
            }
            cells.insert(k, (start as u32, end as u32));
            start = end;
        }
        Self {
            points,
            inv_cell,
            cell,
            cells,
            order,
            lo,
            hi,
        }
    }

    /// Grid sized for k-NN queries: the cell edge approximates the expected k-NN radius.
    pub fn for_knn(points: &'a [Vec3], k: usize) -> Self {
        let (mut lo, mut hi) = (Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN));
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = (hi - lo).map(|e| e.max(1e-3));
        let n = points.len().max(1) as f64;
        let cell = (ext.x * ext.y * ext.z * k.max(1) as f64 / n).cbrt().max(1e-3);
        Self::new(points, cell)
    }

    pub fn points(&self) -> &'a [Vec3] {
        self.points
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        [
            (p.x * self.inv_cell).floor() as i64,
            (p.y * self.inv_cell).floor() as i64,
            (p.z * self.inv_cell).floor() as i64,
        ]
    }

    fn cell_points(&self, key: &[i64; 3]) -> &[u32] {
        match self.cells.get(key) {
            Some(&(s, e)) => &self.order[s as usize..e as usize],
            None => &[],
        }
    }

    fn for_each_in_box(&self, q: &Vec3, r: f64, mut f: impl FnMut(usize)) {
        let a = self.key(&(q - Vec3::repeat(r)));
        let b = self.key(&(q + Vec3::repeat(r)));
        let lo = [a[0].max(self.lo[0]), a[1].max(self.lo[1]), a[2].max(self.lo[2])];
        let hi = [b[0].min(self.hi[0]), b[1].min(self.hi[1]), b[2].min(self.hi[2])];
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    for &i in self.cell_points(&[x, y, z]) {
                        f(i as usize);
                    }
                }
            }
        }
    }

    /// `(squared distance, index)` of every point with distance ≤ `r`, unsorted.
    pub fn within(&self, q: &Vec3, r: f64) -> Vec<(f64, usize)> {
        let r2 = r * r;
        let mut out = Vec::new();
        self.for_each_in_box(q, r, |i| {
            let d2 = (self.points[i] - q).norm_squared();
            if d2 <= r2 {
                out.push((d2, i));
            }
        });
        out
    }

    /// True if some point lies strictly closer than `r`.
    pub fn any_within(&self, q: &Vec3, r: f64) -> bool {
        let r2 = r * r;
        let a = self.key(&(q - Vec3::repeat(r)));
        let b = self.key(&(q + Vec3::repeat(r)));
        for x in a[0].max(self.lo[0])..=b[0].min(self.hi[0]) {
            for y in a[1].max(self.lo[1])..=b[1].min(self.hi[1]) {
                for z in a[2].max(self.lo[2])..=b[2].min(self.hi[2]) {
                    if self
                        .cell_points(&[x, y, z])
                        .iter()
                        .any(|&i| (self.points[i as usize] - q).norm_squared() < r2)
                    {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Nearest point with distance ≤ `r`, as `(index, distance)`.
    pub fn nearest_within(&self, q: &Vec3, r: f64) -> Option<(usize, f64)> {
        let r2 = r * r;
        let mut best: Option<(f64, usize)> = None;
        self.for_each_in_box(q, r, |i| {
            let d2 = (self.points[i] - q).norm_squared();
            if d2 <= r2 && best.is_none_or(|b| cmp_candidates(&(d2, i), &b) == Ordering::Less) {
                best = Some((d2, i));
            }
        });
        best.map(|(d2, i)| (i, d2.sqrt()))
    }

    /// The `k` nearest points as `(index, distance)`, nearest first.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let c = self.key(q);
        let mut found: Vec<(f64, usize)> = Vec::new();
        let max_ring = (0..3)
            .map(|d| (c[d] - self.lo[d]).abs().max((self.hi[d] - c[d]).abs()))
            .max()
            .unwrap_or(0);
        let mut ring: i64 = 0;
        loop {
            for x in c[0] - ring..=c[0] + ring {
                for y in c[1] - ring..=c[1] + ring {
                    for z in c[2] - ring..=c[2] + ring {
                        let on_shell = (x - c[0]).abs() == ring
                            || (y - c[1]).abs() == ring
                            || (z - c[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        for &i in self.cell_points(&[x, y, z]) {
                            let i = i as usize;
                            found.push(((self.points[i] - q).norm_squared(), i));
                        }
                    }
                }
            }
            if found.len() >= k {
                found.select_nth_unstable_by(k - 1, cmp_candidates);
                found.truncate(k);
                // anything outside the scanned block is at least ring * cell away
                let bound = ring as f64 * self.cell;
                if found[k - 1].0 < bound * bound {
                    break;
                }
            }
            if ring >= max_ring {
                break;
            }
            ring += 1;
        }
        found.sort_unstable_by(cmp_candidates);
        found.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }
}

/// Greedy farthest point sampling starting at `seed_index`.
///
/// Each step selects the point maximizing the minimum distance to the points
/// already selected; ties go to the lowest index.
pub fn farthest_point_sample(coords: &[Vec3], n: usize, seed_index: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if n > coords.len() {
        return Err(Error::InsufficientPoints {
            needed: n,
            available: coords.len(),
        });
    }
    if seed_index >= coords.len() {
        return Err(Error::InvalidArgument(format!(
            "seed index {seed_index} out of range for {} points",
            coords.len()
        )));
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; coords.len()];
    let mut current = seed_index;
    selected.push(current);
    min_d2[current] = f64::NEG_INFINITY;
    while selected.len() < n {
        let c = coords[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, (p, m)) in coords.iter().zip(min_d2.iter_mut()).enumerate() {
            if *m == f64::NEG_INFINITY {
                continue;
            }
            let d2 = (p - c).norm_squared();
            if d2 < *m {
                *m = d2;
            }
            if *m > best_d2 {
                best_d2 = *m;
                best = i;
            }
        }
        current = best;
        min_d2[current] = f64::NEG_INFINITY;
        selected.push(current);
    }
    Ok(selected)
}

/// Indices of points within distance `r` of each query (inclusive), nearest first,
/// truncated to `max_neighbors`.
pub fn radius_neighbors(
    queries: &[Vec3],
    points: &[Vec3],
    r: f64,
    max_neighbors: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
    }
    let finish = |mut cand: Vec<(f64, usize)>| -> Vec<usize> {
        cand.sort_unstable_by(cmp_candidates);
        cand.truncate(max_neighbors);
        cand.into_iter().map(|(_, i)| i).collect()
    };
    if points.len() < BRUTE_FORCE_BELOW {
        let r2 = r * r;
        return Ok(queries
            .par_iter()
            .map(|q| {
                let cand = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p - q).norm_squared(), i))
                    .filter(|&(d2, _)| d2 <= r2)
                    .collect();
                finish(cand)
            })
            .collect());
    }
    let grid = GridIndex::new(points, r);
    Ok(queries.par_iter().map(|q| finish(grid.within(q, r))).collect())
}

/// k nearest 3D points per query as `(index, distance)`, nearest first.
pub fn knn_points(queries: &[Vec3], points: &[Vec3], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if k > points.len() {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: points.len(),
        });
    }
    if points.len() < BRUTE_FORCE_BELOW {
        return Ok(queries
            .par_iter()
            .map(|q| {
                let mut cand: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p - q).norm_squared(), i))
                    .collect();
                top_k(&mut cand, k);
                cand.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
            })
            .collect());
    }
    let grid = GridIndex::for_knn(points, k);
    Ok(queries.par_iter().map(|q| grid.knn(q, k)).collect())
}

/// Spatial k-NN graph over `points` with self-edges removed.
pub fn knn_graph(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k + 1 > points.len() {
        return Err(Error::InsufficientPoints {
            needed: k + 1,
            available: points.len(),
        });
    }
    let lists = knn_points(points, points, k + 1)?;
    Ok(lists
        .into_iter()
        .enumerate()
        .map(|(i, list)| {
            let mut ids: Vec<usize> = list.into_iter().map(|(j, _)| j).filter(|&j| j != i).collect();
            ids.truncate(k);
            ids
        })
        .collect())
}

/// Exhaustive k-NN between row vectors of equal dimension, best first.
pub fn knn(
    queries: ArrayView2<f64>,
    points: ArrayView2<f64>,
    k: usize,
    metric: Metric,
) -> Result<Vec<Vec<usize>>> {
    if queries.ncols() != points.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query dimension {} vs point dimension {}",
            queries.ncols(),
            points.ncols()
        )));
    }
    if k > points.nrows() {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: points.nrows(),
        });
    }
    let rows: Vec<usize> = (0..queries.nrows()).collect();
    Ok(rows
        .par_iter()
        .map(|&qi| {
            let q = queries.row(qi);
            let mut cand: Vec<(f64, usize)> = points
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let score = match metric {
                        Metric::Euclidean => {
                            q.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                        }
                        Metric::DotProduct => -q.dot(&p),
                    };
                    (score, i)
                })
                .collect();
            top_k(&mut cand, k);
            cand.into_iter().map(|(_, i)| i).collect()
        })
        .collect())
}

fn top_k(cand: &mut Vec<(f64, usize)>, k: usize) {
    if k == 0 {
        cand.clear();
        return;
    }
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, cmp_candidates);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp_candidates);
}
