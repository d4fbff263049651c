//! Shape comparison metrics: Chamfer distance, earth mover's distance, mesh
//! accuracy, volumetric IoU and per-primitive semantic consistency.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PrimitiveSet};
use crate::render::SdfField;
use crate::sampling::{MeshSdf, TriMesh};

/// Largest set size accepted by [`emd`].
pub const EMD_MAX_POINTS: usize = 2048;
/// Default grid bounds for occupancy; contains the unit ball.
pub const IOU_BOUNDS: (f64, f64) = (-1.1, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MeshSurfaceSample,
    MarchingCubesSample,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Point3>,
    pub provenance: Provenance,
}

impl PointSet {
    pub fn new(points: Vec<Point3>, provenance: Provenance) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point set is empty"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("point set coordinate"));
        }
        Ok(PointSet { points, provenance })
    }

    pub fn raw(points: Vec<Point3>) -> Result<Self> {
        Self::new(points, Provenance::Raw)
    }
}

fn nearest_sq(p: Point3, set: &[Point3]) -> f64 {
    set.iter()
        .map(|&q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric Chamfer distance on squared nearest-neighbour distances:
/// half the mean over `a` plus half the mean over `b`.
pub fn chamfer(a: &PointSet, b: &PointSet) -> f64 {
    let one_way = |x: &[Point3], y: &[Point3]| x.iter().map(|&p| nearest_sq(p, y)).sum::<f64>() / x.len() as f64;
    0.5 * one_way(&a.points, &b.points) + 0.5 * one_way(&b.points, &a.points)
}

/// Minimum-cost perfect matching on a dense square cost matrix (row-major),
/// by shortest augmenting paths with potentials. Returns the column
/// assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Earth mover's distance between equal-size sets: the mean Euclidean
/// distance under the optimal one-to-one matching.
pub fn emd(a: &PointSet, b: &PointSet) -> Result<f64> {
    let n = a.points.len();
    if b.points.len() != n {
        return Err(Error::invalid(format!("EMD needs equal sizes, got {n} and {}", b.points.len())));
    }
    if n > EMD_MAX_POINTS {
        return Err(Error::invalid(format!("EMD limited to {EMD_MAX_POINTS} points, got {n}")));
    }
    let mut cost = Vec::with_capacity(n * n);
    for &p in &a.points {
        for &q in &b.points {
            cost.push(p.distance(q));
        }
    }
    let assignment = min_cost_assignment(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Smallest `d` such that a `quantile` fraction of `recon` lies within
/// unsigned distance `d` of the mesh.
pub fn mesh_accuracy(recon: &PointSet, gt: &TriMesh, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::invalid(format!("quantile {quantile} outside (0, 1]")));
    }
    if gt.triangles.is_empty() {
        return Err(Error::invalid("reference mesh has no triangles"));
    }
    let sdf = MeshSdf::new(gt);
    let mut d: Vec<f64> = recon.points.iter().map(|&p| sdf.unsigned_distance(p)).collect();
    d.sort_by(f64::total_cmp);
    let k = ((quantile * d.len() as f64).ceil() as usize).clamp(1, d.len());
    Ok(d[k - 1])
}

/// Inside/outside bits at the centres of a `resolution`³ grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub bounds: (u64, u64),
    pub bits: Vec<bool>,
}

impl OccupancyGrid {
    /// Occupancy (`sdf <= 0`) of `field` over `bounds` on every axis.
    pub fn sample<S: SdfField + ?Sized>(field: &S, resolution: usize, bounds: (f64, f64)) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        let (lo, hi) = bounds;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::invalid(format!("invalid bounds [{lo}, {hi}]")));
        }
        let cell = (hi - lo) / resolution as f64;
        let c = |i: usize| lo + (i as f64 + 0.5) * cell;
        let r = resolution;
        let mut bits = Vec::with_capacity(r * r * r);
        let mut slice = Vec::with_capacity(r * r);
        let mut values = vec![0.0; r * r];
        for k in 0..r {
            slice.clear();
            for j in 0..r {
                for i in 0..r {
                    slice.push(Point3::new(c(i), c(j), c(k)));
                }
            }
            field.eval_batch(&slice, &mut values);
            bits.extend(values.iter().map(|&v| v <= 0.0));
        }
        Ok(OccupancyGrid {
            resolution,
            bounds: (lo.to_bits(), hi.to_bits()),
            bits,
        })
    }

    pub fn occupied(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty grids count as identical.
    pub fn iou(&self, other: &OccupancyGrid) -> Result<f64> {
        if self.resolution != other.resolution || self.bounds != other.bounds {
            return Err(Error::invalid("occupancy grids cover different lattices"));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Volumetric IoU of two fields sampled at cell centres of a
/// `resolution`³ grid over `bounds`.
pub fn volumetric_iou<A, B>(a: &A, b: &B, resolution: usize, bounds: (f64, f64)) -> Result<f64>
where
    A: SdfField + ?Sized,
    B: SdfField + ?Sized,
{
    OccupancyGrid::sample(a, resolution, bounds)?.iou(&OccupancyGrid::sample(b, resolution, bounds)?)
}

/// Label of each primitive: the label of the labelled point with the
/// smallest signed distance to that primitive (lowest point index on ties).
pub fn primitive_labels(set: &PrimitiveSet, labelled: &[(Point3, String)]) -> Result<Vec<String>> {
    if labelled.is_empty() {
        return Err(Error::invalid("no labelled points"));
    }
    Ok(set
        .iter()
        .map(|attrs| {
            let prim = crate::geometry::Primitive {
                kind: set.kind(),
                attributes: attrs.to_vec(),
            };
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, (p, _)) in labelled.iter().enumerate() {
                let d = prim.sdf(*p);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            labelled[best].1.clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    /// `per_primitive[i][k - 1]` is the top-k score of primitive index `i`.
    pub per_primitive: Vec<[f64; 3]>,
    /// Means over primitives for k = 1, 2, 3.
    pub mean: [f64; 3],
}

/// For each primitive index, the fraction of shapes whose label for it is
/// among that index's k most frequent labels (ties broken by label order).
/// `labels[s][i]` is shape `s`'s label for primitive `i`.
pub fn semantic_consistency(labels: &[Vec<String>]) -> Result<ConsistencyScores> {
    let first = labels.first().ok_or_else(|| Error::invalid("no shapes"))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::invalid("shapes have no primitives"));
    }
    if labels.iter().any(|l| l.len() != n) {
        return Err(Error::invalid("shapes have different primitive counts"));
    }
    let m = labels.len() as f64;
    let per_primitive: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for shape in labels {
                *counts.entry(shape[i].as_str()).or_default() += 1;
            }
            let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let mut scores = [0.0; 3];
            let mut covered = 0;
            for (k, score) in scores.iter_mut().enumerate() {
                if let Some(&(_, c)) = ranked.get(k) {
                    covered += c;
                }
                *score = covered as f64 / m;
            }
            scores
        })
        .collect();
    let mut mean = [0.0; 3];
    for s in &per_primitive {
        for k in 0..3 {
            mean[k] += s[k] / n as f64;
        }
    }
    Ok(ConsistencyScores { per_primitive, mean })
}
