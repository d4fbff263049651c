//! Marching cubes over a regular grid of field samples.

use std::collections::HashMap;

use super::tables::{EDGE_TABLE, TRIANGLE_TABLE};
use super::SdfField;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::sampling::TriMesh;

pub const DEFAULT_MC_BOUNDS: (f64, f64) = (-1.1, 1.1);

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Extracts the zero level set on a `resolution`³ cell grid spanning
/// `bounds` on every axis. Edge vertices are shared between neighbouring
/// cells; triangles wind counter-clockwise seen from outside.
pub fn marching_cubes<S: SdfField + ?Sized>(field: &S, resolution: usize, bounds: (f64, f64)) -> Result<TriMesh> {
    if resolution < 8 {
        return Err(Error::invalid(format!("marching cubes resolution {resolution} below 8")));
    }
    let (lo, hi) = bounds;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::invalid(format!("invalid bounds [{lo}, {hi}]")));
    }
    let n = resolution + 1;
    let cell = (hi - lo) / resolution as f64;
    let coord = |i: usize| lo + i as f64 * cell;

    let mut values = vec![0.0; n * n * n];
    let mut slice = Vec::with_capacity(n * n);
    for k in 0..n {
        slice.clear();
        for j in 0..n {
            for i in 0..n {
                slice.push(Point3::new(coord(i), coord(j), coord(k)));
            }
        }
        field.eval_batch(&slice, &mut values[k * n * n..(k + 1) * n * n]);
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("field returned {bad} during extraction")));
    }
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;

    let mut vertices: Vec<Point3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // (lower grid vertex, axis) -> mesh vertex
    let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();

    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let corner_ids: [usize; 8] = CORNERS.map(|c| idx(i + c[0], j + c[1], k + c[2]));
                let mut case = 0usize;
                for (b, &id) in corner_ids.iter().enumerate() {
                    if values[id] < 0.0 {
                        case |= 1 << b;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for (e, &(a, b)) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = (CORNERS[a], CORNERS[b]);
                    let (lo_c, axis) = if ca <= cb {
                        (ca, axis_of(ca, cb))
                    } else {
                        (cb, axis_of(ca, cb))
                    };
                    let key = (idx(i + lo_c[0], j + lo_c[1], k + lo_c[2]), axis);
                    local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (values[corner_ids[a]], values[corner_ids[b]]);
                        let pa = Point3::new(coord(i + ca[0]), coord(j + ca[1]), coord(k + ca[2]));
                        let pb = Point3::new(coord(i + cb[0]), coord(j + cb[1]), coord(k + cb[2]));
                        let t = if va == vb { 0.5 } else { (va / (va - vb)).clamp(0.0, 1.0) };
                        vertices.push(pa + (pb - pa) * t);
                        (vertices.len() - 1) as u32
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let [a, b, c] = [local[tri[0] as usize], local[tri[1] as usize], local[tri[2] as usize]];
                    if a == b || b == c || a == c {
                        continue;
                    }
                    triangles.push([a, c, b]);
                }
            }
        }
    }
    TriMesh::new(vertices, triangles)
}

fn axis_of(a: [usize; 3], b: [usize; 3]) -> u8 {
    (0..3).find(|&d| a[d] != b[d]).unwrap() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signed_volume(m: &TriMesh) -> f64 {
        (0..m.triangles.len())
            .map(|i| {
                let [a, b, c] = m.triangle(i);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    #[test]
    fn unit_sphere_vertices_are_near_radius_one() {
        let res = 64;
        let m = marching_cubes(&|p: Point3| p.norm() - 1.0, res, DEFAULT_MC_BOUNDS).unwrap();
        let cell = 2.2 / res as f64;
        assert!(!m.triangles.is_empty());
        for v in &m.vertices {
            assert!((v.norm() - 1.0).abs() <= 1.5 * cell);
        }
        let vol = signed_volume(&m);
        assert!((vol - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.05, "volume {vol}");
    }

    #[test]
    fn closed_surface_has_every_edge_shared_twice() {
        let m = marching_cubes(&|p: Point3| (p - Point3::new(0.1, -0.05, 0.2)).norm() - 0.6, 24, DEFAULT_MC_BOUNDS).unwrap();
        let mut count: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &m.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *count.entry((a, b)).or_default() += 1;
                *count.entry((b, a)).or_default() -= 1;
            }
        }
        // Consistent winding: every directed edge is cancelled by its reverse.
        assert!(count.values().all(|&c| c == 0));
    }

    #[test]
    fn positive_field_yields_empty_mesh() {
        let m = marching_cubes(&|_: Point3| 1.0, 8, DEFAULT_MC_BOUNDS).unwrap();
        assert!(m.vertices.is_empty() && m.triangles.is_empty());
        assert!(marching_cubes(&|_: Point3| 1.0, 7, DEFAULT_MC_BOUNDS).is_err());
    }

    #[test]
    fn residual_is_bounded_by_the_cell_diagonal() {
        let f = |p: Point3| {
            let q = Point3::new(p.x.abs() - 0.5, p.y.abs() - 0.3, p.z.abs() - 0.4);
            q.max(Point3::ZERO).norm() + q.x.max(q.y).max(q.z).min(0.0)
        };
        let res = 20;
        let m = marching_cubes(&f, res, DEFAULT_MC_BOUNDS).unwrap();
        let diag = 2.2 / res as f64 * 3f64.sqrt();
        assert!(m.vertices.iter().all(|&v| f(v).abs() <= diag));
    }

    #[test]
    fn translation_shifts_vertices() {
        // Shift by whole cells so both runs sample the same lattice.
        let res = 22;
        let cell = 2.2 / res as f64;
        let shift = Point3::new(2.0 * cell, -cell, 3.0 * cell);
        let base = marching_cubes(&|p: Point3| p.norm() - 0.53, res, DEFAULT_MC_BOUNDS).unwrap();
        let moved = marching_cubes(&|p: Point3| (p - shift).norm() - 0.53, res, DEFAULT_MC_BOUNDS).unwrap();
        assert_eq!(base.vertices.len(), moved.vertices.len());
        let mut a: Vec<Point3> = base.vertices.iter().map(|&v| v + shift).collect();
        let mut b = moved.vertices.clone();
        let key = |p: &Point3| (p.x * 1e6).round() as i64 * 1_000_000_000_000 + (p.y * 1e6).round() as i64 * 1_000_000 + (p.z * 1e6).round() as i64;
        a.sort_by_key(key);
        b.sort_by_key(key);
        for (p, q) in a.iter().zip(&b) {
            assert!(p.distance(*q) < 1e-9);
        }
    }
}
