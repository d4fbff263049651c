//! Bounding-volume hierarchy over mesh triangles for closest-point and
//! ray-crossing queries.

use super::mesh::{point_triangle_distance_squared, TriMesh};
use crate::geometry::Point3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3,
    hi: Point3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            hi: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: Point3) {
        self.lo = self.lo.min(p);
        self.hi = self.hi.max(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.lo = self.lo.min(o.lo);
        self.hi = self.hi.max(o.hi);
    }

    fn distance_squared(&self, p: Point3) -> f64 {
        let dx = (self.lo.x - p.x).max(0.0).max(p.x - self.hi.x);
        let dy = (self.lo.y - p.y).max(0.0).max(p.y - self.hi.y);
        let dz = (self.lo.z - p.z).max(0.0).max(p.z - self.hi.z);
        dx * dx + dy * dy + dz * dz
    }

    /// Slab test for the half-line `origin + t * dir`, `t >= 0`.
    fn hit_by_ray(&self, origin: Point3, inv_dir: Point3) -> bool {
        let mut t0: f64 = 0.0;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let (o, inv, lo, hi) = (origin[axis], inv_dir[axis], self.lo[axis], self.hi[axis]);
            if inv.is_infinite() {
                if o < lo || o > hi {
                    return false;
                }
                continue;
            }
            let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 * (1.0 + 1e-12) + 1e-12 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Outcome of intersecting a half-line with one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct RayHit {
    pub t: f64,
    /// The hit lies within the edge tolerance of a triangle edge or vertex.
    pub near_edge: bool,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Point3; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let tris: Vec<[Point3; 3]> = (0..mesh.triangles.len()).map(|i| mesh.triangle(i)).collect();
        let centroids: Vec<Point3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Bvh { nodes, order, tris }
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    /// Exact squared distance to the closest triangle; `INFINITY` for an
    /// empty mesh.
    pub fn nearest_distance_squared(&self, p: Point3) -> f64 {
        let mut best = f64::INFINITY;
        if self.nodes.is_empty() {
            return best;
        }
        let mut stack: Vec<(usize, f64)> = vec![(0, self.nodes[0].bounds().distance_squared(p))];
        while let Some((idx, box_d2)) = stack.pop() {
            if box_d2 > best {
                continue;
            }
            match &self.nodes[idx] {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[*start..*end] {
                        let [a, b, c] = self.tris[t as usize];
                        best = best.min(point_triangle_distance_squared(p, a, b, c));
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance_squared(p);
                    let dr = self.nodes[*right].bounds().distance_squared(p);
                    // Visit the nearer child first (pushed last).
                    if dl <= dr {
                        stack.push((*right, dr));
                        stack.push((*left, dl));
                    } else {
                        stack.push((*left, dl));
                        stack.push((*right, dr));
                    }
                }
            }
        }
        best
    }

    /// All crossings of the half-line `origin + t * dir` (`t > 0`) with the
    /// mesh, in traversal order.
    pub(crate) fn ray_hits(&self, origin: Point3, dir: Point3, edge_tol: f64, out: &mut Vec<RayHit>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let inv = Point3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if !node.bounds().hit_by_ray(origin, inv) {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[*start..*end] {
                        if let Some(hit) = ray_triangle(origin, dir, &self.tris[t as usize], edge_tol) {
                            out.push(hit);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
    }
}

fn build_node(
    tris: &[[Point3; 3]],
    centroids: &[Point3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &t in &order[start..end] {
        for v in tris[t as usize] {
            bounds.grow(v);
        }
        cbounds.grow(centroids[t as usize]);
    }
    let idx = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return idx;
    }
    let extent = cbounds.hi - cbounds.lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].sort_by(|&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node::Leaf {
        bounds,
        start,
        end,
    });
    let left = build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, mid, end, nodes);
    let mut merged = *nodes[left].bounds();
    merged.merge(nodes[right].bounds());
    nodes[idx] = Node::Inner {
        bounds: merged,
        left,
        right,
    };
    idx
}

/// Möller–Trumbore intersection restricted to `t > 0`.
fn ray_triangle(origin: Point3, dir: Point3, tri: &[Point3; 3], edge_tol: f64) -> Option<RayHit> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(e2);
    let det = e1.dot(pvec);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - tri[0];
    let u = tvec.dot(pvec) * inv_det;
    if u < -edge_tol || u > 1.0 + edge_tol {
        return None;
    }
    let qvec = tvec.cross(e1);
    let v = dir.dot(qvec) * inv_det;
    if v < -edge_tol || u + v > 1.0 + edge_tol {
        return None;
    }
    let t = e2.dot(qvec) * inv_det;
    if t <= 0.0 {
        return None;
    }
    let w = 1.0 - u - v;
    let near_edge = u.abs() <= edge_tol || v.abs() <= edge_tol || w.abs() <= edge_tol;
    Some(RayHit { t, near_edge })
}
