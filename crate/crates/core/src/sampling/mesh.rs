use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// An indexed triangle soup. Meshes need not be watertight and may contain
/// internal structure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::invalid(format!(
                "triangle {t:?} references a vertex beyond {n}"
            )));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertex"));
        }
        Ok(TriMesh {
            vertices,
            triangles,
        })
    }

    #[inline]
    pub fn triangle(&self, i: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(c - a).norm()
    }

    /// Axis-aligned cube centered at the origin, 8 vertices and 12 outward
    /// facing triangles.
    pub fn cube(half: f64) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            let s = |bit: usize| if i & bit != 0 { half } else { -half };
            vertices.push(Point3::new(s(1), s(2), s(4)));
        }
        let quads: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriMesh {
            vertices,
            triangles,
        }
    }

    /// Unit icosphere: an icosahedron subdivided `subdivisions` times with
    /// every vertex projected onto the unit sphere.
    pub fn icosphere(subdivisions: u32) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Point3::new(x, y, z).normalized())
        .collect();
        let mut triangles: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
            let mut mid = |a: u32, b: u32, vertices: &mut Vec<Point3>| -> u32 {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    let m = ((vertices[a as usize] + vertices[b as usize]) * 0.5).normalized();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for [a, b, c] in triangles {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            triangles = next;
        }
        TriMesh {
            vertices,
            triangles,
        }
    }

    /// Serializes as ASCII OBJ (1-based indices).
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

fn parse_index(token: &str, n_vertices: usize, line: usize) -> Result<u32> {
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad face index `{token}`"),
    })?;
    let resolved = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        n_vertices as i64 + raw
    } else {
        -1
    };
    if resolved < 0 || resolved as usize >= n_vertices {
        return Err(Error::Parse {
            line,
            message: format!("face index {raw} out of range ({n_vertices} vertices so far)"),
        });
    }
    Ok(resolved as u32)
}

/// Parses ASCII OBJ `v`/`f` records. Polygons with more than three vertices
/// are fan-triangulated; other record types are ignored.
pub fn load_mesh(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            message: format!("bad vertex coordinate `{t}`"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line,
                        message: "vertex record needs 3 coordinates".into(),
                    });
                }
                let v = Point3::new(coords[0], coords[1], coords[2]);
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite vertex".into(),
                    });
                }
                vertices.push(v);
            }
            Some("f") => {
                let idx: Vec<u32> = tokens
                    .map(|t| parse_index(t, vertices.len(), line))
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::Parse {
                        line,
                        message: format!("face with {} vertices", idx.len()),
                    });
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles)
}

/// Rigid-plus-scale transform applied by [`normalize_to_unit_sphere`]:
/// `normalized = (original - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeTransform {
    pub scale: f64,
    pub offset: Point3,
}

impl NormalizeTransform {
    pub fn apply(&self, p: Point3) -> Point3 {
        (p - self.offset) * self.scale
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        p / self.scale + self.offset
    }
}

/// Centers the bounding box at the origin and scales so the farthest vertex
/// lies on the unit sphere.
pub fn normalize_to_unit_sphere(mesh: &TriMesh) -> Result<(TriMesh, NormalizeTransform)> {
    let first = *mesh
        .vertices
        .first()
        .ok_or_else(|| Error::invalid("cannot normalize an empty mesh"))?;
    let (lo, hi) = mesh
        .vertices
        .iter()
        .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let offset = (lo + hi) * 0.5;
    let radius = mesh
        .vertices
        .iter()
        .map(|&v| (v - offset).norm())
        .fold(0.0, f64::max);
    if radius <= 0.0 {
        return Err(Error::invalid("mesh has zero extent"));
    }
    let transform = NormalizeTransform {
        scale: 1.0 / radius,
        offset,
    };
    let vertices = mesh.vertices.iter().map(|&v| transform.apply(v)).collect();
    Ok((
        TriMesh {
            vertices,
            triangles: mesh.triangles.clone(),
        },
        transform,
    ))
}

/// Squared distance from `p` to triangle `abc` (closest-point by Voronoi
/// region, after Ericson's "Real-Time Collision Detection").
pub fn point_triangle_distance_squared(p: Point3, a: Point3, b: Point3, c: Point3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm_squared();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm_squared();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm_squared();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm_squared();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm_squared();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm_squared();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm_squared()
}

/// Unsigned distance by looping over every triangle. Reference path for the
/// accelerated query.
pub fn point_mesh_distance_brute_force(p: Point3, mesh: &TriMesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|i| {
            let [a, b, c] = mesh.triangle(i);
            point_triangle_distance_squared(p, a, b, c)
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}
