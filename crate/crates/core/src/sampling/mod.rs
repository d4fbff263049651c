//! Mesh ingestion, ground-truth signed distances and training sample sets.

mod bvh;
mod cache;
mod mesh;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use bvh::Bvh;
pub use cache::{read_sample_cache, read_sample_cache_file, write_sample_cache, write_sample_cache_file};
pub use mesh::{
    load_mesh, normalize_to_unit_sphere, point_mesh_distance_brute_force,
    point_triangle_distance_squared, NormalizeTransform, TriMesh,
};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::render::{sphere_trace, RenderSettings};

/// Hits closer than this to a triangle edge are re-cast with jitter.
const EDGE_TOLERANCE: f64 = 1e-9;
const JITTER: f64 = 1e-6;
const MAX_RETRIES: usize = 3;

/// Fraction of fine samples drawn uniformly in the ball; the rest are
/// perturbed surface points split evenly between the two noise levels.
pub const FINE_UNIFORM_FRACTION: f64 = 0.05;
pub const FINE_NOISE_STDS: [f64; 2] = [0.005, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Uniform in the unit ball; supervises the primitive decoder.
    CoarseUniform,
    /// Surface-biased with Gaussian perturbation; supervises the neural SDF.
    FineSurfaceBiased,
}

impl SamplingStrategy {
    pub(crate) fn code(self) -> u8 {
        match self {
            SamplingStrategy::CoarseUniform => 0,
            SamplingStrategy::FineSurfaceBiased => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(SamplingStrategy::CoarseUniform),
            1 => Ok(SamplingStrategy::FineSurfaceBiased),
            other => Err(Error::Format(format!("unknown sampling strategy code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub point: Point3,
    pub sdf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdfSampleSet {
    pub shape_id: String,
    pub strategy: SamplingStrategy,
    pub samples: Vec<SdfSample>,
}

impl SdfSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The 13 stabbing lines: 3 axes, 4 body diagonals and 6 face diagonals of
/// a cube, one direction per undirected line.
pub fn stabbing_directions() -> Vec<Point3> {
    let raw: [[f64; 3]; 13] = [
        [1., 0., 0.],
        [0., 1., 0.],
        [0., 0., 1.],
        [1., 1., 1.],
        [1., 1., -1.],
        [1., -1., 1.],
        [-1., 1., 1.],
        [1., 1., 0.],
        [1., -1., 0.],
        [1., 0., 1.],
        [1., 0., -1.],
        [0., 1., 1.],
        [0., 1., -1.],
    ];
    raw.iter().map(|&d| Point3::from(d).normalized()).collect()
}

/// A mesh prepared for signed-distance queries.
#[derive(Debug, Clone)]
pub struct MeshSdf {
    bvh: Bvh,
    directions: Vec<Point3>,
}

impl MeshSdf {
    pub fn new(mesh: &TriMesh) -> Self {
        MeshSdf {
            bvh: Bvh::build(mesh),
            directions: stabbing_directions(),
        }
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Exact unsigned distance to the surface.
    pub fn unsigned_distance(&self, p: Point3) -> f64 {
        self.bvh.nearest_distance_squared(p).sqrt()
    }

    /// `-1` inside, `+1` outside, by majority vote over stabbing lines.
    pub fn sign(&self, p: Point3) -> f64 {
        stab(&self.bvh, p, &self.directions)
    }

    pub fn signed_distance(&self, p: Point3) -> f64 {
        self.sign(p) * self.unsigned_distance(p)
    }
}

/// Exact unsigned point-to-mesh distance (BVH accelerated).
pub fn point_mesh_distance(p: Point3, mesh: &TriMesh) -> f64 {
    Bvh::build(mesh).nearest_distance_squared(p).sqrt()
}

/// Inside/outside by ray stabbing. Each direction defines a line through
/// `p`; the line votes "inside" when both half-lines cross the surface an
/// odd number of times. Returns `-1.0` (inside) when most lines vote inside.
pub fn sign_ray_stabbing(p: Point3, mesh: &TriMesh, directions: &[Point3]) -> Result<f64> {
    if directions.is_empty() || directions.len() % 2 == 0 {
        return Err(Error::invalid(format!(
            "ray stabbing needs an odd number of directions, got {}",
            directions.len()
        )));
    }
    if directions.iter().any(|d| (d.norm() - 1.0).abs() > 1e-9) {
        return Err(Error::invalid("stabbing directions must be unit vectors"));
    }
    check_point(p)?;
    Ok(stab(&Bvh::build(mesh), p, directions))
}

fn check_point(p: Point3) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("query point"))
    }
}

fn stab(bvh: &Bvh, p: Point3, directions: &[Point3]) -> f64 {
    let mut hits = Vec::new();
    let inside_votes = directions
        .iter()
        .enumerate()
        .filter(|&(i, &d)| {
            let forward = half_line_parity(bvh, p, d, i, &mut hits);
            let backward = half_line_parity(bvh, p, -d, i, &mut hits);
            forward && backward
        })
        .count();
    if 2 * inside_votes > directions.len() {
        -1.0
    } else {
        1.0
    }
}

/// Parity (odd = `true`) of crossings along a half-line. Near-edge hits are
/// re-cast with a small deterministic jitter of the direction; after the
/// retry budget they are counted as crossings.
fn half_line_parity(bvh: &Bvh, p: Point3, dir: Point3, line: usize, hits: &mut Vec<bvh::RayHit>) -> bool {
    let mut d = dir;
    for attempt in 0..=MAX_RETRIES {
        bvh.ray_hits(p, d, EDGE_TOLERANCE, hits);
        if attempt == MAX_RETRIES || !hits.iter().any(|h| h.near_edge) {
            return hits.len() % 2 == 1;
        }
        d = (dir + jitter_offset(line, attempt)).normalized();
    }
    unreachable!()
}

fn jitter_offset(line: usize, attempt: usize) -> Point3 {
    // Fixed irrational-ish pattern so reruns are bit-identical.
    let k = (line * 7 + attempt * 3 + 1) as f64;
    Point3::new((k * 0.618_034).sin(), (k * 1.414_214).cos(), (k * 2.718_282).sin()) * JITTER
}

/// Uniform point in the unit ball.
fn uniform_in_ball(rng: &mut impl Rng) -> Point3 {
    loop {
        let p = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm_squared() <= 1.0 {
            return p;
        }
    }
}

fn gaussian_offset(rng: &mut impl Rng, std: f64) -> Point3 {
    let normal = Normal::new(0.0, std).expect("positive std");
    Point3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
}

/// Stratum sizes for `n` fine samples: (low-noise, high-noise, uniform).
pub fn fine_strata(n: usize) -> (usize, usize, usize) {
    let uniform = (n as f64 * FINE_UNIFORM_FRACTION).round() as usize;
    let surface = n - uniform;
    let low = surface / 2;
    (low, surface - low, uniform)
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid("sample count must be positive"))
    } else {
        Ok(())
    }
}

/// `n` points uniform in the unit ball with mesh signed distances.
pub fn sample_sdf_coarse(mesh: &TriMesh, shape_id: &str, n: usize, seed: u64) -> Result<SdfSampleSet> {
    check_count(n)?;
    let sdf = MeshSdf::new(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let point = uniform_in_ball(&mut rng);
            SdfSample {
                point,
                sdf: sdf.signed_distance(point),
            }
        })
        .collect();
    Ok(SdfSampleSet {
        shape_id: shape_id.to_string(),
        strategy: SamplingStrategy::CoarseUniform,
        samples,
    })
}

/// Area-weighted random point on the mesh surface.
struct SurfaceSampler<'a> {
    mesh: &'a TriMesh,
    cumulative: Vec<f64>,
}

impl<'a> SurfaceSampler<'a> {
    fn new(mesh: &'a TriMesh) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = (0..mesh.triangles.len())
            .map(|i| {
                acc += mesh.triangle_area(i);
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(Error::invalid("mesh has no surface area"));
        }
        Ok(SurfaceSampler { mesh, cumulative })
    }

    fn sample(&self, rng: &mut impl Rng) -> Point3 {
        let total = *self.cumulative.last().expect("non-empty");
        let target = rng.random_range(0.0..total);
        let i = self
            .cumulative
            .partition_point(|&c| c <= target)
            .min(self.cumulative.len() - 1);
        let [a, b, c] = self.mesh.triangle(i);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        a + (b - a) * u + (c - a) * v
    }
}

/// Uniformly distributed points on a mesh surface (area weighted).
pub fn sample_surface_points(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Point3>> {
    let sampler = SurfaceSampler::new(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
}

/// Surface-biased fine samples: 47.5% surface points with noise std 0.005,
/// 47.5% with std 0.05 and 5% uniform in the unit ball.
pub fn sample_sdf_fine(mesh: &TriMesh, shape_id: &str, n: usize, seed: u64) -> Result<SdfSampleSet> {
    check_count(n)?;
    let sdf = MeshSdf::new(mesh);
    let sampler = SurfaceSampler::new(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = fine_points(n, &mut rng, |rng| sampler.sample(rng));
    let samples = points
        .into_iter()
        .map(|point| SdfSample {
            point,
            sdf: sdf.signed_distance(point),
        })
        .collect();
    Ok(SdfSampleSet {
        shape_id: shape_id.to_string(),
        strategy: SamplingStrategy::FineSurfaceBiased,
        samples,
    })
}

fn fine_points<R: Rng>(n: usize, rng: &mut R, mut surface: impl FnMut(&mut R) -> Point3) -> Vec<Point3> {
    let (low, high, uniform) = fine_strata(n);
    let mut points = Vec::with_capacity(n);
    for _ in 0..low {
        let s = surface(rng);
        points.push(s + gaussian_offset(rng, FINE_NOISE_STDS[0]));
    }
    for _ in 0..high {
        let s = surface(rng);
        points.push(s + gaussian_offset(rng, FINE_NOISE_STDS[1]));
    }
    for _ in 0..uniform {
        points.push(uniform_in_ball(rng));
    }
    points
}

/// Random surface point of an analytic SDF, found by sphere tracing a ray
/// from a random point on the radius-1.5 sphere toward a random point in
/// the unit ball.
pub fn analytic_surface_point<F>(sdf: &F, rng: &mut impl Rng) -> Result<Point3>
where
    F: Fn(Point3) -> f64 + ?Sized,
{
    let settings = RenderSettings {
        max_steps: 256,
        hit_epsilon: 1e-7,
        max_distance: 4.0,
        ..RenderSettings::default()
    };
    for _ in 0..10_000 {
        let dir: Point3 = Point3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        )
        .normalized();
        let origin = dir * 1.5;
        let target = uniform_in_ball(rng) * 0.5;
        let ray = (target - origin).normalized();
        if let Some(hit) = sphere_trace(sdf, origin, ray, &settings)? {
            return Ok(hit.point);
        }
    }
    Err(Error::Numerical(
        "no surface found inside the unit ball".into(),
    ))
}

/// Sample set for a shape given by an exact SDF, bypassing meshes.
pub fn sample_sdf_analytic<F>(
    sdf: &F,
    shape_id: &str,
    strategy: SamplingStrategy,
    n: usize,
    seed: u64,
) -> Result<SdfSampleSet>
where
    F: Fn(Point3) -> f64 + ?Sized,
{
    check_count(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match strategy {
        SamplingStrategy::CoarseUniform => (0..n).map(|_| uniform_in_ball(&mut rng)).collect(),
        SamplingStrategy::FineSurfaceBiased => {
            // Surface points are drawn first so the noise stream is independent
            // of how many tracing attempts each needed.
            let (low, high, _) = fine_strata(n);
            let mut surface = Vec::with_capacity(low + high);
            for _ in 0..low + high {
                surface.push(analytic_surface_point(sdf, &mut rng)?);
            }
            let mut it = surface.into_iter();
            fine_points(n, &mut rng, |_| it.next().expect("pre-drawn surface point"))
        }
    };
    let samples = points
        .into_iter()
        .map(|point| SdfSample {
            point,
            sdf: sdf(point),
        })
        .collect();
    Ok(SdfSampleSet {
        shape_id: shape_id.to_string(),
        strategy,
        samples,
    })
}
