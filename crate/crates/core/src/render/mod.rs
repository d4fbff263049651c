//! Sphere tracing, shaded images and isosurface extraction for any SDF.

mod mcubes;
mod tables;

pub use mcubes::{marching_cubes, DEFAULT_MC_BOUNDS};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// A scalar field that can be evaluated in batches. Closures get a
/// point-by-point implementation; network decoders override
/// [`SdfField::eval_batch`] to run one forward pass per batch.
pub trait SdfField {
    fn eval_batch(&self, points: &[Point3], out: &mut [f64]);

    fn eval(&self, p: Point3) -> f64 {
        let mut out = [0.0];
        self.eval_batch(&[p], &mut out);
        out[0]
    }
}

impl<F: Fn(Point3) -> f64> SdfField for F {
    fn eval_batch(&self, points: &[Point3], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(points) {
            *o = self(p);
        }
    }

    fn eval(&self, p: Point3) -> f64 {
        self(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub max_steps: usize,
    pub hit_epsilon: f64,
    pub max_distance: f64,
    /// Lower bound on a marching step.
    pub min_step: f64,
    /// Multiplier on each step; below 1 for fields that are not 1-Lipschitz.
    pub step_scale: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            max_steps: 64,
            hit_epsilon: 1e-3,
            max_distance: 10.0,
            min_step: 1e-4,
            step_scale: 1.0,
        }
    }
}

/// Step safety factor for neural fields.
pub const NEURAL_STEP_SCALE: f64 = 0.8;

impl RenderSettings {
    /// Interactive preview: 16 marching steps.
    pub fn preview() -> Self {
        RenderSettings {
            max_steps: 16,
            ..Self::default()
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.max_steps = steps;
        self
    }

    pub fn for_neural_field(mut self) -> Self {
        self.step_scale = NEURAL_STEP_SCALE;
        self
    }

    fn validate(&self) -> Result<()> {
        let ok = self.max_steps > 0
            && self.hit_epsilon > 0.0
            && self.max_distance > 0.0
            && self.min_step > 0.0
            && self.step_scale > 0.0
            && self.step_scale <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid render settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Point3,
}

fn check_unit(dir: Point3) -> Result<()> {
    if (dir.norm() - 1.0).abs() > 1e-9 {
        Err(Error::invalid(format!("ray direction {dir:?} is not unit length")))
    } else {
        Ok(())
    }
}

/// Marches `origin + t * dir` by the field value until it drops below
/// `hit_epsilon`; `None` when the ray leaves `max_distance` or runs out of
/// steps.
pub fn sphere_trace<F>(sdf: &F, origin: Point3, dir: Point3, settings: &RenderSettings) -> Result<Option<Hit>>
where
    F: Fn(Point3) -> f64 + ?Sized,
{
    check_unit(dir)?;
    settings.validate()?;
    let mut t = 0.0;
    for _ in 0..settings.max_steps {
        let point = origin + dir * t;
        let d = sdf(point);
        if d < settings.hit_epsilon {
            return Ok(Some(Hit { t, point }));
        }
        t += (d * settings.step_scale).max(settings.min_step);
        if t > settings.max_distance {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Lockstep sphere tracing of many rays; identical per-ray results to
/// [`sphere_trace`] but the field is queried once per step for all live
/// rays.
pub fn trace_rays<S: SdfField + ?Sized>(
    field: &S,
    origins: &[Point3],
    dirs: &[Point3],
    settings: &RenderSettings,
) -> Result<Vec<Option<Hit>>> {
    settings.validate()?;
    for &d in dirs {
        check_unit(d)?;
    }
    let n = origins.len();
    let mut t = vec![0.0; n];
    let mut result: Vec<Option<Hit>> = vec![None; n];
    let mut live: Vec<usize> = (0..n).collect();
    let mut points = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..settings.max_steps {
        if live.is_empty() {
            break;
        }
        points.clear();
        points.extend(live.iter().map(|&i| origins[i] + dirs[i] * t[i]));
        values.resize(points.len(), 0.0);
        field.eval_batch(&points, &mut values);
        let mut next = Vec::with_capacity(live.len());
        for (k, &i) in live.iter().enumerate() {
            let d = values[k];
            if d < settings.hit_epsilon {
                result[i] = Some(Hit {
                    t: t[i],
                    point: points[k],
                });
                continue;
            }
            t[i] += (d * settings.step_scale).max(settings.min_step);
            if t[i] <= settings.max_distance {
                next.push(i);
            }
        }
        live = next;
    }
    Ok(result)
}

/// Pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub eye: Point3,
    pub look_at: Point3,
    pub up: Point3,
    /// Vertical field of view in degrees.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Looks at the origin from `distance` away, raised and turned so three
    /// faces of a box are visible.
    pub fn orbit(distance: f64, width: usize, height: usize) -> Self {
        Camera {
            eye: Point3::new(0.6, 0.5, 1.0).normalized() * distance,
            look_at: Point3::ZERO,
            up: Point3::new(0.0, 1.0, 0.0),
            vertical_fov: 40.0,
            width,
            height,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.eye == self.look_at {
            return Err(Error::invalid("camera eye equals look_at"));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(Error::invalid(format!("field of view {} outside (0, 180)", self.vertical_fov)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let forward = (self.look_at - self.eye).normalized();
        if forward.cross(self.up).norm() < 1e-12 {
            return Err(Error::invalid("camera up vector is parallel to the view direction"));
        }
        Ok(())
    }

    /// Unit ray direction through the center of pixel `(i, j)`, row 0 at the
    /// top.
    pub fn ray_direction(&self, i: usize, j: usize) -> Point3 {
        let forward = (self.look_at - self.eye).normalized();
        let right = forward.cross(self.up).normalized();
        let up = right.cross(forward);
        let tan = (self.vertical_fov.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = (2.0 * (i as f64 + 0.5) / self.width as f64 - 1.0) * aspect * tan;
        let y = (1.0 - 2.0 * (j as f64 + 0.5) / self.height as f64) * tan;
        (forward + right * x + up * y).normalized()
    }
}

/// 8-bit RGB image, row-major from the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
const BASE_COLOR: [f64; 3] = [0.45, 0.62, 0.88];

impl Image {
    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn raw_rgb(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }

    /// Count of pixels that differ from the background.
    pub fn lit_pixels(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != BACKGROUND).count()
    }
}

/// Central-difference gradient direction of the field at each point.
fn normals<S: SdfField + ?Sized>(field: &S, points: &[Point3]) -> Vec<Point3> {
    const H: f64 = 1e-3;
    let offsets = [
        Point3::new(H, 0.0, 0.0),
        Point3::new(-H, 0.0, 0.0),
        Point3::new(0.0, H, 0.0),
        Point3::new(0.0, -H, 0.0),
        Point3::new(0.0, 0.0, H),
        Point3::new(0.0, 0.0, -H),
    ];
    let probes: Vec<Point3> = points
        .iter()
        .flat_map(|&p| offsets.iter().map(move |&o| p + o))
        .collect();
    let mut v = vec![0.0; probes.len()];
    field.eval_batch(&probes, &mut v);
    v.chunks_exact(6)
        .map(|c| Point3::new(c[0] - c[1], c[2] - c[3], c[4] - c[5]).normalized())
        .collect()
}

/// Sphere traces every pixel and shades hits with a Lambertian light at the
/// eye on a white background. Pure: identical inputs give identical bytes.
pub fn render_image<S: SdfField + ?Sized>(field: &S, camera: &Camera, settings: &RenderSettings) -> Result<Image> {
    camera.validate()?;
    let n = camera.width * camera.height;
    let dirs: Vec<Point3> = (0..n)
        .map(|k| camera.ray_direction(k % camera.width, k / camera.width))
        .collect();
    let origins = vec![camera.eye; n];
    let hits = trace_rays(field, &origins, &dirs, settings)?;
    let hit_idx: Vec<usize> = (0..n).filter(|&k| hits[k].is_some()).collect();
    let hit_points: Vec<Point3> = hit_idx.iter().map(|&k| hits[k].unwrap().point).collect();
    let hit_normals = normals(field, &hit_points);
    let mut pixels = vec![BACKGROUND; n];
    for ((&k, &p), &nrm) in hit_idx.iter().zip(&hit_points).zip(&hit_normals) {
        let to_eye = (camera.eye - p).normalized();
        let lambert = nrm.dot(to_eye).max(0.0);
        let shade = 0.15 + 0.85 * lambert;
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (BASE_COLOR[c] * shade * 255.0).round().clamp(0.0, 254.0) as u8;
        }
        pixels[k] = px;
    }
    Ok(Image {
        width: camera.width,
        height: camera.height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Primitive, PrimitiveSet, UnionMode};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere(p: Point3) -> f64 {
        p.norm() - 1.0
    }

    #[test]
    fn trace_hits_unit_sphere() {
        let s = RenderSettings::default();
        let hit = sphere_trace(&unit_sphere, Point3::new(0., 0., -3.), Point3::new(0., 0., 1.), &s)
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(hit.t, 2.0, epsilon = 2.0 * s.hit_epsilon);
        let miss = sphere_trace(&unit_sphere, Point3::new(0., 2., -3.), Point3::new(1., 0., 0.), &s).unwrap();
        assert!(miss.is_none());
        assert!(sphere_trace(&unit_sphere, Point3::ZERO, Point3::new(2., 0., 0.), &s).is_err());
    }

    #[test]
    fn hits_on_random_sphere_sets_are_on_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prims: Vec<Primitive> = (0..8)
            .map(|_| {
                Primitive::sphere(
                    Point3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
                    rng.random_range(0.1..0.4),
                )
                .unwrap()
            })
            .collect();
        let set = PrimitiveSet::from_primitives(&prims).unwrap();
        let f = |p: Point3| set.sdf(p, UnionMode::Hard);
        let s = RenderSettings::default().with_steps(200);
        let mut hits = 0;
        for _ in 0..500 {
            let origin = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -3.0);
            let target = Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
            let dir = (target - origin).normalized();
            // Tracing never enters the solid deeper than the hit tolerance.
            let mut t = 0.0;
            for _ in 0..s.max_steps {
                let d = f(origin + dir * t);
                assert!(d >= -s.hit_epsilon);
                if d < s.hit_epsilon {
                    break;
                }
                t += d.max(s.min_step);
            }
            if let Some(hit) = sphere_trace(&f, origin, dir, &s).unwrap() {
                hits += 1;
                assert!(f(hit.point).abs() <= 2.0 * s.hit_epsilon);
            }
        }
        assert!(hits > 50);
    }

    #[test]
    fn batched_tracing_matches_single_rays() {
        let cam = Camera::orbit(3.0, 16, 12);
        let s = RenderSettings::default();
        let dirs: Vec<Point3> = (0..16 * 12).map(|k| cam.ray_direction(k % 16, k / 16)).collect();
        let origins = vec![cam.eye; dirs.len()];
        let batch = trace_rays(&unit_sphere, &origins, &dirs, &s).unwrap();
        for (d, b) in dirs.iter().zip(&batch) {
            assert_eq!(sphere_trace(&unit_sphere, cam.eye, *d, &s).unwrap(), *b);
        }
    }

    #[test]
    fn empty_scene_is_white() {
        let img = render_image(&|_: Point3| 1.0, &Camera::orbit(3.0, 20, 10), &RenderSettings::preview()).unwrap();
        assert!(img.pixels.iter().all(|&p| p == BACKGROUND));
        assert_eq!(img.lit_pixels(), 0);
    }

    #[test]
    fn sphere_covers_the_projected_disk() {
        let cam = Camera {
            eye: Point3::new(0.0, 0.0, 3.0),
            look_at: Point3::ZERO,
            up: Point3::new(0.0, 1.0, 0.0),
            vertical_fov: 50.0,
            width: 160,
            height: 160,
        };
        let img = render_image(&unit_sphere, &cam, &RenderSettings::default()).unwrap();
        // Silhouette half-angle asin(1/3); disk radius on the image plane is
        // tan(asin(1/3)) in units where the half-height is tan(fov/2).
        let half_angle = (1.0f64 / 3.0).asin();
        let radius_px = half_angle.tan() / (25f64.to_radians().tan()) * 80.0;
        let expected = std::f64::consts::PI * radius_px * radius_px;
        let lit = img.lit_pixels() as f64;
        assert!((lit - expected).abs() / expected < 0.05, "lit {lit} vs {expected}");
    }

    #[test]
    fn rendering_is_deterministic_and_ppm_is_well_formed() {
        let cam = Camera::orbit(3.0, 32, 24);
        let a = render_image(&unit_sphere, &cam, &RenderSettings::default()).unwrap();
        let b = render_image(&unit_sphere, &cam, &RenderSettings::default()).unwrap();
        assert_eq!(a.to_ppm(), b.to_ppm());
        let ppm = a.to_ppm();
        assert!(ppm.starts_with(b"P6\n32 24\n255\n"));
        assert_eq!(ppm.len(), "P6\n32 24\n255\n".len() + 32 * 24 * 3);
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut cam = Camera::orbit(3.0, 8, 8);
        cam.vertical_fov = 180.0;
        assert!(render_image(&unit_sphere, &cam, &RenderSettings::default()).is_err());
        let mut cam = Camera::orbit(3.0, 8, 8);
        cam.look_at = cam.eye;
        assert!(render_image(&unit_sphere, &cam, &RenderSettings::default()).is_err());
    }
}
