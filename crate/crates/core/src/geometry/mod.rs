//! Closed-form signed distance functions for primitives and their unions.
//!
//! All distances are negative inside a solid, positive outside and zero on
//! the surface. Sizes (radii, half extents) are stored as logarithms and
//! exponentiated at evaluation so they stay positive under unconstrained
//! optimization.

mod oracle;
mod point;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use oracle::{make_oracle_shape, procedural_dataset, OracleShape, OracleSpec, Part, PartLabel};
pub use point::Point3;

use crate::error::{Error, Result};

/// Default temperature for the smooth (LogSumExp) union.
pub const DEFAULT_SMOOTH_T: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Capsule,
    Box,
}

impl PrimitiveKind {
    /// Number of attributes describing one primitive of this kind.
    pub const fn arity(self) -> usize {
        match self {
            PrimitiveKind::Sphere => 4,
            PrimitiveKind::Capsule => 7,
            PrimitiveKind::Box => 6,
        }
    }

    /// Mask over one primitive's attribute slots: `true` for positional
    /// coordinates, `false` for log sizes.
    pub fn position_mask(self) -> &'static [bool] {
        match self {
            PrimitiveKind::Sphere => &[true, true, true, false],
            PrimitiveKind::Capsule => &[true, true, true, true, true, true, false],
            PrimitiveKind::Box => &[true, true, true, false, false, false],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Capsule => "capsule",
            PrimitiveKind::Box => "box",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(PrimitiveKind::Sphere),
            "capsule" => Ok(PrimitiveKind::Capsule),
            "box" => Ok(PrimitiveKind::Box),
            other => Err(Error::invalid(format!("unknown primitive kind `{other}`"))),
        }
    }
}

/// Raw attributes (log sizes) to user units (sizes exponentiated).
pub fn to_geometric_attributes(kind: PrimitiveKind, raw: &[f64]) -> Vec<f64> {
    let mask = kind.position_mask();
    raw.iter()
        .enumerate()
        .map(|(c, &v)| if mask[c % mask.len()] { v } else { v.exp() })
        .collect()
}

/// Inverse of [`to_geometric_attributes`]; sizes must be positive.
pub fn from_geometric_attributes(kind: PrimitiveKind, geometric: &[f64]) -> Result<Vec<f64>> {
    let mask = kind.position_mask();
    geometric
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            if mask[c % mask.len()] {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite("primitive position"))
                }
            } else {
                check_positive(v, "primitive size")?;
                Ok(v.ln())
            }
        })
        .collect()
}

/// How per-primitive distances are combined into one field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum UnionMode {
    #[default]
    Hard,
    LogSumExp {
        t: f64,
    },
}

fn check_finite(p: Point3, what: &'static str) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_positive(v: f64, what: &'static str) -> Result<()> {
    if !v.is_finite() {
        Err(Error::NonFinite(what))
    } else if v <= 0.0 {
        Err(Error::invalid(format!("{what} must be positive, got {v}")))
    } else {
        Ok(())
    }
}

/// Signed distance to a sphere.
pub fn sdf_sphere(p: Point3, center: Point3, radius: f64) -> Result<f64> {
    check_finite(p, "point")?;
    check_finite(center, "sphere center")?;
    check_positive(radius, "sphere radius")?;
    Ok(sphere_distance(p, center, radius))
}

/// Signed distance to a capsule: the segment `ab` inflated by `radius`.
pub fn sdf_capsule(p: Point3, a: Point3, b: Point3, radius: f64) -> Result<f64> {
    check_finite(p, "point")?;
    check_finite(a, "capsule endpoint")?;
    check_finite(b, "capsule endpoint")?;
    check_positive(radius, "capsule radius")?;
    Ok(capsule_distance(p, a, b, radius))
}

/// Exact signed distance to an axis-aligned box.
pub fn sdf_box(p: Point3, center: Point3, half_extents: Point3) -> Result<f64> {
    check_finite(p, "point")?;
    check_finite(center, "box center")?;
    for h in half_extents.to_array() {
        check_positive(h, "box half extent")?;
    }
    Ok(box_distance(p, center, half_extents))
}

#[inline]
pub(crate) fn sphere_distance(p: Point3, center: Point3, radius: f64) -> f64 {
    (p - center).norm() - radius
}

#[inline]
fn segment_parameter(p: Point3, a: Point3, b: Point3) -> f64 {
    let ba = b - a;
    let len2 = ba.dot(ba);
    if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(ba) / len2).clamp(0.0, 1.0)
    }
}

#[inline]
pub(crate) fn capsule_distance(p: Point3, a: Point3, b: Point3, radius: f64) -> f64 {
    let h = segment_parameter(p, a, b);
    (p - (a + (b - a) * h)).norm() - radius
}

#[inline]
pub(crate) fn box_distance(p: Point3, center: Point3, half: Point3) -> f64 {
    let d = p - center;
    let q = Point3::new(d.x.abs() - half.x, d.y.abs() - half.y, d.z.abs() - half.z);
    let outside = Point3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

/// Signed distance of one primitive given its raw attribute slice
/// (log sizes, not sizes). No validation.
#[inline]
pub fn primitive_distance(kind: PrimitiveKind, attrs: &[f64], p: Point3) -> f64 {
    match kind {
        PrimitiveKind::Sphere => {
            sphere_distance(p, Point3::new(attrs[0], attrs[1], attrs[2]), attrs[3].exp())
        }
        PrimitiveKind::Capsule => capsule_distance(
            p,
            Point3::new(attrs[0], attrs[1], attrs[2]),
            Point3::new(attrs[3], attrs[4], attrs[5]),
            attrs[6].exp(),
        ),
        PrimitiveKind::Box => box_distance(
            p,
            Point3::new(attrs[0], attrs[1], attrs[2]),
            Point3::new(attrs[3].exp(), attrs[4].exp(), attrs[5].exp()),
        ),
    }
}

/// Signed distance of one primitive together with its gradient with respect
/// to the raw attributes (written into `grad`, which must have the kind's
/// arity). Non-differentiable points take the zero subgradient.
pub fn primitive_distance_grad(
    kind: PrimitiveKind,
    attrs: &[f64],
    p: Point3,
    grad: &mut [f64],
) -> f64 {
    match kind {
        PrimitiveKind::Sphere => {
            let c = Point3::new(attrs[0], attrs[1], attrs[2]);
            let r = attrs[3].exp();
            let diff = p - c;
            let dist = diff.norm();
            let u = if dist > 0.0 { diff / dist } else { Point3::ZERO };
            grad[0] = -u.x;
            grad[1] = -u.y;
            grad[2] = -u.z;
            grad[3] = -r;
            dist - r
        }
        PrimitiveKind::Capsule => {
            let a = Point3::new(attrs[0], attrs[1], attrs[2]);
            let b = Point3::new(attrs[3], attrs[4], attrs[5]);
            let r = attrs[6].exp();
            let h = segment_parameter(p, a, b);
            let diff = p - (a + (b - a) * h);
            let dist = diff.norm();
            let u = if dist > 0.0 { diff / dist } else { Point3::ZERO };
            let ga = u * -(1.0 - h);
            let gb = u * -h;
            grad[..3].copy_from_slice(&ga.to_array());
            grad[3..6].copy_from_slice(&gb.to_array());
            grad[6] = -r;
            dist - r
        }
        PrimitiveKind::Box => {
            let c = [attrs[0], attrs[1], attrs[2]];
            let h = [attrs[3].exp(), attrs[4].exp(), attrs[5].exp()];
            let pa = p.to_array();
            let mut q = [0.0; 3];
            let mut sign = [0.0; 3];
            for i in 0..3 {
                let d = pa[i] - c[i];
                q[i] = d.abs() - h[i];
                sign[i] = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2) + q[2].max(0.0).powi(2))
                .sqrt();
            let mut argmax = 0;
            for i in 1..3 {
                if q[i] > q[argmax] {
                    argmax = i;
                }
            }
            let inside = q[argmax].min(0.0);
            let mut dq = [0.0; 3];
            if outside > 0.0 {
                for i in 0..3 {
                    if q[i] > 0.0 {
                        dq[i] = q[i] / outside;
                    }
                }
            }
            if q[argmax] < 0.0 {
                dq[argmax] += 1.0;
            }
            for i in 0..3 {
                grad[i] = -sign[i] * dq[i];
                grad[3 + i] = -h[i] * dq[i];
            }
            outside + inside
        }
    }
}

/// Combines per-primitive distances into the union field.
pub fn sdf_union(values: &[f64], mode: UnionMode) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("union of an empty list"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("union operand"));
    }
    match mode {
        UnionMode::Hard => Ok(hard_min(values)),
        UnionMode::LogSumExp { t } => {
            check_positive(t, "LogSumExp temperature")?;
            Ok(soft_min(values, t))
        }
    }
}

#[inline]
fn hard_min(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `-t log sum exp(-v/t)`, shifted by the minimum so no term overflows.
#[inline]
fn soft_min(values: &[f64], t: f64) -> f64 {
    let m = hard_min(values);
    let s: f64 = values.iter().map(|v| (-(v - m) / t).exp()).sum();
    m - t * s.ln()
}

/// A single typed primitive with raw attributes (log sizes).
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub attributes: Vec<f64>,
}

impl Primitive {
    pub fn new(kind: PrimitiveKind, attributes: Vec<f64>) -> Result<Self> {
        if attributes.len() != kind.arity() {
            return Err(Error::DimensionMismatch(format!(
                "{kind} expects {} attributes, got {}",
                kind.arity(),
                attributes.len()
            )));
        }
        if attributes.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("primitive attribute"));
        }
        Ok(Primitive { kind, attributes })
    }

    pub fn sphere(center: Point3, radius: f64) -> Result<Self> {
        check_positive(radius, "sphere radius")?;
        Self::new(
            PrimitiveKind::Sphere,
            vec![center.x, center.y, center.z, radius.ln()],
        )
    }

    pub fn capsule(a: Point3, b: Point3, radius: f64) -> Result<Self> {
        check_positive(radius, "capsule radius")?;
        Self::new(
            PrimitiveKind::Capsule,
            vec![a.x, a.y, a.z, b.x, b.y, b.z, radius.ln()],
        )
    }

    pub fn cuboid(center: Point3, half_extents: Point3) -> Result<Self> {
        for h in half_extents.to_array() {
            check_positive(h, "box half extent")?;
        }
        Self::new(
            PrimitiveKind::Box,
            vec![
                center.x,
                center.y,
                center.z,
                half_extents.x.ln(),
                half_extents.y.ln(),
                half_extents.z.ln(),
            ],
        )
    }

    pub fn sdf(&self, p: Point3) -> f64 {
        primitive_distance(self.kind, &self.attributes, p)
    }

    /// Representative position: sphere/box center or capsule midpoint.
    pub fn center(&self) -> Point3 {
        primitive_center(self.kind, &self.attributes)
    }
}

pub(crate) fn primitive_center(kind: PrimitiveKind, a: &[f64]) -> Point3 {
    match kind {
        PrimitiveKind::Capsule => {
            (Point3::new(a[0], a[1], a[2]) + Point3::new(a[3], a[4], a[5])) * 0.5
        }
        _ => Point3::new(a[0], a[1], a[2]),
    }
}

/// The coarse shape: `n` primitives of one kind, attributes stored flat and
/// row-major (`n * kind.arity()` values). Order is meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrimitiveSetWire", into = "PrimitiveSetWire")]
pub struct PrimitiveSet {
    kind: PrimitiveKind,
    attributes: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PrimitiveSetWire {
    kind: PrimitiveKind,
    n: usize,
    attributes: Vec<f64>,
}

impl TryFrom<PrimitiveSetWire> for PrimitiveSet {
    type Error = Error;

    fn try_from(w: PrimitiveSetWire) -> Result<Self> {
        if w.attributes.len() != w.n * w.kind.arity() {
            return Err(Error::DimensionMismatch(format!(
                "n = {} {} primitives need {} attributes, got {}",
                w.n,
                w.kind,
                w.n * w.kind.arity(),
                w.attributes.len()
            )));
        }
        PrimitiveSet::from_flat(w.kind, w.attributes)
    }
}

impl From<PrimitiveSet> for PrimitiveSetWire {
    fn from(s: PrimitiveSet) -> Self {
        PrimitiveSetWire {
            kind: s.kind,
            n: s.len(),
            attributes: s.attributes,
        }
    }
}

impl PrimitiveSet {
    pub fn from_flat(kind: PrimitiveKind, attributes: Vec<f64>) -> Result<Self> {
        let k = kind.arity();
        if attributes.is_empty() || attributes.len() % k != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} attributes is not a positive multiple of {k}",
                attributes.len()
            )));
        }
        if attributes.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("primitive attribute"));
        }
        Ok(PrimitiveSet { kind, attributes })
    }

    /// Builds a homogeneous set; mixed kinds are rejected.
    pub fn from_primitives(primitives: &[Primitive]) -> Result<Self> {
        let first = primitives
            .first()
            .ok_or_else(|| Error::invalid("a primitive set needs at least one primitive"))?;
        let mut attributes = Vec::with_capacity(primitives.len() * first.kind.arity());
        for p in primitives {
            if p.kind != first.kind {
                return Err(Error::invalid(format!(
                    "mixed primitive kinds ({} and {}) in one set",
                    first.kind, p.kind
                )));
            }
            attributes.extend_from_slice(&p.attributes);
        }
        Self::from_flat(first.kind, attributes)
    }

    pub fn kind(&self) -> PrimitiveKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.attributes.len() / self.kind.arity()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn primitive_attributes(&self, i: usize) -> &[f64] {
        let k = self.kind.arity();
        &self.attributes[i * k..(i + 1) * k]
    }

    pub fn primitive(&self, i: usize) -> Primitive {
        Primitive {
            kind: self.kind,
            attributes: self.primitive_attributes(i).to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.attributes.chunks_exact(self.kind.arity())
    }

    /// Per-primitive signed distances at `p`, written into `out`.
    pub fn distances_into(&self, p: Point3, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.iter().map(|a| primitive_distance(self.kind, a, p)));
    }

    /// Union SDF at `p` without input validation.
    pub fn sdf(&self, p: Point3, mode: UnionMode) -> f64 {
        match mode {
            UnionMode::Hard => self
                .iter()
                .map(|a| primitive_distance(self.kind, a, p))
                .fold(f64::INFINITY, f64::min),
            UnionMode::LogSumExp { t } => {
                let v: Vec<f64> = self
                    .iter()
                    .map(|a| primitive_distance(self.kind, a, p))
                    .collect();
                soft_min(&v, t)
            }
        }
    }

    /// Index of the primitive with the smallest distance at `p`; ties go to
    /// the lowest index.
    pub fn nearest(&self, p: Point3) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, a) in self.iter().enumerate() {
            let d = primitive_distance(self.kind, a, p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Union SDF of a primitive set, with input validation.
pub fn eval_primitive_set(p: Point3, set: &PrimitiveSet, mode: UnionMode) -> Result<f64> {
    check_finite(p, "point")?;
    if let UnionMode::LogSumExp { t } = mode {
        check_positive(t, "LogSumExp temperature")?;
    }
    Ok(set.sdf(p, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn sphere_examples() {
        assert_eq!(sdf_sphere(p(0., 0., 0.), Point3::ZERO, 1.0).unwrap(), -1.0);
        assert_eq!(sdf_sphere(p(2., 0., 0.), Point3::ZERO, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            sdf_sphere(p(1., 1., 0.), Point3::ZERO, 1.0).unwrap(),
            2f64.sqrt() - 1.0,
            epsilon = 1e-15
        );
        assert!(sdf_sphere(p(f64::NAN, 0., 0.), Point3::ZERO, 1.0).is_err());
        assert!(sdf_sphere(Point3::ZERO, Point3::ZERO, 0.0).is_err());
    }

    #[test]
    fn capsule_examples() {
        let (a, b) = (p(-1., 0., 0.), p(1., 0., 0.));
        assert_eq!(sdf_capsule(p(0., 0., 0.), a, b, 0.5).unwrap(), -0.5);
        assert_eq!(sdf_capsule(p(0., 1., 0.), a, b, 0.5).unwrap(), 0.5);
        assert_eq!(sdf_capsule(p(2., 0., 0.), a, b, 0.5).unwrap(), 0.5);
        assert!(sdf_capsule(p(0., f64::INFINITY, 0.), a, b, 0.5).is_err());
    }

    #[test]
    fn box_examples() {
        let h = p(1., 1., 1.);
        assert_eq!(sdf_box(p(0., 0., 0.), Point3::ZERO, h).unwrap(), -1.0);
        assert_eq!(sdf_box(p(2., 0., 0.), Point3::ZERO, h).unwrap(), 1.0);
        assert_abs_diff_eq!(
            sdf_box(p(2., 2., 0.), Point3::ZERO, h).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(sdf_box(Point3::ZERO, Point3::ZERO, p(1., -1., 1.)).is_err());
    }

    #[test]
    fn union_examples() {
        assert_eq!(sdf_union(&[1.0, -0.5, 0.2], UnionMode::Hard).unwrap(), -0.5);
        assert_eq!(sdf_union(&[0.7], UnionMode::Hard).unwrap(), 0.7);
        let soft = sdf_union(&[0.3, 0.31], UnionMode::LogSumExp { t: 1e-3 }).unwrap();
        assert!((soft - 0.3).abs() < 1e-3, "{soft}");
        assert!(sdf_union(&[], UnionMode::Hard).is_err());
        assert!(sdf_union(&[1.0], UnionMode::LogSumExp { t: 0.0 }).is_err());
    }

    #[test]
    fn soft_union_does_not_overflow() {
        let v = [1e3, 1e3 + 1.0, -1e3];
        let s = sdf_union(&v, UnionMode::LogSumExp { t: 1e-4 }).unwrap();
        assert!(s.is_finite());
        assert_abs_diff_eq!(s, -1e3, epsilon = 1e-9);
    }

    #[test]
    fn two_sphere_set_examples() {
        let set = PrimitiveSet::from_primitives(&[
            Primitive::sphere(p(-2., 0., 0.), 1.0).unwrap(),
            Primitive::sphere(p(2., 0., 0.), 1.0).unwrap(),
        ])
        .unwrap();
        assert_eq!(eval_primitive_set(p(2., 0., 0.), &set, UnionMode::Hard).unwrap(), -1.0);
        assert_eq!(eval_primitive_set(Point3::ZERO, &set, UnionMode::Hard).unwrap(), 1.0);
        assert_eq!(set.nearest(Point3::ZERO), 0);
    }

    #[test]
    fn mixed_sets_are_rejected() {
        let err = PrimitiveSet::from_primitives(&[
            Primitive::sphere(Point3::ZERO, 1.0).unwrap(),
            Primitive::cuboid(Point3::ZERO, p(1., 1., 1.)).unwrap(),
        ]);
        assert!(err.is_err());
        assert!(PrimitiveSet::from_primitives(&[]).is_err());
        assert!(PrimitiveSet::from_flat(PrimitiveKind::Sphere, vec![0.0; 5]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attrs: Vec<f64> = (0..7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let set = PrimitiveSet::from_flat(PrimitiveKind::Capsule, attrs).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        assert!(text.contains("\"kind\":\"capsule\""));
        assert!(text.contains("\"n\":5"));
        let back: PrimitiveSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, set);
        let bad = r#"{"kind":"sphere","n":2,"attributes":[0,0,0,0]}"#;
        assert!(serde_json::from_str::<PrimitiveSet>(bad).is_err());
    }

    #[test]
    fn capsule_with_coincident_endpoints_is_a_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = p(rng.random(), rng.random(), rng.random());
            let q = p(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let r = rng.random_range(0.01..1.0);
            assert_eq!(
                sdf_capsule(q, a, a, r).unwrap(),
                sdf_sphere(q, a, r).unwrap()
            );
        }
    }

    #[test]
    fn attribute_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [PrimitiveKind::Sphere, PrimitiveKind::Capsule, PrimitiveKind::Box] {
            for _ in 0..200 {
                let attrs: Vec<f64> = (0..kind.arity())
                    .map(|_| rng.random_range(-0.8..0.8))
                    .collect();
                let q = p(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                );
                let mut grad = vec![0.0; kind.arity()];
                let d = primitive_distance_grad(kind, &attrs, q, &mut grad);
                assert_eq!(d, primitive_distance(kind, &attrs, q));
                let h = 1e-6;
                for j in 0..kind.arity() {
                    let mut up = attrs.clone();
                    let mut dn = attrs.clone();
                    up[j] += h;
                    dn[j] -= h;
                    let fd = (primitive_distance(kind, &up, q) - primitive_distance(kind, &dn, q))
                        / (2.0 * h);
                    assert!(
                        (fd - grad[j]).abs() < 1e-5,
                        "{kind} attr {j}: fd {fd} vs {}",
                        grad[j]
                    );
                }
            }
        }
    }
}
