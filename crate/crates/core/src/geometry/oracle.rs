//! Analytic composite shapes with known SDFs and part labels.
//!
//! These stand in for scanned meshes in tests and in the small procedural
//! training sets: every shape is an exact union of primitives, so ground
//! truth distances, occupancy and part labels are all available in closed
//! form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Point3, Primitive, PrimitiveKind, PrimitiveSet, UnionMode};
use crate::error::{Error, Result};

/// Semantic part label of an oracle part.
pub type PartLabel = &'static str;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OracleSpec {
    /// A single sphere at the origin.
    Sphere { radius: f64 },
    /// Two spheres at `(±span/2, 0, 0)` joined by a capsule bar.
    Dumbbell {
        bell_radius: f64,
        bar_radius: f64,
        span: f64,
    },
    /// Three spheres stacked along +y, each resting halfway into the one below.
    Snowman { radii: [f64; 3] },
    /// A box top on four capsule legs.
    Table {
        top_half_extents: [f64; 3],
        leg_radius: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub primitive: Primitive,
    pub label: PartLabel,
}

/// An exact SDF evaluator built from an [`OracleSpec`].
#[derive(Debug, Clone)]
pub struct OracleShape {
    spec: OracleSpec,
    parts: Vec<Part>,
}

fn in_range(v: f64, lo: f64, hi: f64, what: &str) -> Result<()> {
    if !v.is_finite() || v <= lo || v > hi {
        return Err(Error::invalid(format!(
            "{what} = {v} outside the documented range ({lo}, {hi}]"
        )));
    }
    Ok(())
}

impl OracleSpec {
    /// Exactly the dumbbell used in documentation examples.
    pub fn dumbbell(bell_radius: f64, span: f64) -> Self {
        OracleSpec::Dumbbell {
            bell_radius,
            bar_radius: bell_radius / 3.0,
            span,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            OracleSpec::Sphere { .. } => "sphere",
            OracleSpec::Dumbbell { .. } => "dumbbell",
            OracleSpec::Snowman { .. } => "snowman",
            OracleSpec::Table { .. } => "table",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OracleSpec::Sphere { radius } => in_range(radius, 0.0, 1.0, "radius"),
            OracleSpec::Dumbbell {
                bell_radius,
                bar_radius,
                span,
            } => {
                in_range(bell_radius, 0.0, 0.6, "bell_radius")?;
                in_range(bar_radius, 0.0, bell_radius, "bar_radius")?;
                in_range(span, 0.0, 1.6, "span")?;
                if span / 2.0 + bell_radius > 1.0 {
                    return Err(Error::invalid("dumbbell does not fit in the unit sphere"));
                }
                Ok(())
            }
            OracleSpec::Snowman { radii } => {
                for r in radii {
                    in_range(r, 0.0, 0.6, "snowman radius")?;
                }
                let total: f64 = 2.0 * radii[0] + 1.5 * radii[1] + 1.5 * radii[2];
                if total > 2.0 {
                    return Err(Error::invalid("snowman does not fit in the unit sphere"));
                }
                Ok(())
            }
            OracleSpec::Table {
                top_half_extents,
                leg_radius,
                height,
            } => {
                for h in top_half_extents {
                    in_range(h, 0.0, 0.8, "top half extent")?;
                }
                in_range(height, 0.0, 1.4, "height")?;
                let min_half = top_half_extents[0].min(top_half_extents[2]);
                in_range(leg_radius, 0.0, min_half / 2.0, "leg_radius")?;
                let [hx, _, hz] = top_half_extents;
                let reach = (hx * hx + hz * hz).sqrt().hypot(height / 2.0);
                if reach > 1.0 {
                    return Err(Error::invalid("table does not fit in the unit sphere"));
                }
                Ok(())
            }
        }
    }

    fn build_parts(&self) -> Result<Vec<Part>> {
        let part = |primitive: Result<Primitive>, label| primitive.map(|primitive| Part { primitive, label });
        match *self {
            OracleSpec::Sphere { radius } => Ok(vec![part(
                Primitive::sphere(Point3::ZERO, radius),
                "body",
            )?]),
            OracleSpec::Dumbbell {
                bell_radius,
                bar_radius,
                span,
            } => {
                let left = Point3::new(-span / 2.0, 0.0, 0.0);
                let right = Point3::new(span / 2.0, 0.0, 0.0);
                Ok(vec![
                    part(Primitive::sphere(left, bell_radius), "bell")?,
                    part(Primitive::sphere(right, bell_radius), "bell")?,
                    part(Primitive::capsule(left, right, bar_radius), "bar")?,
                ])
            }
            OracleSpec::Snowman { radii } => {
                let [r0, r1, r2] = radii;
                let height = 2.0 * r0 + 1.5 * r1 + 1.5 * r2;
                let base_y = -height / 2.0 + r0;
                let mid_y = base_y + r0 + 0.5 * r1;
                let head_y = mid_y + r1 + 0.5 * r2;
                Ok(vec![
                    part(Primitive::sphere(Point3::new(0.0, base_y, 0.0), r0), "base")?,
                    part(Primitive::sphere(Point3::new(0.0, mid_y, 0.0), r1), "torso")?,
                    part(Primitive::sphere(Point3::new(0.0, head_y, 0.0), r2), "head")?,
                ])
            }
            OracleSpec::Table {
                top_half_extents,
                leg_radius,
                height,
            } => {
                let [hx, hy, hz] = top_half_extents;
                let top_y = height / 2.0 - hy;
                let mut parts = vec![part(
                    Primitive::cuboid(Point3::new(0.0, top_y, 0.0), Point3::from(top_half_extents)),
                    "top",
                )?];
                let lx = hx - leg_radius;
                let lz = hz - leg_radius;
                for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                    let a = Point3::new(sx * lx, top_y, sz * lz);
                    let b = Point3::new(sx * lx, -height / 2.0 + leg_radius, sz * lz);
                    parts.push(part(Primitive::capsule(a, b, leg_radius), "leg")?);
                }
                Ok(parts)
            }
        }
    }
}

/// Builds the exact evaluator (and part labels) for a composite shape.
pub fn make_oracle_shape(spec: &OracleSpec) -> Result<OracleShape> {
    OracleShape::new(spec.clone())
}

impl OracleShape {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        let parts = spec.build_parts()?;
        Ok(OracleShape { spec, parts })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn sdf(&self, p: Point3) -> f64 {
        self.parts
            .iter()
            .map(|part| part.primitive.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Label of the part nearest to `p` (lowest part index on ties).
    pub fn label_at(&self, p: Point3) -> PartLabel {
        let mut best = (f64::INFINITY, self.parts[0].label);
        for part in &self.parts {
            let d = part.primitive.sdf(p);
            if d < best.0 {
                best = (d, part.label);
            }
        }
        best.1
    }

    /// Groups the parts into homogeneous primitive sets, one per kind.
    pub fn primitive_sets(&self) -> Vec<PrimitiveSet> {
        let mut out = Vec::new();
        for kind in [PrimitiveKind::Sphere, PrimitiveKind::Capsule, PrimitiveKind::Box] {
            let prims: Vec<Primitive> = self
                .parts
                .iter()
                .filter(|p| p.primitive.kind == kind)
                .map(|p| p.primitive.clone())
                .collect();
            if !prims.is_empty() {
                out.push(PrimitiveSet::from_primitives(&prims).expect("homogeneous by construction"));
            }
        }
        out
    }

    /// Union of the per-kind primitive sets; equals [`OracleShape::sdf`].
    pub fn sdf_via_sets(&self, p: Point3) -> f64 {
        self.primitive_sets()
            .iter()
            .map(|s| s.sdf(p, UnionMode::Hard))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A reproducible family-balanced collection of `m` composite shapes with
/// randomized proportions. Shape ids are `"{family}_{index:03}"`.
pub fn procedural_dataset(m: usize, seed: u64) -> Vec<(String, OracleSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|i| {
            let spec = match i % 3 {
                0 => {
                    let bell_radius = rng.random_range(0.26..0.36);
                    OracleSpec::Dumbbell {
                        bell_radius,
                        bar_radius: rng.random_range(0.12..0.18),
                        span: rng.random_range(0.9..1.25),
                    }
                }
                1 => OracleSpec::Snowman {
                    radii: [
                        rng.random_range(0.3..0.38),
                        rng.random_range(0.22..0.3),
                        rng.random_range(0.15..0.22),
                    ],
                },
                _ => OracleSpec::Table {
                    top_half_extents: [
                        rng.random_range(0.45..0.6),
                        rng.random_range(0.08..0.12),
                        rng.random_range(0.3..0.42),
                    ],
                    leg_radius: rng.random_range(0.09..0.12),
                    height: rng.random_range(0.6..0.8),
                },
            };
            (format!("{}_{i:03}", spec.family()), spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dumbbell_midpoint_is_inside_the_bar() {
        let spec = OracleSpec::Dumbbell {
            bell_radius: 0.3,
            bar_radius: 0.1,
            span: 1.2,
        };
        let shape = make_oracle_shape(&spec).unwrap();
        assert_abs_diff_eq!(shape.sdf(Point3::ZERO), -0.1, epsilon = 1e-15);
        assert_eq!(shape.label_at(Point3::ZERO), "bar");
        assert_eq!(shape.label_at(Point3::new(0.7, 0.0, 0.0)), "bell");
    }

    #[test]
    fn table_top_is_inside() {
        let spec = OracleSpec::Table {
            top_half_extents: [0.5, 0.1, 0.4],
            leg_radius: 0.08,
            height: 0.8,
        };
        let shape = make_oracle_shape(&spec).unwrap();
        let top_y = 0.4 - 0.1;
        assert!(shape.sdf(Point3::new(0.0, top_y, 0.0)) < 0.0);
        assert_eq!(shape.label_at(Point3::new(0.0, top_y, 0.0)), "top");
        assert!(shape.sdf(Point3::new(0.0, -0.3, 0.0)) > 0.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(make_oracle_shape(&OracleSpec::Sphere { radius: -1.0 }).is_err());
        assert!(make_oracle_shape(&OracleSpec::Dumbbell {
            bell_radius: 0.5,
            bar_radius: 0.1,
            span: 1.5
        })
        .is_err());
        assert!(make_oracle_shape(&OracleSpec::Dumbbell {
            bell_radius: 0.2,
            bar_radius: 0.3,
            span: 1.0
        })
        .is_err());
    }

    #[test]
    fn procedural_shapes_are_valid_and_fit_the_unit_ball() {
        let shapes = procedural_dataset(32, 7);
        assert_eq!(shapes.len(), 32);
        for (id, spec) in &shapes {
            let shape = make_oracle_shape(spec).unwrap_or_else(|e| panic!("{id}: {e}"));
            // Far points on the unit sphere lie outside every shape.
            for p in [
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, -1.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
            ] {
                assert!(shape.sdf(p) > 0.0, "{id} reaches {p:?}");
            }
        }
        assert_eq!(procedural_dataset(32, 7), shapes);
    }
}
