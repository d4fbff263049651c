//! Shape editing by optimising a latent code against goals stated on its
//! primitives, latent and attribute-controlled interpolation, and
//! point-to-primitive correspondence.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{to_geometric_attributes, Point3, PrimitiveKind, PrimitiveSet};
use crate::nn::{DecoderParams, Decoders, NetConfig};
use crate::vad::{encode_shape, Hyperparams, LatentState, ShapeData};

/// Line-search halvings tried before a step is given up.
pub const MAX_HALVINGS: usize = 10;
/// A step accepted without halving doubles the next trial step, up to
/// this multiple of the configured step size.
pub const MAX_STEP_GROWTH: f64 = 64.0;
/// Step cap per user event in interactive sessions.
pub const INTERACTIVE_MAX_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermKind {
    /// `indices`: primitives; `target`: one xyz per primitive. Distance of
    /// each primitive's centre to its target.
    MovePrimitive,
    /// `indices`: primitives; `target`: one radius each.
    SetRadius,
    /// `indices`: two primitives; `target`: their centre distance.
    PairDistance,
    /// `indices`: flat attribute slots (`primitive * arity + slot`);
    /// `target`: values in user units (sizes as lengths, not logs).
    MatchAttributes,
    /// `indices`: primitives; `target`: one centre height (y) each.
    MatchHeights,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveTerm {
    pub kind: TermKind,
    pub indices: Vec<usize>,
    pub target: Vec<f64>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulationObjective {
    pub terms: Vec<ObjectiveTerm>,
}

/// A validation failure located by a JSON-style path such as
/// `terms[1].indices[0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl From<FieldError> for Error {
    fn from(e: FieldError) -> Self {
        Error::InvalidArgument(e.to_string())
    }
}

fn field(path: String, message: impl Into<String>) -> FieldError {
    FieldError {
        path,
        message: message.into(),
    }
}

fn radius_slot(kind: PrimitiveKind) -> Option<usize> {
    match kind {
        PrimitiveKind::Sphere => Some(3),
        PrimitiveKind::Capsule => Some(6),
        PrimitiveKind::Box => None,
    }
}

fn center_of(kind: PrimitiveKind, a: &[f64], i: usize) -> Point3 {
    let k = kind.arity();
    crate::geometry::Primitive {
        kind,
        attributes: a[i * k..(i + 1) * k].to_vec(),
    }
    .center()
}

fn add_center_grad(kind: PrimitiveKind, grad: &mut [f64], i: usize, g: Point3) {
    let base = i * kind.arity();
    let g = g.to_array();
    match kind {
        PrimitiveKind::Capsule => {
            for c in 0..3 {
                grad[base + c] += 0.5 * g[c];
                grad[base + 3 + c] += 0.5 * g[c];
            }
        }
        _ => {
            for c in 0..3 {
                grad[base + c] += g[c];
            }
        }
    }
}

/// `|x|` with derivative sign(x), zero at the kink.
fn abs_grad(x: f64) -> (f64, f64) {
    let s = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    (x.abs(), s)
}

/// `||v||` with derivative `v / ||v||`, zero at the origin.
fn norm_grad(v: Point3) -> (f64, Point3) {
    let n = v.norm();
    if n > 0.0 {
        (n, v * (1.0 / n))
    } else {
        (0.0, Point3::ZERO)
    }
}

impl ManipulationObjective {
    pub fn single(kind: TermKind, indices: Vec<usize>, target: Vec<f64>) -> Self {
        ManipulationObjective {
            terms: vec![ObjectiveTerm {
                kind,
                indices,
                target,
                weight: 1.0,
            }],
        }
    }

    pub fn move_primitive(index: usize, target: Point3) -> Self {
        Self::single(TermKind::MovePrimitive, vec![index], target.to_array().to_vec())
    }

    /// Checks indices against `n` primitives of `kind` and target shapes.
    pub fn validate(&self, kind: PrimitiveKind, n: usize) -> std::result::Result<(), FieldError> {
        if self.terms.is_empty() {
            return Err(field("terms".into(), "at least one term is required"));
        }
        let arity = kind.arity();
        for (t, term) in self.terms.iter().enumerate() {
            let at = |f: &str| format!("terms[{t}].{f}");
            if !(term.weight > 0.0 && term.weight.is_finite()) {
                return Err(field(at("weight"), format!("must be positive, got {}", term.weight)));
            }
            if term.indices.is_empty() {
                return Err(field(at("indices"), "must not be empty"));
            }
            let limit = if term.kind == TermKind::MatchAttributes { n * arity } else { n };
            for (j, &i) in term.indices.iter().enumerate() {
                if i >= limit {
                    return Err(field(format!("terms[{t}].indices[{j}]"), format!("{i} out of range (limit {limit})")));
                }
            }
            if let Some(j) = term.target.iter().position(|v| !v.is_finite()) {
                return Err(field(format!("terms[{t}].target[{j}]"), "must be finite"));
            }
            let m = term.indices.len();
            let want = match term.kind {
                TermKind::MovePrimitive => 3 * m,
                TermKind::PairDistance => {
                    if m != 2 {
                        return Err(field(at("indices"), format!("needs exactly 2 primitives, got {m}")));
                    }
                    1
                }
                _ => m,
            };
            if term.target.len() != want {
                return Err(field(at("target"), format!("expected {want} values, got {}", term.target.len())));
            }
            match term.kind {
                TermKind::SetRadius => {
                    if radius_slot(kind).is_none() {
                        return Err(field(at("kind"), format!("{kind} primitives have no radius")));
                    }
                    if let Some(j) = term.target.iter().position(|&r| r <= 0.0) {
                        return Err(field(format!("terms[{t}].target[{j}]"), "radius must be positive"));
                    }
                }
                TermKind::PairDistance if term.target[0] < 0.0 => {
                    return Err(field(format!("terms[{t}].target[0]"), "distance must be non-negative"));
                }
                TermKind::MatchAttributes => {
                    let mask = kind.position_mask();
                    for (j, (&i, &v)) in term.indices.iter().zip(&term.target).enumerate() {
                        if !mask[i % arity] && v <= 0.0 {
                            return Err(field(format!("terms[{t}].target[{j}]"), "sizes must be positive"));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Objective value on raw attributes, adding its gradient into `grad`.
    fn value_and_grad(&self, kind: PrimitiveKind, a: &[f64], grad: &mut [f64]) -> f64 {
        let arity = kind.arity();
        let mask = kind.position_mask();
        let mut total = 0.0;
        for term in &self.terms {
            let w = term.weight;
            match term.kind {
                TermKind::MovePrimitive => {
                    for (j, &i) in term.indices.iter().enumerate() {
                        let tgt = Point3::new(term.target[3 * j], term.target[3 * j + 1], term.target[3 * j + 2]);
                        let (v, g) = norm_grad(center_of(kind, a, i) - tgt);
                        total += w * v;
                        add_center_grad(kind, grad, i, g * w);
                    }
                }
                TermKind::SetRadius => {
                    let slot = radius_slot(kind).expect("validated");
                    for (&i, &r_hat) in term.indices.iter().zip(&term.target) {
                        let r = a[i * arity + slot].exp();
                        let (v, s) = abs_grad(r - r_hat);
                        total += w * v;
                        grad[i * arity + slot] += w * s * r;
                    }
                }
                TermKind::PairDistance => {
                    let (i, j) = (term.indices[0], term.indices[1]);
                    let (d, u) = norm_grad(center_of(kind, a, i) - center_of(kind, a, j));
                    let (v, s) = abs_grad(d - term.target[0]);
                    total += w * v;
                    add_center_grad(kind, grad, i, u * (w * s));
                    add_center_grad(kind, grad, j, u * (-w * s));
                }
                TermKind::MatchAttributes => {
                    for (&i, &t) in term.indices.iter().zip(&term.target) {
                        let positional = mask[i % arity];
                        let value = if positional { a[i] } else { a[i].exp() };
                        let (v, s) = abs_grad(value - t);
                        total += w * v;
                        grad[i] += w * s * if positional { 1.0 } else { value };
                    }
                }
                TermKind::MatchHeights => {
                    for (&i, &h) in term.indices.iter().zip(&term.target) {
                        let (v, s) = abs_grad(center_of(kind, a, i).y - h);
                        total += w * v;
                        add_center_grad(kind, grad, i, Point3::new(0.0, w * s, 0.0));
                    }
                }
            }
        }
        total
    }
}

/// Objective value for a primitive set.
pub fn loss_manipulation(set: &PrimitiveSet, objective: &ManipulationObjective) -> Result<f64> {
    objective.validate(set.kind(), set.len())?;
    let mut scratch = vec![0.0; set.attributes().len()];
    Ok(objective.value_and_grad(set.kind(), set.attributes(), &mut scratch))
}

/// Objective gradient with respect to a set's raw attributes.
pub fn loss_manipulation_grad(set: &PrimitiveSet, objective: &ManipulationObjective) -> Result<Vec<f64>> {
    objective.validate(set.kind(), set.len())?;
    let mut grad = vec![0.0; set.attributes().len()];
    objective.value_and_grad(set.kind(), set.attributes(), &mut grad);
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Weight of the norm penalty.
    pub gamma: f64,
    /// Squared norm below which the penalty is flat.
    pub beta: f64,
    /// First trial step of the line search.
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop once an accepted step lowers the total by less than this.
    pub convergence_tol: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self::for_latent_dim(128)
    }
}

impl RegConfig {
    /// Defaults with the flat region sized to the prior's mean squared norm.
    pub fn for_latent_dim(latent_dim: usize) -> Self {
        RegConfig {
            gamma: 0.01,
            beta: latent_dim as f64,
            step_size: 0.05,
            max_steps: 200,
            convergence_tol: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta), ("step_size", self.step_size)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::invalid("convergence_tol must be non-negative"));
        }
        Ok(())
    }
}

/// `gamma * max(||z||^2, beta)`.
pub fn loss_reg(z: &[f64], cfg: &RegConfig) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    cfg.gamma * sq.max(cfg.beta)
}

/// Gradient of [`loss_reg`]: zero inside the flat region, `2 gamma z` outside.
pub fn loss_reg_grad(z: &[f64], cfg: &RegConfig) -> Vec<f64> {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    if sq > cfg.beta {
        z.iter().map(|v| 2.0 * cfg.gamma * v).collect()
    } else {
        vec![0.0; z.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position in the session history; 0 is the starting code.
    pub step: usize,
    pub z: Vec<f64>,
    /// Raw attributes decoded from `z`.
    pub alpha: Vec<f64>,
    pub l_man: f64,
    pub l_reg: f64,
    /// Accepted step length (0 for the starting record).
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxSteps,
    /// No step length in the line search lowered the objective.
    Stalled,
    /// A gradient or loss stopped being finite; the trace ends before it.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub steps: usize,
    pub stop: StopReason,
    pub initial_l_man: f64,
    pub final_l_man: f64,
    pub final_l_reg: f64,
}

/// One shape being edited: its current code and every accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    z: Vec<f64>,
    history: Vec<StepRecord>,
}

impl Session {
    pub fn new(id: impl Into<String>, z0: Vec<f64>) -> Result<Self> {
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial latent code"));
        }
        Ok(Session {
            id: id.into(),
            z: z0,
            history: Vec::new(),
        })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    /// Gradient descent on objective plus norm penalty from the current
    /// code, with a halving line search. Continues the history.
    pub fn run(
        &mut self,
        decoders: &Decoders,
        objective: &ManipulationObjective,
        cfg: &RegConfig,
        max_steps: usize,
    ) -> Result<RunOutcome> {
        cfg.validate()?;
        let kind = decoders.config().primitive_kind;
        objective.validate(kind, decoders.config().n_primitives)?;

        let eval = |z: &[f64]| -> Result<(f64, f64, Vec<f64>)> {
            let a = decoders.coarse_attributes(z)?;
            let mut scratch = vec![0.0; a.len()];
            Ok((objective.value_and_grad(kind, &a, &mut scratch), loss_reg(z, cfg), a))
        };
        let (mut l_man, mut l_reg, mut alpha) = eval(&self.z)?;
        let initial_l_man = l_man;
        if self.history.is_empty() {
            self.history.push(StepRecord {
                step: 0,
                z: self.z.clone(),
                alpha: alpha.clone(),
                l_man,
                l_reg,
                step_size: 0.0,
            });
        }
        let mut stop = StopReason::MaxSteps;
        let mut steps = 0;
        let mut trial = cfg.step_size;
        while steps < max_steps {
            let mut ga = vec![0.0; alpha.len()];
            objective.value_and_grad(kind, &alpha, &mut ga);
            let mut g = decoders.coarse_pullback(&self.z, &ga)?;
            for (gi, ri) in g.iter_mut().zip(loss_reg_grad(&self.z, cfg)) {
                *gi += ri;
            }
            if g.iter().any(|v| !v.is_finite()) {
                stop = StopReason::NonFinite;
                break;
            }
            if g.iter().all(|&v| v == 0.0) {
                stop = StopReason::Converged;
                break;
            }
            let current = l_man + l_reg;
            let mut eta = trial;
            let mut accepted = None;
            let mut halvings = 0;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = self.z.iter().zip(&g).map(|(z, g)| z - eta * g).collect();
                if cand.iter().all(|v| v.is_finite()) {
                    let (m, r, a) = eval(&cand)?;
                    if (m + r).is_finite() && m + r <= current {
                        accepted = Some((cand, m, r, a));
                        break;
                    }
                }
                eta *= 0.5;
                halvings += 1;
            }
            let Some((z, m, r, a)) = accepted else {
                stop = StopReason::Stalled;
                break;
            };
            trial = if halvings == 0 {
                (2.0 * eta).min(MAX_STEP_GROWTH * cfg.step_size)
            } else {
                eta
            };
            steps += 1;
            self.z = z;
            (l_man, l_reg, alpha) = (m, r, a);
            self.history.push(StepRecord {
                step: self.history.len(),
                z: self.z.clone(),
                alpha: alpha.clone(),
                l_man,
                l_reg,
                step_size: eta,
            });
            if current - (l_man + l_reg) < cfg.convergence_tol {
                stop = StopReason::Converged;
                break;
            }
        }
        Ok(RunOutcome {
            steps,
            stop,
            initial_l_man,
            final_l_man: l_man,
            final_l_reg: l_reg,
        })
    }

    /// History as JSON lines `{step, l_man, l_reg, alpha}` with attributes
    /// in user units.
    pub fn trace_jsonl(&self, kind: PrimitiveKind) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            l_man: f64,
            l_reg: f64,
            alpha: &'a [f64],
        }
        let mut out = String::new();
        for r in &self.history {
            let alpha = to_geometric_attributes(kind, &r.alpha);
            out.push_str(&serde_json::to_string(&Line {
                step: r.step,
                l_man: r.l_man,
                l_reg: r.l_reg,
                alpha: &alpha,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs one manipulation from `z0` for up to `cfg.max_steps` steps.
pub fn manipulate(
    decoders: &Decoders,
    z0: Vec<f64>,
    objective: &ManipulationObjective,
    cfg: &RegConfig,
) -> Result<(Session, RunOutcome)> {
    let mut session = Session::new("manipulation", z0)?;
    let outcome = session.run(decoders, objective, cfg, cfg.max_steps)?;
    Ok((session, outcome))
}

/// `(1 - t) * a + t * b` for `t` in `[0, 1]`.
pub fn interpolate_latent(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("codes of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect())
}

/// Pulls the masked attributes of `z_src`'s primitives toward
/// `target_geometric` (user units, full attribute vector) and leaves the
/// rest free. An empty mask leaves the code untouched.
pub fn interpolate_controlled(
    decoders: &Decoders,
    z_src: Vec<f64>,
    target_geometric: &[f64],
    mask: &[bool],
    cfg: &RegConfig,
) -> Result<(Session, RunOutcome)> {
    let dim = decoders.config().attribute_dim();
    if target_geometric.len() != dim || mask.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "target and mask need {dim} entries, got {} and {}",
            target_geometric.len(),
            mask.len()
        )));
    }
    let indices: Vec<usize> = (0..dim).filter(|&i| mask[i]).collect();
    let mut session = Session::new("interpolation", z_src)?;
    if indices.is_empty() {
        let alpha = decoders.coarse_attributes(session.z())?;
        session.history.push(StepRecord {
            step: 0,
            z: session.z.clone(),
            alpha,
            l_man: 0.0,
            l_reg: loss_reg(session.z(), cfg),
            step_size: 0.0,
        });
        let outcome = RunOutcome {
            steps: 0,
            stop: StopReason::Converged,
            initial_l_man: 0.0,
            final_l_man: 0.0,
            final_l_reg: loss_reg(session.z(), cfg),
        };
        return Ok((session, outcome));
    }
    let target = indices.iter().map(|&i| target_geometric[i]).collect();
    let objective = ManipulationObjective::single(TermKind::MatchAttributes, indices, target);
    let outcome = session.run(decoders, &objective, cfg, cfg.max_steps)?;
    Ok((session, outcome))
}

/// For each point, the primitive with the smallest signed distance (lowest
/// index on ties).
pub fn correspondence(points: &[Point3], set: &PrimitiveSet) -> Vec<usize> {
    let mut dist = Vec::with_capacity(set.len());
    points
        .iter()
        .map(|&p| {
            set.distances_into(p, &mut dist);
            let mut best = 0;
            for (i, &d) in dist.iter().enumerate() {
                if d < dist[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fits a posterior for `shape` with frozen decoders and returns it with
/// the starting code for editing (its mean).
pub fn encode_for_editing(
    shape: &ShapeData,
    params: &DecoderParams,
    config: &NetConfig,
    hp: &Hyperparams,
    steps: usize,
    seed: u64,
) -> Result<(LatentState, Vec<f64>)> {
    let (state, _) = encode_shape(shape, params, config, hp, steps, hp.lr_latent, seed)?;
    let z0 = state.mu.clone();
    Ok((state, z0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Primitive;

    fn two_spheres() -> PrimitiveSet {
        PrimitiveSet::from_primitives(&[
            Primitive::sphere(Point3::ZERO, 0.5).unwrap(),
            Primitive::sphere(Point3::new(1.0, 0.0, 0.0), 0.25).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn objective_examples() {
        let set = two_spheres();
        let mv = ManipulationObjective::move_primitive(0, Point3::new(0.0, 3.0, 4.0));
        assert_eq!(loss_manipulation(&set, &mv).unwrap(), 5.0);
        let here = ManipulationObjective::move_primitive(1, Point3::new(1.0, 0.0, 0.0));
        assert_eq!(loss_manipulation(&set, &here).unwrap(), 0.0);
        let pair = ManipulationObjective::single(TermKind::PairDistance, vec![0, 1], vec![1.0]);
        assert_eq!(loss_manipulation(&set, &pair).unwrap(), 0.0);
        let r = ManipulationObjective::single(TermKind::SetRadius, vec![0], vec![0.75]);
        assert!((loss_manipulation(&set, &r).unwrap() - 0.25).abs() < 1e-15);
        let h = ManipulationObjective::single(TermKind::MatchHeights, vec![1], vec![-0.5]);
        assert_eq!(loss_manipulation(&set, &h).unwrap(), 0.5);
        let m = ManipulationObjective::single(TermKind::MatchAttributes, vec![4, 7], vec![1.0, 0.5]);
        assert!((loss_manipulation(&set, &m).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let set = PrimitiveSet::from_primitives(&[
            Primitive::capsule(Point3::new(0.1, 0.2, -0.1), Point3::new(0.4, -0.3, 0.2), 0.2).unwrap(),
            Primitive::capsule(Point3::new(-0.5, 0.1, 0.3), Point3::new(-0.2, 0.6, 0.0), 0.1).unwrap(),
        ])
        .unwrap();
        let obj = ManipulationObjective {
            terms: vec![
                ObjectiveTerm {
                    kind: TermKind::MovePrimitive,
                    indices: vec![0],
                    target: vec![0.3, 0.3, 0.3],
                    weight: 1.5,
                },
                ObjectiveTerm {
                    kind: TermKind::SetRadius,
                    indices: vec![1],
                    target: vec![0.3],
                    weight: 1.0,
                },
                ObjectiveTerm {
                    kind: TermKind::PairDistance,
                    indices: vec![0, 1],
                    target: vec![0.2],
                    weight: 0.5,
                },
                ObjectiveTerm {
                    kind: TermKind::MatchAttributes,
                    indices: vec![2, 6, 10],
                    target: vec![0.5, 0.1, 0.0],
                    weight: 2.0,
                },
                ObjectiveTerm {
                    kind: TermKind::MatchHeights,
                    indices: vec![1],
                    target: vec![0.9],
                    weight: 1.0,
                },
            ],
        };
        let grad = loss_manipulation_grad(&set, &obj).unwrap();
        let h = 1e-6;
        for i in 0..set.attributes().len() {
            let shifted = |d: f64| {
                let mut a = set.attributes().to_vec();
                a[i] += d;
                loss_manipulation(&PrimitiveSet::from_flat(set.kind(), a).unwrap(), &obj).unwrap()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "slot {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn validation_names_the_field() {
        let obj = ManipulationObjective::move_primitive(5, Point3::ZERO);
        let err = obj.validate(PrimitiveKind::Sphere, 2).unwrap_err();
        assert_eq!(err.path, "terms[0].indices[0]");
        let short = ManipulationObjective::single(TermKind::MovePrimitive, vec![0], vec![1.0]);
        assert_eq!(short.validate(PrimitiveKind::Sphere, 2).unwrap_err().path, "terms[0].target");
        let boxes = ManipulationObjective::single(TermKind::SetRadius, vec![0], vec![1.0]);
        assert_eq!(boxes.validate(PrimitiveKind::Box, 2).unwrap_err().path, "terms[0].kind");
        let none = ManipulationObjective { terms: vec![] };
        assert_eq!(none.validate(PrimitiveKind::Sphere, 2).unwrap_err().path, "terms");
        let mut neg = ManipulationObjective::move_primitive(0, Point3::ZERO);
        neg.terms[0].weight = 0.0;
        assert_eq!(neg.validate(PrimitiveKind::Sphere, 2).unwrap_err().path, "terms[0].weight");
    }

    #[test]
    fn wire_format_round_trips() {
        let json = r#"{"terms":[{"kind":"MovePrimitive","indices":[3],"target":[0.1,0.2,0.3],"weight":2.0},
                               {"kind":"SetRadius","indices":[1],"target":[0.4]}]}"#;
        let obj: ManipulationObjective = serde_json::from_str(json).unwrap();
        assert_eq!(obj.terms[1].weight, 1.0);
        let back: ManipulationObjective = serde_json::from_str(&serde_json::to_string(&obj).unwrap()).unwrap();
        assert_eq!(back, obj);
        assert!(serde_json::from_str::<ManipulationObjective>(r#"{"terms":[{"kind":"Teleport","indices":[0],"target":[]}]}"#).is_err());
    }

    #[test]
    fn regulariser_examples() {
        let cfg = RegConfig {
            gamma: 0.01,
            beta: 1.0,
            ..RegConfig::default()
        };
        let half = [0.5f64.sqrt(), 0.0];
        assert!((loss_reg(&half, &cfg) - 0.01).abs() < 1e-15);
        assert_eq!(loss_reg_grad(&half, &cfg), vec![0.0, 0.0]);
        let two = [2.0, 0.0];
        assert!((loss_reg(&two, &cfg) - 0.04).abs() < 1e-15);
        assert_eq!(loss_reg_grad(&two, &cfg), vec![0.04, 0.0]);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = [0.1, -0.7, 3.3];
        let b = [2.0, 0.25, -1.0];
        assert_eq!(interpolate_latent(&a, &b, 0.0).unwrap(), a.to_vec());
        assert_eq!(interpolate_latent(&a, &b, 1.0).unwrap(), b.to_vec());
        let mid = interpolate_latent(&a, &b, 0.5).unwrap();
        for (m, want) in mid.iter().zip([1.05, -0.225, 1.15]) {
            assert!((m - want).abs() < 1e-15);
        }
        assert!(interpolate_latent(&a, &b, 1.5).is_err());
        assert!(interpolate_latent(&a, &b, -0.1).is_err());
    }

    #[test]
    fn correspondence_examples() {
        let set = two_spheres();
        assert_eq!(correspondence(&[Point3::ZERO, Point3::new(1.0, 0.0, 0.0)], &set), vec![0, 1]);
        let twins = PrimitiveSet::from_primitives(&[
            Primitive::sphere(Point3::ZERO, 0.5).unwrap(),
            Primitive::sphere(Point3::ZERO, 0.5).unwrap(),
        ])
        .unwrap();
        assert_eq!(correspondence(&[Point3::new(0.3, 0.1, 0.0)], &twins), vec![0]);
    }
}
