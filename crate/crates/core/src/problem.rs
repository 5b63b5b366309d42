//! Problem instances: random states with finite decision sets, convex
//! objective and constraint functions, and the extended box set `Y`.
//!
//! Instances are usually read from JSON:
//!
//! ```json
//! {
//!   "states": [ { "id": 0, "prob": 0.1, "points": [[0.0, 0.0]] }, ... ],
//!   "objective": { "kind": "affine", "a": [1.5, 1.0], "b": 0.0 },
//!   "constraints": [ { "kind": "quadratic", "q": [1.0, 0.0], "c": [0.0, -1.0], "b": 0.5 } ],
//!   "extended_set": { "lower": [-5.0, -10.0], "upper": [5.0, 10.0] }
//! }
//! ```
//!
//! Constraints are always in the canonical `g_j(x) <= 0` form. When
//! `extended_set` is omitted, `Y` is the bounding box of all decision points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the probability simplex.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Slack allowed when testing whether a decision point lies in `Y`.
pub const CONTAINMENT_SLACK: f64 = 1e-12;

/// Above this dimension `compute_c` stops enumerating box corners jointly.
const MAX_JOINT_CORNER_DIM: usize = 16;

/// A convex function of the decision vector.
///
/// Both supported families are coordinate separable, which is what makes the
/// per-slot `y` subproblem solvable coordinate by coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConvexFn {
    /// `a^T x + b`
    Affine {
        a: Vec<f64>,
        #[serde(default)]
        b: f64,
    },
    /// `sum_i q_i x_i^2 + c^T x + b` with `q >= 0`.
    #[serde(rename = "quadratic")]
    SeparableQuadratic {
        q: Vec<f64>,
        c: Vec<f64>,
        #[serde(default)]
        b: f64,
    },
}

impl ConvexFn {
    pub fn affine(a: Vec<f64>, b: f64) -> Self {
        ConvexFn::Affine { a, b }
    }

    pub fn quadratic(q: Vec<f64>, c: Vec<f64>, b: f64) -> Self {
        ConvexFn::SeparableQuadratic { q, c, b }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexFn::Affine { a, .. } => a.len(),
            ConvexFn::SeparableQuadratic { q, .. } => q.len(),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, ConvexFn::Affine { .. })
    }

    /// Coefficient of `x_i^2`.
    #[inline]
    pub fn quad_coeff(&self, i: usize) -> f64 {
        match self {
            ConvexFn::Affine { .. } => 0.0,
            ConvexFn::SeparableQuadratic { q, .. } => q[i],
        }
    }

    /// Coefficient of `x_i`.
    #[inline]
    pub fn lin_coeff(&self, i: usize) -> f64 {
        match self {
            ConvexFn::Affine { a, .. } => a[i],
            ConvexFn::SeparableQuadratic { c, .. } => c[i],
        }
    }

    #[inline]
    pub fn offset(&self) -> f64 {
        match self {
            ConvexFn::Affine { b, .. } | ConvexFn::SeparableQuadratic { b, .. } => *b,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ConvexFn::Affine { a, b } => a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() + b,
            ConvexFn::SeparableQuadratic { q, c, b } => {
                q.iter()
                    .zip(c)
                    .zip(x)
                    .map(|((qi, ci), xi)| (qi * xi + ci) * xi)
                    .sum::<f64>()
                    + b
            }
        }
    }

    /// Gradient, which is also the unique subgradient for these families.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ConvexFn::Affine { a, .. } => a.clone(),
            ConvexFn::SeparableQuadratic { q, c, .. } => q
                .iter()
                .zip(c)
                .zip(x)
                .map(|((qi, ci), xi)| 2.0 * qi * xi + ci)
                .collect(),
        }
    }

    /// Maximum of the function over a box. Separable, so the maximum of each
    /// coordinate term sits at one of the two interval endpoints.
    pub fn max_over(&self, bx: &BoxSet) -> f64 {
        (0..self.dim())
            .map(|i| {
                let term = |t: f64| (self.quad_coeff(i) * t + self.lin_coeff(i)) * t;
                term(bx.lower[i]).max(term(bx.upper[i]))
            })
            .sum::<f64>()
            + self.offset()
    }

    /// Minimum of the function over a box.
    pub fn min_over(&self, bx: &BoxSet) -> f64 {
        (0..self.dim())
            .map(|i| {
                let (qi, ci) = (self.quad_coeff(i), self.lin_coeff(i));
                let term = |t: f64| (qi * t + ci) * t;
                let mut best = term(bx.lower[i]).min(term(bx.upper[i]));
                if qi > 0.0 {
                    let stationary = (-ci / (2.0 * qi)).clamp(bx.lower[i], bx.upper[i]);
                    best = best.min(term(stationary));
                }
                best
            })
            .sum::<f64>()
            + self.offset()
    }

    pub(crate) fn check(&self, name: &str, dim: usize, out: &mut Vec<String>) {
        if self.dim() != dim {
            out.push(format!("{name} has dimension {}, expected {dim}", self.dim()));
            return;
        }
        let finite = match self {
            ConvexFn::Affine { a, b } => a.iter().all(|v| v.is_finite()) && b.is_finite(),
            ConvexFn::SeparableQuadratic { q, c, b } => {
                if c.len() != q.len() {
                    out.push(format!("{name} has {} linear and {} quadratic coefficients", c.len(), q.len()));
                }
                if q.iter().any(|&v| v < 0.0) {
                    out.push(format!("{name} has a negative quadratic coefficient (not convex)"));
                }
                q.iter().chain(c).all(|v| v.is_finite()) && b.is_finite()
            }
        };
        if !finite {
            out.push(format!("{name} has non-finite coefficients"));
        }
    }
}

/// Upper bound on the Lipschitz constant of `f` over `bx` in the Euclidean
/// norm: `||a||` for affine functions, the largest gradient norm over the
/// box corners for separable quadratics.
pub fn lipschitz_estimate(f: &ConvexFn, bx: &BoxSet) -> f64 {
    match f {
        ConvexFn::Affine { a, .. } => a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        ConvexFn::SeparableQuadratic { q, c, .. } => q
            .iter()
            .zip(c)
            .enumerate()
            .map(|(i, (qi, ci))| {
                let lo = (2.0 * qi * bx.lower[i] + ci).abs();
                let hi = (2.0 * qi * bx.upper[i] + ci).abs();
                lo.max(hi).powi(2)
            })
            .sum::<f64>()
            .sqrt(),
    }
}

/// Axis-aligned hyper-rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        BoxSet { lower, upper }
    }

    /// Smallest box containing every point. Panics on an empty iterator.
    pub fn bounding<'a>(mut points: impl Iterator<Item = &'a Vec<f64>>) -> Self {
        let first = points.next().expect("bounding box of no points");
        let mut bx = BoxSet::new(first.clone(), first.clone());
        for p in points {
            for (i, &v) in p.iter().enumerate() {
                bx.lower[i] = bx.lower[i].min(v);
                bx.upper[i] = bx.upper[i].max(v);
            }
        }
        bx
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], slack: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= lo - slack && *v <= hi + slack)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// The `k`-th corner: bit `i` of `k` selects the upper bound of coordinate `i`.
    pub fn corner(&self, k: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|i| if k >> i & 1 == 1 { self.upper[i] } else { self.lower[i] })
            .collect()
    }

    pub fn corners(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..1usize << self.dim()).map(move |k| self.corner(k))
    }

    /// Box with each extent scaled about the center.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        BoxSet {
            lower: c.iter().zip(&self.lower).map(|(m, lo)| m + factor * (lo - m)).collect(),
            upper: c.iter().zip(&self.upper).map(|(m, hi)| m + factor * (hi - m)).collect(),
        }
    }
}

/// One random state: identifier, probability, and the vertices of its
/// decision set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub id: usize,
    pub prob: f64,
    pub points: Vec<Vec<f64>>,
}

/// On-disk form of a problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub states: Vec<State>,
    pub objective: ConvexFn,
    #[serde(default)]
    pub constraints: Vec<ConvexFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extended_set: Option<BoxSet>,
}

/// A full instance of the time-average stochastic optimization problem.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticProblem {
    pub states: Vec<State>,
    pub objective: ConvexFn,
    pub constraints: Vec<ConvexFn>,
    pub extended_set: BoxSet,
}

impl StochasticProblem {
    /// Builds an instance, defaulting `Y` to the bounding box of the
    /// decision points. No validation beyond what is needed to build.
    pub fn new(
        states: Vec<State>,
        objective: ConvexFn,
        constraints: Vec<ConvexFn>,
        extended_set: Option<BoxSet>,
    ) -> Result<Self> {
        let extended_set = match extended_set {
            Some(bx) => bx,
            None => {
                let mut pts = states.iter().flat_map(|s| s.points.iter()).peekable();
                if pts.peek().is_none() {
                    return Err(Error::InvalidProblem(vec!["no decision points".into()]));
                }
                BoxSet::bounding(pts)
            }
        };
        Ok(StochasticProblem { states, objective, constraints, extended_set })
    }

    pub fn from_file_model(file: ProblemFile) -> Result<Self> {
        Self::new(file.states, file.objective, file.constraints, file.extended_set)
    }

    /// Parses and validates a JSON instance.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(s)?;
        let problem = Self::from_file_model(file)?;
        let violations = problem.validate();
        if violations.is_empty() {
            Ok(problem)
        } else {
            Err(Error::InvalidProblem(violations))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// File model with `Y` written out explicitly.
    pub fn to_file_model(&self) -> ProblemFile {
        ProblemFile {
            states: self.states.clone(),
            objective: self.objective.clone(),
            constraints: self.constraints.clone(),
            extended_set: Some(self.extended_set.clone()),
        }
    }

    /// Decision dimension `I`.
    pub fn dim(&self) -> usize {
        self.extended_set.dim()
    }

    /// Number of constraints `J`.
    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Index of the state with the given id.
    pub fn state_index(&self, id: usize) -> Option<usize> {
        self.states.iter().position(|s| s.id == id)
    }

    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|g| g.value(x)).collect()
    }

    pub fn constraints_affine(&self) -> bool {
        self.constraints.iter().all(ConvexFn::is_affine)
    }

    /// `M_f`: Lipschitz bound of the objective over `Y`.
    pub fn objective_lipschitz(&self) -> f64 {
        lipschitz_estimate(&self.objective, &self.extended_set)
    }

    /// `M_gj` for every constraint.
    pub fn constraint_lipschitz(&self) -> Vec<f64> {
        self.constraints.iter().map(|g| lipschitz_estimate(g, &self.extended_set)).collect()
    }

    /// Every invariant violation found; empty means the instance is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let dim = self.dim();
        if dim == 0 {
            out.push("decision dimension must be at least 1".into());
        }
        if self.extended_set.upper.len() != dim {
            out.push("extended set bounds have different lengths".into());
        } else {
            for i in 0..dim {
                if !(self.extended_set.lower[i] <= self.extended_set.upper[i]) {
                    out.push(format!("extended set lower bound exceeds upper bound in coordinate {i}"));
                }
            }
        }
        if self.states.is_empty() {
            out.push("no states".into());
        }
        let mut sum = 0.0;
        for (k, s) in self.states.iter().enumerate() {
            if !(s.prob >= 0.0 && s.prob <= 1.0) {
                out.push(format!("probability of state {} is outside [0, 1] ({})", s.id, s.prob));
            }
            sum += s.prob;
            if self.states[..k].iter().any(|o| o.id == s.id) {
                out.push(format!("duplicate state id {}", s.id));
            }
            if s.points.is_empty() {
                out.push(format!("state {} has an empty decision set", s.id));
            }
            for (p, point) in s.points.iter().enumerate() {
                if point.len() != dim {
                    out.push(format!(
                        "state {} point {p} has dimension {}, expected {dim}",
                        s.id,
                        point.len()
                    ));
                } else if !self.extended_set.contains(point, CONTAINMENT_SLACK) {
                    out.push(format!("point outside Y: state {} point {p} {:?}", s.id, point));
                }
            }
        }
        if !self.states.is_empty() && (sum - 1.0).abs() > PROB_SUM_TOL {
            out.push(format!("probabilities sum to {sum}"));
        }
        self.objective.check("objective", dim, &mut out);
        for (j, g) in self.constraints.iter().enumerate() {
            g.check(&format!("constraint {}", j + 1), dim, &mut out);
        }
        out
    }
}

/// Upper bound on `sup [ ||g(y)||^2 + ||x - y||^2 ] / 2` over
/// `x` in the hull of all decision points and `y` in `Y`.
///
/// With affine constraints the integrand is jointly convex in `(x, y)`, so the
/// supremum is attained at a (vertex, corner) pair and is computed exactly.
/// Otherwise the two terms are bounded separately.
pub fn compute_c(problem: &StochasticProblem) -> f64 {
    let bx = &problem.extended_set;
    let vertices = problem.states.iter().flat_map(|s| s.points.iter());
    if problem.constraints_affine() && problem.dim() <= MAX_JOINT_CORNER_DIM {
        let corners: Vec<(Vec<f64>, f64)> = bx
            .corners()
            .map(|y| {
                let g2 = problem.constraints.iter().map(|g| g.value(&y).powi(2)).sum::<f64>();
                (y, g2)
            })
            .collect();
        let mut best: f64 = 0.0;
        for v in vertices {
            for (y, g2) in &corners {
                let d2 = v.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                best = best.max(g2 + d2);
            }
        }
        best / 2.0
    } else {
        let g_part: f64 = problem
            .constraints
            .iter()
            .map(|g| g.max_over(bx).powi(2).max(g.min_over(bx).powi(2)))
            .sum();
        let x_part = vertices
            .map(|v| {
                v.iter()
                    .enumerate()
                    .map(|(i, vi)| (vi - bx.lower[i]).powi(2).max((vi - bx.upper[i]).powi(2)))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        (g_part + x_part) / 2.0
    }
}
