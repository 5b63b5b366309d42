//! Dual of the embedded convex problem
//!
//! ```text
//! minimize    f(y)
//! subject to  g_j(y) <= 0,  y = sum_w pi_w x^w,  x^w in conv(X_w),  y in Y
//! ```
//!
//! whose dual function is
//!
//! ```text
//! d(w, z) = min_{y in Y} [ f(y) + w^T g(y) - z^T y ] + sum_w pi_w min_{x in X_w} z^T x.
//! ```
//!
//! The maximizer `(w*, z*)` is the point the scaled queue vector `Q(t)/V`
//! settles around. [`solve_dual`] finds it with multi-start projected
//! supergradient ascent followed by a central-cut ellipsoid polish whose
//! upper bound certifies the final gap. [`primal_grid_opt`] is an independent
//! brute-force primal oracle, and [`probe_geometry`] measures how fast `d`
//! falls off around the maximizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::StochasticProblem;
use crate::solvers::{argmin_linear, closed_form_into};

/// Dual variable `(w, z)` with `w >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub w: Vec<f64>,
    pub z: Vec<f64>,
}

impl DualPoint {
    pub fn new(w: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if let Some(j) = w.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidMultiplier(format!("w[{j}] = {} is negative", w[j])));
        }
        Ok(DualPoint { w, z })
    }

    pub fn zeros(problem: &StochasticProblem) -> Self {
        DualPoint { w: vec![0.0; problem.num_constraints()], z: vec![0.0; problem.dim()] }
    }

    /// Splits a concatenated `(w, z)` vector. Does not check the sign of `w`.
    pub fn from_slice(num_constraints: usize, v: &[f64]) -> Self {
        DualPoint { w: v[..num_constraints].to_vec(), z: v[num_constraints..].to_vec() }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.w.iter().chain(&self.z).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().chain(&self.z).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &DualPoint) -> f64 {
        self.to_vec().iter().zip(other.to_vec()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> DualPoint {
        DualPoint { w: self.w.iter().map(|v| v * s).collect(), z: self.z.iter().map(|v| v * s).collect() }
    }
}

/// Value of `d` at a point together with the minimizers that produce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEval {
    pub value: f64,
    /// `(g(y*), sum_w pi_w x^w* - y*)`
    pub supergradient: Vec<f64>,
    /// Minimizing decision-set index per state, in the problem's state order.
    pub x_index: Vec<usize>,
    pub x_star: Vec<Vec<f64>>,
    pub y_star: Vec<f64>,
    /// Per-state dual functions `d_w`, with `d = sum_w pi_w d_w`.
    pub state_values: Vec<f64>,
}

impl DualEval {
    /// Supergradient `(g(y*), x^w* - y*)` of the per-state function `d_w`.
    pub fn state_supergradient(&self, k: usize) -> Vec<f64> {
        let nc = self.supergradient.len() - self.y_star.len();
        let mut h = self.supergradient[..nc].to_vec();
        h.extend(self.x_star[k].iter().zip(&self.y_star).map(|(x, y)| x - y));
        h
    }
}

pub fn dual_value(problem: &StochasticProblem, lambda: &DualPoint) -> Result<DualEval> {
    if lambda.w.len() != problem.num_constraints() || lambda.z.len() != problem.dim() {
        return Err(Error::Dimension("dual point does not match the problem".into()));
    }
    if let Some(j) = lambda.w.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidMultiplier(format!("w[{j}] = {} is negative", lambda.w[j])));
    }
    Ok(eval_unchecked(problem, &lambda.w, &lambda.z))
}

fn eval_unchecked(problem: &StochasticProblem, w: &[f64], z: &[f64]) -> DualEval {
    let dim = problem.dim();
    let mut y = vec![0.0; dim];
    closed_form_into(problem, 1.0, w, z, &mut y);
    let g = problem.constraint_values(&y);
    let y_part = problem.objective.value(&y) + g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
        - z.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();

    let mut value = 0.0;
    let mut xbar = vec![0.0; dim];
    let mut x_index = Vec::with_capacity(problem.num_states());
    let mut x_star = Vec::with_capacity(problem.num_states());
    let mut state_values = Vec::with_capacity(problem.num_states());
    for st in &problem.states {
        let (k, m) = argmin_linear(&st.points, z).expect("validated problem has nonempty decision sets");
        let dw = y_part + m;
        value += st.prob * dw;
        for (acc, xi) in xbar.iter_mut().zip(&st.points[k]) {
            *acc += st.prob * xi;
        }
        x_index.push(k);
        x_star.push(st.points[k].clone());
        state_values.push(dw);
    }
    let mut supergradient = g;
    supergradient.extend(xbar.iter().zip(&y).map(|(x, y)| x - y));
    DualEval { value, supergradient, x_index, x_star, y_star: y, state_values }
}

fn project(v: &mut [f64], nc: usize) {
    for w in &mut v[..nc] {
        if *w < 0.0 {
            *w = 0.0;
        }
    }
}

/// Best-so-far trajectory of one projected supergradient ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentResult {
    pub best: DualPoint,
    pub best_value: f64,
    pub last: DualPoint,
    /// Best value after each iteration.
    pub best_history: Vec<f64>,
}

/// Projected supergradient ascent with steps `a / (1 + k b)`.
pub fn supergradient_ascent(
    problem: &StochasticProblem,
    start: &DualPoint,
    iterations: usize,
    a: f64,
    b: f64,
) -> Result<AscentResult> {
    let nc = problem.num_constraints();
    let mut lambda = start.to_vec();
    project(&mut lambda, nc);
    let first = DualPoint::from_slice(nc, &lambda);
    let mut best_value = dual_value(problem, &first)?.value;
    let mut best = lambda.clone();
    let mut best_history = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let ev = eval_unchecked(problem, &lambda[..nc], &lambda[nc..]);
        if ev.value > best_value {
            best_value = ev.value;
            best.clone_from(&lambda);
        }
        best_history.push(best_value);
        let step = a / (1.0 + k as f64 * b);
        for (l, h) in lambda.iter_mut().zip(&ev.supergradient) {
            *l += step * h;
        }
        project(&mut lambda, nc);
    }
    Ok(AscentResult {
        best: DualPoint::from_slice(nc, &best),
        best_value,
        last: DualPoint::from_slice(nc, &lambda),
        best_history,
    })
}

/// Outcome of the ellipsoid polish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolishResult {
    pub point: DualPoint,
    pub value: f64,
    /// Certified `max d - value`, valid when the maximizer lies in the
    /// initial ball.
    pub gap_bound: f64,
    pub iterations: usize,
}

/// Central-cut ellipsoid method started from the ball of `radius` around
/// `center`. Stops once the certified gap is at most `gap_tol (1 + |d|)`.
pub fn ellipsoid_polish(
    problem: &StochasticProblem,
    center: &DualPoint,
    radius: f64,
    gap_tol: f64,
    max_iter: usize,
) -> Result<PolishResult> {
    let nc = problem.num_constraints();
    let n = nc + problem.dim();
    let mut c = center.to_vec();
    let start = {
        let mut s = c.clone();
        project(&mut s, nc);
        s
    };
    let first = dual_value(problem, &DualPoint::from_slice(nc, &start))?;
    let mut best = start;
    let mut best_value = first.value;
    let mut upper = f64::INFINITY;

    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] = radius * radius;
    }
    let mut pa = vec![0.0; n];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        // keep the half-space {lambda : a^T (lambda - c) >= 0}
        let mut a = vec![0.0; n];
        let mut objective = None;
        if let Some(j) = (0..nc).find(|&j| c[j] < 0.0) {
            a[j] = 1.0;
        } else {
            let ev = eval_unchecked(problem, &c[..nc], &c[nc..]);
            if ev.value > best_value {
                best_value = ev.value;
                best.clone_from(&c);
            }
            if ev.supergradient.iter().all(|&h| h == 0.0) {
                upper = ev.value;
                break;
            }
            objective = Some(ev.value);
            a = ev.supergradient;
        }
        for i in 0..n {
            pa[i] = (0..n).map(|k| p[i * n + k] * a[k]).sum();
        }
        let apa: f64 = a.iter().zip(&pa).map(|(x, y)| x * y).sum();
        if !(apa > 0.0) {
            break;
        }
        let s = apa.sqrt();
        if let Some(v) = objective {
            // d <= d(c) + h^T (lambda - c) <= d(c) + s on the ellipsoid
            upper = upper.min(v + s);
        }
        if upper - best_value <= gap_tol * (1.0 + best_value.abs()) {
            break;
        }
        let nf = n as f64;
        if n == 1 {
            c[0] += 0.5 * pa[0] / s;
            p[0] *= 0.25;
        } else {
            for i in 0..n {
                c[i] += pa[i] / (s * (nf + 1.0));
            }
            let scale = nf * nf / (nf * nf - 1.0);
            let shrink = 2.0 / (nf + 1.0);
            for i in 0..n {
                for k in 0..n {
                    p[i * n + k] = scale * (p[i * n + k] - shrink * pa[i] * pa[k] / apa);
                }
            }
            for i in 0..n {
                for k in 0..i {
                    let m = 0.5 * (p[i * n + k] + p[k * n + i]);
                    p[i * n + k] = m;
                    p[k * n + i] = m;
                }
            }
        }
    }
    Ok(PolishResult {
        point: DualPoint::from_slice(nc, &best),
        value: best_value,
        gap_bound: (upper - best_value).max(0.0),
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualOptions {
    pub starts: usize,
    /// Endpoint agreement needed for `unique_flag`.
    pub tol: f64,
    pub step_a: f64,
    pub step_b: f64,
    pub ascent_iterations: usize,
    /// Standard deviation of the random starting points.
    pub init_scale: f64,
    pub seed: u64,
    pub gap_tol: f64,
    pub polish_max_iter: usize,
    /// Relative gap below which a polish counts as converged.
    pub converged_tol: f64,
    /// Grid resolution for the primal cross-check; `None` picks the largest
    /// resolution up to 200 whose grid stays under [`GRID_BUDGET`] points.
    pub grid_resolution: Option<usize>,
    pub grid_slack: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            starts: 16,
            tol: 1e-3,
            step_a: 1.0,
            step_b: 0.01,
            ascent_iterations: 2000,
            init_scale: 3.0,
            seed: 0,
            gap_tol: 1e-13,
            polish_max_iter: 20_000,
            converged_tol: 1e-9,
            grid_resolution: None,
            grid_slack: DEFAULT_GRID_SLACK,
        }
    }
}

/// Result of [`solve_dual`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub lambda_star: DualPoint,
    pub d_star: f64,
    /// Optimal cost; equal to `d_star` under strong duality.
    pub f_opt: f64,
    /// Brute-force primal value, `None` if the grid was too large or had no
    /// feasible point.
    pub primal_grid_opt: Option<f64>,
    pub grid_resolution: Option<usize>,
    /// Largest pairwise distance between the polished endpoints.
    pub multi_start_spread: f64,
    pub unique_flag: bool,
    /// Every start reached a certified gap below the convergence tolerance.
    pub converged: bool,
    pub gap_bound: f64,
    pub endpoints: Vec<DualPoint>,
}

/// [`solve_dual_with`] using default options.
pub fn solve_dual(problem: &StochasticProblem, starts: usize, tol: f64) -> Result<DualSolution> {
    solve_dual_with(problem, &DualOptions { starts, tol, ..DualOptions::default() })
}

pub fn solve_dual_with(problem: &StochasticProblem, opts: &DualOptions) -> Result<DualSolution> {
    if opts.starts == 0 {
        return Err(Error::InvalidParameter("need at least one start".into()));
    }
    let nc = problem.num_constraints();
    let dim = problem.dim();
    let results: Vec<Result<PolishResult>> = (0..opts.starts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
            let start = if k == 0 {
                DualPoint::zeros(problem)
            } else {
                DualPoint {
                    w: (0..nc).map(|_| opts.init_scale * normal(&mut rng).abs()).collect(),
                    z: (0..dim).map(|_| opts.init_scale * normal(&mut rng)).collect(),
                }
            };
            let asc = supergradient_ascent(problem, &start, opts.ascent_iterations, opts.step_a, opts.step_b)?;
            let radius = 10.0 * (1.0 + asc.best.norm());
            ellipsoid_polish(problem, &asc.best, radius, opts.gap_tol, opts.polish_max_iter)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let best = results
        .iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");
    let mut spread: f64 = 0.0;
    for (i, a) in results.iter().enumerate() {
        for b in &results[i + 1..] {
            spread = spread.max(a.point.distance(&b.point));
        }
    }
    let converged = results
        .iter()
        .all(|r| r.gap_bound <= opts.converged_tol * (1.0 + r.value.abs()) && r.value.is_finite());

    let resolution = opts.grid_resolution.or_else(|| auto_grid_resolution(problem));
    let primal = match resolution {
        Some(res) => match primal_grid_opt_with_slack(problem, res, opts.grid_slack) {
            Ok(v) => Some(v),
            Err(Error::NoFeasibleGridPoint) | Err(Error::InvalidParameter(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };

    Ok(DualSolution {
        lambda_star: best.point.clone(),
        d_star: best.value,
        f_opt: best.value,
        primal_grid_opt: primal,
        grid_resolution: resolution,
        multi_start_spread: spread,
        unique_flag: spread < opts.tol,
        converged,
        gap_bound: best.gap_bound,
        endpoints: results.into_iter().map(|r| r.point).collect(),
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize, nonneg: &[bool]) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for (ui, &nn) in u.iter_mut().zip(nonneg) {
            if nn {
                *ui = ui.abs();
            }
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            u.iter_mut().for_each(|v| *v /= norm);
            return u;
        }
    }
}

pub const DEFAULT_GRID_SLACK: f64 = 1e-9;

/// Point budget for the automatic primal grid.
pub const GRID_BUDGET: f64 = 2e6;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Number of grid points `primal_grid_opt` visits at `resolution`.
pub fn primal_grid_size(problem: &StochasticProblem, resolution: usize) -> f64 {
    problem
        .states
        .iter()
        .map(|s| if s.points.len() == 1 { 1.0 } else { binomial(resolution + s.points.len() - 1, s.points.len() - 1) })
        .product()
}

fn auto_grid_resolution(problem: &StochasticProblem) -> Option<usize> {
    if problem.dim() > 3 {
        return None;
    }
    (1..=200).rev().step_by(1).find(|&r| primal_grid_size(problem, r) <= GRID_BUDGET)
}

/// [`primal_grid_opt_with_slack`] with the default slack.
pub fn primal_grid_opt(problem: &StochasticProblem, resolution: usize) -> Result<f64> {
    primal_grid_opt_with_slack(problem, resolution, DEFAULT_GRID_SLACK)
}

/// Minimum of `f(sum_w pi_w x^w)` over simplex-grid points `x^w` of each
/// `conv(X_w)` with weights in multiples of `1 / resolution`, keeping points
/// with `g_j <= slack`. With zero slack every kept point is primal feasible,
/// so the result is an upper bound on the optimal cost.
pub fn primal_grid_opt_with_slack(problem: &StochasticProblem, resolution: usize, slack: f64) -> Result<f64> {
    if resolution == 0 {
        return Err(Error::InvalidParameter("grid resolution must be positive".into()));
    }
    let size = primal_grid_size(problem, resolution);
    if size > 5e7 {
        return Err(Error::InvalidParameter(format!("grid of {size:.3e} points is too large")));
    }
    let dim = problem.dim();
    let per_state: Vec<Vec<Vec<f64>>> = problem
        .states
        .iter()
        .map(|s| {
            let mut out = Vec::new();
            let m = s.points.len();
            let mut counts = vec![0usize; m];
            compositions(resolution, 0, &mut counts, &mut |c| {
                let mut p = vec![0.0; dim];
                for (k, &ck) in c.iter().enumerate() {
                    if ck > 0 {
                        let wgt = s.prob * ck as f64 / resolution as f64;
                        for (pi, xi) in p.iter_mut().zip(&s.points[k]) {
                            *pi += wgt * xi;
                        }
                    }
                }
                out.push(p);
            });
            out
        })
        .collect();

    let mut best = f64::INFINITY;
    let mut acc = vec![0.0; dim];
    search(problem, &per_state, 0, &mut acc, slack, &mut best);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::NoFeasibleGridPoint)
    }
}

fn compositions(remaining: usize, k: usize, counts: &mut Vec<usize>, emit: &mut dyn FnMut(&[usize])) {
    let m = counts.len();
    if k == m - 1 {
        counts[k] = remaining;
        emit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[k] = c;
        compositions(remaining - c, k + 1, counts, emit);
    }
}

fn search(
    problem: &StochasticProblem,
    per_state: &[Vec<Vec<f64>>],
    k: usize,
    acc: &mut Vec<f64>,
    slack: f64,
    best: &mut f64,
) {
    if k == per_state.len() {
        if problem.constraints.iter().all(|g| g.value(acc) <= slack) {
            let v = problem.objective.value(acc);
            if v < *best {
                *best = v;
            }
        }
        return;
    }
    for p in &per_state[k] {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
        search(problem, per_state, k + 1, acc, slack, best);
        for (a, b) in acc.iter_mut().zip(p) {
            *a -= b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    Polyhedral,
    NonPolyhedral,
    Undetermined,
}

/// One probe: distance from the multiplier and the drop in `d` there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub distance: f64,
    pub decay: f64,
}

/// Smallest decay found at one radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    pub radius: f64,
    /// `min decay / distance^2` over the directions tried.
    pub curvature: f64,
    /// `min decay / distance`.
    pub slope: f64,
}

/// Measured shape of the dual around the multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryEstimate {
    pub kind: GeometryKind,
    /// Linear decay constant: `d* - d >= l_p |lambda - lambda*|` on every probe.
    pub l_p: Option<f64>,
    /// Quadratic decay constant on probes within `s`.
    pub l_g: Option<f64>,
    /// Linear decay constant on probes beyond `s`.
    pub l_g_prime: Option<f64>,
    pub s: Option<f64>,
    /// Exponent of the smallest decay against radius near the multiplier.
    pub decay_exponent: f64,
    pub sample_count: usize,
    pub per_radius: Vec<RadiusSummary>,
}

impl GeometryEstimate {
    fn undetermined(sample_count: usize, per_radius: Vec<RadiusSummary>, decay_exponent: f64) -> Self {
        GeometryEstimate {
            kind: GeometryKind::Undetermined,
            l_p: None,
            l_g: None,
            l_g_prime: None,
            s: None,
            decay_exponent,
            sample_count,
            per_radius,
        }
    }
}

/// Radii used by the command line when none are given.
pub const DEFAULT_PROBE_RADII: [f64; 12] = [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

/// Exponent separating linear from quadratic decay.
const KIND_THRESHOLD: f64 = 1.5;

/// Relative band around the small-radius curvature that defines `s`.
const QUADRATIC_BAND: f64 = 0.1;

const REFINE_STARTS: usize = 4;
const REFINE_STEPS: usize = 400;

/// Samples `lambda* + r u` over random unit directions and the given radii,
/// minimizing the decay `d* - d` per radius by random search on the sphere.
/// Directions keep `w >= 0`: components of `w*` at zero only move up, and
/// points are projected back onto `w >= 0` otherwise.
pub fn probe_geometry(
    problem: &StochasticProblem,
    solution: &DualSolution,
    directions: usize,
    radii: &[f64],
) -> Result<GeometryEstimate> {
    let mut radii: Vec<f64> = radii.iter().copied().filter(|r| *r > 0.0 && r.is_finite()).collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    if !solution.unique_flag {
        return Ok(GeometryEstimate::undetermined(0, Vec::new(), f64::NAN));
    }
    if radii.len() < 2 || directions == 0 {
        return Err(Error::InvalidParameter("need at least two radii and one direction".into()));
    }
    let nc = problem.num_constraints();
    let center = solution.lambda_star.to_vec();
    let n = center.len();
    let d_star = dual_value(problem, &solution.lambda_star)?.value;
    let nonneg: Vec<bool> = (0..n).map(|i| i < nc && center[i] <= 1e-9).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);

    let mut probes: Vec<Probe> = Vec::new();
    let mut per_radius = Vec::new();
    let mut carry: Option<Vec<f64>> = None;

    let sample = |u: &[f64], r: f64, probes: &mut Vec<Probe>| -> Option<(f64, Probe)> {
        let mut lam: Vec<f64> = center.iter().zip(u).map(|(c, ui)| c + r * ui).collect();
        project(&mut lam, nc);
        let dist = lam.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist <= 0.0 {
            return None;
        }
        let decay = d_star - eval_unchecked(problem, &lam[..nc], &lam[nc..]).value;
        let p = Probe { distance: dist, decay };
        probes.push(p);
        Some((decay / (dist * dist), p))
    };

    for &r in &radii {
        let mut cands: Vec<(f64, Vec<f64>)> = Vec::with_capacity(directions + 1);
        for _ in 0..directions {
            let u = unit_direction(&mut rng, n, &nonneg);
            if let Some((q, _)) = sample(&u, r, &mut probes) {
                cands.push((q, u));
            }
        }
        if let Some(u) = carry.take() {
            if let Some((q, _)) = sample(&u, r, &mut probes) {
                cands.push((q, u));
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0));
        cands.truncate(REFINE_STARTS);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (mut q, mut u) in cands {
            let mut sigma = 0.5;
            for _ in 0..REFINE_STEPS {
                let step = unit_direction(&mut rng, n, &vec![false; n]);
                let mut cand: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + sigma * b).collect();
                for (ci, &nn) in cand.iter_mut().zip(&nonneg) {
                    if nn && *ci < 0.0 {
                        *ci = 0.0;
                    }
                }
                let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    continue;
                }
                cand.iter_mut().for_each(|v| *v /= norm);
                match sample(&cand, r, &mut probes) {
                    Some((qc, _)) if qc < q => {
                        q = qc;
                        u = cand;
                        sigma = (sigma * 1.5).min(1.0);
                    }
                    _ => sigma *= 0.8,
                }
                if sigma < 1e-9 {
                    break;
                }
            }
            if best.as_ref().is_none_or(|(bq, _)| q < *bq) {
                best = Some((q, u));
            }
        }
        let (q, u) = best.expect("at least one candidate direction");
        per_radius.push(RadiusSummary { radius: r, curvature: q, slope: q * r });
        carry = Some(u);
    }

    let sample_count = probes.len();
    let head: Vec<&RadiusSummary> = per_radius.iter().take(3).collect();
    let xs: Vec<f64> = head.iter().map(|s| s.radius).collect();
    let ms: Vec<f64> = head.iter().map(|s| s.curvature * s.radius * s.radius).collect();
    let exponent = crate::stats::loglog_fit(&xs, &ms).map_or(f64::NAN, |f| f.slope);
    let flat = per_radius.iter().any(|s| !(s.curvature > 1e-12)) || probes.iter().any(|p| !(p.decay > 0.0));
    if flat || !exponent.is_finite() {
        return Ok(GeometryEstimate::undetermined(sample_count, per_radius, exponent));
    }

    if exponent < KIND_THRESHOLD {
        let l_p = probes.iter().map(|p| p.decay / p.distance).fold(f64::INFINITY, f64::min);
        return Ok(GeometryEstimate {
            kind: GeometryKind::Polyhedral,
            l_p: Some(l_p),
            l_g: None,
            l_g_prime: None,
            s: None,
            decay_exponent: exponent,
            sample_count,
            per_radius,
        });
    }

    let kappa0 = per_radius[0].curvature;
    let mut s = per_radius[0].radius;
    for rs in &per_radius {
        if (rs.curvature - kappa0).abs() <= QUADRATIC_BAND * kappa0 {
            s = rs.radius;
        } else {
            break;
        }
    }
    // radii are matched up to projection, so compare against s with a hair of slack
    let within = |p: &Probe| p.distance <= s * (1.0 + 1e-12);
    let l_g = probes.iter().filter(|p| within(p)).map(|p| p.decay / (p.distance * p.distance)).fold(f64::INFINITY, f64::min);
    let l_g_prime = probes
        .iter()
        .filter(|p| p.distance >= s * (1.0 - 1e-12))
        .map(|p| p.decay / p.distance)
        .fold(l_g * s, f64::min);
    Ok(GeometryEstimate {
        kind: GeometryKind::NonPolyhedral,
        l_p: None,
        l_g: Some(l_g),
        l_g_prime: Some(l_g_prime),
        s: Some(s),
        decay_exponent: exponent,
        sample_count,
        per_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{self, Builtin};
    use crate::problem::{BoxSet, ConvexFn, State};

    fn solved(b: Builtin) -> (StochasticProblem, DualSolution) {
        let p = builtin::problem(b);
        let s = solve_dual(&p, 16, 1e-3).unwrap();
        (p, s)
    }

    #[test]
    fn zero_multiplier_gives_min_of_objective() {
        let p = builtin::problem(Builtin::SimQuadratic);
        let ev = dual_value(&p, &DualPoint::zeros(&p)).unwrap();
        assert_eq!(ev.value, 0.0);
        let p = builtin::problem(Builtin::SimLinear);
        let ev = dual_value(&p, &DualPoint::zeros(&p)).unwrap();
        assert_eq!(ev.value, 1.5 * -5.0 - 10.0);
        assert!(dual_value(&p, &DualPoint { w: vec![-1.0, 0.0], z: vec![0.0, 0.0] }).is_err());
    }

    #[test]
    fn state_values_average_to_d() {
        let p = builtin::problem(Builtin::SimLinearNonunique);
        let lam = DualPoint::new(vec![0.3, 1.2, 0.0], vec![-0.7, 2.0]).unwrap();
        let ev = dual_value(&p, &lam).unwrap();
        let avg: f64 = p.states.iter().zip(&ev.state_values).map(|(s, v)| s.prob * v).sum();
        assert!((avg - ev.value).abs() < 1e-12);
    }

    // Optimum of the simulation instances, derived by hand: at (w*, z*) the
    // y-minimizer and the per-state x-minimizers are both set valued, and the
    // optimal averages x̄ = (0.375, 0.75) for the linear objective and
    // (-0.375, 2.25) for the quadratic one satisfy g_1 = 0, g_2 < 0.
    const LINEAR_OPT: f64 = 1.6875;
    const QUADRATIC_OPT: f64 = 5.203125;

    #[test]
    fn linear_instance_optimum() {
        let (p, s) = solved(Builtin::SimLinear);
        assert!(s.converged);
        assert!(s.unique_flag, "spread {}", s.multi_start_spread);
        assert!((s.d_star - LINEAR_OPT).abs() < 1e-9, "{}", s.d_star);
        let expected = DualPoint { w: vec![0.875, 0.0], z: vec![-0.25, 0.125] };
        assert!(s.lambda_star.distance(&expected) < 1e-6, "{:?}", s.lambda_star);
        let grid = s.primal_grid_opt.unwrap();
        assert!(grid >= s.d_star - 1e-9 && grid - s.d_star < 0.01, "{grid}");
        assert!((primal_grid_opt(&p, 200).unwrap() - LINEAR_OPT).abs() < 0.01);
    }

    #[test]
    fn quadratic_instance_optimum() {
        let (p, s) = solved(Builtin::SimQuadratic);
        assert!(s.converged);
        assert!(s.unique_flag, "spread {}", s.multi_start_spread);
        assert!((s.d_star - QUADRATIC_OPT).abs() < 1e-9, "{}", s.d_star);
        let expected = DualPoint { w: vec![2.0625, 0.0], z: vec![-4.875, 2.4375] };
        assert!(s.lambda_star.distance(&expected) < 1e-4, "{:?}", s.lambda_star);
        assert!((primal_grid_opt(&p, 200).unwrap() - QUADRATIC_OPT).abs() < 0.01);
    }

    #[test]
    fn extra_constraint_keeps_optimum() {
        for (b, opt) in [(Builtin::SimLinearNonunique, LINEAR_OPT), (Builtin::SimQuadraticNonunique, QUADRATIC_OPT)] {
            let (_, s) = solved(b);
            assert!((s.d_star - opt).abs() < 1e-7, "{b}: {}", s.d_star);
        }
    }

    #[test]
    fn no_constraints_only_z() {
        let p = StochasticProblem::new(
            vec![
                State { id: 0, prob: 0.5, points: vec![vec![0.0], vec![2.0]] },
                State { id: 1, prob: 0.5, points: vec![vec![1.0], vec![3.0]] },
            ],
            ConvexFn::quadratic(vec![1.0], vec![-4.0], 0.0),
            vec![],
            None,
        )
        .unwrap();
        let s = solve_dual(&p, 4, 1e-3).unwrap();
        assert!(s.lambda_star.w.is_empty());
        // f = (y - 2)^2 - 4 on x̄ in [0.5, 2.5]: optimum -4 at x̄ = 2
        assert!((s.d_star + 4.0).abs() < 1e-9);
        assert!(s.lambda_star.z[0].abs() < 1e-6);
        assert!((primal_grid_opt(&p, 50).unwrap() + 4.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_affine_grid_hits_a_vertex_combination() {
        let p = StochasticProblem::new(
            vec![
                State { id: 0, prob: 0.25, points: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]] },
                State { id: 1, prob: 0.75, points: vec![vec![2.0, 2.0], vec![-2.0, 1.0]] },
            ],
            ConvexFn::affine(vec![1.0, 2.0], 0.5),
            vec![],
            None,
        )
        .unwrap();
        let by_vertex = |pts: &[Vec<f64>]| pts.iter().map(|x| x[0] + 2.0 * x[1]).fold(f64::INFINITY, f64::min);
        let expected = 0.5 + 0.25 * by_vertex(&p.states[0].points) + 0.75 * by_vertex(&p.states[1].points);
        assert!((primal_grid_opt(&p, 7).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_grid_reports_error() {
        let p = StochasticProblem::new(
            vec![State { id: 0, prob: 1.0, points: vec![vec![0.0], vec![1.0]] }],
            ConvexFn::affine(vec![1.0], 0.0),
            vec![ConvexFn::affine(vec![-1.0], 2.0)],
            Some(BoxSet::new(vec![0.0], vec![3.0])),
        )
        .unwrap();
        assert!(matches!(primal_grid_opt(&p, 10), Err(Error::NoFeasibleGridPoint)));
    }

    #[test]
    fn ascent_best_is_monotone() {
        let p = builtin::problem(Builtin::SimQuadratic);
        let r = supergradient_ascent(&p, &DualPoint::new(vec![3.0, 1.0], vec![2.0, -1.0]).unwrap(), 500, 1.0, 0.01).unwrap();
        assert!(r.best_history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn geometry_kinds_of_the_simulation_instances() {
        let (p, s) = solved(Builtin::SimLinear);
        let g = probe_geometry(&p, &s, 64, &DEFAULT_PROBE_RADII).unwrap();
        assert_eq!(g.kind, GeometryKind::Polyhedral, "{g:?}");
        assert!(g.l_p.unwrap() > 0.0);
        let (p, s) = solved(Builtin::SimQuadratic);
        let g = probe_geometry(&p, &s, 64, &DEFAULT_PROBE_RADII).unwrap();
        assert_eq!(g.kind, GeometryKind::NonPolyhedral, "{g:?}");
        assert!(g.l_g.unwrap() > 0.0 && g.l_g_prime.unwrap() > 0.0 && g.s.unwrap() > 0.0);
    }

    #[test]
    fn synthetic_quadratic_dual_recovers_curvature() {
        // f = y^2 on Y = [-1, 1], one state at the origin: d(z) = -z^2/4 for
        // |z| <= 2, so the curvature constant is exactly 1/4
        let p = StochasticProblem::new(
            vec![State { id: 0, prob: 1.0, points: vec![vec![0.0]] }],
            ConvexFn::quadratic(vec![1.0], vec![0.0], 0.0),
            vec![],
            Some(BoxSet::new(vec![-1.0], vec![1.0])),
        )
        .unwrap();
        let s = solve_dual(&p, 8, 1e-3).unwrap();
        assert!(s.lambda_star.z[0].abs() < 1e-5);
        let g = probe_geometry(&p, &s, 16, &[0.01, 0.1, 0.5, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.kind, GeometryKind::NonPolyhedral);
        assert!((g.l_g.unwrap() - 0.25).abs() <= 0.05 * 0.25, "{g:?}");
        assert!((g.s.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_unique_solution_gives_undetermined() {
        let (p, mut s) = solved(Builtin::SimLinear);
        s.unique_flag = false;
        assert_eq!(probe_geometry(&p, &s, 8, &DEFAULT_PROBE_RADII).unwrap().kind, GeometryKind::Undetermined);
    }
}
