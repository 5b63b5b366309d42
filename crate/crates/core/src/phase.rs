//! Transient and steady-state analysis around the scaled multiplier `V λ*`.
//!
//! `K(t) = ||Q(t) - V λ*||` moves by at most `sqrt(2C)` per slot and drifts
//! down whenever it exceeds a regime-dependent threshold. That gives an
//! exponential moment bound `E[e^{r K(t)}] <= D + e^{r k0}` after the first
//! entry into the threshold ball, and from it the `O(1/T)` steady-state
//! convergence of time averages. This module evaluates those constants,
//! measures the same quantities on simulated paths, and runs the
//! convergence-rate study.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::Evaluation;
use crate::dual::{GeometryEstimate, GeometryKind};
use crate::engine::{run_observed, RunConfig, SlotRecord, TraceGranularity};
use crate::error::{Error, Result};
use crate::problem::{compute_c, StochasticProblem};
use crate::stats::{loglog_fit, mean, std_error, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Polyhedral,
    NonPolyhedral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub name: String,
    pub holds: bool,
}

/// Constants of the concentration argument for one `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConstants {
    pub regime: Regime,
    pub v: f64,
    pub c: f64,
    /// Per-slot bound on `|K(t+1) - K(t)|`: `sqrt(2C)`.
    pub delta: f64,
    /// Guaranteed downward drift of `K` above the threshold.
    pub beta: f64,
    /// Distance above which `K` drifts down: `B_P` or `B_G(V)`.
    pub threshold: f64,
    pub b_p: Option<f64>,
    pub b_g: Option<f64>,
    pub b_g_prime: Option<f64>,
    pub r: f64,
    pub rho: f64,
    pub d: f64,
    /// Steady-state bound on `E[K]`.
    pub u: f64,
    /// Steady-state bound on `E[K^2]`.
    pub u_prime: f64,
    /// Drift rate of `K` during the transient: `L_P / 2`, or
    /// `min(1/sqrt(V), L_G'/2)` without polyhedral structure.
    pub transient_rate: f64,
    pub preconditions: Vec<Precondition>,
}

/// `r`, `rho` and `D` of the concentration bound for increments at most
/// `delta`, drift `-beta` above `threshold`.
pub fn concentration_parameters(delta: f64, beta: f64, threshold: f64) -> (f64, f64, f64) {
    let r = beta / (delta * delta + delta * beta / 3.0);
    let rho = 1.0 - r * beta / 2.0;
    let d = ((r * delta).exp() - rho) * (r * threshold).exp() / (1.0 - rho);
    (r, rho, d)
}

pub fn b_p(l_p: f64, c: f64) -> f64 {
    (l_p / 2.0).max(2.0 * c / l_p)
}

pub fn b_g(v: f64, l_g: f64, c: f64) -> f64 {
    (1.0 / v.sqrt()).max(v.sqrt() * (1.0 + (1.0 + 4.0 * l_g * c).sqrt()) / (2.0 * l_g))
}

pub fn b_g_prime(l_g_prime: f64, c: f64) -> f64 {
    (l_g_prime / 2.0).max(2.0 * c / l_g_prime)
}

impl PhaseConstants {
    pub fn new(problem: &StochasticProblem, v: f64, geometry: &GeometryEstimate) -> Result<Self> {
        Self::with_c(compute_c(problem), v, geometry)
    }

    /// Constants for a given drift constant `C`.
    pub fn with_c(c: f64, v: f64, geometry: &GeometryEstimate) -> Result<Self> {
        if !(v > 0.0) {
            return Err(Error::InvalidParameter(format!("V must be positive, got {v}")));
        }
        let delta = (2.0 * c).sqrt();
        match geometry.kind {
            GeometryKind::Polyhedral => {
                let l_p = geometry.l_p.filter(|l| *l > 0.0).ok_or(Error::GeometryRequired)?;
                let bp = b_p(l_p, c);
                let beta = l_p / 2.0;
                Ok(Self::assemble(Regime::Polyhedral, v, c, delta, beta, bp, beta, |s| {
                    s.b_p = Some(bp);
                }))
            }
            GeometryKind::NonPolyhedral => {
                let (l_g, l_gp, s_rad) = match (geometry.l_g, geometry.l_g_prime, geometry.s) {
                    (Some(a), Some(b), Some(s)) if a > 0.0 && b > 0.0 && s > 0.0 => (a, b, s),
                    _ => return Err(Error::GeometryRequired),
                };
                let bg = b_g(v, l_g, c);
                let bgp = b_g_prime(l_gp, c);
                let beta = 1.0 / v.sqrt();
                let rate = (1.0 / v.sqrt()).min(l_gp / 2.0);
                Ok(Self::assemble(Regime::NonPolyhedral, v, c, delta, beta, bg, rate, |s| {
                    s.b_g = Some(bg);
                    s.b_g_prime = Some(bgp);
                    s.preconditions.push(Precondition { name: "B_G(V) < S V".into(), holds: bg < s_rad * v });
                    s.preconditions.push(Precondition { name: "B_G' <= S V".into(), holds: bgp <= s_rad * v });
                    s.preconditions.push(Precondition { name: "sqrt(V) >= 2 / L_G'".into(), holds: v.sqrt() >= 2.0 / l_gp });
                }))
            }
            GeometryKind::Undetermined => Err(Error::GeometryRequired),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        regime: Regime,
        v: f64,
        c: f64,
        delta: f64,
        beta: f64,
        threshold: f64,
        transient_rate: f64,
        fill: impl FnOnce(&mut PhaseConstants),
    ) -> Self {
        let (r, rho, d) = concentration_parameters(delta, beta, threshold);
        let tail = d + (r * threshold).exp();
        let mut s = PhaseConstants {
            regime,
            v,
            c,
            delta,
            beta,
            threshold,
            b_p: None,
            b_g: None,
            b_g_prime: None,
            r,
            rho,
            d,
            u: tail.ln() / r,
            u_prime: 2.0 * tail / (r * r),
            transient_rate,
            preconditions: vec![Precondition { name: "beta <= delta".into(), holds: beta <= delta }],
        };
        fill(&mut s);
        s
    }

    pub fn preconditions_hold(&self) -> bool {
        self.preconditions.iter().all(|p| p.holds)
    }

    /// Bound on the expected transient time from `K(0) = k0`.
    pub fn transient_bound(&self, k0: f64) -> f64 {
        k0 / self.transient_rate
    }

    /// Steady-state bound on `E[f(x̄(t0, T))] - f_opt`.
    pub fn objective_bound(&self, t: f64, m_f: f64, lambda_norm: f64) -> f64 {
        2.0 * m_f * self.u / t + (self.u_prime + 4.0 * self.v * self.u * lambda_norm) / (2.0 * t * self.v) + self.c / self.v
    }

    /// Steady-state bound on `E[g_j(x̄(t0, T))]`.
    pub fn constraint_bound(&self, t: f64, m_gj: f64) -> f64 {
        2.0 * self.u / t + 2.0 * m_gj * self.u / t
    }
}

/// `||(w, z) - V λ*||`.
pub fn k_value(w: &[f64], z: &[f64], v: f64, lambda: &[f64]) -> f64 {
    w.iter().chain(z).zip(lambda).map(|(q, l)| (q - v * l).powi(2)).sum::<f64>().sqrt()
}

/// `K(t)` for each queue state `(W(t), Z(t))` in order.
pub fn k_series<'a, I>(queues: I, v: f64, lambda: &[f64]) -> Vec<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    queues.into_iter().map(|(w, z)| k_value(w, z, v, lambda)).collect()
}

/// `K(0..=horizon)` of a fully recorded run: one value per slot plus the
/// state after the last slot.
pub fn k_series_of_records(records: &[SlotRecord], v: f64, lambda: &[f64]) -> Vec<f64> {
    let mut k = k_series(records.iter().map(|r| (r.w.as_slice(), r.z.as_slice())), v, lambda);
    if let Some(last) = records.last() {
        k.push(k_value(&last.w_next, &last.z_next, v, lambda));
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientTime {
    pub t_hat: u64,
    pub reached: bool,
}

/// First index with `K(t) < b`; the series length with `reached = false` if
/// there is none.
pub fn transient_time(k: &[f64], b: f64) -> TransientTime {
    match k.iter().position(|&v| v < b) {
        Some(t) => TransientTime { t_hat: t as u64, reached: true },
        None => TransientTime { t_hat: k.len() as u64, reached: false },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStats {
    pub count: usize,
    pub mean_k: f64,
    pub max_k: f64,
    pub mean_k2: f64,
    pub mean_exp_rk: f64,
}

pub fn steady_stats(k: &[f64], r: f64) -> SteadyStats {
    SteadyStats {
        count: k.len(),
        mean_k: mean(k),
        max_k: k.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_k2: k.iter().map(|v| v * v).sum::<f64>() / k.len() as f64,
        mean_exp_rk: k.iter().map(|v| (r * v).exp()).sum::<f64>() / k.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementCheck {
    pub bound: f64,
    pub max_increment: f64,
    pub violations: usize,
}

/// Counts slots with `|K(t+1) - K(t)| > bound + 1e-9`.
pub fn increment_check(k: &[f64], bound: f64) -> IncrementCheck {
    let mut max_increment: f64 = 0.0;
    let mut violations = 0;
    for w in k.windows(2) {
        let inc = (w[1] - w[0]).abs();
        max_increment = max_increment.max(inc);
        if inc > bound + 1e-9 {
            violations += 1;
        }
    }
    IncrementCheck { bound, max_increment, violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub m: f64,
    pub empirical: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub r: f64,
    pub d: f64,
    pub samples: usize,
    pub mean_exp_rk: f64,
    /// Mean over segments of `D + e^{r k0}`.
    pub moment_bound: f64,
    pub moment_factor: f64,
    pub moment_pass: bool,
    pub tail_factor: f64,
    pub tails: Vec<TailCheck>,
    pub increments: IncrementCheck,
}

impl ConcentrationReport {
    pub fn pass(&self) -> bool {
        self.moment_pass && self.tails.iter().all(|t| t.pass) && self.increments.violations == 0
    }
}

/// Compares steady segments (each starting at its own transient time, so
/// `k0` is the first value) against the moment and Chernoff tail bounds.
/// Segments are pooled; the bound is averaged over the segments' `k0`.
/// `moment_factor` and `tail_factor` scale the bounds to absorb sampling
/// error.
pub fn concentration_check(
    segments: &[&[f64]],
    constants: &PhaseConstants,
    tail_points: &[f64],
    moment_factor: f64,
    tail_factor: f64,
) -> ConcentrationReport {
    let r = constants.r;
    let d = constants.d;
    let segments: Vec<&[f64]> = segments.iter().copied().filter(|s| !s.is_empty()).collect();
    let samples: usize = segments.iter().map(|s| s.len()).sum();
    let sum_exp: f64 = segments.iter().flat_map(|s| s.iter()).map(|k| (r * k).exp()).sum();
    let mean_exp_rk = if samples == 0 { f64::NAN } else { sum_exp / samples as f64 };
    let moment_bound = mean(&segments.iter().map(|s| d + (r * s[0]).exp()).collect::<Vec<_>>());
    let tails = tail_points
        .iter()
        .map(|&m| {
            let hits = segments.iter().flat_map(|s| s.iter()).filter(|&&k| k >= m).count();
            let empirical = if samples == 0 { 0.0 } else { hits as f64 / samples as f64 };
            let bound = moment_bound * (-r * m).exp();
            TailCheck { m, empirical, bound, pass: empirical <= tail_factor * bound }
        })
        .collect();
    let mut increments = IncrementCheck { bound: constants.delta, max_increment: 0.0, violations: 0 };
    for s in &segments {
        let c = increment_check(s, constants.delta);
        increments.max_increment = increments.max_increment.max(c.max_increment);
        increments.violations += c.violations;
    }
    ConcentrationReport {
        r,
        d,
        samples,
        mean_exp_rk,
        moment_bound,
        moment_factor,
        moment_pass: samples > 0 && mean_exp_rk <= moment_factor * moment_bound,
        tail_factor,
        tails,
        increments,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub threshold: f64,
    pub count: usize,
    pub mean_increment: f64,
    pub std_error: f64,
    /// Mean increment is at most three standard errors above zero.
    pub pass: bool,
}

/// Empirical mean of `K(t+1) - K(t)` over slots with `K(t) >= threshold`.
pub fn conditional_drift(k: &[f64], threshold: f64) -> DriftCheck {
    let inc: Vec<f64> = k.windows(2).filter(|w| w[0] >= threshold).map(|w| w[1] - w[0]).collect();
    if inc.is_empty() {
        return DriftCheck { threshold, count: 0, mean_increment: 0.0, std_error: 0.0, pass: true };
    }
    let m = mean(&inc);
    let se = std_error(&inc);
    DriftCheck { threshold, count: inc.len(), mean_increment: m, std_error: se, pass: m <= 3.0 * se }
}

/// Checks `||Q(t1)||^2 - ||Q(t2)||^2 <= K(t1)^2 + 2 ||V λ*|| (K(t1) + K(t2))`
/// on the given slot pairs and returns the number of violations.
pub fn queue_square_check(q_norms: &[f64], k: &[f64], v_lambda_norm: f64, pairs: &[(usize, usize)]) -> usize {
    pairs
        .iter()
        .filter(|&&(a, b)| {
            let lhs = q_norms[a].powi(2) - q_norms[b].powi(2);
            let rhs = k[a].powi(2) + 2.0 * v_lambda_norm * (k[a] + k[b]);
            lhs > rhs + 1e-6
        })
        .count()
}

/// How the time average used for the convergence measurements is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AveragingMode {
    /// `x̄(0, t)`.
    Plain,
    /// Geometric restarts; at each time, the longer of the open frame and
    /// the last completed frame.
    Staggered,
    /// Average from the first slot with `K(t) < B`. Uses `λ*`, so it is a
    /// measurement device, not an algorithm.
    OracleStart,
}

impl std::str::FromStr for AveragingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(AveragingMode::Plain),
            "staggered" => Ok(AveragingMode::Staggered),
            "oracle-start" => Ok(AveragingMode::OracleStart),
            _ => Err(Error::InvalidParameter(format!("unknown averaging mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for AveragingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AveragingMode::Plain => "plain",
            AveragingMode::Staggered => "staggered",
            AveragingMode::OracleStart => "oracle-start",
        })
    }
}

/// Online estimator producing the time-average estimate of one mode.
#[derive(Debug, Clone)]
pub struct EstimateTracker {
    mode: AveragingMode,
    dim: usize,
    restarts: Vec<u64>,
    next_restart: usize,
    // open window
    start: Option<u64>,
    sum: Vec<f64>,
    len: u64,
    // last completed frame
    prev_mean: Option<Vec<f64>>,
    prev_len: u64,
    // oracle start
    v: f64,
    lambda: Vec<f64>,
    threshold: f64,
    t_hat: Option<u64>,
}

impl EstimateTracker {
    pub fn new(mode: AveragingMode, dim: usize, horizon: u64, stagger_base: f64) -> Result<Self> {
        let restarts = match mode {
            AveragingMode::Staggered => crate::averaging::StaggerSchedule::geometric(stagger_base, horizon)?.restart_slots,
            _ => Vec::new(),
        };
        Ok(EstimateTracker {
            mode,
            dim,
            restarts,
            next_restart: 0,
            start: None,
            sum: vec![0.0; dim],
            len: 0,
            prev_mean: None,
            prev_len: 0,
            v: 0.0,
            lambda: Vec::new(),
            threshold: f64::INFINITY,
            t_hat: None,
        })
    }

    /// Oracle-start parameters: averaging begins at the first `K(t) < threshold`.
    pub fn with_oracle(mut self, v: f64, lambda: Vec<f64>, threshold: f64) -> Self {
        self.v = v;
        self.lambda = lambda;
        self.threshold = threshold;
        self
    }

    pub fn t_hat(&self) -> Option<u64> {
        self.t_hat
    }

    pub fn observe(&mut self, rec: &SlotRecord) {
        match self.mode {
            AveragingMode::Plain => {}
            AveragingMode::Staggered => {
                if self.next_restart < self.restarts.len() && self.restarts[self.next_restart] == rec.t {
                    self.next_restart += 1;
                    if self.len > 0 {
                        self.prev_mean = Some(self.sum.iter().map(|s| s / self.len as f64).collect());
                        self.prev_len = self.len;
                    }
                    self.sum.iter_mut().for_each(|s| *s = 0.0);
                    self.len = 0;
                }
            }
            AveragingMode::OracleStart => {
                if self.t_hat.is_none() {
                    if k_value(&rec.w, &rec.z, self.v, &self.lambda) < self.threshold {
                        self.t_hat = Some(rec.t);
                    } else {
                        return;
                    }
                }
            }
        }
        if self.start.is_none() {
            self.start = Some(rec.t);
        }
        for (s, x) in self.sum.iter_mut().zip(&rec.x) {
            *s += x;
        }
        self.len += 1;
    }

    /// Current estimate of `x̄`, `None` before any averaging started.
    pub fn estimate(&self) -> Option<Vec<f64>> {
        if self.mode == AveragingMode::Staggered {
            if let Some(prev) = &self.prev_mean {
                if self.prev_len >= self.len {
                    return Some(prev.clone());
                }
            }
        }
        (self.len > 0).then(|| self.sum.iter().map(|s| s / self.len as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Errors of the estimate at one checkpoint of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub objective: f64,
    pub objective_gap: f64,
    pub violation: f64,
    pub constraints: Vec<f64>,
}

/// Runs one seed and records the estimate's errors after each checkpoint
/// (number of elapsed slots, strictly increasing, at most `horizon`).
/// Checkpoints without an estimate record infinite errors.
#[allow(clippy::too_many_arguments)]
pub fn error_path(
    problem: &StochasticProblem,
    f_opt: f64,
    v: f64,
    seed: u64,
    checkpoints: &[u64],
    mode: AveragingMode,
    stagger_base: f64,
    oracle: Option<(&[f64], f64)>,
) -> Result<(Vec<ErrorSample>, Option<u64>)> {
    let horizon = checkpoints.last().copied().unwrap_or(0);
    let mut tracker = EstimateTracker::new(mode, problem.dim(), horizon, stagger_base)?;
    if let Some((lambda, threshold)) = oracle {
        tracker = tracker.with_oracle(v, lambda.to_vec(), threshold);
    } else if mode == AveragingMode::OracleStart {
        return Err(Error::InvalidParameter("oracle-start needs a multiplier and threshold".into()));
    }
    let config = RunConfig::new(problem, v, horizon, seed).with_trace(TraceGranularity::None);
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    run_observed(problem, &config, None, |rec| {
        tracker.observe(rec);
        while next < checkpoints.len() && checkpoints[next] == rec.t + 1 {
            out.push(match tracker.estimate() {
                Some(xbar) => {
                    let e = Evaluation::at(problem, &xbar, &xbar);
                    ErrorSample {
                        objective: e.f_xbar,
                        objective_gap: (e.f_xbar - f_opt).abs(),
                        violation: e.max_violation(),
                        constraints: e.g_xbar,
                    }
                }
                None => ErrorSample {
                    objective: f64::INFINITY,
                    objective_gap: f64::INFINITY,
                    violation: f64::INFINITY,
                    constraints: vec![f64::INFINITY; problem.num_constraints()],
                },
            });
            next += 1;
        }
    })?;
    Ok((out, tracker.t_hat()))
}

/// Pooled mean of `K(t)` over the second half of each seed's run: a
/// data-driven steady-state radius around `V λ*`.
pub fn empirical_threshold(problem: &StochasticProblem, lambda: &[f64], v: f64, seeds: &[u64], horizon: u64) -> Result<f64> {
    let per_seed: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let config = RunConfig::new(problem, v, horizon, seed).with_trace(TraceGranularity::None);
            let (mut sum, mut n) = (0.0, 0u64);
            run_observed(problem, &config, None, |rec| {
                if rec.t >= horizon / 2 {
                    sum += k_value(&rec.w, &rec.z, v, lambda);
                    n += 1;
                }
            })?;
            Ok(sum / n.max(1) as f64)
        })
        .collect();
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(mean(&per_seed))
}

/// Transient time of each seed's run against a fixed threshold.
pub fn transient_times(
    problem: &StochasticProblem,
    lambda: &[f64],
    v: f64,
    threshold: f64,
    seeds: &[u64],
    horizon: u64,
) -> Result<Vec<TransientTime>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let config = RunConfig::new(problem, v, horizon, seed).with_trace(TraceGranularity::None);
            let mut hit = None;
            run_observed(problem, &config, None, |rec| {
                if hit.is_none() && k_value(&rec.w, &rec.z, v, lambda) < threshold {
                    hit = Some(rec.t);
                }
            })?;
            Ok(match hit {
                Some(t) => TransientTime { t_hat: t, reached: true },
                None => TransientTime { t_hat: horizon, reached: false },
            })
        })
        .collect()
}

/// Where the oracle-start threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    Fixed(f64),
    /// [`empirical_threshold`] over the same seeds and horizon.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub vs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<u64>,
    pub mode: AveragingMode,
    pub stagger_base: f64,
    pub threshold: ThresholdRule,
}

/// One row of a convergence table at `t` elapsed slots. The `_mean` and
/// `_se` columns average per-seed errors; `expected_gap` and
/// `expected_violation` are the errors of the seed-averaged objective and
/// constraint values, estimating `|E[f(x̄)] - f_opt|` and `max_j E[g_j(x̄)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub v: f64,
    pub t: u64,
    pub objective_gap_mean: f64,
    pub objective_gap_se: f64,
    pub violation_mean: f64,
    pub violation_se: f64,
    pub expected_gap: f64,
    pub expected_violation: f64,
    pub seeds: usize,
}

impl CurveRow {
    pub const HEADER: [&'static str; 9] = [
        "V",
        "T",
        "objective_gap",
        "objective_gap_se",
        "violation",
        "violation_se",
        "expected_gap",
        "expected_violation",
        "seeds",
    ];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.v,
            self.t as f64,
            self.objective_gap_mean,
            self.objective_gap_se,
            self.violation_mean,
            self.violation_se,
            self.expected_gap,
            self.expected_violation,
            self.seeds as f64,
        ]
    }
}

/// `n` roughly log-spaced checkpoints in `[1, horizon]`, always ending at
/// `horizon`.
pub fn geometric_checkpoints(horizon: u64, n: usize) -> Vec<u64> {
    if horizon == 0 {
        return Vec::new();
    }
    let n = n.max(2);
    let mut out: Vec<u64> = (0..n)
        .map(|k| ((horizon as f64).powf(k as f64 / (n - 1) as f64)).round() as u64)
        .map(|t| t.clamp(1, horizon))
        .collect();
    out.push(horizon);
    out.sort_unstable();
    out.dedup();
    out
}

/// Error-vs-time table across `V` values, averaged over seeds.
pub fn convergence_curve(
    problem: &StochasticProblem,
    f_opt: f64,
    lambda: &[f64],
    spec: &CurveSpec,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for &v in &spec.vs {
        let paths = seed_paths(problem, f_opt, lambda, v, spec)?;
        rows.extend(aggregate(v, f_opt, &spec.checkpoints, &paths));
    }
    Ok(rows)
}

fn seed_paths(
    problem: &StochasticProblem,
    f_opt: f64,
    lambda: &[f64],
    v: f64,
    spec: &CurveSpec,
) -> Result<Vec<Vec<ErrorSample>>> {
    let horizon = spec.checkpoints.last().copied().unwrap_or(0);
    let threshold = match (spec.mode, spec.threshold) {
        (AveragingMode::OracleStart, ThresholdRule::Fixed(b)) => Some(b),
        (AveragingMode::OracleStart, ThresholdRule::Empirical) => {
            Some(empirical_threshold(problem, lambda, v, &spec.seeds, horizon)?)
        }
        _ => None,
    };
    let paths: Vec<Result<Vec<ErrorSample>>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let oracle = threshold.map(|b| (lambda, b));
            error_path(problem, f_opt, v, seed, &spec.checkpoints, spec.mode, spec.stagger_base, oracle).map(|p| p.0)
        })
        .collect();
    paths.into_iter().collect()
}

fn aggregate(v: f64, f_opt: f64, checkpoints: &[u64], paths: &[Vec<ErrorSample>]) -> Vec<CurveRow> {
    checkpoints
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let gaps: Vec<f64> = paths.iter().map(|p| p[i].objective_gap).collect();
            let viols: Vec<f64> = paths.iter().map(|p| p[i].violation).collect();
            let objective = mean(&paths.iter().map(|p| p[i].objective).collect::<Vec<_>>());
            let nc = paths.first().map_or(0, |p| p[i].constraints.len());
            let expected_violation = (0..nc)
                .map(|j| mean(&paths.iter().map(|p| p[i].constraints[j]).collect::<Vec<_>>()))
                .fold(f64::NEG_INFINITY, f64::max);
            CurveRow {
                expected_gap: (objective - f_opt).abs(),
                expected_violation,
                v,
                t,
                objective_gap_mean: mean(&gaps),
                objective_gap_se: std_error(&gaps),
                violation_mean: mean(&viols),
                violation_se: std_error(&viols),
                seeds: paths.len(),
            }
        })
        .collect()
}

/// First checkpoint from which the expected objective gap and expected
/// violation both stay at or below `eps` through the end of the table.
pub fn slots_to_accuracy(rows: &[CurveRow], eps: f64) -> Option<u64> {
    let ok = |r: &CurveRow| r.expected_gap <= eps && r.expected_violation <= eps;
    if !rows.last().is_some_and(ok) {
        return None;
    }
    let first_good = rows.iter().rposition(|r| !ok(r)).map_or(0, |i| i + 1);
    Some(rows[first_good].t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub horizon: u64,
    pub checkpoints: usize,
    pub mode: AveragingMode,
    pub stagger_base: f64,
    pub threshold: ThresholdRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub epsilon: f64,
    pub v: f64,
    pub slots: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub mode: AveragingMode,
    pub seeds: usize,
    pub points: Vec<RatePoint>,
    /// Fit of `log slots` against `log (1/eps)`; `None` if some accuracy
    /// was never reached.
    pub fit: Option<LinearFit>,
}

impl RateStudy {
    pub fn exponent(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

/// Slots needed to reach accuracy `eps` with `V = 1/eps`, for each `eps`,
/// and the power law fitted through them.
pub fn rate_study(problem: &StochasticProblem, f_opt: f64, lambda: &[f64], spec: &RateSpec) -> Result<RateStudy> {
    let checkpoints = geometric_checkpoints(spec.horizon, spec.checkpoints);
    let mut points = Vec::new();
    for &eps in &spec.epsilons {
        let v = 1.0 / eps;
        let curve = CurveSpec {
            vs: vec![v],
            seeds: spec.seeds.clone(),
            checkpoints: checkpoints.clone(),
            mode: spec.mode,
            stagger_base: spec.stagger_base,
            threshold: spec.threshold,
        };
        let rows = convergence_curve(problem, f_opt, lambda, &curve)?;
        points.push(RatePoint { epsilon: eps, v, slots: slots_to_accuracy(&rows, eps) });
    }
    let fit = if points.iter().all(|p| p.slots.is_some()) {
        let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.epsilon).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.slots.unwrap() as f64).collect();
        loglog_fit(&xs, &ys)
    } else {
        None
    };
    Ok(RateStudy { mode: spec.mode, seeds: spec.seeds.len(), points, fit })
}

/// Everything `analyze` reports for one recorded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub v: f64,
    pub regime: Option<Regime>,
    pub constants: Option<PhaseConstants>,
    /// Threshold used for the transient time.
    pub threshold: f64,
    pub transient: TransientTime,
    pub k_initial: f64,
    pub transient_bound: Option<f64>,
    pub steady: Option<SteadyStats>,
    pub increments: IncrementCheck,
    pub concentration: Option<ConcentrationReport>,
    pub conditional_drift: Option<DriftCheck>,
    pub queue_square_violations: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub k_series: Vec<f64>,
}

/// Analyzes one queue path `Q(0), Q(1), ...` given as `(W, Z)` pairs.
/// `threshold` overrides the regime threshold for the transient time.
pub fn analyze_path(
    queues: &[(Vec<f64>, Vec<f64>)],
    v: f64,
    lambda: &[f64],
    c: f64,
    constants: Option<&PhaseConstants>,
    threshold: Option<f64>,
    keep_series: bool,
) -> Result<PhaseReport> {
    if queues.is_empty() {
        return Err(Error::InvalidParameter("empty queue path".into()));
    }
    let k = k_series(queues.iter().map(|(w, z)| (w.as_slice(), z.as_slice())), v, lambda);
    let b = threshold.or(constants.map(|c| c.threshold)).unwrap_or(f64::INFINITY);
    let transient = transient_time(&k, b);
    let steady_seg: &[f64] = &k[(transient.t_hat as usize).min(k.len())..];
    let delta = (2.0 * c).sqrt();
    let q_norms: Vec<f64> = queues
        .iter()
        .map(|(w, z)| w.iter().chain(z).map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let v_lambda_norm = v * lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n = k.len();
    let stride = (n / 64).max(1);
    let pairs: Vec<(usize, usize)> =
        (0..n).step_by(stride).flat_map(|a| (0..n).step_by(stride).map(move |b| (a, b))).collect();
    Ok(PhaseReport {
        v,
        regime: constants.map(|c| c.regime),
        constants: constants.cloned(),
        threshold: b,
        transient,
        k_initial: k[0],
        transient_bound: constants.map(|c| c.transient_bound(k[0])),
        steady: (!steady_seg.is_empty()).then(|| steady_stats(steady_seg, constants.map_or(0.0, |c| c.r))),
        increments: increment_check(&k, delta),
        concentration: match constants {
            Some(cs) if !steady_seg.is_empty() => Some(concentration_check(
                &[steady_seg],
                cs,
                &[cs.threshold, 2.0 * cs.threshold, 4.0 * cs.threshold],
                1.0,
                1.0,
            )),
            _ => None,
        },
        conditional_drift: constants.map(|cs| conditional_drift(steady_seg, cs.threshold)),
        queue_square_violations: queue_square_check(&q_norms, &k, v_lambda_norm, &pairs),
        k_series: if keep_series { k } else { Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{self, Builtin};
    use crate::dual::{solve_dual, DualPoint};
    use crate::engine::run;

    fn polyhedral(l_p: f64) -> GeometryEstimate {
        GeometryEstimate {
            kind: GeometryKind::Polyhedral,
            l_p: Some(l_p),
            l_g: None,
            l_g_prime: None,
            s: None,
            decay_exponent: 1.0,
            sample_count: 0,
            per_radius: Vec::new(),
        }
    }

    #[test]
    fn b_p_and_r_p_examples() {
        let pc = PhaseConstants::with_c(2.0, 100.0, &polyhedral(2.0)).unwrap();
        assert_eq!(pc.b_p, Some(2.0));
        assert!((pc.r - 6.0 / 28.0).abs() < 1e-15);
        assert!(pc.rho > 0.0 && pc.rho < 1.0);
    }

    /// The polyhedral constants written out in their closed forms.
    fn hand_polyhedral(l: f64, c: f64) -> (f64, f64, f64, f64, f64) {
        let bp = (l / 2.0).max(2.0 * c / l);
        let r = 3.0 * l / (12.0 * c + l * (2.0 * c).sqrt());
        let rho = 1.0 - r * l / 4.0;
        let d = (r * bp).exp() * ((r * (2.0 * c).sqrt()).exp() - rho) / (1.0 - rho);
        let u = (d + (r * bp).exp()).ln() / r;
        (bp, r, rho, d, u)
    }

    #[test]
    fn simulation_instance_constants() {
        let p = builtin::problem(Builtin::SimLinear);
        // L_P measured by the geometry probe on this instance, rounded down
        let pc = PhaseConstants::new(&p, 100.0, &polyhedral(1.125)).unwrap();
        let (bp, r, rho, d, u) = hand_polyhedral(1.125, 794.75);
        assert!((pc.b_p.unwrap() - bp).abs() <= 1e-12 * bp);
        assert!((pc.r - r).abs() <= 1e-12 * r);
        assert!((pc.rho - rho).abs() <= 1e-15);
        assert!((pc.d - d).abs() <= 1e-12 * d);
        assert!((pc.u - u).abs() <= 1e-12 * u);
        assert_eq!(pc.b_p, Some(GOLDEN_B_P));
        assert_eq!(pc.r, GOLDEN_R_P);
        assert_eq!(pc.u, GOLDEN_U_P);
    }

    const GOLDEN_B_P: f64 = 1412.888888888889;
    const GOLDEN_R_P: f64 = 0.00035222835465726656;
    const GOLDEN_U_P: f64 = 15537.36548397186;

    #[test]
    fn non_polyhedral_constants() {
        let g = GeometryEstimate {
            kind: GeometryKind::NonPolyhedral,
            l_p: None,
            l_g: Some(0.5),
            l_g_prime: Some(0.8),
            s: Some(2.0),
            decay_exponent: 2.0,
            sample_count: 0,
            per_radius: Vec::new(),
        };
        let c = 3.0;
        let v = 400.0;
        let pc = PhaseConstants::with_c(c, v, &g).unwrap();
        let bg = (1.0 / 20.0f64).max(20.0 * (1.0 + (1.0 + 4.0 * 0.5 * c).sqrt()) / 1.0);
        assert!((pc.b_g.unwrap() - bg).abs() < 1e-12);
        assert_eq!(pc.b_g_prime, Some((0.4f64).max(6.0 / 0.8)));
        let r = 3.0 / (6.0 * c * v.sqrt() + (2.0 * c).sqrt());
        let rho = 1.0 - 3.0 / (12.0 * c * v + 2.0 * (2.0 * c * v).sqrt());
        assert!((pc.r - r).abs() < 1e-15);
        assert!((pc.rho - rho).abs() < 1e-15);
        assert_eq!(pc.preconditions.len(), 4);
        let undetermined = GeometryEstimate { kind: GeometryKind::Undetermined, ..g };
        assert!(matches!(PhaseConstants::with_c(c, v, &undetermined), Err(Error::GeometryRequired)));
    }

    #[test]
    fn transient_time_examples() {
        assert_eq!(transient_time(&[0.0, 5.0], 1.0), TransientTime { t_hat: 0, reached: true });
        assert_eq!(transient_time(&[3.0, 2.0, 0.5], 1e9).t_hat, 0);
        assert_eq!(transient_time(&[3.0, 2.0, 0.5], 1.0).t_hat, 2);
        assert_eq!(transient_time(&[3.0, 2.0], 1.0), TransientTime { t_hat: 2, reached: false });
    }

    #[test]
    fn concentration_on_trivial_and_broken_paths() {
        let pc = PhaseConstants::with_c(2.0, 100.0, &polyhedral(2.0)).unwrap();
        let zeros = vec![0.0; 100];
        let rep = concentration_check(&[&zeros], &pc, &[pc.threshold], 1.0, 1.0);
        assert_eq!(rep.mean_exp_rk, 1.0);
        assert!(rep.pass());
        let jumpy = vec![0.0, 10.0, 0.0];
        let rep = concentration_check(&[&jumpy], &pc, &[], 1.0, 1.0);
        assert_eq!(rep.increments.violations, 2);
        assert!(!rep.pass());
    }

    #[test]
    fn curve_at_one_slot_is_single_slot_evaluation() {
        let p = builtin::problem(Builtin::SimLinear);
        let (path, _) = error_path(&p, 1.6875, 100.0, 4, &[1, 2], AveragingMode::Plain, 2.0, None).unwrap();
        let trace = run(&p, &RunConfig::new(&p, 100.0, 1, 4), None).unwrap();
        let x0 = &trace.records[0].x;
        assert_eq!(path[0].objective_gap, (p.objective.value(x0) - 1.6875).abs());
        assert_eq!(path[0].violation, p.constraint_values(x0).into_iter().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn slots_to_accuracy_requires_staying_below() {
        let row = |t, g| CurveRow {
            v: 1.0,
            t,
            objective_gap_mean: g,
            objective_gap_se: 0.0,
            violation_mean: 0.0,
            violation_se: 0.0,
            expected_gap: g,
            expected_violation: 0.0,
            seeds: 1,
        };
        let rows = vec![row(1, 1.0), row(2, 0.01), row(4, 0.5), row(8, 0.01), row(16, 0.0)];
        assert_eq!(slots_to_accuracy(&rows, 0.1), Some(8));
        assert_eq!(slots_to_accuracy(&rows[..3], 0.1), None);
    }

    #[test]
    fn checkpoints_are_increasing_and_end_at_horizon() {
        let c = geometric_checkpoints(1000, 50);
        assert_eq!(c[0], 1);
        assert_eq!(*c.last().unwrap(), 1000);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn staggered_estimate_uses_longer_frame() {
        let p = builtin::problem(Builtin::SimLinear);
        let mut tr = EstimateTracker::new(AveragingMode::Staggered, 2, 100, 2.0).unwrap();
        let trace = run(&p, &RunConfig::new(&p, 10.0, 100, 1), None).unwrap();
        for rec in &trace.records[..11] {
            tr.observe(rec);
        }
        // frames [4, 8) then [8, 11): the completed frame is longer
        let prev: Vec<f64> = (0..2).map(|i| trace.records[4..8].iter().map(|r| r.x[i]).sum::<f64>() / 4.0).collect();
        assert_eq!(tr.estimate().unwrap(), prev);
        for rec in &trace.records[11..13] {
            tr.observe(rec);
        }
        let cur: Vec<f64> = (0..2).map(|i| trace.records[8..13].iter().map(|r| r.x[i]).sum::<f64>() / 5.0).collect();
        assert_eq!(tr.estimate().unwrap(), cur);
    }

    #[test]
    fn transient_grows_with_v() {
        let p = builtin::problem(Builtin::SimLinear);
        let s = solve_dual(&p, 8, 1e-3).unwrap();
        let lam = s.lambda_star.to_vec();
        let seeds: Vec<u64> = (0..20).collect();
        let vs = [50.0, 100.0, 200.0];
        let means: Vec<f64> = vs
            .iter()
            .map(|&v| {
                let b = empirical_threshold(&p, &lam, v, &seeds, 20_000).unwrap();
                let ts = transient_times(&p, &lam, v, b, &seeds, 20_000).unwrap();
                assert!(ts.iter().all(|t| t.reached));
                mean(&ts.iter().map(|t| t.t_hat as f64).collect::<Vec<_>>())
            })
            .collect();
        let fit = crate::stats::linear_fit(&vs, &means).unwrap();
        assert!(fit.slope > 0.0 && fit.r_squared > 0.9, "{means:?} {fit:?}");
    }

    #[test]
    fn path_invariants_on_a_real_trace() {
        let p = builtin::problem(Builtin::SimQuadratic);
        let lam = DualPoint { w: vec![2.0625, 0.0], z: vec![-4.875, 2.4375] }.to_vec();
        let trace = run(&p, &RunConfig::new(&p, 100.0, 20_000, 2), None).unwrap();
        let mut queues: Vec<(Vec<f64>, Vec<f64>)> = trace.records.iter().map(|r| (r.w.clone(), r.z.clone())).collect();
        queues.push((trace.final_state.w.clone(), trace.final_state.z.clone()));
        let rep = analyze_path(&queues, 100.0, &lam, trace.drift_constant, None, Some(30.0), false).unwrap();
        assert_eq!(rep.increments.violations, 0);
        assert_eq!(rep.queue_square_violations, 0);
        assert!(rep.transient.reached);
    }
}
