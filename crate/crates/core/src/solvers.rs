//! The two per-slot subproblems: a linear minimization over a finite
//! decision set, and a convex minimization over the box `Y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::StochasticProblem;

/// Improvement threshold that stops projected gradient descent.
pub const PGD_IMPROVEMENT_TOL: f64 = 1e-12;
/// Iteration cap for projected gradient descent.
pub const PGD_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct XStepResult {
    pub point: Vec<f64>,
    pub index: usize,
    /// `Z^T x` at the chosen point.
    pub objective_value: f64,
}

/// Minimizes `z^T x` over the decision set by full enumeration. Ties go to
/// the lowest index.
pub fn x_step(decision_set: &[Vec<f64>], z: &[f64]) -> Result<XStepResult> {
    let (index, objective_value) = argmin_linear(decision_set, z)?;
    Ok(XStepResult { point: decision_set[index].clone(), index, objective_value })
}

/// Index and value of the minimizer of `z^T x` over the points.
pub(crate) fn argmin_linear(points: &[Vec<f64>], z: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, p) in points.iter().enumerate() {
        if p.len() != z.len() {
            return Err(Error::Dimension(format!("point has {} coordinates, Z has {}", p.len(), z.len())));
        }
        let v: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
        if best.is_none_or(|(_, bv)| v < bv) {
            best = Some((k, v));
        }
    }
    best.ok_or(Error::EmptyDecisionSet)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum YStepMethod {
    ClosedForm,
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YStepResult {
    pub point: Vec<f64>,
    /// `V f(y) + W^T g(y) - Z^T y` at the returned point.
    pub objective_value: f64,
    pub method: YStepMethod,
    pub iterations: usize,
}

/// `V f(y) + W^T g(y) - Z^T y`.
pub fn y_objective(problem: &StochasticProblem, v: f64, w: &[f64], z: &[f64], y: &[f64]) -> f64 {
    let penalty: f64 = problem.constraints.iter().zip(w).map(|(g, wj)| wj * g.value(y)).sum();
    let coupling: f64 = z.iter().zip(y).map(|(a, b)| a * b).sum();
    v * problem.objective.value(y) + penalty - coupling
}

/// Minimizes `V f(y) + W^T g(y) - Z^T y` over `Y`.
///
/// Every supported function family is coordinate separable, so the default
/// path solves each coordinate in closed form.
pub fn y_step(problem: &StochasticProblem, v: f64, w: &[f64], z: &[f64]) -> Result<YStepResult> {
    y_step_with(problem, v, w, z, YStepMethod::ClosedForm)
}

pub fn y_step_with(
    problem: &StochasticProblem,
    v: f64,
    w: &[f64],
    z: &[f64],
    method: YStepMethod,
) -> Result<YStepResult> {
    check_inputs(problem, v, w, z)?;
    let (point, iterations) = match method {
        YStepMethod::ClosedForm => {
            let mut y = vec![0.0; problem.dim()];
            closed_form_into(problem, v, w, z, &mut y);
            (y, 0)
        }
        YStepMethod::ProjectedGradient => projected_gradient(problem, v, w, z),
    };
    let objective_value = y_objective(problem, v, w, z, &point);
    Ok(YStepResult { point, objective_value, method, iterations })
}

fn check_inputs(problem: &StochasticProblem, v: f64, w: &[f64], z: &[f64]) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("V must be positive and finite, got {v}")));
    }
    if w.len() != problem.num_constraints() || z.len() != problem.dim() {
        return Err(Error::Dimension(format!(
            "expected W in R^{} and Z in R^{}, got {} and {}",
            problem.num_constraints(),
            problem.dim(),
            w.len(),
            z.len()
        )));
    }
    if let Some(j) = w.iter().position(|&wj| !(wj >= 0.0)) {
        return Err(Error::InvalidMultiplier(format!("W[{j}] = {} is negative", w[j])));
    }
    Ok(())
}

/// Per-coordinate quadratic and linear coefficients of the y-objective.
#[inline]
pub(crate) fn coordinate_coeffs(problem: &StochasticProblem, v: f64, w: &[f64], z: &[f64], i: usize) -> (f64, f64) {
    let mut quad = v * problem.objective.quad_coeff(i);
    let mut lin = v * problem.objective.lin_coeff(i) - z[i];
    for (g, wj) in problem.constraints.iter().zip(w) {
        quad += wj * g.quad_coeff(i);
        lin += wj * g.lin_coeff(i);
    }
    (quad, lin)
}

/// Closed-form minimizer written into `y`. A zero linear coefficient on a
/// flat coordinate selects the lower bound.
pub(crate) fn closed_form_into(problem: &StochasticProblem, v: f64, w: &[f64], z: &[f64], y: &mut [f64]) {
    let bx = &problem.extended_set;
    for (i, yi) in y.iter_mut().enumerate() {
        let (quad, lin) = coordinate_coeffs(problem, v, w, z, i);
        *yi = if quad > 0.0 {
            (-lin / (2.0 * quad)).clamp(bx.lower[i], bx.upper[i])
        } else if lin < 0.0 {
            bx.upper[i]
        } else {
            bx.lower[i]
        };
    }
}

fn projected_gradient(problem: &StochasticProblem, v: f64, w: &[f64], z: &[f64]) -> (Vec<f64>, usize) {
    let bx = &problem.extended_set;
    let dim = problem.dim();
    let coeffs: Vec<(f64, f64)> = (0..dim).map(|i| coordinate_coeffs(problem, v, w, z, i)).collect();
    let grad = |y: &[f64]| -> Vec<f64> { coeffs.iter().zip(y).map(|((q, l), yi)| 2.0 * q * yi + l).collect() };

    let mut y = bx.center();
    let curvature = coeffs.iter().map(|(q, _)| 2.0 * q).fold(0.0, f64::max);
    let step = if curvature > 0.0 {
        1.0 / curvature
    } else {
        // linear objective: one step long enough to reach the boundary
        let width = bx.lower.iter().zip(&bx.upper).map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
        let gmax = coeffs.iter().map(|(_, l)| l.abs()).fold(0.0, f64::max);
        if gmax > 0.0 {
            width / gmax
        } else {
            0.0
        }
    };

    let mut value = y_objective(problem, v, w, z, &y);
    let mut iterations = 0;
    while iterations < PGD_MAX_ITERS {
        iterations += 1;
        let g = grad(&y);
        let mut next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
        bx.clamp(&mut next);
        let next_value = y_objective(problem, v, w, z, &next);
        let improvement = value - next_value;
        if improvement >= 0.0 {
            y = next;
            value = next_value;
        }
        if improvement < PGD_IMPROVEMENT_TOL {
            break;
        }
    }
    (y, iterations)
}
