//! Running time averages `x̄(t0, T)`, `ȳ(t0, T)` and the staggered restart
//! schedule.
//!
//! A staggered run restarts its averaging window at geometrically spaced
//! slots `ceil(base^k)`, so whenever the transient ends some later frame
//! starts within a factor `base` of it.

use serde::{Deserialize, Serialize};

use crate::engine::{run_observed, RunConfig, SlotRecord};
use crate::error::{Error, Result};
use crate::problem::StochasticProblem;

/// Running sums of `x(t)` and `y(t)` over `[t0, t0 + len)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageWindow {
    pub t0: u64,
    pub len: u64,
    pub sum_x: Vec<f64>,
    pub sum_y: Vec<f64>,
}

impl AverageWindow {
    pub fn new(t0: u64, dim: usize) -> Self {
        AverageWindow { t0, len: 0, sum_x: vec![0.0; dim], sum_y: vec![0.0; dim] }
    }

    pub fn accumulate(&mut self, x: &[f64], y: &[f64]) {
        for (s, v) in self.sum_x.iter_mut().zip(x) {
            *s += v;
        }
        for (s, v) in self.sum_y.iter_mut().zip(y) {
            *s += v;
        }
        self.len += 1;
    }

    /// Builder form of [`AverageWindow::accumulate`].
    pub fn with(mut self, x: &[f64], y: &[f64]) -> Self {
        self.accumulate(x, y);
        self
    }

    pub fn mean_x(&self) -> Vec<f64> {
        self.sum_x.iter().map(|s| s / self.len as f64).collect()
    }

    pub fn mean_y(&self) -> Vec<f64> {
        self.sum_y.iter().map(|s| s / self.len as f64).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Objective and constraint values at the two window averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub f_xbar: f64,
    pub g_xbar: Vec<f64>,
    pub f_ybar: f64,
    pub g_ybar: Vec<f64>,
}

impl Evaluation {
    pub fn at(problem: &StochasticProblem, xbar: &[f64], ybar: &[f64]) -> Self {
        Evaluation {
            f_xbar: problem.objective.value(xbar),
            g_xbar: problem.constraint_values(xbar),
            f_ybar: problem.objective.value(ybar),
            g_ybar: problem.constraint_values(ybar),
        }
    }

    /// `max_j g_j(x̄)`, or `-inf` without constraints.
    pub fn max_violation(&self) -> f64 {
        self.g_xbar.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn evaluate(window: &AverageWindow, problem: &StochasticProblem) -> Result<Evaluation> {
    if window.is_empty() {
        return Err(Error::InvalidParameter("cannot evaluate an empty window".into()));
    }
    Ok(Evaluation::at(problem, &window.mean_x(), &window.mean_y()))
}

/// Slots at which the averaging window restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaggerSchedule {
    /// Geometric base, or `None` for an explicit or empty schedule.
    pub base: Option<f64>,
    pub restart_slots: Vec<u64>,
}

impl StaggerSchedule {
    pub const DEFAULT_BASE: f64 = 2.0;

    /// Restarts at `ceil(base^k)` for `k = 0, 1, ...`, deduplicated and kept
    /// within `[1, horizon)`.
    pub fn geometric(base: f64, horizon: u64) -> Result<Self> {
        if !(base > 1.0 && base.is_finite()) {
            return Err(Error::InvalidParameter(format!("stagger base must exceed 1, got {base}")));
        }
        let mut slots: Vec<u64> = Vec::new();
        let mut k = 0i32;
        loop {
            let p = base.powi(k).ceil();
            if p >= horizon as f64 {
                break;
            }
            let s = p as u64;
            if s >= 1 && slots.last() != Some(&s) {
                slots.push(s);
            }
            k += 1;
        }
        Ok(StaggerSchedule { base: Some(base), restart_slots: slots })
    }

    /// One frame covering the whole run.
    pub fn none() -> Self {
        StaggerSchedule { base: None, restart_slots: Vec::new() }
    }

    pub fn from_slots(slots: Vec<u64>) -> Result<Self> {
        if slots.first() == Some(&0) || slots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("restart slots must be positive and strictly increasing".into()));
        }
        Ok(StaggerSchedule { base: None, restart_slots: slots })
    }

    /// Frame boundaries `[start, end)` covering `[0, horizon)`.
    pub fn frames(&self, horizon: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut start = 0;
        for &s in self.restart_slots.iter().filter(|&&s| s < horizon) {
            out.push((start, s));
            start = s;
        }
        if start < horizon {
            out.push((start, horizon));
        }
        out
    }
}

/// A completed frame of a staggered run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub index: usize,
    pub window: AverageWindow,
    pub z_start: Vec<f64>,
    pub z_end: Vec<f64>,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    pub evaluation: Evaluation,
}

impl FrameSummary {
    pub fn t0(&self) -> u64 {
        self.window.t0
    }

    pub fn len(&self) -> u64 {
        self.window.len
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// Slot observer that splits a run into frames.
#[derive(Debug, Clone)]
pub struct FrameTracker<'a> {
    problem: &'a StochasticProblem,
    restarts: Vec<u64>,
    next: usize,
    window: AverageWindow,
    z_start: Vec<f64>,
    w_start: Vec<f64>,
    z_end: Vec<f64>,
    w_end: Vec<f64>,
    frames: Vec<FrameSummary>,
}

impl<'a> FrameTracker<'a> {
    pub fn new(problem: &'a StochasticProblem, schedule: &StaggerSchedule) -> Self {
        FrameTracker {
            problem,
            restarts: schedule.restart_slots.clone(),
            next: 0,
            window: AverageWindow::new(0, problem.dim()),
            z_start: Vec::new(),
            w_start: Vec::new(),
            z_end: Vec::new(),
            w_end: Vec::new(),
            frames: Vec::new(),
        }
    }

    pub fn observe(&mut self, rec: &SlotRecord) {
        if self.next < self.restarts.len() && self.restarts[self.next] == rec.t {
            self.close();
            self.next += 1;
            self.window = AverageWindow::new(rec.t, self.problem.dim());
        }
        if self.window.is_empty() {
            self.window.t0 = rec.t;
            self.z_start.clone_from(&rec.z);
            self.w_start.clone_from(&rec.w);
        }
        self.window.accumulate(&rec.x, &rec.y);
        self.z_end.clone_from(&rec.z_next);
        self.w_end.clone_from(&rec.w_next);
    }

    fn close(&mut self) {
        if self.window.is_empty() {
            return;
        }
        let window = std::mem::replace(&mut self.window, AverageWindow::new(0, self.problem.dim()));
        let evaluation = Evaluation::at(self.problem, &window.mean_x(), &window.mean_y());
        self.frames.push(FrameSummary {
            index: self.frames.len(),
            window,
            z_start: self.z_start.clone(),
            z_end: self.z_end.clone(),
            w_start: self.w_start.clone(),
            w_end: self.w_end.clone(),
            evaluation,
        });
    }

    /// The current, possibly incomplete, window.
    pub fn current(&self) -> &AverageWindow {
        &self.window
    }

    pub fn completed(&self) -> &[FrameSummary] {
        &self.frames
    }

    /// Closes the open frame and returns all frames.
    pub fn finish(mut self) -> Vec<FrameSummary> {
        self.close();
        self.frames
    }
}

/// Runs the algorithm once and averages over the schedule's frames. Frames
/// tile `[0, horizon)` exactly.
pub fn staggered_run(
    problem: &StochasticProblem,
    config: &RunConfig,
    schedule: &StaggerSchedule,
) -> Result<Vec<FrameSummary>> {
    let mut tracker = FrameTracker::new(problem, schedule);
    run_observed(problem, config, None, |rec| tracker.observe(rec))?;
    Ok(tracker.finish())
}
