//! Drift-plus-penalty for time-average stochastic optimization over finite,
//! possibly non-convex per-state decision sets.
//!
//! The crate has four layers:
//!
//! * [`problem`] and [`builtin`] describe instances;
//! * [`solvers`], [`engine`] and [`averaging`] run the algorithm and keep
//!   time averages;
//! * [`dual`] solves the convex dual of the embedded problem and probes its
//!   geometry around the multiplier;
//! * [`phase`] and [`experiment`] turn traces into transient, concentration
//!   and convergence-rate measurements.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod builtin;
pub mod dual;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod io;
pub mod phase;
pub mod problem;
pub mod solvers;
pub mod stats;

pub use averaging::{AverageWindow, Evaluation, FrameSummary, StaggerSchedule};
pub use builtin::Builtin;
pub use dual::{DualPoint, DualSolution, GeometryEstimate, GeometryKind};
pub use engine::{QueueState, RunConfig, SlotRecord, Trace, TraceGranularity};
pub use error::{Error, Result};
pub use phase::{PhaseConstants, PhaseReport};
pub use problem::{BoxSet, ConvexFn, State, StochasticProblem};
pub use solvers::{XStepResult, YStepMethod, YStepResult};
