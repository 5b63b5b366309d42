//! Fixtures shared by the benchmarks in `benches/`.

use dpp_core::builtin::{self, Builtin};
use dpp_core::{QueueState, StochasticProblem};

/// The two unique-multiplier simulation instances.
pub fn instances() -> Vec<(Builtin, StochasticProblem)> {
    [Builtin::SimLinear, Builtin::SimQuadratic].into_iter().map(|b| (b, builtin::problem(b))).collect()
}

/// A queue state near `V λ*` for the simulation instances at `V = 100`.
pub fn steady_state(problem: &StochasticProblem) -> QueueState {
    let mut q = QueueState::zeros(problem);
    q.w[0] = 87.5;
    q.z[0] = -25.0;
    q.z[1] = 12.5;
    q
}
