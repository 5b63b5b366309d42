//! The four simulation instances over three random states.
//!
//! `Omega = {0, 1, 2}`, `pi = (0.1, 0.6, 0.3)`, `X_0 = {(0,0)}`,
//! `X_1 = {(-5,0), (0,10)}`, `X_2 = {(0,-10), (5,0)}`. The averaged
//! constraints `2x1 + x2 >= 1.5` and `x1 + 2x2 >= 1.5` are stored as
//! `g_1 = 1.5 - 2x1 - x2 <= 0` and `g_2 = 1.5 - x1 - 2x2 <= 0`; the
//! `-nonunique` variants add `g_3 = 1 - x1 - x2 <= 0`.
//!
//! The checked-in JSON files under `instances/` are the definitions; the
//! constructors here must serialize to exactly those bytes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ConvexFn, ProblemFile, State, StochasticProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builtin {
    SimLinear,
    SimQuadratic,
    SimLinearNonunique,
    SimQuadraticNonunique,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [
        Builtin::SimLinear,
        Builtin::SimQuadratic,
        Builtin::SimLinearNonunique,
        Builtin::SimQuadraticNonunique,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::SimLinear => "sim-linear",
            Builtin::SimQuadratic => "sim-quadratic",
            Builtin::SimLinearNonunique => "sim-linear-nonunique",
            Builtin::SimQuadraticNonunique => "sim-quadratic-nonunique",
        }
    }

    /// Checked-in JSON definition.
    pub fn json(self) -> &'static str {
        match self {
            Builtin::SimLinear => include_str!("../instances/sim-linear.json"),
            Builtin::SimQuadratic => include_str!("../instances/sim-quadratic.json"),
            Builtin::SimLinearNonunique => include_str!("../instances/sim-linear-nonunique.json"),
            Builtin::SimQuadraticNonunique => include_str!("../instances/sim-quadratic-nonunique.json"),
        }
    }

    pub fn quadratic_objective(self) -> bool {
        matches!(self, Builtin::SimQuadratic | Builtin::SimQuadraticNonunique)
    }

    pub fn nonunique(self) -> bool {
        matches!(self, Builtin::SimLinearNonunique | Builtin::SimQuadraticNonunique)
    }

    /// The same instance built in code.
    pub fn file_model(self) -> ProblemFile {
        let objective = if self.quadratic_objective() {
            ConvexFn::quadratic(vec![1.0, 1.0], vec![0.0, 0.0], 0.0)
        } else {
            ConvexFn::affine(vec![1.5, 1.0], 0.0)
        };
        let mut constraints = vec![
            ConvexFn::affine(vec![-2.0, -1.0], 1.5),
            ConvexFn::affine(vec![-1.0, -2.0], 1.5),
        ];
        if self.nonunique() {
            constraints.push(ConvexFn::affine(vec![-1.0, -1.0], 1.0));
        }
        ProblemFile {
            states: vec![
                State { id: 0, prob: 0.1, points: vec![vec![0.0, 0.0]] },
                State { id: 1, prob: 0.6, points: vec![vec![-5.0, 0.0], vec![0.0, 10.0]] },
                State { id: 2, prob: 0.3, points: vec![vec![0.0, -10.0], vec![5.0, 0.0]] },
            ],
            objective,
            constraints,
            extended_set: None,
        }
    }
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown builtin instance '{s}'")))
    }
}

/// Parses the checked-in definition.
pub fn problem(b: Builtin) -> StochasticProblem {
    StochasticProblem::from_json_str(b.json()).expect("builtin instance is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(b: Builtin) -> String {
        serde_json::to_string_pretty(&b.file_model()).unwrap() + "\n"
    }

    /// Set `DPP_BLESS=1` to regenerate the JSON files from the constructors.
    #[test]
    fn builtins_byte_match_checked_in_json() {
        for b in Builtin::ALL {
            let rendered = render(b);
            if std::env::var_os("DPP_BLESS").is_some() {
                let path = format!("{}/instances/{}.json", env!("CARGO_MANIFEST_DIR"), b.name());
                std::fs::write(path, &rendered).unwrap();
                continue;
            }
            assert_eq!(b.json(), rendered, "{b} drifted from its JSON definition");
        }
    }

    #[test]
    fn names_round_trip() {
        for b in Builtin::ALL {
            assert_eq!(b.name().parse::<Builtin>().unwrap(), b);
        }
        assert!("sim-cubic".parse::<Builtin>().is_err());
    }

    #[test]
    fn instance_shape() {
        let p = problem(Builtin::SimQuadraticNonunique);
        assert_eq!(p.num_states(), 3);
        assert_eq!(p.num_constraints(), 3);
        assert_eq!(p.dim(), 2);
        // (0.5, 0.5) makes both original constraints tight
        assert_eq!(p.constraint_values(&[0.5, 0.5])[..2], [0.0, 0.0]);
    }
}
