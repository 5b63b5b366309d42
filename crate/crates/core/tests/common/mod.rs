//! Random small instances for property tests.

#![allow(dead_code)]

use dpp_core::{ConvexFn, State, StochasticProblem};
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    // half-integers make exact ties between decision points common
    (-10i32..=10).prop_map(|k| k as f64 / 2.0)
}

fn convex_fn(dim: usize) -> impl Strategy<Value = ConvexFn> {
    let affine = (prop::collection::vec(-2.0..2.0f64, dim), -2.0..2.0f64).prop_map(|(a, b)| ConvexFn::affine(a, b));
    let quad = (prop::collection::vec(0.0..2.0f64, dim), prop::collection::vec(-2.0..2.0f64, dim), -2.0..2.0f64)
        .prop_map(|(q, c, b)| ConvexFn::quadratic(q, c, b));
    prop_oneof![affine, quad]
}

fn states(dim: usize) -> impl Strategy<Value = Vec<State>> {
    prop::collection::vec((1.0..10.0f64, prop::collection::vec(prop::collection::vec(coord(), dim), 1..=5)), 1..=4)
        .prop_map(|raw| {
            let total: f64 = raw.iter().map(|(w, _)| w).sum();
            let n = raw.len();
            let mut acc = 0.0;
            raw.into_iter()
                .enumerate()
                .map(|(id, (w, points))| {
                    let prob = if id + 1 == n { 1.0 - acc } else { w / total };
                    acc += prob;
                    State { id, prob, points }
                })
                .collect()
        })
}

/// Instances with `I <= 3`, `J <= 3`, at most 4 states and 5 points each.
pub fn instance() -> impl Strategy<Value = StochasticProblem> {
    (1usize..=3, 0usize..=3).prop_flat_map(|(dim, nc)| {
        (states(dim), convex_fn(dim), prop::collection::vec(convex_fn(dim), nc))
            .prop_map(|(s, f, g)| StochasticProblem::new(s, f, g, None).expect("instance builds"))
    })
}

/// A multiplier with `w >= 0`.
pub fn multiplier(nc: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(0.0..5.0f64, nc), prop::collection::vec(-5.0..5.0f64, dim))
        .prop_map(|(w, z)| w.into_iter().chain(z).collect())
}

pub fn instance_with_multipliers() -> impl Strategy<Value = (StochasticProblem, Vec<f64>, Vec<f64>)> {
    instance().prop_flat_map(|p| {
        let (nc, dim) = (p.num_constraints(), p.dim());
        (Just(p), multiplier(nc, dim), multiplier(nc, dim))
    })
}
