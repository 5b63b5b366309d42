mod common;

use dpp_core::averaging::{staggered_run, StaggerSchedule};
use dpp_core::dual::{dual_value, DualPoint};
use dpp_core::engine::{run, RunConfig};
use dpp_core::phase::{k_series_of_records, queue_square_check};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slot_invariants_hold((p, lam, _) in common::instance_with_multipliers(), v in 1.0..200.0f64, seed in 0u64..1000) {
        let trace = run(&p, &RunConfig::new(&p, v, 400, seed), None).unwrap();
        for r in &trace.records {
            prop_assert!(r.w_next.iter().all(|w| *w >= 0.0));
            let scale = 1.0 + r.bound_rhs.abs();
            prop_assert!(r.drift <= r.bound_rhs + 1e-9 * scale, "drift {} > {}", r.drift, r.bound_rhs);
        }
        let mut q: Vec<f64> = trace.records.iter().map(|r| r.w.iter().chain(&r.z).map(|x| x * x).sum::<f64>().sqrt()).collect();
        q.push((2.0 * trace.final_state.lyapunov()).sqrt());
        let k = k_series_of_records(&trace.records, v, &lam);
        let v_norm = v * lam.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pairs: Vec<(usize, usize)> = (0..k.len()).step_by(37).flat_map(|a| (0..k.len()).step_by(41).map(move |b| (a, b))).collect();
        prop_assert_eq!(queue_square_check(&q, &k, v_norm, &pairs), 0);
    }

    #[test]
    fn frame_averages_track_queue_change(p in common::instance(), seed in 0u64..1000) {
        let cfg = RunConfig::new(&p, 20.0, 1000, seed);
        let frames = staggered_run(&p, &cfg, &StaggerSchedule::geometric(1.7, 1000).unwrap()).unwrap();
        for f in frames {
            let (mx, my) = (f.window.mean_x(), f.window.mean_y());
            for i in 0..p.dim() {
                let rhs = (f.z_end[i] - f.z_start[i]) / f.len() as f64;
                prop_assert!((mx[i] - my[i] - rhs).abs() <= 1e-9 * (1.0 + f.z_end[i].abs() + f.z_start[i].abs()));
            }
        }
    }

    /// The engine's decisions are the dual minimizers at `Q(t) / V`.
    #[test]
    fn engine_decisions_minimize_the_scaled_dual(p in common::instance(), v in 1.0..100.0f64, seed in 0u64..1000) {
        let trace = run(&p, &RunConfig::new(&p, v, 200, seed), None).unwrap();
        for r in &trace.records {
            let q: Vec<f64> = r.w.iter().chain(&r.z).map(|x| x / v).collect();
            let ev = dual_value(&p, &DualPoint::from_slice(p.num_constraints(), &q)).unwrap();
            let k = p.state_index(r.omega).unwrap();
            let zx = |x: &[f64]| x.iter().zip(&r.z).map(|(a, b)| a * b).sum::<f64>();
            let scale = 1.0 + r.z.iter().map(|z| z.abs()).sum::<f64>() * 10.0;
            prop_assert!((zx(&r.x) - zx(&ev.x_star[k])).abs() <= 1e-9 * scale);
            let obj = |y: &[f64]| dpp_core::solvers::y_objective(&p, v, &r.w, &r.z, y);
            let (a, b) = (obj(&r.y), obj(&ev.y_star));
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}
