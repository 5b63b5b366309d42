use std::fs::{self, File};

use dpp_core::builtin::Builtin;
use dpp_core::experiment::{cmd_analyze, cmd_dual, cmd_run, AnalyzeInput, ExperimentSpec, ProblemSource};
use dpp_core::io::{read_frame_csv, read_table_csv, read_trace_csv};
use dpp_core::phase::AveragingMode;
use dpp_core::stats::mean;

fn spec(b: Builtin, dir: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec::new(ProblemSource::Builtin(b), dir)
}

#[test]
fn run_writes_readable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(Builtin::SimLinear, dir.path());
    s.horizon = 100_000;
    let arts = cmd_run(&s).unwrap();
    assert_eq!(arts.len(), 1);
    let table = read_trace_csv(File::open(&arts[0].trace).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 100_000);
    assert_eq!((table.dim, table.num_constraints), (2, 2));
    let frames = read_frame_csv(File::open(&arts[0].frames).unwrap()).unwrap();
    assert_eq!(frames.iter().map(|f| f.len).sum::<u64>(), 100_000);
}

#[test]
fn same_spec_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut sa = spec(Builtin::SimQuadraticNonunique, a.path());
    sa.horizon = 3000;
    sa.seeds = vec![1, 2];
    sa.vs = vec![10.0, 40.0];
    let mut sb = sa.clone();
    sb.out_dir = b.path().to_path_buf();
    let ra = cmd_run(&sa).unwrap();
    let rb = cmd_run(&sb).unwrap();
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(fs::read(&x.trace).unwrap(), fs::read(&y.trace).unwrap());
        assert_eq!(fs::read(&x.frames).unwrap(), fs::read(&y.frames).unwrap());
    }
}

/// Last staggered frame lands on the optimum computed by the dual oracle.
#[test]
fn long_run_frames_reach_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    for b in [Builtin::SimLinear, Builtin::SimQuadratic] {
        let mut s = spec(b, dir.path());
        s.horizon = 200_000;
        s.seeds = (1..=5).collect();
        s.trace_every = 1000;
        let (report, _) = cmd_dual(&s).unwrap();
        let lasts: Vec<f64> = cmd_run(&s)
            .unwrap()
            .iter()
            .map(|a| read_frame_csv(File::open(&a.frames).unwrap()).unwrap().pop().unwrap().f_xbar)
            .collect();
        assert!((mean(&lasts) - report.f_opt).abs() < 0.05, "{b}: {lasts:?} vs {}", report.f_opt);
    }
}

#[test]
fn analyze_reads_run_and_dual_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(Builtin::SimLinear, dir.path());
    s.horizon = 5000;
    s.mode = AveragingMode::Plain;
    let arts = cmd_run(&s).unwrap();
    let (_, dual_path) = cmd_dual(&s).unwrap();
    let input = AnalyzeInput { trace: arts[0].trace.clone(), dual: Some(dual_path), v: 100.0, threshold: Some(30.0), checkpoints: 40 };
    let (report, json, csv) = cmd_analyze(&s, &input).unwrap();
    assert!(report.transient.reached);
    assert_eq!(report.increments.violations, 0);
    assert_eq!(report.queue_square_violations, 0);
    let back: dpp_core::PhaseReport = serde_json::from_reader(File::open(json).unwrap()).unwrap();
    assert_eq!(back.transient, report.transient);
    let (header, rows) = read_table_csv(File::open(csv).unwrap()).unwrap();
    assert_eq!(header[0], "T");
    assert_eq!(rows.last().unwrap()[0], 5000.0);

    let mut sparse = s.clone();
    sparse.trace_every = 10;
    let arts = cmd_run(&sparse).unwrap();
    let bad = AnalyzeInput { trace: arts[0].trace.clone(), ..input };
    assert!(cmd_analyze(&sparse, &bad).is_err());
}

#[test]
fn nonunique_dual_report() {
    let dir = tempfile::tempdir().unwrap();
    let (lin, _) = cmd_dual(&spec(Builtin::SimLinear, dir.path())).unwrap();
    let (non, _) = cmd_dual(&spec(Builtin::SimLinearNonunique, dir.path())).unwrap();
    assert!((lin.f_opt - non.f_opt).abs() < 1e-6);
    // the extra constraint is slack at the optimum, so its multiplier is zero
    assert!(non.lambda_star.w[2].abs() < 1e-6);
}
