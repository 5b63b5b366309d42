//! Experiment commands behind the `dpp` binary: simulation runs, the dual
//! report, trace analysis, averaging comparisons and rate sweeps. Every
//! command writes plain CSV or JSON into an output directory; the same
//! spec always produces the same bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{FrameTracker, StaggerSchedule};
use crate::builtin::{self, Builtin};
use crate::dual::{probe_geometry, solve_dual, DualPoint, DualSolution, GeometryEstimate, DEFAULT_PROBE_RADII};
use crate::engine::{run_observed, RunConfig, TraceGranularity};
use crate::error::{Error, Result};
use crate::io::{read_trace_csv, write_frame_csv, write_table_csv, TraceWriter};
use crate::phase::{
    analyze_path, convergence_curve, empirical_threshold, geometric_checkpoints, k_value, rate_study,
    AveragingMode, CurveRow, CurveSpec, PhaseConstants, PhaseReport, RateSpec, RateStudy, ThresholdRule,
};
use crate::problem::{compute_c, StochasticProblem};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DPP_OUT_DIR";

/// Number of random directions the dual report probes with.
pub const PROBE_DIRECTIONS: usize = 64;

/// A builtin instance name or a path to a problem JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemSource {
    Builtin(Builtin),
    Path(PathBuf),
}

impl FromStr for ProblemSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<Builtin>() {
            Ok(b) => ProblemSource::Builtin(b),
            Err(_) => ProblemSource::Path(PathBuf::from(s)),
        })
    }
}

impl ProblemSource {
    pub fn load(&self) -> Result<StochasticProblem> {
        match self {
            ProblemSource::Builtin(b) => Ok(builtin::problem(*b)),
            ProblemSource::Path(p) => StochasticProblem::load(p),
        }
    }

    /// Prefix for output file names.
    pub fn label(&self) -> String {
        match self {
            ProblemSource::Builtin(b) => b.name().to_string(),
            ProblemSource::Path(p) => p.file_stem().map_or("problem".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub problem: ProblemSource,
    pub vs: Vec<f64>,
    pub horizon: u64,
    pub seeds: Vec<u64>,
    pub mode: AveragingMode,
    pub out_dir: PathBuf,
    pub stagger_base: f64,
    /// Write every k-th slot to the trace CSV.
    pub trace_every: u64,
}

impl ExperimentSpec {
    pub fn new(problem: ProblemSource, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            problem,
            vs: vec![100.0],
            horizon: 100_000,
            seeds: vec![1],
            mode: AveragingMode::Staggered,
            out_dir: out_dir.into(),
            stagger_base: StaggerSchedule::DEFAULT_BASE,
            trace_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vs.is_empty() || self.vs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            errs.push("V values must be positive and finite".to_string());
        }
        if self.horizon == 0 {
            errs.push("horizon must be positive".into());
        }
        if self.seeds.is_empty() {
            errs.push("at least one seed is required".into());
        }
        if !(self.stagger_base > 1.0 && self.stagger_base.is_finite()) {
            errs.push(format!("stagger base must exceed 1, got {}", self.stagger_base));
        }
        if self.trace_every == 0 {
            errs.push("trace stride must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidProblem(errs))
        }
    }

    fn cells(&self) -> Vec<(f64, u64)> {
        self.vs.iter().flat_map(|&v| self.seeds.iter().map(move |&s| (v, s))).collect()
    }

    fn path(&self, name: String) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn trace_path(&self, v: f64, seed: u64) -> PathBuf {
        self.path(format!("{}_V{}_seed{}_trace.csv", self.problem.label(), v, seed))
    }

    pub fn frames_path(&self, v: f64, seed: u64) -> PathBuf {
        self.path(format!("{}_V{}_seed{}_frames.csv", self.problem.label(), v, seed))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Files written for one `(V, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub v: f64,
    pub seed: u64,
    pub trace: PathBuf,
    pub frames: PathBuf,
}

/// First slot whose `K` falls below the mean of `K` over the second half
/// of the run.
fn self_threshold_start(problem: &StochasticProblem, config: &RunConfig, lambda: &[f64]) -> Result<u64> {
    let v = config.v;
    let b = empirical_threshold(problem, lambda, v, &[config.seed], config.horizon)?;
    let mut hit = None;
    run_observed(problem, config, None, |rec| {
        if hit.is_none() && k_value(&rec.w, &rec.z, v, lambda) < b {
            hit = Some(rec.t);
        }
    })?;
    Ok(hit.unwrap_or(config.horizon))
}

/// Simulates every `(V, seed)` cell and writes its trace and frame CSVs.
/// Frames follow the averaging mode: geometric restarts, one frame, or a
/// split at the oracle transient time.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<Vec<RunArtifacts>> {
    spec.validate()?;
    let problem = spec.problem.load()?;
    let lambda = match spec.mode {
        AveragingMode::OracleStart => Some(solve_dual(&problem, 16, 1e-3)?.lambda_star.to_vec()),
        _ => None,
    };
    spec.cells()
        .into_par_iter()
        .map(|(v, seed)| {
            let config = RunConfig::new(&problem, v, spec.horizon, seed).with_trace(TraceGranularity::None);
            let schedule = match spec.mode {
                AveragingMode::Plain => StaggerSchedule::none(),
                AveragingMode::Staggered => StaggerSchedule::geometric(spec.stagger_base, spec.horizon)?,
                AveragingMode::OracleStart => {
                    let t = self_threshold_start(&problem, &config, lambda.as_deref().unwrap_or_default())?;
                    StaggerSchedule::from_slots(if t > 0 && t < spec.horizon { vec![t] } else { Vec::new() })?
                }
            };
            let trace = spec.trace_path(v, seed);
            let frames = spec.frames_path(v, seed);
            let mut writer = TraceWriter::new(create(&trace)?, problem.dim(), problem.num_constraints())?;
            let mut tracker = FrameTracker::new(&problem, &schedule);
            let mut failure = None;
            run_observed(&problem, &config, None, |rec| {
                tracker.observe(rec);
                if rec.t.is_multiple_of(spec.trace_every) && failure.is_none() {
                    failure = writer.write(rec).err();
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            writer.finish()?.flush()?;
            write_frame_csv(create(&frames)?, problem.num_constraints(), &tracker.finish())?.flush()?;
            Ok(RunArtifacts { v, seed, trace, frames })
        })
        .collect()
}

/// What `dual` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualReport {
    pub problem: String,
    pub lambda_star: DualPoint,
    pub d_star: f64,
    pub f_opt: f64,
    pub primal_grid_opt: Option<f64>,
    pub grid_resolution: Option<usize>,
    pub unique_flag: bool,
    pub converged: bool,
    pub multi_start_spread: f64,
    pub gap_bound: f64,
    pub c: f64,
    pub geometry: GeometryEstimate,
    /// Phase constants for each requested `V`, when the geometry allows.
    pub constants: Vec<PhaseConstants>,
}

impl DualReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn solution(&self) -> DualSolution {
        DualSolution {
            lambda_star: self.lambda_star.clone(),
            d_star: self.d_star,
            f_opt: self.f_opt,
            primal_grid_opt: self.primal_grid_opt,
            grid_resolution: self.grid_resolution,
            multi_start_spread: self.multi_start_spread,
            unique_flag: self.unique_flag,
            converged: self.converged,
            gap_bound: self.gap_bound,
            endpoints: Vec::new(),
        }
    }
}

pub fn dual_report(problem: &StochasticProblem, label: &str, vs: &[f64]) -> Result<DualReport> {
    let sol = solve_dual(problem, 16, 1e-3)?;
    let geometry = probe_geometry(problem, &sol, PROBE_DIRECTIONS, &DEFAULT_PROBE_RADII)?;
    let constants = vs.iter().filter_map(|&v| PhaseConstants::new(problem, v, &geometry).ok()).collect();
    Ok(DualReport {
        problem: label.to_string(),
        lambda_star: sol.lambda_star,
        d_star: sol.d_star,
        f_opt: sol.f_opt,
        primal_grid_opt: sol.primal_grid_opt,
        grid_resolution: sol.grid_resolution,
        unique_flag: sol.unique_flag,
        converged: sol.converged,
        multi_start_spread: sol.multi_start_spread,
        gap_bound: sol.gap_bound,
        c: compute_c(problem),
        geometry,
        constants,
    })
}

pub fn dual_report_path(spec: &ExperimentSpec) -> PathBuf {
    spec.path(format!("{}_dual.json", spec.problem.label()))
}

/// Solves the dual, probes its geometry and writes the JSON report.
pub fn cmd_dual(spec: &ExperimentSpec) -> Result<(DualReport, PathBuf)> {
    spec.validate()?;
    let problem = spec.problem.load()?;
    let report = dual_report(&problem, &spec.problem.label(), &spec.vs)?;
    let path = dual_report_path(spec);
    write_json(&path, &report)?;
    Ok((report, path))
}

/// Inputs of `analyze` beyond the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeInput {
    pub trace: PathBuf,
    /// Dual report; solved afresh when absent.
    pub dual: Option<PathBuf>,
    pub v: f64,
    /// Transient threshold; the regime threshold when absent.
    pub threshold: Option<f64>,
    pub checkpoints: usize,
}

/// Header of the `analyze` convergence table.
pub const ANALYZE_HEADER: [&str; 5] = ["T", "plain_gap", "plain_violation", "steady_gap", "steady_violation"];

/// Reads a full trace and writes a phase report JSON and a convergence CSV
/// comparing averages from slot 0 with averages from the transient time.
pub fn cmd_analyze(spec: &ExperimentSpec, input: &AnalyzeInput) -> Result<(PhaseReport, PathBuf, PathBuf)> {
    let problem = spec.problem.load()?;
    let table = read_trace_csv(BufReader::new(File::open(&input.trace)?))?;
    if table.dim != problem.dim() || table.num_constraints != problem.num_constraints() {
        return Err(Error::Dimension("trace does not match the problem".into()));
    }
    if table.rows.iter().enumerate().any(|(i, r)| r.t != i as u64) {
        return Err(Error::Format { what: "trace csv", detail: "analysis needs every slot from 0".into() });
    }
    let report = match &input.dual {
        Some(p) => DualReport::load(p)?,
        None => dual_report(&problem, &spec.problem.label(), &[input.v])?,
    };
    let lambda = report.lambda_star.to_vec();
    let constants = PhaseConstants::new(&problem, input.v, &report.geometry).ok();
    let queues: Vec<(Vec<f64>, Vec<f64>)> = table.rows.iter().map(|r| (r.w.clone(), r.z.clone())).collect();
    let phase = analyze_path(&queues, input.v, &lambda, compute_c(&problem), constants.as_ref(), input.threshold, false)?;

    let n = table.rows.len() as u64;
    let t_hat = phase.transient.t_hat.min(n);
    let dim = problem.dim();
    let mut prefix = vec![vec![0.0; dim]; table.rows.len() + 1];
    for (i, r) in table.rows.iter().enumerate() {
        let next: Vec<f64> = prefix[i].iter().zip(&r.x).map(|(s, x)| s + x).collect();
        prefix[i + 1] = next;
    }
    let errors = |from: u64, to: u64| -> (f64, f64) {
        if to <= from {
            return (f64::NAN, f64::NAN);
        }
        let xbar: Vec<f64> =
            (0..dim).map(|k| (prefix[to as usize][k] - prefix[from as usize][k]) / (to - from) as f64).collect();
        let g = problem.constraint_values(&xbar).into_iter().fold(f64::NEG_INFINITY, f64::max);
        ((problem.objective.value(&xbar) - report.f_opt).abs(), g)
    };
    let rows: Vec<Vec<f64>> = geometric_checkpoints(n, input.checkpoints)
        .into_iter()
        .map(|t| {
            let (pg, pv) = errors(0, t);
            let (sg, sv) = errors(t_hat, t);
            vec![t as f64, pg, pv, sg, sv]
        })
        .collect();
    let stem = input.trace.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
    let json = spec.path(format!("{stem}_phase.json"));
    let csv = spec.path(format!("{stem}_convergence.csv"));
    write_json(&json, &phase)?;
    write_table_csv(create(&csv)?, &ANALYZE_HEADER, &rows)?.flush()?;
    Ok((phase, json, csv))
}

/// Header of the `compare` table.
pub const COMPARE_HEADER: [&str; 10] = [
    "V",
    "T",
    "alg_gap",
    "alg_gap_se",
    "alg_violation",
    "alg_violation_se",
    "stg_gap",
    "stg_gap_se",
    "stg_violation",
    "stg_violation_se",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub v: f64,
    /// Mean transient time over the seeds, against the empirical threshold.
    pub transient: f64,
    /// Checkpoints at or after twice the transient time.
    pub post_transient_points: usize,
    /// Of those, how many have the staggered mean violation at or below the
    /// plain one.
    pub stg_violation_below: usize,
    pub stg_gap_below: usize,
}

/// Error-vs-time curves of the plain running average (ALG) and the
/// staggered average (STG) on the same seeds.
pub fn compare_curves(
    problem: &StochasticProblem,
    sol: &DualSolution,
    spec: &ExperimentSpec,
    checkpoints: usize,
) -> Result<(Vec<Vec<f64>>, Vec<CompareSummary>)> {
    let lambda = sol.lambda_star.to_vec();
    let cps = geometric_checkpoints(spec.horizon, checkpoints);
    let curve = |mode| {
        let cs = CurveSpec {
            vs: spec.vs.clone(),
            seeds: spec.seeds.clone(),
            checkpoints: cps.clone(),
            mode,
            stagger_base: spec.stagger_base,
            threshold: ThresholdRule::Empirical,
        };
        convergence_curve(problem, sol.f_opt, &lambda, &cs)
    };
    let alg = curve(AveragingMode::Plain)?;
    let stg = curve(AveragingMode::Staggered)?;
    let rows = alg
        .iter()
        .zip(&stg)
        .map(|(a, s)| {
            vec![
                a.v,
                a.t as f64,
                a.objective_gap_mean,
                a.objective_gap_se,
                a.violation_mean,
                a.violation_se,
                s.objective_gap_mean,
                s.objective_gap_se,
                s.violation_mean,
                s.violation_se,
            ]
        })
        .collect();
    let mut summaries = Vec::new();
    for &v in &spec.vs {
        let b = empirical_threshold(problem, &lambda, v, &spec.seeds, spec.horizon)?;
        let times = crate::phase::transient_times(problem, &lambda, v, b, &spec.seeds, spec.horizon)?;
        let transient = crate::stats::mean(&times.iter().map(|t| t.t_hat as f64).collect::<Vec<_>>());
        let pairs: Vec<(&CurveRow, &CurveRow)> =
            alg.iter().zip(&stg).filter(|(a, _)| a.v == v && a.t as f64 >= 2.0 * transient).collect();
        summaries.push(CompareSummary {
            v,
            transient,
            post_transient_points: pairs.len(),
            stg_violation_below: pairs.iter().filter(|(a, s)| s.violation_mean <= a.violation_mean).count(),
            stg_gap_below: pairs.iter().filter(|(a, s)| s.objective_gap_mean <= a.objective_gap_mean).count(),
        });
    }
    Ok((rows, summaries))
}

pub fn cmd_compare(spec: &ExperimentSpec, checkpoints: usize) -> Result<(Vec<CompareSummary>, PathBuf)> {
    spec.validate()?;
    let problem = spec.problem.load()?;
    let sol = solve_dual(&problem, 16, 1e-3)?;
    let (rows, summaries) = compare_curves(&problem, &sol, spec, checkpoints)?;
    let path = spec.path(format!("{}_compare.csv", spec.problem.label()));
    write_table_csv(create(&path)?, &COMPARE_HEADER, &rows)?.flush()?;
    write_json(&spec.path(format!("{}_compare.json", spec.problem.label())), &summaries)?;
    Ok((summaries, path))
}

/// Slots-to-accuracy sweep with `eps = 1/V` over the spec's `V` list, in
/// the spec's averaging mode.
pub fn cmd_sweep(spec: &ExperimentSpec, checkpoints: usize) -> Result<(RateStudy, PathBuf)> {
    spec.validate()?;
    let problem = spec.problem.load()?;
    let sol = solve_dual(&problem, 16, 1e-3)?;
    let rs = RateSpec {
        epsilons: spec.vs.iter().map(|v| 1.0 / v).collect(),
        seeds: spec.seeds.clone(),
        horizon: spec.horizon,
        checkpoints,
        mode: spec.mode,
        stagger_base: spec.stagger_base,
        threshold: ThresholdRule::Empirical,
    };
    let study = rate_study(&problem, sol.f_opt, &sol.lambda_star.to_vec(), &rs)?;
    let rows: Vec<Vec<f64>> = study
        .points
        .iter()
        .map(|p| vec![p.epsilon, p.v, p.slots.map_or(f64::NAN, |s| s as f64)])
        .collect();
    let stem = format!("{}_sweep_{}", spec.problem.label(), spec.mode);
    let path = spec.path(format!("{stem}.csv"));
    write_table_csv(create(&path)?, &["epsilon", "V", "slots"], &rows)?.flush()?;
    write_json(&spec.path(format!("{stem}.json")), &study)?;
    Ok((study, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_frame_csv;

    #[test]
    fn problem_source_parses() {
        assert_eq!("sim-linear".parse::<ProblemSource>().unwrap(), ProblemSource::Builtin(Builtin::SimLinear));
        let p: ProblemSource = "dir/mine.json".parse().unwrap();
        assert_eq!(p.label(), "mine");
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = ExperimentSpec::new(ProblemSource::Builtin(Builtin::SimLinear), "/nonexistent");
        s.vs = vec![-1.0];
        s.seeds.clear();
        match s.validate() {
            Err(Error::InvalidProblem(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oracle_start_run_splits_at_transient() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ExperimentSpec::new(ProblemSource::Builtin(Builtin::SimLinear), dir.path());
        s.horizon = 5000;
        s.mode = AveragingMode::OracleStart;
        s.trace_every = 100;
        let arts = cmd_run(&s).unwrap();
        let frames = read_frame_csv(File::open(&arts[0].frames).unwrap()).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames[1].t0 > 0 && frames[1].t0 < 2000, "{}", frames[1].t0);
        let lines = std::fs::read_to_string(&arts[0].trace).unwrap().lines().count();
        assert_eq!(lines, 51);
    }
}
