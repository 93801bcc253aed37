//! Runs, sweeps and post-hoc diagnostics with their on-disk artifacts.
//!
//! A run directory holds
//!
//! * `config_resolved.json`: the configuration with every default filled in,
//! * `summary.json`: per-step scalars and the `q_k` statistics,
//! * `timing.json`: wall-clock seconds per step (the only file that differs
//!   between repeated runs),
//! * `agent<i>_step<k>.csv` when trajectories are kept: the agent's predicted
//!   state followed by its input, one row per grid node,
//! * `telemetry.jsonl` when telemetry is on: one record per ADMM iteration,
//! * `residuals.csv` when residuals are on: `q,delta_res` at the first step.
//!
//! A sweep directory holds `sweep.csv`, `sweep_stats.csv`, `sweep.json`
//! (including failed cells) and one run summary per cell under `cells/`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{Admm, Termination};
use crate::bench::Benchmark;
use crate::closed_loop::{run_closed_loop, ClosedLoopLog, LoopConfig};
use crate::config::{Config, SweepParam};
use crate::error::{Error, Result};
use crate::ocp::SolverSettings;
use crate::reference::{
    actual_trajectory, cost_decay_factor, fit_envelope, quadratic_sandwich, residual_series,
    saddle_reference, solve_centralized, suboptimality_error, EnvelopeFit, ResidualSeries,
};
use crate::trajectory::Trajectory;

/// Stopping constant of the reference iterate for residual series.
pub const REFERENCE_D: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub series: ResidualSeries,
    pub envelope: Option<EnvelopeFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub system: String,
    pub agents: usize,
    /// `q_k` per step.
    pub iterations: Vec<usize>,
    pub terminations: Vec<Termination>,
    pub qk_max: usize,
    pub qk_avg: f64,
    pub qk_min: usize,
    /// Plant states `x_0 .. x_K`.
    pub states: Vec<Vec<f64>>,
    pub state_norms: Vec<f64>,
    pub j_star: Option<Vec<f64>>,
    pub suboptimality: Option<Vec<f64>>,
    pub residuals: Option<ResidualReport>,
}

impl RunSummary {
    pub fn from_log(bench: &Benchmark, log: &ClosedLoopLog) -> RunSummary {
        let iterations = log.iterations();
        let (max, avg, min) = q_stats(&iterations);
        RunSummary {
            system: bench.name.clone(),
            agents: bench.system.agents(),
            terminations: log.steps.iter().map(|s| s.termination).collect(),
            qk_max: max,
            qk_avg: avg,
            qk_min: min,
            states: log
                .steps
                .iter()
                .map(|s| s.state.clone())
                .chain([log.final_state.clone()])
                .collect(),
            state_norms: log.state_norms(),
            j_star: log.costs(),
            suboptimality: log.steps.iter().map(|s| s.suboptimality).collect(),
            residuals: None,
            iterations,
        }
    }
}

/// `(max, mean, min)` of the iteration counts.
pub fn q_stats(q: &[usize]) -> (usize, f64, usize) {
    let max = q.iter().copied().max().unwrap_or(0);
    let min = q.iter().copied().min().unwrap_or(0);
    let avg = if q.is_empty() {
        0.0
    } else {
        q.iter().sum::<usize>() as f64 / q.len() as f64
    };
    (max, avg, min)
}

/// A finished run kept in memory.
pub struct RunOutput {
    pub config: Config,
    pub benchmark: Benchmark,
    pub loop_config: LoopConfig,
    pub log: ClosedLoopLog,
    pub summary: RunSummary,
}

/// Runs one closed loop without touching the disk.
pub fn run_in_memory(config: &Config) -> Result<RunOutput> {
    let resolved = config.resolve()?;
    let (benchmark, loop_config) = resolved.build()?;
    let log = run_closed_loop(&benchmark.system, &loop_config)?;
    let mut summary = RunSummary::from_log(&benchmark, &log);
    if resolved.experiment.residuals {
        summary.residuals = Some(first_step_residuals(
            &benchmark,
            &loop_config,
            summary.iterations[0],
        )?);
    }
    Ok(RunOutput {
        config: resolved,
        benchmark,
        loop_config,
        log,
        summary,
    })
}

/// Residuals of the first step's ADMM iterates against a deeply converged
/// reference, over `iterations` iterations from the cold start.
pub fn first_step_residuals(
    bench: &Benchmark,
    lc: &LoopConfig,
    iterations: usize,
) -> Result<ResidualReport> {
    let reference = saddle_reference(&bench.system, lc.grid, &lc.x0, &lc.admm, REFERENCE_D)?;
    let admm = Admm::cold(&bench.system, lc.grid, &lc.x0, lc.admm.clone())?;
    let series = residual_series(admm, iterations, &reference)?;
    let envelope = if series.values.len() >= 3 {
        Some(fit_envelope(&series.values)?)
    } else {
        None
    };
    Ok(ResidualReport { series, envelope })
}

/// Runs one closed loop and writes its artifacts into `out`.
pub fn run(config: &Config, out: &Path) -> Result<RunSummary> {
    let output = run_in_memory(config)?;
    write_run(&output, out)?;
    Ok(output.summary)
}

pub fn write_run(output: &RunOutput, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("config_resolved.json"), &output.config)?;
    write_json(&out.join("summary.json"), &output.summary)?;
    let timing: Vec<f64> = output.log.steps.iter().map(|s| s.wall_seconds).collect();
    write_json(&out.join("timing.json"), &timing)?;

    if output.config.experiment.telemetry {
        let mut w = BufWriter::new(File::create(out.join("telemetry.jsonl"))?);
        for record in output.log.steps.iter().flat_map(|s| &s.records) {
            serde_json::to_writer(&mut w, record)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    for step in &output.log.steps {
        let Some(trajectories) = &step.trajectories else {
            continue;
        };
        for (i, t) in trajectories.iter().enumerate() {
            let joined = Trajectory::hstack(*t.x.grid(), &[&t.x, &t.u])?;
            let mut w = BufWriter::new(File::create(
                out.join(format!("agent{i}_step{}.csv", step.k)),
            )?);
            joined.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    if let Some(report) = &output.summary.residuals {
        let mut w = BufWriter::new(File::create(out.join("residuals.csv"))?);
        writeln!(w, "q,delta_res")?;
        for (q, v) in report.series.values.iter().enumerate() {
            writeln!(w, "{q},{v:e}")?;
        }
        w.flush()?;
    }
    Ok(())
}

/// One sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub seed: u64,
    pub qk_max: Option<usize>,
    pub qk_avg: Option<f64>,
    pub qk_min: Option<usize>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation of the per-cell aggregates at one
/// parameter value, over the seeds that succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub param: f64,
    pub cells: usize,
    pub failures: usize,
    pub qk_max_mean: f64,
    pub qk_max_std: f64,
    pub qk_avg_mean: f64,
    pub qk_avg_std: f64,
    pub qk_min_mean: f64,
    pub qk_min_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub stats: Vec<SweepStats>,
}

/// Runs every `(value, seed)` cell concurrently. Cells that fail are
/// recorded and the sweep goes on. With `out`, each cell's summary lands in
/// `out/cells/` and the aggregates next to it.
pub fn sweep(config: &Config, out: Option<&Path>) -> Result<SweepReport> {
    let resolved = config.resolve()?;
    let spec = resolved
        .experiment
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("the configuration has no sweep section".into()))?;
    let cells: Vec<(f64, u64)> = spec
        .values
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("cells"))?;
        write_json(&dir.join("config_resolved.json"), &resolved)?;
    }

    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(value, seed)| {
            let outcome = resolved.cell(value, seed).and_then(|cell| {
                let output = run_in_memory(&cell)?;
                if let Some(dir) = out {
                    let name = format!("{}_{value}_seed{seed}.json", param_name(spec.param));
                    write_json(&dir.join("cells").join(name), &output.summary)?;
                }
                Ok(output.summary)
            });
            match outcome {
                Ok(s) => SweepRow {
                    param: value,
                    seed,
                    qk_max: Some(s.qk_max),
                    qk_avg: Some(s.qk_avg),
                    qk_min: Some(s.qk_min),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep cell {value} seed {seed} failed: {e}");
                    SweepRow {
                        param: value,
                        seed,
                        qk_max: None,
                        qk_avg: None,
                        qk_min: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let stats = spec.values.iter().map(|v| cell_stats(*v, &rows)).collect();
    let report = SweepReport {
        param: spec.param,
        rows,
        stats,
    };
    if let Some(dir) = out {
        write_sweep(&report, dir)?;
    }
    Ok(report)
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::D => "d",
        SweepParam::N => "n",
    }
}

fn cell_stats(value: f64, rows: &[SweepRow]) -> SweepStats {
    let at: Vec<&SweepRow> = rows.iter().filter(|r| r.param == value).collect();
    let ok: Vec<&SweepRow> = at.iter().copied().filter(|r| r.error.is_none()).collect();
    let column =
        |f: &dyn Fn(&SweepRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    let (max_mean, max_std) = column(&|r| r.qk_max.unwrap_or(0) as f64);
    let (avg_mean, avg_std) = column(&|r| r.qk_avg.unwrap_or(0.0));
    let (min_mean, min_std) = column(&|r| r.qk_min.unwrap_or(0) as f64);
    SweepStats {
        param: value,
        cells: ok.len(),
        failures: at.len() - ok.len(),
        qk_max_mean: max_mean,
        qk_max_std: max_std,
        qk_avg_mean: avg_mean,
        qk_avg_std: avg_std,
        qk_min_mean: min_mean,
        qk_min_std: min_std,
    }
}

/// Mean and sample (`n - 1`) standard deviation; one sample has spread 0,
/// none gives NaN.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn write_sweep(report: &SweepReport, dir: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("sweep.csv"))?);
    writeln!(w, "param,seed,qk_max,qk_avg,qk_min")?;
    for r in report.rows.iter().filter(|r| r.error.is_none()) {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.param,
            r.seed,
            r.qk_max.unwrap_or(0),
            r.qk_avg.unwrap_or(0.0),
            r.qk_min.unwrap_or(0)
        )?;
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("sweep_stats.csv"))?);
    writeln!(
        w,
        "param,cells,failures,qk_max_mean,qk_max_std,qk_avg_mean,qk_avg_std,qk_min_mean,qk_min_std"
    )?;
    for s in &report.stats {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.param,
            s.cells,
            s.failures,
            s.qk_max_mean,
            s.qk_max_std,
            s.qk_avg_mean,
            s.qk_avg_std,
            s.qk_min_mean,
            s.qk_min_std
        )?;
    }
    w.flush()?;
    write_json(&dir.join("sweep.json"), report)
}

/// Centralized quantities recomputed from a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    /// `J*(x_k)` for every logged step.
    pub j_star: Vec<f64>,
    /// Largest `J*(x_{k+1}) / J*(x_k)`.
    pub decay_factor: Option<f64>,
    /// Fitted `(m, M)` with `m |x|^2 <= J* <= M |x|^2`.
    pub sandwich: Option<(f64, f64)>,
    /// `||x_F - x*||` per step, when the run kept trajectories.
    pub suboptimality: Option<Vec<f64>>,
}

/// Solves the centralized problem at every stored state of the run in
/// `run_dir` and writes `diagnostics.json` there.
pub fn diag(run_dir: &Path) -> Result<DiagReport> {
    let config = Config::from_file(&run_dir.join("config_resolved.json"))?;
    let (bench, lc) = config.build()?;
    let summary: RunSummary = read_json(&run_dir.join("summary.json"))?;
    let steps = summary.iterations.len();
    let states = &summary.states[..steps.min(summary.states.len())];
    let settings = SolverSettings::accurate();
    let per_step: Vec<(f64, Option<f64>)> = states
        .par_iter()
        .enumerate()
        .map(|(k, x_k)| {
            let reference = solve_centralized(&bench.system, lc.grid, x_k, &settings, None)?;
            let sub = match read_inputs(run_dir, k, &bench, &lc)? {
                Some(u) => Some(suboptimality_error(
                    &actual_trajectory(&bench.system, x_k, &u)?,
                    &reference.x,
                )?),
                None => None,
            };
            Ok((reference.cost, sub))
        })
        .collect::<Result<_>>()?;
    let j_star: Vec<f64> = per_step.iter().map(|p| p.0).collect();
    let samples: Vec<(f64, f64)> = summary
        .state_norms
        .iter()
        .zip(&j_star)
        .map(|(n, j)| (*n, *j))
        .collect();
    let report = DiagReport {
        decay_factor: cost_decay_factor(&j_star),
        sandwich: quadratic_sandwich(&samples),
        suboptimality: per_step.iter().map(|p| p.1).collect(),
        j_star,
    };
    write_json(&run_dir.join("diagnostics.json"), &report)?;
    Ok(report)
}

/// Stacked predicted input of step `k` from the agent CSVs, if present.
fn read_inputs(
    run_dir: &Path,
    k: usize,
    bench: &Benchmark,
    lc: &LoopConfig,
) -> Result<Option<Trajectory>> {
    let sys = &bench.system;
    let mut parts = Vec::with_capacity(sys.agents());
    for i in 0..sys.agents() {
        let path: PathBuf = run_dir.join(format!("agent{i}_step{k}.csv"));
        if !path.exists() {
            return Ok(None);
        }
        let t = Trajectory::read_csv(BufReader::new(File::open(&path)?))?;
        let n = sys.subsystem(i).state_dim();
        if t.dim() != n + sys.subsystem(i).input_dim() || t.nodes() != lc.grid.nodes() {
            return Err(Error::Parse(format!(
                "{} does not match the configuration",
                path.display()
            )));
        }
        parts.push(t.columns(n, t.dim() - n));
    }
    let refs: Vec<&Trajectory> = parts.iter().collect();
    // Rebuild on the configured grid so the times read back from text do
    // not matter.
    let stacked = Trajectory::hstack(*refs[0].grid(), &refs)?;
    Ok(Some(Trajectory::from_values(
        lc.grid,
        stacked.dim(),
        stacked.into_values(),
    )?))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufRead;

    fn lines(path: &Path) -> Vec<String> {
        BufReader::new(File::open(path).unwrap())
            .lines()
            .collect::<std::io::Result<_>>()
            .unwrap()
    }

    fn small(extra: &str) -> Config {
        Config::from_json(&format!(
            r#"{{"system": {{"kind": "spring_mass", "agents": 3, "seed": 5}},
                "mpc": {{"steps": 6}} {extra}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn equilibrium_cell_needs_one_iteration() {
        let mut c = small("");
        c.mpc.x0 = Some(vec![0.0; 6]);
        let out = run_in_memory(&c).unwrap();
        assert_eq!(
            (out.summary.qk_max, out.summary.qk_avg, out.summary.qk_min),
            (1, 1.0, 1)
        );
    }

    #[test]
    fn run_writes_the_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(
            r#", "experiment": {"trajectories": true, "telemetry": true, "residuals": true}"#,
        );
        let summary = run(&c, dir.path()).unwrap();
        for f in [
            "config_resolved.json",
            "summary.json",
            "timing.json",
            "telemetry.jsonl",
            "residuals.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        for i in 0..3 {
            for k in 0..6 {
                assert!(dir.path().join(format!("agent{i}_step{k}.csv")).exists());
            }
        }
        let telemetry = lines(&dir.path().join("telemetry.jsonl"));
        assert_eq!(telemetry.len(), summary.iterations.iter().sum::<usize>());
        let residuals = lines(&dir.path().join("residuals.csv"));
        assert_eq!(residuals[0], "q,delta_res");
        assert_eq!(residuals.len(), summary.iterations[0] + 2);
        assert_eq!(summary.states.len(), 7);
    }

    #[test]
    fn repeated_runs_write_identical_files() {
        let c = small(r#", "experiment": {"trajectories": true, "telemetry": true}"#);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&c, a.path()).unwrap();
        run(&c, b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for name in names.iter().filter(|n| *n != "timing.json") {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name:?}"
            );
        }
    }

    #[test]
    fn sweep_records_failures_and_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(
            r#", "experiment": {"sweep": {"param": "n", "values": [2, 3], "seeds": [1, 2]}}"#,
        );
        let report = sweep(&c, Some(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.iter().all(|r| r.error.is_none()));
        assert_eq!(report.stats.len(), 2);
        assert_eq!(report.stats[0].cells, 2);
        let csv = lines(&dir.path().join("sweep.csv"));
        assert_eq!(csv[0], "param,seed,qk_max,qk_avg,qk_min");
        assert_eq!(csv.len(), 5);
        assert!(dir.path().join("sweep_stats.csv").exists());
        assert_eq!(fs::read_dir(dir.path().join("cells")).unwrap().count(), 4);

        let rows = vec![
            SweepRow {
                param: 1.0,
                seed: 1,
                qk_max: Some(4),
                qk_avg: Some(2.0),
                qk_min: Some(1),
                error: None,
            },
            SweepRow {
                param: 1.0,
                seed: 2,
                qk_max: None,
                qk_avg: None,
                qk_min: None,
                error: Some("x".into()),
            },
        ];
        let s = cell_stats(1.0, &rows);
        assert_eq!(
            (s.cells, s.failures, s.qk_max_mean, s.qk_max_std),
            (1, 1, 4.0, 0.0)
        );
    }

    #[test]
    fn diag_recomputes_centralized_costs() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(r#", "experiment": {"trajectories": true, "diagnostics": true}"#);
        let summary = run(&c, dir.path()).unwrap();
        let report = diag(dir.path()).unwrap();
        assert_eq!(report.j_star.len(), 6);
        let inline = summary.j_star.unwrap();
        for (a, b) in report.j_star.iter().zip(&inline) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
        }
        let sub = report.suboptimality.unwrap();
        for (a, b) in sub.iter().zip(summary.suboptimality.unwrap()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
        assert!(dir.path().join("diagnostics.json").exists());
    }
}
