//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines come out in order
//! and uncaptured. A FAIL is reported but does not fail `cargo test` unless
//! `ACCEPTANCE_STRICT=1` is set. `ACCEPTANCE_ONLY=1,3,10` restricts the run
//! to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use dmpc::admm::{admm_solve, coordination_objective, coordination_update, Admm, AdmmConfig};
use dmpc::bench::{build_spring_mass, build_vdp, unit_uniform, Benchmark};
use dmpc::config::{Config, SweepConfig, SweepParam, SystemConfig};
use dmpc::experiment::{run_in_memory, sweep, write_run, RunOutput, REFERENCE_D};
use dmpc::ocp::SolverSettings;
use dmpc::reference::{
    actual_trajectory, cost_decay_factor, fit_envelope, residual_series, saddle_reference,
    solve_centralized, suboptimality_error,
};
use dmpc::terminal::lyapunov_residual;
use dmpc::trajectory::{linf_norm, TimeGrid, Trajectory};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&mut Shared) -> Outcome;

/// Closed-loop runs reused by several criteria.
#[derive(Default)]
struct Shared {
    vdp_runs: BTreeMap<u64, RunOutput>,
}

impl Shared {
    /// Van der Pol closed loop at stopping constant `d` with per-step `J*`.
    fn vdp(&mut self, d: f64) -> &RunOutput {
        self.vdp_runs.entry(d.to_bits()).or_insert_with(|| {
            let mut config = Config::for_system(SystemConfig::VanDerPol);
            config.admm.d = Some(d);
            config.experiment.diagnostics = true;
            run_in_memory(&config).expect("van der pol run")
        })
    }
}

fn rng_uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_uniform(rng)
}

fn random_traj(rng: &mut SplitMix64, grid: TimeGrid, dim: usize, scale: f64) -> Trajectory {
    let values = (0..grid.nodes() * dim)
        .map(|_| rng_uniform(rng, -scale, scale))
        .collect();
    Trajectory::from_values(grid, dim, values).unwrap()
}

fn spring2() -> Benchmark {
    build_spring_mass(2, 1).unwrap()
}

fn grid_of(b: &Benchmark) -> TimeGrid {
    TimeGrid::new(b.horizon, 61).unwrap()
}

fn criterion_1(_: &mut Shared) -> Outcome {
    let b = spring2();
    let grid = grid_of(&b);
    let config = AdmmConfig {
        d: 1e-6,
        max_iterations: 5000,
        solver: SolverSettings::accurate(),
        ..b.admm_config()
    };
    let res = admm_solve(&b.system, grid, &b.x0, &config).unwrap();
    let reference =
        solve_centralized(&b.system, grid, &b.x0, &SolverSettings::accurate(), None).unwrap();
    let gap = linf_norm(&res.stacked_input().unwrap().sub(&reference.u).unwrap());
    outcome(
        gap <= 1e-2 && res.converged(),
        format!(
            "L-inf control gap {gap:.3e} (<= 1e-2) after {} iterations, converged={}",
            res.iterations,
            res.converged()
        ),
    )
}

fn criterion_2(_: &mut Shared) -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    let mut decreases = 0;
    for _ in 0..100 {
        let grid = TimeGrid::new(
            rng_uniform(&mut rng, 0.5, 3.0),
            5 + (rng.next_u64() % 30) as usize,
        )
        .unwrap();
        let dim = 1 + (rng.next_u64() % 3) as usize;
        let copies_n = (rng.next_u64() % 4) as usize;
        let rho = rng_uniform(&mut rng, 0.1, 10.0);
        let x = random_traj(&mut rng, grid, dim, 2.0);
        let mu = random_traj(&mut rng, grid, dim, 2.0);
        let copies: Vec<Trajectory> = (0..copies_n)
            .map(|_| random_traj(&mut rng, grid, dim, 2.0))
            .collect();
        let mu_copies: Vec<Trajectory> = (0..copies_n)
            .map(|_| random_traj(&mut rng, grid, dim, 2.0))
            .collect();
        let c: Vec<&Trajectory> = copies.iter().collect();
        let m: Vec<&Trajectory> = mu_copies.iter().collect();
        let z = coordination_update(&x, &c, &mu, &m, rho).unwrap();
        let base = coordination_objective(&z, &x, &c, &mu, &m, rho);
        let dir = random_traj(&mut rng, grid, dim, 1.0);
        let scale = 1e-4 / linf_norm(&dir).max(f64::MIN_POSITIVE);
        for sign in [1.0, -1.0] {
            let mut zp = z.clone();
            zp.axpy(sign * scale, &dir).unwrap();
            let change = coordination_objective(&zp, &x, &c, &mu, &m, rho) - base;
            worst = worst.min(change);
            if change < 0.0 {
                decreases += 1;
            }
        }
    }
    outcome(
        decreases == 0,
        format!(
            "{decreases} of 200 perturbations decreased the objective; smallest change {worst:.3e}"
        ),
    )
}

/// Iterates `admm` and compares `dmu / rho` with the consistency residuals
/// bit for bit after every iteration. Returns the number of mismatches.
fn residual_identity(mut admm: Admm<'_>, iterations: usize, rho: f64) -> (usize, usize) {
    let sys_agents = admm.agents().len();
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..iterations {
        let record = admm.iterate().unwrap();
        for i in 0..sys_agents {
            let a = &admm.agents()[i];
            let (_, dmu_own, _) = a.increments();
            let r_own = a.coordination().sub(a.state()).unwrap();
            for (d, r) in dmu_own.values().iter().zip(r_own.values()) {
                compared += 1;
                if (d / rho).to_bits() != r.to_bits() {
                    mismatches += 1;
                }
            }
        }
        if record.satisfied {
            break;
        }
    }
    (mismatches, compared)
}

fn neighbor_identity(b: &Benchmark, iterations: usize) -> (usize, usize) {
    let grid = grid_of(b);
    let config = b.admm_config();
    let rho = config.rho;
    let mut admm = Admm::cold(&b.system, grid, &b.x0, config).unwrap();
    let mut mismatches = 0;
    let mut compared = 0;
    for _ in 0..iterations {
        admm.iterate().unwrap();
        for a in admm.agents() {
            let (_, _, dmu_nb) = a.increments();
            let sending = b.system.subsystem(a.index()).sending();
            let mut col = 0;
            for &j in sending {
                let n = b.system.subsystem(j).state_dim();
                let zj = a.received_coordination(&b.system, j).unwrap();
                let r = zj.sub(&a.copies().columns(col, n)).unwrap();
                let d = dmu_nb.columns(col, n);
                for (dv, rv) in d.values().iter().zip(r.values()) {
                    compared += 1;
                    if (dv / rho).to_bits() != rv.to_bits() {
                        mismatches += 1;
                    }
                }
                col += n;
            }
        }
    }
    (mismatches, compared)
}

fn criterion_3(_: &mut Shared) -> Outcome {
    let mut total = (0, 0);
    for b in [build_vdp().unwrap(), build_spring_mass(5, 3).unwrap()] {
        let grid = grid_of(&b);
        let config = b.admm_config();
        let rho = config.rho;
        let admm = Admm::cold(&b.system, grid, &b.x0, config).unwrap();
        let own = residual_identity(admm, 60, rho);
        let nb = neighbor_identity(&b, 60);
        total.0 += own.0 + nb.0;
        total.1 += own.1 + nb.1;
    }
    outcome(
        total.0 == 0 && total.1 > 0,
        format!("{} mismatching entries out of {}", total.0, total.1),
    )
}

fn closed_loop_shape(run: &RunOutput, bound: f64) -> (bool, String) {
    let costs = run.summary.j_star.clone().unwrap_or_default();
    let decay = cost_decay_factor(&costs);
    let norms = &run.summary.state_norms;
    let ratio = norms.last().unwrap() / norms[0];
    let pass = decay.is_some_and(|f| f < 1.0) && ratio <= bound;
    (
        pass,
        format!(
            "max J* ratio {:.4}, |x_K|/|x_0| = {ratio:.4} (<= {bound})",
            decay.unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_4(shared: &mut Shared) -> Outcome {
    let (p1, d1) = closed_loop_shape(shared.vdp(0.005), 0.05);
    let (p2, d2) = closed_loop_shape(shared.vdp(0.5), 0.1);
    outcome(p1 && p2, format!("d=0.005: {d1}; d=0.5: {d2}"))
}

fn criterion_5(shared: &mut Shared) -> Outcome {
    let ds = [0.005, 0.05, 0.5];
    let firsts: Vec<usize> = ds
        .iter()
        .map(|d| shared.vdp(*d).summary.iterations[0])
        .collect();
    let avgs: Vec<f64> = ds.iter().map(|d| shared.vdp(*d).summary.qk_avg).collect();
    let pass = firsts[0] > firsts[2] && avgs.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        pass,
        format!("q_0 over d=(0.005, 0.05, 0.5): {firsts:?}; avg q_k: {avgs:.2?}"),
    )
}

fn bounded_iterations(q: &[usize]) -> (bool, String) {
    let tail = &q[q.len() - q.len() / 4..];
    let constant = tail.iter().all(|v| *v == tail[0]);
    let max = *q.iter().max().unwrap();
    let early = q.iter().take(2).any(|v| *v == max);
    (
        constant && early,
        format!(
            "max {max} {} at k<=1, final quarter {}",
            if early { "reached" } else { "not reached" },
            if constant { "constant" } else { "varies" }
        ),
    )
}

fn criterion_6(shared: &mut Shared) -> Outcome {
    let (p1, d1) = bounded_iterations(&shared.vdp(0.005).summary.iterations);
    let spring = run_in_memory(&Config::for_system(SystemConfig::SpringMass {
        agents: 10,
        seed: 1,
    }))
    .unwrap();
    let (p2, d2) = bounded_iterations(&spring.summary.iterations);
    outcome(
        p1 && p2,
        format!(
            "van der pol: {d1}, q_k = {:?}; spring-mass N=10: {d2}, q_k = {:?}",
            shared.vdp(0.005).summary.iterations,
            spring.summary.iterations
        ),
    )
}

fn criterion_7(_: &mut Shared) -> Outcome {
    let b = build_vdp().unwrap();
    let grid = grid_of(&b);
    let config = AdmmConfig {
        d: 0.005,
        ..b.admm_config()
    };
    let reference = saddle_reference(&b.system, grid, &b.x0, &config, REFERENCE_D).unwrap();
    let mut lines = Vec::new();
    let mut pass = reference.converged;
    // z initialized at the current state, at zero, and at twice the state.
    for scale in [1.0, 0.0, 2.0] {
        let scaled: Vec<f64> = b.x0.iter().map(|v| v * scale).collect();
        let prepare = || {
            let mut admm = Admm::cold(&b.system, grid, &b.x0, config.clone()).unwrap();
            for a in admm.agents_mut() {
                let i = a.index();
                a.set_coordination(Trajectory::constant(grid, &scaled[b.system.state_range(i)]))
                    .unwrap();
                for &j in b.system.subsystem(i).sending() {
                    a.set_received_coordination(
                        &b.system,
                        j,
                        Trajectory::constant(grid, &scaled[b.system.state_range(j)]),
                    )
                    .unwrap();
                }
            }
            admm
        };
        let mut probe = prepare();
        let mut fired = None;
        for q in 1..=config.max_iterations {
            if probe.iterate().unwrap().satisfied {
                fired = Some(q);
                break;
            }
        }
        let Some(fired) = fired else {
            pass = false;
            lines.push(format!("z=x_0*{scale}: criterion never fired"));
            continue;
        };
        let series = residual_series(prepare(), fired.max(2), &reference).unwrap();
        let fit = fit_envelope(&series.values).unwrap();
        let first = series.values[0];
        let at_fire = series.values[fired];
        let orders = (first / at_fire).log10();
        let ok = fit.valid
            && fit.c > 0.0
            && fit.c < 1.0
            && (0.1..=10.0).contains(&first)
            && orders >= 2.0;
        pass &= ok;
        lines.push(format!(
            "z=x_0*{scale}: C={:.3}, Delta^0={first:.3}, {orders:.2} decades by q={fired}",
            fit.c
        ));
    }
    outcome(pass, lines.join("; "))
}

fn criterion_8(_: &mut Shared) -> Outcome {
    let mut config = Config::for_system(SystemConfig::SpringMass {
        agents: 10,
        seed: 1,
    });
    config.admm.d = Some(0.5);
    config.experiment.sweep = Some(SweepConfig {
        param: SweepParam::N,
        values: vec![10.0, 40.0, 80.0],
        seeds: (1..=5).collect(),
    });
    let report = sweep(&config, None).unwrap();
    let failures: usize = report.stats.iter().map(|s| s.failures).sum();
    let mins: Vec<f64> = report.stats.iter().map(|s| s.qk_min_mean).collect();
    let avgs: Vec<f64> = report.stats.iter().map(|s| s.qk_avg_mean).collect();
    let min_spread = mins.iter().copied().fold(0.0, f64::max)
        / mins.iter().copied().fold(f64::INFINITY, f64::min);
    let avg_ratio = avgs[2] / avgs[0];
    outcome(
        failures == 0 && min_spread <= 2.0 && avg_ratio <= 3.0,
        format!(
            "mean min-q_k {mins:.2?} (spread {min_spread:.2}, <= 2); mean avg-q_k {avgs:.2?} \
             (N=80/N=10 = {avg_ratio:.2}, <= 3); failed cells {failures}"
        ),
    )
}

/// `||x_F - x*||` of the first ADMM solve at `x0`.
fn first_step_error(b: &Benchmark, x0: &[f64], d: f64) -> f64 {
    let grid = grid_of(b);
    let config = AdmmConfig {
        d,
        ..b.admm_config()
    };
    let res = admm_solve(&b.system, grid, x0, &config).unwrap();
    let reference =
        solve_centralized(&b.system, grid, x0, &SolverSettings::accurate(), None).unwrap();
    let actual = actual_trajectory(&b.system, x0, &res.stacked_input().unwrap()).unwrap();
    suboptimality_error(&actual, &reference.x).unwrap()
}

fn criterion_9(_: &mut Shared) -> Outcome {
    let b = spring2();
    let errors: Vec<f64> = [0.5, 0.05, 0.005]
        .iter()
        .map(|d| first_step_error(&b, &b.x0, *d))
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] <= w[0]);
    let half: Vec<f64> = b.x0.iter().map(|v| 0.5 * v).collect();
    let ratio = first_step_error(&b, &half, 0.05) / errors[1];
    // Other draws, for context only.
    let others: Vec<String> = (2..=5)
        .map(|seed| {
            let o = build_spring_mass(2, seed).unwrap();
            let half: Vec<f64> = o.x0.iter().map(|v| 0.5 * v).collect();
            let r = first_step_error(&o, &half, 0.05) / first_step_error(&o, &o.x0, 0.05);
            format!("{r:.2}")
        })
        .collect();
    outcome(
        monotone && (0.3..=0.7).contains(&ratio),
        format!(
            "seed 1 errors over d=(0.5, 0.05, 0.005): [{}]; halved x0 ratio {ratio:.3} \
             (in [0.3, 0.7]); seeds 2..5 ratios [{}]",
            errors
                .iter()
                .map(|e| format!("{e:.3e}"))
                .collect::<Vec<_>>()
                .join(", "),
            others.join(", ")
        ),
    )
}

fn gradient_checks(b: &Benchmark, seed: u64) -> f64 {
    let grid = grid_of(b);
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut admm = Admm::cold(&b.system, grid, &b.x0, b.admm_config()).unwrap();
    // A few iterations move (u, v) away from the trivial cold start.
    for _ in 0..3 {
        admm.iterate().unwrap();
    }
    let mut worst: f64 = 0.0;
    let rho = b.rho;
    for a in admm.agents_mut() {
        let i = a.index();
        let n = b.system.subsystem(i).state_dim();
        let m = b.system.subsystem(i).input_dim();
        let p = b.system.copy_dim(i);
        a.set_coordination(random_traj(&mut rng, grid, n, 1.0))
            .unwrap();
        a.set_multipliers(
            random_traj(&mut rng, grid, n, 1.0),
            random_traj(&mut rng, grid, p, 1.0),
        )
        .unwrap();
        for &j in b.system.subsystem(i).sending() {
            let nj = b.system.subsystem(j).state_dim();
            a.set_received_coordination(&b.system, j, random_traj(&mut rng, grid, nj, 1.0))
                .unwrap();
        }
        for _ in 0..3 {
            let dir = random_traj(&mut rng, grid, m + p, 1.0);
            worst = worst.max(a.local_gradient_check(&b.system, rho, &dir).unwrap());
        }
    }
    worst
}

fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "timing.json")
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn artifacts_with_threads(
    config: &Config,
    threads: usize,
    dir: &Path,
) -> BTreeMap<String, Vec<u8>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    let output = pool.install(|| run_in_memory(config)).unwrap();
    write_run(&output, dir).unwrap();
    files_in(dir)
}

fn criterion_10(_: &mut Shared) -> Outcome {
    let benches = [build_vdp().unwrap(), build_spring_mass(6, 4).unwrap()];
    let grad = benches
        .iter()
        .enumerate()
        .map(|(k, b)| gradient_checks(b, 10 + k as u64))
        .fold(0.0, f64::max);
    let lyap = benches
        .iter()
        .flat_map(|b| {
            b.terminal_design
                .iter()
                .enumerate()
                .map(|(i, (a_cl, q_hat))| {
                    lyapunov_residual(b.system.subsystem(i).terminal(), a_cl, q_hat)
                })
        })
        .fold(0.0, f64::max);

    let tmp = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut compared = 0;
    for (name, system) in [
        ("vdp", SystemConfig::VanDerPol),
        ("spring", SystemConfig::SpringMass { agents: 6, seed: 4 }),
    ] {
        let mut config = Config::for_system(system);
        config.mpc.steps = 15;
        config.experiment.trajectories = true;
        config.experiment.telemetry = true;
        config.experiment.residuals = true;
        let a = artifacts_with_threads(&config, 1, &tmp.path().join(format!("{name}_a")));
        let b = artifacts_with_threads(&config, 1, &tmp.path().join(format!("{name}_b")));
        let c = artifacts_with_threads(&config, 4, &tmp.path().join(format!("{name}_c")));
        identical &= a == b && a == c;
        compared += a.len();
    }
    outcome(
        grad <= 1e-4 && lyap <= 1e-9 && identical,
        format!(
            "worst gradient error {grad:.2e} (<= 1e-4); worst Lyapunov residual {lyap:.2e} \
             (<= 1e-9); {compared} artifacts bit-identical across runs and 1/4 threads: {identical}"
        ),
    )
}

fn main() {
    // Ignore the arguments libtest would pass (e.g. a name filter).
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(usize, &str, Check, Duration); 10] = [
        (
            1,
            "oracle equivalence",
            criterion_1,
            Duration::from_secs(30),
        ),
        (
            2,
            "z-update optimality",
            criterion_2,
            Duration::from_secs(10),
        ),
        (3, "criterion/residual identity", criterion_3, Duration::MAX),
        (
            4,
            "van der pol closed loop",
            criterion_4,
            Duration::from_secs(300),
        ),
        (
            5,
            "iteration ordering",
            criterion_5,
            Duration::from_secs(600),
        ),
        (6, "bounded iterations", criterion_6, Duration::MAX),
        (7, "R-linear envelope", criterion_7, Duration::MAX),
        (
            8,
            "spring-mass scalability",
            criterion_8,
            Duration::from_secs(1200),
        ),
        (9, "suboptimality scaling", criterion_9, Duration::MAX),
        (10, "numerics hygiene", criterion_10, Duration::MAX),
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (id, name, check, budget) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = check(&mut shared);
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = result.pass && in_time;
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(" / {}s budget", budget.as_secs())
        };
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}
