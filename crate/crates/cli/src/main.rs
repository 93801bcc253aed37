//! `dmpc`: closed-loop distributed MPC runs, parameter sweeps and
//! centralized diagnostics from JSON configurations.
//!
//! Exit status is 0 on success, 2 for configuration or input errors and 3
//! for numerical failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dmpc::admm::StoppingMode;
use dmpc::config::{Config, SweepConfig, SweepParam};
use dmpc::Error;

#[derive(Parser, Debug)]
#[command(name = "dmpc", version, about = "Distributed MPC with suboptimal ADMM")]
struct Cli {
    /// Log filter, e.g. `info` or `dmpc=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    /// Worker threads for agent-parallel phases and sweeps (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one closed loop and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run exactly this many ADMM iterations per step.
        #[arg(long)]
        fixed_iters: Option<usize>,
        /// Write one JSON line per ADMM iteration.
        #[arg(long)]
        telemetry: bool,
    },
    /// Sweep `d` or `N` over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured sweep parameter.
        #[arg(long, value_enum)]
        param: Option<Param>,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fixed_iters: Option<usize>,
    },
    /// Recompute centralized optima for a finished run.
    Diag {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Param {
    #[value(name = "d")]
    D,
    #[value(name = "N", alias = "n")]
    N,
}

fn apply_fixed(config: &mut Config, fixed: Option<usize>) {
    if let Some(n) = fixed {
        config.admm.mode = StoppingMode::FixedIterations;
        config.admm.fixed_iterations = n;
    }
}

fn execute(command: Command) -> dmpc::Result<()> {
    match command {
        Command::Run {
            config,
            out,
            fixed_iters,
            telemetry,
        } => {
            let mut config = Config::from_file(&config)?;
            apply_fixed(&mut config, fixed_iters);
            config.experiment.telemetry |= telemetry;
            let summary = dmpc::experiment::run(&config, &out)?;
            println!(
                "{} steps, q_k max {} avg {:.2} min {}, final |x| {:.3e}",
                summary.iterations.len(),
                summary.qk_max,
                summary.qk_avg,
                summary.qk_min,
                summary.state_norms.last().copied().unwrap_or(0.0)
            );
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
            fixed_iters,
        } => {
            let mut config = Config::from_file(&config)?;
            apply_fixed(&mut config, fixed_iters);
            let base = config.experiment.sweep.take();
            let sweep = SweepConfig {
                param: match param {
                    Some(Param::D) => SweepParam::D,
                    Some(Param::N) => SweepParam::N,
                    None => base.as_ref().map(|s| s.param).ok_or_else(|| {
                        Error::Config("no sweep parameter given or configured".into())
                    })?,
                },
                values: values
                    .or_else(|| base.as_ref().map(|s| s.values.clone()))
                    .unwrap_or_default(),
                seeds: seeds
                    .or_else(|| base.as_ref().map(|s| s.seeds.clone()))
                    .unwrap_or_else(|| vec![1]),
            };
            config.experiment.sweep = Some(sweep);
            let report = dmpc::experiment::sweep(&config, Some(&out))?;
            let name = match report.param {
                SweepParam::D => "d",
                SweepParam::N => "N",
            };
            for s in &report.stats {
                println!(
                    "{}={}: avg q_k {:.2} +- {:.2}, min q_k {:.2}, max q_k {:.2}, failures {}",
                    name,
                    s.param,
                    s.qk_avg_mean,
                    s.qk_avg_std,
                    s.qk_min_mean,
                    s.qk_max_mean,
                    s.failures
                );
            }
        }
        Command::Diag { run } => {
            let report = dmpc::experiment::diag(&run)?;
            match report.decay_factor {
                Some(f) => println!("max J*(x_k+1)/J*(x_k) = {f:.4}"),
                None => println!("too few steps for a decay factor"),
            }
            if let Some((m, big_m)) = report.sandwich {
                println!("{m:.3e} |x|^2 <= J* <= {big_m:.3e} |x|^2");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot configure the thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    info!("running {:?}", cli.command);
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
