//! Receding-horizon loop: solve with ADMM, apply the first sampling
//! interval of every agent's input to the true coupled plant, warm-start the
//! next solve.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admm::{Admm, AdmmConfig, AgentState, IterationRecord, Termination};
use crate::error::{Error, Result};
use crate::network::CoupledSystem;
use crate::ocp::SolverSettings;
use crate::reference::{actual_trajectory, solve_centralized, suboptimality_error};
use crate::trajectory::{euclid, resample_shift, TimeGrid, Trajectory};

/// How step `k + 1` initializes its ADMM variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Reuse the final iterate of step `k` unchanged.
    Copy,
    /// Shift it by one sampling interval, holding the tail.
    Shift,
    /// Cold start every step.
    Cold,
}

#[derive(Clone, Debug)]
pub struct LoopConfig {
    /// Prediction grid over `[0, T]`.
    pub grid: TimeGrid,
    pub dt: f64,
    pub steps: usize,
    /// Plant integration substeps per sampling interval.
    pub substeps: usize,
    pub warm_start: WarmStart,
    pub admm: AdmmConfig,
    pub x0: Vec<f64>,
    /// Solve the centralized problem every step for `J*` and `||dx_F||`.
    pub diagnostics: bool,
    pub reference_solver: SolverSettings,
    /// Keep every agent's predicted trajectories in the log.
    pub keep_trajectories: bool,
}

impl LoopConfig {
    pub fn new(grid: TimeGrid, dt: f64, steps: usize, x0: Vec<f64>, admm: AdmmConfig) -> Self {
        LoopConfig {
            grid,
            dt,
            steps,
            substeps: 10,
            warm_start: WarmStart::Copy,
            admm,
            x0,
            diagnostics: false,
            reference_solver: SolverSettings::accurate(),
            keep_trajectories: false,
        }
    }

    /// Grid intervals per sampling interval.
    pub fn sample_nodes(&self) -> Result<usize> {
        self.grid
            .steps_in(self.dt)
            .filter(|&s| s >= 1 && s < self.grid.nodes() - 1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "sampling time {} must be a multiple of the grid step {} below the horizon",
                    self.dt,
                    self.grid.step()
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "sampling time must be positive, got {}",
                self.dt
            )));
        }
        self.sample_nodes()?;
        if self.steps == 0 || self.substeps == 0 {
            return Err(Error::Config("steps and substeps must be positive".into()));
        }
        self.admm.validate()?;
        self.reference_solver.validate()
    }
}

/// Predicted trajectories of one agent at one step.
#[derive(Clone, Debug)]
pub struct AgentTrajectories {
    pub x: Trajectory,
    pub u: Trajectory,
    pub z: Trajectory,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub k: usize,
    pub state: Vec<f64>,
    pub state_norm: f64,
    /// `q_k`.
    pub iterations: usize,
    pub termination: Termination,
    /// Criterion values per iteration and agent.
    pub criterion: Vec<Vec<f64>>,
    /// Stacked inputs on the applied nodes of `[0, dt)`.
    pub control: Vec<Vec<f64>>,
    /// Predicted stacked state at `dt`.
    pub predicted_next: Vec<f64>,
    pub j_star: Option<f64>,
    pub suboptimality: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(skip)]
    pub records: Vec<IterationRecord>,
    #[serde(skip)]
    pub trajectories: Option<Vec<AgentTrajectories>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepLog>,
    pub final_state: Vec<f64>,
}

impl ClosedLoopLog {
    pub fn iterations(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.iterations).collect()
    }

    pub fn costs(&self) -> Option<Vec<f64>> {
        self.steps.iter().map(|s| s.j_star).collect()
    }

    pub fn state_norms(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.state_norm)
            .chain([euclid(&self.final_state)])
            .collect()
    }
}

/// Integrates the true coupled dynamics over `[0, dt]` with Heun substeps,
/// holding each prediction-grid input constant until the next node.
///
/// Returns the end state and the plant trajectory on the substep grid.
pub fn apply_and_advance(
    sys: &CoupledSystem,
    x_k: &[f64],
    inputs: &Trajectory,
    dt: f64,
    substeps: usize,
) -> Result<(Vec<f64>, Trajectory)> {
    let grid = *inputs.grid();
    if inputs.dim() != sys.input_dim() || x_k.len() != sys.state_dim() {
        return Err(Error::Dimension("stacked input or state".into()));
    }
    if !(dt > 0.0 && dt <= grid.horizon()) || substeps == 0 {
        return Err(Error::Config(format!(
            "cannot apply {dt} s of a {} s plan",
            grid.horizon()
        )));
    }
    let fine = TimeGrid::new(dt, substeps + 1)?;
    let hs = fine.step();
    let n = x_k.len();
    let mut out = Trajectory::zeros(fine, n);
    out.row_mut(0).copy_from_slice(x_k);
    let mut x = x_k.to_vec();
    let (mut k1, mut k2, mut pred) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..substeps {
        let t = fine.time(s);
        // Tolerate rounding just below a node.
        let node = (((t / grid.step()) + 1e-9).floor() as usize).min(grid.nodes() - 1);
        let u = inputs.row(node);
        sys.eval_stacked_into(&x, u, &mut k1);
        for c in 0..n {
            pred[c] = x[c] + hs * k1[c];
        }
        sys.eval_stacked_into(&pred, u, &mut k2);
        for c in 0..n {
            x[c] += 0.5 * hs * (k1[c] + k2[c]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { node: s + 1 });
        }
        out.row_mut(s + 1).copy_from_slice(&x);
    }
    Ok((x, out))
}

/// Runs `config.steps` MPC steps from `config.x0`.
pub fn run_closed_loop(sys: &CoupledSystem, config: &LoopConfig) -> Result<ClosedLoopLog> {
    config.validate()?;
    if config.x0.len() != sys.state_dim() {
        return Err(Error::Config(format!(
            "initial state has {} entries, system has {}",
            config.x0.len(),
            sys.state_dim()
        )));
    }
    let applied_nodes = config.sample_nodes()?;
    let mut x_k = config.x0.clone();
    let mut previous: Option<Vec<AgentState>> = None;
    let mut reference_warm: Option<Trajectory> = None;
    let mut steps = Vec::with_capacity(config.steps);

    for k in 0..config.steps {
        let started = Instant::now();
        let agents = match (previous.take(), config.warm_start) {
            (Some(prev), WarmStart::Copy) => prev
                .into_iter()
                .map(|a| a.warm(sys, &x_k, None))
                .collect::<Result<Vec<_>>>()?,
            (Some(prev), WarmStart::Shift) => prev
                .into_iter()
                .map(|a| a.warm(sys, &x_k, Some(config.dt)))
                .collect::<Result<Vec<_>>>()?,
            _ => (0..sys.agents())
                .map(|i| AgentState::cold(sys, i, config.grid, &x_k, config.admm.solver.clone()))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut admm = Admm::with_agents(sys, agents, config.admm.clone())?;
        admm.set_step(k);
        let result = admm.solve()?;
        let u = result.stacked_input()?;
        let x_pred = result.stacked_state()?;

        let (j_star, suboptimality) = if config.diagnostics {
            let reference = solve_centralized(
                sys,
                config.grid,
                &x_k,
                &config.reference_solver,
                reference_warm.as_ref(),
            )?;
            let actual = actual_trajectory(sys, &x_k, &u)?;
            let err = suboptimality_error(&actual, &reference.x)?;
            reference_warm = Some(resample_shift(&reference.u, config.dt)?);
            (Some(reference.cost), Some(err))
        } else {
            (None, None)
        };

        let (x_next, _) = apply_and_advance(sys, &x_k, &u, config.dt, config.substeps)?;
        let trajectories = config.keep_trajectories.then(|| {
            result
                .agents
                .iter()
                .map(|a| AgentTrajectories {
                    x: a.state().clone(),
                    u: a.input().clone(),
                    z: a.coordination().clone(),
                })
                .collect()
        });
        log::debug!(
            "step {k}: |x| = {:.3e}, q = {}",
            euclid(&x_k),
            result.iterations
        );
        steps.push(StepLog {
            k,
            state_norm: euclid(&x_k),
            state: x_k,
            iterations: result.iterations,
            termination: result.termination,
            criterion: result.criterion.clone(),
            control: (0..applied_nodes).map(|r| u.row(r).to_vec()).collect(),
            predicted_next: x_pred.row(applied_nodes).to_vec(),
            j_star,
            suboptimality,
            wall_seconds: started.elapsed().as_secs_f64(),
            records: result.records,
            trajectories,
        });
        previous = Some(result.agents);
        x_k = x_next;
    }
    Ok(ClosedLoopLog {
        steps,
        final_state: x_k,
    })
}
