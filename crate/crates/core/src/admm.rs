//! Distributed ADMM with local copies of neighbor states.
//!
//! Each agent `i` owns its input `u_i`, copies `v_i` of the states of its
//! sending neighbors, its predicted state `x_i`, a coordination trajectory
//! `z_i`, multipliers `mu_ii` and `mu_ji` (one block per `j` in `N<-(i)`) and
//! local copies `mu_ij` of the multipliers that receiving neighbors hold for
//! `z_i - v_ij`. One iteration runs in bulk-synchronous phases:
//!
//! 1. every agent minimizes its augmented local problem,
//! 2. agents send the copy blocks `v_ji` to their owners `j`,
//! 3. every agent updates `z_i` in closed form,
//! 4. agents send `z_i` to the agents that copy them,
//! 5. multipliers and multiplier copies take an ascent step of size `rho`,
//! 6. the stopping criterion is reduced over all agents.
//!
//! Messages travel through per-agent mailboxes stamped with the iteration
//! they belong to, so a missing delivery is detected instead of silently
//! reusing stale data. Agents only ever read their own state, which makes
//! every result independent of how rayon schedules them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{quad_form_grad, CoupledSystem, SubsystemModel};
use crate::ocp::{OcpProblem, OcpSolver, SolverSettings};
use crate::trajectory::{euclid, linf_norm_stacked, resample_shift, TimeGrid, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingMode {
    /// Stop at the first iteration where every agent meets its bound.
    StoppingCriterion,
    /// Run a fixed number of iterations without global communication.
    FixedIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub d: f64,
    pub mode: StoppingMode,
    pub fixed_iterations: usize,
    /// Safety cap in stopping-criterion mode.
    pub max_iterations: usize,
    pub solver: SolverSettings,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            d: 0.05,
            mode: StoppingMode::StoppingCriterion,
            fixed_iterations: 10,
            max_iterations: 500,
            solver: SolverSettings::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::Config(format!("d must be positive, got {}", self.d)));
        }
        if self.fixed_iterations == 0 || self.max_iterations == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        self.solver.validate()
    }
}

/// Why [`Admm::solve`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Criterion,
    FixedCount,
    IterationCap,
}

/// Message and reduction counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub v_messages: usize,
    pub z_messages: usize,
    pub reductions: usize,
}

/// Per-iteration telemetry, one JSON line each.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub step: usize,
    pub q: usize,
    /// `||(dz_i; dmu_i)||` per agent.
    pub criterion: Vec<f64>,
    /// `d ||x_k,i||` per agent.
    pub threshold: Vec<f64>,
    /// `||(z_i - x_i; [z_j - v_ji])||` per agent.
    pub primal_residual: Vec<f64>,
    /// Augmented local objective per agent.
    pub local_cost: Vec<f64>,
    pub satisfied: bool,
}

#[derive(Clone, Debug)]
struct Stamped {
    q: usize,
    traj: Trajectory,
}

/// Everything one agent knows.
#[derive(Clone, Debug)]
pub struct AgentState {
    index: usize,
    x0: Vec<f64>,
    u: Trajectory,
    v: Trajectory,
    x: Trajectory,
    z: Trajectory,
    mu_own: Trajectory,
    mu_nb: Trajectory,
    mu_copy: Vec<Trajectory>,
    z_in: Vec<Stamped>,
    v_in: Vec<Option<Stamped>>,
    dz: Trajectory,
    dmu_own: Trajectory,
    dmu_nb: Trajectory,
    q: usize,
    criterion: f64,
    primal_residual: f64,
    local_cost: f64,
    solver: OcpSolver,
}

impl AgentState {
    /// Cold start: `z_i = x_k,i` and copies at the neighbors' current
    /// states (all held constant), zero multipliers, zero clipped input.
    pub fn cold(
        sys: &CoupledSystem,
        index: usize,
        grid: TimeGrid,
        x_k: &[f64],
        solver: SolverSettings,
    ) -> Result<Self> {
        if x_k.len() != sys.state_dim() {
            return Err(Error::Dimension(format!(
                "initial state has dim {}, system has {}",
                x_k.len(),
                sys.state_dim()
            )));
        }
        let sub = sys.subsystem(index);
        let x0 = x_k[sys.state_range(index)].to_vec();
        let mut u0 = vec![0.0; sub.input_dim()];
        sub.clip(&mut u0);
        let mut copies = Vec::new();
        sys.gather_copy(index, x_k, &mut copies);
        let n = sub.state_dim();
        let p = sys.copy_dim(index);
        let z_in = sub
            .sending()
            .iter()
            .map(|&j| Stamped {
                q: 0,
                traj: Trajectory::constant(grid, &x_k[sys.state_range(j)]),
            })
            .collect();
        let receivers = sys.graph().receiving(index).len();
        Ok(AgentState {
            index,
            u: Trajectory::constant(grid, &u0),
            v: Trajectory::constant(grid, &copies),
            x: Trajectory::constant(grid, &x0),
            z: Trajectory::constant(grid, &x0),
            x0,
            mu_own: Trajectory::zeros(grid, n),
            mu_nb: Trajectory::zeros(grid, p),
            mu_copy: vec![Trajectory::zeros(grid, n); receivers],
            z_in,
            v_in: vec![None; receivers],
            dz: Trajectory::zeros(grid, n),
            dmu_own: Trajectory::zeros(grid, n),
            dmu_nb: Trajectory::zeros(grid, p),
            q: 0,
            criterion: 0.0,
            primal_residual: 0.0,
            local_cost: 0.0,
            solver: OcpSolver::new(solver),
        })
    }

    /// Re-targets a previous step's final iterate to the new initial state.
    ///
    /// `shift` moves every trajectory forward by that duration (holding the
    /// tail); `None` reuses the iterate as is.
    pub fn warm(mut self, sys: &CoupledSystem, x_k: &[f64], shift: Option<f64>) -> Result<Self> {
        if x_k.len() != sys.state_dim() {
            return Err(Error::Dimension("initial state dimension".into()));
        }
        self.x0 = x_k[sys.state_range(self.index)].to_vec();
        if let Some(dt) = shift {
            let s = |t: &Trajectory| resample_shift(t, dt);
            self.u = s(&self.u)?;
            self.v = s(&self.v)?;
            self.x = s(&self.x)?;
            self.z = s(&self.z)?;
            self.mu_own = s(&self.mu_own)?;
            self.mu_nb = s(&self.mu_nb)?;
            for m in &mut self.mu_copy {
                *m = s(m)?;
            }
            for msg in &mut self.z_in {
                msg.traj = s(&msg.traj)?;
            }
        }
        for msg in &mut self.z_in {
            msg.q = 0;
        }
        self.v_in.iter_mut().for_each(|m| *m = None);
        self.q = 0;
        Ok(self)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    pub fn input(&self) -> &Trajectory {
        &self.u
    }

    /// Stacked copies `v_i` of the sending neighbors' states.
    pub fn copies(&self) -> &Trajectory {
        &self.v
    }

    pub fn state(&self) -> &Trajectory {
        &self.x
    }

    pub fn coordination(&self) -> &Trajectory {
        &self.z
    }

    /// Overrides `z_i`, e.g. to start from a chosen initialization.
    pub fn set_coordination(&mut self, z: Trajectory) -> Result<()> {
        if z.grid() != self.z.grid() || z.dim() != self.z.dim() {
            return Err(Error::Dimension("coordination trajectory shape".into()));
        }
        self.z = z;
        Ok(())
    }

    /// Overrides the mailbox value of `z_j` held by this agent.
    pub fn set_received_coordination(
        &mut self,
        sys: &CoupledSystem,
        from: usize,
        z: Trajectory,
    ) -> Result<()> {
        let pos = position(sys.subsystem(self.index).sending(), from)?;
        if z.grid() != self.z.grid() || z.dim() != sys.subsystem(from).state_dim() {
            return Err(Error::Dimension("coordination trajectory shape".into()));
        }
        self.z_in[pos].traj = z;
        Ok(())
    }

    /// `mu_ii`.
    pub fn multiplier(&self) -> &Trajectory {
        &self.mu_own
    }

    /// Stacked `mu_ji` for `j` in `N<-(i)`, aligned with [`Self::copies`].
    pub fn neighbor_multipliers(&self) -> &Trajectory {
        &self.mu_nb
    }

    /// Local copy of `mu_ij` for receiving neighbor `j`.
    pub fn multiplier_copy(&self, sys: &CoupledSystem, j: usize) -> Option<&Trajectory> {
        let pos = sys
            .graph()
            .receiving(self.index)
            .iter()
            .position(|&r| r == j)?;
        Some(&self.mu_copy[pos])
    }

    /// Latest received `z_j` for sending neighbor `j`.
    pub fn received_coordination(&self, sys: &CoupledSystem, j: usize) -> Option<&Trajectory> {
        let pos = sys
            .subsystem(self.index)
            .sending()
            .iter()
            .position(|&s| s == j)?;
        Some(&self.z_in[pos].traj)
    }

    /// Increments `(z^q - z^{q-1}, mu_ii^q - mu_ii^{q-1}, mu_ji^q - mu_ji^{q-1})`
    /// of the last iteration.
    pub fn increments(&self) -> (&Trajectory, &Trajectory, &Trajectory) {
        (&self.dz, &self.dmu_own, &self.dmu_nb)
    }

    /// `||(dz_i; dmu_i)||` of the last iteration.
    pub fn criterion_value(&self) -> f64 {
        self.criterion
    }

    pub fn iteration(&self) -> usize {
        self.q
    }

    /// Copy block `v_ji` destined for sending neighbor `j`.
    fn copy_block(&self, sys: &CoupledSystem, j: usize) -> Trajectory {
        let off = sys.copy_offset(self.index, j).expect("sending neighbor");
        self.v.columns(off, sys.subsystem(j).state_dim())
    }

    fn receive_copy(
        &mut self,
        sys: &CoupledSystem,
        from: usize,
        q: usize,
        traj: Trajectory,
    ) -> Result<()> {
        let pos = position(sys.graph().receiving(self.index), from)?;
        self.v_in[pos] = Some(Stamped { q, traj });
        Ok(())
    }

    fn receive_coordination(
        &mut self,
        sys: &CoupledSystem,
        from: usize,
        q: usize,
        traj: Trajectory,
    ) -> Result<()> {
        let pos = position(sys.subsystem(self.index).sending(), from)?;
        self.z_in[pos] = Stamped { q, traj };
        Ok(())
    }

    fn stacked_received_z(&self, q: usize) -> Result<Trajectory> {
        let grid = *self.z.grid();
        for msg in &self.z_in {
            if msg.q != q {
                return Err(Error::Protocol(format!(
                    "agent {} expected z from iteration {q}, mailbox holds {}",
                    self.index, msg.q
                )));
            }
        }
        let parts: Vec<&Trajectory> = self.z_in.iter().map(|m| &m.traj).collect();
        if parts.is_empty() {
            return Ok(Trajectory::zeros(grid, 0));
        }
        Trajectory::hstack(grid, &parts)
    }

    fn received_copies(&self, q: usize) -> Result<Vec<&Trajectory>> {
        self.v_in
            .iter()
            .map(|m| match m {
                Some(s) if s.q == q => Ok(&s.traj),
                _ => Err(Error::Protocol(format!(
                    "agent {} is missing a copy message of iteration {q}",
                    self.index
                ))),
            })
            .collect()
    }

    fn local_problem<'a>(
        &'a self,
        sys: &'a CoupledSystem,
        rho: f64,
        z_nb: &'a Trajectory,
    ) -> LocalProblem<'a> {
        let sub = sys.subsystem(self.index);
        let width = sub.input_dim() + self.v.dim();
        let mut lower = sub.lower_bounds().to_vec();
        let mut upper = sub.upper_bounds().to_vec();
        lower.resize(width, f64::NEG_INFINITY);
        upper.resize(width, f64::INFINITY);
        LocalProblem {
            sub,
            grid: *self.z.grid(),
            x0: &self.x0,
            lower,
            upper,
            rho,
            z_own: &self.z,
            mu_own: &self.mu_own,
            z_nb,
            mu_nb: &self.mu_nb,
        }
    }

    /// Overrides `mu_ii` and the stacked `mu_ji`.
    pub fn set_multipliers(&mut self, own: Trajectory, neighbors: Trajectory) -> Result<()> {
        let same = |a: &Trajectory, b: &Trajectory| a.grid() == b.grid() && a.dim() == b.dim();
        if !same(&own, &self.mu_own) || !same(&neighbors, &self.mu_nb) {
            return Err(Error::Dimension("multiplier trajectory shape".into()));
        }
        self.mu_own = own;
        self.mu_nb = neighbors;
        Ok(())
    }

    /// Checks the adjoint gradient of the augmented local problem at the
    /// current `(u_i, v_i)` along `direction` (same layout, inputs first)
    /// against central differences. Returns the relative discrepancy.
    pub fn local_gradient_check(
        &self,
        sys: &CoupledSystem,
        rho: f64,
        direction: &Trajectory,
    ) -> Result<f64> {
        let grid = *self.z.grid();
        let parts: Vec<&Trajectory> = self.z_in.iter().map(|m| &m.traj).collect();
        let z_nb = if parts.is_empty() {
            Trajectory::zeros(grid, 0)
        } else {
            Trajectory::hstack(grid, &parts)?
        };
        let problem = self.local_problem(sys, rho, &z_nb);
        let w = Trajectory::hstack(grid, &[&self.u, &self.v])?;
        crate::ocp::check_gradient(&problem, &w, direction)
    }

    /// Phase 1: minimizes the augmented local problem at the previous
    /// coordination values, warm-started from the previous `(u_i, v_i)`.
    pub fn local_minimize(&mut self, sys: &CoupledSystem, rho: f64) -> Result<()> {
        let z_nb = self.stacked_received_z(self.q)?;
        let problem = self.local_problem(sys, rho, &z_nb);
        let (m, p) = (self.u.dim(), self.v.dim());
        let w0 = Trajectory::hstack(*self.z.grid(), &[&self.u, &self.v])?;
        // The solver only carries its step memory, so a copy is cheap.
        let mut solver = self.solver.clone();
        let sol = solver
            .solve(&problem, &w0)
            .map_err(|e| e.for_agent(self.index))?;
        self.solver = solver;
        self.u = sol.w.columns(0, m);
        self.v = sol.w.columns(m, p);
        self.x = sol.x;
        self.local_cost = sol.cost;
        self.q += 1;
        Ok(())
    }

    /// Phase 3: closed-form `z_i` update from this iteration's copies.
    pub fn z_update(&mut self, rho: f64) -> Result<()> {
        let copies = self.received_copies(self.q)?;
        let mu_copies: Vec<&Trajectory> = self.mu_copy.iter().collect();
        let z = coordination_update(&self.x, &copies, &self.mu_own, &mu_copies, rho)?;
        self.dz = z.sub(&self.z)?;
        self.z = z;
        Ok(())
    }

    /// Phase 5: multiplier ascent on `z_i - x_i` and `z_j - v_ji`.
    pub fn mu_update(&mut self, rho: f64) -> Result<()> {
        let z_nb = self.stacked_received_z(self.q)?;
        let r_own = self.z.sub(&self.x)?;
        let r_nb = z_nb.sub(&self.v)?;
        self.primal_residual = linf_norm_stacked(&[&r_own, &r_nb])?;
        self.dmu_own = scaled(&r_own, rho);
        self.dmu_nb = scaled(&r_nb, rho);
        self.mu_own.axpy(1.0, &self.dmu_own)?;
        self.mu_nb.axpy(1.0, &self.dmu_nb)?;
        self.criterion = linf_norm_stacked(&[&self.dz, &self.dmu_own, &self.dmu_nb])?;
        Ok(())
    }

    /// Phase 5: local copies `mu_ij += rho (z_i - v_ij)`.
    pub fn mu_copy_update(&mut self, rho: f64) -> Result<()> {
        let copies = self.received_copies(self.q)?;
        let mut next = Vec::with_capacity(copies.len());
        for (mu, v) in self.mu_copy.iter().zip(copies) {
            let mut m = mu.clone();
            m.axpy(1.0, &scaled(&self.z.sub(v)?, rho))?;
            next.push(m);
        }
        self.mu_copy = next;
        Ok(())
    }
}

fn position(list: &[usize], who: usize) -> Result<usize> {
    list.iter()
        .position(|&j| j == who)
        .ok_or_else(|| Error::Protocol(format!("agent {who} is not a neighbor")))
}

fn scaled(t: &Trajectory, rho: f64) -> Trajectory {
    let mut out = t.clone();
    out.scale(rho);
    out
}

/// `z_i = (x_i + sum v_ij - (mu_ii + sum mu_ij) / rho) / (|N->(i)| + 1)`,
/// evaluated nodewise.
pub fn coordination_update(
    x: &Trajectory,
    copies: &[&Trajectory],
    mu_own: &Trajectory,
    mu_copies: &[&Trajectory],
    rho: f64,
) -> Result<Trajectory> {
    if copies.len() != mu_copies.len() {
        return Err(Error::Protocol("copy and multiplier counts differ".into()));
    }
    for t in copies.iter().chain(mu_copies).chain([&mu_own]) {
        if t.grid() != x.grid() {
            return Err(Error::GridMismatch);
        }
        if t.dim() != x.dim() {
            return Err(Error::Dimension("coordination inputs".into()));
        }
    }
    let count = (copies.len() + 1) as f64;
    let mut z = x.clone();
    for (k, out) in z.values_mut().iter_mut().enumerate() {
        let mut sum_v = *out;
        let mut sum_mu = mu_own.values()[k];
        for (v, mu) in copies.iter().zip(mu_copies) {
            sum_v += v.values()[k];
            sum_mu += mu.values()[k];
        }
        *out = (sum_v - sum_mu / rho) / count;
    }
    Ok(z)
}

/// The `z_i`-dependent part of the augmented Lagrangian,
/// `int mu_ii'(z - x) + rho/2 |z - x|^2 + sum_j mu_ij'(z - v_ij) + rho/2 |z - v_ij|^2`.
pub fn coordination_objective(
    z: &Trajectory,
    x: &Trajectory,
    copies: &[&Trajectory],
    mu_own: &Trajectory,
    mu_copies: &[&Trajectory],
    rho: f64,
) -> f64 {
    let grid = *z.grid();
    let mut total = 0.0;
    for r in 0..grid.nodes() {
        let mut node = 0.0;
        let mut term = |target: &Trajectory, mu: &Trajectory| {
            for c in 0..z.dim() {
                let diff = z.row(r)[c] - target.row(r)[c];
                node += mu.row(r)[c] * diff + 0.5 * rho * diff * diff;
            }
        };
        term(x, mu_own);
        for (v, mu) in copies.iter().zip(mu_copies) {
            term(v, mu);
        }
        total += grid.weight(r) * node;
    }
    total
}

/// `true` iff `values[i] <= d * norms[i]` for every agent.
pub fn stopping_check(values: &[f64], d: f64, norms: &[f64]) -> bool {
    values.iter().zip(norms).all(|(v, n)| *v <= d * n)
}

/// Local problem of one agent over `w_i = (u_i, v_i)`.
struct LocalProblem<'a> {
    sub: &'a SubsystemModel,
    grid: TimeGrid,
    x0: &'a [f64],
    lower: Vec<f64>,
    upper: Vec<f64>,
    rho: f64,
    z_own: &'a Trajectory,
    mu_own: &'a Trajectory,
    z_nb: &'a Trajectory,
    mu_nb: &'a Trajectory,
}

impl LocalProblem<'_> {
    fn split<'w>(&self, w: &'w [f64]) -> (&'w [f64], &'w [f64]) {
        w.split_at(self.sub.input_dim())
    }
}

impl OcpProblem for LocalProblem<'_> {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn state_dim(&self) -> usize {
        self.sub.state_dim()
    }

    fn decision_dim(&self) -> usize {
        self.lower.len()
    }

    fn initial_state(&self) -> &[f64] {
        self.x0
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn dynamics(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (u, v) = self.split(w);
        self.sub.eval(x, u, v, out);
    }

    fn dynamics_vjp(&self, x: &[f64], w: &[f64], lam: &[f64], gx: &mut [f64], gw: &mut [f64]) {
        let (u, v) = self.split(w);
        let (n, m, p) = (x.len(), u.len(), v.len());
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n * m];
        let mut jv = vec![0.0; n * p];
        self.sub.jacobians(x, u, v, &mut jx, &mut ju, &mut jv);
        for (row, l) in lam.iter().enumerate() {
            if *l == 0.0 {
                continue;
            }
            for c in 0..n {
                gx[c] += jx[row * n + c] * l;
            }
            for c in 0..m {
                gw[c] += ju[row * m + c] * l;
            }
            for c in 0..p {
                gw[m + c] += jv[row * p + c] * l;
            }
        }
    }

    fn running_cost(&self, node: usize, x: &[f64], w: &[f64]) -> f64 {
        let (u, v) = self.split(w);
        let mut cost = self.sub.running_cost(x, u);
        let penalty = |target: &[f64], own: &[f64], mu: &[f64]| -> f64 {
            let mut acc = 0.0;
            for c in 0..own.len() {
                let diff = target[c] - own[c];
                acc += mu[c] * diff + 0.5 * self.rho * diff * diff;
            }
            acc
        };
        cost += penalty(self.z_own.row(node), x, self.mu_own.row(node));
        cost += penalty(self.z_nb.row(node), v, self.mu_nb.row(node));
        cost
    }

    fn running_cost_grad(
        &self,
        node: usize,
        x: &[f64],
        w: &[f64],
        scale: f64,
        gx: &mut [f64],
        gw: &mut [f64],
    ) {
        let (u, v) = self.split(w);
        let m = u.len();
        let gamma = self.sub.gamma();
        quad_form_grad(self.sub.q(), x, scale * gamma, gx);
        quad_form_grad(self.sub.r(), u, scale * gamma, &mut gw[..m]);
        let (z, mu) = (self.z_own.row(node), self.mu_own.row(node));
        for c in 0..x.len() {
            gx[c] -= scale * (mu[c] + self.rho * (z[c] - x[c]));
        }
        let (z, mu) = (self.z_nb.row(node), self.mu_nb.row(node));
        for c in 0..v.len() {
            gw[m + c] -= scale * (mu[c] + self.rho * (z[c] - v[c]));
        }
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.sub.terminal_cost(x)
    }

    fn terminal_grad(&self, x: &[f64], g: &mut [f64]) {
        quad_form_grad(self.sub.terminal(), x, 1.0, g);
    }
}

/// Final iterate and histories of one ADMM solve.
#[derive(Clone, Debug)]
pub struct AdmmResult {
    pub agents: Vec<AgentState>,
    /// `q_k`, counting the iteration at which the solve stopped.
    pub iterations: usize,
    /// `criterion[q - 1][i]` is agent `i`'s criterion value at iteration `q`.
    pub criterion: Vec<Vec<f64>>,
    pub termination: Termination,
    pub comm: CommStats,
    pub records: Vec<IterationRecord>,
}

impl AdmmResult {
    pub fn converged(&self) -> bool {
        self.termination != Termination::IterationCap
    }

    /// Inputs of all agents side by side, in agent order.
    pub fn stacked_input(&self) -> Result<Trajectory> {
        let grid = *self.agents[0].u.grid();
        let parts: Vec<&Trajectory> = self.agents.iter().map(|a| &a.u).collect();
        Trajectory::hstack(grid, &parts)
    }

    /// Predicted states of all agents side by side.
    pub fn stacked_state(&self) -> Result<Trajectory> {
        let grid = *self.agents[0].x.grid();
        let parts: Vec<&Trajectory> = self.agents.iter().map(|a| &a.x).collect();
        Trajectory::hstack(grid, &parts)
    }

    /// Coordination variables side by side.
    pub fn stacked_coordination(&self) -> Result<Trajectory> {
        let grid = *self.agents[0].z.grid();
        let parts: Vec<&Trajectory> = self.agents.iter().map(|a| &a.z).collect();
        Trajectory::hstack(grid, &parts)
    }

    /// All multipliers `(mu_ii, mu_ji)` side by side.
    pub fn stacked_multipliers(&self) -> Result<Trajectory> {
        let grid = *self.agents[0].z.grid();
        let mut parts: Vec<&Trajectory> = Vec::new();
        for a in &self.agents {
            parts.push(&a.mu_own);
            if a.mu_nb.dim() > 0 {
                parts.push(&a.mu_nb);
            }
        }
        Trajectory::hstack(grid, &parts)
    }
}

/// ADMM coordinator for one MPC step.
#[derive(Debug)]
pub struct Admm<'a> {
    sys: &'a CoupledSystem,
    config: AdmmConfig,
    agents: Vec<AgentState>,
    norms: Vec<f64>,
    comm: CommStats,
    step: usize,
}

impl<'a> Admm<'a> {
    /// Cold-started coordinator at state `x_k`.
    pub fn cold(
        sys: &'a CoupledSystem,
        grid: TimeGrid,
        x_k: &[f64],
        config: AdmmConfig,
    ) -> Result<Self> {
        let agents = (0..sys.agents())
            .map(|i| AgentState::cold(sys, i, grid, x_k, config.solver.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::with_agents(sys, agents, config)
    }

    /// Coordinator over prepared agent states (e.g. warm starts).
    pub fn with_agents(
        sys: &'a CoupledSystem,
        agents: Vec<AgentState>,
        config: AdmmConfig,
    ) -> Result<Self> {
        config.validate()?;
        if agents.len() != sys.agents() || agents.iter().enumerate().any(|(i, a)| a.index != i) {
            return Err(Error::Protocol(
                "agent states must be given in agent order".into(),
            ));
        }
        let norms = agents.iter().map(|a| euclid(&a.x0)).collect();
        Ok(Admm {
            sys,
            config,
            agents,
            norms,
            comm: CommStats::default(),
            step: 0,
        })
    }

    /// Tags telemetry records with the MPC step index.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [AgentState] {
        &mut self.agents
    }

    pub fn comm(&self) -> CommStats {
        self.comm
    }

    /// Runs one full iteration and reports it.
    pub fn iterate(&mut self) -> Result<IterationRecord> {
        let sys = self.sys;
        let rho = self.config.rho;

        first_error(
            self.agents
                .par_iter_mut()
                .map(|a| a.local_minimize(sys, rho))
                .collect(),
        )?;
        let q = self.agents[0].q;

        let mut outbox = Vec::with_capacity(sys.graph().edge_count());
        for a in &self.agents {
            for &j in sys.subsystem(a.index).sending() {
                outbox.push((j, a.index, a.copy_block(sys, j)));
            }
        }
        self.comm.v_messages += outbox.len();
        for (to, from, traj) in outbox {
            self.agents[to].receive_copy(sys, from, q, traj)?;
        }

        first_error(
            self.agents
                .par_iter_mut()
                .map(|a| a.z_update(rho))
                .collect(),
        )?;

        let mut outbox = Vec::with_capacity(sys.graph().edge_count());
        for a in &self.agents {
            for &j in sys.graph().receiving(a.index) {
                outbox.push((j, a.index, a.z.clone()));
            }
        }
        self.comm.z_messages += outbox.len();
        for (to, from, traj) in outbox {
            self.agents[to].receive_coordination(sys, from, q, traj)?;
        }

        first_error(
            self.agents
                .par_iter_mut()
                .map(|a| {
                    a.mu_update(rho)?;
                    a.mu_copy_update(rho)
                })
                .collect(),
        )?;

        let criterion: Vec<f64> = self.agents.iter().map(|a| a.criterion).collect();
        let threshold: Vec<f64> = self.norms.iter().map(|n| self.config.d * n).collect();
        let satisfied = match self.config.mode {
            StoppingMode::StoppingCriterion => {
                self.comm.reductions += 1;
                stopping_check(&criterion, self.config.d, &self.norms)
            }
            StoppingMode::FixedIterations => false,
        };
        Ok(IterationRecord {
            step: self.step,
            q,
            criterion,
            threshold,
            primal_residual: self.agents.iter().map(|a| a.primal_residual).collect(),
            local_cost: self.agents.iter().map(|a| a.local_cost).collect(),
            satisfied,
        })
    }

    /// Iterates until the configured rule stops it.
    pub fn solve(mut self) -> Result<AdmmResult> {
        let mut records = Vec::new();
        let termination = loop {
            let rec = self.iterate()?;
            let q = rec.q;
            let satisfied = rec.satisfied;
            records.push(rec);
            match self.config.mode {
                StoppingMode::StoppingCriterion if satisfied => break Termination::Criterion,
                StoppingMode::StoppingCriterion if q >= self.config.max_iterations => {
                    break Termination::IterationCap
                }
                StoppingMode::FixedIterations if q >= self.config.fixed_iterations => {
                    break Termination::FixedCount
                }
                _ => {}
            }
        };
        if termination == Termination::IterationCap {
            log::warn!(
                "ADMM hit the iteration cap {} at step {}",
                self.config.max_iterations,
                self.step
            );
        }
        Ok(AdmmResult {
            iterations: records.len(),
            criterion: records.iter().map(|r| r.criterion.clone()).collect(),
            agents: self.agents,
            termination,
            comm: self.comm,
            records,
        })
    }
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// Cold-started solve at `x_k`.
pub fn admm_solve(
    sys: &CoupledSystem,
    grid: TimeGrid,
    x_k: &[f64],
    config: &AdmmConfig,
) -> Result<AdmmResult> {
    Admm::cold(sys, grid, x_k, config.clone())?.solve()
}
