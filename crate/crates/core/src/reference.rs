//! Centralized MPC solves and the diagnostics built on them: optimal cost,
//! suboptimality of the distributed solution, ADMM residuals against a
//! reference saddle point and the geometric envelope of those residuals.

use serde::{Deserialize, Serialize};

use crate::admm::{Admm, AdmmConfig, AgentState, StoppingMode};
use crate::error::{Error, Result};
use crate::network::{quad_form_grad, CoupledSystem};
use crate::ocp::{OcpProblem, OcpSolver, SolverSettings};
use crate::trajectory::{integrate_ode, linf_norm, linf_norm_stacked, TimeGrid, Trajectory};

/// The stacked OCP over all inputs with the true coupled dynamics.
#[derive(Debug)]
pub struct CentralizedProblem<'a> {
    sys: &'a CoupledSystem,
    grid: TimeGrid,
    x0: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> CentralizedProblem<'a> {
    pub fn new(sys: &'a CoupledSystem, grid: TimeGrid, x0: &[f64]) -> Result<Self> {
        if x0.len() != sys.state_dim() {
            return Err(Error::Dimension(format!(
                "initial state has dim {}, system has {}",
                x0.len(),
                sys.state_dim()
            )));
        }
        let mut lower = Vec::with_capacity(sys.input_dim());
        let mut upper = Vec::with_capacity(sys.input_dim());
        for sub in sys.subsystems() {
            lower.extend_from_slice(sub.lower_bounds());
            upper.extend_from_slice(sub.upper_bounds());
        }
        Ok(CentralizedProblem {
            sys,
            grid,
            x0: x0.to_vec(),
            lower,
            upper,
        })
    }
}

impl OcpProblem for CentralizedProblem<'_> {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    fn decision_dim(&self) -> usize {
        self.sys.input_dim()
    }

    fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn dynamics(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.sys.eval_stacked_into(x, w, out);
    }

    fn dynamics_vjp(&self, x: &[f64], w: &[f64], lam: &[f64], gx: &mut [f64], gw: &mut [f64]) {
        self.sys.stacked_vjp(x, w, lam, gx, gw);
    }

    fn running_cost(&self, _node: usize, x: &[f64], w: &[f64]) -> f64 {
        self.sys.running_cost(x, w)
    }

    fn running_cost_grad(
        &self,
        _node: usize,
        x: &[f64],
        w: &[f64],
        scale: f64,
        gx: &mut [f64],
        gw: &mut [f64],
    ) {
        for (i, sub) in self.sys.subsystems().iter().enumerate() {
            let (sr, ir) = (self.sys.state_range(i), self.sys.input_range(i));
            quad_form_grad(sub.q(), &x[sr.clone()], scale * sub.gamma(), &mut gx[sr]);
            quad_form_grad(sub.r(), &w[ir.clone()], scale * sub.gamma(), &mut gw[ir]);
        }
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.sys.terminal_cost(x)
    }

    fn terminal_grad(&self, x: &[f64], g: &mut [f64]) {
        for (i, sub) in self.sys.subsystems().iter().enumerate() {
            let sr = self.sys.state_range(i);
            quad_form_grad(sub.terminal(), &x[sr.clone()], 1.0, &mut g[sr]);
        }
    }
}

/// Optimal open-loop solution at one state.
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub x: Trajectory,
    pub u: Trajectory,
    /// `J*(x_k)`.
    pub cost: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Solves the centralized OCP at `x_k`, starting from `warm` or zero input.
pub fn solve_centralized(
    sys: &CoupledSystem,
    grid: TimeGrid,
    x_k: &[f64],
    settings: &SolverSettings,
    warm: Option<&Trajectory>,
) -> Result<ReferenceSolution> {
    let problem = CentralizedProblem::new(sys, grid, x_k)?;
    let start = match warm {
        Some(w) => w.clone(),
        None => Trajectory::zeros(grid, sys.input_dim()),
    };
    let sol = OcpSolver::new(settings.clone()).solve(&problem, &start)?;
    Ok(ReferenceSolution {
        x: sol.x,
        u: sol.w,
        cost: sol.cost,
        iterations: sol.iterations,
        gradient_norm: sol.gradient_norm,
    })
}

/// Flow of the true coupled dynamics under a stacked input over the horizon.
pub fn actual_trajectory(sys: &CoupledSystem, x_k: &[f64], u: &Trajectory) -> Result<Trajectory> {
    if u.dim() != sys.input_dim() || x_k.len() != sys.state_dim() {
        return Err(Error::Dimension("stacked input or state".into()));
    }
    integrate_ode(
        |_, x, w, dx| sys.eval_stacked_into(x, w, dx),
        x_k,
        *u.grid(),
        Some(u),
    )
}

/// `||x_F - x*||` in the L-infinity norm.
pub fn suboptimality_error(actual: &Trajectory, reference: &Trajectory) -> Result<f64> {
    Ok(linf_norm(&actual.sub(reference)?))
}

/// `Delta^q = ||(z^q - z*; mu^q - mu*)||` for `q = 0, 1, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub values: Vec<f64>,
    /// `d` used to compute the reference iterate.
    pub reference_d: f64,
    pub reference_iterations: usize,
    pub reference_converged: bool,
}

/// Deeply converged ADMM iterate standing in for the saddle point.
#[derive(Clone, Debug)]
pub struct SaddleReference {
    pub z: Trajectory,
    pub mu: Trajectory,
    pub d: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs ADMM from a cold start with stopping constant `d_ref`.
pub fn saddle_reference(
    sys: &CoupledSystem,
    grid: TimeGrid,
    x_k: &[f64],
    config: &AdmmConfig,
    d_ref: f64,
) -> Result<SaddleReference> {
    let cfg = AdmmConfig {
        d: d_ref,
        mode: StoppingMode::StoppingCriterion,
        ..config.clone()
    };
    let res = Admm::cold(sys, grid, x_k, cfg)?.solve()?;
    Ok(SaddleReference {
        z: stacked(&res.agents, |a| a.coordination())?,
        mu: stacked_multipliers(&res.agents)?,
        d: d_ref,
        iterations: res.iterations,
        converged: res.converged(),
    })
}

fn stacked(agents: &[AgentState], pick: impl Fn(&AgentState) -> &Trajectory) -> Result<Trajectory> {
    let grid = *pick(&agents[0]).grid();
    let parts: Vec<&Trajectory> = agents.iter().map(pick).collect();
    Trajectory::hstack(grid, &parts)
}

fn stacked_multipliers(agents: &[AgentState]) -> Result<Trajectory> {
    let grid = *agents[0].multiplier().grid();
    let mut parts = Vec::new();
    for a in agents {
        parts.push(a.multiplier());
        if a.neighbor_multipliers().dim() > 0 {
            parts.push(a.neighbor_multipliers());
        }
    }
    Trajectory::hstack(grid, &parts)
}

/// Iterates `admm` for `iterations` steps and records the distance of each
/// iterate, including the initial one, to `reference`.
pub fn residual_series(
    mut admm: Admm<'_>,
    iterations: usize,
    reference: &SaddleReference,
) -> Result<ResidualSeries> {
    let distance = |agents: &[AgentState]| -> Result<f64> {
        let dz = stacked(agents, |a| a.coordination())?.sub(&reference.z)?;
        let dmu = stacked_multipliers(agents)?.sub(&reference.mu)?;
        linf_norm_stacked(&[&dz, &dmu])
    };
    let mut values = vec![distance(admm.agents())?];
    for _ in 0..iterations {
        admm.iterate()?;
        values.push(distance(admm.agents())?);
    }
    Ok(ResidualSeries {
        values,
        reference_d: reference.d,
        reference_iterations: reference.iterations,
        reference_converged: reference.converged,
    })
}

/// Geometric majorant `Delta^q <= c0 * c^q * Delta^0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub c0: f64,
    pub c: f64,
    /// Mean log-gap between envelope and samples.
    pub residual: f64,
    pub valid: bool,
}

impl EnvelopeFit {
    pub fn bound(&self, q: usize, delta0: f64) -> f64 {
        self.c0 * self.c.powi(q as i32) * delta0
    }
}

/// Tightest geometric envelope with `c0 >= 1` and `c < 1`.
///
/// In log space the envelope is a line `a + b q` that must lie above every
/// point `(q, ln(Delta^q / Delta^0))` with `a >= 0`. Among such lines the
/// one with the smallest summed gap is chosen; it passes through two samples
/// or through the origin and one sample, so those candidates are enumerated.
/// `c0` is finally nudged up so the domination also holds in floating point.
/// Zero samples are dominated by any envelope and do not constrain it; an
/// all-zero tail yields `c = 0`.
pub fn fit_envelope(series: &[f64]) -> Result<EnvelopeFit> {
    if series.len() < 3 {
        return Err(Error::Parse("envelope fit needs at least 3 samples".into()));
    }
    if series.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Parse(
            "residuals must be finite and non-negative".into(),
        ));
    }
    let d0 = series[0];
    if d0 == 0.0 {
        let valid = series.iter().all(|v| *v == 0.0);
        return Ok(EnvelopeFit {
            c0: 1.0,
            c: 0.0,
            residual: 0.0,
            valid,
        });
    }
    let points: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, v)| **v > 0.0)
        .map(|(q, v)| (q as f64, (v / d0).ln()))
        .collect();
    if points.is_empty() {
        return Ok(EnvelopeFit {
            c0: 1.0,
            c: 0.0,
            residual: 0.0,
            valid: true,
        });
    }

    let dominates = |a: f64, b: f64| points.iter().all(|&(q, y)| a + b * q >= y - 1e-12);
    let gap = |a: f64, b: f64| points.iter().map(|&(q, y)| a + b * q - y).sum::<f64>();
    let mut best: Option<(f64, f64, f64)> = None;
    let mut consider = |a: f64, b: f64| {
        if a >= 0.0 && b < 0.0 && dominates(a, b) {
            let g = gap(a, b);
            if best.is_none_or(|(_, _, bg)| g < bg) {
                best = Some((a, b, g));
            }
        }
    };
    for (k, &(q1, y1)) in points.iter().enumerate() {
        consider(0.0, y1 / q1);
        for &(q2, y2) in &points[k + 1..] {
            let b = (y2 - y1) / (q2 - q1);
            consider(y1 - b * q1, b);
        }
    }
    let Some((a, b, g)) = best else {
        // Residuals that never fall below their start admit no c < 1.
        return Ok(EnvelopeFit {
            c0: 1.0,
            c: 1.0,
            residual: f64::INFINITY,
            valid: false,
        });
    };
    let c = b.exp();
    let mut c0 = a.exp().max(1.0);
    for (q, v) in series.iter().enumerate() {
        while *v > c0 * c.powi(q as i32) * d0 {
            c0 *= 1.0 + 4.0 * f64::EPSILON;
        }
    }
    Ok(EnvelopeFit {
        c0,
        c,
        residual: g / points.len() as f64,
        valid: c < 1.0,
    })
}

/// Bounds `m |x|^2 <= J*(x) <= M |x|^2` over samples `(|x|, J*)`, if a
/// positive `m` exists.
pub fn quadratic_sandwich(samples: &[(f64, f64)]) -> Option<(f64, f64)> {
    let ratios: Vec<f64> = samples
        .iter()
        .filter(|(n, _)| *n > 0.0)
        .map(|(n, j)| j / (n * n))
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    (lo > 0.0).then_some((lo, hi))
}

/// `max_{k >= 1} J*(x_{k+1}) / J*(x_k)`, ignoring steps with `J*(x_k) = 0`.
pub fn cost_decay_factor(costs: &[f64]) -> Option<f64> {
    costs
        .windows(2)
        .skip(1)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
}
