//! First-order solver for fixed-horizon optimal control problems with box
//! constraints on (part of) the decision trajectory.
//!
//! The problem is discretised on the [`TimeGrid`] of the decision: states
//! follow the Heun scheme of [`integrate_ode`], the running cost is
//! integrated with the trapezoidal rule. The gradient is the exact
//! derivative of this discrete cost, obtained from a backward adjoint sweep
//! through the Heun steps. Dividing it by the quadrature weights gives the
//! nodewise Hamiltonian gradient `dH/dw` used for the projected step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{quad_form, quad_form_grad};
use crate::trajectory::{euclid, integrate_ode, TimeGrid, Trajectory};

/// A discretised optimal control problem
/// `min_w Phi(x(T)) + int l(x, w, t) dt` s.t. `x' = f(x, w)`, `lo <= w <= hi`.
pub trait OcpProblem {
    fn grid(&self) -> TimeGrid;
    fn state_dim(&self) -> usize;
    fn decision_dim(&self) -> usize;
    fn initial_state(&self) -> &[f64];

    /// Componentwise lower bounds of `w` (`-inf` for free components).
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];

    fn dynamics(&self, x: &[f64], w: &[f64], out: &mut [f64]);

    /// Vector-Jacobian products `gx += (df/dx)' lam`, `gw += (df/dw)' lam`.
    fn dynamics_vjp(&self, x: &[f64], w: &[f64], lam: &[f64], gx: &mut [f64], gw: &mut [f64]);

    /// Running cost at grid node `node`.
    fn running_cost(&self, node: usize, x: &[f64], w: &[f64]) -> f64;

    /// `gx += scale * dl/dx`, `gw += scale * dl/dw` at grid node `node`.
    fn running_cost_grad(
        &self,
        node: usize,
        x: &[f64],
        w: &[f64],
        scale: f64,
        gx: &mut [f64],
        gw: &mut [f64],
    );

    fn terminal_cost(&self, x: &[f64]) -> f64;

    /// `g += dPhi/dx`.
    fn terminal_grad(&self, x: &[f64], g: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Gradient iterations per call.
    pub max_iterations: usize,
    /// Stop once the relative cost decrease of an accepted step falls below this.
    pub rel_tol: f64,
    /// Step size used by a fresh solver instance.
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Start each line search from the Barzilai-Borwein step instead of
    /// twice the remembered one.
    pub barzilai_borwein: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 10,
            rel_tol: 1e-6,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            armijo_c: 1e-4,
            barzilai_borwein: false,
        }
    }
}

impl SolverSettings {
    /// Settings for reference solves run to high accuracy.
    pub fn accurate() -> Self {
        SolverSettings {
            max_iterations: 2000,
            rel_tol: 1e-12,
            barzilai_borwein: true,
            ..SolverSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.rel_tol > 0.0
            && self.initial_step > 0.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.max_backtracks > 0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub w: Trajectory,
    pub x: Trajectory,
    pub cost: f64,
    /// L-infinity norm of the projected gradient `P(w - dH/dw) - w` at exit.
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Cost after every accepted iterate, starting with the initial guess.
    pub cost_history: Vec<f64>,
    /// The last line search exhausted its backtracks.
    pub line_search_failed: bool,
}

/// Projected-gradient solver. Keeps the last accepted step size between
/// calls, so one instance per agent gives a warm-started line search.
#[derive(Clone, Debug)]
pub struct OcpSolver {
    settings: SolverSettings,
    step: f64,
}

impl OcpSolver {
    pub fn new(settings: SolverSettings) -> Self {
        let step = settings.initial_step;
        OcpSolver { settings, step }
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn set_settings(&mut self, settings: SolverSettings) {
        self.settings = settings;
    }

    /// Current remembered step size.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn solve<P: OcpProblem + ?Sized>(
        &mut self,
        problem: &P,
        w_init: &Trajectory,
    ) -> Result<OcpSolution> {
        check_decision(problem, w_init)?;
        let grid = problem.grid();
        let s = &self.settings;
        let mut w = w_init.clone();
        project(problem, &mut w);

        let mut eval = evaluate_with_gradient(problem, &w)?;
        let mut history = vec![eval.cost];
        let mut iterations = 0;
        let mut failed = false;
        let mut trial = w.clone();
        let mut bb_alpha: Option<f64> = None;

        while iterations < s.max_iterations {
            let mut alpha = match bb_alpha {
                Some(a) if s.barzilai_borwein => a,
                _ => self.step * 2.0,
            };
            let mut accepted = None;
            let mut moved = false;
            for _ in 0..=s.max_backtracks {
                let slope = projected_trial(problem, &w, &eval.grad, alpha, &mut trial);
                if slope == 0.0 {
                    break;
                }
                moved = true;
                // A blow-up along the search direction is treated as an
                // infinite cost and backtracked from.
                if let Ok(x_trial) = forward(problem, &trial) {
                    let cost = cost_of(problem, &trial, &x_trial);
                    if cost.is_finite() && cost <= eval.cost + s.armijo_c * slope {
                        accepted = Some(cost);
                        break;
                    }
                }
                alpha *= s.backtrack_factor;
            }
            let Some(new_cost) = accepted else {
                failed = moved;
                break;
            };
            self.step = alpha;
            iterations += 1;
            let old_cost = eval.cost;
            std::mem::swap(&mut w, &mut trial);
            let old_grad = std::mem::replace(&mut eval, evaluate_with_gradient(problem, &w)?).grad;
            bb_alpha = bb_step(&grid, &trial, &w, &old_grad, &eval.grad);
            debug_assert_eq!(eval.cost.to_bits(), new_cost.to_bits());
            history.push(eval.cost);
            let decrease = old_cost - eval.cost;
            if decrease <= s.rel_tol * old_cost.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }

        let gradient_norm = projected_gradient_norm(problem, &w, &eval.grad, &grid);
        Ok(OcpSolution {
            w,
            x: eval.x,
            cost: eval.cost,
            gradient_norm,
            iterations,
            cost_history: history,
            line_search_failed: failed,
        })
    }
}

/// `<s, s> / <s, y>` in the quadrature inner product, where the gradient
/// already carries the weights.
fn bb_step(
    grid: &TimeGrid,
    w_old: &Trajectory,
    w: &Trajectory,
    g_old: &Trajectory,
    g: &Trajectory,
) -> Option<f64> {
    let (mut ss, mut sy) = (0.0, 0.0);
    for r in 0..w.nodes() {
        let wt = grid.weight(r);
        for c in 0..w.dim() {
            let sv = w.row(r)[c] - w_old.row(r)[c];
            ss += wt * sv * sv;
            sy += sv * (g.row(r)[c] - g_old.row(r)[c]);
        }
    }
    let a = ss / sy;
    (sy > 0.0 && a.is_finite() && a > 0.0).then_some(a)
}

fn check_decision<P: OcpProblem + ?Sized>(problem: &P, w: &Trajectory) -> Result<()> {
    if *w.grid() != problem.grid() {
        return Err(Error::GridMismatch);
    }
    if w.dim() != problem.decision_dim() {
        return Err(Error::Dimension(format!(
            "decision has dim {}, problem expects {}",
            w.dim(),
            problem.decision_dim()
        )));
    }
    Ok(())
}

/// Clips every node of `w` into the box.
pub fn project<P: OcpProblem + ?Sized>(problem: &P, w: &mut Trajectory) {
    let (lo, hi) = (problem.lower(), problem.upper());
    for r in 0..w.nodes() {
        for (c, v) in w.row_mut(r).iter_mut().enumerate() {
            *v = v.clamp(lo[c], hi[c]);
        }
    }
}

/// Writes `P(w - alpha * g / weight)` into `trial` and returns the
/// directional derivative `sum_r dJ/dw_r . (trial_r - w_r)`.
fn projected_trial<P: OcpProblem + ?Sized>(
    problem: &P,
    w: &Trajectory,
    grad: &Trajectory,
    alpha: f64,
    trial: &mut Trajectory,
) -> f64 {
    let grid = problem.grid();
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut slope = 0.0;
    for r in 0..w.nodes() {
        let inv_weight = 1.0 / grid.weight(r);
        let (wr, gr) = (w.row(r), grad.row(r));
        let tr = trial.row_mut(r);
        for c in 0..wr.len() {
            let v = (wr[c] - alpha * gr[c] * inv_weight).clamp(lo[c], hi[c]);
            tr[c] = v;
            slope += gr[c] * (v - wr[c]);
        }
    }
    slope
}

fn projected_gradient_norm<P: OcpProblem + ?Sized>(
    problem: &P,
    w: &Trajectory,
    grad: &Trajectory,
    grid: &TimeGrid,
) -> f64 {
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut best = 0.0f64;
    let mut row = vec![0.0; w.dim()];
    for r in 0..w.nodes() {
        let inv_weight = 1.0 / grid.weight(r);
        for c in 0..w.dim() {
            let wc = w.row(r)[c];
            row[c] = (wc - grad.row(r)[c] * inv_weight).clamp(lo[c], hi[c]) - wc;
        }
        best = best.max(euclid(&row));
    }
    best
}

fn forward<P: OcpProblem + ?Sized>(problem: &P, w: &Trajectory) -> Result<Trajectory> {
    integrate_ode(
        |_, x, wr, dx| problem.dynamics(x, wr, dx),
        problem.initial_state(),
        problem.grid(),
        Some(w),
    )
}

fn cost_of<P: OcpProblem + ?Sized>(problem: &P, w: &Trajectory, x: &Trajectory) -> f64 {
    let grid = problem.grid();
    let mut total = 0.0;
    for r in 0..grid.nodes() {
        total += grid.weight(r) * problem.running_cost(r, x.row(r), w.row(r));
    }
    total + problem.terminal_cost(x.last())
}

/// Cost `quadrature(l) + Phi` of decision `w`.
pub fn eval_cost<P: OcpProblem + ?Sized>(problem: &P, w: &Trajectory) -> Result<f64> {
    check_decision(problem, w)?;
    let x = forward(problem, w)?;
    Ok(cost_of(problem, w, &x))
}

/// Cost, state and exact discrete gradient `dJ/dw_r` at every node.
#[derive(Clone, Debug)]
pub struct CostGradient {
    pub cost: f64,
    pub x: Trajectory,
    pub grad: Trajectory,
}

pub fn evaluate_with_gradient<P: OcpProblem + ?Sized>(
    problem: &P,
    w: &Trajectory,
) -> Result<CostGradient> {
    check_decision(problem, w)?;
    let grid = problem.grid();
    let h = grid.step();
    let n = problem.state_dim();
    let nw = problem.decision_dim();
    let x = forward(problem, w)?;
    let cost = cost_of(problem, w, &x);

    let mut grad = Trajectory::zeros(grid, nw);
    let last = grid.nodes() - 1;
    let mut lam = vec![0.0; n];
    problem.terminal_grad(x.last(), &mut lam);
    problem.running_cost_grad(
        last,
        x.row(last),
        w.row(last),
        grid.weight(last),
        &mut lam,
        grad.row_mut(last),
    );

    let mut k1 = vec![0.0; n];
    let mut pred = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut bar_k1 = vec![0.0; n];
    let mut gx_pred = vec![0.0; n];
    let mut gx1 = vec![0.0; n];
    let mut gw = vec![0.0; nw];
    for r in (0..last).rev() {
        let xr = x.row(r);
        problem.dynamics(xr, w.row(r), &mut k1);
        for c in 0..n {
            pred[c] = xr[c] + h * k1[c];
            a[c] = 0.5 * h * lam[c];
        }
        gx_pred.fill(0.0);
        gw.fill(0.0);
        problem.dynamics_vjp(&pred, w.row(r + 1), &a, &mut gx_pred, &mut gw);
        for (g, v) in grad.row_mut(r + 1).iter_mut().zip(&gw) {
            *g += v;
        }
        for c in 0..n {
            bar_k1[c] = a[c] + h * gx_pred[c];
        }
        gx1.fill(0.0);
        gw.fill(0.0);
        problem.dynamics_vjp(xr, w.row(r), &bar_k1, &mut gx1, &mut gw);
        for c in 0..n {
            lam[c] += gx_pred[c] + gx1[c];
        }
        let gr = grad.row_mut(r);
        for (g, v) in gr.iter_mut().zip(&gw) {
            *g += v;
        }
        problem.running_cost_grad(r, xr, w.row(r), grid.weight(r), &mut lam, gr);
    }
    Ok(CostGradient { cost, x, grad })
}

/// Relative discrepancy between the adjoint directional derivative and a
/// central finite difference of [`eval_cost`] with step `1e-6`.
pub fn check_gradient<P: OcpProblem + ?Sized>(
    problem: &P,
    w: &Trajectory,
    direction: &Trajectory,
) -> Result<f64> {
    check_decision(problem, direction)?;
    let norm = direction.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Dimension(
            "gradient check needs a nonzero direction".into(),
        ));
    }
    let eval = evaluate_with_gradient(problem, w)?;
    let analytic: f64 = eval
        .grad
        .values()
        .iter()
        .zip(direction.values())
        .map(|(g, d)| g * d)
        .sum();
    let h = 1e-6;
    let mut plus = w.clone();
    plus.axpy(h, direction)?;
    let mut minus = w.clone();
    minus.axpy(-h, direction)?;
    let fd = (eval_cost(problem, &plus)? - eval_cost(problem, &minus)?) / (2.0 * h);
    Ok((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(f64::MIN_POSITIVE))
}

/// `x' = A x + B w` with cost `x'Qx + w'Rw` and terminal cost `x'Px`.
#[derive(Clone, Debug)]
pub struct LinearQuadratic {
    pub grid: TimeGrid,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x0: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearQuadratic {
    pub fn unconstrained(
        grid: TimeGrid,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        p: DMatrix<f64>,
        x0: Vec<f64>,
    ) -> Self {
        let m = b.ncols();
        LinearQuadratic {
            grid,
            a,
            b,
            q,
            r,
            p,
            x0,
            lower: vec![f64::NEG_INFINITY; m],
            upper: vec![f64::INFINITY; m],
        }
    }

    pub fn with_box(mut self, lo: f64, hi: f64) -> Self {
        self.lower.fill(lo);
        self.upper.fill(hi);
        self
    }
}

impl OcpProblem for LinearQuadratic {
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn decision_dim(&self) -> usize {
        self.b.ncols()
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
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|c| self.a[(r, c)] * x[c]).sum::<f64>()
                + (0..w.len()).map(|c| self.b[(r, c)] * w[c]).sum::<f64>();
        }
    }
    fn dynamics_vjp(&self, _x: &[f64], _w: &[f64], lam: &[f64], gx: &mut [f64], gw: &mut [f64]) {
        for (r, l) in lam.iter().enumerate() {
            for (c, g) in gx.iter_mut().enumerate() {
                *g += self.a[(r, c)] * l;
            }
            for (c, g) in gw.iter_mut().enumerate() {
                *g += self.b[(r, c)] * l;
            }
        }
    }
    fn running_cost(&self, _node: usize, x: &[f64], w: &[f64]) -> f64 {
        quad_form(&self.q, x) + quad_form(&self.r, w)
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
        quad_form_grad(&self.q, x, scale, gx);
        quad_form_grad(&self.r, w, scale, gw);
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        quad_form(&self.p, x)
    }
    fn terminal_grad(&self, x: &[f64], g: &mut [f64]) {
        quad_form_grad(&self.p, x, 1.0, g);
    }
}
