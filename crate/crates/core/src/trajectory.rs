//! Uniformly gridded trajectories on a finite horizon.
//!
//! Every time-dependent quantity of the scheme (states, controls, local
//! copies, coordination variables, multipliers) is stored as a
//! [`Trajectory`]: one row of values per node of a [`TimeGrid`]. The grid
//! doubles as the integration grid of the fixed-step Heun scheme in
//! [`integrate_ode`] and as the quadrature grid of [`quadrature`].

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_r = r * T / (N_g - 1)` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    nodes: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, nodes: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if nodes < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes, got {nodes}"
            )));
        }
        Ok(TimeGrid { horizon, nodes })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.horizon / (self.nodes - 1) as f64
    }

    /// Time of node `r`. The last node is exactly `T`.
    #[inline]
    pub fn time(&self, r: usize) -> f64 {
        if r + 1 == self.nodes {
            self.horizon
        } else {
            r as f64 * self.step()
        }
    }

    /// Trapezoidal quadrature weight of node `r`.
    #[inline]
    pub fn weight(&self, r: usize) -> f64 {
        if r == 0 || r + 1 == self.nodes {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    /// Number of grid steps covering `duration`, if `duration` is an exact
    /// multiple of the step (relative tolerance 1e-9).
    pub fn steps_in(&self, duration: f64) -> Option<usize> {
        let ratio = duration / self.step();
        let rounded = ratio.round();
        if rounded >= 0.0 && (ratio - rounded).abs() <= 1e-9 * rounded.max(1.0) {
            Some(rounded as usize)
        } else {
            None
        }
    }
}

/// Vector-valued function of time sampled on a [`TimeGrid`], stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Trajectory {
            grid,
            dim,
            values: vec![0.0; grid.nodes() * dim],
        }
    }

    /// Trajectory holding `row` at every node.
    pub fn constant(grid: TimeGrid, row: &[f64]) -> Self {
        let mut values = Vec::with_capacity(grid.nodes() * row.len());
        for _ in 0..grid.nodes() {
            values.extend_from_slice(row);
        }
        Trajectory {
            grid,
            dim: row.len(),
            values,
        }
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut traj = Trajectory::zeros(grid, dim);
        for r in 0..grid.nodes() {
            let t = grid.time(r);
            f(t, traj.row_mut(r));
        }
        traj
    }

    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() * dim {
            return Err(Error::Dimension(format!(
                "expected {} values ({} nodes x {dim}), got {}",
                grid.nodes() * dim,
                grid.nodes(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                node: pos.checked_div(dim).unwrap_or(0),
            });
        }
        Ok(Trajectory { grid, dim, values })
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.grid.nodes()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn first(&self) -> &[f64] {
        self.row(0)
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.nodes() - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Columns `start..start + len` of every row, as a new trajectory.
    pub fn columns(&self, start: usize, len: usize) -> Trajectory {
        let mut out = Trajectory::zeros(self.grid, len);
        for r in 0..self.nodes() {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.dim()`.
    pub fn set_columns(&mut self, start: usize, block: &Trajectory) {
        let len = block.dim();
        for r in 0..self.nodes() {
            self.row_mut(r)[start..start + len].copy_from_slice(block.row(r));
        }
    }

    /// Horizontal concatenation of trajectories on a shared grid.
    pub fn hstack(grid: TimeGrid, parts: &[&Trajectory]) -> Result<Trajectory> {
        if parts.iter().any(|p| p.grid != grid) {
            return Err(Error::GridMismatch);
        }
        let dim = parts.iter().map(|p| p.dim).sum();
        let mut out = Trajectory::zeros(grid, dim);
        let mut col = 0;
        for p in parts {
            out.set_columns(col, p);
            col += p.dim;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_compatible(&self, other: &Trajectory) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        if self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "trajectory dims {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Trajectory) -> Result<Trajectory> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Trajectory {
            grid: self.grid,
            dim: self.dim,
            values,
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Trajectory) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Writes the trajectory as CSV with header `t,c0,c1,...`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..self.dim).map(|c| format!("c{c}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for r in 0..self.nodes() {
            line.clear();
            write!(line, "{:.16e}", self.grid.time(r)).unwrap();
            for v in self.row(r) {
                write!(line, ",{v:.16e}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads a trajectory written by [`Trajectory::write_csv`]; the grid is
    /// recovered from the time column.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Trajectory> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory CSV".into()))??;
        let dim = header.split(',').count().saturating_sub(1);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let t = parse_f64(fields.next())?;
            times.push(t);
            let before = values.len();
            for f in fields {
                values.push(parse_f64(Some(f))?);
            }
            if values.len() - before != dim {
                return Err(Error::Parse(format!("row {} has wrong width", times.len())));
            }
        }
        let horizon = *times
            .last()
            .ok_or_else(|| Error::Parse("trajectory CSV has no rows".into()))?;
        let grid = TimeGrid::new(horizon, times.len())?;
        Trajectory::from_values(grid, dim, values)
    }
}

fn parse_f64(field: Option<&str>) -> Result<f64> {
    let field = field.ok_or_else(|| Error::Parse("missing CSV field".into()))?;
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a number: {field:?}")))
}

/// Integrates `x' = rhs(t, x, w)` node to node with Heun's method.
///
/// `inputs` is sampled on the same grid; within a step the input is the
/// linear interpolant of its two node values, so Heun evaluates it at the
/// nodes only. The returned trajectory starts exactly at `x0`.
pub fn integrate_ode<F>(
    mut rhs: F,
    x0: &[f64],
    grid: TimeGrid,
    inputs: Option<&Trajectory>,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &[f64], &mut [f64]),
{
    if let Some(w) = inputs {
        if *w.grid() != grid {
            return Err(Error::GridMismatch);
        }
    }
    let n = x0.len();
    let h = grid.step();
    let empty: [f64; 0] = [];
    let input_row = |r: usize| -> &[f64] { inputs.map_or(&empty[..], |w| w.row(r)) };

    let mut traj = Trajectory::zeros(grid, n);
    traj.row_mut(0).copy_from_slice(x0);
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { node: 0 });
    }
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut pred = vec![0.0; n];
    for r in 0..grid.nodes() - 1 {
        let (done, rest) = traj.values.split_at_mut((r + 1) * n);
        let x = &done[r * n..];
        let next = &mut rest[..n];
        rhs(grid.time(r), x, input_row(r), &mut k1);
        for c in 0..n {
            pred[c] = x[c] + h * k1[c];
        }
        rhs(grid.time(r + 1), &pred, input_row(r + 1), &mut k2);
        for c in 0..n {
            next[c] = x[c] + 0.5 * h * (k1[c] + k2[c]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { node: r + 1 });
        }
    }
    Ok(traj)
}

/// Trapezoidal rule of one value per grid node.
pub fn quadrature(grid: &TimeGrid, values: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), grid.nodes());
    values
        .iter()
        .enumerate()
        .map(|(r, v)| grid.weight(r) * v)
        .sum()
}

/// `sup_r ||traj(t_r)||_2`.
pub fn linf_norm(traj: &Trajectory) -> f64 {
    (0..traj.nodes())
        .map(|r| euclid(traj.row(r)))
        .fold(0.0, f64::max)
}

/// L-infinity norm of the row-wise concatenation `(a; b)`.
pub fn linf_norm_pair(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    linf_norm_stacked(&[a, b])
}

/// L-infinity norm of the row-wise concatenation of all `parts`.
pub fn linf_norm_stacked(parts: &[&Trajectory]) -> Result<f64> {
    let Some(first) = parts.first() else {
        return Ok(0.0);
    };
    let grid = first.grid;
    if parts.iter().any(|p| p.grid != grid) {
        return Err(Error::GridMismatch);
    }
    let mut best = 0.0f64;
    for r in 0..grid.nodes() {
        let sq: f64 = parts
            .iter()
            .map(|p| p.row(r).iter().map(|v| v * v).sum::<f64>())
            .sum();
        best = best.max(sq.sqrt());
    }
    Ok(best)
}

/// Shifts `traj` left by `shift` seconds, holding the final value on the
/// uncovered tail `[T - shift, T]`.
pub fn resample_shift(traj: &Trajectory, shift: f64) -> Result<Trajectory> {
    let grid = traj.grid;
    let steps = grid
        .steps_in(shift)
        .filter(|&s| s < grid.nodes() - 1)
        .ok_or_else(|| {
            Error::InvalidGrid(format!(
                "shift {shift} is not a multiple of the grid step {} below the horizon",
                grid.step()
            ))
        })?;
    let mut out = Trajectory::zeros(grid, traj.dim);
    let last = grid.nodes() - 1;
    for r in 0..grid.nodes() {
        out.row_mut(r)
            .copy_from_slice(traj.row((r + steps).min(last)));
    }
    Ok(out)
}

#[inline]
pub(crate) fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
