//! Coupled subsystems on a directed graph and their stacked dynamics.
//!
//! Subsystem `i` evolves as `x_i' = f_i(x_i, u_i, v_i)` where `v_i` stacks the
//! states of its *sending* neighbors `N<-(i)` in ascending index order. An
//! edge `(j, i)` means "`j` influences `i`", so `j` belongs to `N<-(i)` and
//! `i` to `N->(j)`. Indices are zero-based.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Right-hand side of one subsystem.
///
/// Implementations must be re-entrant: a [`CoupledSystem`] is shared across
/// concurrently running agents.
pub trait SubsystemDynamics: Send + Sync + fmt::Debug {
    fn eval(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]);

    /// Row-major Jacobians `df/dx` (n x n), `df/du` (n x m), `df/dv` (n x p).
    ///
    /// Returns `false` when no analytic form is available, in which case
    /// central differences are used.
    fn jacobians(
        &self,
        _x: &[f64],
        _u: &[f64],
        _v: &[f64],
        _jx: &mut [f64],
        _ju: &mut [f64],
        _jv: &mut [f64],
    ) -> bool {
        false
    }
}

/// Linear subsystem `x' = A x + B u + E v`.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

impl SubsystemDynamics for LinearDynamics {
    fn eval(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        for (row, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, xc) in x.iter().enumerate() {
                acc += self.a[(row, c)] * xc;
            }
            for (c, uc) in u.iter().enumerate() {
                acc += self.b[(row, c)] * uc;
            }
            for (c, vc) in v.iter().enumerate() {
                acc += self.e[(row, c)] * vc;
            }
            *o = acc;
        }
    }

    fn jacobians(
        &self,
        _x: &[f64],
        _u: &[f64],
        _v: &[f64],
        jx: &mut [f64],
        ju: &mut [f64],
        jv: &mut [f64],
    ) -> bool {
        copy_row_major(&self.a, jx);
        copy_row_major(&self.b, ju);
        copy_row_major(&self.e, jv);
        true
    }
}

fn copy_row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            out[r * cols + c] = m[(r, c)];
        }
    }
}

/// One node of the network: dynamics, quadratic costs and input box.
#[derive(Clone)]
pub struct SubsystemModel {
    pub(crate) index: usize,
    pub(crate) state_dim: usize,
    pub(crate) input_dim: usize,
    pub(crate) dynamics: Arc<dyn SubsystemDynamics>,
    /// Declared stacking order of `v_i`.
    pub(crate) sending: Vec<usize>,
    pub(crate) q: DMatrix<f64>,
    pub(crate) r: DMatrix<f64>,
    pub(crate) gamma: f64,
    pub(crate) p: DMatrix<f64>,
    pub(crate) u_lo: Vec<f64>,
    pub(crate) u_hi: Vec<f64>,
}

impl fmt::Debug for SubsystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubsystemModel")
            .field("index", &self.index)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("sending", &self.sending)
            .field("gamma", &self.gamma)
            .finish_non_exhaustive()
    }
}

impl SubsystemModel {
    /// New subsystem with identity weights, `gamma = 1`, identity terminal
    /// weight and unbounded inputs. `sending` lists `N<-(i)` in ascending order.
    pub fn new(
        index: usize,
        state_dim: usize,
        input_dim: usize,
        dynamics: Arc<dyn SubsystemDynamics>,
        sending: Vec<usize>,
    ) -> Self {
        SubsystemModel {
            index,
            state_dim,
            input_dim,
            dynamics,
            sending,
            q: DMatrix::identity(state_dim, state_dim),
            r: DMatrix::identity(input_dim, input_dim),
            gamma: 1.0,
            p: DMatrix::identity(state_dim, state_dim),
            u_lo: vec![f64::NEG_INFINITY; input_dim],
            u_hi: vec![f64::INFINITY; input_dim],
        }
    }

    /// Running cost `gamma * (x'Qx + u'Ru)`.
    pub fn with_cost(mut self, q: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Self {
        self.q = q;
        self.r = r;
        self.gamma = gamma;
        self
    }

    /// Terminal cost `x'Px`.
    pub fn with_terminal(mut self, p: DMatrix<f64>) -> Self {
        self.p = p;
        self
    }

    pub fn with_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.u_lo = lo;
        self.u_hi = hi;
        self
    }

    pub fn index(&self) -> usize {
        self.index
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn sending(&self) -> &[usize] {
        &self.sending
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn terminal(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn lower_bounds(&self) -> &[f64] {
        &self.u_lo
    }
    pub fn upper_bounds(&self) -> &[f64] {
        &self.u_hi
    }
    pub fn dynamics(&self) -> &Arc<dyn SubsystemDynamics> {
        &self.dynamics
    }

    pub fn eval(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        self.dynamics.eval(x, u, v, out)
    }

    /// Jacobians with a central-difference fallback (step `1e-6 (1 + |arg|)`).
    pub fn jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        v: &[f64],
        jx: &mut [f64],
        ju: &mut [f64],
        jv: &mut [f64],
    ) {
        if self.dynamics.jacobians(x, u, v, jx, ju, jv) {
            return;
        }
        let n = self.state_dim;
        let mut args = [x.to_vec(), u.to_vec(), v.to_vec()];
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for (slot, jac) in [jx, ju, jv].into_iter().enumerate() {
            let width = args[slot].len();
            let h = 1e-6 * (1.0 + crate::trajectory::euclid(&args[slot]));
            for c in 0..width {
                let orig = args[slot][c];
                args[slot][c] = orig + h;
                self.dynamics.eval(&args[0], &args[1], &args[2], &mut plus);
                args[slot][c] = orig - h;
                self.dynamics.eval(&args[0], &args[1], &args[2], &mut minus);
                args[slot][c] = orig;
                for row in 0..n {
                    jac[row * width + c] = (plus[row] - minus[row]) / (2.0 * h);
                }
            }
        }
    }

    /// `gamma * (x'Qx + u'Ru)`.
    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.gamma * (quad_form(&self.q, x) + quad_form(&self.r, u))
    }

    /// `x'Px`.
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        quad_form(&self.p, x)
    }

    /// Projects `u` onto the input box.
    pub fn clip(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.u_lo).zip(&self.u_hi) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..x.len() {
        for c in 0..x.len() {
            acc += x[r] * m[(r, c)] * x[c];
        }
    }
    acc
}

/// `out = (M + M') x`, the gradient of `x'Mx`.
pub(crate) fn quad_form_grad(m: &DMatrix<f64>, x: &[f64], scale: f64, out: &mut [f64]) {
    for r in 0..x.len() {
        let mut acc = 0.0;
        for c in 0..x.len() {
            acc += (m[(r, c)] + m[(c, r)]) * x[c];
        }
        out[r] += scale * acc;
    }
}

/// Directed coupling graph with derived neighbor sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CouplingGraph {
    nodes: usize,
    edges: Vec<(usize, usize)>,
    sending: Vec<Vec<usize>>,
    receiving: Vec<Vec<usize>>,
}

impl CouplingGraph {
    /// Builds the graph from edges `(j, i)` meaning "`j` influences `i`".
    /// Duplicate edges collapse; self-loops are rejected.
    pub fn new(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sorted = Vec::with_capacity(edges.len());
        for &(from, to) in edges {
            if from >= nodes || to >= nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({from}, {to}) references a node outside 0..{nodes}"
                )));
            }
            if from == to {
                return Err(Error::InvalidGraph(format!("self-loop at node {from}")));
            }
            sorted.push((from, to));
        }
        sorted.sort_unstable();
        sorted.dedup();
        let mut sending = vec![Vec::new(); nodes];
        let mut receiving = vec![Vec::new(); nodes];
        for &(from, to) in &sorted {
            sending[to].push(from);
            receiving[from].push(to);
        }
        for list in sending.iter_mut().chain(receiving.iter_mut()) {
            list.sort_unstable();
        }
        Ok(CouplingGraph {
            nodes,
            edges: sorted,
            sending,
            receiving,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `N<-(i)`: nodes whose states enter `f_i`.
    pub fn sending(&self, i: usize) -> &[usize] {
        &self.sending[i]
    }

    /// `N->(i)`: nodes whose dynamics contain `x_i`.
    pub fn receiving(&self, i: usize) -> &[usize] {
        &self.receiving[i]
    }
}

/// The full network with stacked state `x = [x_i]` and input `u = [u_i]`.
#[derive(Clone, Debug)]
pub struct CoupledSystem {
    graph: CouplingGraph,
    subsystems: Vec<SubsystemModel>,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
}

const EQUILIBRIUM_TOL: f64 = 1e-10;

/// Validates the subsystems against the edge list and freezes the stacking.
pub fn build_system(
    subsystems: Vec<SubsystemModel>,
    edges: &[(usize, usize)],
) -> Result<CoupledSystem> {
    let graph = CouplingGraph::new(subsystems.len(), edges)?;
    let mut state_offsets = vec![0];
    let mut input_offsets = vec![0];
    for (pos, sub) in subsystems.iter().enumerate() {
        if sub.index != pos {
            return Err(Error::InvalidModel(format!(
                "subsystem at position {pos} declares index {}",
                sub.index
            )));
        }
        state_offsets.push(state_offsets[pos] + sub.state_dim);
        input_offsets.push(input_offsets[pos] + sub.input_dim);
    }
    for sub in &subsystems {
        let i = sub.index;
        if sub.sending != graph.sending(i) {
            return Err(Error::Dimension(format!(
                "subsystem {i} declares copy order {:?} but N<-({i}) = {:?}",
                sub.sending,
                graph.sending(i)
            )));
        }
        validate_subsystem(sub, &subsystems)?;
    }
    Ok(CoupledSystem {
        graph,
        subsystems,
        state_offsets,
        input_offsets,
    })
}

fn validate_subsystem(sub: &SubsystemModel, all: &[SubsystemModel]) -> Result<()> {
    let i = sub.index;
    let (n, m) = (sub.state_dim, sub.input_dim);
    let bad = |what: String| Err(Error::InvalidModel(format!("subsystem {i}: {what}")));
    if sub.q.shape() != (n, n) || sub.p.shape() != (n, n) || sub.r.shape() != (m, m) {
        return bad("weight matrix shape does not match dimensions".into());
    }
    if sub.u_lo.len() != m || sub.u_hi.len() != m {
        return bad("input bounds have the wrong length".into());
    }
    for (lo, hi) in sub.u_lo.iter().zip(&sub.u_hi) {
        if !(lo < hi) || *lo > 0.0 || *hi < 0.0 {
            return bad(format!(
                "input box [{lo}, {hi}] must be non-empty and contain 0"
            ));
        }
    }
    if !(sub.gamma.is_finite() && sub.gamma > 0.0) {
        return bad(format!("gamma must be positive, got {}", sub.gamma));
    }
    check_symmetric_definite(&sub.q, false).or_else(|e| bad(format!("Q {e}")))?;
    check_symmetric_definite(&sub.r, true).or_else(|e| bad(format!("R {e}")))?;
    check_symmetric_definite(&sub.p, true).or_else(|e| bad(format!("P {e}")))?;

    let p: usize = sub.sending.iter().map(|&j| all[j].state_dim).sum();
    let mut out = vec![0.0; n];
    sub.eval(&vec![0.0; n], &vec![0.0; m], &vec![0.0; p], &mut out);
    let residual = crate::trajectory::euclid(&out);
    if !(residual <= EQUILIBRIUM_TOL) {
        return bad(format!("f(0,0,0) = {out:?} is not an equilibrium"));
    }
    Ok(())
}

/// Symmetry and definiteness test; `strict` asks for positive definiteness.
pub(crate) fn check_symmetric_definite(
    m: &DMatrix<f64>,
    strict: bool,
) -> std::result::Result<(), String> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err("is not symmetric".into());
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    let ok = if strict {
        min_eig > 0.0
    } else {
        min_eig >= -1e-12 * scale
    };
    if ok {
        Ok(())
    } else {
        Err(format!("has minimum eigenvalue {min_eig}"))
    }
}

impl CoupledSystem {
    pub fn graph(&self) -> &CouplingGraph {
        &self.graph
    }

    pub fn subsystems(&self) -> &[SubsystemModel] {
        &self.subsystems
    }

    pub fn subsystem(&self, i: usize) -> &SubsystemModel {
        &self.subsystems[i]
    }

    pub fn agents(&self) -> usize {
        self.subsystems.len()
    }

    pub fn state_dim(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        *self.input_offsets.last().unwrap()
    }

    pub fn state_range(&self, i: usize) -> Range<usize> {
        self.state_offsets[i]..self.state_offsets[i + 1]
    }

    pub fn input_range(&self, i: usize) -> Range<usize> {
        self.input_offsets[i]..self.input_offsets[i + 1]
    }

    /// Length `p_i` of the copy vector `v_i`.
    pub fn copy_dim(&self, i: usize) -> usize {
        self.graph
            .sending(i)
            .iter()
            .map(|&j| self.subsystems[j].state_dim)
            .sum()
    }

    /// Total copy dimension `p`.
    pub fn total_copy_dim(&self) -> usize {
        (0..self.agents()).map(|i| self.copy_dim(i)).sum()
    }

    /// Offset of neighbor `j`'s block inside `v_i`.
    pub fn copy_offset(&self, i: usize, j: usize) -> Option<usize> {
        let mut offset = 0;
        for &s in self.graph.sending(i) {
            if s == j {
                return Some(offset);
            }
            offset += self.subsystems[s].state_dim;
        }
        None
    }

    /// Gathers `v_i = [x_j]_{j in N<-(i)}` from the stacked state.
    pub fn gather_copy(&self, i: usize, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for &j in self.graph.sending(i) {
            out.extend_from_slice(&x[self.state_range(j)]);
        }
    }

    /// Splits a stacked vector into per-subsystem blocks using `ranges`.
    pub fn scatter<'a>(&self, stacked: &'a [f64], state: bool) -> Vec<&'a [f64]> {
        (0..self.agents())
            .map(|i| {
                let range = if state {
                    self.state_range(i)
                } else {
                    self.input_range(i)
                };
                &stacked[range]
            })
            .collect()
    }

    /// Concatenates per-subsystem blocks.
    pub fn gather(&self, blocks: &[&[f64]]) -> Vec<f64> {
        blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    /// `F(x, u) = [f_i(x_i, u_i, [x_j]_{j in N<-(i)})]_i`.
    pub fn eval_stacked_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "stacked vectors have lengths ({}, {}), expected ({}, {})",
                x.len(),
                u.len(),
                self.state_dim(),
                self.input_dim()
            )));
        }
        let mut out = vec![0.0; self.state_dim()];
        self.eval_stacked_into(x, u, &mut out);
        if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "dynamics evaluated to a non-finite value in component {bad}"
            )));
        }
        Ok(out)
    }

    pub(crate) fn eval_stacked_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let mut v = Vec::new();
        for (i, sub) in self.subsystems.iter().enumerate() {
            self.gather_copy(i, x, &mut v);
            sub.eval(
                &x[self.state_range(i)],
                &u[self.input_range(i)],
                &v,
                &mut out[self.state_range(i)],
            );
        }
    }

    /// Accumulates `gx += (dF/dx)' lam` and `gu += (dF/du)' lam` block by block.
    pub(crate) fn stacked_vjp(
        &self,
        x: &[f64],
        u: &[f64],
        lam: &[f64],
        gx: &mut [f64],
        gu: &mut [f64],
    ) {
        let mut v = Vec::new();
        let (mut lx, mut lu, mut lv) = (Vec::new(), Vec::new(), Vec::new());
        for (i, sub) in self.subsystems.iter().enumerate() {
            let sr = self.state_range(i);
            let li = &lam[sr.clone()];
            if li.iter().all(|l| *l == 0.0) {
                continue;
            }
            self.gather_copy(i, x, &mut v);
            let ir = self.input_range(i);
            let (ni, mi, pi) = (sub.state_dim, sub.input_dim, v.len());
            lx.resize(ni * ni, 0.0);
            lu.resize(ni * mi, 0.0);
            lv.resize(ni * pi, 0.0);
            sub.jacobians(
                &x[sr.clone()],
                &u[ir.clone()],
                &v,
                &mut lx,
                &mut lu,
                &mut lv,
            );
            for (row, l) in li.iter().enumerate() {
                for c in 0..ni {
                    gx[sr.start + c] += lx[row * ni + c] * l;
                }
                for c in 0..mi {
                    gu[ir.start + c] += lu[row * mi + c] * l;
                }
                let mut col = 0;
                for &j in self.graph.sending(i) {
                    let jr = self.state_range(j);
                    for c in 0..jr.len() {
                        gx[jr.start + c] += lv[row * pi + col + c] * l;
                    }
                    col += jr.len();
                }
            }
        }
    }

    /// Stacked running cost `l(x, u) = sum_i l_i(x_i, u_i)`.
    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| s.running_cost(&x[self.state_range(i)], &u[self.input_range(i)]))
            .sum()
    }

    /// Stacked terminal cost `V(x) = sum_i V_i(x_i)`.
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| s.terminal_cost(&x[self.state_range(i)]))
            .sum()
    }

    /// Replaces the terminal weights, e.g. after a Lyapunov design.
    pub fn with_terminal_weights(mut self, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.len() != self.agents() {
            return Err(Error::Dimension(
                "one terminal weight per subsystem expected".into(),
            ));
        }
        for (sub, p) in self.subsystems.iter_mut().zip(weights) {
            if p.shape() != (sub.state_dim, sub.state_dim) {
                return Err(Error::Dimension(format!(
                    "terminal weight of subsystem {}",
                    sub.index
                )));
            }
            check_symmetric_definite(&p, true)
                .map_err(|e| Error::InvalidModel(format!("subsystem {}: P {e}", sub.index)))?;
            sub.p = p;
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug)]
    struct Sum;
    impl SubsystemDynamics for Sum {
        fn eval(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
            out[0] = -x[0] + u[0] + v.iter().sum::<f64>();
        }
    }

    fn scalar_sub(i: usize, sending: Vec<usize>) -> SubsystemModel {
        SubsystemModel::new(i, 1, 1, Arc::new(Sum), sending)
    }

    #[test]
    fn three_node_example_neighbor_sets() {
        // 1-based edges {(1,2),(1,3),(2,1),(3,2)} shifted to zero-based.
        let g = CouplingGraph::new(3, &[(0, 1), (0, 2), (1, 0), (2, 1)]).unwrap();
        assert_eq!(g.sending(0), &[1]);
        assert_eq!(g.sending(1), &[0, 2]);
        assert_eq!(g.sending(2), &[0]);
        assert_eq!(g.receiving(0), &[1, 2]);
        assert_eq!(g.receiving(1), &[0]);
        assert_eq!(g.receiving(2), &[1]);
    }

    #[test]
    fn single_node_has_no_copies() {
        let sys = build_system(vec![scalar_sub(0, vec![])], &[]).unwrap();
        assert!(sys.graph().sending(0).is_empty());
        assert!(sys.graph().receiving(0).is_empty());
        assert_eq!(sys.total_copy_dim(), 0);
    }

    #[test]
    fn rejects_self_loops_and_bad_orders() {
        assert!(matches!(
            CouplingGraph::new(2, &[(1, 1)]),
            Err(Error::InvalidGraph(_))
        ));
        assert!(matches!(
            CouplingGraph::new(2, &[(0, 2)]),
            Err(Error::InvalidGraph(_))
        ));
        let subs = vec![scalar_sub(0, vec![]), scalar_sub(1, vec![])];
        assert!(matches!(
            build_system(subs, &[(0, 1)]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rejects_invalid_models() {
        #[derive(Debug)]
        struct Offset;
        impl SubsystemDynamics for Offset {
            fn eval(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
                out[0] = 1e-3;
            }
        }
        let sub = SubsystemModel::new(0, 1, 1, Arc::new(Offset), vec![]);
        assert!(matches!(
            build_system(vec![sub], &[]),
            Err(Error::InvalidModel(_))
        ));

        let sub =
            scalar_sub(0, vec![]).with_cost(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), 1.0);
        assert!(matches!(
            build_system(vec![sub], &[]),
            Err(Error::InvalidModel(_))
        ));

        let sub = scalar_sub(0, vec![]).with_bounds(vec![0.5], vec![1.0]);
        assert!(matches!(
            build_system(vec![sub], &[]),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn finite_difference_fallback_matches_analytic() {
        let lin = LinearDynamics {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
            e: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.7, 0.0]),
        };
        #[derive(Debug)]
        struct NoJac(LinearDynamics);
        impl SubsystemDynamics for NoJac {
            fn eval(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
                self.0.eval(x, u, v, out)
            }
        }
        let sub = SubsystemModel::new(0, 2, 1, Arc::new(NoJac(lin.clone())), vec![1]);
        let (mut jx, mut ju, mut jv) = (vec![0.0; 4], vec![0.0; 2], vec![0.0; 4]);
        sub.jacobians(&[0.3, -0.2], &[0.1], &[1.0, 2.0], &mut jx, &mut ju, &mut jv);
        for (a, b) in jx.iter().zip(lin.a.transpose().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((ju[1] - 0.5).abs() < 1e-8);
        assert!((jv[2] - 0.7).abs() < 1e-8);
    }

    fn ring(n: usize) -> CoupledSystem {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)])
            .collect();
        let g = CouplingGraph::new(n, &edges).unwrap();
        let subs = (0..n)
            .map(|i| scalar_sub(i, g.sending(i).to_vec()))
            .collect();
        build_system(subs, &edges).unwrap()
    }

    proptest! {
        #[test]
        fn neighbor_sets_are_dual(n in 2usize..7, raw in proptest::collection::vec((0usize..7, 0usize..7), 0..20)) {
            let edges: Vec<_> = raw.into_iter().filter(|(a, b)| a != b && *a < n && *b < n).collect();
            let g = CouplingGraph::new(n, &edges).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(g.sending(i).contains(&j), g.receiving(j).contains(&i));
                }
                prop_assert!(!g.sending(i).contains(&i));
            }
        }

        #[test]
        fn stacked_matches_per_subsystem(x in proptest::collection::vec(-3.0f64..3.0, 4), u in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let sys = ring(4);
            let f = sys.eval_stacked_dynamics(&x, &u).unwrap();
            for i in 0..4 {
                let mut v = Vec::new();
                sys.gather_copy(i, &x, &mut v);
                let mut out = [0.0];
                sys.subsystem(i).eval(&x[i..i + 1], &u[i..i + 1], &v, &mut out);
                prop_assert_eq!(out[0].to_bits(), f[i].to_bits());
            }
            let blocks = sys.scatter(&x, true);
            prop_assert_eq!(sys.gather(&blocks), x.clone());
        }
    }
}
