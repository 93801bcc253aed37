//! The two benchmark networks: three coupled Van der Pol oscillators and a
//! chain of masses joined by springs.
//!
//! Random masses and initial displacements come from SplitMix64 seeded with
//! the user's seed; a uniform sample is the top 53 bits of one output divided
//! by `2^53`. All masses are drawn first, then all displacements.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::network::{
    build_system, CoupledSystem, LinearDynamics, SubsystemDynamics, SubsystemModel,
};
use crate::ocp::SolverSettings;
use crate::terminal::design_terminal_cost;

/// A ready-to-run network with its nominal MPC settings.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub system: CoupledSystem,
    pub x0: Vec<f64>,
    /// Auxiliary feedback gains, `u_i = -K_i x_i`.
    pub gains: Vec<DMatrix<f64>>,
    pub horizon: f64,
    pub dt: f64,
    pub rho: f64,
    /// Default stopping constant.
    pub d: f64,
    /// `(A - B K, Q_hat)` behind each subsystem's terminal weight.
    pub terminal_design: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Gradient iterations per local solve used by the benchmarks.
///
/// With the generic solver default (10 plain steps) the local solves are
/// too inexact for the stopping criterion once `d ||x_k,i||` is small.
pub const BENCH_INNER_ITERATIONS: usize = 30;

/// Local solver settings used by the benchmarks.
pub fn bench_solver() -> SolverSettings {
    SolverSettings {
        max_iterations: BENCH_INNER_ITERATIONS,
        barzilai_borwein: true,
        ..SolverSettings::default()
    }
}

impl Benchmark {
    /// ADMM settings for this benchmark.
    pub fn admm_config(&self) -> AdmmConfig {
        let mut config = AdmmConfig {
            rho: self.rho,
            d: self.d,
            ..AdmmConfig::default()
        };
        config.solver = bench_solver();
        config
    }
}

/// One oscillator `phi'' = mu (1 - alpha phi^2) phi' - omega2 phi
/// + kappa phi_a phi_a' + delta (phi' - phi_b') + u`.
///
/// The copy vector is `[phi_a, phi_a', phi_b, phi_b']` when coupled and
/// empty otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Oscillator {
    pub mu: f64,
    pub alpha: f64,
    pub omega2: f64,
    pub kappa: f64,
    pub delta: f64,
}

impl SubsystemDynamics for Oscillator {
    fn eval(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let (phi, dphi) = (x[0], x[1]);
        let mut acc = self.mu * (1.0 - self.alpha * phi * phi) * dphi - self.omega2 * phi + u[0];
        if !v.is_empty() {
            acc += self.kappa * v[0] * v[1] + self.delta * (dphi - v[3]);
        }
        out[0] = dphi;
        out[1] = acc;
    }

    fn jacobians(
        &self,
        x: &[f64],
        _u: &[f64],
        v: &[f64],
        jx: &mut [f64],
        ju: &mut [f64],
        jv: &mut [f64],
    ) -> bool {
        let (phi, dphi) = (x[0], x[1]);
        let coupled = !v.is_empty();
        jx.copy_from_slice(&[
            0.0,
            1.0,
            -2.0 * self.mu * self.alpha * phi * dphi - self.omega2,
            self.mu * (1.0 - self.alpha * phi * phi) + if coupled { self.delta } else { 0.0 },
        ]);
        ju.copy_from_slice(&[0.0, 1.0]);
        if coupled {
            jv.copy_from_slice(&[
                0.0,
                0.0,
                0.0,
                0.0,
                self.kappa * v[1],
                self.kappa * v[0],
                0.0,
                -self.delta,
            ]);
        }
        true
    }
}

/// Constants of the oscillator benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct VdpParameters {
    pub oscillators: [Oscillator; 3],
    pub q: [f64; 2],
    pub r: f64,
    pub gamma: f64,
    pub u_max: f64,
    pub gains: [[f64; 2]; 3],
    pub horizon: f64,
    pub dt: f64,
    pub phi0: [f64; 3],
}

impl VdpParameters {
    pub fn nominal() -> Self {
        let coupled = |alpha: f64| Oscillator {
            mu: 0.01,
            alpha,
            omega2: 4.0,
            kappa: 0.057,
            delta: 0.1,
        };
        VdpParameters {
            oscillators: [
                Oscillator {
                    mu: 0.1,
                    alpha: 5.25,
                    omega2: 1.0,
                    kappa: 0.0,
                    delta: 0.0,
                },
                coupled(6070.0),
                coupled(192.0),
            ],
            q: [30.0, 30.0],
            r: 0.1,
            gamma: 0.2,
            u_max: 1.0,
            gains: [[3.6, 5.3], [2.0, 5.0], [2.0, 5.0]],
            horizon: 3.0,
            dt: 0.1,
            phi0: [0.698, 0.279, -0.611],
        }
    }
}

/// Oscillator 0 is autonomous; 1 and 2 both read oscillator 0 and each
/// other.
pub const VDP_EDGES: [(usize, usize); 4] = [(0, 1), (0, 2), (2, 1), (1, 2)];

/// Terminal weight from `P A_cl + A_cl' P = -(Q + r K'K)` with the
/// linearization of `f_i` in its own state and input. Also returns
/// `(A_cl, Q_hat)`.
#[allow(clippy::type_complexity)]
fn lyapunov_terminal(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<(DMatrix<f64>, (DMatrix<f64>, DMatrix<f64>))> {
    let q_hat = q + k.transpose() * k * r;
    let p = design_terminal_cost(&a, &b, k, &q_hat)?;
    Ok((p, (&a - &b * k, q_hat)))
}

pub fn build_vdp() -> Result<Benchmark> {
    build_vdp_with(&VdpParameters::nominal())
}

pub fn build_vdp_with(params: &VdpParameters) -> Result<Benchmark> {
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&params.q));
    let r = DMatrix::from_element(1, 1, params.r);
    let mut subs = Vec::new();
    let mut gains = Vec::new();
    let mut designs = Vec::new();
    for (i, osc) in params.oscillators.iter().enumerate() {
        let sending = match i {
            0 => vec![],
            1 => vec![0, 2],
            _ => vec![0, 1],
        };
        let k = DMatrix::from_row_slice(1, 2, &params.gains[i]);
        let damping = osc.mu + if sending.is_empty() { 0.0 } else { osc.delta };
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -osc.omega2, damping]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (p, design) = lyapunov_terminal(a, b, &k, &q, params.r)?;
        designs.push(design);
        subs.push(
            SubsystemModel::new(i, 2, 1, Arc::new(osc.clone()), sending)
                .with_cost(q.clone(), r.clone(), params.gamma)
                .with_terminal(p)
                .with_bounds(vec![-params.u_max], vec![params.u_max]),
        );
        gains.push(k);
    }
    let system = build_system(subs, &VDP_EDGES)?;
    let x0 = params.phi0.iter().flat_map(|p| [*p, 0.0]).collect();
    Ok(Benchmark {
        name: "van_der_pol".into(),
        system,
        x0,
        gains,
        horizon: params.horizon,
        dt: params.dt,
        rho: 2.0,
        d: 0.005,
        terminal_design: designs,
    })
}

/// Weights and gains of the spring-mass chain.
#[derive(Clone, Debug, PartialEq)]
pub struct SpringMassParameters {
    pub stiffness: f64,
    pub q: [f64; 2],
    pub r: f64,
    pub gamma: f64,
    pub u_max: f64,
    /// Auxiliary gain shared by all masses.
    pub gain: [f64; 2],
    pub mass_range: (f64, f64),
    pub displacement_range: (f64, f64),
    pub horizon: f64,
    pub dt: f64,
}

impl SpringMassParameters {
    pub fn nominal() -> Self {
        SpringMassParameters {
            stiffness: 0.5,
            q: [30.0, 30.0],
            r: 0.1,
            gamma: 0.5,
            u_max: 1.0,
            gain: [1.0, 3.0],
            mass_range: (5.0, 10.0),
            displacement_range: (-0.5, 0.5),
            horizon: 3.0,
            dt: 0.1,
        }
    }
}

/// Uniform sample on `[0, 1)` from the top 53 bits.
pub fn unit_uniform(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Masses and initial displacements for `(n, seed)`.
pub fn spring_mass_draw(
    n: usize,
    seed: u64,
    params: &SpringMassParameters,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * unit_uniform(&mut rng);
    let masses: Vec<f64> = (0..n).map(|_| draw(params.mass_range)).collect();
    let s0 = (0..n).map(|_| draw(params.displacement_range)).collect();
    (masses, s0)
}

/// A built chain with its design data.
pub struct SpringMassChain {
    pub system: CoupledSystem,
    pub gains: Vec<DMatrix<f64>>,
    pub terminal_design: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Chain `m_i s_i'' = c (sum of neighbor displacements - 2 s_i) + u_i`.
pub fn spring_mass_system(
    masses: &[f64],
    params: &SpringMassParameters,
) -> Result<SpringMassChain> {
    let n = masses.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "a spring-mass chain needs at least 2 masses, got {n}"
        )));
    }
    if masses.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidModel("masses must be positive".into()));
    }
    let c = params.stiffness;
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&params.q));
    let r = DMatrix::from_element(1, 1, params.r);
    let k = DMatrix::from_row_slice(1, 2, &params.gain);
    let mut subs = Vec::with_capacity(n);
    let mut designs = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(2 * (n - 1));
    for (i, &m) in masses.iter().enumerate() {
        let sending: Vec<usize> = [i.checked_sub(1), (i + 1 < n).then_some(i + 1)]
            .into_iter()
            .flatten()
            .collect();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0 * c / m, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / m]);
        let mut e = DMatrix::zeros(2, 2 * sending.len());
        for col in 0..sending.len() {
            e[(1, 2 * col)] = c / m;
        }
        let (p, design) = lyapunov_terminal(a.clone(), b.clone(), &k, &q, params.r)?;
        designs.push(design);
        for &j in &sending {
            edges.push((j, i));
        }
        subs.push(
            SubsystemModel::new(i, 2, 1, Arc::new(LinearDynamics { a, b, e }), sending)
                .with_cost(q.clone(), r.clone(), params.gamma)
                .with_terminal(p)
                .with_bounds(vec![-params.u_max], vec![params.u_max]),
        );
    }
    Ok(SpringMassChain {
        system: build_system(subs, &edges)?,
        gains: vec![k; n],
        terminal_design: designs,
    })
}

pub fn build_spring_mass(n: usize, seed: u64) -> Result<Benchmark> {
    build_spring_mass_with(n, seed, &SpringMassParameters::nominal())
}

pub fn build_spring_mass_with(
    n: usize,
    seed: u64,
    params: &SpringMassParameters,
) -> Result<Benchmark> {
    if n < 2 {
        return Err(Error::Config(format!(
            "a spring-mass chain needs at least 2 masses, got {n}"
        )));
    }
    let (masses, s0) = spring_mass_draw(n, seed, params);
    let chain = spring_mass_system(&masses, params)?;
    Ok(Benchmark {
        name: "spring_mass".into(),
        system: chain.system,
        x0: s0.iter().flat_map(|s| [*s, 0.0]).collect(),
        gains: chain.gains,
        horizon: params.horizon,
        dt: params.dt,
        rho: 1.0,
        d: 0.5,
        terminal_design: chain.terminal_design,
    })
}
