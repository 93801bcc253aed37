//! Terminal-cost design via a continuous Lyapunov equation, and an empirical
//! check of the control-Lyapunov descent condition `V' + l <= 0`.
//!
//! Gains follow the feedback convention `u = -K x`, so the closed-loop
//! matrix is `A - B K`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network::CoupledSystem;

/// Solves `P A_cl + A_cl' P = -Q_hat` with `A_cl = A - B K`.
///
/// The Kronecker-vectorised system is solved with a full-pivot LU; for the
/// small subsystem dimensions involved this is exact to rounding.
pub fn design_terminal_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q_hat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || k.shape() != (b.ncols(), n) || q_hat.shape() != (n, n) {
        return Err(Error::Dimension(
            "inconsistent Lyapunov design matrices".into(),
        ));
    }
    let a_cl = a - b * k;
    let max_re = a_cl
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_re >= 0.0 {
        return Err(Error::NotHurwitz(max_re));
    }
    let p = solve_lyapunov(&a_cl, q_hat)?;
    crate::network::check_symmetric_definite(&p, true)
        .map_err(|e| Error::InvalidModel(format!("designed terminal weight {e}")))?;
    Ok(p)
}

/// Solves `P A + A' P = -Q` for `P`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // Column-major vec: vec(P A) = (A' kron I) vec(P), vec(A' P) = (I kron A') vec(P).
    let lhs = a.transpose().kronecker(&eye) + eye.kronecker(&a.transpose());
    let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
    let sol = lhs
        .full_piv_lu()
        .solve(&rhs)
        .ok_or(Error::SingularLyapunov)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    // Symmetrise away rounding.
    Ok((&p + p.transpose()) * 0.5)
}

/// Frobenius-norm residual `||P A + A'P + Q||_F / ||Q||_F`.
pub fn lyapunov_residual(p: &DMatrix<f64>, a: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (p * a + a.transpose() * p + q).norm() / q.norm().max(f64::MIN_POSITIVE)
}

/// Which dynamics the descent condition is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescentMode {
    /// The true coupled dynamics `F`.
    Coupled,
    /// Each subsystem with its neighbor states set to zero, i.e. the setting
    /// in which the per-subsystem terminal weights were designed.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClfReport {
    /// `max over samples of V'(x, kappa_V(x)) + l(x, kappa_V(x))`.
    pub max_value: f64,
    /// Fraction of samples with a positive value or an inadmissible feedback.
    pub violating_fraction: f64,
    pub samples: usize,
}

impl ClfReport {
    pub fn holds(&self) -> bool {
        self.violating_fraction == 0.0
    }
}

/// Evaluates `V' + l` under `u = -K x` on every sample of stacked states.
///
/// `gains[i]` is `K_i` (m_i x n_i). Terminal weights are taken from `sys`.
/// Samples whose feedback leaves the input box count as violations.
pub fn clf_descent_check(
    sys: &CoupledSystem,
    gains: &[DMatrix<f64>],
    samples: &[Vec<f64>],
    mode: DescentMode,
) -> ClfReport {
    let mut max_value = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut u = vec![0.0; sys.input_dim()];
    let mut v = Vec::new();
    for x in samples {
        let mut admissible = true;
        for (i, sub) in sys.subsystems().iter().enumerate() {
            let xi = nalgebra::DVector::from_column_slice(&x[sys.state_range(i)]);
            let ui = -(&gains[i] * xi);
            for (c, val) in ui.iter().enumerate() {
                let slot = sys.input_range(i).start + c;
                u[slot] = *val;
                if *val < sub.lower_bounds()[c] || *val > sub.upper_bounds()[c] {
                    admissible = false;
                }
            }
        }
        let mut value = 0.0;
        for (i, sub) in sys.subsystems().iter().enumerate() {
            let xi = &x[sys.state_range(i)];
            let ui = &u[sys.input_range(i)];
            match mode {
                DescentMode::Coupled => sys.gather_copy(i, x, &mut v),
                DescentMode::Decoupled => {
                    v.clear();
                    v.resize(sys.copy_dim(i), 0.0);
                }
            }
            let mut f = vec![0.0; sub.state_dim()];
            sub.eval(xi, ui, &v, &mut f);
            // d/dt x'Px = x'(P + P')f
            let p = sub.terminal();
            let mut vdot = 0.0;
            for r in 0..xi.len() {
                for c in 0..xi.len() {
                    vdot += xi[r] * (p[(r, c)] + p[(c, r)]) * f[c];
                }
            }
            value += vdot + sub.running_cost(xi, ui);
        }
        max_value = max_value.max(value);
        if value > 0.0 || !admissible {
            violations += 1;
        }
    }
    ClfReport {
        max_value,
        violating_fraction: if samples.is_empty() {
            0.0
        } else {
            violations as f64 / samples.len() as f64
        },
        samples: samples.len(),
    }
}

/// Points of a uniform grid with `per_axis` points per coordinate on
/// `[-radius, radius]^dim`, kept if inside the Euclidean ball of `radius`.
pub fn grid_ball_samples(dim: usize, radius: f64, per_axis: usize) -> Vec<Vec<f64>> {
    assert!(per_axis >= 2);
    let coord = |k: usize| -radius + 2.0 * radius * k as f64 / (per_axis - 1) as f64;
    let total = per_axis.pow(dim as u32);
    let mut out = Vec::new();
    for mut idx in 0..total {
        let mut x = Vec::with_capacity(dim);
        for _ in 0..dim {
            x.push(coord(idx % per_axis));
            idx /= per_axis;
        }
        if crate::trajectory::euclid(&x) <= radius * (1.0 + 1e-12) {
            out.push(x);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_system, LinearDynamics, SubsystemModel};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn scalar_lyapunov() {
        let p = design_terminal_cost(
            &m(1, 1, &[-1.0]),
            &m(1, 1, &[0.0]),
            &m(1, 1, &[0.0]),
            &m(1, 1, &[2.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn diagonal_lyapunov() {
        let a = m(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let p = design_terminal_cost(
            &a,
            &m(2, 1, &[0.0, 0.0]),
            &m(1, 2, &[0.0, 0.0]),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_abs_diff_eq!(p, m(2, 2, &[0.5, 0.0, 0.0, 0.25]), epsilon = 1e-14);
    }

    #[test]
    fn rejects_unstable_closed_loop() {
        let a = m(2, 2, &[0.0, 1.0, -1.0, 0.1]);
        let b = m(2, 1, &[0.0, 1.0]);
        // u = +Kx convention would destabilise; with u = -Kx a negative gain does.
        let k = m(1, 2, &[-3.6, -5.3]);
        assert!(matches!(
            design_terminal_cost(&a, &b, &k, &DMatrix::identity(2, 2)),
            Err(Error::NotHurwitz(_))
        ));
    }

    #[test]
    fn residual_is_tiny_for_nonsymmetric_closed_loop() {
        let a = m(2, 2, &[0.0, 1.0, -4.0, 0.11]);
        let b = m(2, 1, &[0.0, 1.0]);
        let k = m(1, 2, &[2.0, 5.0]);
        let q_hat = m(2, 2, &[30.0, 0.0, 0.0, 30.0]) + k.transpose() * &k * 0.1;
        let p = design_terminal_cost(&a, &b, &k, &q_hat).unwrap();
        let a_cl = &a - &b * &k;
        assert!(lyapunov_residual(&p, &a_cl, &q_hat) <= 1e-9);
        assert_eq!(p, p.transpose());
    }

    #[test]
    fn linear_decay_check() {
        // x' = -x, V = x^2, l = x^2, kappa = 0: V' + l = -x^2.
        let lin = LinearDynamics {
            a: m(1, 1, &[-1.0]),
            b: m(1, 1, &[1.0]),
            e: DMatrix::zeros(1, 0),
        };
        let sub = SubsystemModel::new(0, 1, 1, Arc::new(lin), vec![])
            .with_cost(m(1, 1, &[1.0]), m(1, 1, &[1.0]), 1.0)
            .with_terminal(m(1, 1, &[1.0]));
        let sys = build_system(vec![sub], &[]).unwrap();
        let samples: Vec<Vec<f64>> = (-10..=10).map(|k| vec![k as f64 * 0.1]).collect();
        let report = clf_descent_check(&sys, &[m(1, 1, &[0.0])], &samples, DescentMode::Coupled);
        assert!(report.holds());
        assert_abs_diff_eq!(report.max_value, 0.0, epsilon = 1e-15);
        let pos = clf_descent_check(&sys, &[m(1, 1, &[0.0])], &[vec![0.5]], DescentMode::Coupled);
        assert_abs_diff_eq!(pos.max_value, -0.25, epsilon = 1e-15);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let s = grid_ball_samples(2, 0.1, 5);
        assert!(s
            .iter()
            .all(|x| crate::trajectory::euclid(x) <= 0.1 + 1e-12));
        assert!(s.contains(&vec![0.0, 0.0]));
        assert_eq!(s.len(), 13);
    }
}
