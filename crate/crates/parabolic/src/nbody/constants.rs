//! Constants of the limiting central configuration and of the linearization
//! of the regularized escape field.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::potential::{self, ClusterMasses, CouplingPartials};
use super::{Configuration, NBodySystem};
use crate::error::{ParabolicError, Result};
use crate::jet::{Jet, Scalar};

/// Largest admissible `m_n / M_n` and `m_{n+1} / M_n`.
pub const DEFAULT_SMALLNESS: f64 = 0.1;

const NEWTON_ITERATIONS: usize = 60;
const NEWTON_TOL: f64 = 1e-15;
const MAX_HALVINGS: usize = 30;

/// Solution of the system `A^3 B = A`, second displayed balance equation, and
/// (equilateral branch) `d V_0 / d theta = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbSolution {
    pub a: f64,
    pub b: f64,
    /// `pi` or the root near `pi / 3`.
    pub theta0: f64,
    pub iterations: usize,
    /// `|A^3 B - A|`.
    pub residual_ab: f64,
    /// Absolute residual of the second equation.
    pub residual_balance: f64,
}

/// `alpha_k / alpha_{k+1}` for the cluster masses.
fn alpha_ratio(cm: &ClusterMasses) -> f64 {
    (cm.outer() / cm.total()).cbrt()
}

/// `m_{n+1} / (4 alpha_{n+1}^2 beta_n)` times `m_n`, finite when `m_n = 0`.
fn nu_coefficient(cm: &ClusterMasses) -> f64 {
    cm.m_next * (cm.outer() / cm.total()).powf(2.0 / 3.0) / cm.inner
}

/// Residuals of the system at `(A, B, theta)`.
fn residuals<S: Scalar>(cm: &ClusterMasses, config: Configuration, a: &S, b: &S, theta: &S) -> [S; 3] {
    let ratio = alpha_ratio(cm);
    let alpha = a.clone() * a.clone() * ratio;
    let a2 = a.clone() * a.clone();
    let a4 = a2.clone() * a2.clone();
    let v = potential::coupling(cm, &alpha, theta);
    let va = potential::coupling_alpha_scaled(cm, &alpha, theta);
    let e1 = a2.clone() * a.clone() * b.clone() - a.clone();
    let lhs = (v / cm.outer() + va.clone() * a2 * (ratio * cm.m_n / cm.outer()) + 1.0) * a4.clone();
    let rhs = (-(va * a4 * nu_coefficient(cm)) + 1.0) * b.clone();
    let e3 = match config {
        Configuration::Collinear => theta.clone() - PI,
        Configuration::Equilateral => potential::coupling_theta_scaled(cm, &alpha, theta),
    };
    [e1, lhs - rhs, e3]
}

fn max_abs(r: &[f64; 3]) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Damped Newton iteration from `(A, B) = (1, 1)`; the angle starts at `pi` or `pi / 3`.
///
/// Zero small masses are allowed here and give `A = B = 1`.
pub fn solve_ab(cm: &ClusterMasses, config: Configuration) -> Result<AbSolution> {
    if !(cm.inner > 0.0) || cm.m_n < 0.0 || cm.m_next < 0.0 {
        return Err(ParabolicError::InvalidInput(format!("invalid cluster masses {cm:?}")));
    }
    let theta_start = match config {
        Configuration::Collinear => PI,
        Configuration::Equilateral => PI / 3.0,
    };
    let mut x = [1.0, 1.0, theta_start];
    let eval = |x: &[f64; 3]| -> [f64; 3] { residuals(cm, config, &x[0], &x[1], &x[2]) };
    let mut r = eval(&x);
    let mut iterations = 0;
    while max_abs(&r) > NEWTON_TOL && iterations < NEWTON_ITERATIONS {
        iterations += 1;
        let vars: Vec<Jet> = (0..3).map(|i| Jet::variable(3, 1, i, x[i])).collect();
        let rj = residuals(cm, config, &vars[0], &vars[1], &vars[2]);
        let jac = nalgebra::Matrix3::from_fn(|i, j| {
            let mut e = [0u32; 3];
            e[j] = 1;
            rj[i].coeff(&e)
        });
        let rhs = nalgebra::Vector3::new(r[0], r[1], r[2]);
        let step = jac.lu().solve(&rhs).ok_or(ParabolicError::NewtonDiverged {
            iterations,
            residual: max_abs(&r),
        })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = [x[0] - lambda * step[0], x[1] - lambda * step[1], x[2] - lambda * step[2]];
            let rt = eval(&trial);
            if max_abs(&rt) < max_abs(&r) || max_abs(&rt) <= NEWTON_TOL {
                x = trial;
                r = rt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let residual = max_abs(&r);
    if !(residual <= 1e-13) || !x.iter().all(|v| v.is_finite()) {
        return Err(ParabolicError::NewtonDiverged { iterations, residual });
    }
    Ok(AbSolution {
        a: x[0],
        b: x[1],
        theta0: x[2],
        iterations,
        residual_ab: (x[0].powi(3) * x[1] - x[0]).abs(),
        residual_balance: r[1].abs(),
    })
}

/// Constants attached to one configuration branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralConfigConstants {
    pub configuration: Configuration,
    pub masses: ClusterMasses,
    /// Total angular momentum; it stands for the inner-torus average `Theta_0^0`,
    /// which coincides with it when `n = 1`.
    pub angular_momentum: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
    pub alpha_next: f64,
    pub beta_next: f64,
    pub mu_n: f64,
    pub mu_next: f64,
    pub a: f64,
    pub b: f64,
    pub theta0: f64,
    /// `G_n^0`.
    pub g0: f64,
    pub nu: f64,
    /// `Gamma_n`.
    pub gamma_n: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `V_0` and its partials at `((alpha_n / alpha_{n+1}) A^2, theta0)`.
    pub v: CouplingPartials,
    pub newton_iterations: usize,
    pub residual_ab: f64,
}

impl CentralConfigConstants {
    /// `(alpha_n / alpha_{n+1}) A^2`, the limit of `r_n / r_{n+1}`.
    pub fn alpha0(&self) -> f64 {
        self.alpha_n / self.alpha_next * self.a * self.a
    }

    /// Exact limit of `r_{n+1} / r_n` when `x_{n+1} / x_n -> A`.
    pub fn distance_ratio_limit(&self) -> f64 {
        1.0 / self.alpha0()
    }

    /// Leading-order prediction of `gamma_2` from the angular coefficients of `V_0`.
    pub fn gamma2_prediction(&self) -> f64 {
        let c = match self.configuration {
            Configuration::Collinear => -3.5,
            Configuration::Equilateral => 9.0,
        };
        c * (self.masses.m_n + self.masses.m_next) / self.masses.inner
    }
}

/// Computes all constants for the configuration branch of `system`.
pub fn central_config_constants(system: &NBodySystem) -> Result<CentralConfigConstants> {
    central_config_constants_with(system, DEFAULT_SMALLNESS)
}

/// [`central_config_constants`] with an explicit smallness threshold on `m_n / M_n`, `m_{n+1} / M_n`.
pub fn central_config_constants_with(system: &NBodySystem, smallness: f64) -> Result<CentralConfigConstants> {
    system.validate()?;
    let n = system.n();
    let cm = system.cluster_masses();
    if cm.m_n / cm.inner > smallness || cm.m_next / cm.inner > smallness {
        return Err(ParabolicError::InvalidInput(format!(
            "masses m_n = {}, m_(n+1) = {} exceed the smallness threshold {smallness} relative to M_n = {}",
            cm.m_n, cm.m_next, cm.inner
        )));
    }
    let sol = solve_ab(&cm, system.configuration)?;
    let (alpha_n, alpha_next) = (system.alpha(n), system.alpha(n + 1));
    let (beta_n, beta_next) = (system.beta(n), system.beta(n + 1));
    let (mu_n, mu_next) = (system.mu(n), system.mu(n + 1));
    let a = sol.a;
    let a4 = a.powi(4);
    let alpha0 = alpha_n / alpha_next * a * a;
    let v = potential::coupling_partials(&cm, alpha0, sol.theta0)?;
    let nu2 = 1.0 - cm.m_next / (4.0 * alpha_next * alpha_next * beta_n) * a4 * v.v_alpha;
    if !(nu2 > 0.0) {
        return Err(ParabolicError::InvalidInput(format!("nu^2 = {nu2:.3e} is not positive")));
    }
    let inv_n = 1.0 / (alpha_n * alpha_n * mu_n);
    let inv_next = a4 / (alpha_next * alpha_next * mu_next);
    let gamma_n = 0.5 * (inv_n + inv_next);
    let theta_total = system.angular_momentum;
    let g0 = theta_total * inv_next / (2.0 * gamma_n);
    let gamma1 = alpha_n / (alpha_next * alpha_next) * cm.m_next * a.powi(3) * v.v_alpha_theta * gamma_n;
    let gamma2 = cm.m_next * a * a * v.v_theta_theta * gamma_n / (2.0 * alpha_next);
    Ok(CentralConfigConstants {
        configuration: system.configuration,
        masses: cm,
        angular_momentum: theta_total,
        alpha_n,
        beta_n,
        alpha_next,
        beta_next,
        mu_n,
        mu_next,
        a,
        b: sol.b,
        theta0: sol.theta0,
        g0,
        nu: nu2.sqrt(),
        gamma_n,
        gamma1,
        gamma2,
        v,
        newton_iterations: sol.iterations,
        residual_ab: sol.residual_ab,
    })
}
