//! The coupling potential between the last two Jacobi vectors.
//!
//! With `alpha = r_n / r_{n+1}` and `theta` the angle between the two vectors,
//!
//! ```text
//! V_0 = M_n D_1^{-1/2} + m_n D_2^{-1/2} - M_{n+1},
//! D_1 = 1 + 2 a alpha cos(theta) + a^2 alpha^2,   a = m_n / M_{n+1},
//! D_2 = 1 - 2 b alpha cos(theta) + b^2 alpha^2,   b = M_n / M_{n+1}.
//! ```
//!
//! The first partials carry an overall factor `m_n`; the `*_scaled` functions
//! return them divided by `m_n`, which keeps them finite in the limit of a
//! vanishing mass.

use serde::{Deserialize, Serialize};

use crate::error::{ParabolicError, Result};
use crate::jet::{Jet, Scalar};

/// Smallest admissible value of `D_1`, `D_2` before the surds are rejected.
pub const MIN_SURD: f64 = 1e-10;

const ROOT_ITERATIONS: usize = 60;

/// Masses entering the coupling between the cluster `0..n` and the bodies `n`, `n + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMasses {
    /// `M_n`, the mass of bodies `0..n`.
    pub inner: f64,
    /// `m_n`.
    pub m_n: f64,
    /// `m_{n+1}`.
    pub m_next: f64,
}

impl ClusterMasses {
    /// `M_{n+1} = M_n + m_n`.
    pub fn outer(&self) -> f64 {
        self.inner + self.m_n
    }

    /// `M_{n+2}`.
    pub fn total(&self) -> f64 {
        self.inner + self.m_n + self.m_next
    }

    fn ratios(&self) -> (f64, f64) {
        (self.m_n / self.outer(), self.inner / self.outer())
    }
}

fn surds<S: Scalar>(masses: &ClusterMasses, alpha: &S, theta: &S) -> (S, S) {
    let (a, b) = masses.ratios();
    let c = theta.cos();
    let d1 = c.clone() * alpha.clone() * (2.0 * a) + alpha.clone() * alpha.clone() * (a * a) + 1.0;
    let d2 = -(c * alpha.clone() * (2.0 * b)) + alpha.clone() * alpha.clone() * (b * b) + 1.0;
    (d1, d2)
}

/// `V_0(alpha, theta)`.
pub fn coupling<S: Scalar>(masses: &ClusterMasses, alpha: &S, theta: &S) -> S {
    let (d1, d2) = surds(masses, alpha, theta);
    d1.powf(-0.5) * masses.inner + d2.powf(-0.5) * masses.m_n - masses.outer()
}

/// `(d V_0 / d alpha) / m_n`.
pub fn coupling_alpha_scaled<S: Scalar>(masses: &ClusterMasses, alpha: &S, theta: &S) -> S {
    let (a, b) = masses.ratios();
    let (d1, d2) = surds(masses, alpha, theta);
    let c = theta.cos();
    let t2 = (c.clone() - alpha.clone() * b) * d2.powf(-1.5);
    let t1 = (c + alpha.clone() * a) * d1.powf(-1.5);
    (t2 - t1) * b
}

/// `(d V_0 / d theta) / m_n`.
pub fn coupling_theta_scaled<S: Scalar>(masses: &ClusterMasses, alpha: &S, theta: &S) -> S {
    let (_, b) = masses.ratios();
    let (d1, d2) = surds(masses, alpha, theta);
    alpha.clone() * theta.sin() * (d1.powf(-1.5) - d2.powf(-1.5)) * b
}

/// Rejects points where either surd is close to zero (a collision direction).
pub fn check_domain(masses: &ClusterMasses, alpha: f64, theta: f64) -> Result<()> {
    let (d1, d2) = surds(masses, &alpha, &theta);
    if d1.min(d2) < MIN_SURD || !alpha.is_finite() || alpha <= 0.0 {
        return Err(ParabolicError::DomainViolation(format!(
            "alpha = {alpha:.6e}, theta = {theta:.6e}, surds ({d1:.3e}, {d2:.3e})"
        )));
    }
    Ok(())
}

/// `V_0` and its partials up to order two at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingPartials {
    pub v: f64,
    pub v_alpha: f64,
    pub v_theta: f64,
    pub v_alpha_alpha: f64,
    pub v_alpha_theta: f64,
    pub v_theta_theta: f64,
}

/// Values and partials of `V_0` at `(alpha, theta)`.
pub fn coupling_partials(masses: &ClusterMasses, alpha: f64, theta: f64) -> Result<CouplingPartials> {
    check_domain(masses, alpha, theta)?;
    let a = Jet::variable(2, 1, 0, alpha);
    let t = Jet::variable(2, 1, 1, theta);
    let va = coupling_alpha_scaled(masses, &a, &t).scale(masses.m_n);
    let vt = coupling_theta_scaled(masses, &a, &t).scale(masses.m_n);
    Ok(CouplingPartials {
        v: coupling(masses, &alpha, &theta),
        v_alpha: va.value(),
        v_theta: vt.value(),
        v_alpha_alpha: va.coeff(&[1, 0]),
        v_alpha_theta: va.coeff(&[0, 1]),
        v_theta_theta: vt.coeff(&[0, 1]),
    })
}

/// Root of `d V_0 / d theta (alpha, .)` by Newton iteration from `theta0`.
pub fn theta_root(masses: &ClusterMasses, alpha: f64, theta0: f64) -> Result<f64> {
    let mut th = theta0;
    let mut residual = f64::INFINITY;
    let a = Jet::constant(1, 1, alpha);
    for _ in 0..ROOT_ITERATIONS {
        let r = coupling_theta_scaled(masses, &a, &Jet::variable(1, 1, 0, th));
        residual = r.value().abs();
        let slope = r.coeff(&[1]);
        if residual == 0.0 {
            return Ok(th);
        }
        if slope == 0.0 || !slope.is_finite() {
            break;
        }
        let step = r.value() / slope;
        th -= step;
        if step.abs() < 1e-15 * th.abs().max(1.0) {
            return Ok(th);
        }
    }
    Err(ParabolicError::NewtonDiverged {
        iterations: ROOT_ITERATIONS,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn masses(m: f64) -> ClusterMasses {
        ClusterMasses {
            inner: 1.0,
            m_n: m,
            m_next: m,
        }
    }

    #[test]
    fn coupling_vanishes_without_the_middle_mass() {
        let ms = masses(0.0);
        for &(a, t) in &[(0.3, 0.1), (1.0, PI), (2.5, 2.0), (0.9, PI / 3.0)] {
            assert_eq!(coupling(&ms, &a, &t), 0.0);
        }
    }

    #[test]
    fn opposition_value_matches_closed_form() {
        let ms = ClusterMasses {
            inner: 1.0,
            m_n: 0.01,
            m_next: 0.02,
        };
        let v = coupling(&ms, &1.0, &PI);
        let expected = ms.m_n * ms.outer() / (ms.inner + ms.outer());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.005_024_875_621_890_5).abs() < 1e-12);
    }

    #[test]
    fn scaled_partials_match_finite_differences() {
        let ms = ClusterMasses {
            inner: 1.3,
            m_n: 0.05,
            m_next: 0.02,
        };
        let h = 1e-6;
        for &(a, t) in &[(0.8, 2.0), (1.1, 0.7), (0.5, 3.0)] {
            let fd_a = (coupling(&ms, &(a + h), &t) - coupling(&ms, &(a - h), &t)) / (2.0 * h);
            let fd_t = (coupling(&ms, &a, &(t + h)) - coupling(&ms, &a, &(t - h))) / (2.0 * h);
            assert!((coupling_alpha_scaled(&ms, &a, &t) * ms.m_n - fd_a).abs() < 1e-9);
            assert!((coupling_theta_scaled(&ms, &a, &t) * ms.m_n - fd_t).abs() < 1e-9);
        }
    }

    #[test]
    fn leading_angular_coefficients() {
        let m = 1e-3;
        let ms = masses(m);
        let opp = coupling_partials(&ms, 1.0, PI).unwrap();
        let eq = coupling_partials(&ms, 1.0, PI / 3.0).unwrap();
        assert!((opp.v_theta_theta / m + 7.0 / 8.0).abs() < 0.1 * 7.0 / 8.0);
        assert!((eq.v_theta_theta / m - 9.0 / 4.0).abs() < 0.1 * 9.0 / 4.0);
    }

    #[test]
    fn equilateral_root_is_near_sixty_degrees() {
        let th = theta_root(&masses(1e-3), 1.0, 1.0).unwrap();
        assert!((th - PI / 3.0).abs() < 1e-2);
        let exact = theta_root(&masses(0.0), 1.0, 1.0).unwrap();
        assert!((exact - PI / 3.0).abs() < 1e-14);
    }

    #[test]
    fn collision_direction_is_rejected() {
        let ms = masses(1e-3);
        let alpha = ms.outer() / ms.inner;
        assert!(matches!(
            coupling_partials(&ms, alpha, 0.0),
            Err(ParabolicError::DomainViolation(_))
        ));
    }
}
