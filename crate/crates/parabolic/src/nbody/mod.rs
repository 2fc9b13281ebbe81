//! Planar `(n + 2)`-body problem: Jacobi coordinates, the Cartesian
//! Hamiltonian, the coupling potential of the two escaping bodies, the
//! central-configuration constants, the regularized escape field and its
//! integration.
//!
//! Every formula-level quantity is available for general `n`; the regularized
//! field and the escape integration are implemented for `n = 1`, where the
//! inner cluster is a single body.

pub mod blowup;
pub mod constants;
pub mod escape;
pub mod potential;

use serde::{Deserialize, Serialize};

use crate::error::{ParabolicError, Result};

pub use blowup::{BlownUpField, ClosedFormConstants, Diagonalization};
pub use constants::{central_config_constants, solve_ab, AbSolution, CentralConfigConstants};
pub use escape::{integrate_escape, EscapeOptions, EscapeReport, Trajectory};
pub use potential::ClusterMasses;

/// Bodies closer than this are reported as a collision.
pub const COLLISION_DISTANCE: f64 = 1e-12;

/// A point of the plane.
pub type Vec2 = [f64; 2];

/// Limiting shape of the escaping pair relative to the inner cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Configuration {
    /// The two escaping bodies end up on opposite sides (`theta = pi`).
    Collinear,
    /// The angle between the escaping bodies tends to the root near `pi / 3`.
    Equilateral,
}

/// Masses, total angular momentum and configuration branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBodySystem {
    /// `m_0, ..., m_{n+1}`.
    pub masses: Vec<f64>,
    /// Total angular momentum `Theta`.
    #[serde(default)]
    pub angular_momentum: f64,
    pub configuration: Configuration,
}

impl NBodySystem {
    /// Validates the masses (at least three, all positive and finite).
    pub fn new(masses: Vec<f64>, angular_momentum: f64, configuration: Configuration) -> Result<Self> {
        let sys = Self {
            masses,
            angular_momentum,
            configuration,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        if self.masses.len() < 3 {
            return Err(ParabolicError::InvalidInput(format!(
                "need at least three bodies, got {}",
                self.masses.len()
            )));
        }
        if let Some((i, m)) = self.masses.iter().enumerate().find(|(_, m)| !(m.is_finite() && **m > 0.0)) {
            return Err(ParabolicError::InvalidInput(format!(
                "masses must be positive and finite: m_{i} = {m}"
            )));
        }
        if !self.angular_momentum.is_finite() {
            return Err(ParabolicError::InvalidInput("angular momentum must be finite".into()));
        }
        Ok(())
    }

    /// Index of the first escaping body.
    pub fn n(&self) -> usize {
        self.masses.len() - 2
    }

    /// `M_j = m_0 + ... + m_{j-1}`.
    pub fn big_m(&self, j: usize) -> f64 {
        self.masses[..j].iter().sum()
    }

    /// Reduced mass `mu_j` with `1/mu_j = 1/M_j + 1/m_j`, `j >= 1`.
    pub fn mu(&self, j: usize) -> f64 {
        let (a, b) = (self.big_m(j), self.masses[j]);
        a * b / (a + b)
    }

    /// `alpha_k = 2^{-4/3} M_{k+1}^{1/3}`.
    pub fn alpha(&self, k: usize) -> f64 {
        2f64.powf(-4.0 / 3.0) * self.big_m(k + 1).cbrt()
    }

    /// `beta_k = 2^{2/3} M_k m_k / M_{k+1}^{2/3}`.
    pub fn beta(&self, k: usize) -> f64 {
        2f64.powf(2.0 / 3.0) * self.big_m(k) * self.masses[k] / self.big_m(k + 1).powf(2.0 / 3.0)
    }

    /// Masses coupling the inner cluster to the escaping pair.
    pub fn cluster_masses(&self) -> ClusterMasses {
        let n = self.n();
        ClusterMasses {
            inner: self.big_m(n),
            m_n: self.masses[n],
            m_next: self.masses[n + 1],
        }
    }

    /// Jacobi positions: `q~_0` is the centre of mass and
    /// `q~_j = q_j - (1/M_j) sum_{l<j} m_l q_l`; momenta `p~ = A^{-T} p`, so `p~_0`
    /// is the total momentum.
    pub fn jacobi(&self, q: &[Vec2], p: &[Vec2]) -> (Vec<Vec2>, Vec<Vec2>) {
        let nb = self.masses.len();
        let total = self.big_m(nb);
        let mut qt = vec![[0.0; 2]; nb];
        let mut weighted = [0.0; 2];
        for j in 0..nb {
            if j > 0 {
                let mj = self.big_m(j);
                qt[j] = [q[j][0] - weighted[0] / mj, q[j][1] - weighted[1] / mj];
            }
            weighted[0] += self.masses[j] * q[j][0];
            weighted[1] += self.masses[j] * q[j][1];
        }
        qt[0] = [weighted[0] / total, weighted[1] / total];
        // p_l = (m_l / M) p~_0 + p~_l - m_l sum_{k>l} p~_k / M_k, solved from the last body down.
        let mut pt = vec![[0.0; 2]; nb];
        pt[0] = p.iter().fold([0.0; 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        let mut tail = [0.0; 2];
        for j in (1..nb).rev() {
            let c = self.masses[j] / total;
            pt[j] = [
                p[j][0] - c * pt[0][0] + self.masses[j] * tail[0],
                p[j][1] - c * pt[0][1] + self.masses[j] * tail[1],
            ];
            let mj = self.big_m(j);
            tail[0] += pt[j][0] / mj;
            tail[1] += pt[j][1] / mj;
        }
        (qt, pt)
    }

    /// Inverse of [`NBodySystem::jacobi`].
    pub fn jacobi_inverse(&self, qt: &[Vec2], pt: &[Vec2]) -> (Vec<Vec2>, Vec<Vec2>) {
        let nb = self.masses.len();
        let total = self.big_m(nb);
        let mut q = vec![[0.0; 2]; nb];
        // Walk the partial centres of mass C_j back from C_nb = q~_0.
        let mut centre = qt[0];
        for j in (1..nb).rev() {
            let c = self.masses[j] / self.big_m(j + 1);
            centre = [centre[0] - c * qt[j][0], centre[1] - c * qt[j][1]];
            q[j] = [qt[j][0] + centre[0], qt[j][1] + centre[1]];
        }
        q[0] = centre;
        let mut p = vec![[0.0; 2]; nb];
        let mut tail = [0.0; 2];
        for j in (0..nb).rev() {
            let c = self.masses[j] / total;
            let own = if j > 0 { pt[j] } else { [0.0; 2] };
            p[j] = [
                own[0] + c * pt[0][0] - self.masses[j] * tail[0],
                own[1] + c * pt[0][1] - self.masses[j] * tail[1],
            ];
            if j > 0 {
                let mj = self.big_m(j);
                tail[0] += pt[j][0] / mj;
                tail[1] += pt[j][1] / mj;
            }
        }
        (q, p)
    }

    /// Newtonian potential `U = sum_{i<j} m_i m_j / |q_i - q_j|` (positive).
    pub fn potential(&self, q: &[Vec2]) -> Result<f64> {
        let mut u = 0.0;
        for j in 0..q.len() {
            for i in 0..j {
                let d = dist(&q[i], &q[j]);
                if d < COLLISION_DISTANCE {
                    return Err(ParabolicError::Collision(d));
                }
                u += self.masses[i] * self.masses[j] / d;
            }
        }
        Ok(u)
    }

    /// `H = sum |p_j|^2 / (2 m_j) - U(q)`.
    pub fn hamiltonian(&self, q: &[Vec2], p: &[Vec2]) -> Result<f64> {
        let t: f64 = p
            .iter()
            .zip(&self.masses)
            .map(|(pj, m)| (pj[0] * pj[0] + pj[1] * pj[1]) / (2.0 * m))
            .sum();
        Ok(t - self.potential(q)?)
    }

    /// Total linear momentum and total angular momentum `sum det(q_j, p_j)`.
    pub fn first_integrals(&self, q: &[Vec2], p: &[Vec2]) -> (Vec2, f64) {
        let mut lin = [0.0; 2];
        let mut ang = 0.0;
        for (qj, pj) in q.iter().zip(p) {
            lin[0] += pj[0];
            lin[1] += pj[1];
            ang += qj[0] * pj[1] - qj[1] * pj[0];
        }
        (lin, ang)
    }

    /// Hamiltonian vector field on the flat state `(q_0, ..., q_{n+1}, p_0, ..., p_{n+1})`.
    pub fn cartesian_field(&self, state: &[f64]) -> Vec<f64> {
        let nb = self.masses.len();
        let mut out = vec![0.0; 4 * nb];
        for j in 0..nb {
            out[2 * j] = state[2 * nb + 2 * j] / self.masses[j];
            out[2 * j + 1] = state[2 * nb + 2 * j + 1] / self.masses[j];
        }
        for j in 0..nb {
            for i in 0..j {
                let dx = state[2 * j] - state[2 * i];
                let dy = state[2 * j + 1] - state[2 * i + 1];
                let r2 = dx * dx + dy * dy;
                let c = self.masses[i] * self.masses[j] / (r2 * r2.sqrt());
                out[2 * nb + 2 * i] += c * dx;
                out[2 * nb + 2 * i + 1] += c * dy;
                out[2 * nb + 2 * j] -= c * dx;
                out[2 * nb + 2 * j + 1] -= c * dy;
            }
        }
        out
    }

    /// Polar Jacobi variables of bodies `1..=n+1` with all angles measured from
    /// the last Jacobi vector, which is placed at absolute angle `theta_last`.
    pub fn reduced_to_cartesian(&self, state: &ReducedState, theta_last: f64) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
        let n = self.n();
        state.check(n)?;
        let nb = n + 2;
        let g_last = self.angular_momentum - state.g.iter().sum::<f64>();
        let mut qt = vec![[0.0; 2]; nb];
        let mut pt = vec![[0.0; 2]; nb];
        for j in 1..nb {
            let (angle, g) = if j <= n {
                (theta_last + state.theta[j - 1], state.g[j - 1])
            } else {
                (theta_last, g_last)
            };
            let r = state.r[j - 1];
            let y = state.y[j - 1];
            let (s, c) = angle.sin_cos();
            qt[j] = [r * c, r * s];
            pt[j] = [y * c - g / r * s, y * s + g / r * c];
        }
        Ok(self.jacobi_inverse(&qt, &pt))
    }

    /// Energy as a function of the reduced variables; independent of the
    /// absolute angle of the last Jacobi vector.
    pub fn reduced_hamiltonian(&self, state: &ReducedState) -> Result<f64> {
        let n = self.n();
        state.check(n)?;
        let g_last = self.angular_momentum - state.g.iter().sum::<f64>();
        let mut kinetic = 0.0;
        for j in 1..=n + 1 {
            let g = if j <= n { state.g[j - 1] } else { g_last };
            let (r, y) = (state.r[j - 1], state.y[j - 1]);
            kinetic += (y * y + g * g / (r * r)) / (2.0 * self.mu(j));
        }
        let (q, _) = self.reduced_to_cartesian(state, 0.0)?;
        Ok(kinetic - self.potential(&q)?)
    }

    /// Splits the potential of a configuration into the inner-cluster part and
    /// the interactions of bodies `n` and `n + 1`.
    pub fn potential_parts(&self, q: &[Vec2]) -> Result<PotentialParts> {
        let n = self.n();
        let nb = n + 2;
        let pair = |i: usize, j: usize| -> Result<f64> {
            let d = dist(&q[i], &q[j]);
            if d < COLLISION_DISTANCE {
                return Err(ParabolicError::Collision(d));
            }
            Ok(self.masses[i] * self.masses[j] / d)
        };
        let mut inner = 0.0;
        for j in 0..n {
            for i in 0..j {
                inner += pair(i, j)?;
            }
        }
        let mut u_n = 0.0;
        for i in 0..n {
            u_n += pair(i, n)?;
        }
        let mut u_next = 0.0;
        for i in 0..=n {
            u_next += pair(i, nb - 1)?;
        }
        let (qt, _) = self.jacobi(q, &vec![[0.0; 2]; nb]);
        let r_n = norm(&qt[n]);
        let r_next = norm(&qt[n + 1]);
        let angle = (qt[n][1].atan2(qt[n][0]) - qt[n + 1][1].atan2(qt[n + 1][0])).rem_euclid(std::f64::consts::TAU);
        let cm = self.cluster_masses();
        let alpha = r_n / r_next;
        let partials = potential::coupling_partials(&cm, alpha, angle)?;
        Ok(PotentialParts {
            inner,
            u_n,
            u_next,
            a_n: r_n * u_n / self.masses[n] - self.big_m(n),
            a_next: r_next * u_next / self.masses[n + 1] - self.big_m(n + 1),
            alpha,
            theta: angle,
            coupling: partials,
        })
    }
}

/// Potential split of [`NBodySystem::potential_parts`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialParts {
    /// Interactions among bodies `0..n`.
    pub inner: f64,
    /// Interactions of body `n` with the inner cluster.
    pub u_n: f64,
    /// Interactions of body `n + 1` with bodies `0..=n`.
    pub u_next: f64,
    /// `r_n U_n / m_n - M_n`.
    pub a_n: f64,
    /// `r_{n+1} U_{n+1} / m_{n+1} - M_{n+1}`; equals `V_0` when `n = 1`.
    pub a_next: f64,
    pub alpha: f64,
    pub theta: f64,
    pub coupling: potential::CouplingPartials,
}

/// Polar Jacobi variables after removing the angle of the last vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    /// `r_1, ..., r_{n+1}`.
    pub r: Vec<f64>,
    /// Radial momenta `y_1, ..., y_{n+1}`.
    pub y: Vec<f64>,
    /// Angles `theta_j - theta_{n+1}`, `j = 1..=n`.
    pub theta: Vec<f64>,
    /// Angular momenta `G_1, ..., G_n`; `G_{n+1}` follows from the total.
    pub g: Vec<f64>,
}

impl ReducedState {
    fn check(&self, n: usize) -> Result<()> {
        if self.r.len() != n + 1 || self.y.len() != n + 1 || self.theta.len() != n || self.g.len() != n {
            return Err(ParabolicError::InvalidInput(format!(
                "reduced state shape does not match n = {n}"
            )));
        }
        if self.r.iter().any(|r| !(*r > 0.0)) {
            return Err(ParabolicError::InvalidInput("radii must be positive".into()));
        }
        Ok(())
    }
}

/// Flattens positions and momenta into the integrator layout.
pub fn flatten(q: &[Vec2], p: &[Vec2]) -> Vec<f64> {
    q.iter().chain(p).flat_map(|v| v.iter().copied()).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(state: &[f64]) -> (Vec<Vec2>, Vec<Vec2>) {
    let nb = state.len() / 4;
    let pick = |k: usize| [state[2 * k], state[2 * k + 1]];
    ((0..nb).map(pick).collect(), (nb..2 * nb).map(pick).collect())
}

fn dist(a: &Vec2, b: &Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn norm(a: &Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate_plain, OdeOptions};
    use proptest::prelude::*;

    fn three(m1: f64, m2: f64) -> NBodySystem {
        NBodySystem::new(vec![1.0, m1, m2], 0.0, Configuration::Collinear).unwrap()
    }

    #[test]
    fn two_body_jacobi_vector_is_the_separation() {
        let sys = NBodySystem {
            masses: vec![1.0, 1.0],
            angular_momentum: 0.0,
            configuration: Configuration::Collinear,
        };
        let (qt, _) = sys.jacobi(&[[0.0, 0.0], [1.0, 0.0]], &[[0.0; 2]; 2]);
        assert_eq!(qt[1], [1.0, 0.0]);
    }

    #[test]
    fn equal_masses_use_the_midpoint() {
        let sys = NBodySystem::new(vec![1.0, 1.0, 1.0], 0.0, Configuration::Collinear).unwrap();
        let q = [[0.3, -1.0], [2.0, 0.5], [-0.7, 4.0]];
        let (qt, _) = sys.jacobi(&q, &[[0.0; 2]; 3]);
        let mid = [(q[0][0] + q[1][0]) / 2.0, (q[0][1] + q[1][1]) / 2.0];
        assert!((qt[2][0] - (q[2][0] - mid[0])).abs() < 1e-15);
        assert!((qt[2][1] - (q[2][1] - mid[1])).abs() < 1e-15);
    }

    #[test]
    fn jacobi_momenta_are_the_dual_transform() {
        let sys = NBodySystem::new(vec![1.0, 0.3, 0.2, 0.05], 0.0, Configuration::Collinear).unwrap();
        let q = [[0.1, 0.2], [1.0, -0.4], [-2.0, 0.3], [0.5, 3.0]];
        let p = [[0.3, -0.1], [0.05, 0.2], [-0.1, 0.0], [0.02, -0.03]];
        let (qt, pt) = sys.jacobi(&q, &p);
        // <q, p> is invariant under q~ = A q, p~ = A^{-T} p.
        let dot = |a: &[Vec2], b: &[Vec2]| a.iter().zip(b).map(|(x, y)| x[0] * y[0] + x[1] * y[1]).sum::<f64>();
        assert!((dot(&q, &p) - dot(&qt, &pt)).abs() < 1e-14);
        let total: Vec2 = [p.iter().map(|v| v[0]).sum(), p.iter().map(|v| v[1]).sum()];
        assert!((pt[0][0] - total[0]).abs() < 1e-15 && (pt[0][1] - total[1]).abs() < 1e-15);
        // Kinetic energy is diagonal once the total momentum vanishes.
        let (q0, p0) = {
            let mut p = p;
            p[0] = [-(p[1][0] + p[2][0] + p[3][0]), -(p[1][1] + p[2][1] + p[3][1])];
            (q, p)
        };
        let (_, pt0) = sys.jacobi(&q0, &p0);
        let t_cart: f64 = p0
            .iter()
            .zip(&sys.masses)
            .map(|(v, m)| (v[0] * v[0] + v[1] * v[1]) / (2.0 * m))
            .sum();
        let t_jac: f64 = (1..4)
            .map(|j| (pt0[j][0].powi(2) + pt0[j][1].powi(2)) / (2.0 * sys.mu(j)))
            .sum();
        assert!((t_cart - t_jac).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn jacobi_round_trip(coords in proptest::collection::vec(-5.0f64..5.0, 16),
                             m in proptest::collection::vec(0.01f64..2.0, 4)) {
            let sys = NBodySystem::new(m, 0.0, Configuration::Collinear).unwrap();
            let q: Vec<Vec2> = (0..4).map(|i| [coords[2 * i], coords[2 * i + 1]]).collect();
            let p: Vec<Vec2> = (4..8).map(|i| [coords[2 * i], coords[2 * i + 1]]).collect();
            let (qt, pt) = sys.jacobi(&q, &p);
            let (q2, p2) = sys.jacobi_inverse(&qt, &pt);
            for j in 0..4 {
                for c in 0..2 {
                    prop_assert!((q2[j][c] - q[j][c]).abs() < 1e-12);
                    prop_assert!((p2[j][c] - p[j][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn circular_kepler_energy() {
        let sys = NBodySystem {
            masses: vec![1.0, 1.0],
            angular_momentum: 0.0,
            configuration: Configuration::Collinear,
        };
        // Separation 1, relative speed sqrt(M) = sqrt(2).
        let v = 2f64.sqrt() / 2.0;
        let q = [[-0.5, 0.0], [0.5, 0.0]];
        let p = [[0.0, -v], [0.0, v]];
        let h = sys.hamiltonian(&q, &p).unwrap();
        let mu = 0.5;
        let total = 2.0;
        // E = -mu M / (2 a) with a = 1.
        assert!((h - (-mu * total / 2.0)).abs() < 1e-15);
        assert!((h - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn static_configuration_has_negative_energy_and_symmetric_zero_momentum() {
        let sys = three(0.5, 0.5);
        let q = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        let p = [[0.0; 2]; 3];
        assert!(sys.hamiltonian(&q, &p).unwrap() < 0.0);
        let p = [[0.0, 0.0], [0.0, 0.3], [0.0, -0.3]];
        let (lin, ang) = sys.first_integrals(&q, &p);
        assert_eq!(lin, [0.0, 0.0]);
        assert!((ang - 0.6).abs() < 1e-15);
        let p = [[0.0, 0.0], [0.0, 0.3], [0.0, 0.3]];
        assert_eq!(sys.first_integrals(&q, &p).1, 0.0);
    }

    #[test]
    fn collisions_are_reported() {
        let sys = three(0.1, 0.1);
        let q = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        assert!(matches!(sys.hamiltonian(&q, &[[0.0; 2]; 3]), Err(ParabolicError::Collision(_))));
    }

    #[test]
    fn nonpositive_masses_are_rejected() {
        assert!(NBodySystem::new(vec![1.0, 0.0, 1e-3], 0.0, Configuration::Collinear).is_err());
        assert!(NBodySystem::new(vec![1.0, 1e-3], 0.0, Configuration::Collinear).is_err());
        assert!(NBodySystem::new(vec![1.0, -1e-3, 1e-3], 0.0, Configuration::Collinear).is_err());
    }

    #[test]
    fn reduced_energy_is_rotation_invariant_and_matches_cartesian() {
        let sys = NBodySystem::new(vec![1.0, 0.2, 0.1, 0.05], 0.7, Configuration::Collinear).unwrap();
        let st = ReducedState {
            r: vec![1.0, 2.5, 6.0],
            y: vec![0.1, -0.05, 0.2],
            theta: vec![0.4, 2.0],
            g: vec![0.15, 0.3],
        };
        let h = sys.reduced_hamiltonian(&st).unwrap();
        let energy = |th: f64| {
            let (q, p) = sys.reduced_to_cartesian(&st, th).unwrap();
            sys.hamiltonian(&q, &p).unwrap()
        };
        assert!((energy(0.0) - h).abs() < 1e-10 * h.abs());
        let d = 1e-5;
        assert!(((energy(1.3 + d) - energy(1.3 - d)) / (2.0 * d)).abs() < 1e-10);
        let (q, p) = sys.reduced_to_cartesian(&st, 0.9).unwrap();
        let (lin, ang) = sys.first_integrals(&q, &p);
        assert!(lin[0].abs() < 1e-15 && lin[1].abs() < 1e-15);
        assert!((ang - 0.7).abs() < 1e-13);
    }

    #[test]
    fn three_body_split_recovers_the_coupling_potential() {
        let sys = three(0.01, 0.02);
        let st = ReducedState {
            r: vec![1.0, 1.3],
            y: vec![0.0, 0.0],
            theta: vec![2.2],
            g: vec![0.0],
        };
        let (q, _) = sys.reduced_to_cartesian(&st, 0.4).unwrap();
        let parts = sys.potential_parts(&q).unwrap();
        assert!((parts.alpha - 1.0 / 1.3).abs() < 1e-14);
        assert!((parts.theta - 2.2).abs() < 1e-13);
        assert!((parts.a_next - parts.coupling.v).abs() < 1e-13);
        assert!(parts.a_n.abs() < 1e-14);
        let total = parts.inner + parts.u_n + parts.u_next;
        assert!((total - sys.potential(&q).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn cartesian_flow_conserves_first_integrals() {
        let sys = three(1e-3, 1e-3);
        let q = [[0.0, 0.0], [1.0, 0.0], [-1.6, 0.3]];
        let p = [[0.0, 0.0], [0.0, 1e-3], [2e-4, -6e-4]];
        let y0 = flatten(&q, &p);
        let opts = OdeOptions {
            rtol: 1e-12,
            atol: 1e-15,
            ..OdeOptions::default()
        };
        let sol = integrate_plain(|_, y| sys.cartesian_field(y), 0.0, &y0, 20.0, &opts).unwrap();
        let (q1, p1) = unflatten(sol.last().1);
        let h0 = sys.hamiltonian(&q, &p).unwrap();
        let h1 = sys.hamiltonian(&q1, &p1).unwrap();
        assert!(((h1 - h0) / h0).abs() < 1e-8);
        let (_, a0) = sys.first_integrals(&q, &p);
        let (_, a1) = sys.first_integrals(&q1, &p1);
        assert!(((a1 - a0) / a0).abs() < 1e-8);
    }
}
