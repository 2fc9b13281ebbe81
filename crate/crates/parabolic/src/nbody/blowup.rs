//! Regularized escape field of the planar three-body problem.
//!
//! Starting from the reduced Hamiltonian in McGehee variables
//! `r_k = 2 alpha_k / x_k^2`, `y_k = beta_k y~_k`, the blow-ups
//!
//! ```text
//! x_2 = s (A + s xi),   y~_1 = s (nu + zeta),   y~_2 = y~_1 (B + s eta),
//! theta_1 = theta0 + s theta,   G_1 = G^0 + g / Gamma
//! ```
//!
//! (with `s = x_1`) turn the escape to infinity into the parabolic point
//! `s = 0`, `zeta = xi = eta = theta = g = 0`. The field is evaluated in
//! closed form with every power of `s` factored out, so it can be expanded on
//! jets at the origin. The constant parts that vanish because of the defining
//! equations of `A`, `B`, `nu`, `G^0` and `theta0` are removed exactly.
//!
//! "Original" coordinates are `(s, zeta, xi, eta, theta, g)`. "Diagonal"
//! coordinates are `(s, eta^, zeta, xi^, chi^, ups^)`, where `(xi^, eta^, chi^, ups^)`
//! are the eigen-coordinates of the `s^3`-linear part of the last four
//! equations; in the collinear chart the first two form the contracting
//! block `x` and the last four the expanding block `y`.

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix4};
use serde::{Deserialize, Serialize};

use super::constants::{central_config_constants, CentralConfigConstants};
use super::potential;
use super::{flatten, Configuration, NBodySystem, ReducedState};
use crate::cones::{ConeSpec, NormKind};
use crate::error::{ParabolicError, Result};
use crate::fourier::Frequency;
use crate::homogeneous::{ClosureTail, HomogeneousSum, PolyTerm};
use crate::jet::{Jet, Scalar};
use crate::parametrization::{Model, SystemKind};

/// Degree of the leading terms of every component.
pub const LEADING_DEGREE: usize = 4;
/// Default degree of the polynomial part of the flow model; the tail starts one degree higher.
pub const DEFAULT_POLY_DEGREE: usize = 8;
/// Coefficients below leading degree must vanish to this tolerance.
const LOW_ORDER_TOL: f64 = 1e-12;
/// Largest allowed distance of each eigenvalue from its zero-mass value.
const EIGEN_GAP: f64 = 0.5;
/// Largest allowed size of the slow eigenvalue.
const SLOW_EIGEN_MAX: f64 = 0.25;

/// Eigen-decomposition of the `s^3`-linear part of the `(xi, eta, theta, g)` equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagonalization {
    /// Linear part, rows and columns ordered `(xi, eta, theta, g)`.
    pub matrix: [[f64; 4]; 4],
    /// Eigenvalues of `xi^, eta^, chi^, ups^` (close to `3, -2, nu, -gamma_2 / (2 nu)`).
    pub eigenvalues: [f64; 4],
    /// Columns are the eigenvectors: `(xi, eta, theta, g) = basis * (xi^, eta^, chi^, ups^)`.
    pub basis: [[f64; 4]; 4],
    pub inverse: [[f64; 4]; 4],
}

impl Diagonalization {
    fn compute(matrix: [[f64; 4]; 4]) -> Result<Self> {
        let m = Matrix4::from_fn(|i, j| matrix[i][j]);
        let eig = m.schur().eigenvalues().ok_or(ParabolicError::MassTooLarge)?;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
        // Descending order: xi^ (~3), chi^ (~1), ups^ (~0), eta^ (~-2).
        let ordered = [ev[0], ev[3], ev[1], ev[2]];
        let nominal = [3.0, -2.0, 1.0, 0.0];
        for (k, (&l, &c)) in ordered.iter().zip(&nominal).enumerate() {
            let bound = if k == 3 { SLOW_EIGEN_MAX } else { EIGEN_GAP };
            if !((l - c).abs() < bound) {
                return Err(ParabolicError::MassTooLarge);
            }
        }
        let mut basis = [[0.0; 4]; 4];
        for (k, &l) in ordered.iter().enumerate() {
            let shifted = DMatrix::from_fn(4, 4, |i, j| m[(i, j)] - if i == j { l } else { 0.0 });
            let svd = shifted.svd(false, true);
            let vt = svd.v_t.ok_or(ParabolicError::MassTooLarge)?;
            let (imin, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
            let v: Vec<f64> = vt.row(imin).iter().copied().collect();
            // xi^ and eta^ are normalized on the xi entry, chi^ and ups^ on the theta entry.
            let pivot = if k < 2 { 0 } else { 2 };
            if v[pivot].abs() < 1e-8 {
                return Err(ParabolicError::MassTooLarge);
            }
            for i in 0..4 {
                basis[i][k] = v[i] / v[pivot];
            }
        }
        let b = Matrix4::from_fn(|i, j| basis[i][j]);
        let inv = b.try_inverse().ok_or(ParabolicError::MassTooLarge)?;
        Ok(Self {
            matrix,
            eigenvalues: ordered,
            basis,
            inverse: std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)])),
        })
    }
}

/// Removed constant parts, evaluated at the origin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct Offsets {
    w1: f64,
    q: f64,
    angle: f64,
    torque: f64,
}

/// Constant pieces of the field before the offsets are removed.
struct Pieces<S> {
    w1: S,
    q: S,
    angle: S,
    torque: S,
}

/// Exact regularized field of the three-body escape (`n = 1`).
#[derive(Debug, Clone)]
pub struct BlownUpField {
    pub system: NBodySystem,
    pub constants: CentralConfigConstants,
    pub diagonalization: Diagonalization,
    offsets: Offsets,
}

impl BlownUpField {
    /// Builds the field for the configuration branch of `system`.
    pub fn new(system: &NBodySystem) -> Result<Self> {
        if system.n() != 1 {
            return Err(ParabolicError::BackendUnsupported(format!(
                "the regularized field is implemented for three bodies, got n = {}",
                system.n()
            )));
        }
        let constants = central_config_constants(system)?;
        let mut field = Self {
            system: system.clone(),
            constants,
            diagonalization: Diagonalization {
                matrix: [[0.0; 4]; 4],
                eigenvalues: [0.0; 4],
                basis: [[0.0; 4]; 4],
                inverse: [[0.0; 4]; 4],
            },
            offsets: Offsets::default(),
        };
        let p = field.pieces(&[0.0; 6]);
        field.offsets = Offsets {
            w1: p.w1,
            q: p.q,
            angle: p.angle,
            torque: p.torque,
        };
        field.diagonalization = Diagonalization::compute(field.linear_block())?;
        Ok(field)
    }

    fn pieces<S: Scalar>(&self, z: &[S]) -> Pieces<S> {
        let c = &self.constants;
        let cm = &c.masses;
        let (s, xi, eta, th, g) = (&z[0], &z[2], &z[3], &z[4], &z[5]);
        let ratio = c.alpha_n / c.alpha_next;
        let a_s = s.clone() * xi.clone() + c.a;
        let b_s = s.clone() * eta.clone() + c.b;
        let g1 = g.clone() / c.gamma_n + c.g0;
        let g2 = -g1.clone() + c.angular_momentum;
        let theta1 = s.clone() * th.clone() + c.theta0;
        let a2 = a_s.clone() * a_s.clone();
        let a4 = a2.clone() * a2.clone();
        let alpha = a2.clone() * ratio;
        let v0 = potential::coupling(cm, &alpha, &theta1);
        let va = potential::coupling_alpha_scaled(cm, &alpha, &theta1);
        let vt = potential::coupling_theta_scaled(cm, &alpha, &theta1);
        let s2 = s.clone() * s.clone();
        let mu1 = c.mu_n;
        let mu2 = c.mu_next;
        let (al1, al2, be1, be2) = (c.alpha_n, c.alpha_next, c.beta_n, c.beta_next);
        let nu_coef = cm.m_next * (cm.outer() / cm.total()).powf(2.0 / 3.0) / cm.inner;
        let w1 = g1.clone() * g1.clone() * s2.clone() / (8.0 * al1.powi(3) * be1 * mu1) + va.clone() * a4.clone() * nu_coef
            - 1.0;
        let w2 = -(v0 / cm.outer()) - va * a2.clone() * (ratio * cm.m_n / cm.outer())
            + g2.clone() * g2.clone() * s2 * a2.clone() / (8.0 * al2.powi(3) * be2 * mu2)
            - 1.0;
        let q = a4.clone() * w2 - b_s * w1.clone();
        let angle = g1 / (4.0 * al1 * al1 * mu1) - g2 * a4 / (4.0 * al2 * al2 * mu2);
        let torque = vt * a2 * (c.gamma_n * cm.m_next * cm.m_n / (2.0 * al2));
        Pieces { w1, q, angle, torque }
    }

    /// Time derivative of the original coordinates.
    pub fn field<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let c = &self.constants;
        let o = &self.offsets;
        let p = self.pieces(z);
        let (s, zeta, xi, eta, th) = (&z[0], &z[1], &z[2], &z[3], &z[4]);
        let s2 = s.clone() * s.clone();
        let s3 = s2.clone() * s.clone();
        let y1 = zeta.clone() + c.nu;
        let (a, b) = (c.a, c.b);
        // (A + s xi)^3 (B + s eta) - A, divided by s, using A^3 B = A.
        let p1 = xi.clone() * (3.0 * a * a * b - 2.0)
            + eta.clone() * a.powi(3)
            + s.clone() * (xi.clone() * xi.clone() * (3.0 * a * b) + xi.clone() * eta.clone() * (3.0 * a * a))
            + s2.clone() * (xi.clone() * xi.clone() * xi.clone() * b + xi.clone() * xi.clone() * eta.clone() * (3.0 * a))
            + s3.clone() * xi.clone() * xi.clone() * xi.clone() * eta.clone();
        let ds = -(s3.clone() * s.clone() * y1.clone());
        let dzeta = s3.clone() * (p.w1 - o.w1 + zeta.clone() * (2.0 * c.nu) + zeta.clone() * zeta.clone());
        let dxi = -(s3.clone() * y1.clone() * p1);
        let deta = s2.clone() * (p.q - o.q) / y1.clone() + s3.clone() * y1.clone() * eta.clone();
        let dth = s3.clone() * (p.angle - o.angle) + s3 * y1 * th.clone();
        let dg = s2 * (p.torque - o.torque);
        vec![ds, dzeta, dxi, deta, dth, dg]
    }

    /// Derivatives with respect to `tau`, `d tau = s^3 dt`, for `s > 0`.
    pub fn field_tau(&self, z: &[f64]) -> Vec<f64> {
        let s3 = z[0].powi(3);
        self.field(z).into_iter().map(|v| v / s3).collect()
    }

    /// Coefficients of `s^3 z_j` in the last four equations.
    fn linear_block(&self) -> [[f64; 4]; 4] {
        let vars: Vec<Jet> = (0..6).map(|i| Jet::variable(6, LEADING_DEGREE, i, 0.0)).collect();
        let out = self.field(&vars);
        std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let mut e = [0u32; 6];
                e[0] = 3;
                e[j + 2] = 1;
                out[i + 2].coeff(&e)
            })
        })
    }

    /// Original coordinates from diagonal ones.
    pub fn to_original<S: Scalar>(&self, d: &[S]) -> Vec<S> {
        let v = &self.diagonalization.basis;
        let hat = [&d[3], &d[1], &d[4], &d[5]];
        let mut out = vec![d[0].clone(), d[2].clone()];
        for row in v {
            let mut acc = hat[0].clone() * row[0];
            for k in 1..4 {
                acc = acc + hat[k].clone() * row[k];
            }
            out.push(acc);
        }
        out
    }

    /// Diagonal coordinates from original ones.
    pub fn to_diagonal(&self, z: &[f64]) -> Vec<f64> {
        let w = &self.diagonalization.inverse;
        let hat: Vec<f64> = (0..4).map(|i| (0..4).map(|k| w[i][k] * z[2 + k]).sum()).collect();
        vec![z[0], hat[1], z[1], hat[0], hat[2], hat[3]]
    }

    /// The field in diagonal coordinates.
    pub fn field_diagonal<S: Scalar>(&self, d: &[S]) -> Vec<S> {
        let z = self.to_original(d);
        let dz = self.field(&z);
        let w = &self.diagonalization.inverse;
        let hat: Vec<S> = (0..4)
            .map(|i| {
                let mut acc = dz[2].clone() * w[i][0];
                for k in 1..4 {
                    acc = acc + dz[2 + k].clone() * w[i][k];
                }
                acc
            })
            .collect();
        vec![
            dz[0].clone(),
            hat[1].clone(),
            dz[1].clone(),
            hat[0].clone(),
            hat[2].clone(),
            hat[3].clone(),
        ]
    }

    /// Reduced polar Jacobi variables of a state in original coordinates.
    pub fn to_reduced(&self, z: &[f64]) -> ReducedState {
        let c = &self.constants;
        let s = z[0];
        let x2 = s * (c.a + s * z[2]);
        let yt1 = s * (c.nu + z[1]);
        let yt2 = yt1 * (c.b + s * z[3]);
        ReducedState {
            r: vec![2.0 * c.alpha_n / (s * s), 2.0 * c.alpha_next / (x2 * x2)],
            y: vec![c.beta_n * yt1, c.beta_next * yt2],
            theta: vec![c.theta0 + s * z[4]],
            g: vec![c.g0 + z[5] / c.gamma_n],
        }
    }

    /// Cartesian positions and momenta (flattened) of a state in original
    /// coordinates, with the last Jacobi vector on the positive horizontal axis.
    pub fn to_cartesian(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.to_cartesian_at(z, 0.0)
    }

    /// As [`BlownUpField::to_cartesian`] with the last Jacobi vector at absolute angle `phi`.
    pub fn to_cartesian_at(&self, z: &[f64], phi: f64) -> Result<Vec<f64>> {
        let (q, p) = self.system.reduced_to_cartesian(&self.to_reduced(z), phi)?;
        Ok(flatten(&q, &p))
    }

    /// Angular velocity of the last Jacobi vector, `G_last / (mu r^2)`.
    pub fn reference_rate<S: Scalar>(&self, z: &[S]) -> S {
        let c = &self.constants;
        let s = &z[0];
        let a_s = s.clone() * z[2].clone() + c.a;
        let a2 = a_s.clone() * a_s;
        let s2 = s.clone() * s.clone();
        let g_last = -(z[5].clone() / c.gamma_n + c.g0) + c.angular_momentum;
        g_last * s2.clone() * s2 * a2.clone() * a2 / (4.0 * c.alpha_next * c.alpha_next * c.mu_next)
    }

    /// Relative mismatch between `D Phi(z) . field(z)` (with `D Phi` by
    /// Richardson-extrapolated central differences of the map to Cartesian
    /// coordinates, plus the rigid rotation of the reference direction) and the
    /// Cartesian Hamiltonian field at `Phi(z)`.
    pub fn pushforward_defect(&self, z: &[f64], h: f64) -> Result<f64> {
        let dz = self.field(z);
        let image = self.to_cartesian(z)?;
        let directional = |step: f64| -> Result<Vec<f64>> {
            let plus: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + step * b).collect();
            let minus: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a - step * b).collect();
            let (fp, fm) = (self.to_cartesian(&plus)?, self.to_cartesian(&minus)?);
            Ok(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect())
        };
        let scale = dz.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let step = h / scale;
        let d1 = directional(step)?;
        let d2 = directional(step / 2.0)?;
        let mut chain: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| (4.0 * b - a) / 3.0).collect();
        // The chart pins the last Jacobi vector; physically it turns at d theta_last / dt = G_last / (mu r^2).
        let omega = self.reference_rate(z);
        for (pair, base) in chain.chunks_mut(2).zip(image.chunks(2)) {
            pair[0] -= omega * base[1];
            pair[1] += omega * base[0];
        }
        let exact = self.system.cartesian_field(&image);
        let num: f64 = chain.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
        Ok(num / den)
    }

    /// Polynomial-plus-tail flow model in diagonal coordinates (collinear chart).
    pub fn collinear_model(self: &Arc<Self>, poly_degree: usize) -> Result<Model> {
        if self.constants.configuration != Configuration::Collinear {
            return Err(ParabolicError::BackendUnsupported(
                "the equilateral chart has leading degree 3 ell + 1 and is not expanded".into(),
            ));
        }
        if poly_degree < LEADING_DEGREE {
            return Err(ParabolicError::InvalidInput(format!(
                "polynomial degree {poly_degree} is below the leading degree {LEADING_DEGREE}"
            )));
        }
        let vars: Vec<Jet> = (0..6).map(|i| Jet::variable(6, poly_degree, i, 0.0)).collect();
        let out = self.field_diagonal(&vars);
        for (comp, jet) in out.iter().enumerate() {
            for d in 0..LEADING_DEGREE {
                let worst = jet.homogeneous_part(d).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if worst > LOW_ORDER_TOL {
                    return Err(ParabolicError::OrderViolation {
                        requested: LEADING_DEGREE,
                        found: d,
                    });
                }
                let _ = comp;
            }
        }
        let polys = |range: std::ops::Range<usize>| -> Vec<PolyTerm> {
            (LEADING_DEGREE..=poly_degree)
                .map(|deg| PolyTerm::from_jets(&out[range.clone()], deg))
                .collect()
        };
        let f_polys = Arc::new(polys(0..2));
        let g_polys = Arc::new(polys(2..6));
        let mut f = HomogeneousSum::new(6, 0, 2, 1);
        let mut g = HomogeneousSum::new(6, 0, 4, 1);
        let h = HomogeneousSum::new(6, 0, 0, 1);
        for p in f_polys.iter() {
            f.add_poly(p.clone())?;
        }
        for p in g_polys.iter() {
            g.add_poly(p.clone())?;
        }
        f.set_tail(Arc::new(self.tail(poly_degree + 1, 0..2, f_polys)))?;
        g.set_tail(Arc::new(self.tail(poly_degree + 1, 2..6, g_polys)))?;
        Model::new(
            SystemKind::Flow,
            2,
            4,
            0,
            (LEADING_DEGREE, LEADING_DEGREE, LEADING_DEGREE),
            Frequency::new(Vec::new()),
            f,
            g,
            h,
        )
    }

    fn tail(self: &Arc<Self>, order: usize, range: std::ops::Range<usize>, polys: Arc<Vec<PolyTerm>>) -> ClosureTail {
        let (fa, pa, ra) = (self.clone(), polys.clone(), range.clone());
        let (fb, pb, rb) = (self.clone(), polys, range);
        ClosureTail::new(
            order,
            move |u, _| remainder(&fa.field_diagonal(u)[ra.clone()], &pa, u),
            move |u, _| {
                let mut r = remainder(&fb.field_diagonal(u)[rb.clone()], &pb, u);
                if u.iter().all(|j| j.value() == 0.0) {
                    for j in r.iter_mut() {
                        truncate_below(j, order);
                    }
                }
                r
            },
        )
    }

    /// Leading-order cone constants of the chart on the cone
    /// `{0 < x_1 < delta, |x_rest| <= kappa x_1}`, Euclidean norm.
    ///
    /// `ell` is the exponent of `x_n = x^ell` in the equilateral chart and is ignored
    /// in the collinear one.
    pub fn cone_constants_closed_form(&self, kappa: f64, ell: usize) -> Result<ClosedFormConstants> {
        let c = &self.constants;
        let ev = &self.diagonalization.eigenvalues;
        let (x_rates, y_rates, ell) = match c.configuration {
            Configuration::Collinear => (vec![c.nu, -ev[1]], vec![2.0 * c.nu, ev[0], ev[2], ev[3]], 1),
            Configuration::Equilateral => {
                if c.gamma2 <= 0.0 || -ev[3] <= 0.0 {
                    return Err(ParabolicError::NoValidEll(c.gamma2));
                }
                if ell == 0 || c.nu / ell as f64 >= -ev[3] {
                    return Err(ParabolicError::NoValidEll(c.gamma2));
                }
                (vec![c.nu / ell as f64, -ev[1], -ev[3]], vec![2.0 * c.nu, ev[0], ev[2]], ell)
            }
        };
        Ok(ClosedFormConstants::evaluate(&x_rates, &y_rates, 3 * ell, kappa))
    }

    /// Smallest `ell` with `nu / ell < -lambda_slow` (equilateral chart).
    pub fn minimal_ell(&self) -> Result<usize> {
        let slow = -self.diagonalization.eigenvalues[3];
        if self.constants.configuration != Configuration::Equilateral || slow <= 0.0 {
            return Err(ParabolicError::NoValidEll(self.constants.gamma2));
        }
        Ok((self.constants.nu / slow).floor() as usize + 1)
    }

    /// Cone `{s > 0, |eta^| <= kappa s, |z| < delta}` of the collinear chart.
    pub fn collinear_cone(kappa: f64, delta: f64) -> ConeSpec {
        ConeSpec::polyhedral(vec![vec![kappa, -1.0], vec![kappa, 1.0]], vec![1.0, 0.0], kappa, delta)
            .with_norm(NormKind::Euclidean)
    }
}

fn remainder<S: Scalar>(exact: &[S], polys: &[PolyTerm], u: &[S]) -> Vec<S> {
    let mut out: Vec<S> = exact.to_vec();
    for p in polys {
        for (o, v) in out.iter_mut().zip(p.eval(u)) {
            *o = o.clone() - v;
        }
    }
    out
}

fn truncate_below(j: &mut Jet, order: usize) {
    let cut = (0..order.min(j.order() + 1)).map(|d| j.homogeneous_part(d).len()).sum::<usize>();
    for c in j.coeffs.iter_mut().take(cut) {
        *c = 0.0;
    }
}

/// Closed-form leading-order constants of a diagonal field `x_1^p (S x, U y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormConstants {
    /// Contraction rates `-S` of the `x` block.
    pub x_rates: Vec<f64>,
    /// Expansion rates `U` of the `y` block.
    pub y_rates: Vec<f64>,
    /// Order `N = p + 1`.
    pub order: usize,
    pub kappa: f64,
    pub a_f: f64,
    pub b_f: f64,
    pub big_a_f: f64,
    pub b_g: f64,
    pub a_v: f64,
}

/// Points per axis of the cone section used to take the extrema.
const SECTION_POINTS: usize = 201;

impl ClosedFormConstants {
    /// Extrema of the leading-order quotients over the cone section.
    pub fn evaluate(x_rates: &[f64], y_rates: &[f64], p: usize, kappa: f64) -> Self {
        let nx = x_rates.len();
        let nn = p + 1;
        let dirs = section_directions(nx - 1, kappa);
        let (mut a_f, mut b_f, mut big_a_f) = (f64::INFINITY, 0.0f64, f64::INFINITY);
        for c in &dirs {
            let rho2: f64 = c.iter().map(|v| v * v).sum();
            let rho = rho2.sqrt();
            let lin: f64 = c.iter().zip(x_rates).map(|(v, l)| l * v * v).sum();
            a_f = a_f.min(lin / rho.powi(nn as i32 + 1));
            let sq: f64 = c.iter().zip(x_rates).map(|(v, l)| (l * v).powi(2)).sum();
            b_f = b_f.max(sq.sqrt() / rho.powi(nn as i32));
            let d = DMatrix::from_fn(nx, nx, |i, j| {
                let diag = if i == j { -x_rates[i] } else { 0.0 };
                let col = if j == 0 { -(p as f64) * x_rates[i] * c[i] } else { 0.0 };
                diag + col
            });
            let sym = (&d + d.transpose()) * 0.5;
            let top = sym.symmetric_eigenvalues().max();
            big_a_f = big_a_f.min(-top / rho.powi(p as i32));
        }
        let rho_max = (1.0 + kappa * kappa).sqrt();
        let u_min = y_rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let b_g = if u_min > 0.0 {
            u_min / rho_max.powi(p as i32)
        } else {
            u_min
        };
        let rest_min = x_rates[1..].iter().cloned().fold(f64::INFINITY, f64::min);
        let a_v = (kappa * (rest_min - x_rates[0]) / rho_max.powi(nn as i32 + 1))
            .min(x_rates[0] / rho_max.powi(nn as i32));
        Self {
            x_rates: x_rates.to_vec(),
            y_rates: y_rates.to_vec(),
            order: nn,
            kappa,
            a_f,
            b_f,
            big_a_f,
            b_g,
            a_v,
        }
    }
}

/// Directions `(1, t)` with `|t| <= kappa`, `t` of dimension `k`.
fn section_directions(k: usize, kappa: f64) -> Vec<Vec<f64>> {
    let grid: Vec<f64> = (0..SECTION_POINTS)
        .map(|i| -kappa + 2.0 * kappa * i as f64 / (SECTION_POINTS - 1) as f64)
        .collect();
    let mut pts: Vec<Vec<f64>> = vec![vec![1.0]];
    for _ in 0..k {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                grid.iter().map(move |&t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    pts.retain(|p| p[1..].iter().map(|v| v * v).sum::<f64>() <= kappa * kappa * (1.0 + 1e-12));
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cones::estimate_constants;

    fn field(m: f64, config: Configuration) -> BlownUpField {
        BlownUpField::new(&NBodySystem::new(vec![1.0, m, m], 0.0, config).unwrap()).unwrap()
    }

    #[test]
    fn origin_is_an_equilibrium_with_the_expected_leading_terms() {
        let f = field(1e-3, Configuration::Collinear);
        let vars: Vec<Jet> = (0..6).map(|i| Jet::variable(6, 5, i, 0.0)).collect();
        let out = f.field(&vars);
        for jet in &out {
            for d in 0..LEADING_DEGREE {
                assert!(jet.homogeneous_part(d).iter().all(|v| v.abs() < 1e-14));
            }
        }
        assert!((out[0].coeff(&[4, 0, 0, 0, 0, 0]) + f.constants.nu).abs() < 1e-14);
        assert!((out[1].coeff(&[3, 1, 0, 0, 0, 0]) - 2.0 * f.constants.nu).abs() < 1e-12);
    }

    #[test]
    fn linear_block_has_the_expected_pattern() {
        let f = field(1e-3, Configuration::Collinear);
        let m = f.diagonalization.matrix;
        let expect = [[-1.0, -1.0, 0.0, 0.0], [-4.0, 2.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.5]];
        for i in 0..3 {
            for j in 0..4 {
                assert!((m[i][j] - expect[i][j]).abs() < 2e-2, "entry ({i}, {j}) = {}", m[i][j]);
            }
        }
        let c = &f.constants;
        assert!((m[3][0] - c.gamma1).abs() < 1e-10 * c.gamma1.abs().max(1e-3));
        assert!((m[3][2] - c.gamma2).abs() < 1e-10 * c.gamma2.abs());
        let ev = f.diagonalization.eigenvalues;
        for (l, e) in ev.iter().zip([3.0, -2.0, 1.0, 0.0]) {
            assert!((l - e).abs() < 2e-2);
        }
        assert!(ev[3] > 0.0);
        assert!(((ev[3] + c.gamma2 / 2.0) / c.gamma2).abs() < 0.05);
    }

    #[test]
    fn diagonal_coordinates_round_trip_and_decouple() {
        let f = field(1e-3, Configuration::Collinear);
        let z = [0.05, 0.01, -0.02, 0.03, 0.015, -0.01];
        let d = f.to_diagonal(&z);
        let back = f.to_original(&d);
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
        let vars: Vec<Jet> = (0..6).map(|i| Jet::variable(6, 4, i, 0.0)).collect();
        let out = f.field_diagonal(&vars);
        for (i, row) in [(3usize, 3usize), (1, 1), (4, 4), (5, 5)].iter().enumerate() {
            let _ = i;
            for j in 1..6 {
                let mut e = [0u32; 6];
                e[0] = 3;
                e[j] = 1;
                let v = out[row.0].coeff(&e);
                if j != row.1 {
                    assert!(v.abs() < 1e-12, "row {} col {j}: {v}", row.0);
                }
            }
        }
    }

    #[test]
    fn homothetic_escape_is_invariant() {
        let f = field(1e-3, Configuration::Collinear);
        let z = [0.07, 0.0, 0.0, 0.0, 0.0, 0.0];
        let dz = f.field(&z);
        assert!((dz[0] + f.constants.nu * 0.07f64.powi(4)).abs() < 1e-18);
        assert!(dz[1..].iter().all(|v| v.abs() < 1e-18));
    }

    #[test]
    fn pushforward_matches_the_cartesian_field() {
        for config in [Configuration::Collinear, Configuration::Equilateral] {
            let f = field(1e-3, config);
            for z in [
                [0.1, 0.02, -0.03, 0.01, 0.05, -0.02],
                [0.05, -0.01, 0.04, -0.02, -0.03, 0.01],
            ] {
                let defect = f.pushforward_defect(&z, 1e-4).unwrap();
                assert!(defect < 1e-6, "{config:?}: {defect:.3e}");
            }
        }
    }

    #[test]
    fn mcgehee_form_coefficients() {
        // The polar-to-McGehee change has Jacobian determinant -4 alpha beta / x^3
        // in each (x_k, y~_k) pair; checked through the full chain to Cartesian.
        let f = field(1e-3, Configuration::Collinear);
        let sys = &f.system;
        let c = &f.constants;
        let chart = |v: &[f64]| -> Vec<f64> {
            // v = (x1, y~1, x2, y~2, theta1, G1, theta2, G2), absolute angles.
            let st = ReducedState {
                r: vec![2.0 * c.alpha_n / (v[0] * v[0]), 2.0 * c.alpha_next / (v[2] * v[2])],
                y: vec![c.beta_n * v[1], c.beta_next * v[3]],
                theta: vec![v[4] - v[6]],
                g: vec![v[5]],
            };
            let mut s = sys.clone();
            s.angular_momentum = v[5] + v[7];
            let (q, p) = s.reduced_to_cartesian(&st, v[6]).unwrap();
            flatten(&q, &p)
        };
        let v0 = [0.3, 0.2, 0.31, 0.25, 2.9, 0.01, 0.4, -0.02];
        let h = 1e-6;
        let jac: Vec<Vec<f64>> = (0..8)
            .map(|k| {
                let mut p = v0;
                let mut m = v0;
                p[k] += h;
                m[k] -= h;
                let (fp, fm) = (chart(&p), chart(&m));
                fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect();
        let half = 6;
        let omega = |a: &[f64], b: &[f64]| -> f64 {
            (0..half).map(|i| a[i] * b[half + i] - a[half + i] * b[i]).sum()
        };
        let expect = |i: usize, j: usize| -> f64 {
            let pairs = [(0, 1, -4.0 * c.alpha_n * c.beta_n / v0[0].powi(3)), (2, 3, -4.0 * c.alpha_next * c.beta_next / v0[2].powi(3)), (4, 5, 1.0), (6, 7, 1.0)];
            for &(a, b, w) in &pairs {
                if (i, j) == (a, b) {
                    return w;
                }
                if (i, j) == (b, a) {
                    return -w;
                }
            }
            0.0
        };
        for i in 0..8 {
            for j in 0..8 {
                let got = omega(&jac[i], &jac[j]);
                let want = expect(i, j);
                let scale = want.abs().max(1.0);
                assert!((got - want).abs() < 1e-6 * scale, "({i}, {j}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn collinear_model_builds_with_exact_leading_parts() {
        let f = Arc::new(field(1e-3, Configuration::Collinear));
        let model = f.collinear_model(6).unwrap();
        let x = [0.03, 0.002];
        let fb = crate::cones::LeadingParts::fbar_n(&model, &x);
        let nu = f.constants.nu;
        assert!((fb[0] + nu * x[0].powi(4)).abs() < 1e-18);
        assert!((fb[1] - f.diagonalization.eigenvalues[1] * x[0].powi(3) * x[1]).abs() < 1e-18);
        let z = [0.03, 0.002, 0.001, -0.002, 0.0015, 0.003];
        let (fxy, _) = model.field(&z, &[]);
        let exact = f.field_diagonal(&z);
        for (a, b) in fxy.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-17);
        }
    }

    #[test]
    fn closed_form_constants_agree_with_sampling() {
        let f = Arc::new(field(1e-3, Configuration::Collinear));
        let kappa = 0.01;
        let closed = f.cone_constants_closed_form(kappa, 1).unwrap();
        let model = f.collinear_model(5).unwrap();
        let cone = BlownUpField::collinear_cone(kappa, 1e-2).with_density(9);
        let est = estimate_constants(&model, &cone).unwrap();
        let check = |name: &str, sampled: f64, err: f64, exact: f64| {
            let tol = err + 2e-2 * exact.abs().max(1e-3);
            assert!((sampled - exact).abs() < tol, "{name}: sampled {sampled} vs closed {exact}");
        };
        check("a_f", est.a_f.value, est.a_f.error, closed.a_f);
        check("b_f", est.b_f.value, est.b_f.error, closed.b_f);
        check("A_f", est.big_a_f.value, est.big_a_f.error, closed.big_a_f);
        check("B_g", est.b_g.value, est.b_g.error, closed.b_g);
        let gamma2 = f.constants.gamma2;
        assert!(closed.b_g > 0.0 && (closed.b_g + gamma2 / 2.0).abs() < 0.05 * gamma2.abs());
        assert!(closed.a_f > 0.0 && closed.a_v > 0.0);
        let tight = f.cone_constants_closed_form(1e-6, 1).unwrap();
        assert!((tight.a_f - f.constants.nu).abs() < 1e-9);
    }

    #[test]
    fn equilateral_chart_needs_a_large_ell() {
        let f = field(1e-3, Configuration::Equilateral);
        let ell = f.minimal_ell().unwrap();
        assert!(ell > 10);
        assert!(matches!(
            f.cone_constants_closed_form(0.01, ell - 1),
            Err(ParabolicError::NoValidEll(_))
        ));
        let c = f.cone_constants_closed_form(0.01, ell).unwrap();
        assert!(c.a_f > 0.0 && c.b_g > 0.0);
        assert!((c.b_g - 1.0).abs() < 0.1);
        assert!(c.a_v > 0.0);
        let col = field(1e-3, Configuration::Collinear);
        assert!(matches!(col.minimal_ell(), Err(ParabolicError::NoValidEll(_))));
    }
}
