//! First-order linear PDE `Dh(u) p(u) - Q(u) h(u) = w(u)` with homogeneous data.
//!
//! The unique homogeneous solution is `h(u) = -int_0^inf Psi(t; u)^{-1} w(phi(t; u)) dt`,
//! where `phi` is the flow of `u' = p(u)` and `Psi` solves `z' = Q(phi) z`,
//! `Psi(0) = Id`. The integral is evaluated in the time `tau` with
//! `dt = dtau / |phi|^{N-1}`, in which `|phi|` decays exponentially, and closed
//! with an analytic tail once `|phi|` is small.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cones::ConeSpec;
use crate::error::{ParabolicError, Result};
use crate::fourier::Block;
use crate::homogeneous::{HomogeneousTerm, PolyTerm, RayTerm, Section};
use crate::jet::Jet;
use crate::ode::{integrate, integrate_plain, OdeOptions, Solution};

/// Default absolute quadrature tolerance at the section nodes.
pub const DEFAULT_QUAD_TOL: f64 = 1e-9;
/// The quadrature stops once `|phi|` has decayed below this fraction of its start.
const RADIUS_CUTOFF: f64 = 1e-8;
/// Perturbation size used for the limiting quotients defining the constants.
const QUOTIENT_EPS: f64 = 1e-7;
/// Relative residual accepted from the polynomial least-squares solve.
const POLY_RESIDUAL_TOL: f64 = 1e-9;

/// Data of the homogeneous PDE.
#[derive(Debug, Clone)]
pub struct PdeProblem {
    /// Vector field `p`, homogeneous of degree `N`, target dimension `n`.
    pub p: HomogeneousTerm,
    /// Matrix `Q` (row-major, `k x k`), homogeneous of degree `N - 1`.
    pub q: HomogeneousTerm,
    /// Right-hand side, homogeneous of degree `m + N`, target dimension `k`.
    pub w: HomogeneousTerm,
    pub cone: ConeSpec,
}

/// `a_p`, `b_p`, `A_p`, `B_Q` on the sampled cone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeConstants {
    pub a_p: f64,
    pub b_p: f64,
    pub big_a_p: f64,
    pub b_q: f64,
}

/// How [`solve_pde`] represents its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeBackend {
    /// Polynomial least squares when all data are POLY, quadrature otherwise.
    Auto,
    Quadrature,
}

#[derive(Debug, Clone)]
pub struct PdeOptions {
    pub backend: PdeBackend,
    pub tol: f64,
    /// Section for RAY output; defaults to the cone's section.
    pub section: Option<Section>,
}

impl Default for PdeOptions {
    fn default() -> Self {
        Self {
            backend: PdeBackend::Auto,
            tol: DEFAULT_QUAD_TOL,
            section: None,
        }
    }
}

impl PdeProblem {
    pub fn new(p: HomogeneousTerm, q: HomogeneousTerm, w: HomogeneousTerm, cone: ConeSpec) -> Result<Self> {
        let nn = p.degree();
        if nn < 2 {
            return Err(ParabolicError::InvalidInput(format!("degree of p must be at least 2, got {nn}")));
        }
        if q.degree() != nn - 1 {
            return Err(ParabolicError::InvalidInput(format!(
                "Q has degree {}, expected {}",
                q.degree(),
                nn - 1
            )));
        }
        if w.degree() < nn {
            return Err(ParabolicError::InvalidInput(format!(
                "w has degree {}, expected at least {nn}",
                w.degree()
            )));
        }
        let k = w.target_dim();
        if q.target_dim() != k * k {
            return Err(ParabolicError::InvalidInput("Q must be k x k with k the target of w".into()));
        }
        if p.target_dim() != cone.n {
            return Err(ParabolicError::InvalidInput("p must map the cone's space to itself".into()));
        }
        Ok(Self { p, q, w, cone })
    }

    pub fn order(&self) -> usize {
        self.p.degree()
    }

    /// `m` such that `w` has degree `m + N` and `h` has degree `m + 1`.
    pub fn m(&self) -> usize {
        self.w.degree() - self.order()
    }

    pub fn target_dim(&self) -> usize {
        self.w.target_dim()
    }

    fn q_matrix(&self, u: &[f64]) -> DMatrix<f64> {
        let k = self.target_dim();
        DMatrix::from_row_slice(k, k, &self.q.eval(u))
    }

    /// Sup/inf quotients over the section directions, taken in the small-radius limit.
    pub fn constants(&self) -> Result<PdeConstants> {
        let nrm = self.cone.norm;
        let dirs = self.cone.sample_directions(2 * self.cone.sample_density.max(2) + 1);
        if dirs.is_empty() {
            return Err(ParabolicError::EmptyCone);
        }
        let n = self.cone.n;
        let k = self.target_dim();
        let eps = QUOTIENT_EPS;
        let vals: Vec<[f64; 4]> = dirs
            .iter()
            .map(|e| {
                let r = nrm.vector(e);
                let e: Vec<f64> = e.iter().map(|v| v / r).collect();
                let pe = self.p.eval(&e);
                let moved: Vec<f64> = e.iter().zip(&pe).map(|(a, b)| a + eps * b).collect();
                let qa = (nrm.vector(&moved) - 1.0) / eps;
                let qb = nrm.vector(&pe);
                let mut dp = DMatrix::<f64>::zeros(n, n);
                let h = 1e-6;
                for j in 0..n {
                    let mut up = e.clone();
                    let mut um = e.clone();
                    up[j] += h;
                    um[j] -= h;
                    let a = self.p.eval(&up);
                    let b = self.p.eval(&um);
                    for i in 0..n {
                        dp[(i, j)] = (a[i] - b[i]) / (2.0 * h);
                    }
                }
                let qbig_a = (nrm.matrix(&(DMatrix::identity(n, n) + dp * eps)) - 1.0) / eps;
                let qq = (nrm.matrix(&(DMatrix::identity(k, k) - self.q_matrix(&e) * eps)) - 1.0) / eps;
                [qa, qb, qbig_a, qq]
            })
            .collect();
        let sup = |i: usize| vals.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max);
        Ok(PdeConstants {
            a_p: -sup(0),
            b_p: sup(1),
            big_a_p: -sup(2),
            b_q: -sup(3),
        })
    }

    /// `m + 1 + B_Q / a_p`, which must be positive for the integral to converge.
    pub fn decay_exponent(&self, c: &PdeConstants) -> f64 {
        self.m() as f64 + 1.0 + c.b_q / c.a_p
    }
}

/// Trajectory of `u' = p(u)` from `u0`, stopped at `t_max` or once `|phi| <= cutoff |u0|`.
///
/// Fails with `ConeExit` if a step lands outside `cone`.
pub fn flow_p(
    p: &HomogeneousTerm,
    u0: &[f64],
    t_max: f64,
    cutoff: f64,
    cone: Option<&ConeSpec>,
) -> Result<Solution> {
    let r0 = u0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let opts = OdeOptions::default();
    let sol = integrate(
        |_, u| p.eval(u),
        0.0,
        u0,
        t_max,
        &opts,
        Some(|_t: f64, u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt() - cutoff * r0),
    )?;
    if let Some(c) = cone {
        for (t, u) in sol.ts.iter().zip(&sol.ys) {
            if !c.contains(u) {
                return Err(ParabolicError::ConeExit { t: *t });
            }
        }
    }
    Ok(sol)
}

/// `Psi(t; u0)` for `z' = Q(phi(t; u0)) z`, `Psi(0) = Id`, integrated alongside the flow.
pub fn fundamental_matrix(problem: &PdeProblem, u0: &[f64], t: f64) -> Result<DMatrix<f64>> {
    let n = u0.len();
    let k = problem.target_dim();
    let mut y0 = u0.to_vec();
    y0.extend(DMatrix::<f64>::identity(k, k).transpose().iter());
    let sol = integrate_plain(
        |_, y| {
            let u = &y[..n];
            let psi = DMatrix::from_row_slice(k, k, &y[n..]);
            let mut out = problem.p.eval(u);
            let dpsi = problem.q_matrix(u) * psi;
            out.extend(dpsi.transpose().iter());
            out
        },
        0.0,
        &y0,
        t,
        &OdeOptions::default(),
    )?;
    if let Some((tt, _)) = sol
        .ts
        .iter()
        .zip(&sol.ys)
        .find(|(_, yy)| !problem.cone.contains(&yy[..n]) || yy.iter().any(|v| !v.is_finite()))
    {
        return Err(ParabolicError::ConeExit { t: *tt });
    }
    let (_, y) = sol.last();
    Ok(DMatrix::from_row_slice(k, k, &y[n..]))
}

/// Value of the integral solution at one point `u0` of the cone.
pub fn solve_at(problem: &PdeProblem, c: &PdeConstants, u0: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = u0.len();
    let k = problem.target_dim();
    let nn = problem.order() as i32;
    let nrm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r0 = nrm(u0);
    let expo = problem.decay_exponent(c);
    // State: u, Psi^{-1} (row-major), accumulated integral.
    let mut y0 = u0.to_vec();
    y0.extend(DMatrix::<f64>::identity(k, k).iter());
    y0.extend(std::iter::repeat(0.0).take(k));
    let rhs = |y: &[f64]| -> Vec<f64> {
        let u = &y[..n];
        let r = nrm(u);
        let s = 1.0 / r.powi(nn - 1);
        let pinv = DMatrix::from_row_slice(k, k, &y[n..n + k * k]);
        let mut out: Vec<f64> = problem.p.eval(u).iter().map(|v| v * s).collect();
        let dpinv = -(&pinv * problem.q_matrix(u)) * s;
        out.extend(dpinv.transpose().iter());
        let w = DVector::from_vec(problem.w.eval(u));
        out.extend((pinv * w * s).iter());
        out
    };
    let opts = OdeOptions {
        rtol: (tol * 1e-2).max(1e-13),
        atol: tol * 1e-3 * r0.powi(problem.m() as i32 + 1),
        ..OdeOptions::default()
    };
    let tau_max = 100.0 / c.a_p;
    let sol = integrate(
        |_, y| rhs(y),
        0.0,
        &y0,
        tau_max,
        &opts,
        Some(|_t: f64, y: &[f64]| nrm(&y[..n]) - RADIUS_CUTOFF * r0),
    )?;
    let (tau_end, y) = sol.last();
    if sol.event.is_none() {
        return Err(ParabolicError::QuadratureStall(tau_end));
    }
    if let Some((tt, _)) = sol
        .ts
        .iter()
        .zip(&sol.ys)
        .find(|(_, yy)| !problem.cone.contains(&yy[..n]) || yy.iter().any(|v| !v.is_finite()))
    {
        return Err(ParabolicError::ConeExit { t: *tt });
    }
    let tail_rate = c.a_p * expo;
    let integrand = rhs(y);
    Ok((0..k)
        .map(|i| -(y[n + k * k + i] + integrand[n + k * k + i] / tail_rate))
        .collect())
}

/// The unique homogeneous solution of degree `m + 1`.
///
/// Fails with `DivergenceRisk` when `m + 1 + B_Q/a_p <= 0` (the boundary case
/// included), and with `WeakContractionFail` when `a_p <= 0`.
pub fn solve_pde(problem: &PdeProblem, opts: &PdeOptions) -> Result<HomogeneousTerm> {
    let c = problem.constants()?;
    if c.a_p <= 0.0 {
        return Err(ParabolicError::WeakContractionFail(c.a_p));
    }
    let expo = problem.decay_exponent(&c);
    if expo <= 1e-12 {
        return Err(ParabolicError::DivergenceRisk(expo));
    }
    let k = problem.target_dim();
    if problem.w.max_abs() == 0.0 {
        return Ok(HomogeneousTerm::Poly(PolyTerm::zero(problem.cone.n, problem.m() + 1, k)));
    }
    if opts.backend == PdeBackend::Auto {
        if let (Some(p), Some(q), Some(w)) = (problem.p.as_poly(), problem.q.as_poly(), problem.w.as_poly()) {
            return solve_pde_poly(p, q, w).map(HomogeneousTerm::Poly);
        }
    }
    let section = opts.section.clone().unwrap_or_else(|| problem.cone.section());
    let dirs = section.node_directions();
    let values: Vec<Result<Vec<f64>>> = dirs.par_iter().map(|e| solve_at(problem, &c, e, opts.tol)).collect();
    let values: Result<Vec<Vec<f64>>> = values.into_iter().collect();
    Ok(HomogeneousTerm::Ray(RayTerm {
        degree: problem.m() + 1,
        target_dim: k,
        section,
        values: values?,
    }))
}

/// Polynomial solution by least squares over the monomial basis of degree `m + 1`.
///
/// Fails with `BackendUnsupported` if no polynomial solves the equation.
pub fn solve_pde_poly(p: &PolyTerm, q: &PolyTerm, w: &PolyTerm) -> Result<PolyTerm> {
    let n = p.nvars();
    let k = w.target_dim();
    let nn = p.degree();
    let deg_h = w.degree() + 1 - nn;
    let ncols = PolyTerm::zero(n, deg_h, k).coeffs().len();
    let nrows = w.coeffs().len();
    let order = w.degree();
    let vars: Vec<Jet> = (0..n).map(|i| Jet::variable(n, order, i, 0.0)).collect();
    let pj = p.eval(&vars);
    let qj = q.eval(&vars);
    let cols: Vec<Vec<f64>> = (0..ncols)
        .into_par_iter()
        .map(|c| {
            let mut coeffs = vec![0.0; ncols];
            coeffs[c] = 1.0;
            let h = PolyTerm::from_raw(n, deg_h, k, coeffs);
            let hj = h.eval(&vars);
            let out: Vec<Jet> = (0..k)
                .map(|i| {
                    let mut acc = Jet::constant(n, order, 0.0);
                    for (j, pjj) in pj.iter().enumerate() {
                        acc = acc + hj[i].derivative(j) * pjj.clone();
                    }
                    for (l, hl) in hj.iter().enumerate() {
                        acc = acc - qj[i * k + l].clone() * hl.clone();
                    }
                    acc
                })
                .collect();
            PolyTerm::from_jets(&out, order).coeffs().to_vec()
        })
        .collect();
    let a = DMatrix::from_fn(nrows, ncols, |r, c| cols[c][r]);
    let b = DVector::from_column_slice(w.coeffs());
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&b, 1e-13 * svd.singular_values.max())
        .map_err(|e| ParabolicError::BackendUnsupported(e.to_string()))?;
    let res = (&a * &x - &b).amax();
    let scale = b.amax().max(1e-300);
    if res > POLY_RESIDUAL_TOL * scale {
        return Err(ParabolicError::BackendUnsupported(format!(
            "no polynomial solution (relative residual {:.3e})",
            res / scale
        )));
    }
    Ok(PolyTerm::from_raw(n, deg_h, k, x.iter().copied().collect()))
}

/// Relative residual `|<grad h, p> - Q h - w| / |w|` at `u`, with `grad h` by central differences.
pub fn pde_residual(problem: &PdeProblem, h: &HomogeneousTerm, u: &[f64]) -> f64 {
    let n = u.len();
    let k = problem.target_dim();
    let step = 1e-6 * u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pu = problem.p.eval(u);
    let mut dh = vec![0.0; k];
    for j in 0..n {
        let mut up = u.to_vec();
        let mut um = u.to_vec();
        up[j] += step;
        um[j] -= step;
        let a = h.eval(&up);
        let b = h.eval(&um);
        for i in 0..k {
            dh[i] += (a[i] - b[i]) / (2.0 * step) * pu[j];
        }
    }
    let hu = h.eval(u);
    let qm = problem.q_matrix(u);
    let w = problem.w.eval(u);
    let mut num = 0.0f64;
    for i in 0..k {
        let qh: f64 = (0..k).map(|l| qm[(i, l)] * hu[l]).sum();
        num = num.max((dh[i] - qh - w[i]).abs());
    }
    num / w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300)
}
