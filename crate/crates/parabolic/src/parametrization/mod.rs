//! Order-by-order construction of stable-manifold parametrizations.
//!
//! A [`Model`] is a map `(x, y, theta) -> (x + f, y + g, theta + omega + h)` or a
//! vector field `(f, g, omega + h)`, with `f = O(|u|^N)`, `g = O(|u|^M)`,
//! `h = O(|u|^P)`. A [`Parametrization`] holds the embedding
//! `K(u, Theta) = (u + K_x, K_y, Theta + K_theta)` and the inner dynamics
//! `R(u, Theta) = (u + R_u, Theta + omega + R_theta)` (or the inner field
//! `Y = (R_u, omega + R_theta)`), with all corrections stored as homogeneous sums.
//!
//! The construction is residual driven: every sub-step recomputes the
//! invariance error by evaluating the full model on multivariate jets at the
//! nodes of an angle grid, projects each homogeneous degree onto Fourier modes,
//! and solves for the lowest unresolved degree.

pub mod reduce;
pub mod refine;
pub mod spec;
pub mod validate;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohomology::solve_pde_poly;
use crate::cones::{check_hypotheses, derived_indices, estimate_constants, ConeSpec, HypothesisReport, LeadingParts, Verdict};
use crate::error::{ParabolicError, Result};
use crate::fourier::{
    grid_nodes, linear_fit, solve_small_divisors_flow, Block, solve_small_divisors_map, DivisorKind, FourierMap, Frequency,
    DEFAULT_DIVISOR_FLOOR,
};
use crate::homogeneous::{HomogeneousSum, HomogeneousTerm, PolyTerm, Wrt};
use crate::jet::{Jet, Scalar};

/// Fourier truncation used when a model does not specify one.
pub const DEFAULT_TRUNCATION: usize = 8;
/// Order assumed for models without a tail (exact polynomial right-hand side).
pub const EXACT_MODEL_ORDER: usize = 1000;
/// Safety margin used when computing the derived indices.
const INDEX_MARGIN: f64 = 1e-3;
/// Extra Taylor orders carried by the residual report beyond `j + N`.
const REPORT_EXTRA_ORDER: usize = 4;

/// Discrete or continuous time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Map,
    Flow,
}

impl SystemKind {
    pub fn divisor_kind(self) -> DivisorKind {
        match self {
            SystemKind::Map => DivisorKind::Map,
            SystemKind::Flow => DivisorKind::Flow,
        }
    }
}

#[derive(Debug, Clone)]
struct LeadingPolys {
    /// `fbar^N(x, 0)`, `n -> n`.
    p: PolyTerm,
    /// `D_x fbar^N(x, 0)`, row-major `n x n`.
    qx: PolyTerm,
    /// `D_y gbar^M(x, 0)`, row-major `m x m`.
    qy: PolyTerm,
    /// `g^M` with all its modes.
    g_m: FourierMap<HomogeneousTerm>,
}

/// A map or vector field in the parabolic normal form.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: SystemKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// `(N, M, P)`.
    pub orders: (usize, usize, usize),
    pub freq: Frequency,
    pub f: HomogeneousSum,
    pub g: HomogeneousSum,
    pub h: HomogeneousSum,
    pub truncation: usize,
    pub divisor_floor: f64,
    leading: LeadingPolys,
}

/// Polynomial in `x` obtained by setting `y = 0` in a polynomial of `(x, y)`.
fn restrict_to_x(p: &PolyTerm, n: usize) -> PolyTerm {
    let deg = p.degree();
    let vars: Vec<Jet> = (0..p.nvars())
        .map(|i| {
            if i < n {
                Jet::variable(n, deg, i, 0.0)
            } else {
                Jet::constant(n, deg, 0.0)
            }
        })
        .collect();
    PolyTerm::from_jets(&p.eval(&vars), deg)
}

/// Row-major Jacobian block `d p_i / d v_{offset + j}` restricted to `y = 0`.
fn jacobian_block(p: &PolyTerm, n: usize, offset: usize, size: usize) -> PolyTerm {
    let derivs: Vec<PolyTerm> = (0..size).map(|j| restrict_to_x(&p.derivative(offset + j), n)).collect();
    let mut parts = Vec::with_capacity(p.target_dim() * size);
    for i in 0..p.target_dim() {
        for d in &derivs {
            parts.push(d.component(i));
        }
    }
    PolyTerm::stack(&parts)
}

fn average_poly(sum: &HomogeneousSum, degree: usize) -> Result<PolyTerm> {
    match sum.term(degree) {
        None => Ok(PolyTerm::zero(sum.nvars, degree, sum.target_dim)),
        Some(t) => match t.average() {
            HomogeneousTerm::Poly(p) => Ok(p),
            HomogeneousTerm::Ray(_) => Err(ParabolicError::BackendUnsupported(
                "leading parts must be polynomial".into(),
            )),
        },
    }
}

fn as_matrix(v: &[f64], rows: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, rows, v)
}

impl Model {
    /// Builds a model and checks the degree layout.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: SystemKind,
        n: usize,
        m: usize,
        d: usize,
        orders: (usize, usize, usize),
        freq: Frequency,
        f: HomogeneousSum,
        g: HomogeneousSum,
        h: HomogeneousSum,
    ) -> Result<Self> {
        let (nn, mm, pp) = orders;
        if nn < 2 || mm < 2 || mm > nn || pp < 1 || pp > nn {
            return Err(ParabolicError::InvalidInput(format!(
                "orders (N, M, P) = ({nn}, {mm}, {pp}) need N >= 2, 2 <= M <= N, 1 <= P <= N"
            )));
        }
        if n == 0 || m == 0 {
            return Err(ParabolicError::InvalidInput("n and m must be positive".into()));
        }
        if freq.omega.len() != d {
            return Err(ParabolicError::InvalidInput(format!(
                "omega has length {} but d = {d}",
                freq.omega.len()
            )));
        }
        let time = match kind {
            SystemKind::Map => {
                if freq.time_freq.as_ref().is_some_and(|v| !v.is_empty()) {
                    return Err(ParabolicError::InvalidInput("maps take no time frequency".into()));
                }
                0
            }
            SystemKind::Flow => freq.time_freq.as_ref().map_or(0, |v| v.len()),
        };
        let a = d + time;
        for (name, s, target) in [("f", &f, n), ("g", &g, m), ("h", &h, d)] {
            if s.nvars != n + m || s.target_dim != target || s.angle_dim != a {
                return Err(ParabolicError::InvalidInput(format!(
                    "{name} has shape (vars {}, angles {}, target {}), expected ({}, {a}, {target})",
                    s.nvars,
                    s.angle_dim,
                    s.target_dim,
                    n + m
                )));
            }
        }
        f.lowest_part(nn)?;
        g.lowest_part(mm)?;
        h.lowest_part(pp)?;
        let fbar = average_poly(&f, nn)?;
        let gbar = average_poly(&g, mm)?;
        let leading = LeadingPolys {
            p: restrict_to_x(&fbar, n),
            qx: jacobian_block(&fbar, n, 0, n),
            qy: jacobian_block(&gbar, n, n, m),
            g_m: g.term(mm).cloned().unwrap_or_else(|| g.zero_term(mm)),
        };
        let truncation = f.truncation.max(g.truncation).max(h.truncation).max(1);
        Ok(Self {
            kind,
            n,
            m,
            d,
            orders,
            freq,
            f,
            g,
            h,
            truncation,
            divisor_floor: DEFAULT_DIVISOR_FLOOR,
            leading,
        })
    }

    /// Number of angles the right-hand side depends on (spatial plus time phases).
    pub fn angle_dim(&self) -> usize {
        self.f.angle_dim
    }

    pub fn time_dim(&self) -> usize {
        self.angle_dim() - self.d
    }

    /// Smallest tail order, or [`EXACT_MODEL_ORDER`] for a polynomial model.
    pub fn order_q(&self) -> usize {
        [&self.f, &self.g, &self.h]
            .iter()
            .filter_map(|s| s.tail.as_ref().map(|t| t.order()))
            .min()
            .unwrap_or(EXACT_MODEL_ORDER)
    }

    pub fn fbar_poly(&self) -> &PolyTerm {
        &self.leading.p
    }

    pub fn dx_fbar_poly(&self) -> &PolyTerm {
        &self.leading.qx
    }

    pub fn dy_gbar_poly(&self) -> &PolyTerm {
        &self.leading.qy
    }

    /// `(f, g, h)` at a point; `theta` has length [`Model::angle_dim`].
    pub fn rhs<S: crate::homogeneous::ModelScalar>(&self, z: &[S], theta: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
        (self.f.eval(z, theta), self.g.eval(z, theta), self.h.eval(z, theta))
    }

    /// Image of `(x, y, theta)` under the map.
    pub fn apply(&self, z: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (f, g, h) = self.rhs(z, theta);
        let mut z2 = z.to_vec();
        for (a, b) in z2.iter_mut().zip(f.iter().chain(&g)) {
            *a += b;
        }
        let th2: Vec<f64> = (0..self.d).map(|i| theta[i] + self.freq.omega[i] + h[i]).collect();
        (z2, th2)
    }

    /// Vector field `(f, g)` and `omega + h` at a point.
    pub fn field(&self, z: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut f, g, h) = self.rhs(z, theta);
        f.extend(g);
        let th: Vec<f64> = (0..self.d).map(|i| self.freq.omega[i] + h[i]).collect();
        (f, th)
    }

    /// `Id + D_{(x,y)}(f, g)` at a point, row-major in `n + m`.
    pub fn xy_jacobian(&self, z: &[f64], theta: &[f64]) -> DMatrix<f64> {
        let k = self.n + self.m;
        let vars: Vec<Jet> = (0..k).map(|i| Jet::variable(k, 1, i, z[i])).collect();
        let th: Vec<Jet> = theta.iter().map(|&t| Jet::constant(k, 1, t)).collect();
        let (f, g, _) = self.rhs(&vars, &th);
        let rows: Vec<Jet> = f.into_iter().chain(g).collect();
        DMatrix::from_fn(k, k, |i, j| {
            let mut e = vec![0u32; k];
            e[j] = 1;
            rows[i].coeff(&e) + if i == j { 1.0 } else { 0.0 }
        })
    }
}

impl LeadingParts for Model {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn angle_dim(&self) -> usize {
        Model::angle_dim(self)
    }
    fn orders(&self) -> (usize, usize, usize) {
        self.orders
    }
    fn fbar_n(&self, x: &[f64]) -> Vec<f64> {
        self.leading.p.eval(x)
    }
    fn dx_fbar_n(&self, x: &[f64]) -> DMatrix<f64> {
        as_matrix(&self.leading.qx.eval(x), self.n)
    }
    fn dy_gbar_m(&self, x: &[f64]) -> DMatrix<f64> {
        as_matrix(&self.leading.qy.eval(x), self.m)
    }
    fn g_m_axis(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        z.resize(self.n + self.m, 0.0);
        let v = self.leading.g_m.eval_with(theta, &0.0, |b| b.eval(&z));
        if v.is_empty() {
            vec![0.0; self.m]
        } else {
            v
        }
    }
}

/// A term left undetermined by the cohomological equations, together with the value used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeChoice {
    /// `"K_x"` or `"K_theta"`.
    pub component: String,
    pub degree: usize,
    pub value: String,
}

/// Embedding `K` and inner dynamics `R` (maps) or `Y` (flows).
#[derive(Debug, Clone)]
pub struct Parametrization {
    pub kind: SystemKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub orders: (usize, usize, usize),
    pub freq: Frequency,
    /// `K_x - u`.
    pub kx: HomogeneousSum,
    pub ky: HomogeneousSum,
    /// `K_theta - Theta`.
    pub kt: HomogeneousSum,
    /// `R_u - u` for maps, `Y_u` for flows.
    pub ru: HomogeneousSum,
    /// `R_theta - Theta - omega` for maps, `Y_theta - omega` for flows.
    pub rt: HomogeneousSum,
    /// Achieved order `j`.
    pub order: usize,
    pub free_choices: Vec<FreeChoice>,
    /// Whether the non-minimal layout was used because `A_f > b_f max{1, N-P}` failed.
    pub fallback: bool,
    pub hypotheses: Option<HypothesisReport>,
}

impl Parametrization {
    /// `K = (u, 0, Theta)`, `R = (u, Theta + omega)`.
    pub fn identity(model: &Model) -> Self {
        let (n, m, d, a, k) = (model.n, model.m, model.d, model.angle_dim(), model.truncation);
        Self {
            kind: model.kind,
            n,
            m,
            d,
            orders: model.orders,
            freq: model.freq.clone(),
            kx: HomogeneousSum::new(n, a, n, k),
            ky: HomogeneousSum::new(n, a, m, k),
            kt: HomogeneousSum::new(n, a, d, k),
            ru: HomogeneousSum::new(n, a, n, k),
            rt: HomogeneousSum::new(n, a, d, k),
            order: 0,
            free_choices: Vec::new(),
            fallback: false,
            hypotheses: None,
        }
    }

    pub fn angle_dim(&self) -> usize {
        self.kx.angle_dim
    }

    /// `K(u, Theta)` as `(x, y)` and the spatial angles.
    pub fn embed(&self, u: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let kx = self.kx.eval(u, theta);
        let mut z: Vec<f64> = u.iter().zip(&kx).map(|(a, b)| a + b).collect();
        z.extend(self.ky.eval(u, theta));
        let kt = self.kt.eval(u, theta);
        let th: Vec<f64> = (0..self.d).map(|i| theta[i] + kt[i]).collect();
        (z, th)
    }

    /// `R(u, Theta)` for maps.
    pub fn inner_map(&self, u: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ru = self.ru.eval(u, theta);
        let rt = self.rt.eval(u, theta);
        let u2 = u.iter().zip(&ru).map(|(a, b)| a + b).collect();
        let th2 = (0..self.d).map(|i| theta[i] + self.freq.omega[i] + rt[i]).collect();
        (u2, th2)
    }

    /// `Y(u, Theta)` for flows: `(Y_u, Y_theta)` on the spatial angles.
    pub fn inner_field(&self, u: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ru = self.ru.eval(u, theta);
        let rt = self.rt.eval(u, theta);
        let th = (0..self.d).map(|i| self.freq.omega[i] + rt[i]).collect();
        (ru, th)
    }
}

fn part_at(sum: &HomogeneousSum, degree: usize) -> FourierMap<HomogeneousTerm> {
    sum.term(degree).cloned().unwrap_or_else(|| sum.zero_term(degree))
}

fn add_nonzero(sum: &mut HomogeneousSum, t: FourierMap<HomogeneousTerm>) -> Result<()> {
    if t.is_zero(0.0) {
        Ok(())
    } else {
        sum.add_term(t)
    }
}

fn poly_of(t: &HomogeneousTerm) -> Result<&PolyTerm> {
    t.as_poly()
        .ok_or_else(|| ParabolicError::BackendUnsupported("parametrization terms must be polynomial".into()))
}

/// Invariance error `E = (E_x, E_y, E_theta)` on jets `u` at angles `theta`.
///
/// Maps: `F(K) - K(R)`. Flows: `X(K) - DK Y`, where the time phases of
/// `theta` advance with `nu`.
pub fn residual_jets(model: &Model, par: &Parametrization, u: &[Jet], theta: &[f64]) -> Result<[Vec<Jet>; 3]> {
    let d = model.d;
    let a = model.angle_dim();
    let proto = &u[0];
    let th: Vec<Jet> = theta.iter().map(|&t| proto.constant_like(t)).collect();
    let kx = par.kx.eval(u, &th);
    let ky = par.ky.eval(u, &th);
    let kt = par.kt.eval(u, &th);
    let mut z: Vec<Jet> = u.iter().zip(&kx).map(|(a, b)| a.clone() + b.clone()).collect();
    z.extend(ky.iter().cloned());
    let mut ang = th.clone();
    for i in 0..d {
        ang[i] = ang[i].clone() + kt[i].clone();
    }
    let (fv, gv, hv) = model.rhs(&z, &ang);
    let ru = par.ru.eval(u, &th);
    let rt = par.rt.eval(u, &th);
    let sub = |a: Vec<Jet>, b: &[Jet]| -> Vec<Jet> { a.into_iter().zip(b).map(|(x, y)| x - y.clone()).collect() };
    let add = |a: Vec<Jet>, b: &[Jet]| -> Vec<Jet> { a.into_iter().zip(b).map(|(x, y)| x + y.clone()).collect() };
    match model.kind {
        SystemKind::Map => {
            let u2: Vec<Jet> = u.iter().zip(&ru).map(|(a, b)| a.clone() + b.clone()).collect();
            let mut th2 = th.clone();
            for i in 0..d {
                th2[i] = th2[i].clone() + model.freq.omega[i] + rt[i].clone();
            }
            let ex = sub(sub(add(kx, &fv), &ru), &par.kx.eval(&u2, &th2));
            let ey = sub(add(ky, &gv), &par.ky.eval(&u2, &th2));
            let et = sub(sub(add(kt, &hv), &rt), &par.kt.eval(&u2, &th2));
            Ok([ex, ey, et])
        }
        SystemKind::Flow => {
            let ext = model.freq.extended();
            let yfull: Vec<Jet> = (0..a)
                .map(|i| {
                    if i < d {
                        rt[i].clone() + ext[i]
                    } else {
                        proto.constant_like(ext[i])
                    }
                })
                .collect();
            let lie = |sum: &HomogeneousSum, val: &[Jet]| -> Result<Vec<Jet>> {
                let mut out: Vec<Jet> = val.iter().map(|v| v.zero_like()).collect();
                for (i, r) in ru.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(val) {
                        *o = o.clone() + v.derivative(i) * r.clone();
                    }
                }
                for (k, yk) in yfull.iter().enumerate() {
                    if sum.terms().is_empty() {
                        break;
                    }
                    let dv = sum.differentiate(Wrt::Theta(k), false)?.eval(u, &th);
                    for (o, v) in out.iter_mut().zip(dv) {
                        *o = o.clone() + v * yk.clone();
                    }
                }
                Ok(out)
            };
            let ex = sub(sub(fv, &ru), &lie(&par.kx, &kx)?);
            let ey = sub(gv, &lie(&par.ky, &ky)?);
            let et = sub(sub(hv, &rt), &lie(&par.kt, &kt)?);
            Ok([ex, ey, et])
        }
    }
}

/// Invariance error expanded in homogeneous Fourier blocks up to `order`.
pub fn residual_series(model: &Model, par: &Parametrization, order: usize) -> Result<[HomogeneousSum; 3]> {
    let n = model.n;
    let a = model.angle_dim();
    let k = model.truncation;
    let g = 4 * k + 4;
    let nodes = if a == 0 { vec![Vec::new()] } else { grid_nodes(a, g) };
    let per_node: Vec<[Vec<Jet>; 3]> = nodes
        .par_iter()
        .map(|theta| {
            let u: Vec<Jet> = (0..n).map(|i| Jet::variable(n, order, i, 0.0)).collect();
            residual_jets(model, par, &u, theta)
        })
        .collect::<Result<_>>()?;
    let targets = [model.n, model.m, model.d];
    let mut out = targets.map(|t| HomogeneousSum::new(n, a, t, k));
    for (c, sum) in out.iter_mut().enumerate() {
        if targets[c] == 0 {
            continue;
        }
        for deg in 0..=order {
            let samples: Vec<HomogeneousTerm> = per_node
                .iter()
                .map(|r| HomogeneousTerm::Poly(PolyTerm::from_jets(&r[c], deg)))
                .collect();
            let mut t = if a == 0 {
                FourierMap::constant(0, k, samples[0].clone())
            } else {
                FourierMap::from_grid_samples(a, k, g, &samples)
            };
            t.prune(1e-16);
            add_nonzero(sum, t)?;
        }
    }
    Ok(out)
}

/// Options of [`approximate`].
#[derive(Debug, Clone)]
pub struct ApproxOptions {
    /// Refuse to build when a hypothesis verdict is `Fail` (default) instead of only recording it.
    pub enforce_hypotheses: bool,
    pub cone: ConeSpec,
}

struct Builder<'a> {
    model: &'a Model,
    par: Parametrization,
    j_star_u: usize,
}

impl Builder<'_> {
    fn residual(&self, degree: usize) -> Result<[HomogeneousSum; 3]> {
        residual_series(self.model, &self.par, degree)
    }

    /// `phi` with `phi(theta + omega) - phi(theta) = e` (maps) or `d_theta phi . omega = e` (flows).
    fn invert_oscillatory(&self, e: &FourierMap<HomogeneousTerm>) -> Result<FourierMap<HomogeneousTerm>> {
        let osc = e.oscillatory();
        if osc.is_zero(0.0) {
            return Ok(osc);
        }
        match self.model.kind {
            SystemKind::Map => solve_small_divisors_map(&osc, &self.model.freq, self.model.divisor_floor),
            SystemKind::Flow => solve_small_divisors_flow(&osc, &self.model.freq, self.model.divisor_floor),
        }
    }

    fn constant_term(&self, p: PolyTerm) -> FourierMap<HomogeneousTerm> {
        FourierMap::constant(self.model.angle_dim(), self.model.truncation, HomogeneousTerm::Poly(p))
    }

    /// Removes the degree-`j + M - 1` part of `E_y` with a degree-`j` correction of `K_y`.
    fn solve_y(&mut self, j: usize) -> Result<()> {
        let (nn, mm, _) = self.model.orders;
        let deg = j + mm - 1;
        let e = part_at(&self.residual(deg)?[1], deg);
        let avg = e.average();
        if avg.max_abs() > 0.0 {
            let w = poly_of(&avg)?;
            let p = if mm == nn {
                self.model.leading.p.clone()
            } else {
                PolyTerm::zero(self.model.n, mm, self.model.n)
            };
            let sol = solve_pde_poly(&p, &self.model.leading.qy, w)?;
            let t = self.constant_term(sol);
            add_nonzero(&mut self.par.ky, t)?;
        }
        let e = part_at(&self.residual(deg)?[1], deg);
        let osc = self.invert_oscillatory(&e)?;
        add_nonzero(&mut self.par.ky, osc)
    }

    /// Removes the degree-`j + P - 2` part of `E_theta`.
    fn solve_theta(&mut self, j: usize) -> Result<()> {
        let (nn, _, pp) = self.model.orders;
        if self.model.d == 0 || j + pp < 2 {
            return Ok(());
        }
        let deg = j + pp - 2;
        let e = part_at(&self.residual(deg)?[2], deg);
        let avg = e.average();
        if avg.max_abs() > 0.0 {
            if pp < nn {
                let t = self.constant_term(poly_of(&avg)?.clone());
                add_nonzero(&mut self.par.rt, t)?;
                self.record("K_theta", j.saturating_sub(1));
            } else {
                if j < 2 {
                    return Err(ParabolicError::InvalidInput(format!(
                        "nonzero angle residual at degree {deg} cannot be removed by K_theta"
                    )));
                }
                let q = PolyTerm::zero(self.model.n, nn - 1, self.model.d * self.model.d);
                let sol = solve_pde_poly(&self.model.leading.p, &q, poly_of(&avg)?)?;
                let t = self.constant_term(sol);
                add_nonzero(&mut self.par.kt, t)?;
            }
        } else if pp < nn {
            self.record("K_theta", j.saturating_sub(1));
        }
        let e = part_at(&self.residual(deg)?[2], deg);
        let osc = self.invert_oscillatory(&e)?;
        add_nonzero(&mut self.par.kt, osc)
    }

    /// Removes the degree-`j + N - 1` part of `E_x`.
    fn solve_x(&mut self, j: usize) -> Result<()> {
        let (nn, _, _) = self.model.orders;
        let deg = j + nn - 1;
        let e = part_at(&self.residual(deg)?[0], deg);
        let avg = e.average();
        let into_r = j <= self.j_star_u || self.par.fallback;
        if into_r {
            if j >= 2 {
                self.record("K_x", j);
            }
            if avg.max_abs() > 0.0 {
                let t = self.constant_term(poly_of(&avg)?.clone());
                add_nonzero(&mut self.par.ru, t)?;
            }
        } else if avg.max_abs() > 0.0 {
            let sol = solve_pde_poly(&self.model.leading.p, &self.model.leading.qx, poly_of(&avg)?)?;
            let t = self.constant_term(sol);
            add_nonzero(&mut self.par.kx, t)?;
        }
        let e = part_at(&self.residual(deg)?[0], deg);
        let osc = self.invert_oscillatory(&e)?;
        add_nonzero(&mut self.par.kx, osc)
    }

    fn record(&mut self, component: &str, degree: usize) {
        if degree == 0 {
            return;
        }
        let c = FreeChoice {
            component: component.to_string(),
            degree,
            value: "zero".to_string(),
        };
        if !self.par.free_choices.contains(&c) {
            self.par.free_choices.push(c);
        }
    }

    fn step(&mut self, j: usize) -> Result<()> {
        self.solve_y(j)?;
        self.solve_theta(j)?;
        self.solve_x(j)?;
        self.par.order = j;
        Ok(())
    }

    /// Raises the `y` and `theta` residual orders to `j + N` after step `j`.
    fn complete(&mut self, j: usize) -> Result<()> {
        let (nn, mm, pp) = self.model.orders;
        let top = j + nn - 1;
        let mut jp = j + 1;
        while jp + mm - 1 <= top || jp + pp - 2 <= top {
            if jp + mm - 1 <= top {
                self.solve_y(jp)?;
            }
            if jp + pp - 2 <= top {
                self.solve_theta(jp)?;
            }
            jp += 1;
        }
        Ok(())
    }
}

/// Gates the construction on the hypotheses and returns the index `j*_u` and the fallback flag.
fn gate(model: &Model, cone: &ConeSpec, enforce: bool) -> Result<(usize, bool, HypothesisReport)> {
    let (nn, mm, pp) = model.orders;
    let c = estimate_constants(model, cone)?;
    let freq = if model.angle_dim() > 0 {
        Some((&model.freq, model.kind.divisor_kind()))
    } else {
        None
    };
    let report = check_hypotheses(model, &c, model.order_q(), freq);
    if enforce {
        for key in ["a_f > 0", "g^M(x,0) = 0"] {
            if report.verdicts.get(key) != Some(&Verdict::Pass) {
                return Err(ParabolicError::HypothesisFail(key.to_string()));
            }
        }
        for key in ["D_y gbar^M invertible", "2 + B_g/a_f > 0"] {
            if report.verdicts.get(key) == Some(&Verdict::Fail) {
                if key.starts_with("D_y") {
                    return Err(ParabolicError::SingularGbar(c.dy_gbar_min_sv));
                }
                return Err(ParabolicError::HypothesisFail(key.to_string()));
            }
        }
    }
    if mm < nn && c.dy_gbar_min_sv <= 1e-12 {
        return Err(ParabolicError::SingularGbar(c.dy_gbar_min_sv));
    }
    let fallback = report.verdicts.get("A_f > b_f max{1, N-P}") == Some(&Verdict::Fail);
    let j_star_u = derived_indices(&c, nn, mm, pp, INDEX_MARGIN).map(|ix| ix.j_star_u).unwrap_or(usize::MAX);
    Ok((j_star_u, fallback, report))
}

/// Builds `K^(j)`, `R^(j)` (or `Y^(j)`) up to `j_target`, followed by the completion sweeps,
/// so that the invariance error is `O(|u|^{j + N})` in every component.
pub fn approximate(model: &Model, j_target: usize, opts: &ApproxOptions) -> Result<Parametrization> {
    let (nn, _, _) = model.orders;
    let q = model.order_q();
    if j_target + nn > q {
        return Err(ParabolicError::InvalidInput(format!(
            "j_target = {j_target} exceeds q - N = {}",
            q.saturating_sub(nn)
        )));
    }
    let (j_star_u, fallback, report) = gate(model, &opts.cone, opts.enforce_hypotheses)?;
    let mut par = Parametrization::identity(model);
    par.fallback = fallback;
    par.hypotheses = Some(report);
    let mut b = Builder { model, par, j_star_u };
    for j in 1..=j_target {
        b.step(j)?;
    }
    if j_target > 0 {
        b.complete(j_target)?;
    }
    Ok(b.par)
}

/// [`approximate`] for maps.
pub fn approximate_map(model: &Model, j_target: usize, cone: &ConeSpec) -> Result<Parametrization> {
    if model.kind != SystemKind::Map {
        return Err(ParabolicError::InvalidInput("approximate_map needs a map model".into()));
    }
    approximate(
        model,
        j_target,
        &ApproxOptions {
            enforce_hypotheses: true,
            cone: cone.clone(),
        },
    )
}

/// [`approximate`] for flows.
pub fn approximate_flow(model: &Model, j_target: usize, cone: &ConeSpec) -> Result<Parametrization> {
    if model.kind != SystemKind::Flow {
        return Err(ParabolicError::InvalidInput("approximate_flow needs a flow model".into()));
    }
    approximate(
        model,
        j_target,
        &ApproxOptions {
            enforce_hypotheses: true,
            cone: cone.clone(),
        },
    )
}

/// Largest `|E_c|` at one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub radius: f64,
    /// Per component `x`, `y`, `theta`.
    pub max_abs: [f64; 3],
    pub total: f64,
}

/// Least-squares line through `log|E|` against `log r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Sampled invariance error along rays with per-component slope fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub samples: Vec<ResidualSample>,
    /// `None` for components that vanish at every radius.
    pub fits: [Option<SlopeFit>; 3],
    pub total_fit: Option<SlopeFit>,
}

impl ResidualReport {
    /// Smallest fitted slope over the nonvanishing components.
    pub fn min_slope(&self) -> Option<f64> {
        self.fits.iter().flatten().map(|f| f.slope).reduce(f64::min)
    }

    pub fn max_residual(&self) -> f64 {
        self.samples.iter().map(|s| s.total).fold(0.0, f64::max)
    }

    /// One row per radius; the `slope` column repeats [`ResidualReport::min_slope`].
    pub fn to_csv(&self) -> String {
        let slope = self.min_slope().map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("radius,E_x,E_y,E_theta,total,slope\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{slope}\n",
                s.radius, s.max_abs[0], s.max_abs[1], s.max_abs[2], s.total
            ));
        }
        out
    }
}

/// `n` radii log-spaced on `[lo, hi]`.
pub fn log_radii(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn fit(points: &[(f64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.1 > 0.0 && p.1.is_finite())
        .map(|&(r, e)| (r.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (slope, intercept) = linear_fit(&pts);
    Some(SlopeFit { slope, intercept })
}

/// Invariance error along `rays` at `radii`, maximized over an angle grid with
/// `angle_samples` points per axis.
///
/// Along each ray the error is expanded as an exact Taylor polynomial, so the
/// sampled values do not suffer from cancellation. Flows with `n > 1` need the
/// derivatives in every direction of `u` and use `n`-variable jets; otherwise a
/// single variable along the ray suffices.
pub fn residual_report(
    model: &Model,
    par: &Parametrization,
    rays: &[Vec<f64>],
    radii: &[f64],
    angle_samples: usize,
) -> Result<ResidualReport> {
    let (nn, _, _) = model.orders;
    let order = par.order + nn + REPORT_EXTRA_ORDER;
    let a = model.angle_dim();
    let nodes = if a == 0 { vec![Vec::new()] } else { grid_nodes(a, angle_samples.max(1)) };
    let work: Vec<(&Vec<f64>, &Vec<f64>)> = rays.iter().flat_map(|e| nodes.iter().map(move |t| (e, t))).collect();
    let multi = model.kind == SystemKind::Flow && model.n > 1;
    let series: Vec<[Vec<Jet>; 3]> = work
        .par_iter()
        .map(|(e, theta)| {
            let u: Vec<Jet> = if multi {
                (0..model.n).map(|i| Jet::variable(model.n, order, i, 0.0)).collect()
            } else {
                let s = Jet::variable(1, order, 0, 0.0);
                e.iter().map(|&c| s.clone() * c).collect()
            };
            residual_jets(model, par, &u, theta)
        })
        .collect::<Result<_>>()?;
    let eval_series = |j: &Jet, e: &[f64], r: f64| -> f64 {
        if multi {
            j.evaluate(&e.iter().map(|c| c * r).collect::<Vec<_>>())
        } else {
            j.coeffs.iter().rev().fold(0.0, |acc, c| acc * r + c)
        }
    };
    let samples: Vec<ResidualSample> = radii
        .iter()
        .map(|&r| {
            let mut mx = [0.0f64; 3];
            for (s, (e, _)) in series.iter().zip(&work) {
                for c in 0..3 {
                    for j in &s[c] {
                        mx[c] = mx[c].max(eval_series(j, e, r).abs());
                    }
                }
            }
            ResidualSample {
                radius: r,
                max_abs: mx,
                total: mx.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect();
    let fits = [0, 1, 2].map(|c| fit(&samples.iter().map(|s| (s.radius, s.max_abs[c])).collect::<Vec<_>>()));
    let total_fit = fit(&samples.iter().map(|s| (s.radius, s.total)).collect::<Vec<_>>());
    Ok(ResidualReport {
        samples,
        fits,
        total_fit,
    })
}

#[cfg(test)]
pub(crate) mod test_models {
    use super::*;
    use crate::homogeneous::ClosureTail;
    use std::sync::Arc;

    /// Adds `coeff * x^e * cos(2 pi k theta)` (or `sin`) to output `out` of a one-angle sum.
    pub fn add_mode(sum: &mut HomogeneousSum, out: usize, exps: &[u32], coeff: f64, k: i32, sine: bool) {
        let deg: u32 = exps.iter().sum();
        let p = PolyTerm::from_terms(sum.nvars, deg as usize, sum.target_dim, &[(out, exps.to_vec(), 1.0)]).unwrap();
        let zero = HomogeneousTerm::Poly(PolyTerm::zero(sum.nvars, deg as usize, sum.target_dim));
        let mut t = FourierMap::new(sum.angle_dim, sum.truncation, zero.clone());
        let scaled = |c: f64| HomogeneousTerm::lincomb(c, &HomogeneousTerm::Poly(p.clone()), 0.0, &zero);
        let key: Vec<i32> = if sum.angle_dim == 0 { vec![] } else { vec![k] };
        if k == 0 {
            t.set_mode(&key, scaled(coeff), zero.clone()).unwrap();
        } else if sine {
            t.set_mode(&key, zero.clone(), scaled(-coeff / 2.0)).unwrap();
        } else {
            t.set_mode(&key, scaled(coeff / 2.0), zero.clone()).unwrap();
        }
        sum.add_term(t).unwrap();
    }

    /// `f = -x^3`, `g = -x^2 y`, `h = 0`: the axis `y = 0` carries the exact manifold.
    pub fn invariant_toy() -> Model {
        let k = 4;
        let mut f = HomogeneousSum::new(2, 1, 1, k);
        let mut g = HomogeneousSum::new(2, 1, 1, k);
        let h = HomogeneousSum::new(2, 1, 1, k);
        add_mode(&mut f, 0, &[3, 0], -1.0, 0, false);
        add_mode(&mut g, 0, &[2, 1], -1.0, 0, false);
        Model::new(SystemKind::Map, 1, 1, 1, (3, 3, 3), Frequency::golden_mean(), f, g, h).unwrap()
    }

    /// Two-dimensional map with one angle and angle-dependent terms of every kind.
    pub fn synthetic_map(h_scale: f64, tail: bool) -> Model {
        let k = 4;
        let mut f = HomogeneousSum::new(2, 1, 1, k);
        let mut g = HomogeneousSum::new(2, 1, 1, k);
        let mut h = HomogeneousSum::new(2, 1, 1, k);
        add_mode(&mut f, 0, &[3, 0], -1.0, 0, false);
        add_mode(&mut f, 0, &[3, 0], 0.3, 1, false);
        add_mode(&mut f, 0, &[2, 1], 0.5, 0, false);
        add_mode(&mut f, 0, &[4, 0], 0.2, 1, true);
        add_mode(&mut g, 0, &[2, 1], 1.0, 0, false);
        add_mode(&mut g, 0, &[2, 1], 0.25, 1, false);
        add_mode(&mut g, 0, &[1, 2], 0.4, 0, false);
        add_mode(&mut g, 0, &[4, 0], 0.1, 0, false);
        add_mode(&mut g, 0, &[4, 0], 0.05, 1, true);
        add_mode(&mut h, 0, &[3, 0], h_scale, 2, false);
        add_mode(&mut h, 0, &[2, 1], 2.0 * h_scale, 0, false);
        if tail {
            f.set_tail(Arc::new(ClosureTail::new(
                9,
                |u, _| vec![0.1 * u[0].powi(9)],
                |u, _| vec![u[0].powi(9) * 0.1],
            )))
            .unwrap();
        }
        Model::new(SystemKind::Map, 1, 1, 1, (3, 3, 3), Frequency::golden_mean(), f, g, h).unwrap()
    }

    pub fn positive_cone() -> ConeSpec {
        ConeSpec::half_line(0.1)
    }
}

#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;

    fn report(model: &Model, par: &Parametrization) -> ResidualReport {
        residual_report(model, par, &[vec![1.0]], &log_radii(1e-3, 1e-1, 9), 16).unwrap()
    }

    #[test]
    fn invariant_toy_has_zero_residual() {
        let model = invariant_toy();
        let par = approximate_map(&model, 3, &positive_cone()).unwrap();
        assert!(par.kx.terms().is_empty());
        assert!(par.ky.terms().is_empty());
        assert!(par.kt.terms().is_empty());
        let rep = report(&model, &par);
        assert!(rep.max_residual() <= 1e-14, "{}", rep.max_residual());
        let r = par.ru.eval(&[0.5], &[0.0]);
        assert!((r[0] + 0.125).abs() < 1e-15);
    }

    #[test]
    fn leading_parts_of_synthetic_model() {
        let model = synthetic_map(0.01, false);
        assert!((model.fbar_n(&[2.0])[0] + 8.0).abs() < 1e-14);
        assert!((model.dx_fbar_n(&[2.0])[(0, 0)] + 12.0).abs() < 1e-13);
        assert!((model.dy_gbar_m(&[2.0])[(0, 0)] - 4.0).abs() < 1e-13);
        assert!(model.g_m_axis(&[0.3], &[0.2])[0].abs() < 1e-15);
    }

    #[test]
    fn residual_order_grows_with_j() {
        let model = synthetic_map(0.01, false);
        for j in 0..=3 {
            let par = approximate_map(&model, j, &positive_cone()).unwrap();
            let rep = report(&model, &par);
            let nn = model.orders.0 as f64;
            let slope = rep.total_fit.unwrap().slope;
            assert!(slope >= j as f64 + nn - 0.2, "j = {j}: slope {slope}");
        }
    }

    #[test]
    fn angle_dynamics_is_rigid_when_p_equals_n() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 3, &positive_cone()).unwrap();
        assert!(par.rt.terms().is_empty());
        let (_, th) = par.inner_map(&[0.05], &[0.3]);
        assert_eq!(th[0], 0.3 + model.freq.omega[0]);
    }

    #[test]
    fn oscillatory_blocks_have_zero_average() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 3, &positive_cone()).unwrap();
        for (_, t) in par.ru.terms() {
            assert!(t.oscillatory().is_zero(0.0));
        }
        assert!(par.kx.terms().iter().any(|(_, t)| !t.oscillatory().is_zero(0.0)));
        assert!(par.ky.terms().iter().any(|(_, t)| t.average().max_abs() > 0.0));
    }

    #[test]
    fn degraded_truncation_raises_intercept() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 2, &positive_cone()).unwrap();
        let mut bad = par.clone();
        bad.kx = HomogeneousSum::new(1, 1, 1, model.truncation);
        for (_, t) in par.kx.terms() {
            bad.kx.add_term(t.scale(0.5)).unwrap();
        }
        let good_rep = report(&model, &par);
        let bad_rep = report(&model, &bad);
        let r = 1e-2;
        let at = |rep: &ResidualReport| rep.samples.iter().find(|s| (s.radius - r).abs() < 1e-12).unwrap().total;
        assert!(at(&bad_rep) > at(&good_rep));
        assert!(bad_rep.total_fit.unwrap().slope < good_rep.total_fit.unwrap().slope);
    }

    #[test]
    fn j_target_beyond_tail_order_is_rejected() {
        let model = synthetic_map(0.01, true);
        assert!(matches!(
            approximate_map(&model, 7, &positive_cone()),
            Err(ParabolicError::InvalidInput(_))
        ));
        assert!(approximate_map(&model, 6, &positive_cone()).is_ok());
    }

    #[test]
    fn flow_with_forcing_uses_flow_divisors() {
        let k = 3;
        let nu = 2f64.sqrt();
        let mut f = HomogeneousSum::new(2, 1, 1, k);
        let mut g = HomogeneousSum::new(2, 1, 1, k);
        let h = HomogeneousSum::new(2, 1, 0, k);
        add_mode(&mut f, 0, &[3, 0], -1.0, 0, false);
        add_mode(&mut g, 0, &[2, 1], 1.0, 0, false);
        add_mode(&mut g, 0, &[4, 0], 0.2, 1, false);
        let model = Model::new(
            SystemKind::Flow,
            1,
            1,
            0,
            (3, 3, 3),
            Frequency::with_time(vec![], vec![nu]),
            f,
            g,
            h,
        )
        .unwrap();
        let par = approximate_flow(&model, 2, &positive_cone()).unwrap();
        let rep = report(&model, &par);
        assert!(rep.total_fit.unwrap().slope >= 2.0 + 3.0 - 0.2);
        assert!(par.ky.terms().iter().any(|(_, t)| !t.oscillatory().is_zero(0.0)));
    }

    #[test]
    fn gating_rejects_repelling_model() {
        let k = 2;
        let mut f = HomogeneousSum::new(2, 0, 1, k);
        let mut g = HomogeneousSum::new(2, 0, 1, k);
        add_mode(&mut f, 0, &[3, 0], 1.0, 0, false);
        add_mode(&mut g, 0, &[2, 1], 1.0, 0, false);
        let h = HomogeneousSum::new(2, 0, 0, k);
        let model = Model::new(SystemKind::Map, 1, 1, 0, (3, 3, 3), Frequency::new(vec![]), f, g, h).unwrap();
        assert!(matches!(
            approximate_map(&model, 1, &positive_cone()),
            Err(ParabolicError::HypothesisFail(_))
        ));
    }
}
