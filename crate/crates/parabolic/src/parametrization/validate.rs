//! Orbit-level checks: iterate bounds, shadowing, and root-of-unity branches.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{approximate, ApproxOptions, Model, Parametrization, SystemKind};
use crate::cones::ConeSpec;
use crate::error::{ParabolicError, Result};
use crate::fourier::{grid_nodes, FourierMap, Frequency};
use crate::homogeneous::{HomogeneousSum, HomogeneousTerm, ModelScalar, PolyTerm};
use crate::jet::Jet;
use crate::ode::{integrate_plain, OdeOptions};

/// Largest power tried when looking for `A^l = Id`.
pub const MAX_ROOT_ORDER: usize = 24;
const ROOT_TOL: f64 = 1e-12;
const NEWTON_TOL: f64 = 1e-15;

/// Result of [`iterate_bound_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateBoundReport {
    pub points: usize,
    pub k_max: usize,
    pub violations: usize,
    /// Smallest relative slack `min(|v_k| / lower - 1, upper / |v_k| - 1)` seen; negative on violation.
    pub worst_margin: f64,
    /// Largest `|v_k| / lower` at `k = k_max` (tends to one at the apex).
    pub worst_point: Option<Vec<f64>>,
}

/// Checks `|v| / (1 + k b* |v|^{N-1})^{1/(N-1)} <= |R^k(v)| <= |v| / (1 + k a* |v|^{N-1})^{1/(N-1)}`
/// for every `k <= k_max` along the orbits of `points`.
pub fn iterate_bound_check<F>(
    r_inner: F,
    points: &[Vec<f64>],
    big_n: usize,
    a_star: f64,
    b_star: f64,
    k_max: usize,
    norm: impl Fn(&[f64]) -> f64 + Sync,
) -> IterateBoundReport
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let e = (big_n - 1) as f64;
    let per_point: Vec<(usize, f64)> = points
        .par_iter()
        .map(|v0| {
            let r0 = norm(v0);
            let mut v = v0.clone();
            let mut violations = 0;
            let mut worst = f64::INFINITY;
            for k in 0..=k_max {
                let r = norm(&v);
                let kf = k as f64;
                let lower = r0 / (1.0 + kf * b_star * r0.powf(e)).powf(1.0 / e);
                let upper = r0 / (1.0 + kf * a_star * r0.powf(e)).powf(1.0 / e);
                let margin = if k == 0 { 0.0 } else { (r / lower - 1.0).min(upper / r - 1.0) };
                if margin < -1e-14 {
                    violations += 1;
                }
                if k > 0 {
                    worst = worst.min(margin);
                }
                v = r_inner(&v);
            }
            (violations, worst)
        })
        .collect();
    let violations = per_point.iter().map(|p| p.0).sum();
    let (idx, worst) = per_point
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.1))
        .fold((None, f64::INFINITY), |acc, (i, w)| if w < acc.1 { (Some(i), w) } else { acc });
    IterateBoundReport {
        points: points.len(),
        k_max,
        violations,
        worst_margin: if worst.is_finite() { worst } else { 0.0 },
        worst_point: idx.map(|i| points[i].clone()),
    }
}

/// [`iterate_bound_check`] on the deterministic cone sample, with the inner map of `par`
/// frozen at `theta`.
pub fn iterate_bound_check_cone(
    par: &Parametrization,
    cone: &ConeSpec,
    a_star: f64,
    b_star: f64,
    k_max: usize,
) -> Result<IterateBoundReport> {
    if par.kind != SystemKind::Map {
        return Err(ParabolicError::InvalidInput("iterate bounds need a map".into()));
    }
    let points = cone.sample_points(cone.sample_density, 6);
    if points.is_empty() {
        return Err(ParabolicError::EmptyCone);
    }
    let theta = vec![0.0; par.angle_dim()];
    let norm = cone.norm;
    Ok(iterate_bound_check(
        |v| par.ru.eval(v, &theta).iter().zip(v).map(|(a, b)| a + b).collect(),
        &points,
        par.orders.0,
        a_star,
        b_star,
        k_max,
        move |v| norm.vector(v),
    ))
}

/// Result of [`shadow_validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    /// `sup_k |F^k(K(u0, theta0)) - K(R^k(u0, theta0))|`.
    pub max_error: f64,
    /// Error after each step (or at each sample time for flows).
    pub errors: Vec<f64>,
    /// `|(x, y)|` along the true orbit.
    pub xy_norm: Vec<f64>,
    /// `|y - K_y(R^k)|` along the true orbit.
    pub y_deviation: Vec<f64>,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn angle_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let t = p - q;
            (t - t.round()).abs()
        })
        .fold(0.0, f64::max)
}

/// Iterates the map from `K(u0, theta0) + offset` and compares against `K(R^k(u0, theta0))`.
///
/// `offset` perturbs `(x, y)`; the inner orbit must stay in `cone`.
pub fn shadow_validate(
    model: &Model,
    par: &Parametrization,
    u0: &[f64],
    theta0: &[f64],
    steps: usize,
    offset: Option<&[f64]>,
    cone: &ConeSpec,
) -> Result<ShadowReport> {
    if model.kind != SystemKind::Map {
        return Err(ParabolicError::InvalidInput("use shadow_validate_flow for flows".into()));
    }
    if !cone.contains(u0) {
        return Err(ParabolicError::OutsideCone(u0.to_vec()));
    }
    let (mut z, mut th) = par.embed(u0, theta0);
    if let Some(off) = offset {
        for (a, b) in z.iter_mut().zip(off) {
            *a += b;
        }
    }
    let mut u = u0.to_vec();
    let mut phase = theta0.to_vec();
    let n = model.n;
    let mut report = ShadowReport {
        max_error: 0.0,
        errors: Vec::with_capacity(steps),
        xy_norm: Vec::with_capacity(steps),
        y_deviation: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let (z2, th2) = model.apply(&z, &th);
        let (u2, p2) = par.inner_map(&u, &phase);
        if !cone.contains(&u2) {
            return Err(ParabolicError::ConeExit { t: (k + 1) as f64 });
        }
        z = z2;
        th = th2;
        u = u2;
        phase = p2;
        let (zk, tk) = par.embed(&u, &phase);
        let err = sup_diff(&z, &zk).max(angle_diff(&th, &tk));
        report.max_error = report.max_error.max(err);
        report.errors.push(err);
        report.xy_norm.push(z.iter().fold(0.0, |m, v| m.max(v.abs())));
        report.y_deviation.push(sup_diff(&z[n..], &zk[n..]));
    }
    Ok(report)
}

/// Flow counterpart of [`shadow_validate`]: integrates `X` from `K(u0, theta0)` and
/// `Y` from `(u0, theta0)`, comparing at `samples` equally spaced times up to `t_end`.
pub fn shadow_validate_flow(
    model: &Model,
    par: &Parametrization,
    u0: &[f64],
    theta0: &[f64],
    t_end: f64,
    samples: usize,
    cone: &ConeSpec,
) -> Result<ShadowReport> {
    if model.kind != SystemKind::Flow {
        return Err(ParabolicError::InvalidInput("shadow_validate_flow needs a flow".into()));
    }
    let (n, m, d) = (model.n, model.m, model.d);
    let ext = model.freq.extended();
    let a = model.angle_dim();
    let (z0, t0) = par.embed(u0, theta0);
    let mut y0 = z0;
    y0.extend(&t0);
    y0.extend_from_slice(u0);
    y0.extend_from_slice(&theta0[..d]);
    let time_phase = |t: f64| -> Vec<f64> { (d..a).map(|i| theta0[i] + ext[i] * t).collect() };
    let rhs = |t: f64, s: &[f64]| -> Vec<f64> {
        let tp = time_phase(t);
        let z = &s[..n + m];
        let mut th: Vec<f64> = s[n + m..n + m + d].to_vec();
        th.extend(&tp);
        let (dz, dth) = model.field(z, &th);
        let u = &s[n + m + d..n + m + d + n];
        let mut ph: Vec<f64> = s[n + m + d + n..].to_vec();
        ph.extend(&tp);
        let (du, dph) = par.inner_field(u, &ph);
        let mut out = dz;
        out.extend(dth);
        out.extend(du);
        out.extend(dph);
        out
    };
    let opts = OdeOptions {
        rtol: 1e-13,
        atol: 1e-16,
        ..OdeOptions::default()
    };
    let sol = integrate_plain(rhs, 0.0, &y0, t_end, &opts)?;
    let mut report = ShadowReport {
        max_error: 0.0,
        errors: Vec::new(),
        xy_norm: Vec::new(),
        y_deviation: Vec::new(),
    };
    for i in 1..=samples {
        let t = t_end * i as f64 / samples as f64;
        let s = sol.at(t);
        let u = &s[n + m + d..n + m + d + n];
        if !cone.contains(u) {
            return Err(ParabolicError::ConeExit { t });
        }
        let mut ph: Vec<f64> = s[n + m + d + n..].to_vec();
        ph.extend(time_phase(t));
        let (zk, tk) = par.embed(u, &ph);
        let err = sup_diff(&s[..n + m], &zk).max(angle_diff(&s[n + m..n + m + d], &tk));
        report.max_error = report.max_error.max(err);
        report.errors.push(err);
        report.xy_norm.push(s[..n + m].iter().fold(0.0, |m, v| m.max(v.abs())));
        report.y_deviation.push(sup_diff(&s[n..n + m], &zk[n..]));
    }
    Ok(report)
}

/// A map `G(x, y, theta) = (A x + f, B y + g, theta + omega + h)` whose linear part
/// has finite order.
#[derive(Debug, Clone)]
pub struct LinearPartMap {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub freq: Frequency,
    /// Nonlinear parts in `(x, y)` (degree at least two), with `d` angles.
    pub f: HomogeneousSum,
    pub g: HomogeneousSum,
    pub h: HomogeneousSum,
}

impl LinearPartMap {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.nrows()
    }
    pub fn d(&self) -> usize {
        self.freq.omega.len()
    }

    pub fn apply<S: ModelScalar>(&self, z: &[S], theta: &[S]) -> (Vec<S>, Vec<S>) {
        let (n, m) = (self.n(), self.m());
        let f = self.f.eval(z, theta);
        let g = self.g.eval(z, theta);
        let h = self.h.eval(z, theta);
        let mut out: Vec<S> = Vec::with_capacity(n + m);
        for i in 0..n {
            let mut acc = f[i].clone();
            for j in 0..n {
                acc = acc + z[j].clone() * self.a[(i, j)];
            }
            out.push(acc);
        }
        for i in 0..m {
            let mut acc = g[i].clone();
            for j in 0..m {
                acc = acc + z[n + j].clone() * self.b[(i, j)];
            }
            out.push(acc);
        }
        let th = (0..self.d())
            .map(|i| theta[i].clone() + self.freq.omega[i] + h[i].clone())
            .collect();
        (out, th)
    }

    pub fn iterate<S: ModelScalar>(&self, z: &[S], theta: &[S], times: usize) -> (Vec<S>, Vec<S>) {
        let mut z = z.to_vec();
        let mut th = theta.to_vec();
        for _ in 0..times {
            let (a, b) = self.apply(&z, &th);
            z = a;
            th = b;
        }
        (z, th)
    }

    /// Smallest `l <= MAX_ROOT_ORDER` with `A^l = Id` and `B^l = Id`.
    pub fn root_order(&self) -> Result<usize> {
        let (n, m) = (self.n(), self.m());
        let mut pa = DMatrix::identity(n, n);
        let mut pb = DMatrix::identity(m, m);
        for l in 1..=MAX_ROOT_ORDER {
            pa = &pa * &self.a;
            pb = &pb * &self.b;
            let da = (&pa - DMatrix::identity(n, n)).amax();
            let db = (&pb - DMatrix::identity(m, m)).amax();
            if da <= ROOT_TOL && db <= ROOT_TOL {
                return Ok(l);
            }
        }
        Err(ParabolicError::NotRootOfUnity(MAX_ROOT_ORDER))
    }

    /// Taylor expansion of `G^l` up to degree `order - 1`, as a model of the
    /// normal form. The orders `(N, M, P)` are read off the lowest nonzero degrees.
    pub fn power_model(&self, l: usize, order: usize, truncation: usize) -> Result<Model> {
        let (n, m, d) = (self.n(), self.m(), self.d());
        let nv = n + m;
        let k = truncation;
        let g_nodes = 4 * k + 4;
        let nodes = if d == 0 { vec![Vec::new()] } else { grid_nodes(d, g_nodes) };
        let top = order - 1;
        let per_node: Vec<(Vec<Jet>, Vec<Jet>)> = nodes
            .par_iter()
            .map(|theta| {
                let z: Vec<Jet> = (0..nv).map(|i| Jet::variable(nv, top, i, 0.0)).collect();
                let th: Vec<Jet> = theta.iter().map(|&t| Jet::constant(nv, top, t)).collect();
                let (z2, t2) = self.iterate(&z, &th, l);
                let dz = z2.into_iter().zip(&z).map(|(a, b)| a - b.clone()).collect();
                let dt = t2
                    .into_iter()
                    .zip(&th)
                    .enumerate()
                    .map(|(i, (a, b))| a - b.clone() - self.freq.omega[i] * l as f64)
                    .collect();
                (dz, dt)
            })
            .collect();
        let mut sums = [
            HomogeneousSum::new(nv, d, n, k),
            HomogeneousSum::new(nv, d, m, k),
            HomogeneousSum::new(nv, d, d, k),
        ];
        for (c, sum) in sums.iter_mut().enumerate() {
            if sum.target_dim == 0 {
                continue;
            }
            for deg in 1..=top {
                let samples: Vec<HomogeneousTerm> = per_node
                    .iter()
                    .map(|(dz, dt)| {
                        let jets: Vec<Jet> = match c {
                            0 => dz[..n].to_vec(),
                            1 => dz[n..].to_vec(),
                            _ => dt.clone(),
                        };
                        HomogeneousTerm::Poly(PolyTerm::from_jets(&jets, deg))
                    })
                    .collect();
                let mut t = if d == 0 {
                    FourierMap::constant(0, k, samples[0].clone())
                } else {
                    FourierMap::from_grid_samples(d, k, g_nodes, &samples)
                };
                t.prune(1e-14);
                if !t.is_zero(0.0) {
                    sum.add_term(t)?;
                }
            }
        }
        let lowest = |s: &HomogeneousSum| s.degrees().first().copied();
        let nn = lowest(&sums[0]).ok_or_else(|| ParabolicError::InvalidInput("G^l has no x nonlinearity".into()))?;
        let mm = lowest(&sums[1]).unwrap_or(nn).min(nn);
        let pp = lowest(&sums[2]).unwrap_or(nn).min(nn);
        let omega: Vec<f64> = self.freq.omega.iter().map(|w| (w * l as f64).rem_euclid(1.0)).collect();
        let [f, g, h] = sums;
        Model::new(SystemKind::Map, n, m, d, (nn, mm, pp), Frequency::new(omega), f, g, h)
    }
}

/// Parametrizations `G^j o K`, `j < l`, of the stable set of a map whose linear part is a root of unity.
#[derive(Debug, Clone)]
pub struct BranchSet {
    pub l: usize,
    pub map: LinearPartMap,
    pub power: Model,
    pub par: Parametrization,
}

impl BranchSet {
    /// Point of branch `j` at `(u, Theta)`.
    pub fn branch_point(&self, j: usize, u: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (z, th) = self.par.embed(u, theta);
        self.map.iterate(&z, &th, j)
    }

    /// Index of the branch closest to `(z, theta)` and its `y`-distance, for `n = 1`.
    ///
    /// For each branch the parameter `(u, Theta)` is found by Newton's method on the
    /// `x` and angle coordinates; the distance is then measured in `y`.
    pub fn classify(&self, z: &[f64], theta: &[f64], cone: &ConeSpec) -> Option<(usize, f64)> {
        let n = self.map.n();
        if n != 1 {
            return None;
        }
        let d = self.map.d();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.l {
            let Some((u, th)) = self.invert_branch(j, z[0], &theta[..d], cone) else {
                continue;
            };
            let (zb, _) = self.branch_point(j, &[u], &th);
            let dist = sup_diff(&z[n..], &zb[n..]);
            if best.is_none_or(|b| dist < b.1) {
                best = Some((j, dist));
            }
        }
        best
    }

    fn invert_branch(&self, j: usize, x: f64, theta: &[f64], cone: &ConeSpec) -> Option<(f64, Vec<f64>)> {
        let d = theta.len();
        let dim = 1 + d;
        let target: Vec<f64> = std::iter::once(x).chain(theta.iter().copied()).collect();
        let eval = |p: &[f64]| -> Vec<f64> {
            let (zb, tb) = self.branch_point(j, &p[..1], &p[1..]);
            std::iter::once(zb[0]).chain(tb).collect()
        };
        let start: Vec<f64> = std::iter::once(x.abs().max(1e-12)).chain(theta.iter().copied()).collect();
        let mut p = start;
        for _ in 0..60 {
            let v = eval(&p);
            let res: Vec<f64> = v.iter().zip(&target).map(|(a, b)| a - b).collect();
            if res.iter().fold(0.0f64, |m, r| m.max(r.abs())) <= NEWTON_TOL * x.abs().max(1e-300) {
                break;
            }
            let jac = DMatrix::from_fn(dim, dim, |r, c| {
                let h = 1e-7 * p[c].abs().max(1e-7);
                let mut q = p.clone();
                q[c] += h;
                (eval(&q)[r] - v[r]) / h
            });
            let step = jac.lu().solve(&nalgebra::DVector::from_vec(res))?;
            for (pi, si) in p.iter_mut().zip(step.iter()) {
                *pi -= si;
            }
        }
        let v = eval(&p);
        let ok = (v[0] - x).abs() <= 1e-9 * x.abs().max(1e-12) && cone.contains(&p[..1]);
        ok.then(|| (p[0], p[1..].to_vec()))
    }

    /// Fraction of the first `iterates` points of the `G`-orbit of `z` whose nearest
    /// branch index advances by one (mod `l`) at every step.
    pub fn orbit_alternation(&self, z: &[f64], theta: &[f64], iterates: usize, cone: &ConeSpec) -> (usize, usize) {
        let mut z = z.to_vec();
        let mut th = theta.to_vec();
        let mut prev = self.classify(&z, &th, cone).map(|b| b.0);
        let mut good = 0;
        for _ in 0..iterates {
            let (z2, t2) = self.map.apply(&z, &th);
            z = z2;
            th = t2;
            let cur = self.classify(&z, &th, cone).map(|b| b.0);
            if let (Some(p), Some(c)) = (prev, cur) {
                if c == (p + 1) % self.l {
                    good += 1;
                }
            }
            prev = cur;
        }
        (good, iterates)
    }
}

/// Stable-set branches of `G` through the parametrization of `G^l`, `l` the order of the linear part.
pub fn roots_of_unity_branches(
    map: &LinearPartMap,
    j_target: usize,
    expansion_order: usize,
    truncation: usize,
    cone: &ConeSpec,
) -> Result<BranchSet> {
    let l = map.root_order()?;
    let power = map.power_model(l, expansion_order, truncation)?;
    let par = approximate(
        &power,
        j_target,
        &ApproxOptions {
            enforce_hypotheses: true,
            cone: cone.clone(),
        },
    )?;
    Ok(BranchSet {
        l,
        map: map.clone(),
        power,
        par,
    })
}
