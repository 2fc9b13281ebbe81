//! A-posteriori refinement `Delta = -S[N[Delta]]` on a radius × angle grid.
//!
//! The correction `Delta` to `K` solves
//! `F(K + Delta) = (K + Delta) o R`. Writing `M = blockdiag(Id + D_{xy}(f, g)(K), Id)`
//! and `N[Delta] = F(K + Delta) - K o R - M Delta`, it is a fixed point of
//! `Delta = -S[N[Delta]]`, where `S[T]` solves `M S - S o R = T`:
//!
//! `S[T](v) = sum_j M(v)^{-1} ... M(R^j v)^{-1} T(R^j v)`.
//!
//! The series is summed by marching outwards over a geometric radius grid: at
//! radius `r_i` the sum runs until the orbit drops below `r_{i-1}`, and the
//! remainder is `P_{J-1} S(R^J v)` with `S` interpolated from the rows already
//! computed. Below the smallest radius `S` is extended homogeneously,
//! `S(w, psi) = (w / r_0)^kappa S(r_0, psi)`, which turns the first row into a
//! small linear system over the angle nodes.
//!
//! Supported: maps with `n = 1` and at most one angle.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Model, Parametrization, SystemKind};
use crate::error::{ParabolicError, Result};
use crate::homogeneous::FlatSum;

/// Bound on inner-map steps for one grid point.
const MAX_ORBIT_STEPS: usize = 50_000_000;

/// Grid and iteration settings for [`refine_fixed_point`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Largest radius of the grid.
    pub rho: f64,
    pub radii: usize,
    /// Ratio between consecutive radii.
    pub ratio: f64,
    /// Angle nodes; forced odd, and one when the model has no angle.
    pub angles: usize,
    /// Number of sweeps `Delta_{k+1} = -S[N[Delta_k]]`.
    pub iterations: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            rho: 1e-2,
            radii: 4,
            ratio: 1.4,
            angles: 11,
            iterations: 2,
        }
    }
}

/// Values of a correction on the grid, stored as `Delta / v^kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    /// Ascending.
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
    pub kappa: f64,
    pub dim: usize,
    /// `scaled[i][k][c]`.
    pub scaled: Vec<Vec<Vec<f64>>>,
}

fn dirichlet_weights(angles: &[f64], psi: f64) -> Vec<f64> {
    let n = angles.len();
    if n == 1 {
        return vec![1.0];
    }
    angles
        .iter()
        .map(|a| {
            let x = psi - a;
            let s = (PI * x).sin();
            if s.abs() < 1e-14 {
                let c = (PI * x).cos();
                ((n as f64) * PI * x).cos() / c
            } else {
                (n as f64 * PI * x).sin() / (n as f64 * s)
            }
        })
        .collect()
}

fn lagrange_weights(nodes: &[f64], x: f64) -> Vec<f64> {
    (0..nodes.len())
        .map(|i| {
            nodes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &xj)| (x - xj) / (nodes[i] - xj))
                .product()
        })
        .collect()
}

impl GridFunction {
    pub fn zeros(radii: Vec<f64>, angles: Vec<f64>, kappa: f64, dim: usize) -> Self {
        let scaled = vec![vec![vec![0.0; dim]; angles.len()]; radii.len()];
        Self {
            radii,
            angles,
            kappa,
            dim,
            scaled,
        }
    }

    /// Interpolated value using the first `rows` radii only.
    fn eval_rows(&self, rows: usize, v: f64, psi: f64) -> Vec<f64> {
        let aw = dirichlet_weights(&self.angles, psi);
        let mut out = vec![0.0; self.dim];
        let (stencil, rw): (Vec<usize>, Vec<f64>) = if v <= self.radii[0] || rows == 1 {
            (vec![0], vec![1.0])
        } else if v >= self.radii[rows - 1] {
            (vec![rows - 1], vec![1.0])
        } else {
            let idx = self.radii[..rows].partition_point(|&r| r <= v) - 1;
            let len = rows.min(4);
            let start = idx.saturating_sub(1).min(rows - len);
            let st: Vec<usize> = (start..start + len).collect();
            let nodes: Vec<f64> = st.iter().map(|&i| self.radii[i].ln()).collect();
            let w = lagrange_weights(&nodes, v.ln());
            (st, w)
        };
        for (&i, &wr) in stencil.iter().zip(&rw) {
            for (k, &wa) in aw.iter().enumerate() {
                let w = wr * wa;
                for (o, x) in out.iter_mut().zip(&self.scaled[i][k]) {
                    *o += w * x;
                }
            }
        }
        let s = v.powf(self.kappa);
        out.iter_mut().for_each(|x| *x *= s);
        out
    }

    pub fn eval(&self, v: f64, psi: f64) -> Vec<f64> {
        self.eval_rows(self.radii.len(), v, psi)
    }

    /// `max |Delta| / v^kappa` over the grid.
    pub fn weighted_norm(&self) -> f64 {
        self.scaled
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    pub fn difference(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (a, b) in out.scaled.iter_mut().flatten().zip(other.scaled.iter().flatten()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x -= y;
            }
        }
        out
    }
}

struct Flats {
    kx: FlatSum,
    ky: FlatSum,
    kt: FlatSum,
    ru: FlatSum,
    rt: FlatSum,
    f: FlatSum,
    g: FlatSum,
    h: FlatSum,
}

struct Ctx<'a> {
    par: &'a Parametrization,
    flat: Flats,
    n: usize,
    m: usize,
    d: usize,
}

/// Per-point data of the linearized problem.
struct PointData {
    t: Vec<f64>,
    m_inv: DMatrix<f64>,
}

impl Ctx<'_> {
    fn dim(&self) -> usize {
        self.n + self.m + self.d
    }

    fn theta(&self, psi: f64) -> Vec<f64> {
        if self.d == 0 {
            vec![]
        } else {
            vec![psi]
        }
    }

    fn inner(&self, v: f64, psi: f64) -> (f64, f64) {
        let th = self.theta(psi);
        let v2 = v + self.flat.ru.eval(&[v], &th)[0];
        let psi2 = if self.d == 0 {
            psi
        } else {
            (psi + self.par.freq.omega[0] + self.flat.rt.eval(&[v], &th)[0]).rem_euclid(1.0)
        };
        (v2, psi2)
    }

    /// `(kx, ky, kt)` stacked.
    fn k_corr(&self, v: f64, psi: f64) -> Vec<f64> {
        let th = self.theta(psi);
        let u = [v];
        let mut out = self.flat.kx.eval(&u, &th);
        out.extend(self.flat.ky.eval(&u, &th));
        out.extend(self.flat.kt.eval(&u, &th));
        out
    }

    /// `(f, g, h)` at `K(v, psi) + delta` and the Jacobian `D_{xy}(f, g)` at `K(v, psi)`.
    fn model_at(&self, v: f64, psi: f64, kc: &[f64], delta: &[f64], jac: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let (n, m, d) = (self.n, self.m, self.d);
        let mut z: Vec<f64> = vec![v + kc[0]];
        z.extend_from_slice(&kc[n..n + m]);
        let th: Vec<f64> = (0..d).map(|i| psi + kc[n + m + i]).collect();
        let j = jac.then(|| {
            let (_, jf) = self.flat.f.eval_with_jacobian(&z, &th);
            let (_, jg) = self.flat.g.eval_with_jacobian(&z, &th);
            let rows: Vec<Vec<f64>> = jf.into_iter().chain(jg).collect();
            DMatrix::from_fn(n + m, n + m, |i, k| rows[i][k])
        });
        let zz: Vec<f64> = z.iter().zip(delta).map(|(a, b)| a + b).collect();
        let tt: Vec<f64> = th.iter().zip(&delta[n + m..]).map(|(a, b)| a + b).collect();
        let mut out = self.flat.f.eval(&zz, &tt);
        out.extend(self.flat.g.eval(&zz, &tt));
        out.extend(self.flat.h.eval(&zz, &tt));
        (out, j)
    }

    fn inner_corr(&self, v: f64, psi: f64) -> Vec<f64> {
        let th = self.theta(psi);
        let mut out = self.flat.ru.eval(&[v], &th);
        out.extend(vec![0.0; self.m]);
        out.extend(self.flat.rt.eval(&[v], &th));
        out
    }

    /// `N[Delta](v, psi)` and `M(v, psi)^{-1}`.
    fn point(&self, v: f64, psi: f64, delta: &[f64]) -> Result<PointData> {
        let (n, m) = (self.n, self.m);
        let dim = self.dim();
        let kc = self.k_corr(v, psi);
        let (rhs, jac) = self.model_at(v, psi, &kc, delta, true);
        let jac = jac.expect("requested");
        let (v2, p2) = self.inner(v, psi);
        let kc2 = self.k_corr(v2, p2);
        let rc = self.inner_corr(v, psi);
        let jd = &jac * DVector::from_column_slice(&delta[..n + m]);
        let t: Vec<f64> = (0..dim)
            .map(|c| {
                let lin = if c < n + m { jd[c] } else { 0.0 };
                kc[c] + rhs[c] - rc[c] - kc2[c] - lin
            })
            .collect();
        let mut mm = DMatrix::identity(dim, dim);
        mm.view_mut((0, 0), (n + m, n + m)).copy_from(&(DMatrix::identity(n + m, n + m) + jac));
        let m_inv = mm
            .try_inverse()
            .ok_or_else(|| ParabolicError::NonContraction(f64::INFINITY))?;
        Ok(PointData { t, m_inv })
    }

    /// `F(K + Delta) - (K + Delta) o R` at a grid point.
    fn residual(&self, v: f64, psi: f64, delta: &GridFunction) -> Vec<f64> {
        let kc = self.k_corr(v, psi);
        let dh = delta.eval(v, psi);
        let (rhs, _) = self.model_at(v, psi, &kc, &dh, false);
        let (v2, p2) = self.inner(v, psi);
        let kc2 = self.k_corr(v2, p2);
        let d2 = delta.eval(v2, p2);
        let rc = self.inner_corr(v, psi);
        (0..self.dim())
            .map(|c| kc[c] + dh[c] + rhs[c] - rc[c] - kc2[c] - d2[c])
            .collect()
    }

    /// Applies `-S o N` to `current`, producing the next correction on the same grid.
    fn sweep(&self, current: &GridFunction) -> Result<(GridFunction, usize)> {
        let dim = self.dim();
        let radii = current.radii.clone();
        let angles = current.angles.clone();
        let kappa = current.kappa;
        let ratio = radii.get(1).map_or(2.0, |r1| r1 / radii[0]);
        let mut next = GridFunction::zeros(radii.clone(), angles.clone(), kappa, dim);
        let mut steps_total = 0;
        for i in 0..radii.len() {
            let r_stop = if i == 0 { radii[0] / ratio } else { radii[i - 1] };
            type Row = (Vec<f64>, DMatrix<f64>, f64, f64, usize);
            let rows: Vec<Row> = angles
                .par_iter()
                .map(|&psi0| -> Result<Row> {
                    let (mut v, mut psi) = (radii[i], psi0);
                    let first = self.point(v, psi, &current.eval(v, psi))?;
                    let mut p = first.m_inv.clone();
                    let mut acc = &p * DVector::from_vec(first.t);
                    let mut steps = 0;
                    loop {
                        let (v2, p2) = self.inner(v, psi);
                        steps += 1;
                        if !(v2 < v) || steps > MAX_ORBIT_STEPS {
                            return Err(ParabolicError::InvalidInput(format!(
                                "inner map does not contract at v = {v:.3e}"
                            )));
                        }
                        v = v2;
                        psi = p2;
                        if v < r_stop {
                            break;
                        }
                        let pd = self.point(v, psi, &current.eval(v, psi))?;
                        p = &p * &pd.m_inv;
                        acc += &p * DVector::from_vec(pd.t);
                    }
                    Ok((acc.iter().copied().collect(), p, v, psi, steps))
                })
                .collect::<Result<_>>()?;
            steps_total += rows.iter().map(|r| r.4).sum::<usize>();
            if i == 0 {
                let na = angles.len();
                let size = na * dim;
                let r0k = radii[0].powf(kappa);
                let mut a = DMatrix::identity(size, size);
                let mut b = DVector::zeros(size);
                for (k, (acc, p, w, psi, _)) in rows.iter().enumerate() {
                    let scale = (w / radii[0]).powf(kappa);
                    let aw = dirichlet_weights(&angles, *psi);
                    for (l, wl) in aw.iter().enumerate() {
                        for r in 0..dim {
                            for c in 0..dim {
                                a[(k * dim + r, l * dim + c)] -= scale * wl * p[(r, c)];
                            }
                        }
                    }
                    for r in 0..dim {
                        b[k * dim + r] = acc[r] / r0k;
                    }
                }
                let x = a
                    .lu()
                    .solve(&b)
                    .ok_or_else(|| ParabolicError::NonContraction(f64::INFINITY))?;
                for k in 0..na {
                    next.scaled[0][k] = (0..dim).map(|r| -x[k * dim + r]).collect();
                }
            } else {
                let rk = radii[i].powf(kappa);
                for (k, (acc, p, w, psi, _)) in rows.iter().enumerate() {
                    let tail = next.eval_rows(i, *w, *psi).iter().map(|x| -x).collect::<Vec<_>>();
                    let total = DVector::from_vec(acc.clone()) + p * DVector::from_vec(tail);
                    next.scaled[i][k] = total.iter().map(|x| -x / rk).collect();
                }
            }
        }
        Ok((next, steps_total))
    }
}

/// Diagnostics of [`refine_fixed_point`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    /// `max |F(K) - K o R|` over the grid.
    pub residual_before: f64,
    /// `max |F(K + Delta) - (K + Delta) o R|` over the grid.
    pub residual_after: f64,
    /// Residuals weighted by `v^{-q}`.
    pub weighted_before: f64,
    pub weighted_after: f64,
    /// `|Delta_{k+1} - Delta_k| / |Delta_k - Delta_{k-1}|` in the `v^{-kappa}` weighted norm.
    pub lipschitz: Vec<f64>,
    /// `|Delta_k|` in the weighted norm.
    pub correction_norms: Vec<f64>,
    pub orbit_steps: usize,
    pub improved: bool,
}

/// `K + Delta` together with the refinement diagnostics.
#[derive(Debug, Clone)]
pub struct RefinedParametrization {
    pub base: Parametrization,
    pub correction: GridFunction,
    pub report: RefineReport,
}

impl RefinedParametrization {
    /// `(x, y)` and angle of `K(v, psi) + Delta(v, psi)`.
    pub fn embed(&self, v: f64, psi: f64) -> (Vec<f64>, Vec<f64>) {
        let theta: Vec<f64> = if self.base.d == 0 { vec![] } else { vec![psi] };
        let (mut z, mut th) = self.base.embed(&[v], &theta);
        let dl = self.correction.eval(v, psi);
        let nm = z.len();
        for (a, b) in z.iter_mut().zip(&dl) {
            *a += b;
        }
        for (a, b) in th.iter_mut().zip(&dl[nm..]) {
            *a += b;
        }
        (z, th)
    }
}

/// Runs `opts.iterations` sweeps of `Delta -> -S[N[Delta]]` starting from zero.
pub fn refine_fixed_point(model: &Model, par: &Parametrization, opts: &RefineOptions) -> Result<RefinedParametrization> {
    if model.kind != SystemKind::Map || model.n != 1 || model.d > 1 || model.angle_dim() != model.d {
        return Err(ParabolicError::BackendUnsupported(
            "refinement supports maps with n = 1 and at most one angle".into(),
        ));
    }
    if opts.radii == 0 || opts.iterations == 0 || opts.ratio <= 1.0 {
        return Err(ParabolicError::InvalidInput("refinement grid is empty".into()));
    }
    let flat = Flats {
        kx: FlatSum::new(&par.kx)?,
        ky: FlatSum::new(&par.ky)?,
        kt: FlatSum::new(&par.kt)?,
        ru: FlatSum::new(&par.ru)?,
        rt: FlatSum::new(&par.rt)?,
        f: FlatSum::new(&model.f)?,
        g: FlatSum::new(&model.g)?,
        h: FlatSum::new(&model.h)?,
    };
    let ctx = Ctx {
        par,
        flat,
        n: model.n,
        m: model.m,
        d: model.d,
    };
    let (nn, _, _) = model.orders;
    let q = (par.order + nn) as f64;
    let kappa = q - nn as f64 + 1.0;
    let radii: Vec<f64> = (0..opts.radii)
        .map(|i| opts.rho * opts.ratio.powi(-((opts.radii - 1 - i) as i32)))
        .collect();
    let na = if model.d == 0 { 1 } else { opts.angles.max(1) | 1 };
    let angles: Vec<f64> = (0..na).map(|k| k as f64 / na as f64).collect();
    let dim = ctx.dim();

    let grid_residual = |delta: &GridFunction| -> (f64, f64) {
        let mut plain = 0.0f64;
        let mut weighted = 0.0f64;
        for &r in &radii {
            for &psi in &angles {
                let e = ctx.residual(r, psi, delta).iter().fold(0.0f64, |m, x| m.max(x.abs()));
                plain = plain.max(e);
                weighted = weighted.max(e / r.powf(q));
            }
        }
        (plain, weighted)
    };

    let zero = GridFunction::zeros(radii.clone(), angles.clone(), kappa, dim);
    let (residual_before, weighted_before) = grid_residual(&zero);
    let mut history = vec![zero];
    let mut lipschitz = Vec::new();
    let mut steps = 0;
    for _ in 0..opts.iterations {
        let (next, s) = ctx.sweep(history.last().expect("nonempty"))?;
        steps += s;
        history.push(next);
        let k = history.len() - 1;
        if k >= 2 {
            let num = history[k].difference(&history[k - 1]).weighted_norm();
            let den = history[k - 1].difference(&history[k - 2]).weighted_norm();
            let ratio = if den > 0.0 { num / den } else { 0.0 };
            lipschitz.push(ratio);
            if ratio > 1.0 {
                return Err(ParabolicError::NonContraction(ratio));
            }
        }
    }
    let correction = history.last().expect("nonempty").clone();
    let (residual_after, weighted_after) = grid_residual(&correction);
    let report = RefineReport {
        residual_before,
        residual_after,
        weighted_before,
        weighted_after,
        lipschitz,
        correction_norms: history.iter().map(|h| h.weighted_norm()).collect(),
        orbit_steps: steps,
        improved: residual_after <= residual_before,
    };
    Ok(RefinedParametrization {
        base: par.clone(),
        correction,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::super::approximate_map;
    use super::super::test_models::*;
    use super::*;

    #[test]
    fn interpolation_reproduces_homogeneous_profiles() {
        let radii: Vec<f64> = (0..5).map(|i| 1e-2 * 1.5f64.powi(i)).collect();
        let angles: Vec<f64> = (0..7).map(|k| k as f64 / 7.0).collect();
        let mut g = GridFunction::zeros(radii.clone(), angles.clone(), 2.0, 1);
        let prof = |v: f64, psi: f64| (1.0 + 0.1 * v.ln()) * (1.0 + 0.3 * (2.0 * PI * psi).cos() - 0.2 * (4.0 * PI * psi).sin());
        for (i, r) in radii.iter().enumerate() {
            for (k, a) in angles.iter().enumerate() {
                g.scaled[i][k] = vec![prof(*r, *a)];
            }
        }
        for (v, psi) in [(0.013, 0.11), (0.031, 0.77), (0.05, 0.5)] {
            let exact = v * v * prof(v, psi);
            assert!((g.eval(v, psi)[0] - exact).abs() < 1e-9 * exact.abs(), "{v} {psi}");
        }
        let below = g.eval(5e-3, 0.2)[0];
        assert!((below - 25e-6 * prof(1e-2, 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_correction() {
        let model = invariant_toy();
        let par = approximate_map(&model, 2, &positive_cone()).unwrap();
        let opts = RefineOptions {
            rho: 0.05,
            radii: 3,
            angles: 3,
            ..RefineOptions::default()
        };
        let out = refine_fixed_point(&model, &par, &opts).unwrap();
        assert!(out.report.residual_before <= 1e-18);
        let worst = out
            .correction
            .radii
            .iter()
            .map(|&r| out.correction.eval(r, 0.3).iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-13, "{worst}");
        assert!(out.report.residual_after <= 1e-18);
    }

    /// Direct summation of `-sum_j P_j E(R^j v)`, with `E` assembled row by row from the
    /// parametrization components and the Jacobian from the public model API.
    fn direct_first_iterate(model: &Model, par: &Parametrization, v: f64, psi: f64, terms: usize) -> Vec<f64> {
        let residual = |v: f64, psi: f64| -> Vec<f64> {
            let th = [psi];
            let (z, tk) = par.embed(&[v], &th);
            let (f, g, h) = model.rhs(&z, &tk);
            let (u2, p2) = par.inner_map(&[v], &th);
            let kx = |u: &[f64], t: &[f64]| par.kx.eval(u, t)[0];
            let ky = |u: &[f64], t: &[f64]| par.ky.eval(u, t)[0];
            let kt = |u: &[f64], t: &[f64]| par.kt.eval(u, t)[0];
            vec![
                kx(&[v], &th) + f[0] - par.ru.eval(&[v], &th)[0] - kx(&u2, &p2),
                ky(&[v], &th) + g[0] - ky(&u2, &p2),
                kt(&[v], &th) + h[0] - par.rt.eval(&[v], &th)[0] - kt(&u2, &p2),
            ]
        };
        let mut p = DMatrix::<f64>::identity(3, 3);
        let mut acc = DVector::<f64>::zeros(3);
        let (mut v, mut psi) = (v, psi);
        for _ in 0..terms {
            let (z, th) = par.embed(&[v], &[psi]);
            let mut mm = DMatrix::<f64>::identity(3, 3);
            mm.view_mut((0, 0), (2, 2)).copy_from(&model.xy_jacobian(&z, &th));
            p *= mm.try_inverse().unwrap();
            acc += &p * DVector::from_vec(residual(v, psi));
            let (u2, p2) = par.inner_map(&[v], &[psi]);
            v = u2[0];
            psi = p2[0].rem_euclid(1.0);
        }
        acc.iter().map(|x| -x).collect()
    }

    #[test]
    fn first_iterate_matches_direct_series() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 5, &positive_cone()).unwrap();
        let opts = RefineOptions {
            rho: 0.06,
            radii: 6,
            ratio: 1.4,
            angles: 9,
            iterations: 1,
        };
        let out = refine_fixed_point(&model, &par, &opts).unwrap();
        let g = &out.correction;
        let mut checked = 0;
        for (i, &r) in g.radii.iter().enumerate().skip(4) {
            for k in [0, 2, 4, 6, 8] {
                let psi = g.angles[k];
                let want = direct_first_iterate(&model, &par, r, psi, 40_000);
                let got: Vec<f64> = g.scaled[i][k].iter().map(|x| x * r.powf(g.kappa)).collect();
                let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() <= 1e-3 * scale, "r {r} psi {psi} c {c}: {} vs {}", got[c], want[c]);
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn sweeps_contract_and_reduce_the_residual() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 3, &positive_cone()).unwrap();
        let opts = RefineOptions {
            rho: 3e-2,
            radii: 5,
            ratio: 1.4,
            angles: 7,
            iterations: 2,
        };
        let out = refine_fixed_point(&model, &par, &opts).unwrap();
        let rep = &out.report;
        assert!(rep.lipschitz[0] < 0.1, "{:?}", rep.lipschitz);
        assert!(rep.residual_after * 10.0 <= rep.residual_before, "{rep:?}");
        let (z, _) = out.embed(3e-2, 0.0);
        let (z0, _) = par.embed(&[3e-2], &[0.0]);
        assert!((z[0] - z0[0]).abs() > 0.0);
    }

    #[test]
    fn unsupported_models_are_rejected() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 2, &positive_cone()).unwrap();
        let opts = RefineOptions {
            iterations: 0,
            ..RefineOptions::default()
        };
        assert!(matches!(
            refine_fixed_point(&model, &par, &opts),
            Err(ParabolicError::InvalidInput(_))
        ));
    }
}
