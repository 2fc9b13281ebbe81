//! Averaging change of variables removing the angle dependence of low-order terms.

use std::sync::Arc;

use rayon::prelude::*;

use super::{Model, SystemKind};
use crate::error::{ParabolicError, Result};
use crate::fourier::{grid_nodes, solve_small_divisors_map, Block, FourierMap};
use crate::homogeneous::{ClosureTail, HomogeneousSum, HomogeneousTerm, ModelScalar, PolyTerm};
use crate::jet::{Jet, Scalar};

/// Fixed-point iterations used when inverting the change of variables on floats.
const INVERSE_MAX_ITER: usize = 200;
const INVERSE_TOL: f64 = 1e-16;
/// Fourier coefficients below this are treated as quadrature noise.
const REDUCE_PRUNE_TOL: f64 = 1e-14;

/// Near-identity change `C(z, theta) = (z + c_z(z, theta), theta + c_theta(z, theta))`
/// with `z = (x, y)`.
#[derive(Debug, Clone)]
pub struct ChangeOfVariables {
    pub cz: HomogeneousSum,
    pub ct: HomogeneousSum,
}

impl ChangeOfVariables {
    pub fn is_identity(&self) -> bool {
        self.cz.terms().is_empty() && self.ct.terms().is_empty()
    }

    /// `C(z, theta)`.
    pub fn push_forward<S: ModelScalar>(&self, z: &[S], theta: &[S]) -> (Vec<S>, Vec<S>) {
        let dz = self.cz.eval(z, theta);
        let dt = self.ct.eval(z, theta);
        (
            z.iter().zip(dz).map(|(a, b)| a.clone() + b).collect(),
            theta.iter().zip(dt).map(|(a, b)| a.clone() + b).collect(),
        )
    }

    /// `C^{-1}(w, psi)` by fixed-point iteration of `z = w - c_z(z, phi)`, `phi = psi - c_theta(z, phi)`.
    ///
    /// On jets each pass fixes at least one more order, so `iterations` should
    /// exceed the jet order.
    ///
    /// With `early_exit` the iteration stops once the constant terms settle,
    /// which is only meaningful on floats.
    pub fn pull_back<S: ModelScalar>(&self, w: &[S], psi: &[S], iterations: usize, early_exit: bool) -> (Vec<S>, Vec<S>) {
        let mut z = w.to_vec();
        let mut phi = psi.to_vec();
        for _ in 0..iterations {
            let dz = self.cz.eval(&z, &phi);
            let dt = self.ct.eval(&z, &phi);
            let z2: Vec<S> = w.iter().zip(dz).map(|(a, b)| a.clone() - b).collect();
            let phi2: Vec<S> = psi.iter().zip(dt).map(|(a, b)| a.clone() - b).collect();
            let change = z2
                .iter()
                .zip(&z)
                .chain(phi2.iter().zip(&phi))
                .map(|(a, b)| (a.value() - b.value()).abs())
                .fold(0.0, f64::max);
            z = z2;
            phi = phi2;
            if early_exit && change <= INVERSE_TOL {
                break;
            }
        }
        (z, phi)
    }

    /// Float inverse iterated to convergence.
    pub fn pull_back_f64(&self, w: &[f64], psi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.pull_back(w, psi, INVERSE_MAX_ITER, true)
    }
}

/// `C^{-1} o F o C` minus the identity and `omega`, evaluated generically.
fn conjugated_increment<S: ModelScalar>(
    model: &Model,
    change: &ChangeOfVariables,
    z: &[S],
    theta: &[S],
    iterations: usize,
    early_exit: bool,
) -> (Vec<S>, Vec<S>) {
    let (cz, ct) = change.push_forward(z, theta);
    let (f, g, h) = model.rhs(&cz, &ct);
    let w: Vec<S> = cz.iter().zip(f.iter().chain(&g)).map(|(a, b)| a.clone() + b.clone()).collect();
    let psi: Vec<S> = (0..model.d)
        .map(|i| ct[i].clone() + model.freq.omega[i] + h[i].clone())
        .collect();
    let (z2, th2) = change.pull_back(&w, &psi, iterations, early_exit);
    (
        z2.into_iter().zip(z).map(|(a, b)| a - b.clone()).collect(),
        th2.into_iter()
            .zip(theta)
            .enumerate()
            .map(|(i, (a, b))| a - b.clone() - model.freq.omega[i])
            .collect(),
    )
}

fn conjugacy_residual(
    model: &Model,
    change: &ChangeOfVariables,
    head_z: &HomogeneousSum,
    head_t: &HomogeneousSum,
    z: &[Jet],
    theta: &[f64],
) -> (Vec<Jet>, Vec<Jet>) {
    let proto = &z[0];
    let th: Vec<Jet> = theta.iter().map(|&t| proto.constant_like(t)).collect();
    let (cz, ct) = change.push_forward(z, &th);
    let (f, g, h) = model.rhs(&cz, &ct);
    let fz: Vec<Jet> = f.into_iter().chain(g).collect();
    let hat_z = head_z.eval(z, &th);
    let hat_t = head_t.eval(z, &th);
    let z_new: Vec<Jet> = z.iter().zip(&hat_z).map(|(a, b)| a.clone() + b.clone()).collect();
    let th_new: Vec<Jet> = (0..model.d)
        .map(|i| th[i].clone() + model.freq.omega[i] + hat_t[i].clone())
        .collect();
    let cz_then = change.cz.eval(&z_new, &th_new);
    let ct_then = change.ct.eval(&z_new, &th_new);
    let dz = change.cz.eval(z, &th);
    let dt = change.ct.eval(z, &th);
    let ez = (0..z.len())
        .map(|i| dz[i].clone() + fz[i].clone() - hat_z[i].clone() - cz_then[i].clone())
        .collect();
    let et = (0..model.d)
        .map(|i| dt[i].clone() + h[i].clone() - hat_t[i].clone() - ct_then[i].clone())
        .collect();
    (ez, et)
}

fn degree_part(per_node: &[Vec<Jet>], deg: usize, d: usize, k: usize) -> FourierMap<HomogeneousTerm> {
    let samples: Vec<HomogeneousTerm> = per_node
        .iter()
        .map(|jets| HomogeneousTerm::Poly(PolyTerm::from_jets(jets, deg)))
        .collect();
    let mut t = if d == 0 {
        FourierMap::constant(0, k, samples[0].clone())
    } else {
        FourierMap::from_grid_samples(d, k, 4 * k + 4, &samples)
    };
    t.prune(REDUCE_PRUNE_TOL);
    t
}

/// Transforms a map model so that every homogeneous term of degree below
/// `target_order` is angle independent.
///
/// The oscillatory part of the conjugacy error at each degree goes into the
/// change of variables through a small-divisors solve; its average goes into the
/// new model. The remainder of the new model is stored as an exact tail
/// `C^{-1} o F o C - head` of order `target_order`.
pub fn reduce_angle_dependence(model: &Model, target_order: usize) -> Result<(Model, ChangeOfVariables)> {
    if model.kind != SystemKind::Map {
        return Err(ParabolicError::InvalidInput("angle reduction is implemented for maps".into()));
    }
    let nv = model.n + model.m;
    let d = model.d;
    let k = model.truncation;
    let mut change = ChangeOfVariables {
        cz: HomogeneousSum::new(nv, d, nv, k),
        ct: HomogeneousSum::new(nv, d, d, k),
    };
    let mut head_z = HomogeneousSum::new(nv, d, nv, k);
    let mut head_t = HomogeneousSum::new(nv, d, d, k);
    let nodes = if d == 0 { vec![Vec::new()] } else { grid_nodes(d, 4 * k + 4) };
    let lowest = model.orders.1.min(model.orders.2);
    for deg in lowest..target_order {
        let per_node: Vec<(Vec<Jet>, Vec<Jet>)> = nodes
            .par_iter()
            .map(|theta| {
                let z: Vec<Jet> = (0..nv).map(|i| Jet::variable(nv, deg, i, 0.0)).collect();
                conjugacy_residual(model, &change, &head_z, &head_t, &z, theta)
            })
            .collect();
        let ez: Vec<Vec<Jet>> = per_node.iter().map(|p| p.0.clone()).collect();
        let ez = degree_part(&ez, deg, d, k);
        let (avg, osc) = ez.split_average();
        if avg.max_abs() > 0.0 {
            head_z.add_term(FourierMap::constant(d, k, avg))?;
        }
        if !osc.is_zero(0.0) {
            change.cz.add_term(solve_small_divisors_map(&osc, &model.freq, model.divisor_floor)?)?;
        }
        if d > 0 {
            let et: Vec<Vec<Jet>> = per_node.iter().map(|p| p.1.clone()).collect();
            let et = degree_part(&et, deg, d, k);
            let (avg, osc) = et.split_average();
            if avg.max_abs() > 0.0 {
                head_t.add_term(FourierMap::constant(d, k, avg))?;
            }
            if !osc.is_zero(0.0) {
                change.ct.add_term(solve_small_divisors_map(&osc, &model.freq, model.divisor_floor)?)?;
            }
        }
    }

    let (n, m) = (model.n, model.m);
    let split = |head: &HomogeneousSum, rows: std::ops::Range<usize>| -> Result<HomogeneousSum> {
        let mut out = HomogeneousSum::new(nv, d, rows.len(), k);
        for (_, t) in head.terms() {
            let zero = HomogeneousTerm::Poly(PolyTerm::zero(nv, t.average().degree(), rows.len()));
            let rows = rows.clone();
            out.add_term(t.map_blocks(zero, |b| match b {
                HomogeneousTerm::Poly(p) => {
                    HomogeneousTerm::Poly(PolyTerm::stack(&rows.clone().map(|i| p.component(i)).collect::<Vec<_>>()))
                }
                HomogeneousTerm::Ray(_) => unreachable!("angle reduction produces polynomial terms"),
            }))?;
        }
        Ok(out)
    };
    let mut f = split(&head_z, 0..n)?;
    let mut g = split(&head_z, n..n + m)?;
    let mut h = head_t.clone();

    let shared = Arc::new((model.clone(), change.clone(), head_z, head_t));
    let make_tail = |component: usize| {
        let a = shared.clone();
        let b = shared.clone();
        let pick = move |zinc: Vec<f64>, tinc: Vec<f64>, head: (Vec<f64>, Vec<f64>)| -> Vec<f64> {
            let (hz, ht) = head;
            match component {
                0 => (0..n).map(|i| zinc[i] - hz[i]).collect(),
                1 => (n..n + m).map(|i| zinc[i] - hz[i]).collect(),
                _ => tinc.iter().zip(&ht).map(|(p, q)| p - q).collect(),
            }
        };
        let pick_jet = move |zinc: Vec<Jet>, tinc: Vec<Jet>, hz: Vec<Jet>, ht: Vec<Jet>| -> Vec<Jet> {
            match component {
                0 => (0..n).map(|i| zinc[i].clone() - hz[i].clone()).collect(),
                1 => (n..n + m).map(|i| zinc[i].clone() - hz[i].clone()).collect(),
                _ => tinc.into_iter().zip(ht).map(|(p, q)| p - q).collect(),
            }
        };
        ClosureTail::new(
            target_order,
            move |z: &[f64], th: &[f64]| {
                let (model, change, hz, ht) = &*a;
                let (zi, ti) = conjugated_increment(model, change, z, th, INVERSE_MAX_ITER, true);
                pick(zi, ti, (hz.eval(z, th), ht.eval(z, th)))
            },
            move |z: &[Jet], th: &[Jet]| {
                let (model, change, hz, ht) = &*b;
                let iters = z[0].order() + 2;
                let (zi, ti) = conjugated_increment(model, change, z, th, iters, false);
                pick_jet(zi, ti, hz.eval(z, th), ht.eval(z, th))
            },
        )
    };
    f.set_tail(Arc::new(make_tail(0)))?;
    g.set_tail(Arc::new(make_tail(1)))?;
    if d > 0 {
        h.set_tail(Arc::new(make_tail(2)))?;
    }
    let mut out = Model::new(model.kind, n, m, d, model.orders, model.freq.clone(), f, g, h)?;
    out.divisor_floor = model.divisor_floor;
    Ok((out, change))
}

#[cfg(test)]
mod tests {
    use super::super::test_models::*;
    use super::*;
    use crate::cones::LeadingParts;

    #[test]
    fn angle_free_model_needs_no_change() {
        let model = invariant_toy();
        let (reduced, change) = reduce_angle_dependence(&model, 6).unwrap();
        assert!(change.is_identity());
        let (z1, t1) = model.apply(&[0.03, 0.01], &[0.2]);
        let (z2, t2) = reduced.apply(&[0.03, 0.01], &[0.2]);
        for (a, b) in z1.iter().zip(&z2).chain(t1.iter().zip(&t2)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn oscillatory_g_mode_is_removed() {
        let k = 4;
        let mut f = HomogeneousSum::new(2, 1, 1, k);
        let mut g = HomogeneousSum::new(2, 1, 1, k);
        let h = HomogeneousSum::new(2, 1, 1, k);
        add_mode(&mut f, 0, &[3, 0], -1.0, 0, false);
        add_mode(&mut g, 0, &[2, 1], 1.0, 0, false);
        add_mode(&mut g, 0, &[2, 1], 0.4, 1, false);
        let model = Model::new(
            SystemKind::Map,
            1,
            1,
            1,
            (3, 3, 3),
            crate::fourier::Frequency::golden_mean(),
            f,
            g,
            h,
        )
        .unwrap();
        let (reduced, change) = reduce_angle_dependence(&model, 4).unwrap();
        assert!(!change.is_identity());
        let g3 = reduced.g.term(3).unwrap();
        assert!(g3.oscillatory().is_zero(1e-14));
        let before = model.g.term(3).unwrap().average();
        let after = g3.average();
        assert!(HomogeneousTerm::lincomb(1.0, &before, -1.0, &after).max_abs() < 1e-14);
    }

    #[test]
    fn leading_average_of_f_is_preserved() {
        let model = synthetic_map(0.01, false);
        let (reduced, _) = reduce_angle_dependence(&model, 5).unwrap();
        for x in [0.3, -0.7, 1.1] {
            assert!((reduced.fbar_n(&[x])[0] - model.fbar_n(&[x])[0]).abs() < 1e-14);
        }
        for deg in 3..5 {
            for s in [&reduced.f, &reduced.g, &reduced.h] {
                if let Some(t) = s.term(deg) {
                    assert!(t.oscillatory().is_zero(1e-13), "degree {deg}");
                }
            }
        }
    }

    #[test]
    fn reduced_model_is_conjugate() {
        let model = synthetic_map(0.01, false);
        let (reduced, change) = reduce_angle_dependence(&model, 5).unwrap();
        let (z, th) = (vec![0.02, -0.01], vec![0.37]);
        let (cz, ct) = change.push_forward(&z, &th);
        let (lhs_z, lhs_t) = model.apply(&cz, &ct);
        let (fz, ft) = reduced.apply(&z, &th);
        let (rhs_z, rhs_t) = change.push_forward(&fz, &ft);
        for (a, b) in lhs_z.iter().zip(&rhs_z).chain(lhs_t.iter().zip(&rhs_t)) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}
