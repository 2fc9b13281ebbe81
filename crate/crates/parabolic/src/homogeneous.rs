//! Homogeneous functions on cones and finite sums of them.
//!
//! A [`HomogeneousTerm`] of degree `j` satisfies `h(s u) = s^j h(u)` for
//! `s > 0`. Two backends exist: [`PolyTerm`] stores a homogeneous polynomial
//! exactly, and [`RayTerm`] stores values on a cross-section of the cone and
//! extends them by homogeneity. A [`HomogeneousSum`] is a list of such terms,
//! each with a Fourier dependence on angles, plus an optional opaque tail of
//! higher order.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ParabolicError, Result};
use crate::fourier::{grid_nodes, Block, FourierMap};
use crate::jet::{monomial_table, monomials_of_degree, Jet, Scalar};

/// Homogeneous polynomial map `R^n -> R^target` of a fixed degree.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTerm {
    nvars: usize,
    degree: usize,
    target_dim: usize,
    /// Row-major: `coeffs[i * nmono + m]` multiplies monomial `m` in output `i`.
    coeffs: Vec<f64>,
}

impl PolyTerm {
    pub fn zero(nvars: usize, degree: usize, target_dim: usize) -> Self {
        let nmono = monomials_of_degree(nvars, degree).len();
        Self {
            nvars,
            degree,
            target_dim,
            coeffs: vec![0.0; nmono * target_dim],
        }
    }

    /// Builds a term from `(output index, exponents, coefficient)` triples.
    pub fn from_terms(
        nvars: usize,
        degree: usize,
        target_dim: usize,
        terms: &[(usize, Vec<u32>, f64)],
    ) -> Result<Self> {
        let monos = monomials_of_degree(nvars, degree);
        let mut p = Self::zero(nvars, degree, target_dim);
        for (i, e, c) in terms {
            if *i >= target_dim || e.len() != nvars || e.iter().sum::<u32>() as usize != degree {
                return Err(ParabolicError::InvalidInput(format!(
                    "monomial {e:?} in output {i} does not fit degree {degree} in {nvars} variables"
                )));
            }
            let m = monos.iter().position(|x| x == e).expect("monomial listed");
            p.coeffs[i * monos.len() + m] += c;
        }
        Ok(p)
    }

    /// Takes the degree-`degree` part of each component jet.
    pub fn from_jets(jets: &[Jet], degree: usize) -> Self {
        let nvars = jets[0].nvars();
        let nmono = monomials_of_degree(nvars, degree).len();
        let mut coeffs = Vec::with_capacity(nmono * jets.len());
        for j in jets {
            let part = j.homogeneous_part(degree);
            if part.is_empty() {
                coeffs.extend(std::iter::repeat(0.0).take(nmono));
            } else {
                coeffs.extend_from_slice(part);
            }
        }
        Self {
            nvars,
            degree,
            target_dim: jets.len(),
            coeffs,
        }
    }

    pub fn from_raw(nvars: usize, degree: usize, target_dim: usize, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), monomials_of_degree(nvars, degree).len() * target_dim);
        Self {
            nvars,
            degree,
            target_dim,
            coeffs,
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }
    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn target_dim(&self) -> usize {
        self.target_dim
    }
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
    pub fn nmono(&self) -> usize {
        self.coeffs.len() / self.target_dim.max(1)
    }
    pub fn monomials(&self) -> Vec<Vec<u32>> {
        monomials_of_degree(self.nvars, self.degree)
    }

    pub fn eval<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        let proto = &u[0];
        let monos = monomial_table(self.nvars, self.degree);
        let nmono = monos.len();
        let mut powers: Vec<Vec<S>> = Vec::with_capacity(self.nvars);
        for x in u.iter().take(self.nvars) {
            let mut row = vec![proto.constant_like(1.0)];
            for e in 1..=self.degree {
                let next = row[e - 1].clone() * x.clone();
                row.push(next);
            }
            powers.push(row);
        }
        let mut out = vec![proto.zero_like(); self.target_dim];
        for (m, exps) in monos.iter().enumerate() {
            if (0..self.target_dim).all(|i| self.coeffs[i * nmono + m] == 0.0) {
                continue;
            }
            let mut v = proto.constant_like(1.0);
            for (k, &e) in exps.iter().enumerate() {
                if e > 0 {
                    v = v * powers[k][e as usize].clone();
                }
            }
            for (i, o) in out.iter_mut().enumerate() {
                let c = self.coeffs[i * nmono + m];
                if c != 0.0 {
                    *o = o.clone() + v.clone() * c;
                }
            }
        }
        out
    }

    /// Partial derivative in `u_i`, a term of degree `degree - 1`.
    pub fn derivative(&self, i: usize) -> Self {
        if self.degree == 0 {
            return Self::zero(self.nvars, 0, self.target_dim);
        }
        let monos = self.monomials();
        let lower = monomials_of_degree(self.nvars, self.degree - 1);
        let mut out = Self::zero(self.nvars, self.degree - 1, self.target_dim);
        for t in 0..self.target_dim {
            for (m, e) in monos.iter().enumerate() {
                if e[i] == 0 {
                    continue;
                }
                let mut f = e.clone();
                f[i] -= 1;
                let k = lower.iter().position(|x| *x == f).expect("lower monomial");
                out.coeffs[t * lower.len() + k] += e[i] as f64 * self.coeffs[t * monos.len() + m];
            }
        }
        out
    }

    /// Output component `i` as a scalar term.
    pub fn component(&self, i: usize) -> Self {
        let n = self.nmono();
        Self {
            nvars: self.nvars,
            degree: self.degree,
            target_dim: 1,
            coeffs: self.coeffs[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// Stacks scalar or vector terms of equal degree into one vector term.
    pub fn stack(parts: &[PolyTerm]) -> Self {
        let mut coeffs = Vec::new();
        let mut target = 0;
        for p in parts {
            assert_eq!(p.degree, parts[0].degree);
            coeffs.extend_from_slice(&p.coeffs);
            target += p.target_dim;
        }
        Self {
            nvars: parts[0].nvars,
            degree: parts[0].degree,
            target_dim: target,
            coeffs,
        }
    }

    pub fn to_doc(&self) -> PolyDoc {
        let monos = self.monomials();
        let n = monos.len();
        let mut terms = Vec::new();
        for i in 0..self.target_dim {
            for (m, e) in monos.iter().enumerate() {
                let c = self.coeffs[i * n + m];
                if c != 0.0 {
                    terms.push(PolyMonomialDoc {
                        output: i,
                        exponents: e.clone(),
                        coeff: c,
                    });
                }
            }
        }
        PolyDoc {
            nvars: self.nvars,
            degree: self.degree,
            target_dim: self.target_dim,
            terms,
        }
    }

    pub fn from_doc(doc: &PolyDoc) -> Result<Self> {
        let terms: Vec<(usize, Vec<u32>, f64)> = doc
            .terms
            .iter()
            .map(|t| (t.output, t.exponents.clone(), t.coeff))
            .collect();
        Self::from_terms(doc.nvars, doc.degree, doc.target_dim, &terms)
    }
}

/// Serialized POLY term: exponent and coefficient lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyDoc {
    pub nvars: usize,
    pub degree: usize,
    pub target_dim: usize,
    pub terms: Vec<PolyMonomialDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMonomialDoc {
    pub output: usize,
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

impl Block for PolyTerm {
    fn zero_like(&self) -> Self {
        Self::zero(self.nvars, self.degree, self.target_dim)
    }
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        assert_eq!((x.degree, x.target_dim), (y.degree, y.target_dim), "shape mismatch");
        Self {
            nvars: x.nvars,
            degree: x.degree,
            target_dim: x.target_dim,
            coeffs: x.coeffs.iter().zip(&y.coeffs).map(|(p, q)| a * p + b * q).collect(),
        }
    }
    fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Chebyshev points of the second kind on `[-w, w]`, `p >= 2`.
fn cheb_nodes(p: usize, w: f64) -> Vec<f64> {
    (0..p)
        .map(|i| w * (PI * i as f64 / (p - 1) as f64).cos())
        .collect()
}

fn cheb_weights(p: usize) -> Vec<f64> {
    (0..p)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            if i == 0 || i == p - 1 {
                0.5 * s
            } else {
                s
            }
        })
        .collect()
}

/// Chart of the unit cross-section of a cone.
///
/// For one variable the section is the single direction `sign`. Otherwise a
/// gnomonic chart around `center` maps `u` to `s_k = <u, b_k> / <u, center>`,
/// where `b_k` is an orthonormal basis of the orthogonal complement, and a
/// tensor Chebyshev grid covers `[-w, w]^{n-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub center: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub half_width: f64,
    pub nodes_per_axis: usize,
}

impl Section {
    /// The half line `sign * (0, inf)` in one variable.
    pub fn half_line(sign: f64) -> Self {
        Self {
            center: vec![sign.signum()],
            basis: Vec::new(),
            half_width: 0.0,
            nodes_per_axis: 1,
        }
    }

    /// Gnomonic section around `center` (normalized here).
    pub fn gnomonic(center: &[f64], half_width: f64, nodes_per_axis: usize) -> Self {
        let n = center.len();
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c: Vec<f64> = center.iter().map(|v| v / norm).collect();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for k in 0..n {
            let mut v = vec![0.0; n];
            v[k] = 1.0;
            let mut w = v.clone();
            for b in std::iter::once(&c).chain(basis.iter()) {
                let d: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= d * bi;
                }
            }
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn > 1e-8 && basis.len() + 1 < n {
                basis.push(w.iter().map(|x| x / wn).collect());
            }
        }
        Self {
            center: c,
            basis,
            half_width,
            nodes_per_axis: nodes_per_axis.max(2),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Chart coordinates of a direction.
    pub fn chart<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        let dot = |v: &[f64]| {
            let mut acc = u[0].zero_like();
            for (x, c) in u.iter().zip(v) {
                acc = acc + x.clone() * *c;
            }
            acc
        };
        let denom = dot(&self.center);
        self.basis.iter().map(|b| dot(b) / denom.clone()).collect()
    }

    /// Unit direction with chart coordinates `s`.
    pub fn direction(&self, s: &[f64]) -> Vec<f64> {
        let mut v = self.center.clone();
        for (b, sk) in self.basis.iter().zip(s) {
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi += sk * bi;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    /// Chart coordinates of every node, first axis slowest.
    pub fn node_coords(&self) -> Vec<Vec<f64>> {
        let axes = self.basis.len();
        if axes == 0 {
            return vec![Vec::new()];
        }
        let pts = cheb_nodes(self.nodes_per_axis, self.half_width);
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    pts.iter().map(move |&x| {
                        let mut q = p.clone();
                        q.push(x);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn node_directions(&self) -> Vec<Vec<f64>> {
        self.node_coords().iter().map(|s| self.direction(s)).collect()
    }

    /// Tensor barycentric basis values at chart point `s`, one per node.
    pub fn basis_values<S: Scalar>(&self, s: &[S], proto: &S) -> Vec<S> {
        let axes = self.basis.len();
        if axes == 0 {
            return vec![proto.constant_like(1.0)];
        }
        let pts = cheb_nodes(self.nodes_per_axis, self.half_width);
        let wts = cheb_weights(self.nodes_per_axis);
        let per_axis: Vec<Vec<S>> = s
            .iter()
            .map(|x| {
                if let Some(hit) = pts.iter().position(|&p| (x.value() - p).abs() < 1e-14) {
                    pts.iter()
                        .enumerate()
                        .map(|(i, _)| x.constant_like(if i == hit { 1.0 } else { 0.0 }))
                        .collect()
                } else {
                    let terms: Vec<S> = pts
                        .iter()
                        .zip(&wts)
                        .map(|(&p, &w)| x.constant_like(w) / (x.clone() - p))
                        .collect();
                    let mut total = x.zero_like();
                    for t in &terms {
                        total = total + t.clone();
                    }
                    terms.into_iter().map(|t| t / total.clone()).collect()
                }
            })
            .collect();
        let mut out: Vec<S> = vec![proto.constant_like(1.0)];
        for axis in per_axis {
            out = out
                .into_iter()
                .flat_map(|p| axis.iter().map(move |a| p.clone() * a.clone()).collect::<Vec<_>>())
                .collect();
        }
        out
    }
}

/// Homogeneous term known through its values on a section of the cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayTerm {
    pub degree: usize,
    pub target_dim: usize,
    pub section: Section,
    /// Values at the unit node directions, one vector per node.
    pub values: Vec<Vec<f64>>,
}

impl RayTerm {
    /// Samples `f` at the unit node directions.
    pub fn from_fn<F>(section: Section, degree: usize, target_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let dirs = section.node_directions();
        let values: Vec<Vec<f64>> = dirs.par_iter().map(|d| f(d)).collect();
        Self {
            degree,
            target_dim,
            section,
            values,
        }
    }

    pub fn eval<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        let proto = &u[0];
        let mut r2 = proto.zero_like();
        for x in u {
            r2 = r2 + x.clone() * x.clone();
        }
        let scale = r2.powf(self.degree as f64 / 2.0);
        if self.section.basis.is_empty() {
            return self.values[0]
                .iter()
                .map(|&v| scale.clone() * v)
                .collect();
        }
        let s = self.section.chart(u);
        let l = self.section.basis_values(&s, proto);
        (0..self.target_dim)
            .map(|i| {
                let mut acc = proto.zero_like();
                for (li, v) in l.iter().zip(&self.values) {
                    acc = acc + li.clone() * v[i];
                }
                acc * scale.clone()
            })
            .collect()
    }

    /// Largest discrepancy between the interpolant and `f` at chart midpoints.
    pub fn interpolation_error<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> f64 {
        let axes = self.section.basis.len();
        if axes == 0 {
            return 0.0;
        }
        let pts = cheb_nodes(self.section.nodes_per_axis, self.section.half_width);
        let mids: Vec<f64> = pts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mut coords: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..axes {
            coords = coords
                .into_iter()
                .flat_map(|p| {
                    mids.iter().map(move |&x| {
                        let mut q = p.clone();
                        q.push(x);
                        q
                    })
                })
                .collect();
        }
        coords
            .iter()
            .map(|s| {
                let d = self.section.direction(s);
                let a = self.eval(&d);
                let b = f(&d);
                a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            })
            .fold(0.0, f64::max)
    }
}

/// A homogeneous term with either backend.
#[derive(Debug, Clone, PartialEq)]
pub enum HomogeneousTerm {
    Poly(PolyTerm),
    Ray(RayTerm),
}

impl HomogeneousTerm {
    pub fn degree(&self) -> usize {
        match self {
            Self::Poly(p) => p.degree,
            Self::Ray(r) => r.degree,
        }
    }

    pub fn target_dim(&self) -> usize {
        match self {
            Self::Poly(p) => p.target_dim,
            Self::Ray(r) => r.target_dim,
        }
    }

    pub fn eval<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        match self {
            Self::Poly(p) => p.eval(u),
            Self::Ray(r) => r.eval(u),
        }
    }

    pub fn as_poly(&self) -> Option<&PolyTerm> {
        match self {
            Self::Poly(p) => Some(p),
            Self::Ray(_) => None,
        }
    }

    /// Converts to a RAY term on `section` by sampling.
    pub fn to_ray(&self, section: &Section) -> RayTerm {
        match self {
            Self::Ray(r) if &r.section == section => r.clone(),
            _ => RayTerm::from_fn(section.clone(), self.degree(), self.target_dim(), |d| {
                self.eval(d)
            }),
        }
    }
}

impl Block for HomogeneousTerm {
    fn zero_like(&self) -> Self {
        match self {
            Self::Poly(p) => Self::Poly(p.zero_like()),
            Self::Ray(r) => Self::Ray(RayTerm {
                values: vec![vec![0.0; r.target_dim]; r.values.len()],
                ..r.clone()
            }),
        }
    }

    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        match (x, y) {
            (Self::Poly(p), Self::Poly(q)) => Self::Poly(PolyTerm::lincomb(a, p, b, q)),
            (Self::Ray(r), other) | (other, Self::Ray(r)) => {
                let xr = x.to_ray(&r.section);
                let yr = y.to_ray(&r.section);
                let _ = other;
                Self::Ray(RayTerm {
                    values: xr
                        .values
                        .iter()
                        .zip(&yr.values)
                        .map(|(p, q)| p.iter().zip(q).map(|(s, t)| a * s + b * t).collect())
                        .collect(),
                    ..xr
                })
            }
        }
    }

    fn max_abs(&self) -> f64 {
        match self {
            Self::Poly(p) => p.max_abs(),
            Self::Ray(r) => r
                .values
                .iter()
                .flatten()
                .fold(0.0, |m: f64, v| m.max(v.abs())),
        }
    }
}

/// An opaque remainder `O(|u|^order)` that can be evaluated on floats and jets.
pub trait TailFn: Send + Sync {
    fn order(&self) -> usize;
    fn eval_f64(&self, u: &[f64], theta: &[f64]) -> Vec<f64>;
    fn eval_jet(&self, u: &[Jet], theta: &[Jet]) -> Vec<Jet>;
}

type F64Fn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;
type JetFn = dyn Fn(&[Jet], &[Jet]) -> Vec<Jet> + Send + Sync;

/// Tail assembled from a float closure and a jet closure computing the same function.
pub struct ClosureTail {
    order: usize,
    f: Box<F64Fn>,
    j: Box<JetFn>,
}

impl ClosureTail {
    pub fn new(
        order: usize,
        f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        j: impl Fn(&[Jet], &[Jet]) -> Vec<Jet> + Send + Sync + 'static,
    ) -> Self {
        Self {
            order,
            f: Box::new(f),
            j: Box::new(j),
        }
    }
}

impl TailFn for ClosureTail {
    fn order(&self) -> usize {
        self.order
    }
    fn eval_f64(&self, u: &[f64], theta: &[f64]) -> Vec<f64> {
        (self.f)(u, theta)
    }
    fn eval_jet(&self, u: &[Jet], theta: &[Jet]) -> Vec<Jet> {
        (self.j)(u, theta)
    }
}

/// Scalars on which opaque tails can be evaluated.
pub trait ModelScalar: Scalar {
    fn eval_tail(tail: &dyn TailFn, u: &[Self], theta: &[Self]) -> Vec<Self>;
}

impl ModelScalar for f64 {
    fn eval_tail(tail: &dyn TailFn, u: &[Self], theta: &[Self]) -> Vec<Self> {
        tail.eval_f64(u, theta)
    }
}

impl ModelScalar for Jet {
    fn eval_tail(tail: &dyn TailFn, u: &[Self], theta: &[Self]) -> Vec<Self> {
        tail.eval_jet(u, theta)
    }
}

/// What to differentiate with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    U(usize),
    Theta(usize),
}

/// Sum of homogeneous terms with angle-dependent coefficients plus an optional tail.
#[derive(Clone)]
pub struct HomogeneousSum {
    pub nvars: usize,
    pub angle_dim: usize,
    pub target_dim: usize,
    /// Fourier truncation used for every term.
    pub truncation: usize,
    terms: Vec<(usize, FourierMap<HomogeneousTerm>)>,
    pub tail: Option<Arc<dyn TailFn>>,
}

impl std::fmt::Debug for HomogeneousSum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HomogeneousSum")
            .field("nvars", &self.nvars)
            .field("angle_dim", &self.angle_dim)
            .field("target_dim", &self.target_dim)
            .field("terms", &self.terms)
            .field("tail_order", &self.tail.as_ref().map(|t| t.order()))
            .finish()
    }
}

impl HomogeneousSum {
    pub fn new(nvars: usize, angle_dim: usize, target_dim: usize, truncation: usize) -> Self {
        Self {
            nvars,
            angle_dim,
            target_dim,
            truncation,
            terms: Vec::new(),
            tail: None,
        }
    }

    pub fn terms(&self) -> &[(usize, FourierMap<HomogeneousTerm>)] {
        &self.terms
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.0).collect()
    }

    pub fn max_degree(&self) -> Option<usize> {
        self.terms.last().map(|t| t.0)
    }

    /// Adds `term` to the series at its degree.
    pub fn add_term(&mut self, term: FourierMap<HomogeneousTerm>) -> Result<()> {
        let degree = match term.modes().next() {
            Some((_, (re, _))) => re.degree(),
            None => return Ok(()),
        };
        if let Some(t) = &self.tail {
            if degree >= t.order() {
                return Err(ParabolicError::InvalidInput(format!(
                    "term of degree {degree} overlaps tail of order {}",
                    t.order()
                )));
            }
        }
        match self.terms.binary_search_by_key(&degree, |t| t.0) {
            Ok(i) => {
                let sum = FourierMap::lincomb(1.0, &self.terms[i].1, 1.0, &term);
                self.terms[i].1 = sum;
            }
            Err(i) => self.terms.insert(i, (degree, term)),
        }
        Ok(())
    }

    /// Adds an angle-independent POLY term.
    pub fn add_poly(&mut self, p: PolyTerm) -> Result<()> {
        let t = FourierMap::constant(self.angle_dim, self.truncation, HomogeneousTerm::Poly(p));
        self.add_term(t)
    }

    pub fn set_tail(&mut self, tail: Arc<dyn TailFn>) -> Result<()> {
        if let Some(d) = self.max_degree() {
            if tail.order() <= d {
                return Err(ParabolicError::InvalidInput(format!(
                    "tail order {} does not exceed top degree {d}",
                    tail.order()
                )));
            }
        }
        self.tail = Some(tail);
        Ok(())
    }

    /// Term of a given degree, if stored.
    pub fn term(&self, degree: usize) -> Option<&FourierMap<HomogeneousTerm>> {
        self.terms
            .binary_search_by_key(&degree, |t| t.0)
            .ok()
            .map(|i| &self.terms[i].1)
    }

    /// Zero block of the given degree with this sum's shape (POLY backend).
    pub fn zero_term(&self, degree: usize) -> FourierMap<HomogeneousTerm> {
        FourierMap::new(
            self.angle_dim,
            self.truncation,
            HomogeneousTerm::Poly(PolyTerm::zero(self.nvars, degree, self.target_dim)),
        )
    }

    /// Evaluates terms and tail at `(u, theta)`.
    pub fn eval<S: ModelScalar>(&self, u: &[S], theta: &[S]) -> Vec<S> {
        let proto = &u[0];
        let mut acc: Vec<S> = vec![proto.zero_like(); self.target_dim];
        for (_, t) in &self.terms {
            let v = t.eval_with(theta, proto, |b| b.eval(u));
            for (a, x) in acc.iter_mut().zip(v) {
                *a = a.clone() + x;
            }
        }
        if let Some(tail) = &self.tail {
            let v = S::eval_tail(tail.as_ref(), u, theta);
            for (a, x) in acc.iter_mut().zip(v) {
                *a = a.clone() + x;
            }
        }
        acc
    }

    /// Float evaluation with an optional cone membership check.
    pub fn evaluate(
        &self,
        u: &[f64],
        theta: &[f64],
        cone: Option<&crate::cones::ConeSpec>,
    ) -> Result<Vec<f64>> {
        if let Some(c) = cone {
            if !c.contains(&u[..c.n]) {
                return Err(ParabolicError::OutsideCone(u.to_vec()));
            }
        }
        if self.nvars == 0 {
            return Ok(vec![0.0; self.target_dim]);
        }
        Ok(self.eval(u, theta))
    }

    /// Degree-`ell` part; fails if a nonzero term of lower degree is present.
    pub fn lowest_part(&self, ell: usize) -> Result<FourierMap<HomogeneousTerm>> {
        for (d, t) in &self.terms {
            if *d < ell && !t.is_zero(0.0) {
                return Err(ParabolicError::OrderViolation {
                    requested: ell,
                    found: *d,
                });
            }
        }
        Ok(self.term(ell).cloned().unwrap_or_else(|| self.zero_term(ell)))
    }

    /// Derivative in one variable or one angle. RAY `u`-derivatives need `allow_fd`.
    pub fn differentiate(&self, wrt: Wrt, allow_fd: bool) -> Result<HomogeneousSum> {
        let mut out = HomogeneousSum::new(self.nvars, self.angle_dim, self.target_dim, self.truncation);
        match wrt {
            Wrt::U(i) => {
                for (d, t) in &self.terms {
                    if *d == 0 {
                        continue;
                    }
                    if !allow_fd && matches!(t.zero_block(), HomogeneousTerm::Ray(_)) {
                        return Err(ParabolicError::BackendUnsupported(
                            "u-derivative of a RAY term without finite-difference fallback".into(),
                        ));
                    }
                    let zero = match t.zero_block() {
                        HomogeneousTerm::Poly(p) => HomogeneousTerm::Poly(p.derivative(i)),
                        HomogeneousTerm::Ray(r) => HomogeneousTerm::Ray(RayTerm {
                            degree: r.degree - 1,
                            ..r.clone()
                        }),
                    };
                    let dt = t.map_blocks(zero, |b| match b {
                        HomogeneousTerm::Poly(p) => HomogeneousTerm::Poly(p.derivative(i)),
                        HomogeneousTerm::Ray(r) => HomogeneousTerm::Ray(ray_fd_derivative(r, i)),
                    });
                    out.terms.push((d - 1, dt));
                }
                if let Some(tail) = &self.tail {
                    out.tail = Some(Arc::new(FdTail {
                        inner: tail.clone(),
                        wrt,
                    }));
                }
            }
            Wrt::Theta(i) => {
                for (d, t) in &self.terms {
                    let mut dt = FourierMap::new(t.angle_dim(), t.truncation(), t.zero_block().clone());
                    for (k, (re, im)) in t.modes() {
                        let a = 2.0 * PI * k[i] as f64;
                        if a == 0.0 {
                            continue;
                        }
                        dt.set_mode(k, HomogeneousTerm::lincomb(-a, im, 0.0, im), HomogeneousTerm::lincomb(a, re, 0.0, re))?;
                    }
                    out.terms.push((*d, dt));
                }
                if let Some(tail) = &self.tail {
                    out.tail = Some(Arc::new(FdTail {
                        inner: tail.clone(),
                        wrt,
                    }));
                }
            }
        }
        Ok(out)
    }

    /// Composition `self(inner(u, Theta), Theta + shift(u, Theta))` up to degree `q - 1`,
    /// plus an order-`q` tail holding the exact remainder.
    ///
    /// POLY-only inputs give POLY output computed from multivariate jets; any RAY
    /// input switches to RAY output on `section`, computed along node rays.
    pub fn truncated_compose(
        &self,
        inner: &HomogeneousSum,
        shift: Option<&HomogeneousSum>,
        q: usize,
        section: Option<&Section>,
    ) -> Result<HomogeneousSum> {
        assert_eq!(inner.target_dim, self.nvars, "inner must fill every outer slot");
        if let Some(&lowest) = inner.degrees().iter().find(|&&d| {
            inner.term(d).is_some_and(|t| !t.is_zero(0.0))
        }) {
            if lowest == 0 {
                return Err(ParabolicError::OrderUnderflow {
                    requested: q,
                    available: 0,
                });
            }
        }
        let any_ray = [Some(self), Some(inner), shift]
            .iter()
            .flatten()
            .any(|s| s.terms.iter().any(|(_, t)| matches!(t.zero_block(), HomogeneousTerm::Ray(_))));
        let d = inner.angle_dim;
        let truncation = self.truncation.max(inner.truncation);
        let g = 4 * truncation + 4;
        let nodes = if d == 0 { vec![Vec::new()] } else { grid_nodes(d, g) };
        let order = q.saturating_sub(1);
        let n = inner.nvars;
        let mut out = HomogeneousSum::new(n, d, self.target_dim, truncation);

        let compose_at = |u: &[Jet], theta: &[f64]| -> Vec<Jet> {
            let proto = &u[0];
            let th: Vec<Jet> = theta.iter().map(|&t| proto.constant_like(t)).collect();
            let x = inner.eval(u, &th);
            let ang: Vec<Jet> = match shift {
                Some(s) => s
                    .eval(u, &th)
                    .into_iter()
                    .zip(&th)
                    .map(|(a, b)| a + b.clone())
                    .collect(),
                None => th.clone(),
            };
            self.eval(&x, &ang)
        };

        if !any_ray {
            let per_node: Vec<Vec<Jet>> = nodes
                .par_iter()
                .map(|theta| {
                    let u: Vec<Jet> = (0..n).map(|i| Jet::variable(n, order, i, 0.0)).collect();
                    compose_at(&u, theta)
                })
                .collect();
            for deg in 0..=order {
                let samples: Vec<HomogeneousTerm> = per_node
                    .iter()
                    .map(|jets| HomogeneousTerm::Poly(PolyTerm::from_jets(jets, deg)))
                    .collect();
                let mut t = if d == 0 {
                    FourierMap::constant(0, truncation, samples[0].clone())
                } else {
                    FourierMap::from_grid_samples(d, truncation, g, &samples)
                };
                t.prune(1e-15);
                if !t.is_zero(0.0) {
                    out.terms.push((deg, t));
                }
            }
        } else {
            let section = section.ok_or_else(|| {
                ParabolicError::BackendUnsupported("RAY composition needs a section".into())
            })?;
            let dirs = section.node_directions();
            let per_node: Vec<Vec<Vec<Jet>>> = nodes
                .par_iter()
                .map(|theta| {
                    dirs.iter()
                        .map(|e| {
                            let s = Jet::variable(1, order, 0, 0.0);
                            let u: Vec<Jet> = e.iter().map(|&c| s.clone() * c).collect();
                            compose_at(&u, theta)
                        })
                        .collect()
                })
                .collect();
            for deg in 0..=order {
                let samples: Vec<HomogeneousTerm> = per_node
                    .iter()
                    .map(|by_dir| {
                        HomogeneousTerm::Ray(RayTerm {
                            degree: deg,
                            target_dim: self.target_dim,
                            section: section.clone(),
                            values: by_dir
                                .iter()
                                .map(|jets| jets.iter().map(|j| j.coeffs.get(deg).copied().unwrap_or(0.0)).collect())
                                .collect(),
                        })
                    })
                    .collect();
                let mut t = if d == 0 {
                    FourierMap::constant(0, truncation, samples[0].clone())
                } else {
                    FourierMap::from_grid_samples(d, truncation, g, &samples)
                };
                t.prune(1e-15);
                if !t.is_zero(0.0) {
                    out.terms.push((deg, t));
                }
            }
        }

        let outer = self.clone();
        let inner_c = inner.clone();
        let shift_c = shift.cloned();
        let head = out.clone();
        let outer_j = self.clone();
        let inner_j = inner.clone();
        let shift_j = shift.cloned();
        let head_j = out.clone();
        out.tail = Some(Arc::new(ClosureTail::new(
            q,
            move |u, th| {
                let x = inner_c.eval(u, th);
                let ang: Vec<f64> = match &shift_c {
                    Some(s) => s.eval(u, th).iter().zip(th).map(|(a, b)| a + b).collect(),
                    None => th.to_vec(),
                };
                let full = outer.eval(&x, &ang);
                let h = head.eval(u, th);
                full.iter().zip(&h).map(|(a, b)| a - b).collect()
            },
            move |u, th| {
                let x = inner_j.eval(u, th);
                let ang: Vec<Jet> = match &shift_j {
                    Some(s) => s
                        .eval(u, th)
                        .into_iter()
                        .zip(th)
                        .map(|(a, b)| a + b.clone())
                        .collect(),
                    None => th.to_vec(),
                };
                let full = outer_j.eval(&x, &ang);
                let h = head_j.eval(u, th);
                full.into_iter().zip(h).map(|(a, b)| a - b).collect()
            },
        )));
        Ok(out)
    }
}

fn ray_fd_derivative(r: &RayTerm, i: usize) -> RayTerm {
    let step = 1e-5;
    RayTerm::from_fn(r.section.clone(), r.degree - 1, r.target_dim, |d| {
        let mut p = d.to_vec();
        let mut m = d.to_vec();
        p[i] += step;
        m[i] -= step;
        let a = r.eval(&p);
        let b = r.eval(&m);
        a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * step)).collect()
    })
}

/// Central finite-difference derivative of an opaque tail.
struct FdTail {
    inner: Arc<dyn TailFn>,
    wrt: Wrt,
}

const FD_STEP: f64 = 1e-6;

impl TailFn for FdTail {
    fn order(&self) -> usize {
        match self.wrt {
            Wrt::U(_) => self.inner.order().saturating_sub(1),
            Wrt::Theta(_) => self.inner.order(),
        }
    }

    fn eval_f64(&self, u: &[f64], theta: &[f64]) -> Vec<f64> {
        let (mut up, mut um, mut tp, mut tm) = (u.to_vec(), u.to_vec(), theta.to_vec(), theta.to_vec());
        let h = match self.wrt {
            Wrt::U(i) => {
                let h = FD_STEP * u[i].abs().max(1e-3);
                up[i] += h;
                um[i] -= h;
                h
            }
            Wrt::Theta(i) => {
                tp[i] += FD_STEP;
                tm[i] -= FD_STEP;
                FD_STEP
            }
        };
        let a = self.inner.eval_f64(&up, &tp);
        let b = self.inner.eval_f64(&um, &tm);
        a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
    }

    fn eval_jet(&self, u: &[Jet], theta: &[Jet]) -> Vec<Jet> {
        let (mut up, mut um, mut tp, mut tm) = (u.to_vec(), u.to_vec(), theta.to_vec(), theta.to_vec());
        let h = match self.wrt {
            Wrt::U(i) => {
                let h = FD_STEP * u[i].value().abs().max(1e-3);
                up[i] = up[i].clone() + h;
                um[i] = um[i].clone() - h;
                h
            }
            Wrt::Theta(i) => {
                tp[i] = tp[i].clone() + FD_STEP;
                tm[i] = tm[i].clone() - FD_STEP;
                FD_STEP
            }
        };
        let a = self.inner.eval_jet(&up, &tp);
        let b = self.inner.eval_jet(&um, &tm);
        a.into_iter().zip(b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
    }
}

/// One monomial-times-harmonic entry of a [`FlatSum`].
#[derive(Debug, Clone)]
struct FlatEntry {
    out: usize,
    exps: Vec<u32>,
    mode: usize,
    cos: f64,
    sin: f64,
}

/// Polynomial [`HomogeneousSum`] flattened for fast float evaluation.
///
/// Each entry contributes `u^exps (cos * cos(2 pi k.theta) + sin * sin(2 pi k.theta))`.
#[derive(Clone)]
pub struct FlatSum {
    pub nvars: usize,
    pub target_dim: usize,
    max_exp: u32,
    modes: Vec<Vec<i32>>,
    entries: Vec<FlatEntry>,
    tail: Option<Arc<dyn TailFn>>,
}

impl FlatSum {
    pub fn new(sum: &HomogeneousSum) -> Result<Self> {
        let mut modes: Vec<Vec<i32>> = Vec::new();
        let mut entries = Vec::new();
        let mut max_exp = 0;
        for (_, map) in sum.terms() {
            for (k, (re, im)) in map.modes() {
                let constant = k.iter().all(|&v| v == 0);
                let (Some(re), Some(im)) = (re.as_poly(), im.as_poly()) else {
                    return Err(ParabolicError::BackendUnsupported(
                        "flat evaluation needs polynomial terms".into(),
                    ));
                };
                let mode = match modes.iter().position(|m| m == k) {
                    Some(i) => i,
                    None => {
                        modes.push(k.clone());
                        modes.len() - 1
                    }
                };
                let monos = monomial_table(re.nvars(), re.degree());
                let nmono = monos.len();
                for (mi, exps) in monos.iter().enumerate() {
                    for out in 0..re.target_dim() {
                        let a = re.coeffs()[out * nmono + mi];
                        let b = im.coeffs()[out * nmono + mi];
                        let (cos, sin) = if constant { (a, 0.0) } else { (2.0 * a, -2.0 * b) };
                        if cos != 0.0 || sin != 0.0 {
                            max_exp = max_exp.max(exps.iter().copied().max().unwrap_or(0));
                            entries.push(FlatEntry {
                                out,
                                exps: exps.clone(),
                                mode,
                                cos,
                                sin,
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            nvars: sum.nvars,
            target_dim: sum.target_dim,
            max_exp,
            modes,
            entries,
            tail: sum.tail.clone(),
        })
    }

    fn harmonics(&self, theta: &[f64]) -> Vec<(f64, f64)> {
        self.modes
            .iter()
            .map(|k| {
                let phase: f64 = k.iter().zip(theta).map(|(&ki, t)| ki as f64 * t).sum::<f64>() * 2.0 * PI;
                (phase.cos(), phase.sin())
            })
            .collect()
    }

    fn powers(&self, u: &[f64]) -> Vec<Vec<f64>> {
        u.iter()
            .take(self.nvars)
            .map(|&x| {
                let mut row = Vec::with_capacity(self.max_exp as usize + 1);
                row.push(1.0);
                for e in 1..=self.max_exp as usize {
                    row.push(row[e - 1] * x);
                }
                row
            })
            .collect()
    }

    pub fn eval(&self, u: &[f64], theta: &[f64]) -> Vec<f64> {
        let trig = self.harmonics(theta);
        let pw = self.powers(u);
        let mut out = vec![0.0; self.target_dim];
        for e in &self.entries {
            let mono: f64 = e.exps.iter().enumerate().map(|(k, &p)| pw[k][p as usize]).product();
            let (c, s) = trig[e.mode];
            out[e.out] += mono * (e.cos * c + e.sin * s);
        }
        if let Some(tail) = &self.tail {
            for (o, t) in out.iter_mut().zip(tail.eval_f64(u, theta)) {
                *o += t;
            }
        }
        out
    }

    /// Value and the Jacobian in `u`, as `jac[out][var]`.
    pub fn eval_with_jacobian(&self, u: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let trig = self.harmonics(theta);
        let pw = self.powers(u);
        let mut out = vec![0.0; self.target_dim];
        let mut jac = vec![vec![0.0; self.nvars]; self.target_dim];
        for e in &self.entries {
            let (c, s) = trig[e.mode];
            let w = e.cos * c + e.sin * s;
            let mono: f64 = e.exps.iter().enumerate().map(|(k, &p)| pw[k][p as usize]).product();
            out[e.out] += mono * w;
            for (i, &p) in e.exps.iter().enumerate() {
                if p == 0 {
                    continue;
                }
                let part: f64 = e
                    .exps
                    .iter()
                    .enumerate()
                    .map(|(k, &q)| if k == i { p as f64 * pw[k][q as usize - 1] } else { pw[k][q as usize] })
                    .product();
                jac[e.out][i] += part * w;
            }
        }
        if let Some(tail) = &self.tail {
            let k = self.nvars;
            let vars: Vec<Jet> = (0..k).map(|i| Jet::variable(k, 1, i, u[i])).collect();
            let th: Vec<Jet> = theta.iter().map(|&t| Jet::constant(k, 1, t)).collect();
            for (r, t) in tail.eval_jet(&vars, &th).iter().enumerate() {
                out[r] += t.value();
                for (i, j) in jac[r].iter_mut().enumerate() {
                    let mut e = vec![0u32; k];
                    e[i] = 1;
                    *j += t.coeff(&e);
                }
            }
        }
        (out, jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_poly(nvars: usize, degree: usize, target: usize, seed: u64) -> PolyTerm {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let nm = monomials_of_degree(nvars, degree).len();
        PolyTerm::from_raw(
            nvars,
            degree,
            target,
            (0..nm * target).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    fn monomial_oracle(p: &PolyTerm, u: &[f64]) -> Vec<f64> {
        let monos = p.monomials();
        (0..p.target_dim())
            .map(|i| {
                monos
                    .iter()
                    .enumerate()
                    .map(|(m, e)| {
                        let mut v = p.coeffs()[i * monos.len() + m];
                        for (x, &k) in u.iter().zip(e) {
                            for _ in 0..k {
                                v *= x;
                            }
                        }
                        v
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn single_square_term() {
        let mut s = HomogeneousSum::new(1, 0, 1, 0);
        s.add_poly(PolyTerm::from_terms(1, 2, 1, &[(0, vec![2], 1.0)]).unwrap()).unwrap();
        assert_eq!(s.evaluate(&[3.0], &[], None).unwrap(), vec![9.0]);
    }

    #[test]
    fn empty_sum_is_zero() {
        let s = HomogeneousSum::new(2, 1, 3, 2);
        assert_eq!(s.evaluate(&[0.3, 0.1], &[0.2], None).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn random_sum_matches_monomial_oracle() {
        let mut s = HomogeneousSum::new(3, 0, 2, 0);
        let terms: Vec<PolyTerm> = (2..6).map(|d| random_poly(3, d, 2, d as u64)).collect();
        for t in &terms {
            s.add_poly(t.clone()).unwrap();
        }
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = s.eval(&u, &[]);
            let mut want = vec![0.0; 2];
            for t in &terms {
                for (w, v) in want.iter_mut().zip(monomial_oracle(t, &u)) {
                    *w += v;
                }
            }
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn compose_square_with_quadratic_perturbation() {
        let mut outer = HomogeneousSum::new(1, 0, 1, 0);
        outer.add_poly(PolyTerm::from_terms(1, 2, 1, &[(0, vec![2], 1.0)]).unwrap()).unwrap();
        let mut inner = HomogeneousSum::new(1, 0, 1, 0);
        inner.add_poly(PolyTerm::from_terms(1, 1, 1, &[(0, vec![1], 1.0)]).unwrap()).unwrap();
        inner.add_poly(PolyTerm::from_terms(1, 2, 1, &[(0, vec![2], 1.0)]).unwrap()).unwrap();
        let c = outer.truncated_compose(&inner, None, 4, None).unwrap();
        assert_eq!(c.degrees(), vec![2, 3]);
        let c2 = c.term(2).unwrap().average();
        let c3 = c.term(3).unwrap().average();
        assert_eq!(c2.as_poly().unwrap().coeffs(), &[1.0]);
        assert_eq!(c3.as_poly().unwrap().coeffs(), &[2.0]);
        // The tail carries the exact remainder u^4.
        let u = 0.3;
        let tail = c.tail.as_ref().unwrap().eval_f64(&[u], &[]);
        assert!((tail[0] - u.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn identity_outer_returns_inner() {
        let mut outer = HomogeneousSum::new(2, 0, 2, 0);
        outer.add_poly(PolyTerm::from_terms(2, 1, 2, &[(0, vec![1, 0], 1.0), (1, vec![0, 1], 1.0)]).unwrap()).unwrap();
        let mut inner = HomogeneousSum::new(2, 0, 2, 0);
        let p2 = random_poly(2, 2, 2, 4);
        let p3 = random_poly(2, 3, 2, 5);
        inner.add_poly(PolyTerm::from_terms(2, 1, 2, &[(0, vec![1, 0], 1.0), (1, vec![0, 1], 1.0)]).unwrap()).unwrap();
        inner.add_poly(p2.clone()).unwrap();
        inner.add_poly(p3.clone()).unwrap();
        let c = outer.truncated_compose(&inner, None, 5, None).unwrap();
        let got2 = c.term(2).unwrap().average();
        let got3 = c.term(3).unwrap().average();
        assert!(PolyTerm::lincomb(1.0, got2.as_poly().unwrap(), -1.0, &p2).max_abs() < 1e-15);
        assert!(PolyTerm::lincomb(1.0, got3.as_poly().unwrap(), -1.0, &p3).max_abs() < 1e-15);
    }

    #[test]
    fn angle_shift_multiplies_by_phase() {
        let omega = 0.618;
        let mut outer = HomogeneousSum::new(1, 1, 1, 2);
        let mut t = FourierMap::new(1, 2, HomogeneousTerm::Poly(PolyTerm::zero(1, 1, 1)));
        let one = HomogeneousTerm::Poly(PolyTerm::from_terms(1, 1, 1, &[(0, vec![1], 1.0)]).unwrap());
        t.set_mode(&[1], one, HomogeneousTerm::Poly(PolyTerm::zero(1, 1, 1))).unwrap();
        outer.add_term(t).unwrap();
        let mut inner = HomogeneousSum::new(1, 1, 1, 2);
        inner.add_poly(PolyTerm::from_terms(1, 1, 1, &[(0, vec![1], 1.0)]).unwrap()).unwrap();
        let mut shift = HomogeneousSum::new(1, 1, 1, 2);
        shift.add_poly(PolyTerm::from_terms(1, 0, 1, &[(0, vec![0], omega)]).unwrap()).unwrap();
        let c = outer.truncated_compose(&inner, Some(&shift), 3, None).unwrap();
        assert_eq!(c.degrees(), vec![1]);
        let (re, im) = c.term(1).unwrap().coeff(&[1]);
        let (s, co) = (2.0 * PI * omega).sin_cos();
        assert!((re.as_poly().unwrap().coeffs()[0] - co).abs() < 1e-13);
        assert!((im.as_poly().unwrap().coeffs()[0] - s).abs() < 1e-13);
    }

    #[test]
    fn lowest_part_extraction() {
        let mut g = HomogeneousSum::new(1, 0, 1, 0);
        g.add_poly(PolyTerm::from_terms(1, 3, 1, &[(0, vec![3], 1.0)]).unwrap()).unwrap();
        g.add_poly(PolyTerm::from_terms(1, 5, 1, &[(0, vec![5], 1.0)]).unwrap()).unwrap();
        let p = g.lowest_part(3).unwrap();
        assert_eq!(p.average().as_poly().unwrap().coeffs(), &[1.0]);
        let mut h = HomogeneousSum::new(1, 0, 1, 0);
        h.add_poly(PolyTerm::from_terms(1, 5, 1, &[(0, vec![5], 1.0)]).unwrap()).unwrap();
        assert!(h.lowest_part(3).unwrap().is_zero(0.0));
        assert!(matches!(g.lowest_part(4), Err(ParabolicError::OrderViolation { .. })));
    }

    #[test]
    fn lowest_part_slope_along_ray() {
        let mut g = HomogeneousSum::new(2, 0, 1, 0);
        g.add_poly(random_poly(2, 4, 1, 17)).unwrap();
        g.add_poly(random_poly(2, 6, 1, 18)).unwrap();
        let p = g.lowest_part(4).unwrap().average();
        let dir = [0.6, 0.8];
        let at = |r: f64| p.eval(&[r * dir[0], r * dir[1]])[0].abs().ln();
        let slope = (at(1e-2) - at(1e-3)) / (1e-2f64.ln() - 1e-3f64.ln());
        assert!((slope - 4.0).abs() < 0.05);
        let full = |r: f64| g.eval(&[r * dir[0], r * dir[1]], &[])[0].abs().ln();
        let slope_full = (full(1e-2) - full(1e-3)) / (1e-2f64.ln() - 1e-3f64.ln());
        assert!((slope_full - 4.0).abs() < 0.05);
    }

    #[test]
    fn derivative_of_cube() {
        let p = PolyTerm::from_terms(1, 3, 1, &[(0, vec![3], 1.0)]).unwrap();
        assert_eq!(p.derivative(0).coeffs(), &[3.0]);
    }

    #[test]
    fn theta_derivative_of_constant_vanishes() {
        let mut s = HomogeneousSum::new(1, 1, 1, 3);
        s.add_poly(PolyTerm::from_terms(1, 2, 1, &[(0, vec![2], 1.0)]).unwrap()).unwrap();
        let d = s.differentiate(Wrt::Theta(0), false).unwrap();
        assert!(d.eval(&[0.4], &[0.3])[0].abs() == 0.0);
    }

    #[test]
    fn poly_derivative_matches_finite_differences() {
        let p = random_poly(3, 5, 2, 31);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..20 {
            let u: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
            for i in 0..3 {
                let d = p.derivative(i).eval(&u);
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += h;
                um[i] -= h;
                let a = p.eval(&up);
                let b = p.eval(&um);
                for k in 0..2 {
                    let fd = (a[k] - b[k]) / (2.0 * h);
                    assert!((fd - d[k]).abs() <= 1e-6 * d[k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn ray_derivative_requires_fallback() {
        let sec = Section::gnomonic(&[1.0, 1.0], 0.5, 21);
        let r = RayTerm::from_fn(sec, 2, 1, |d| vec![d[0] * d[1]]);
        let mut s = HomogeneousSum::new(2, 0, 1, 0);
        s.add_term(FourierMap::constant(0, 0, HomogeneousTerm::Ray(r))).unwrap();
        assert!(matches!(
            s.differentiate(Wrt::U(0), false),
            Err(ParabolicError::BackendUnsupported(_))
        ));
        let d = s.differentiate(Wrt::U(0), true).unwrap();
        let v = d.eval(&[0.5, 0.6], &[])[0];
        assert!((v - 0.6).abs() < 1e-6);
    }

    #[test]
    fn ray_reproduces_nodes_and_interpolates() {
        let sec = Section::gnomonic(&[1.0, 1.0, 1.0], 0.4, 9);
        let f = |d: &[f64]| vec![d[0] * d[1] * d[2] / (d[0] + d[1] + d[2]).powi(2)];
        let r = RayTerm::from_fn(sec.clone(), 1, 1, f);
        for (dir, v) in sec.node_directions().iter().zip(&r.values) {
            assert!((r.eval(dir)[0] - v[0]).abs() < 1e-14);
        }
        assert!(r.interpolation_error(f) < 1e-6);
    }

    #[test]
    fn ray_half_line_is_scalar_multiple() {
        let r = RayTerm::from_fn(Section::half_line(1.0), 3, 1, |d| vec![-d[0].powi(3) / 3.0]);
        assert!((r.eval(&[2.0])[0] + 8.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn poly_doc_round_trip() {
        let p = random_poly(2, 3, 2, 77);
        let doc = p.to_doc();
        let json = serde_json::to_string(&doc).unwrap();
        let back = PolyTerm::from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn poly_terms_are_homogeneous(seed in 0u64..500, deg in 0usize..6, s in prop::sample::select(vec![0.5, 2.0, 10.0])) {
            let p = random_poly(3, deg, 2, seed);
            let u = [0.3, -0.7, 0.2];
            let su: Vec<f64> = u.iter().map(|x| x * s).collect();
            let a = p.eval(&su);
            let b = p.eval(&u);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - s.powi(deg as i32) * y).abs() <= 1e-10 * s.powi(deg as i32) * y.abs().max(1e-300) + 1e-14);
            }
        }

        #[test]
        fn euler_identity(seed in 0u64..500, deg in 1usize..6) {
            let p = random_poly(3, deg, 1, seed);
            let u = [0.5, 0.25, -0.4];
            let grad: f64 = (0..3).map(|i| p.derivative(i).eval(&u)[0] * u[i]).sum();
            let val = p.eval(&u)[0];
            prop_assert!((grad - deg as f64 * val).abs() <= 1e-12 * (1.0 + val.abs()));
        }

        #[test]
        fn ray_terms_are_homogeneous(s in prop::sample::select(vec![0.5, 2.0])) {
            let sec = Section::gnomonic(&[1.0, 2.0], 0.3, 7);
            let r = RayTerm::from_fn(sec.clone(), 3, 1, |d| vec![d[0].exp() * d[1]]);
            for dir in sec.node_directions() {
                let su: Vec<f64> = dir.iter().map(|x| x * s).collect();
                let a = r.eval(&su)[0];
                let b = r.eval(&dir)[0];
                prop_assert!((a - s.powi(3) * b).abs() <= 1e-10 * s.powi(3) * b.abs());
            }
        }

        #[test]
        fn composition_error_has_order_q(seed in 0u64..50) {
            let mut outer = HomogeneousSum::new(2, 0, 2, 0);
            outer.add_poly(random_poly(2, 2, 2, seed)).unwrap();
            outer.add_poly(random_poly(2, 3, 2, seed + 1)).unwrap();
            let mut inner = HomogeneousSum::new(2, 0, 2, 0);
            inner.add_poly(PolyTerm::from_terms(2, 1, 2, &[(0, vec![1, 0], 1.0), (1, vec![0, 1], 1.0)]).unwrap()).unwrap();
            inner.add_poly(random_poly(2, 2, 2, seed + 2)).unwrap();
            let q = 5;
            let mut c = outer.truncated_compose(&inner, None, q, None).unwrap();
            c.tail = None;
            let err = |r: f64| {
                let u = [0.6 * r, 0.8 * r];
                let x = inner.eval(&u, &[]);
                let a = outer.eval(&x, &[]);
                let b = c.eval(&u, &[]);
                a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
            };
            let slope = (err(2e-2).ln() - err(2e-3).ln()) / 10f64.ln();
            prop_assert!(slope >= q as f64 - 0.2);
        }
    }

    #[test]
    fn flat_sum_matches_generic_evaluation() {
        let mut s = HomogeneousSum::new(2, 1, 2, 3);
        for (deg, seed) in [(2usize, 1u64), (3, 2), (5, 3)] {
            let zero = HomogeneousTerm::Poly(PolyTerm::zero(2, deg, 2));
            let mut t = FourierMap::new(1, 3, zero);
            for k in 0..=3i32 {
                let re = HomogeneousTerm::Poly(random_poly(2, deg, 2, seed * 10 + k as u64));
                let im = if k == 0 {
                    HomogeneousTerm::Poly(PolyTerm::zero(2, deg, 2))
                } else {
                    HomogeneousTerm::Poly(random_poly(2, deg, 2, seed * 100 + k as u64))
                };
                t.set_mode(&[k], re, im).unwrap();
            }
            s.add_term(t).unwrap();
        }
        let flat = FlatSum::new(&s).unwrap();
        let (u, th) = ([0.31, -0.17], [0.23]);
        let want = s.eval(&u, &th);
        let (got, jac) = flat.eval_with_jacobian(&u, &th);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(flat.eval(&u, &th), got);
        let vars: Vec<Jet> = (0..2).map(|i| Jet::variable(2, 1, i, u[i])).collect();
        let tj = [Jet::constant(2, 1, th[0])];
        for (r, row) in s.eval(&vars, &tj).iter().enumerate() {
            for i in 0..2 {
                let mut e = vec![0u32; 2];
                e[i] = 1;
                assert!((jac[r][i] - row.coeff(&e)).abs() < 1e-13);
            }
        }
    }
}
