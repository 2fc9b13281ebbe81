//! Truncated multivariate Taylor series ("jets") and the [`Scalar`] trait that
//! lets the same model code run on plain `f64` values and on jets.
//!
//! A jet in `nvars` variables of order `q` stores every Taylor coefficient of
//! total degree `<= q`, graded by degree and ordered lexicographically inside
//! each degree. Products drop everything above degree `q`.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

/// Arithmetic shared by `f64` and [`Jet`].
pub trait Scalar:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant with the same shape (variable count, order) as `self`.
    fn constant_like(&self, v: f64) -> Self;
    /// Constant term.
    fn value(&self) -> f64;
    fn powf(&self, p: f64) -> Self;
    fn powi(&self, p: i32) -> Self;
    fn sqrt(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;

    fn zero_like(&self) -> Self {
        self.constant_like(0.0)
    }
}

impl Scalar for f64 {
    fn constant_like(&self, v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn powf(&self, p: f64) -> Self {
        f64::powf(*self, p)
    }
    fn powi(&self, p: i32) -> Self {
        f64::powi(*self, p)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
}

/// Monomial bookkeeping for a given (variable count, order) pair.
#[derive(Debug)]
pub struct JetLayout {
    pub nvars: usize,
    pub order: usize,
    /// Exponent vectors, graded then lexicographic (descending in the first variable).
    pub monomials: Vec<Vec<u32>>,
    /// `degree_start[d]` is the index of the first monomial of degree `d`; has length `order + 2`.
    pub degree_start: Vec<usize>,
    index: HashMap<Vec<u32>, usize>,
    /// Multiplication triples `(i, j, k)`: monomial i times monomial j is monomial k.
    products: Vec<(u32, u32, u32)>,
}

impl JetLayout {
    fn build(nvars: usize, order: usize) -> Self {
        let mut monomials = Vec::new();
        let mut degree_start = Vec::with_capacity(order + 2);
        for d in 0..=order {
            degree_start.push(monomials.len());
            monomials.extend(monomials_of_degree(nvars, d));
        }
        degree_start.push(monomials.len());
        let index: HashMap<Vec<u32>, usize> = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let mut products = Vec::new();
        for (i, a) in monomials.iter().enumerate() {
            let da: u32 = a.iter().sum();
            for (j, b) in monomials.iter().enumerate() {
                let db: u32 = b.iter().sum();
                if (da + db) as usize > order {
                    continue;
                }
                let c: Vec<u32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                products.push((i as u32, j as u32, index[&c] as u32));
            }
        }
        Self {
            nvars,
            order,
            monomials,
            degree_start,
            index,
            products,
        }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        self.index.get(exps).copied()
    }

    pub fn get(nvars: usize, order: usize) -> Arc<JetLayout> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetLayout>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("jet layout cache poisoned");
        guard
            .entry((nvars, order))
            .or_insert_with(|| Arc::new(JetLayout::build(nvars, order)))
            .clone()
    }
}

/// All exponent vectors of `nvars` variables with total degree `d`, in
/// lexicographic order with the first exponent largest first.
/// Shared copy of [`monomials_of_degree`].
pub fn monomial_table(nvars: usize, d: usize) -> Arc<Vec<Vec<u32>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Vec<Vec<u32>>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("monomial cache poisoned");
    map.entry((nvars, d))
        .or_insert_with(|| Arc::new(monomials_of_degree(nvars, d)))
        .clone()
}

pub fn monomials_of_degree(nvars: usize, d: usize) -> Vec<Vec<u32>> {
    fn rec(nvars: usize, d: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == nvars {
            prefix.push(d);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=d).rev() {
            prefix.push(e);
            rec(nvars, d - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if nvars == 0 {
        if d == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(nvars, d as u32, &mut Vec::with_capacity(nvars), &mut out);
    out
}

/// A truncated Taylor series in several variables.
#[derive(Clone)]
pub struct Jet {
    layout: Arc<JetLayout>,
    pub coeffs: Vec<f64>,
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Jet")
            .field("nvars", &self.layout.nvars)
            .field("order", &self.layout.order)
            .field("coeffs", &self.coeffs)
            .finish()
    }
}

impl Jet {
    pub fn constant(nvars: usize, order: usize, v: f64) -> Self {
        let layout = JetLayout::get(nvars, order);
        let mut coeffs = vec![0.0; layout.len()];
        coeffs[0] = v;
        Self { layout, coeffs }
    }

    /// The jet of `a + u_i` where `u_i` is the i-th variable.
    pub fn variable(nvars: usize, order: usize, i: usize, a: f64) -> Self {
        let mut j = Self::constant(nvars, order, a);
        if order >= 1 {
            let mut e = vec![0u32; nvars];
            e[i] = 1;
            let k = j.layout.index_of(&e).expect("linear monomial");
            j.coeffs[k] = 1.0;
        }
        j
    }

    /// A jet with prescribed coefficients, one per monomial of the layout.
    pub fn from_coeffs(nvars: usize, order: usize, coeffs: Vec<f64>) -> Self {
        let layout = JetLayout::get(nvars, order);
        assert_eq!(coeffs.len(), layout.len(), "coefficient count mismatch");
        Self { layout, coeffs }
    }

    pub fn layout(&self) -> &Arc<JetLayout> {
        &self.layout
    }

    pub fn nvars(&self) -> usize {
        self.layout.nvars
    }

    pub fn order(&self) -> usize {
        self.layout.order
    }

    pub fn coeff(&self, exps: &[u32]) -> f64 {
        self.layout.index_of(exps).map_or(0.0, |k| self.coeffs[k])
    }

    /// Coefficients of total degree `d`, in [`monomials_of_degree`] order.
    pub fn homogeneous_part(&self, d: usize) -> &[f64] {
        if d > self.order() {
            return &[];
        }
        &self.coeffs[self.layout.degree_start[d]..self.layout.degree_start[d + 1]]
    }

    /// Lowest degree carrying a coefficient with magnitude above `tol`.
    pub fn lowest_degree(&self, tol: f64) -> Option<usize> {
        (0..=self.order()).find(|&d| self.homogeneous_part(d).iter().any(|c| c.abs() > tol))
    }

    /// Sums the series at the displacement `h` from the expansion point.
    pub fn evaluate(&self, h: &[f64]) -> f64 {
        self.layout
            .monomials
            .iter()
            .zip(&self.coeffs)
            .map(|(m, c)| {
                c * m
                    .iter()
                    .zip(h)
                    .map(|(&e, &x)| x.powi(e as i32))
                    .product::<f64>()
            })
            .sum()
    }

    /// Partial derivative with respect to variable `i`; the top degree becomes zero.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = vec![0.0; self.coeffs.len()];
        for (k, m) in self.layout.monomials.iter().enumerate() {
            if m[i] == 0 {
                continue;
            }
            let mut e = m.clone();
            e[i] -= 1;
            let target = self.layout.index_of(&e).expect("lower monomial exists");
            out[target] += m[i] as f64 * self.coeffs[k];
        }
        Self {
            layout: self.layout.clone(),
            coeffs: out,
        }
    }

    /// Composition `self(args)`, where `args[i]` are jets whose constant
    /// terms are ignored (the expansion point of `self` is assumed to match).
    pub fn substitute(&self, args: &[Jet]) -> Jet {
        assert_eq!(args.len(), self.nvars());
        let proto = &args[0];
        let shifted: Vec<Jet> = args.iter().map(|a| a.clone() - a.value()).collect();
        let mut acc = proto.constant_like(0.0);
        for (m, c) in self.layout.monomials.iter().zip(&self.coeffs) {
            if *c == 0.0 {
                continue;
            }
            let mut term = proto.constant_like(*c);
            for (s, &e) in shifted.iter().zip(m) {
                if e > 0 {
                    term = term * s.powi_nonneg(e);
                }
            }
            acc = acc + term;
        }
        acc
    }

    fn powi_nonneg(&self, e: u32) -> Jet {
        let mut out = self.constant_like(1.0);
        let mut base = self.clone();
        let mut k = e;
        while k > 0 {
            if k & 1 == 1 {
                out = &out * &base;
            }
            k >>= 1;
            if k > 0 {
                base = &base * &base;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            layout: self.layout.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// Applies a scalar function given its derivatives at the constant term:
    /// `taylor[k] = f^{(k)}(a0) / k!`.
    fn compose_scalar(&self, taylor: &[f64]) -> Jet {
        let mut tilde = self.clone();
        tilde.coeffs[0] = 0.0;
        let q = self.order();
        let mut acc = self.constant_like(taylor[q.min(taylor.len() - 1)]);
        if q == 0 {
            return self.constant_like(taylor[0]);
        }
        for k in (0..q).rev() {
            acc = &acc * &tilde;
            acc.coeffs[0] += taylor[k];
        }
        acc
    }

    fn check_layout(&self, other: &Jet) {
        debug_assert!(
            Arc::ptr_eq(&self.layout, &other.layout),
            "jets with different layouts"
        );
    }
}

impl<'a> Add<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        self.check_layout(rhs);
        Jet {
            layout: self.layout.clone(),
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<'a> Sub<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        self.check_layout(rhs);
        Jet {
            layout: self.layout.clone(),
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect(),
        }
    }
}

impl<'a> Mul<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.check_layout(rhs);
        let mut out = vec![0.0; self.coeffs.len()];
        for &(i, j, k) in &self.layout.products {
            let a = self.coeffs[i as usize];
            if a == 0.0 {
                continue;
            }
            out[k as usize] += a * rhs.coeffs[j as usize];
        }
        Jet {
            layout: self.layout.clone(),
            coeffs: out,
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        self.check_layout(&rhs);
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a += b;
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        self.check_layout(&rhs);
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a -= b;
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        &self * &rhs
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        &self * &rhs.powi(-1)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for a in &mut self.coeffs {
            *a = -*a;
        }
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.coeffs[0] += rhs;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.coeffs[0] -= rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        for a in &mut self.coeffs {
            *a *= rhs;
        }
        self
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}

impl Scalar for Jet {
    fn constant_like(&self, v: f64) -> Self {
        let mut coeffs = vec![0.0; self.coeffs.len()];
        coeffs[0] = v;
        Jet {
            layout: self.layout.clone(),
            coeffs,
        }
    }

    fn value(&self) -> f64 {
        self.coeffs[0]
    }

    fn powf(&self, p: f64) -> Self {
        let a0 = self.value();
        let q = self.order();
        let mut taylor = Vec::with_capacity(q + 1);
        let mut fall = 1.0;
        let mut fact = 1.0;
        for k in 0..=q {
            if k > 0 {
                fall *= p - (k as f64 - 1.0);
                fact *= k as f64;
            }
            taylor.push(fall / fact * a0.powf(p - k as f64));
        }
        self.compose_scalar(&taylor)
    }

    fn powi(&self, p: i32) -> Self {
        if p >= 0 {
            self.powi_nonneg(p as u32)
        } else {
            self.powf(p as f64)
        }
    }

    fn sqrt(&self) -> Self {
        self.powf(0.5)
    }

    fn sin(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        let mut fact = 1.0;
        let taylor: Vec<f64> = (0..=self.order())
            .map(|k| {
                if k > 0 {
                    fact *= k as f64;
                }
                cycle[k % 4] / fact
            })
            .collect();
        self.compose_scalar(&taylor)
    }

    fn cos(&self) -> Self {
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        let mut fact = 1.0;
        let taylor: Vec<f64> = (0..=self.order())
            .map(|k| {
                if k > 0 {
                    fact *= k as f64;
                }
                cycle[k % 4] / fact
            })
            .collect();
        self.compose_scalar(&taylor)
    }

    fn exp(&self) -> Self {
        let e = self.value().exp();
        let mut fact = 1.0;
        let taylor: Vec<f64> = (0..=self.order())
            .map(|k| {
                if k > 0 {
                    fact *= k as f64;
                }
                e / fact
            })
            .collect();
        self.compose_scalar(&taylor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn layout_counts_monomials() {
        let l = JetLayout::get(2, 3);
        assert_eq!(l.len(), 10);
        assert_eq!(l.monomials[1], vec![1, 0]);
        assert_eq!(l.degree_start, vec![0, 1, 3, 6, 10]);
    }

    #[test]
    fn product_truncates() {
        let x = Jet::variable(1, 3, 0, 0.0);
        let y = &(&x * &x) * &(&x * &x);
        assert!(y.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn exp_of_variable_matches_series() {
        let x = Jet::variable(1, 6, 0, 0.3);
        let e = x.exp();
        let mut fact = 1.0;
        for k in 0..=6 {
            if k > 0 {
                fact *= k as f64;
            }
            assert_relative_eq!(e.coeffs[k], 0.3f64.exp() / fact, max_relative = 1e-14);
        }
    }

    #[test]
    fn sin_squared_plus_cos_squared_is_one() {
        let x = Jet::variable(2, 5, 0, 0.7);
        let y = Jet::variable(2, 5, 1, -0.2);
        let a = x * 2.0 + y;
        let s = a.sin();
        let c = a.cos();
        let one = &s * &s + &c * &c;
        assert_relative_eq!(one.coeffs[0], 1.0, epsilon = 1e-14);
        for k in 1..one.coeffs.len() {
            assert!(one.coeffs[k].abs() < 1e-13);
        }
    }

    #[test]
    fn division_inverts_multiplication() {
        let x = Jet::variable(2, 4, 0, 1.5);
        let y = Jet::variable(2, 4, 1, 0.5);
        let a = &x * &y + x.clone();
        let b = y.clone() + 2.0;
        let r = (&a * &b) / b;
        for (p, q) in r.coeffs.iter().zip(&a.coeffs) {
            assert_relative_eq!(p, q, epsilon = 1e-13);
        }
    }

    #[test]
    fn derivative_of_cube() {
        let x = Jet::variable(1, 4, 0, 0.0);
        let c = &(&x * &x) * &x;
        let d = c.derivative(0);
        assert_relative_eq!(d.coeffs[2], 3.0);
    }

    #[test]
    fn powf_matches_binomial_series() {
        let x = Jet::variable(1, 4, 0, 2.0);
        let p = x.powf(-0.5);
        assert_relative_eq!(p.coeffs[0], 2f64.powf(-0.5), max_relative = 1e-14);
        assert_relative_eq!(p.coeffs[1], -0.5 * 2f64.powf(-1.5), max_relative = 1e-14);
        assert_relative_eq!(p.coeffs[2], 0.375 * 2f64.powf(-2.5), max_relative = 1e-14);
    }

    #[test]
    fn substitution_composes_polynomials() {
        // f(u) = u^2 about 0, g(s) = s + s^2, so f(g(s)) = s^2 + 2 s^3 + s^4.
        let u = Jet::variable(1, 4, 0, 0.0);
        let f = &u * &u;
        let s = Jet::variable(1, 4, 0, 0.0);
        let g = &s * &s + s.clone();
        let h = f.substitute(&[g]);
        assert_relative_eq!(h.coeffs[2], 1.0);
        assert_relative_eq!(h.coeffs[3], 2.0);
        assert_relative_eq!(h.coeffs[4], 1.0);
    }

    #[test]
    fn evaluate_sums_taylor_polynomial() {
        let x = Jet::variable(2, 3, 0, 0.0);
        let y = Jet::variable(2, 3, 1, 0.0);
        let p = &x * &y + x.clone() * 3.0;
        assert_relative_eq!(p.evaluate(&[2.0, 5.0]), 16.0);
    }
}
