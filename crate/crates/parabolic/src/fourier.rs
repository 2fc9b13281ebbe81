//! Truncated Fourier series on the torus `T^d = R^d / Z^d` with block-valued
//! coefficients, and the two small-divisors solvers.
//!
//! A real series is stored through one representative per conjugate pair of
//! modes: the zero mode and every `k` whose first nonzero entry is positive.
//! The value at `theta` is
//! `c_0 + sum_{k > 0} 2 (re_k cos(2 pi k.theta) - im_k sin(2 pi k.theta))`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ParabolicError, Result};
use crate::jet::Scalar;

/// Default lower bound on the magnitude of a divisor before a solver gives up.
pub const DEFAULT_DIVISOR_FLOOR: f64 = 1e-8;

/// Coefficient payload of a Fourier mode: anything closed under real linear combinations.
pub trait Block: Clone {
    fn zero_like(&self) -> Self;
    /// `a x + b y`.
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self;
    /// Largest absolute entry, used for size checks.
    fn max_abs(&self) -> f64;
}

impl Block for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        a * x + b * y
    }
    fn max_abs(&self) -> f64 {
        self.abs()
    }
}

impl Block for Vec<f64> {
    fn zero_like(&self) -> Self {
        vec![0.0; self.len()]
    }
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()
    }
    fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Frequency vector of a quasiperiodic map or flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub omega: Vec<f64>,
    /// Time frequencies of a quasiperiodic flow; appended to `omega` in the extended frequency.
    #[serde(default)]
    pub time_freq: Option<Vec<f64>>,
}

impl Frequency {
    pub fn new(omega: Vec<f64>) -> Self {
        Self {
            omega,
            time_freq: None,
        }
    }

    pub fn with_time(omega: Vec<f64>, nu: Vec<f64>) -> Self {
        Self {
            omega,
            time_freq: Some(nu),
        }
    }

    /// `(omega, nu)` concatenated.
    pub fn extended(&self) -> Vec<f64> {
        let mut v = self.omega.clone();
        if let Some(nu) = &self.time_freq {
            v.extend(nu);
        }
        v
    }

    pub fn golden_mean() -> Self {
        Self::new(vec![(5f64.sqrt() - 1.0) / 2.0])
    }
}

/// Whether divisors come from a map (`e^{2 pi i k.w} - 1`) or a flow (`2 pi i k.w`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivisorKind {
    Map,
    Flow,
}

/// `true` if `k` is the stored representative of the pair `{k, -k}`.
pub fn is_canonical(k: &[i32]) -> bool {
    match k.iter().find(|&&v| v != 0) {
        None => true,
        Some(&v) => v > 0,
    }
}

/// Canonical modes with `|k_i| <= truncation`, the zero mode first.
pub fn canonical_modes(d: usize, truncation: usize) -> Vec<Vec<i32>> {
    let t = truncation as i32;
    let mut out: Vec<Vec<i32>> = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                (-t..=t).map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    let mut modes: Vec<Vec<i32>> = out.into_iter().filter(|k| is_canonical(k)).collect();
    modes.sort_by_key(|k| (k.iter().map(|v| v.unsigned_abs()).sum::<u32>(), k.clone()));
    modes
}

/// Nodes `theta = idx / g` of a uniform grid on `T^d`, first axis slowest.
pub fn grid_nodes(d: usize, g: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..g).map(move |i| {
                    let mut q = p.clone();
                    q.push(i as f64 / g as f64);
                    q
                })
            })
            .collect();
    }
    out
}

fn dot_k(k: &[i32], v: &[f64]) -> f64 {
    k.iter().zip(v).map(|(&a, &b)| a as f64 * b).sum()
}

/// Truncated real Fourier series with block coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMap<B> {
    angle_dim: usize,
    truncation: usize,
    zero: B,
    modes: BTreeMap<Vec<i32>, (B, B)>,
}

impl<B: Block> FourierMap<B> {
    /// The zero series; `zero` fixes the block shape.
    pub fn new(angle_dim: usize, truncation: usize, zero: B) -> Self {
        Self {
            angle_dim,
            truncation,
            zero,
            modes: BTreeMap::new(),
        }
    }

    /// A series that only has an average.
    pub fn constant(angle_dim: usize, truncation: usize, avg: B) -> Self {
        let zero = avg.zero_like();
        let mut m = Self::new(angle_dim, truncation, zero.clone());
        m.modes.insert(vec![0; angle_dim], (avg, zero));
        m
    }

    pub fn angle_dim(&self) -> usize {
        self.angle_dim
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn zero_block(&self) -> &B {
        &self.zero
    }

    /// Sets the coefficient of mode `k` to `re + i im`; the conjugate mode follows.
    pub fn set_mode(&mut self, k: &[i32], re: B, im: B) -> Result<()> {
        if k.len() != self.angle_dim {
            return Err(ParabolicError::InvalidInput(format!(
                "mode {k:?} has wrong dimension (expected {})",
                self.angle_dim
            )));
        }
        if k.iter().any(|v| v.unsigned_abs() as usize > self.truncation) {
            return Err(ParabolicError::InvalidInput(format!(
                "mode {k:?} exceeds truncation {}",
                self.truncation
            )));
        }
        if k.iter().all(|&v| v == 0) {
            self.modes.insert(k.to_vec(), (re, self.zero.clone()));
        } else if is_canonical(k) {
            self.modes.insert(k.to_vec(), (re, im));
        } else {
            let neg: Vec<i32> = k.iter().map(|v| -v).collect();
            let conj = B::lincomb(-1.0, &im, 0.0, &self.zero);
            self.modes.insert(neg, (re, conj));
        }
        Ok(())
    }

    /// Coefficient of any mode, conjugating stored data for non-canonical `k`.
    pub fn coeff(&self, k: &[i32]) -> (B, B) {
        if is_canonical(k) {
            self.modes
                .get(k)
                .cloned()
                .unwrap_or_else(|| (self.zero.clone(), self.zero.clone()))
        } else {
            let neg: Vec<i32> = k.iter().map(|v| -v).collect();
            match self.modes.get(&neg) {
                Some((re, im)) => (re.clone(), B::lincomb(-1.0, im, 0.0, &self.zero)),
                None => (self.zero.clone(), self.zero.clone()),
            }
        }
    }

    /// Stored canonical modes with their `(re, im)` blocks.
    pub fn modes(&self) -> impl Iterator<Item = (&Vec<i32>, &(B, B))> {
        self.modes.iter()
    }

    pub fn average(&self) -> B {
        self.coeff(&vec![0; self.angle_dim]).0
    }

    /// The series minus its average.
    pub fn oscillatory(&self) -> Self {
        let mut out = self.clone();
        out.modes.remove(&vec![0; self.angle_dim]);
        out
    }

    /// `(average, oscillatory part)`.
    pub fn split_average(&self) -> (B, Self) {
        (self.average(), self.oscillatory())
    }

    pub fn map_blocks<C: Block>(&self, zero: C, f: impl Fn(&B) -> C) -> FourierMap<C> {
        FourierMap {
            angle_dim: self.angle_dim,
            truncation: self.truncation,
            zero,
            modes: self
                .modes
                .iter()
                .map(|(k, (re, im))| (k.clone(), (f(re), f(im))))
                .collect(),
        }
    }

    /// `a self + b other`; the result keeps the larger truncation.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        let mut out = Self::new(x.angle_dim, x.truncation.max(y.truncation), x.zero.clone());
        for (k, (re, im)) in &x.modes {
            out.modes.insert(k.clone(), (B::lincomb(a, re, 0.0, re), B::lincomb(a, im, 0.0, im)));
        }
        for (k, (re, im)) in &y.modes {
            let entry = out
                .modes
                .entry(k.clone())
                .or_insert_with(|| (x.zero.clone(), x.zero.clone()));
            entry.0 = B::lincomb(1.0, &entry.0, b, re);
            entry.1 = B::lincomb(1.0, &entry.1, b, im);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::lincomb(s, self, 0.0, self)
    }

    /// Largest block entry over all stored modes.
    pub fn max_abs(&self) -> f64 {
        self.modes
            .values()
            .fold(0.0, |m, (re, im)| m.max(re.max_abs()).max(im.max_abs()))
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.max_abs() <= tol
    }

    /// Drops modes whose blocks are all below `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.modes
            .retain(|_, (re, im)| re.max_abs() > tol || im.max_abs() > tol);
    }

    /// Multiplies each coefficient by `e^{2 pi i k.shift}`, i.e. `theta -> theta + shift`.
    pub fn translate(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, (re, im)) in out.modes.iter_mut() {
            let (s, c) = (2.0 * PI * dot_k(k, shift)).sin_cos();
            let nre = B::lincomb(c, re, -s, im);
            let nim = B::lincomb(s, re, c, im);
            *re = nre;
            *im = nim;
        }
        out
    }

    /// Evaluates the series at `theta`, turning each block into a vector with `eval_block`.
    pub fn eval_with<S: Scalar>(
        &self,
        theta: &[S],
        proto: &S,
        eval_block: impl Fn(&B) -> Vec<S>,
    ) -> Vec<S> {
        let mut acc: Option<Vec<S>> = None;
        for (k, (re, im)) in &self.modes {
            let constant = k.iter().all(|&v| v == 0);
            if !constant && acc.is_some() && re.max_abs() == 0.0 && im.max_abs() == 0.0 {
                continue;
            }
            let vre = eval_block(re);
            let contrib: Vec<S> = if constant {
                vre
            } else {
                let mut phase = proto.zero_like();
                for (&ki, t) in k.iter().zip(theta) {
                    if ki != 0 {
                        phase = phase + t.clone() * (2.0 * PI * ki as f64);
                    }
                }
                let c = phase.cos();
                let s = phase.sin();
                let vim = eval_block(im);
                vre.into_iter()
                    .zip(vim)
                    .map(|(a, b)| (a * c.clone() - b * s.clone()) * 2.0)
                    .collect()
            };
            acc = Some(match acc {
                None => contrib,
                Some(a) => a.into_iter().zip(contrib).map(|(p, q)| p + q).collect(),
            });
        }
        acc.unwrap_or_default()
    }

    /// Canonical-mode projection of samples taken on [`grid_nodes`]`(d, g)`.
    pub fn from_grid_samples(angle_dim: usize, truncation: usize, g: usize, samples: &[B]) -> Self {
        let nodes = grid_nodes(angle_dim, g);
        assert_eq!(nodes.len(), samples.len(), "sample count mismatch");
        let zero = samples[0].zero_like();
        let mut out = Self::new(angle_dim, truncation, zero.clone());
        let w = 1.0 / nodes.len() as f64;
        for k in canonical_modes(angle_dim, truncation) {
            let mut re = zero.clone();
            let mut im = zero.clone();
            for (theta, val) in nodes.iter().zip(samples) {
                let (s, c) = (2.0 * PI * dot_k(&k, theta)).sin_cos();
                re = B::lincomb(1.0, &re, w * c, val);
                im = B::lincomb(1.0, &im, -w * s, val);
            }
            if k.iter().all(|&v| v == 0) {
                im = zero.clone();
            }
            out.modes.insert(k, (re, im));
        }
        out
    }

    /// Least-squares rate `sigma` in `max|c_k| ~ C e^{-2 pi sigma |k|}` over the stored shells.
    ///
    /// Returns `None` when fewer than two nonzero shells exist.
    pub fn decay_fit(&self) -> Option<f64> {
        let mut shells: BTreeMap<u32, f64> = BTreeMap::new();
        for (k, (re, im)) in &self.modes {
            let n: u32 = k.iter().map(|v| v.unsigned_abs()).sum();
            let m = re.max_abs().max(im.max_abs());
            let e = shells.entry(n).or_insert(0.0);
            *e = e.max(m);
        }
        let pts: Vec<(f64, f64)> = shells
            .into_iter()
            .filter(|&(_, m)| m > 0.0)
            .map(|(n, m)| (n as f64, m.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let (slope, _) = linear_fit(&pts);
        Some(-slope / (2.0 * PI))
    }
}

/// Ordinary least-squares line through `(x, y)` points: `(slope, intercept)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

impl FourierMap<Vec<f64>> {
    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        let out = self.eval_with(theta, &0.0, |b| b.clone());
        if out.is_empty() {
            self.zero.clone()
        } else {
            out
        }
    }
}

fn divisor(k: &[i32], freq: &[f64], kind: DivisorKind) -> Complex64 {
    let a = 2.0 * PI * dot_k(k, freq);
    match kind {
        DivisorKind::Map => Complex64::new(a.cos() - 1.0, a.sin()),
        DivisorKind::Flow => Complex64::new(0.0, a),
    }
}

fn solve_small_divisors<B: Block>(
    h: &FourierMap<B>,
    freq: &[f64],
    kind: DivisorKind,
    floor: f64,
) -> Result<FourierMap<B>> {
    if freq.len() != h.angle_dim {
        return Err(ParabolicError::InvalidInput(format!(
            "frequency has length {} but series lives on T^{}",
            freq.len(),
            h.angle_dim
        )));
    }
    let avg = h.average().max_abs();
    if avg > 0.0 {
        return Err(ParabolicError::NonzeroAverage(avg));
    }
    let mut out = FourierMap::new(h.angle_dim, h.truncation, h.zero.clone());
    for (k, (re, im)) in &h.modes {
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        let z = divisor(k, freq, kind);
        if z.norm() <= floor {
            return Err(ParabolicError::NearResonance {
                k: k.clone(),
                divisor: z.norm(),
            });
        }
        let w = z.inv();
        let nre = B::lincomb(w.re, re, -w.im, im);
        let nim = B::lincomb(w.im, re, w.re, im);
        out.modes.insert(k.clone(), (nre, nim));
    }
    Ok(out)
}

/// Zero-average `phi` with `phi(theta + omega) - phi(theta) = h(theta)` mode by mode.
pub fn solve_small_divisors_map<B: Block>(
    h: &FourierMap<B>,
    freq: &Frequency,
    divisor_floor: f64,
) -> Result<FourierMap<B>> {
    solve_small_divisors(h, &freq.omega, DivisorKind::Map, divisor_floor)
}

/// Zero-average `psi` with `d_theta psi . omega = h`, using the extended frequency.
pub fn solve_small_divisors_flow<B: Block>(
    h: &FourierMap<B>,
    freq: &Frequency,
    divisor_floor: f64,
) -> Result<FourierMap<B>> {
    solve_small_divisors(h, &freq.extended(), DivisorKind::Flow, divisor_floor)
}

/// Exhaustive Diophantine constants for one exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineEntry {
    pub tau: f64,
    /// Largest `c` with `divisor(k) >= c |k|^{-tau}` for every scanned `k`.
    pub c: f64,
    /// Mode attaining the minimum.
    pub worst_k: Vec<i32>,
    pub resonant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub kind: DivisorKind,
    pub k_max: usize,
    pub entries: Vec<DiophantineEntry>,
}

/// Scans every `0 < |k|_1 <= k_max` and reports the Diophantine constant for each `tau`.
pub fn diophantine_report(
    freq: &Frequency,
    kind: DivisorKind,
    k_max: usize,
    tau_grid: &[f64],
) -> DiophantineReport {
    let w = match kind {
        DivisorKind::Map => freq.omega.clone(),
        DivisorKind::Flow => freq.extended(),
    };
    let d = w.len();
    let mut best: Vec<(f64, Vec<i32>)> = vec![(f64::INFINITY, Vec::new()); tau_grid.len()];
    for k in canonical_modes(d, k_max) {
        let norm: i32 = k.iter().map(|v| v.abs()).sum();
        if norm == 0 || norm as usize > k_max {
            continue;
        }
        let s = dot_k(&k, &w);
        let gap = match kind {
            DivisorKind::Map => (s - s.round()).abs(),
            DivisorKind::Flow => s.abs(),
        };
        for (slot, &tau) in best.iter_mut().zip(tau_grid) {
            let c = gap * (norm as f64).powf(tau);
            if c < slot.0 {
                *slot = (c, k.clone());
            }
        }
    }
    DiophantineReport {
        kind,
        k_max,
        entries: best
            .into_iter()
            .zip(tau_grid)
            .map(|((c, k), &tau)| DiophantineEntry {
                tau,
                c,
                worst_k: k,
                resonant: c < 1e-13,
            })
            .collect(),
    }
}

/// Serialized form `{d, K, modes: [{k, re, im}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierDoc<B> {
    pub d: usize,
    #[serde(rename = "K")]
    pub truncation: usize,
    pub modes: Vec<ModeDoc<B>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDoc<B> {
    pub k: Vec<i32>,
    pub re: B,
    pub im: B,
}

impl<B: Block + Serialize + DeserializeOwned> FourierMap<B> {
    pub fn to_doc(&self) -> FourierDoc<B> {
        FourierDoc {
            d: self.angle_dim,
            truncation: self.truncation,
            modes: self
                .modes
                .iter()
                .map(|(k, (re, im))| ModeDoc {
                    k: k.clone(),
                    re: re.clone(),
                    im: im.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a series; a mode given together with its negative is symmetrized.
    pub fn from_doc(doc: &FourierDoc<B>) -> Result<Self> {
        let first = doc
            .modes
            .first()
            .ok_or_else(|| ParabolicError::InvalidInput("series without modes".into()))?;
        let zero = first.re.zero_like();
        let mut out = Self::new(doc.d, doc.truncation, zero.clone());
        let mut counts: BTreeMap<Vec<i32>, usize> = BTreeMap::new();
        for m in &doc.modes {
            let (key, re, im) = if is_canonical(&m.k) {
                (m.k.clone(), m.re.clone(), m.im.clone())
            } else {
                let neg: Vec<i32> = m.k.iter().map(|v| -v).collect();
                (neg, m.re.clone(), B::lincomb(-1.0, &m.im, 0.0, &zero))
            };
            let n = counts.entry(key.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                out.set_mode(&key, re, im)?;
            } else {
                let (pre, pim) = out.coeff(&key);
                out.set_mode(&key, B::lincomb(0.5, &pre, 0.5, &re), B::lincomb(0.5, &pim, 0.5, &im))?;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("Fourier series serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: FourierDoc<B> =
            serde_json::from_str(s).map_err(|e| ParabolicError::InvalidInput(e.to_string()))?;
        Self::from_doc(&doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_series(d: usize, truncation: usize, count: usize, seed: u64) -> FourierMap<Vec<f64>> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let modes: Vec<Vec<i32>> = canonical_modes(d, truncation).into_iter().skip(1).collect();
        let mut h = FourierMap::new(d, truncation, vec![0.0; 2]);
        for _ in 0..count {
            let k = modes[rng.gen_range(0..modes.len())].clone();
            let re = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let im = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            h.set_mode(&k, re, im).unwrap();
        }
        h
    }

    #[test]
    fn zero_input_gives_zero_solution() {
        let h = FourierMap::new(1, 4, vec![0.0]);
        let f = Frequency::golden_mean();
        assert!(solve_small_divisors_map(&h, &f, DEFAULT_DIVISOR_FLOOR).unwrap().is_zero(0.0));
        assert!(solve_small_divisors_flow(&h, &f, DEFAULT_DIVISOR_FLOOR).unwrap().is_zero(0.0));
    }

    #[test]
    fn single_mode_map_closed_form() {
        let f = Frequency::golden_mean();
        let mut h = FourierMap::new(1, 2, 0.0);
        h.set_mode(&[1], 0.7, -0.2).unwrap();
        let phi = solve_small_divisors_map(&h, &f, DEFAULT_DIVISOR_FLOOR).unwrap();
        let expect = Complex64::new(0.7, -0.2)
            / (Complex64::new(0.0, 2.0 * PI * f.omega[0]).exp() - 1.0);
        let (re, im) = phi.coeff(&[1]);
        assert!((re - expect.re).abs() < 1e-15 && (im - expect.im).abs() < 1e-15);
    }

    #[test]
    fn single_mode_flow_closed_form() {
        let f = Frequency::new(vec![2f64.sqrt()]);
        let mut h = FourierMap::new(1, 3, 0.0);
        h.set_mode(&[3], 1.0, 0.5).unwrap();
        let psi = solve_small_divisors_flow(&h, &f, DEFAULT_DIVISOR_FLOOR).unwrap();
        let expect = Complex64::new(1.0, 0.5) / Complex64::new(0.0, 2.0 * PI * 3.0 * f.omega[0]);
        let (re, im) = psi.coeff(&[3]);
        assert!((re - expect.re).abs() < 1e-15 && (im - expect.im).abs() < 1e-15);
    }

    #[test]
    fn random_two_torus_map_residual() {
        let f = Frequency::new(vec![2f64.sqrt(), 3f64.sqrt()]);
        let h = random_series(2, 6, 16, 7);
        let phi = solve_small_divisors_map(&h, &f, DEFAULT_DIVISOR_FLOOR).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..64 {
            let th = [rng.gen::<f64>(), rng.gen::<f64>()];
            let shifted = [th[0] + f.omega[0], th[1] + f.omega[1]];
            let a = phi.eval(&shifted);
            let b = phi.eval(&th);
            let c = h.eval(&th);
            for i in 0..2 {
                assert!((a[i] - b[i] - c[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn flow_solution_matches_finite_differences() {
        let f = Frequency::new(vec![(3f64).sqrt() - 1.0]);
        let h = random_series(1, 8, 10, 11);
        let psi = solve_small_divisors_flow(&h, &f, DEFAULT_DIVISOR_FLOOR).unwrap();
        let step = 1e-6;
        for i in 0..40 {
            let th = i as f64 / 40.0;
            let p = psi.eval(&[th + step]);
            let m = psi.eval(&[th - step]);
            let rhs = h.eval(&[th]);
            for j in 0..2 {
                let dd = (p[j] - m[j]) / (2.0 * step) * f.omega[0];
                assert!((dd - rhs[j]).abs() < 1e-8, "fd residual {}", dd - rhs[j]);
            }
        }
    }

    #[test]
    fn nonzero_average_rejected() {
        let h = FourierMap::constant(1, 2, vec![1.0]);
        let err = solve_small_divisors_map(&h, &Frequency::golden_mean(), 1e-8).unwrap_err();
        assert!(matches!(err, ParabolicError::NonzeroAverage(_)));
    }

    #[test]
    fn resonance_rejected() {
        let mut h = FourierMap::new(1, 2, 0.0);
        h.set_mode(&[2], 1.0, 0.0).unwrap();
        let err = solve_small_divisors_map(&h, &Frequency::new(vec![0.5]), 1e-8).unwrap_err();
        assert!(matches!(err, ParabolicError::NearResonance { .. }));
    }

    #[test]
    fn rational_frequency_reports_resonance() {
        let r = diophantine_report(&Frequency::new(vec![0.5]), DivisorKind::Map, 4, &[1.0]);
        assert!(r.entries[0].resonant);
        assert_eq!(r.entries[0].worst_k, vec![2]);
    }

    #[test]
    fn golden_mean_is_diophantine() {
        let r = diophantine_report(&Frequency::golden_mean(), DivisorKind::Map, 50, &[1.0]);
        assert!(r.entries[0].c > 0.1 && !r.entries[0].resonant);
    }

    #[test]
    fn sqrt_pair_is_diophantine() {
        let f = Frequency::new(vec![2f64.sqrt(), 3f64.sqrt()]);
        let r = diophantine_report(&f, DivisorKind::Map, 30, &[2.0]);
        assert!(r.entries[0].c > 0.0 && !r.entries[0].resonant);
    }

    #[test]
    fn report_is_monotone_in_k_max() {
        let f = Frequency::new(vec![2f64.sqrt(), 3f64.sqrt()]);
        let mut prev = f64::INFINITY;
        for k_max in [5, 10, 20, 40] {
            let c = diophantine_report(&f, DivisorKind::Flow, k_max, &[2.0]).entries[0].c;
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn split_average_parts() {
        let c = FourierMap::constant(1, 3, vec![2.0]);
        let (a, o) = c.split_average();
        assert_eq!(a, vec![2.0]);
        assert!(o.is_zero(0.0));
        let mut p = FourierMap::new(1, 3, vec![0.0]);
        p.set_mode(&[2], vec![1.0], vec![0.5]).unwrap();
        let (a, o) = p.split_average();
        assert_eq!(a, vec![0.0]);
        assert_eq!(o, p);
    }

    #[test]
    fn conjugate_mode_is_stored_once() {
        let mut h = FourierMap::new(1, 3, 0.0);
        h.set_mode(&[-2], 1.0, 0.25).unwrap();
        assert_eq!(h.coeff(&[2]), (1.0, -0.25));
        assert_eq!(h.coeff(&[-2]), (1.0, 0.25));
        assert_eq!(h.modes().count(), 1);
    }

    #[test]
    fn grid_projection_recovers_modes() {
        let h = random_series(2, 3, 8, 5);
        let nodes = grid_nodes(2, 8);
        let samples: Vec<Vec<f64>> = nodes.iter().map(|t| h.eval(t)).collect();
        let back = FourierMap::from_grid_samples(2, 3, 8, &samples);
        for k in canonical_modes(2, 3) {
            let (a, b) = h.coeff(&k);
            let (c, d) = back.coeff(&k);
            for i in 0..2 {
                assert!((a[i] - c[i]).abs() < 1e-13 && (b[i] - d[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let h = random_series(2, 4, 12, 21);
        let back = FourierMap::<Vec<f64>>::from_json(&h.to_json()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let mut h = FourierMap::new(1, 10, 0.0);
        for k in 1..=10 {
            h.set_mode(&[k], (-2.0 * PI * 0.3 * k as f64).exp(), 0.0).unwrap();
        }
        assert!((h.decay_fit().unwrap() - 0.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn solver_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let f = Frequency::golden_mean();
            let h1 = random_series(1, 6, 5, seed);
            let h2 = random_series(1, 6, 5, seed + 1);
            let combo = FourierMap::lincomb(a, &h1, b, &h2);
            let lhs = solve_small_divisors_map(&combo, &f, 1e-8).unwrap();
            let p1 = solve_small_divisors_map(&h1, &f, 1e-8).unwrap();
            let p2 = solve_small_divisors_map(&h2, &f, 1e-8).unwrap();
            let rhs = FourierMap::lincomb(a, &p1, b, &p2);
            let diff = FourierMap::lincomb(1.0, &lhs, -1.0, &rhs);
            prop_assert!(diff.max_abs() < 1e-12 * (1.0 + lhs.max_abs()));
        }

        #[test]
        fn split_reassembles_bitwise(seed in 0u64..1000) {
            let h = random_series(2, 3, 6, seed);
            let (avg, osc) = h.split_average();
            let mut back = osc.clone();
            back.set_mode(&[0, 0], avg, vec![0.0; 2]).unwrap();
            let mut orig = h.clone();
            orig.prune(0.0);
            back.prune(0.0);
            prop_assert_eq!(back, orig);
        }
    }
}
