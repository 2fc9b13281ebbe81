//! Cone domains and the constants that control contraction near a parabolic torus.
//!
//! Every supremum and infimum is estimated on a deterministic sample: a grid on
//! a gnomonic chart of the cone's cross-section times log-spaced radii. Each
//! constant is computed at two sample densities and the difference is reported
//! as an error bar.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ParabolicError, Result};
use crate::fourier::{diophantine_report, DiophantineReport, DivisorKind, Frequency};
use crate::homogeneous::Section;

/// Default relative margin of `E*` over its strict lower bound.
pub const DEFAULT_E_MARGIN: f64 = 0.05;
/// Radii are sampled over `[rho * RADIAL_SPAN, rho]`.
const RADIAL_SPAN: f64 = 1e-2;
/// Slack used when taking integer parts of ratios that are integers in exact arithmetic.
const FLOOR_SLACK: f64 = 1e-6;

/// Matrix and vector norm used for the constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Max-norm; matrices get the induced norm (largest absolute row sum).
    Max,
    Euclidean,
}

impl NormKind {
    pub fn vector(&self, v: &[f64]) -> f64 {
        match self {
            NormKind::Max => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            NormKind::Euclidean => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn matrix(&self, a: &DMatrix<f64>) -> f64 {
        match self {
            NormKind::Max => (0..a.nrows())
                .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            NormKind::Euclidean => a.clone().svd(false, false).singular_values.max(),
        }
    }

    /// Norm of the dual space, used for distances to hyperplanes.
    pub fn dual(&self, v: &[f64]) -> f64 {
        match self {
            NormKind::Max => v.iter().map(|x| x.abs()).sum(),
            NormKind::Euclidean => self.vector(v),
        }
    }
}

/// Truncated polyhedral cone `V_rho = {x : <a_i, x> > 0, |x| < rho}` with a y-aperture `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub n: usize,
    /// Inward normals `a_i` of the half-spaces defining `V`.
    pub normals: Vec<Vec<f64>>,
    pub rho: f64,
    pub beta: f64,
    /// An interior direction used as the chart center for sampling.
    pub center: Vec<f64>,
    /// Half width of the sampled chart box.
    pub half_width: f64,
    pub sample_density: usize,
    pub norm: NormKind,
}

impl ConeSpec {
    /// `V = (0, inf)` in one variable.
    pub fn half_line(rho: f64) -> Self {
        Self {
            n: 1,
            normals: vec![vec![1.0]],
            rho,
            beta: rho,
            center: vec![1.0],
            half_width: 0.0,
            sample_density: 1,
            norm: NormKind::Max,
        }
    }

    /// General polyhedral cone.
    pub fn polyhedral(normals: Vec<Vec<f64>>, center: Vec<f64>, half_width: f64, rho: f64) -> Self {
        Self {
            n: center.len(),
            normals,
            rho,
            beta: rho,
            center,
            half_width,
            sample_density: 9,
            norm: NormKind::Max,
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_density(mut self, d: usize) -> Self {
        self.sample_density = d;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    /// Membership in the open cone `V` (radius ignored).
    pub fn contains(&self, x: &[f64]) -> bool {
        self.normals
            .iter()
            .all(|a| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() > 0.0)
    }

    pub fn contains_rho(&self, x: &[f64]) -> bool {
        self.contains(x) && self.norm.vector(x) < self.rho
    }

    /// Distance from `z` to the complement of `V_rho`; zero outside.
    pub fn dist_to_complement(&self, z: &[f64]) -> f64 {
        if !self.contains_rho(z) {
            return 0.0;
        }
        let facets = self
            .normals
            .iter()
            .map(|a| a.iter().zip(z).map(|(p, q)| p * q).sum::<f64>() / self.norm.dual(a))
            .fold(f64::INFINITY, f64::min);
        facets.min(self.rho - self.norm.vector(z))
    }

    /// Sampling section of the cone.
    pub fn section(&self) -> Section {
        if self.n == 1 {
            Section::half_line(self.center[0])
        } else {
            Section::gnomonic(&self.center, self.half_width, self.sample_density)
        }
    }

    /// Unit directions inside `V` on a uniform chart grid with `density` points per axis.
    pub fn sample_directions(&self, density: usize) -> Vec<Vec<f64>> {
        if self.n == 1 {
            return vec![vec![self.center[0].signum()]];
        }
        let sec = Section::gnomonic(&self.center, self.half_width, 2);
        let axes = self.n - 1;
        let pts: Vec<f64> = if density <= 1 {
            vec![0.0]
        } else {
            (0..density)
                .map(|i| -self.half_width + 2.0 * self.half_width * i as f64 / (density - 1) as f64)
                .collect()
        };
        let mut coords: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..axes {
            coords = coords
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
        coords
            .iter()
            .map(|s| {
                let d = sec.direction(s);
                let nrm = self.norm.vector(&d);
                d.iter().map(|v| v / nrm).collect::<Vec<f64>>()
            })
            .filter(|d| self.contains(d))
            .collect()
    }

    /// Sample points of `V_rho`: directions times `radii` log-spaced radii in `[rho/100, rho)`.
    pub fn sample_points(&self, density: usize, radii: usize) -> Vec<Vec<f64>> {
        let dirs = self.sample_directions(density);
        let radii = radii.max(2);
        let mut out = Vec::with_capacity(dirs.len() * radii);
        for k in 0..radii {
            let t = k as f64 / (radii - 1) as f64;
            let r = self.rho * (1.0 - 1e-9) * RADIAL_SPAN.powf(t);
            for d in &dirs {
                out.push(d.iter().map(|v| v * r).collect());
            }
        }
        out
    }
}

/// Leading parts of a model in the normal form `(x + f, y + g, theta + omega + h)`.
pub trait LeadingParts: Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn angle_dim(&self) -> usize;
    /// `(N, M, P)`.
    fn orders(&self) -> (usize, usize, usize);
    /// `fbar^N(x, 0)`.
    fn fbar_n(&self, x: &[f64]) -> Vec<f64>;
    /// `D_x fbar^N(x, 0)`.
    fn dx_fbar_n(&self, x: &[f64]) -> DMatrix<f64>;
    /// `D_y gbar^M(x, 0)`.
    fn dy_gbar_m(&self, x: &[f64]) -> DMatrix<f64>;
    /// `g^M(x, 0, theta)`.
    fn g_m_axis(&self, x: &[f64], theta: &[f64]) -> Vec<f64>;
}

/// Verdict on a single hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    /// Within the sampling error bar of its threshold.
    Marginal,
}

impl Verdict {
    /// Compares `value > threshold` with an error bar.
    pub fn greater(value: f64, threshold: f64, err: f64) -> Self {
        if !value.is_finite() {
            Verdict::Fail
        } else if value - err > threshold {
            Verdict::Pass
        } else if value + err <= threshold {
            Verdict::Fail
        } else {
            Verdict::Marginal
        }
    }
}

/// A constant together with its sampling error bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Constants attached to a model on a cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeConstants {
    pub a_f: Estimate,
    pub b_f: Estimate,
    pub big_a_f: Estimate,
    pub d_f: Estimate,
    pub b_g: Estimate,
    pub a_v: Estimate,
    /// Smallest singular value of `D_y gbar^M` over the sample.
    pub dy_gbar_min_sv: f64,
    /// Largest `|g^M(x, 0, theta)| / |x|^M` over the sample.
    pub g_axis_max: f64,
}

/// `E*`, `q*`, `j*_u` and the diagnostic bound on `E'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedIndices {
    pub e_star: f64,
    pub q_star: usize,
    pub j_star_u: usize,
    /// Upper bound `(N - 4/3)/(N - 5/3) E*`; informational only.
    pub e_prime_bound: f64,
}

struct RawConstants {
    a_f: f64,
    b_f: f64,
    big_a_f: f64,
    d_f: f64,
    b_g: f64,
    a_v: f64,
    min_sv: f64,
    g_axis: f64,
}

fn raw_constants<L: LeadingParts + ?Sized>(model: &L, cone: &ConeSpec, density: usize) -> Result<RawConstants> {
    let (nn, mm, _) = model.orders();
    let pts = cone.sample_points(density, 4 * density.max(3));
    if pts.is_empty() {
        return Err(ParabolicError::EmptyCone);
    }
    let nrm = cone.norm;
    let d = model.angle_dim();
    let thetas: Vec<Vec<f64>> = if d == 0 {
        vec![Vec::new()]
    } else {
        crate::fourier::grid_nodes(d, 8)
    };
    let per_point: Vec<[f64; 8]> = pts
        .par_iter()
        .map(|x| {
            let r = nrm.vector(x);
            let f = model.fbar_n(x);
            let xf: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + b).collect();
            let q_a = (nrm.vector(&xf) - r) / r.powi(nn as i32);
            let q_b = nrm.vector(&f) / r.powi(nn as i32);
            let df = model.dx_fbar_n(x);
            let id = DMatrix::<f64>::identity(x.len(), x.len());
            let q_big_a = (nrm.matrix(&(&id + &df)) - 1.0) / r.powi(nn as i32 - 1);
            let q_d = (nrm.matrix(&(&id - &df)) - 1.0) / r.powi(nn as i32 - 1);
            let (q_g, sv) = if model.m() > 0 {
                let dg = model.dy_gbar_m(x);
                let idm = DMatrix::<f64>::identity(model.m(), model.m());
                let q = (nrm.matrix(&(&idm - &dg)) - 1.0) / r.powi(mm as i32 - 1);
                let sv = dg.clone().svd(false, false).singular_values.min() / r.powi(mm as i32 - 1);
                (q, sv)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            };
            let q_v = cone.dist_to_complement(&xf) / r.powi(nn as i32);
            let g_axis = thetas
                .iter()
                .map(|t| nrm.vector(&model.g_m_axis(x, t)) / r.powi(mm as i32))
                .fold(0.0, f64::max);
            [q_a, q_b, q_big_a, q_d, q_g, q_v, sv, g_axis]
        })
        .collect();
    for (name, idx) in [("a_f", 0), ("b_f", 1), ("A_f", 2), ("D_f", 3), ("a_V", 5)] {
        if per_point.iter().any(|p| !p[idx].is_finite()) {
            return Err(ParabolicError::NonFiniteQuotient(name.into()));
        }
    }
    let sup = |i: usize| per_point.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
    let inf = |i: usize| per_point.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
    Ok(RawConstants {
        a_f: -sup(0),
        b_f: sup(1),
        big_a_f: -sup(2),
        d_f: -sup(3),
        b_g: if model.m() > 0 { -sup(4) } else { f64::INFINITY },
        a_v: inf(5),
        min_sv: inf(6),
        g_axis: sup(7),
    })
}

/// Estimates `a_f, b_f, A_f, D_f, B_g, a_V` on the sampled cone.
pub fn estimate_constants<L: LeadingParts + ?Sized>(model: &L, cone: &ConeSpec) -> Result<ConeConstants> {
    let coarse = raw_constants(model, cone, cone.sample_density)?;
    let fine = raw_constants(model, cone, 2 * cone.sample_density - 1)?;
    let est = |c: f64, f: f64| Estimate {
        value: f,
        error: (f - c).abs(),
    };
    Ok(ConeConstants {
        a_f: est(coarse.a_f, fine.a_f),
        b_f: est(coarse.b_f, fine.b_f),
        big_a_f: est(coarse.big_a_f, fine.big_a_f),
        d_f: est(coarse.d_f, fine.d_f),
        b_g: est(coarse.b_g, fine.b_g),
        a_v: est(coarse.a_v, fine.a_v),
        dy_gbar_min_sv: fine.min_sv,
        g_axis_max: fine.g_axis,
    })
}

/// `E*`, `q*` and `j*_u` from the constants and the orders.
pub fn derived_indices(c: &ConeConstants, n: usize, m: usize, p: usize, margin: f64) -> Result<DerivedIndices> {
    let a_f = c.a_f.value;
    if a_f <= 0.0 {
        return Err(ParabolicError::WeakContractionFail(a_f));
    }
    let base = if m == n {
        (-c.b_g.value).max(-c.d_f.value).max(0.0)
    } else {
        (-c.b_g.value).max(0.0)
    };
    let e_star = (1.0 + margin) * base;
    let nf = n as f64;
    let candidates = [
        (2 * n) as f64 - p as f64,
        (2 * n + 1) as f64 - m as f64,
        nf - 1.0 + (nf - 1.0) / (nf - 5.0 / 3.0) * e_star / a_f,
    ];
    let q_star = candidates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let j_star_u = if c.d_f.value >= 0.0 {
        1
    } else {
        ((-c.d_f.value / a_f) + FLOOR_SLACK).floor().max(1.0) as usize
    };
    Ok(DerivedIndices {
        e_star,
        q_star: (q_star + FLOOR_SLACK).floor() as usize,
        j_star_u,
        e_prime_bound: (nf - 4.0 / 3.0) / (nf - 5.0 / 3.0) * e_star,
    })
}

/// Named verdicts for the existence theorem hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub verdicts: BTreeMap<String, Verdict>,
    pub indices: Option<DerivedIndices>,
    pub diophantine: Option<DiophantineReport>,
}

impl HypothesisReport {
    /// All verdicts except the characterization clause pass.
    pub fn existence_holds(&self) -> bool {
        self.verdicts
            .iter()
            .filter(|(k, _)| k.as_str() != "B_g > 0")
            .all(|(_, v)| *v == Verdict::Pass)
    }
}

/// Checks the hypotheses of the existence theorems for a given order `q`.
pub fn check_hypotheses<L: LeadingParts + ?Sized>(
    model: &L,
    c: &ConeConstants,
    q: usize,
    freq: Option<(&Frequency, DivisorKind)>,
) -> HypothesisReport {
    let (n, m, p) = model.orders();
    let mut v = BTreeMap::new();
    v.insert("a_f > 0".to_string(), Verdict::greater(c.a_f.value, 0.0, c.a_f.error));
    v.insert("a_V > 0".to_string(), Verdict::greater(c.a_v.value, 0.0, c.a_v.error));
    let factor = 1.0f64.max(n as f64 - p as f64);
    v.insert(
        "A_f > b_f max{1, N-P}".to_string(),
        Verdict::greater(
            c.big_a_f.value - c.b_f.value * factor,
            0.0,
            c.big_a_f.error + c.b_f.error * factor,
        ),
    );
    if m < n {
        v.insert(
            "D_y gbar^M invertible".to_string(),
            Verdict::greater(c.dy_gbar_min_sv, 0.0, 1e-12),
        );
    } else if c.a_f.value > 0.0 {
        v.insert(
            "2 + B_g/a_f > 0".to_string(),
            Verdict::greater(2.0 + c.b_g.value / c.a_f.value, 0.0, (c.b_g.error + c.a_f.error) / c.a_f.value),
        );
    }
    v.insert(
        "g^M(x,0) = 0".to_string(),
        if c.g_axis_max <= 1e-12 {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
    );
    v.insert("B_g > 0".to_string(), Verdict::greater(c.b_g.value, 0.0, c.b_g.error));
    let indices = derived_indices(c, n, m, p, DEFAULT_E_MARGIN).ok();
    v.insert(
        "q >= q*".to_string(),
        match indices {
            Some(ix) if q >= ix.q_star => Verdict::Pass,
            _ => Verdict::Fail,
        },
    );
    let diophantine = freq.and_then(|(f, kind)| {
        let dim = match kind {
            DivisorKind::Map => f.omega.len(),
            DivisorKind::Flow => f.extended().len(),
        };
        if dim == 0 {
            return None;
        }
        let tau = dim as f64 + 1.0;
        let rep = diophantine_report(f, kind, 50, &[tau]);
        v.insert(
            "omega Diophantine".to_string(),
            if rep.entries[0].resonant {
                Verdict::Fail
            } else {
                Verdict::Pass
            },
        );
        Some(rep)
    });
    HypothesisReport {
        verdicts: v,
        indices,
        diophantine,
    }
}
