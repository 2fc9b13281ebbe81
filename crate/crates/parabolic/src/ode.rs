//! Dormand–Prince 5(4) integrator with dense output and a terminal event.

use crate::error::{ParabolicError, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Step-size control settings.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; zero picks one automatically.
    pub h0: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h0: 0.0,
            h_max: f64::INFINITY,
            max_steps: 1_000_000,
        }
    }
}

/// Continuous extension of one accepted step.
#[derive(Debug, Clone)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseSegment {
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        (0..self.rcont[0].len())
            .map(|i| {
                self.rcont[0][i]
                    + s * (self.rcont[1][i]
                        + s1 * (self.rcont[2][i] + s * (self.rcont[3][i] + s1 * self.rcont[4][i])))
            })
            .collect()
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }
}

/// Output of [`integrate`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub segments: Vec<DenseSegment>,
    /// Location of the terminal event, if it fired.
    pub event: Option<(f64, Vec<f64>)>,
}

impl Solution {
    pub fn last(&self) -> (f64, &[f64]) {
        match &self.event {
            Some((t, y)) => (*t, y.as_slice()),
            None => (*self.ts.last().expect("nonempty"), self.ys.last().expect("nonempty")),
        }
    }

    /// Dense-output value at `t` inside the integrated range.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let idx = self
            .segments
            .partition_point(|s| if s.h > 0.0 { s.t1() < t } else { s.t1() > t });
        let seg = &self.segments[idx.min(self.segments.len() - 1)];
        seg.eval(t)
    }
}

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        let hc = h * c;
        for (o, v) in out.iter_mut().zip(k.iter()) {
            *o += hc * v;
        }
    }
    out
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end` (either direction).
///
/// If `event` is given, integration stops at the first point where it changes
/// sign from positive to non-positive; the crossing is located on the dense
/// output by bisection.
pub fn integrate<F, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &OdeOptions,
    mut event: Option<G>,
) -> Result<Solution>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
    G: FnMut(f64, &[f64]) -> f64,
{
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = f(t, &y);
    let scale = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, z)| opts.atol + opts.rtol * x.abs().max(z.abs()))
            .collect()
    };
    let mut h = if opts.h0 > 0.0 {
        opts.h0
    } else {
        let sc = scale(&y, &y);
        let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (k1.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min((t_end - t0).abs().max(1e-12))
    };
    h = h.min(opts.h_max);
    let mut sol = Solution {
        ts: vec![t],
        ys: vec![y.clone()],
        segments: Vec::new(),
        event: None,
    };
    let mut g_prev = event.as_mut().map(|g| g(t, &y));
    let mut steps = 0;
    while dir * (t_end - t) > 0.0 {
        if steps >= opts.max_steps {
            return Err(ParabolicError::StepSizeUnderflow(t));
        }
        steps += 1;
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(ParabolicError::StepSizeUnderflow(t));
        }
        let hs = dir * h.min((t_end - t).abs());
        let k2 = f(t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]));
        let k3 = f(t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(t + C4 * hs, &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(
            t + C5 * hs,
            &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + hs,
            &axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        );
        let y1 = axpy(&y, hs, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = f(t + hs, &y1);
        let sc = scale(&y, &y1);
        let err = ((0..n)
            .map(|i| {
                let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                (e / sc[i]).powi(2)
            })
            .sum::<f64>()
            / n.max(1) as f64)
            .sqrt();
        if !err.is_finite() {
            h *= 0.2;
            continue;
        }
        if err <= 1.0 {
            let ydiff: Vec<f64> = y1.iter().zip(&y).map(|(a, b)| a - b).collect();
            let bspl: Vec<f64> = (0..n).map(|i| hs * k1[i] - ydiff[i]).collect();
            let r4: Vec<f64> = (0..n).map(|i| ydiff[i] - hs * k7[i] - bspl[i]).collect();
            let r5: Vec<f64> = (0..n)
                .map(|i| hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]))
                .collect();
            let seg = DenseSegment {
                t0: t,
                h: hs,
                rcont: [y.clone(), ydiff, bspl, r4, r5],
            };
            let t_new = t + hs;
            if let (Some(g), Some(gp)) = (event.as_mut(), g_prev) {
                let gn = g(t_new, &y1);
                if gp > 0.0 && gn <= 0.0 {
                    let (mut lo, mut hi) = (t, t_new);
                    for _ in 0..100 {
                        let mid = 0.5 * (lo + hi);
                        if g(mid, &seg.eval(mid)) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                        if (hi - lo).abs() <= 1e-15 * hi.abs().max(1e-300) {
                            break;
                        }
                    }
                    let ye = seg.eval(hi);
                    sol.segments.push(seg);
                    sol.ts.push(hi);
                    sol.ys.push(ye.clone());
                    sol.event = Some((hi, ye));
                    return Ok(sol);
                }
                g_prev = Some(gn);
            }
            sol.segments.push(seg);
            t = t_new;
            y = y1;
            k1 = k7;
            sol.ts.push(t);
            sol.ys.push(y.clone());
        }
        let fac = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 10.0);
        h = (h * fac).min(opts.h_max);
    }
    Ok(sol)
}

/// Integration without events.
pub fn integrate_plain<F>(f: F, t0: f64, y0: &[f64], t_end: f64, opts: &OdeOptions) -> Result<Solution>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    integrate(f, t0, y0, t_end, opts, None::<fn(f64, &[f64]) -> f64>)
}
