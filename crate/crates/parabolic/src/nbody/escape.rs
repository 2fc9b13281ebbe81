//! Integration of parabolic escapes in the regularized coordinates.
//!
//! The field of [`BlownUpField`] carries an overall factor `s^3` away from the
//! `s`-equation's extra power, so it is integrated in the rescaled time
//! `d tau = s^3 dt` with the physical time appended as an extra state.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::blowup::BlownUpField;
use super::{unflatten, Configuration};
use crate::error::{ParabolicError, Result};
use crate::fourier::linear_fit;
use crate::ode::{integrate, integrate_plain, OdeOptions};
use crate::parametrization::Parametrization;

/// Default initial value of `s = x_1` for escapes started on the manifold.
pub const DEFAULT_START: f64 = 0.02;

/// Settings of [`integrate_escape`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeOptions {
    /// Integration stops when `s` reaches this value.
    pub s_floor: f64,
    /// Largest tolerated `max |(zeta, xi, eta, theta, g)|` before the orbit is declared to have left the cone.
    pub max_deviation: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Rows kept in the trajectory.
    pub samples: usize,
    /// Also integrate the Cartesian equations and compare positions.
    pub cartesian_check: bool,
}

impl Default for EscapeOptions {
    fn default() -> Self {
        Self {
            s_floor: 2e-3,
            max_deviation: 1.0,
            rtol: 1e-12,
            atol: 1e-15,
            samples: 200,
            cartesian_check: true,
        }
    }
}

/// Sampled escape orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Physical times.
    pub t: Vec<f64>,
    /// States `(s, zeta, xi, eta, theta, g)`.
    pub z: Vec<[f64; 6]>,
    /// Cartesian positions, flattened `(q_0, ..., q_{n+1})`.
    pub positions: Vec<Vec<f64>>,
    /// `r_2 / r_1`.
    pub r_ratio: Vec<f64>,
    /// Absolute relative angle `theta_1`.
    pub angle: Vec<f64>,
    /// Total energy.
    pub energy: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// CSV with one row per sample.
    pub fn to_csv(&self) -> String {
        let bodies = self.positions.first().map_or(0, |p| p.len() / 2);
        let mut out = String::from("t,s,zeta,xi,eta,theta,g");
        for k in 0..bodies {
            let _ = write!(out, ",q{k}x,q{k}y");
        }
        out.push_str(",r_ratio,angle,energy\n");
        for i in 0..self.len() {
            let _ = write!(out, "{:.17e}", self.t[i]);
            for v in self.z[i].iter().chain(&self.positions[i]) {
                let _ = write!(out, ",{v:.17e}");
            }
            let _ = writeln!(
                out,
                ",{:.17e},{:.17e},{:.17e}",
                self.r_ratio[i], self.angle[i], self.energy[i]
            );
        }
        out
    }
}

/// Summary of an escape run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub configuration: Configuration,
    pub s_initial: f64,
    pub s_final: f64,
    pub t_final: f64,
    pub steps: usize,
    /// `s (3 nu t)^{1/3}` at the end; tends to one.
    pub decay_ratio: f64,
    /// Slope of `log s` against `log t` over the second half of the orbit; tends to `-1/3`.
    pub decay_exponent: f64,
    /// `x_2 / x_1` at the end; tends to `A`.
    pub x_ratio: f64,
    pub a: f64,
    /// `r_2 / r_1` at the end.
    pub r_ratio: f64,
    /// Limit of `r_2 / r_1`, `1 / alpha_0`.
    pub r_ratio_limit: f64,
    /// Final absolute relative angle.
    pub angle: f64,
    pub theta0: f64,
    /// Largest `|(zeta, xi, eta, theta, g)|` along the orbit.
    pub max_deviation: f64,
    /// `max |H(t) - H(0)| / (T(0) + |U(0)|)`.
    pub energy_drift: f64,
    /// Largest relative position mismatch against the Cartesian integration.
    pub cartesian_error: Option<f64>,
    /// Largest `|r_2 / r_1|` mismatch against the Cartesian integration.
    pub cartesian_ratio_error: Option<f64>,
}

fn deviation(z: &[f64]) -> f64 {
    z[1..6].iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Integrates the regularized field from `z0 = (s, zeta, xi, eta, theta, g)` at `t = 0`.
pub fn integrate_escape(field: &BlownUpField, z0: &[f64], opts: &EscapeOptions) -> Result<(EscapeReport, Trajectory)> {
    if z0.len() != 6 || !(z0[0] > opts.s_floor) || z0.iter().any(|v| !v.is_finite()) {
        return Err(ParabolicError::InvalidInput(format!(
            "initial state must have six finite entries with s above {}",
            opts.s_floor
        )));
    }
    if deviation(z0) > opts.max_deviation {
        return Err(ParabolicError::ConeExit { t: 0.0 });
    }
    let c = &field.constants;
    // State: (s, zeta, xi, eta, theta, g, t, phi) with phi the absolute angle of the last Jacobi vector.
    let mut y0 = z0.to_vec();
    y0.extend([0.0, 0.0]);
    let rhs = |_: f64, y: &[f64]| -> Vec<f64> {
        let s = y[0];
        if !(s > 0.0) {
            return vec![f64::NAN; 8];
        }
        let s3 = s.powi(3);
        let mut d = field.field_tau(&y[..6]);
        d.push(1.0 / s3);
        d.push(field.reference_rate(&y[..6]) / s3);
        d
    };
    let floor = opts.s_floor;
    let limit = opts.max_deviation;
    let event = |_: f64, y: &[f64]| (y[0] - floor).min(limit - deviation(y));
    let tau_end = 4.0 * (z0[0] / floor).ln() / c.nu.min(1.0) + 10.0;
    let ode = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        ..OdeOptions::default()
    };
    let sol = integrate(rhs, 0.0, &y0, tau_end, &ode, Some(event))?;
    let (_, last) = sol.last();
    if deviation(last) >= limit * (1.0 - 1e-9) {
        return Err(ParabolicError::ConeExit { t: last[6] });
    }
    if last[0] > floor * (1.0 + 1e-6) {
        return Err(ParabolicError::DomainViolation(format!(
            "escape did not reach s = {floor:.3e} (stopped at {:.3e})",
            last[0]
        )));
    }

    let mut states: Vec<Vec<f64>> = sol.ys.clone();
    if let Some((_, y)) = &sol.event {
        states.push(y.clone());
    }
    let stride = (states.len() / opts.samples.max(2)).max(1);
    let mut picked: Vec<&Vec<f64>> = states.iter().step_by(stride).collect();
    if !std::ptr::eq(*picked.last().expect("nonempty"), states.last().expect("nonempty")) {
        picked.push(states.last().expect("nonempty"));
    }

    let mut traj = Trajectory {
        t: Vec::new(),
        z: Vec::new(),
        positions: Vec::new(),
        r_ratio: Vec::new(),
        angle: Vec::new(),
        energy: Vec::new(),
    };
    for y in &picked {
        let z: [f64; 6] = std::array::from_fn(|i| y[i]);
        let cart = field.to_cartesian_at(&z, y[7])?;
        let (q, p) = unflatten(&cart);
        let red = field.to_reduced(&z);
        traj.t.push(y[6]);
        traj.z.push(z);
        traj.positions.push(q.iter().flat_map(|v| v.iter().copied()).collect());
        traj.r_ratio.push(red.r[1] / red.r[0]);
        traj.angle.push(red.theta[0]);
        traj.energy.push(field.system.hamiltonian(&q, &p)?);
    }

    let scale = {
        let (q, p) = unflatten(&field.to_cartesian(z0)?);
        let kinetic: f64 = p
            .iter()
            .zip(&field.system.masses)
            .map(|(v, m)| (v[0] * v[0] + v[1] * v[1]) / (2.0 * m))
            .sum();
        kinetic + (kinetic - field.system.hamiltonian(&q, &p)?).abs()
    };
    let energy_drift = traj.energy.iter().map(|e| (e - traj.energy[0]).abs()).fold(0.0, f64::max) / scale;

    let fit: Vec<(f64, f64)> = traj
        .t
        .iter()
        .zip(&traj.z)
        .skip(traj.len() / 2)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, z)| (t.ln(), z[0].ln()))
        .collect();
    let decay_exponent = if fit.len() >= 2 { linear_fit(&fit).0 } else { f64::NAN };

    let (cartesian_error, cartesian_ratio_error) = if opts.cartesian_check {
        let (pos, ratio) = cartesian_mismatch(field, z0, &traj)?;
        (Some(pos), Some(ratio))
    } else {
        (None, None)
    };

    let zf = traj.z.last().expect("nonempty");
    let t_final = *traj.t.last().expect("nonempty");
    let report = EscapeReport {
        configuration: c.configuration,
        s_initial: z0[0],
        s_final: zf[0],
        t_final,
        steps: sol.ts.len(),
        decay_ratio: zf[0] * (3.0 * c.nu * t_final).cbrt(),
        decay_exponent,
        x_ratio: c.a + zf[0] * zf[2],
        a: c.a,
        r_ratio: *traj.r_ratio.last().expect("nonempty"),
        r_ratio_limit: c.distance_ratio_limit(),
        angle: *traj.angle.last().expect("nonempty"),
        theta0: c.theta0,
        max_deviation: states.iter().map(|y| deviation(y)).fold(0.0, f64::max),
        energy_drift,
        cartesian_error,
        cartesian_ratio_error,
    };
    Ok((report, traj))
}

/// Largest relative position error and largest `r_2 / r_1` error of the
/// regularized orbit against a direct integration of the Cartesian equations
/// from the same initial point.
fn cartesian_mismatch(field: &BlownUpField, z0: &[f64], traj: &Trajectory) -> Result<(f64, f64)> {
    let start = field.to_cartesian(z0)?;
    let t_end = *traj.t.last().expect("nonempty");
    let ode = OdeOptions {
        rtol: 1e-12,
        atol: 1e-14,
        max_steps: 20_000_000,
        ..OdeOptions::default()
    };
    let sys = &field.system;
    let sol = integrate_plain(|_, y| sys.cartesian_field(y), 0.0, &start, t_end, &ode)?;
    let mut worst = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for ((t, pos), ratio) in traj.t.iter().zip(&traj.positions).zip(&traj.r_ratio).skip(1) {
        let y = sol.at(*t);
        let reference = &y[..pos.len()];
        let num: f64 = pos.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
        let (q, p) = unflatten(&y);
        let (qt, _) = sys.jacobi(&q, &p);
        let norm = |v: &[f64; 2]| v[0].hypot(v[1]);
        worst_ratio = worst_ratio.max((norm(&qt[2]) / norm(&qt[1]) - ratio).abs());
    }
    Ok((worst, worst_ratio))
}

/// State in original coordinates of the manifold point with parameter `u`
/// (diagonal `x` coordinates `(s, eta^)`).
pub fn manifold_state(field: &BlownUpField, par: &Parametrization, u: &[f64]) -> Vec<f64> {
    let (z, _) = par.embed(u, &[]);
    field.to_original(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbody::NBodySystem;

    fn field(m: f64, config: Configuration) -> BlownUpField {
        BlownUpField::new(&NBodySystem::new(vec![1.0, m, m], 0.0, config).unwrap()).unwrap()
    }

    #[test]
    fn homothetic_escape_follows_the_closed_form() {
        let f = field(1e-3, Configuration::Collinear);
        let s0 = 0.05;
        let opts = EscapeOptions {
            s_floor: 5e-3,
            ..EscapeOptions::default()
        };
        let (report, traj) = integrate_escape(&f, &[s0, 0.0, 0.0, 0.0, 0.0, 0.0], &opts).unwrap();
        let nu = f.constants.nu;
        for (t, z) in traj.t.iter().zip(&traj.z) {
            let exact = s0 * (1.0 + 3.0 * nu * s0.powi(3) * t).powf(-1.0 / 3.0);
            assert!(((z[0] - exact) / exact).abs() < 1e-6, "t = {t}: {} vs {exact}", z[0]);
            assert!(deviation(z) < 1e-12);
        }
        assert!((report.r_ratio - report.r_ratio_limit).abs() < 1e-9 * report.r_ratio_limit);
        assert!(report.cartesian_error.unwrap() < 1e-6);
        assert!(report.cartesian_ratio_error.unwrap() < 1e-8);
        assert!(report.energy_drift < 1e-8);
    }

    #[test]
    fn perturbed_escape_exits_the_cone() {
        let f = field(1e-3, Configuration::Collinear);
        let opts = EscapeOptions {
            s_floor: 1e-3,
            max_deviation: 0.2,
            cartesian_check: false,
            ..EscapeOptions::default()
        };
        let err = integrate_escape(&f, &[0.05, 0.0, 0.0, 0.1, 0.0, 0.0], &opts).unwrap_err();
        assert!(matches!(err, ParabolicError::ConeExit { .. }));
    }

    #[test]
    fn trajectory_csv_has_one_row_per_sample() {
        let f = field(1e-3, Configuration::Equilateral);
        let opts = EscapeOptions {
            s_floor: 0.02,
            samples: 10,
            cartesian_check: false,
            ..EscapeOptions::default()
        };
        let (_, traj) = integrate_escape(&f, &[0.04, 0.0, 0.0, 0.0, 0.0, 0.0], &opts).unwrap();
        let csv = traj.to_csv();
        assert_eq!(csv.lines().count(), traj.len() + 1);
        assert!(csv.starts_with("t,s,zeta,xi,eta,theta,g,q0x,q0y,q1x,q1y,q2x,q2y,r_ratio"));
    }

    #[test]
    fn rejects_states_below_the_floor() {
        let f = field(1e-3, Configuration::Collinear);
        let opts = EscapeOptions::default();
        assert!(integrate_escape(&f, &[1e-4, 0.0, 0.0, 0.0, 0.0, 0.0], &opts).is_err());
    }
}
