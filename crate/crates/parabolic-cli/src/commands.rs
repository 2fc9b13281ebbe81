//! Subcommand bodies. Each returns the process exit status on completion.

use std::sync::Arc;

use anyhow::Context;
use parabolic::cones::{check_hypotheses, estimate_constants, ConeSpec, HypothesisReport, Verdict};
use parabolic::nbody::blowup::BlownUpField;
use parabolic::nbody::constants::central_config_constants;
use parabolic::nbody::escape::{integrate_escape, manifold_state, EscapeOptions};
use parabolic::nbody::{Configuration, NBodySystem};
use parabolic::parametrization::refine::{refine_fixed_point, RefineOptions};
use parabolic::parametrization::spec::ParametrizationDoc;
use parabolic::parametrization::validate::{iterate_bound_check_cone, shadow_validate, shadow_validate_flow};
use parabolic::parametrization::{
    approximate_flow, approximate_map, log_radii, residual_report, Model, Parametrization, SystemKind,
};
use serde_json::json;

use crate::config::{axis_cone, InputError, RunConfig, SystemFile};
use crate::{ApproximateArgs, ModelArgs, NbodyArgs, RefineArgs, ValidateArgs};

/// Points of the residual radius grid.
const RESIDUAL_RADII: usize = 9;
/// Smallest residual radius as a fraction of the cone radius.
const RESIDUAL_LOW: f64 = 1e-2;
/// Angle nodes per axis when sampling residuals.
const RESIDUAL_ANGLES: usize = 8;
/// Radial samples of the ray used in the n-body residual check.
const NBODY_RADII: (f64, f64) = (1e-3, 1e-1);
/// Horizon of flow shadowing runs.
const FLOW_HORIZON: f64 = 10.0;
/// Iterates checked against the power-law bounds.
const BOUND_ITERATES: usize = 200;

fn to_json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn model_config(a: &ModelArgs, order: usize, extra: Vec<(&'static str, f64)>) -> anyhow::Result<RunConfig> {
    let mut tolerances = vec![("kappa", a.kappa), ("rho", a.rho)];
    tolerances.extend(extra);
    let mut cfg = RunConfig::resolve(&a.model, a.out.as_deref(), tolerances, order, a.strict)?;
    cfg.truncation = a.truncation;
    Ok(cfg)
}

fn model_cone(a: &ModelArgs, model: &Model) -> ConeSpec {
    axis_cone(model.n, a.kappa, a.rho, a.density)
}

fn hypotheses(model: &Model, cone: &ConeSpec) -> anyhow::Result<(parabolic::cones::ConeConstants, HypothesisReport)> {
    let c = estimate_constants(model, cone)?;
    let report = check_hypotheses(model, &c, model.order_q(), Some((&model.freq, model.kind.divisor_kind())));
    Ok((c, report))
}

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "FAIL",
        Verdict::Marginal => "marginal",
    }
}

pub fn constants(a: &ModelArgs) -> anyhow::Result<u8> {
    let cfg = model_config(a, 0, Vec::new())?;
    let (spec, model) = cfg.load_model()?;
    let cone = model_cone(a, &model);
    let (c, report) = hypotheses(&model, &cone)?;
    let holds = report.existence_holds();
    let doc = json!({
        "model": spec.name,
        "system": spec.system,
        "orders": spec.orders,
        "q": model.order_q(),
        "cone": { "kappa": a.kappa, "rho": a.rho, "density": cone.sample_density },
        "constants": c,
        "hypotheses": report,
        "existence_holds": holds,
    });
    let text = to_json(&doc)?;
    cfg.emit("constants.json", &text)?;
    print!("{text}");
    println!();
    println!("{:<8} {:>14} {:>12}", "constant", "value", "error");
    for (name, e) in [
        ("a_f", c.a_f),
        ("b_f", c.b_f),
        ("A_f", c.big_a_f),
        ("D_f", c.d_f),
        ("B_g", c.b_g),
        ("a_V", c.a_v),
    ] {
        println!("{name:<8} {:>14.6e} {:>12.3e}", e.value, e.error);
    }
    for (name, v) in &report.verdicts {
        println!("{name:<28} {}", verdict_label(*v));
    }
    Ok(if cfg.strict && !holds { 1 } else { 0 })
}

fn approximate_model(model: &Model, order: usize, cone: &ConeSpec) -> anyhow::Result<Parametrization> {
    Ok(match model.kind {
        SystemKind::Map => approximate_map(model, order, cone)?,
        SystemKind::Flow => approximate_flow(model, order, cone)?,
    })
}

pub fn approximate(a: &ApproximateArgs) -> anyhow::Result<u8> {
    if !(a.slope_margin.is_finite() && a.slope_margin >= 0.0) {
        return Err(InputError(format!("slope-margin must be nonnegative, got {}", a.slope_margin)).into());
    }
    let cfg = model_config(&a.model, a.order, Vec::new())?;
    let (spec, model) = cfg.load_model()?;
    let cone = model_cone(&a.model, &model);
    let par = approximate_model(&model, cfg.order, &cone)?;
    let rays = cone.sample_directions(cone.sample_density);
    let radii = log_radii(RESIDUAL_LOW * a.model.rho, a.model.rho, RESIDUAL_RADII);
    let residual = residual_report(&model, &par, &rays, &radii, RESIDUAL_ANGLES)?;
    let expected = (par.order + model.orders.0) as f64;
    let slope = residual.min_slope();
    let slope_ok = slope.is_none_or(|s| s >= expected - a.slope_margin);
    cfg.emit(
        "parametrization.json",
        &ParametrizationDoc::from_parametrization(&par)?.to_json(),
    )?;
    cfg.emit("residual.csv", &residual.to_csv())?;
    let summary = json!({
        "model": spec.name,
        "order": par.order,
        "fallback": par.fallback,
        "expected_slope": expected,
        "min_slope": slope,
        "max_residual": residual.max_residual(),
        "slope_ok": slope_ok,
        "free_choices": par.free_choices,
    });
    print!("{}", to_json(&summary)?);
    Ok(if slope_ok { 0 } else { 1 })
}

pub fn refine(a: &RefineArgs) -> anyhow::Result<u8> {
    let cfg = model_config(&a.model, a.order, vec![("grid-rho", a.grid_rho)])?;
    let (_, model) = cfg.load_model()?;
    if model.kind != SystemKind::Map {
        return Err(InputError("refine supports maps only".into()).into());
    }
    let cone = model_cone(&a.model, &model);
    let par = approximate_model(&model, cfg.order, &cone)?;
    let opts = RefineOptions {
        rho: a.grid_rho,
        radii: a.radii,
        angles: a.angles,
        iterations: a.iterations,
        ..RefineOptions::default()
    };
    let refined = refine_fixed_point(&model, &par, &opts)?;
    let text = to_json(&refined.report)?;
    cfg.emit("refine.json", &text)?;
    print!("{text}");
    Ok(if refined.report.improved { 0 } else { 1 })
}

pub fn validate(a: &ValidateArgs) -> anyhow::Result<u8> {
    let cfg = model_config(&a.model, a.order, vec![("tol", a.tol)])?;
    let (_, model) = cfg.load_model()?;
    let cone = model_cone(&a.model, &model);
    let par = approximate_model(&model, cfg.order, &cone)?;
    let mut u0 = vec![0.0; model.n];
    u0[0] = 0.5 * a.model.rho;
    let theta0 = vec![0.0; model.angle_dim()];
    let (shadow, bounds) = match model.kind {
        SystemKind::Map => {
            let shadow = shadow_validate(&model, &par, &u0, &theta0, a.steps, None, &cone)?;
            let c = estimate_constants(&model, &cone)?;
            let p = (model.orders.0 - 1) as f64;
            let bounds = iterate_bound_check_cone(&par, &cone, 0.5 * p * c.a_f.value, 2.0 * p * c.b_f.value, BOUND_ITERATES)?;
            (shadow, Some(bounds))
        }
        SystemKind::Flow => (
            shadow_validate_flow(&model, &par, &u0, &theta0, FLOW_HORIZON, a.steps, &cone)?,
            None,
        ),
    };
    let ok = shadow.max_error <= a.tol && bounds.as_ref().is_none_or(|b| b.violations == 0);
    let doc = json!({
        "max_error": shadow.max_error,
        "tol": a.tol,
        "iterate_bounds": bounds,
        "ok": ok,
    });
    let text = to_json(&doc)?;
    cfg.emit("validate.json", &text)?;
    print!("{text}");
    Ok(if ok { 0 } else { 1 })
}

pub fn nbody(a: &NbodyArgs) -> anyhow::Result<u8> {
    let cfg = RunConfig::resolve(&a.system, a.out.as_deref(), vec![("tol", a.tol)], a.order, false)?;
    let file = SystemFile::from_path(&cfg.input)?;
    let configuration = a
        .branch
        .map(Configuration::from)
        .or(file.configuration)
        .ok_or_else(|| InputError("no configuration given (use --branch or `configuration`)".into()))?;
    let esc = &file.escape;
    for (name, v) in [("s0", esc.s0), ("s_floor", esc.s_floor), ("kappa", esc.kappa), ("delta", esc.delta)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(InputError(format!("escape.{name} must be positive, got {v}")).into());
        }
    }
    if esc.slope.abs() > esc.kappa {
        return Err(InputError(format!("escape.slope {} lies outside the cone of half-width {}", esc.slope, esc.kappa)).into());
    }
    let system = NBodySystem::new(file.masses.clone(), file.angular_momentum, configuration)?;
    let central = central_config_constants(&system)?;
    if system.masses.len() > 3 {
        let text = to_json(&json!({ "central": central, "gamma2_prediction": central.gamma2_prediction() }))?;
        cfg.emit("constants.json", &text)?;
        print!("{text}");
        return Ok(0);
    }

    let field = Arc::new(BlownUpField::new(&system)?);
    let (closed_form, ell) = match configuration {
        Configuration::Collinear => (Some(field.cone_constants_closed_form(esc.kappa, 1)?), None),
        Configuration::Equilateral => match field.minimal_ell() {
            Ok(ell) => (Some(field.cone_constants_closed_form(esc.kappa, ell)?), Some(ell)),
            Err(_) => (None, None),
        },
    };
    let constants = json!({
        "central": central,
        "gamma2_prediction": central.gamma2_prediction(),
        "eigenvalues": field.diagonalization.eigenvalues,
        "closed_form": closed_form,
        "ell": ell,
    });
    cfg.emit("constants.json", &to_json(&constants)?)?;

    let z0 = match configuration {
        Configuration::Collinear => {
            let model = field.collinear_model(esc.poly_degree)?;
            let cone = BlownUpField::collinear_cone(esc.kappa, esc.delta);
            let par = approximate_flow(&model, cfg.order, &cone)?;
            let ray = vec![1.0, esc.slope];
            let radii = log_radii(NBODY_RADII.0, NBODY_RADII.1, RESIDUAL_RADII);
            let residual = residual_report(&model, &par, &[ray], &radii, 1)?;
            cfg.emit("residual.csv", &residual.to_csv())?;
            cfg.emit("parametrization.json", &ParametrizationDoc::from_parametrization(&par)?.to_json())?;
            manifold_state(&field, &par, &[esc.s0, esc.slope * esc.s0])
        }
        Configuration::Equilateral => {
            let mut z = vec![0.0; 6];
            z[0] = esc.s0;
            z
        }
    };
    let opts = EscapeOptions {
        s_floor: esc.s_floor,
        rtol: a.tol,
        atol: a.tol * 1e-3,
        samples: esc.samples,
        cartesian_check: esc.cartesian_check,
        ..EscapeOptions::default()
    };
    let (report, trajectory) = integrate_escape(&field, &z0, &opts).context("escape integration failed")?;
    cfg.emit("trajectory.csv", &trajectory.to_csv())?;
    let text = to_json(&json!({
        "gamma2": central.gamma2,
        "escape": report,
    }))?;
    cfg.emit("escape.json", &text)?;
    print!("{text}");
    Ok(0)
}
