//! Model-spec files and the JSON form of a parametrization.
//!
//! A model spec lists the homogeneous terms of `f`, `g` and `h` as
//! `coeff * u^exponents * cos(2 pi k.theta)` (or `sin`), with `k = mode`.
//! Non-polynomial tails are referenced by name from a [`TailRegistry`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FreeChoice, Model, Parametrization, SystemKind, DEFAULT_TRUNCATION};
use crate::cones::HypothesisReport;
use crate::error::{ParabolicError, Result};
use crate::fourier::{is_canonical, Block, FourierMap, Frequency};
use crate::homogeneous::{ClosureTail, HomogeneousSum, HomogeneousTerm, PolyTerm, TailFn};
use crate::jet::{monomials_of_degree, Jet, Scalar};

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    #[default]
    Cos,
    Sin,
}

/// `coeff * u^exponents * cos/sin(2 pi mode.theta)` in output component `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    #[serde(default)]
    pub output: usize,
    pub exponents: Vec<u32>,
    pub coeff: f64,
    /// Empty means the zero mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mode: Vec<i32>,
    #[serde(default)]
    pub part: Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    F,
    G,
    H,
}

/// A named non-polynomial tail attached to one of `f`, `g`, `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub component: Component,
    pub name: String,
    #[serde(default)]
    pub output: usize,
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

/// Contents of a model-spec file (TOML or JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    pub system: SystemKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// `(N, M, P)`.
    pub orders: [usize; 3],
    pub omega: Vec<f64>,
    /// Time frequencies of a quasiperiodic flow.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nu: Vec<f64>,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default)]
    pub f: Vec<TermSpec>,
    #[serde(default)]
    pub g: Vec<TermSpec>,
    #[serde(default)]
    pub h: Vec<TermSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tails: Vec<TailSpec>,
}

type TailBuilder = dyn Fn(&TailSpec, usize) -> Result<Arc<dyn TailFn>> + Send + Sync;

/// Named tail constructors. The second builder argument is the target dimension.
pub struct TailRegistry {
    builders: BTreeMap<String, Box<TailBuilder>>,
}

fn monomial<S: Scalar>(u: &[S], exps: &[u32], coeff: f64) -> S {
    let mut v = u[0].constant_like(coeff);
    for (x, &e) in u.iter().zip(exps) {
        if e > 0 {
            v = v * x.powi(e as i32);
        }
    }
    v
}

fn tail_vector<S: Scalar>(value: S, output: usize, target: usize) -> Vec<S> {
    let mut out = vec![value.zero_like(); target];
    out[output] = value;
    out
}

impl TailRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// `monomial`: `coeff * u^e`; `monomial_exp`: `coeff * u^e * exp(u_0)`. Both have order `|e|`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("monomial", |spec: &TailSpec, target: usize| {
            let (e1, e2) = (spec.exponents.clone(), spec.exponents.clone());
            let (c, out) = (spec.coeff, spec.output);
            let order = spec.exponents.iter().sum::<u32>() as usize;
            Ok(Arc::new(ClosureTail::new(
                order,
                move |u: &[f64], _: &[f64]| tail_vector(monomial(u, &e1, c), out, target),
                move |u: &[Jet], _: &[Jet]| tail_vector(monomial(u, &e2, c), out, target),
            )) as Arc<dyn TailFn>)
        });
        r.register("monomial_exp", |spec: &TailSpec, target: usize| {
            let (e1, e2) = (spec.exponents.clone(), spec.exponents.clone());
            let (c, out) = (spec.coeff, spec.output);
            let order = spec.exponents.iter().sum::<u32>() as usize;
            Ok(Arc::new(ClosureTail::new(
                order,
                move |u: &[f64], _: &[f64]| tail_vector(monomial(u, &e1, c) * u[0].exp(), out, target),
                move |u: &[Jet], _: &[Jet]| tail_vector(monomial(u, &e2, c) * u[0].exp(), out, target),
            )) as Arc<dyn TailFn>)
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        builder: impl Fn(&TailSpec, usize) -> Result<Arc<dyn TailFn>> + Send + Sync + 'static,
    ) {
        self.builders.insert(name.to_string(), Box::new(builder));
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    fn build(&self, spec: &TailSpec, nvars: usize, target: usize) -> Result<Arc<dyn TailFn>> {
        if spec.exponents.len() != nvars || spec.output >= target {
            return Err(ParabolicError::InvalidInput(format!(
                "tail '{}' does not match the component shape",
                spec.name
            )));
        }
        let b = self
            .builders
            .get(&spec.name)
            .ok_or_else(|| ParabolicError::InvalidInput(format!("unknown tail '{}'", spec.name)))?;
        b(spec, target)
    }
}

/// Adds one term to `sum`, folding non-canonical modes onto canonical ones.
fn add_term_spec(sum: &mut HomogeneousSum, t: &TermSpec) -> Result<()> {
    let bad = |msg: &str| ParabolicError::InvalidInput(format!("term {t:?}: {msg}"));
    if t.exponents.len() != sum.nvars {
        return Err(bad("wrong number of exponents"));
    }
    if t.output >= sum.target_dim {
        return Err(bad("output index out of range"));
    }
    let mut k = if t.mode.is_empty() {
        vec![0; sum.angle_dim]
    } else {
        t.mode.clone()
    };
    if k.len() != sum.angle_dim {
        return Err(bad("mode length differs from the number of angles"));
    }
    if k.iter().any(|&v| v.unsigned_abs() as usize > sum.truncation) {
        return Err(bad("mode exceeds the truncation"));
    }
    let mut coeff = t.coeff;
    if !is_canonical(&k) {
        k.iter_mut().for_each(|v| *v = -*v);
        if t.part == Part::Sin {
            coeff = -coeff;
        }
    }
    let constant = k.iter().all(|&v| v == 0);
    if constant && t.part == Part::Sin {
        return Ok(());
    }
    let deg = t.exponents.iter().sum::<u32>() as usize;
    let p = PolyTerm::from_terms(sum.nvars, deg, sum.target_dim, &[(t.output, t.exponents.clone(), 1.0)])?;
    let zero = HomogeneousTerm::Poly(PolyTerm::zero(sum.nvars, deg, sum.target_dim));
    let scaled = |c: f64| HomogeneousTerm::lincomb(c, &HomogeneousTerm::Poly(p.clone()), 0.0, &zero);
    let mut map = FourierMap::new(sum.angle_dim, sum.truncation, zero.clone());
    match (constant, t.part) {
        (true, _) => map.set_mode(&k, scaled(coeff), zero.clone())?,
        (false, Part::Cos) => map.set_mode(&k, scaled(coeff / 2.0), zero.clone())?,
        (false, Part::Sin) => map.set_mode(&k, zero.clone(), scaled(-coeff / 2.0))?,
    }
    sum.add_term(map)
}

/// Builds a sum from term specs.
pub fn sum_from_terms(
    nvars: usize,
    angle_dim: usize,
    target_dim: usize,
    truncation: usize,
    terms: &[TermSpec],
) -> Result<HomogeneousSum> {
    let mut sum = HomogeneousSum::new(nvars, angle_dim, target_dim, truncation);
    for t in terms {
        add_term_spec(&mut sum, t)?;
    }
    Ok(sum)
}

/// Term specs of the polynomial part of `sum`, in canonical-mode order.
pub fn terms_of_sum(sum: &HomogeneousSum) -> Result<Vec<TermSpec>> {
    let mut out = Vec::new();
    for (_, map) in sum.terms() {
        for (k, (re, im)) in map.modes() {
            let (Some(re), Some(im)) = (re.as_poly(), im.as_poly()) else {
                return Err(ParabolicError::BackendUnsupported("only polynomial terms can be exported".into()));
            };
            let constant = k.iter().all(|&v| v == 0);
            let monos = monomials_of_degree(re.nvars(), re.degree());
            let nmono = monos.len();
            for output in 0..re.target_dim() {
                for (mi, exps) in monos.iter().enumerate() {
                    let a = re.coeffs()[output * nmono + mi];
                    let b = im.coeffs()[output * nmono + mi];
                    let mode = if constant { Vec::new() } else { k.clone() };
                    let (cos, sin) = if constant { (a, 0.0) } else { (2.0 * a, -2.0 * b) };
                    for (c, part) in [(cos, Part::Cos), (sin, Part::Sin)] {
                        if c != 0.0 {
                            out.push(TermSpec {
                                output,
                                exponents: exps.clone(),
                                coeff: c,
                                mode: mode.clone(),
                                part,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

impl ModelSpec {
    /// Parses TOML when the extension is `.toml`, JSON otherwise.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ParabolicError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ParabolicError::InvalidInput(format!("parse error: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ParabolicError::InvalidInput(format!("parse error: {e}")))
    }

    pub fn to_model(&self) -> Result<Model> {
        self.to_model_with(&TailRegistry::with_builtins())
    }

    pub fn to_model_with(&self, registry: &TailRegistry) -> Result<Model> {
        let freq = match self.system {
            SystemKind::Flow if !self.nu.is_empty() => Frequency::with_time(self.omega.clone(), self.nu.clone()),
            _ if !self.nu.is_empty() => {
                return Err(ParabolicError::InvalidInput("time frequencies are only allowed for flows".into()))
            }
            _ => Frequency::new(self.omega.clone()),
        };
        let nvars = self.n + self.m;
        let angles = self.d + self.nu.len();
        let k = self.truncation;
        let mut f = sum_from_terms(nvars, angles, self.n, k, &self.f)?;
        let mut g = sum_from_terms(nvars, angles, self.m, k, &self.g)?;
        let mut h = sum_from_terms(nvars, angles, self.d, k, &self.h)?;
        let mut seen = Vec::new();
        for t in &self.tails {
            if seen.contains(&t.component) {
                return Err(ParabolicError::InvalidInput(format!(
                    "more than one tail for component {:?}",
                    t.component
                )));
            }
            seen.push(t.component);
            let target = match t.component {
                Component::F => &mut f,
                Component::G => &mut g,
                Component::H => &mut h,
            };
            let tail = registry.build(t, nvars, target.target_dim)?;
            target.set_tail(tail)?;
        }
        let [nn, mm, pp] = self.orders;
        Model::new(self.system, self.n, self.m, self.d, (nn, mm, pp), freq, f, g, h)
    }
}

/// JSON document of a [`Parametrization`]; the sums use the [`TermSpec`] layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametrizationDoc {
    pub system: SystemKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub orders: [usize; 3],
    pub frequency: Frequency,
    pub truncation: usize,
    pub order: usize,
    pub kx: Vec<TermSpec>,
    pub ky: Vec<TermSpec>,
    pub kt: Vec<TermSpec>,
    pub ru: Vec<TermSpec>,
    pub rt: Vec<TermSpec>,
    pub free_choices: Vec<FreeChoice>,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypotheses: Option<HypothesisReport>,
}

impl ParametrizationDoc {
    pub fn from_parametrization(par: &Parametrization) -> Result<Self> {
        let (nn, mm, pp) = par.orders;
        Ok(Self {
            system: par.kind,
            n: par.n,
            m: par.m,
            d: par.d,
            orders: [nn, mm, pp],
            frequency: par.freq.clone(),
            truncation: par.kx.truncation,
            order: par.order,
            kx: terms_of_sum(&par.kx)?,
            ky: terms_of_sum(&par.ky)?,
            kt: terms_of_sum(&par.kt)?,
            ru: terms_of_sum(&par.ru)?,
            rt: terms_of_sum(&par.rt)?,
            free_choices: par.free_choices.clone(),
            fallback: par.fallback,
            hypotheses: par.hypotheses.clone(),
        })
    }

    pub fn to_parametrization(&self) -> Result<Parametrization> {
        let angles = self.d + self.frequency.time_freq.as_ref().map_or(0, Vec::len);
        let k = self.truncation;
        let build = |target: usize, terms: &[TermSpec]| sum_from_terms(self.n, angles, target, k, terms);
        let [nn, mm, pp] = self.orders;
        Ok(Parametrization {
            kind: self.system,
            n: self.n,
            m: self.m,
            d: self.d,
            orders: (nn, mm, pp),
            freq: self.frequency.clone(),
            kx: build(self.n, &self.kx)?,
            ky: build(self.m, &self.ky)?,
            kt: build(self.d, &self.kt)?,
            ru: build(self.n, &self.ru)?,
            rt: build(self.d, &self.rt)?,
            order: self.order,
            free_choices: self.free_choices.clone(),
            fallback: self.fallback,
            hypotheses: self.hypotheses.clone(),
        })
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("document is serializable");
        s.push('\n');
        s
    }
}

/// Largest coefficient difference between two sums, compared term by term.
pub fn max_sum_difference(a: &HomogeneousSum, b: &HomogeneousSum) -> f64 {
    let mut worst = 0.0f64;
    let degrees: Vec<usize> = a.degrees().into_iter().chain(b.degrees()).collect();
    for deg in degrees {
        let ta = a.term(deg).cloned().unwrap_or_else(|| a.zero_term(deg));
        let tb = b.term(deg).cloned().unwrap_or_else(|| b.zero_term(deg));
        let diff = FourierMap::lincomb(1.0, &ta, -1.0, &tb);
        for (_, (re, im)) in diff.modes() {
            worst = worst.max(re.max_abs()).max(im.max_abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::super::{approximate_map, test_models::*};
    use super::*;

    const SYNTHETIC_TOML: &str = r#"
name = "synthetic"
system = "map"
n = 1
m = 1
d = 1
orders = [3, 3, 3]
omega = [0.6180339887498949]
truncation = 4

f = [
  { exponents = [3, 0], coeff = -1.0 },
  { exponents = [3, 0], coeff = 0.3, mode = [1] },
  { exponents = [2, 1], coeff = 0.5 },
  { exponents = [4, 0], coeff = 0.2, mode = [1], part = "sin" },
]
g = [
  { exponents = [2, 1], coeff = 1.0 },
  { exponents = [2, 1], coeff = 0.25, mode = [1] },
  { exponents = [1, 2], coeff = 0.4 },
  { exponents = [4, 0], coeff = 0.1 },
  { exponents = [4, 0], coeff = 0.05, mode = [1], part = "sin" },
]
h = [
  { exponents = [3, 0], coeff = 0.01, mode = [2] },
  { exponents = [2, 1], coeff = 0.02 },
]
"#;

    #[test]
    fn toml_spec_matches_hand_built_model() {
        let spec = ModelSpec::from_toml(SYNTHETIC_TOML).unwrap();
        let model = spec.to_model().unwrap();
        let reference = synthetic_map(0.01, false);
        for (a, b) in [(&model.f, &reference.f), (&model.g, &reference.g), (&model.h, &reference.h)] {
            assert!(max_sum_difference(a, b) < 1e-16);
        }
        assert_eq!(model.freq.omega, reference.freq.omega);
    }

    #[test]
    fn negative_modes_fold_onto_canonical_ones() {
        let t = |mode: i32, part: Part| TermSpec {
            output: 0,
            exponents: vec![2],
            coeff: 0.7,
            mode: vec![mode],
            part,
        };
        for part in [Part::Cos, Part::Sin] {
            let a = sum_from_terms(1, 1, 1, 3, &[t(-2, part)]).unwrap();
            let x = [0.4];
            for th in [0.1, 0.37] {
                let phase = 2.0 * std::f64::consts::PI * -2.0 * th;
                let trig = if part == Part::Cos { phase.cos() } else { phase.sin() };
                let want = 0.7 * 0.16 * trig;
                assert!((a.eval(&x, &[th])[0] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn missing_omega_is_a_parse_error() {
        let text = SYNTHETIC_TOML.replace("omega = [0.6180339887498949]\n", "");
        assert!(matches!(ModelSpec::from_toml(&text), Err(ParabolicError::InvalidInput(_))));
    }

    #[test]
    fn named_tail_is_attached() {
        let mut spec = ModelSpec::from_toml(SYNTHETIC_TOML).unwrap();
        spec.tails.push(TailSpec {
            component: Component::F,
            name: "monomial".into(),
            output: 0,
            exponents: vec![9, 0],
            coeff: 0.1,
        });
        let model = spec.to_model().unwrap();
        let reference = synthetic_map(0.01, true);
        let z = [0.3, 0.01];
        let a = model.f.eval(&z, &[0.2]);
        let b = reference.f.eval(&z, &[0.2]);
        assert!((a[0] - b[0]).abs() < 1e-16);
        spec.tails[0].name = "nope".into();
        assert!(spec.to_model().is_err());
    }

    #[test]
    fn parametrization_document_round_trips() {
        let model = synthetic_map(0.01, false);
        let par = approximate_map(&model, 2, &positive_cone()).unwrap();
        let doc = ParametrizationDoc::from_parametrization(&par).unwrap();
        let text = doc.to_json();
        let back: ParametrizationDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        let rebuilt = back.to_parametrization().unwrap();
        for (a, b) in [(&rebuilt.kx, &par.kx), (&rebuilt.ky, &par.ky), (&rebuilt.ru, &par.ru), (&rebuilt.rt, &par.rt)] {
            assert!(max_sum_difference(a, b) < 1e-15);
        }
        assert_eq!(ParametrizationDoc::from_parametrization(&rebuilt).unwrap().to_json(), text);
    }
}
