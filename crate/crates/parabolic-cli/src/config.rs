//! Resolved run settings and input files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use parabolic::cones::{ConeSpec, NormKind};
use parabolic::nbody::Configuration;
use parabolic::parametrization::spec::ModelSpec;
use parabolic::parametrization::Model;
use serde::{Deserialize, Serialize};

/// Malformed command-line input or input file; maps to exit status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Settings shared by all subcommands, with paths resolved and tolerances checked.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: PathBuf,
    pub out: Option<PathBuf>,
    pub truncation: Option<usize>,
    pub order: usize,
    pub strict: bool,
}

impl RunConfig {
    pub fn resolve(
        input: &Path,
        out: Option<&Path>,
        tolerances: Vec<(&'static str, f64)>,
        order: usize,
        strict: bool,
    ) -> anyhow::Result<Self> {
        let input = fs::canonicalize(input)
            .map_err(|e| InputError(format!("cannot open {}: {e}", input.display())))?;
        for (name, value) in &tolerances {
            if !(value.is_finite() && *value > 0.0) {
                return Err(InputError(format!("{name} must be positive, got {value}")).into());
            }
        }
        let out = match out {
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
                Some(fs::canonicalize(dir)?)
            }
            None => None,
        };
        Ok(Self {
            input,
            out,
            truncation: None,
            order,
            strict,
        })
    }

    /// Writes `contents` to `name` inside the output directory, if one was given.
    pub fn emit(&self, name: &str, contents: &str) -> anyhow::Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(name);
            fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        }
        Ok(())
    }

    pub fn load_model(&self) -> anyhow::Result<(ModelSpec, Model)> {
        let mut spec = ModelSpec::from_path(&self.input).map_err(|e| InputError(e.to_string()))?;
        if let Some(k) = self.truncation {
            spec.truncation = k;
        }
        let model = spec.to_model().map_err(|e| InputError(e.to_string()))?;
        Ok((spec, model))
    }
}

/// Cone `{x_1 > 0, |x_i| <= kappa x_1}` of radius `rho` (the half-line when `n = 1`).
pub fn axis_cone(n: usize, kappa: f64, rho: f64, density: Option<usize>) -> ConeSpec {
    let cone = if n == 1 {
        ConeSpec::half_line(rho)
    } else {
        let mut normals = Vec::new();
        for i in 1..n {
            for sign in [-1.0, 1.0] {
                let mut v = vec![0.0; n];
                v[0] = kappa;
                v[i] = sign;
                normals.push(v);
            }
        }
        let mut center = vec![0.0; n];
        center[0] = 1.0;
        ConeSpec::polyhedral(normals, center, kappa, rho).with_norm(NormKind::Euclidean)
    };
    match density {
        Some(d) => cone.with_density(d),
        None => cone,
    }
}

fn default_s0() -> f64 {
    parabolic::nbody::escape::DEFAULT_START
}

fn default_slope() -> f64 {
    0.075
}

fn default_s_floor() -> f64 {
    1e-3
}

fn default_kappa() -> f64 {
    0.1
}

fn default_delta() -> f64 {
    0.2
}

fn default_poly_degree() -> usize {
    parabolic::nbody::blowup::DEFAULT_POLY_DEGREE
}

fn default_samples() -> usize {
    200
}

/// Escape settings of a system file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeSettings {
    /// Initial `s = x_1`.
    #[serde(default = "default_s0")]
    pub s0: f64,
    /// Initial `eta^ / s` on the manifold (collinear chart); must not exceed `kappa`.
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default = "default_s_floor")]
    pub s_floor: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_poly_degree")]
    pub poly_degree: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_true")]
    pub cartesian_check: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EscapeSettings {
    fn default() -> Self {
        Self {
            s0: default_s0(),
            slope: default_slope(),
            s_floor: default_s_floor(),
            kappa: default_kappa(),
            delta: default_delta(),
            poly_degree: default_poly_degree(),
            samples: default_samples(),
            cartesian_check: true,
        }
    }
}

/// Contents of a system file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub masses: Vec<f64>,
    #[serde(default)]
    pub angular_momentum: f64,
    #[serde(default)]
    pub configuration: Option<Configuration>,
    #[serde(default)]
    pub escape: EscapeSettings,
}

impl SystemFile {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let parsed = if is_toml {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| InputError(format!("parse error in {}: {e}", path.display())).into())
    }
}
