//! Scenario files (JSON, schema version 1).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dichotomy::DichotomyProblem;
use crate::error::{LiaoError, Result};
use crate::field::expr::{time_state_vars, Expr};
use crate::field::VectorFieldSpec;
use crate::reduced::DEFAULT_D_GRID;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericBlock {
    pub h: f64,
    pub tol: f64,
    pub horizon: f64,
    pub xi: f64,
    pub epsilon: f64,
    pub window_t: f64,
    #[serde(default = "default_d_grid")]
    pub d_grid: Vec<f64>,
    #[serde(default = "default_max_radius")]
    pub max_radius: f64,
    #[serde(default = "default_probe_time")]
    pub probe_time: f64,
    #[serde(default = "default_equivariance_times")]
    pub equivariance_times: Vec<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub strict_neighborhood: bool,
    #[serde(default = "default_deltas")]
    pub uniformity_deltas: Vec<f64>,
    #[serde(default = "default_pairs")]
    pub lipschitz_pairs: usize,
    #[serde(default = "default_stride")]
    pub probe_stride: usize,
    #[serde(default = "default_frame_checks")]
    pub frame_checks: usize,
}

fn default_d_grid() -> Vec<f64> {
    DEFAULT_D_GRID.to_vec()
}
fn default_max_radius() -> f64 {
    1.0
}
fn default_probe_time() -> f64 {
    10.0
}
fn default_equivariance_times() -> Vec<f64> {
    vec![-10.0, -5.0, 5.0, 10.0]
}
fn default_max_iter() -> usize {
    50
}
fn default_deltas() -> Vec<f64> {
    vec![0.01, 0.1]
}
fn default_pairs() -> usize {
    4
}
fn default_stride() -> usize {
    50
}
fn default_frame_checks() -> usize {
    5
}
fn default_delta_samples() -> usize {
    20
}
fn default_s_range() -> [f64; 2] {
    [-5.0, 5.0]
}
fn default_one() -> f64 {
    1.0
}
fn default_class_samples() -> usize {
    200
}
fn default_dichotomy_tol() -> f64 {
    1e-10
}

/// A standalone triangular problem: entries of `A` are expressions in `t`,
/// components of `f` are expressions in `t` and `z_1..z_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DichotomyBlock {
    pub p_minus: usize,
    pub a: Vec<Vec<String>>,
    pub f: Vec<String>,
    pub eta_a: f64,
    pub xi_a: f64,
    pub eta_f: f64,
    pub l_f: f64,
    pub horizon: f64,
    pub step: f64,
    #[serde(default = "default_dichotomy_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_delta_samples")]
    pub delta_samples: usize,
    #[serde(default = "default_s_range")]
    pub s_range: [f64; 2],
    #[serde(default = "default_one")]
    pub u_radius: f64,
    #[serde(default = "default_one")]
    pub z_radius: f64,
    #[serde(default = "default_class_samples")]
    pub class_samples: usize,
}

/// Parsed expressions of a [`DichotomyBlock`].
#[derive(Debug, Clone)]
pub struct ParsedDichotomy {
    pub a: Vec<Vec<Expr>>,
    pub f: Vec<Expr>,
}

impl DichotomyBlock {
    pub fn dimension(&self) -> usize {
        self.f.len()
    }

    pub fn parse(&self) -> Result<ParsedDichotomy> {
        let p = self.dimension();
        if p == 0 {
            return Err(LiaoError::Validation("dichotomy.f must not be empty".into()));
        }
        if self.a.len() != p || self.a.iter().any(|r| r.len() != p) {
            return Err(LiaoError::Validation(format!("dichotomy.a must be {p}×{p}")));
        }
        let vars = time_state_vars(p);
        let a = self
            .a
            .iter()
            .map(|row| row.iter().map(|e| Expr::parse(e, &vars)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if a.iter().flatten().any(|e| e.max_var().is_some_and(|v| v > 0)) {
            return Err(LiaoError::Validation("dichotomy.a may depend on t only".into()));
        }
        let f = self.f.iter().map(|e| Expr::parse(e, &vars)).collect::<Result<Vec<_>>>()?;
        Ok(ParsedDichotomy { a, f })
    }

    /// The problem described by this block.
    pub fn problem(&self) -> Result<DichotomyProblem<'static>> {
        let parsed = self.parse()?;
        let p = self.dimension();
        let state_dependent = parsed.f.iter().any(|e| e.max_var().is_some_and(|v| v > 0));
        let a = parsed.a.clone();
        let f = parsed.f.clone();
        let mut problem = DichotomyProblem::new(
            p,
            self.p_minus,
            move |t| {
                let x = [t];
                Ok(DMatrix::from_fn(p, p, |i, j| a[i][j].eval(&x)))
            },
            move |t, z: &DVector<f64>| {
                let mut x = Vec::with_capacity(p + 1);
                x.push(t);
                x.extend(z.iter());
                let v = DVector::from_iterator(p, f.iter().map(|e| e.eval(&x)));
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(LiaoError::Overflow("the dichotomy forcing".into()));
                }
                Ok(v)
            },
        )
        .with_constants(self.eta_a, self.xi_a, self.eta_f, self.l_f)
        .with_window(self.horizon, self.step);
        // rate for the truncation estimate: smallest |a_kk| at t = 0
        let rate = parsed
            .a
            .iter()
            .enumerate()
            .map(|(k, row)| row[k].eval(&[0.0]).abs())
            .fold(f64::INFINITY, f64::min);
        problem = problem.with_rate(if rate.is_finite() && rate > 0.0 { rate } else { 1.0 });
        if !state_dependent {
            problem = problem.state_independent();
        }
        Ok(problem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub field: VectorFieldSpec,
    #[serde(default)]
    pub perturbation: Option<VectorFieldSpec>,
    pub lambda_samples: Vec<Vec<f64>>,
    pub p_minus: usize,
    pub numeric: NumericBlock,
    #[serde(default)]
    pub dichotomy: Option<DichotomyBlock>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

const TOP_KEYS: &[&str] = &[
    "schema_version",
    "name",
    "field",
    "perturbation",
    "lambda_samples",
    "p_minus",
    "numeric",
    "dichotomy",
    "output_dir",
    "seed",
];
const FIELD_KEYS: &[&str] = &["name", "dimension", "components"];
const NUMERIC_KEYS: &[&str] = &[
    "h",
    "tol",
    "horizon",
    "xi",
    "epsilon",
    "window_t",
    "d_grid",
    "max_radius",
    "probe_time",
    "equivariance_times",
    "max_iter",
    "strict_neighborhood",
    "uniformity_deltas",
    "lipschitz_pairs",
    "probe_stride",
    "frame_checks",
];
const DICHOTOMY_KEYS: &[&str] = &[
    "p_minus",
    "a",
    "f",
    "eta_a",
    "xi_a",
    "eta_f",
    "l_f",
    "horizon",
    "step",
    "tol",
    "max_iter",
    "delta_samples",
    "s_range",
    "u_radius",
    "z_radius",
    "class_samples",
];

/// Every key not in the schema, as dotted paths.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    fn scan(v: &Value, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
        if let Value::Object(map) = v {
            for k in map.keys() {
                if !allowed.contains(&k.as_str()) {
                    out.push(format!("{prefix}{k}"));
                }
            }
        }
    }
    let mut out = Vec::new();
    scan(value, TOP_KEYS, "", &mut out);
    if let Value::Object(map) = value {
        for (key, allowed) in [
            ("field", FIELD_KEYS),
            ("perturbation", FIELD_KEYS),
            ("numeric", NUMERIC_KEYS),
            ("dichotomy", DICHOTOMY_KEYS),
        ] {
            if let Some(v) = map.get(key) {
                scan(v, allowed, &format!("{key}."), &mut out);
            }
        }
    }
    out
}

/// Hex SHA-256 of the scenario bytes.
pub fn scenario_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Scenario {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let value: Value = serde_json::from_slice(bytes)?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(LiaoError::UnknownKeys(unknown));
        }
        let scenario: Scenario = serde_json::from_value(value).map_err(|e| LiaoError::Validation(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads, validates and hashes a scenario file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let scenario = Scenario::from_slice(&bytes)?;
        Ok((scenario, scenario_hash(&bytes)))
    }

    pub fn dimension(&self) -> usize {
        self.field.dimension()
    }

    pub fn samples(&self) -> Vec<DVector<f64>> {
        self.lambda_samples.iter().map(|s| DVector::from_column_slice(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(LiaoError::Validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("unsupported schema_version {}", self.schema_version));
        }
        let n = self.dimension();
        if let Some(v) = &self.perturbation {
            if v.dimension() != n {
                return fail(format!("perturbation has dimension {} but field has {n}", v.dimension()));
            }
        }
        if self.lambda_samples.is_empty() {
            return fail("lambda_samples must not be empty".into());
        }
        if let Some(i) = self.lambda_samples.iter().position(|s| s.len() != n) {
            return fail(format!("lambda_samples[{i}] does not have dimension {n}"));
        }
        if self.lambda_samples.iter().flatten().any(|v| !v.is_finite()) {
            return fail("lambda_samples must be finite".into());
        }
        if self.p_minus > n - 1 {
            return fail(format!("p_minus = {} out of range 0..={}", self.p_minus, n - 1));
        }
        let nb = &self.numeric;
        for (name, v) in [
            ("h", nb.h),
            ("tol", nb.tol),
            ("horizon", nb.horizon),
            ("xi", nb.xi),
            ("epsilon", nb.epsilon),
            ("window_t", nb.window_t),
            ("max_radius", nb.max_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("numeric.{name} must be positive"));
            }
        }
        if nb.probe_time < 0.0 {
            return fail("numeric.probe_time must be non-negative".into());
        }
        if nb.d_grid.is_empty() || nb.d_grid.iter().any(|d| !(*d > 0.0)) {
            return fail("numeric.d_grid must hold positive lengths".into());
        }
        if nb.window_t > nb.horizon {
            return fail("numeric.window_t must not exceed numeric.horizon".into());
        }
        if nb.equivariance_times.iter().any(|t| t.abs() > nb.horizon) {
            return fail("numeric.equivariance_times must lie within the horizon".into());
        }
        if nb.max_iter == 0 || nb.probe_stride == 0 {
            return fail("numeric.max_iter and numeric.probe_stride must be positive".into());
        }
        if let Some(d) = &self.dichotomy {
            let p = d.dimension();
            if d.p_minus > p {
                return fail(format!("dichotomy.p_minus = {} out of range 0..={p}", d.p_minus));
            }
            for (name, v) in [("horizon", d.horizon), ("step", d.step), ("tol", d.tol), ("u_radius", d.u_radius)] {
                if !(v > 0.0) {
                    return fail(format!("dichotomy.{name} must be positive"));
                }
            }
            for (name, v) in [("eta_a", d.eta_a), ("xi_a", d.xi_a), ("eta_f", d.eta_f), ("l_f", d.l_f)] {
                if !(v >= 0.0) {
                    return fail(format!("dichotomy.{name} must be non-negative"));
                }
            }
            if !(d.s_range[0] <= d.s_range[1]) || d.s_range[0] < -d.horizon || d.s_range[1] > d.horizon {
                return fail("dichotomy.s_range must be an interval inside the horizon".into());
            }
            if d.class_samples < 100 {
                return fail("dichotomy.class_samples must be at least 100".into());
            }
            d.parse()?;
        }
        Ok(())
    }
}
