//! System-description files, presets and `--override` handling.

use std::path::Path;

use ddelab::coefficients::{CoefficientSpec, KernelFn, MatrixFn};
use ddelab::counterexample::{build_v, remark2_config, REMARK2_WINDOW};
use ddelab::dichotomy::DichotomyConfig;
use ddelab::evolution::default_window;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::failure::Failure;

pub const SCHEMA: &str = "v1";

/// Spike count of the `remark2` coefficient expression.
pub const REMARK2_N_MAX: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default)]
    pub terms: Vec<Term>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub dichotomy: DichotomySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Term {
    Instantaneous {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expression: Option<String>,
    },
    Discrete {
        delay: f64,
        matrix: Vec<Vec<f64>>,
    },
    Kernel {
        matrix: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    #[serde(alias = "N")]
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n: 24 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    pub h_int: f64,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        Self { h_int: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DichotomySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub tolerances: DichotomyConfig,
}

impl Default for DichotomySection {
    fn default() -> Self {
        Self { h: None, count: 30, m: None, k: None, tolerances: DichotomyConfig::default() }
    }
}

pub const PRESETS: &[&str] = &["delay-stable", "delay-unstable", "saddle", "zero", "ode-decay", "remark2"];

/// Full system document behind a preset name.
pub fn preset(name: &str) -> Option<Value> {
    let scalar_delay = |b: f64| {
        json!({
            "schema": SCHEMA, "d": 1, "r": 1.0,
            "terms": [{"type": "discrete", "delay": 1.0, "matrix": [[b]]}],
        })
    };
    let v = match name {
        "delay-stable" => scalar_delay(-1.0),
        "delay-unstable" => scalar_delay(1.0),
        "zero" => scalar_delay(0.0),
        "saddle" => json!({
            "schema": SCHEMA, "d": 2, "r": 1.0,
            "terms": [
                {"type": "instantaneous", "matrix": [[1.0, 0.0], [0.0, 0.0]]},
                {"type": "discrete", "delay": 1.0, "matrix": [[0.0, 0.0], [0.0, -1.0]]},
            ],
        }),
        "ode-decay" => json!({
            "schema": SCHEMA, "d": 1, "r": 0.0,
            "terms": [{"type": "instantaneous", "matrix": [[-1.0]]}],
        }),
        "remark2" => {
            let tolerances = serde_json::to_value(remark2_config()).expect("config serializes");
            json!({
                "schema": SCHEMA, "d": 1, "r": 0.0,
                "terms": [{"type": "instantaneous", "expression": "remark2"}],
                "integrator": {"h_int": 1e-4},
                "dichotomy": {
                    "h": REMARK2_WINDOW,
                    "count": (REMARK2_N_MAX as f64 / REMARK2_WINDOW).round() as usize,
                    "tolerances": tolerances,
                },
            })
        }
        _ => return None,
    };
    Some(v)
}

/// Recursive merge; objects merge key-wise, everything else is replaced.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Applies `key.sub=value`; the value is parsed as JSON and kept as a string otherwise.
fn apply_override(doc: &mut Value, spec: &str) -> Result<(), Failure> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::schema(format!("override '{spec}': expected key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Failure::schema(format!("override '{spec}': empty key")));
        }
        let obj = match node {
            Value::Object(o) => o,
            _ => return Err(Failure::schema(format!("override '{spec}': '{}' is not an object", keys[..i].join(".")))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one key")
}

fn parse_value(v: Value, origin: &str) -> Result<SystemFile, Failure> {
    serde_json::from_value(v).map_err(|e| Failure::schema(format!("{origin}: {e}")))
}

/// Resolves the system from a file or a preset name, then applies overrides.
pub fn load(file: Option<&Path>, preset_name: Option<&str>, overrides: &[String]) -> Result<SystemFile, Failure> {
    let mut doc = match (file, preset_name) {
        (Some(_), Some(_)) => return Err(Failure::schema("--system and --preset are mutually exclusive".into())),
        (None, None) => return Err(Failure::schema("a system is required: pass --system FILE or --preset NAME".into())),
        (None, Some(name)) => json!({"schema": SCHEMA, "preset": name}),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new("io", format!("{}: {e}", path.display()), 1))?;
            // typed parse first so that errors carry line and column
            serde_json::from_str::<SystemFile>(&text)
                .map_err(|e| Failure::schema(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
            serde_json::from_str(&text).map_err(|e| Failure::schema(format!("{}: {e}", path.display())))?
        }
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let raw = parse_value(doc.clone(), "override")?;
    let doc = match raw.preset.as_deref() {
        None => doc,
        Some(name) => {
            if raw.d.is_some() || raw.r.is_some() || !raw.terms.is_empty() {
                return Err(Failure::schema(format!("preset '{name}': d, r and terms come from the preset")));
            }
            let mut base = preset(name).ok_or_else(|| {
                Failure::schema(format!("preset: unknown name '{name}' (known: {})", PRESETS.join(", ")))
            })?;
            let mut patch = doc;
            if let Value::Object(o) = &mut patch {
                o.remove("schema");
            }
            merge(&mut base, patch);
            base
        }
    };
    let sys = parse_value(doc, "system")?;
    sys.validate()?;
    Ok(sys)
}

fn matrix(rows: &[Vec<f64>], d: usize, at: &str) -> Result<DMatrix<f64>, Failure> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Failure::schema(format!("{at}: expected a {d}x{d} matrix")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Failure::schema(format!("{at}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl SystemFile {
    fn validate(&self) -> Result<(), Failure> {
        if self.schema != SCHEMA {
            return Err(Failure::schema(format!("schema: expected \"{SCHEMA}\", found \"{}\"", self.schema)));
        }
        if self.d.is_none() || self.r.is_none() {
            return Err(Failure::schema("system: d and r are required".into()));
        }
        if self.terms.is_empty() {
            return Err(Failure::schema("terms: at least one term is required".into()));
        }
        if self.grid.n < 1 {
            return Err(Failure::schema("grid.n: must be at least 1".into()));
        }
        if !(self.integrator.h_int > 0.0) {
            return Err(Failure::schema("integrator.h_int: must be positive".into()));
        }
        if self.dichotomy.count == 0 {
            return Err(Failure::schema("dichotomy.count: must be positive".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d.expect("validated")
    }

    pub fn r(&self) -> f64 {
        self.r.expect("validated")
    }

    pub fn window(&self) -> f64 {
        self.dichotomy.h.unwrap_or_else(|| default_window(self.r()))
    }

    pub fn dichotomy_config(&self) -> DichotomyConfig {
        let mut cfg = self.dichotomy.tolerances.clone();
        cfg.window_m = self.dichotomy.m.or(cfg.window_m);
        cfg.k = self.dichotomy.k.or(cfg.k);
        cfg
    }

    pub fn coefficients(&self) -> Result<CoefficientSpec, Failure> {
        let (d, r) = (self.d(), self.r());
        let has_expression = self.terms.iter().any(|t| matches!(t, Term::Instantaneous { expression: Some(_), .. }));
        if has_expression {
            return match self.terms.as_slice() {
                [Term::Instantaneous { matrix: None, expression: Some(e) }] if e == "remark2" && d == 1 => {
                    let v = build_v(REMARK2_N_MAX).map_err(Failure::from)?;
                    v.coefficients().map_err(Failure::from)
                }
                _ => Err(Failure::schema(
                    "terms: the expression 'remark2' needs d = 1 and must be the only term, without a matrix".into(),
                )),
            };
        }
        let mut spec = CoefficientSpec::new(r, d).map_err(|e| Failure::schema(format!("system: {e}")))?;
        for (i, term) in self.terms.iter().enumerate() {
            let at = format!("terms[{i}]");
            let bad = |e: ddelab::Error| Failure::schema(format!("{at}: {e}"));
            spec = match term {
                Term::Instantaneous { matrix: Some(m), expression: None } => {
                    spec.with_instantaneous(MatrixFn::constant(matrix(m, d, &at)?)).map_err(bad)?
                }
                Term::Instantaneous { .. } => {
                    return Err(Failure::schema(format!("{at}: exactly one of matrix or expression is required")))
                }
                Term::Discrete { delay, matrix: m } => {
                    spec.with_discrete(*delay, MatrixFn::constant(matrix(m, d, &at)?)).map_err(bad)?
                }
                Term::Kernel { matrix: m } => spec.with_kernel(KernelFn::Constant(matrix(m, d, &at)?)).map_err(bad)?,
            };
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves() {
        for name in PRESETS {
            let sys = load(None, Some(name), &[]).unwrap();
            sys.coefficients().unwrap();
        }
    }

    #[test]
    fn overrides_reach_nested_sections() {
        let sys = load(None, Some("delay-stable"), &["grid.n=12".into(), "dichotomy.tolerances.growth_tol=2".into()]).unwrap();
        assert_eq!(sys.grid.n, 12);
        assert_eq!(sys.dichotomy.tolerances.growth_tol, 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, Some("saddle"), &["grid.nodes=3".into()]).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn preset_sections_survive_partial_patch() {
        let sys = load(None, Some("remark2"), &["dichotomy.count=100".into()]).unwrap();
        assert_eq!(sys.dichotomy.count, 100);
        assert_eq!(sys.dichotomy.h, Some(REMARK2_WINDOW));
        assert_eq!(sys.dichotomy.tolerances.gap_tol, Some(0.05));
    }
}
