//! Flag/config-file merging and grid syntax.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

/// Bad command-line input: reported with usage text and exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

/// Overlay the set flags on the config file (if any). Keys in the file mirror
/// the long flag names; flags win.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T, UsageError> {
    let mut base = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(usage(format!("config {} must hold a JSON object", path.display()))),
                Err(e) => return Err(usage(format!("config {} is not valid JSON: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    let set = serde_json::to_value(flags).map_err(|e| usage(e.to_string()))?;
    if let Value::Object(m) = set {
        for (k, v) in m {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| usage(format!("config: {e}")))
}

/// Grid values may be written as a string (`"2..12"`, `"1e-3,1e-2"`), a bare
/// number, or a JSON array of either.
pub fn grid_field<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    fn flatten(v: &Value) -> Result<String, String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Array(items) => items
                .iter()
                .map(flatten)
                .collect::<Result<Vec<_>, _>>()
                .map(|v| v.join(",")),
            other => Err(format!("expected a grid, got {other}")),
        }
    }
    let v = Option::<Value>::deserialize(d)?;
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(v) => flatten(&v).map(Some).map_err(serde::de::Error::custom),
    }
}

/// Comma-separated items, each a single integer or an inclusive range `a..b`.
pub fn usize_grid(flag: &str, s: &str) -> Result<Vec<usize>, UsageError> {
    let bad = || usage(format!("--{flag}: cannot parse '{s}' as integers or a range a..b"));
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(usage(format!("--{flag}: empty range {item}")));
            }
            out.extend(a..=b);
        } else {
            out.push(item.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn u64_grid(flag: &str, s: &str) -> Result<Vec<u64>, UsageError> {
    Ok(usize_grid(flag, s)?.into_iter().map(|x| x as u64).collect())
}

pub fn f64_list(flag: &str, s: &str) -> Result<Vec<f64>, UsageError> {
    let out: Result<Vec<f64>, _> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<f64>())
        .collect();
    match out {
        Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(v),
        _ => Err(usage(format!(
            "--{flag}: cannot parse '{s}' as a comma-separated list of numbers"
        ))),
    }
}

pub fn names(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, UsageError> {
    v.clone()
        .ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

/// `--out` if given, else `default_name` under `$DUFM_LAB_OUT` (or the working directory).
pub fn output_path(out: &Option<PathBuf>, default_name: &str) -> PathBuf {
    match out {
        Some(p) => p.clone(),
        None => match std::env::var_os("DUFM_LAB_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(default_name),
            _ => PathBuf::from(default_name),
        },
    }
}

/// `cmp.csv` -> `cmp.manifest.json`; directory outputs get `invocation.json` inside.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("invocation.json")
    } else {
        out.with_extension("manifest.json")
    }
}
