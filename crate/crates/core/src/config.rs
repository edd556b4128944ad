//! Run configuration: JSON file, defaults for every field, and dotted
//! `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, SpreadReading};
use crate::error::{Error, Result};
use crate::training::{TrainConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grid,
    Cqr,
    Chdqr,
    ChdqrDynamic,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Grid, Method::Cqr, Method::Chdqr, Method::ChdqrDynamic];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grid => "grid",
            Method::Cqr => "cqr",
            Method::Chdqr => "chdqr",
            Method::ChdqrDynamic => "chdqr-dynamic",
        }
    }

    /// Prototype variant for the density-based methods.
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Grid => Some(Variant::Grid),
            Method::Chdqr => Some(Variant::Static),
            Method::ChdqrDynamic => Some(Variant::Dynamic),
            Method::Cqr => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (grid, cqr, chdqr, chdqr-dynamic)")))
    }
}

fn default_n1() -> usize {
    10_000
}

fn default_n2() -> usize {
    30_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Uncond1d {
        #[serde(default = "default_n1")]
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spread: SpreadReading,
    },
    Uncond2d {
        #[serde(default = "default_n2")]
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        outliers_per_component: usize,
    },
    Csv {
        path: PathBuf,
        targets: Vec<String>,
        #[serde(default)]
        features: Option<Vec<String>>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Uncond1d {
            n: default_n1(),
            seed: 0,
            spread: SpreadReading::Variance,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Uncond1d { n, seed, spread } => data::gen_uncond1d_with(*n, *seed, *spread),
            DatasetSpec::Uncond2d {
                n,
                seed,
                outliers_per_component,
            } => {
                let base = data::gen_uncond2d(*n, *seed)?;
                if *outliers_per_component == 0 {
                    Ok(base)
                } else {
                    data::add_outliers(&base, *outliers_per_component, *seed)
                }
            }
            DatasetSpec::Csv {
                path,
                targets,
                features,
            } => data::load_csv(path, targets, features.as_deref()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            cal: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn with_seed(&self, seed: u64) -> data::SplitSpec {
        data::SplitSpec {
            train: self.train,
            cal: self.cal,
            test: self.test,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Also write per-test-point region files.
    pub write_regions: bool,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            alphas: vec![0.1, 0.5, 0.9],
            seeds: (0..10).collect(),
            workers: 1,
            write_regions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub name: String,
    pub dataset: DatasetSpec,
    pub method: Method,
    pub alpha: f64,
    pub seed: u64,
    pub split: SplitFractions,
    pub train: TrainConfig,
    pub suite: SuiteSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: DatasetSpec::default(),
            method: Method::ChdqrDynamic,
            alpha: 0.1,
            seed: 0,
            split: SplitFractions::default(),
            train: TrainConfig::default(),
            suite: SuiteSection::default(),
        }
    }
}

impl Config {
    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Config::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.with_seed(0).validate()?;
        let alpha_ok = |a: f64| a > 0.0 && a < 1.0;
        if !alpha_ok(self.alpha) || !self.suite.alphas.iter().all(|a| alpha_ok(*a)) {
            return Err(Error::Config("every alpha must lie in (0, 1)".into()));
        }
        if self.suite.workers == 0 {
            return Err(Error::Config("suite.workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Recursive object merge. An object carrying a different `kind` tag
/// replaces the old one instead of merging into it.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let retag = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; `value` is parsed as JSON and falls back to a
/// plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(part.to_string(), patch);
        patch = Value::Object(obj);
    }
    merge(root, patch);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win() {
        let cfg = Config::load(
            None,
            &[
                "train.epochs=3".into(),
                "method=grid".into(),
                "dataset.kind=uncond2d".into(),
                "suite.alphas=[0.2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.method, Method::Grid);
        assert_eq!(cfg.suite.alphas, vec![0.2]);
        assert!(matches!(cfg.dataset, DatasetSpec::Uncond2d { n: 30_000, .. }));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::load(None, &["train.epoch=3".into()]).is_err());
        assert!(Config::load(None, &["alpha=1.5".into()]).is_err());
        assert!(Config::load(None, &["noequals".into()]).is_err());
        assert!(Config::load(None, &["method=knn".into()]).is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 4, "train": {"epochs": 7}}"#).unwrap();
        let cfg = Config::load(Some(&path), &["seed=5".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs), (5, 7));
        assert_eq!(cfg.hash().unwrap(), cfg.clone().hash().unwrap());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), Value::String(m.name().into()));
        }
    }
}
