//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, config file, the
//! `NCDG_DATA_ROOT` environment variable (data root only), `--set` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageMode, NormScope};
use crate::error::{Error, Result};
use crate::training::{Ablation, Augment, OptimizerKind, TrainConfig};

pub const DATA_ROOT_ENV: &str = "NCDG_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub data_root: PathBuf,
    /// Leading samples of the source training split that are used.
    pub train_samples: usize,
    pub source: String,
    pub target: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            train_samples: 1000,
            source: "mnist".into(),
            target: "usps".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str, allowed: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("{key}: expected one of {allowed}, got {value:?}")))
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enums serialize as strings"),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "lambda" => t.lambda = parse(key, value)?,
            "t" => t.t = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "optimizer" => t.optimizer = parse_enum::<OptimizerKind>(key, value, "adam, sgd")?,
            "adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "second_order" => t.second_order = parse_bool(key, value)?,
            "coverage_mode" => t.coverage_mode = parse_enum::<CoverageMode>(key, value, "bootstrapped, full")?,
            "norm_scope" => t.norm_scope = parse_enum::<NormScope>(key, value, "per_sample, batch")?,
            "ablation" => t.ablation = parse_enum::<Ablation>(key, value, "none, no_grad, no_cov")?,
            "augment" => t.augment = parse_enum::<Augment>(key, value, "reverse, none")?,
            "conv1_channels" => t.widths.conv1_channels = parse(key, value)?,
            "conv2_channels" => t.widths.conv2_channels = parse(key, value)?,
            "fc1_units" => t.widths.fc1_units = parse(key, value)?,
            "kernel" => t.widths.kernel = parse(key, value)?,
            "padding" => t.widths.padding = parse(key, value)?,
            "image_size" => t.widths.image_size = parse(key, value)?,
            "data_root" => d.data_root = PathBuf::from(value),
            "train_samples" => d.train_samples = parse(key, value)?,
            "source" => d.source = value.to_string(),
            "target" => d.target = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let d = &self.data;
        let entries: Vec<(&str, String)> = vec![
            ("lambda", t.lambda.to_string()),
            ("t", t.t.to_string()),
            ("beta", t.beta.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("iterations", t.iterations.to_string()),
            ("seed", t.seed.to_string()),
            ("optimizer", enum_name(&t.optimizer)),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("second_order", t.second_order.to_string()),
            ("coverage_mode", enum_name(&t.coverage_mode)),
            ("norm_scope", enum_name(&t.norm_scope)),
            ("ablation", enum_name(&t.ablation)),
            ("augment", enum_name(&t.augment)),
            ("conv1_channels", t.widths.conv1_channels.to_string()),
            ("conv2_channels", t.widths.conv2_channels.to_string()),
            ("fc1_units", t.widths.fc1_units.to_string()),
            ("kernel", t.widths.kernel.to_string()),
            ("padding", t.widths.padding.to_string()),
            ("image_size", t.widths.image_size.to_string()),
            ("data_root", d.data_root.display().to_string()),
            ("train_samples", d.train_samples.to_string()),
            ("source", d.source.clone()),
            ("target", d.target.clone()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Resolves a configuration from its sources in precedence order.
    pub fn resolve(file: Option<&Path>, env_data_root: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_text(&text)? {
                cfg.set(&k, &v)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
        }
        if let Some(root) = env_data_root.filter(|r| !r.is_empty()) {
            cfg.data.data_root = PathBuf::from(root);
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Image and label files of a named dataset under `root`.
pub fn dataset_paths(root: &Path, key: &str) -> Result<(PathBuf, PathBuf)> {
    let (dir, images, labels) = match key {
        "mnist-train" => ("mnist", "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "mnist-test" => ("mnist", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        "usps-train" => ("usps", "usps-train-images-idx3-ubyte", "usps-train-labels-idx1-ubyte"),
        "usps-test" => ("usps", "usps-test-images-idx3-ubyte", "usps-test-labels-idx1-ubyte"),
        _ => {
            return Err(Error::Config(format!(
                "unknown dataset {key:?} (expected mnist-train, mnist-test, usps-train, usps-test or source)"
            )))
        }
    };
    Ok((root.join(dir).join(images), root.join(dir).join(labels)))
}
