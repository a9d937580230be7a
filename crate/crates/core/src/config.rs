//! Flat `key = value` experiment configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides in order, then dedicated flags such as `--seed` and `--out`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::experiments::SPARSITY_BOUNDS;
use crate::train::{TrainConfig, Variant};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
}

impl ConfigError {
    /// The offending key, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(k) | ConfigError::Value { key: k, .. } => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Interaction TSV, or a directory of split manifests.
    pub data: Option<PathBuf>,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub cutoffs: Vec<usize>,
    pub noise_ratios: Vec<f64>,
    pub sparsity_bounds: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            ratios: [0.7, 0.1, 0.2],
            split_seed: 2023,
            out: PathBuf::from("out"),
            checkpoint: None,
            cutoffs: vec![20, 40],
            noise_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            sparsity_bounds: SPARSITY_BOUNDS.to_vec(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: [&str; 29] = [
    "dim",
    "layers",
    "heads",
    "centric",
    "hops",
    "rho",
    "remask_period",
    "lambda1",
    "lambda2",
    "learning_rate",
    "batch_size",
    "epochs",
    "patience",
    "seed",
    "temperature",
    "readout",
    "variant",
    "precision",
    "data",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "split_seed",
    "out",
    "checkpoint",
    "cutoffs",
    "noise_ratios",
    "sparsity_bounds",
    "variants",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        reason: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "dim" => t.dim = parse(key, value)?,
            "layers" => t.layers = parse(key, value)?,
            "heads" => t.heads = parse(key, value)?,
            "centric" => t.centric = parse(key, value)?,
            "hops" => t.hops = parse(key, value)?,
            "rho" => t.rho = parse(key, value)?,
            "remask_period" => t.remask_period = parse(key, value)?,
            "lambda1" => t.lambda1 = parse(key, value)?,
            "lambda2" => t.lambda2 = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "readout" => t.readout = parse(key, value)?,
            "variant" => t.variant = parse(key, value)?,
            "precision" => t.precision = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "train_ratio" => self.ratios[0] = parse(key, value)?,
            "val_ratio" => self.ratios[1] = parse(key, value)?,
            "test_ratio" => self.ratios[2] = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "cutoffs" => self.cutoffs = parse_list(key, value)?,
            "noise_ratios" => self.noise_ratios = parse_list(key, value)?,
            "sparsity_bounds" => self.sparsity_bounds = parse_list(key, value)?,
            "variants" => self.variants = parse_list(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Value {
            key: pair.to_string(),
            reason: "expected KEY=VALUE".into(),
        })?;
        self.set(key.trim(), value.trim())
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Value {
            key: e.key.to_string(),
            reason: e.reason,
        })?;
        crate::data::validate_ratios(self.ratios).map_err(|e| ConfigError::Value {
            key: "train_ratio".into(),
            reason: e.to_string(),
        })?;
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(ConfigError::Value {
                key: "cutoffs".into(),
                reason: "need at least one positive cutoff".into(),
            });
        }
        Ok(())
    }

    /// Resolved values for provenance, one per key.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let readout = serde_json::to_value(t.readout).expect("serializes");
        let precision = serde_json::to_value(t.precision).expect("serializes");
        let pairs: Vec<(&str, String)> = vec![
            ("dim", t.dim.to_string()),
            ("layers", t.layers.to_string()),
            ("heads", t.heads.to_string()),
            ("centric", t.centric.to_string()),
            ("hops", t.hops.to_string()),
            ("rho", t.rho.to_string()),
            ("remask_period", t.remask_period.to_string()),
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            ("temperature", t.temperature.to_string()),
            ("readout", readout.as_str().unwrap_or_default().to_string()),
            ("variant", t.variant.tag().to_string()),
            ("precision", precision.as_str().unwrap_or_default().to_string()),
            ("data", opt(&self.data)),
            ("train_ratio", self.ratios[0].to_string()),
            ("val_ratio", self.ratios[1].to_string()),
            ("test_ratio", self.ratios[2].to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("out", self.out.display().to_string()),
            ("checkpoint", opt(&self.checkpoint)),
            ("cutoffs", join(&self.cutoffs)),
            ("noise_ratios", join(&self.noise_ratios)),
            ("sparsity_bounds", join(&self.sparsity_bounds)),
            ("variants", join(&self.variants)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The echo as a config file that parses back to the same values.
    pub fn to_text(&self) -> String {
        self.echo()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\n\ndim = 16\nheads=2\nvariant = -IM\ncutoffs = 10, 20\n").unwrap();
        c.apply_override("dim=8").unwrap();
        assert_eq!(c.train.dim, 8);
        assert_eq!(c.train.heads, 2);
        assert_eq!(c.train.variant, Variant::NoInfomax);
        assert_eq!(c.cutoffs, vec![10, 20]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = ExperimentConfig::default();
        let err = c.apply_text("dimm = 3").unwrap_err();
        assert_eq!(err.key(), Some("dimm"));
        let err = c.apply_text("dim = x").unwrap_err();
        assert_eq!(err.key(), Some("dim"));
        assert!(matches!(c.apply_text("dim"), Err(ConfigError::Syntax { line: 1 })));
        c.set("heads", "5").unwrap();
        assert_eq!(c.validate().unwrap_err().key(), Some("heads"));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply_text("lambda2 = 0.0001\nreadout = sum\nprecision = f32\ndata = x.tsv\nvariants = full,-L2M").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(KEYS.iter().all(|k| c.echo().contains_key(*k)));
    }
}
