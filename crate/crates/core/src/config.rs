//! Run configuration: one TOML document with `[data]`, `[model]`, `[train]`,
//! `[split]` and `[tune]` sections. Every key has a default and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperopt::{Point, SearchSpace, Value};
use crate::model::ModelConfig;
use crate::splits::{Scheme, DEFAULT_CLUSTER_THRESHOLD};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("hyperparameter '{name}': {message}")]
    Point { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub interactions: String,
    pub sequences: String,
    /// Optional `assay_id<TAB>task_id` file; empty for none.
    pub assay_map: String,
    /// Exact-match `[from, to]` remap of raw values before the transform.
    pub inactive_remap: Option<[f64; 2]>,
    pub min_obs: usize,
    pub max_malformed: usize,
    /// 0 infers the task count from the data.
    pub n_tasks: usize,
    /// Replicate pairs with any value at or above this threshold in
    /// training sets; `None` disables oversampling.
    pub oversample_threshold: Option<f64>,
    pub oversample_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: "interactions.csv".into(),
            sequences: "sequences.tsv".into(),
            assay_map: String::new(),
            inactive_remap: None,
            min_obs: 0,
            max_malformed: 0,
            n_tasks: 0,
            oversample_threshold: None,
            oversample_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub scheme: Scheme,
    pub k: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub cluster_threshold: f64,
    /// Drop the tuning holdout from validation folds.
    pub exclude_holdout: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            scheme: Scheme::Warm,
            k: 5,
            repetitions: 3,
            seed: 0,
            cluster_threshold: DEFAULT_CLUSTER_THRESHOLD,
            exclude_holdout: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Gp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub strategy: Strategy,
    pub budget: usize,
    pub n_init: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            strategy: Strategy::Gp,
            budget: 20,
            n_init: 5,
            candidates: crate::hyperopt::DEFAULT_CANDIDATES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub tune: TuneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_toml(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// One seed for every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.split.seed = seed;
        self.tune.seed = seed;
    }

    pub fn resolve(&self, data_dir: &Path, file: &str) -> Option<PathBuf> {
        (!file.is_empty()).then(|| data_dir.join(file))
    }

    /// Applies a search point. Recognized names: `learning_rate`,
    /// `batch_size`, `patience`, `max_epochs`, `n_layers`, `layer_width`
    /// (every layer), `width_<i>`, `dropout` (every layer), `dropout_<i>`,
    /// `graph_conv_width` (every conv layer), `graph_dense_width`,
    /// `readout`.
    pub fn with_point(&self, space: &SearchSpace, point: &Point) -> Result<RunConfig, ConfigError> {
        let mut cfg = self.clone();
        let err = |name: &str, message: &str| ConfigError::Point {
            name: name.to_string(),
            message: message.to_string(),
        };
        // resize layers first so per-layer settings apply to the new depth
        if let Some(i) = space.index_of("n_layers") {
            let n = int(&point[i]).ok_or_else(|| err("n_layers", "expected an integer"))?;
            if n == 0 {
                return Err(err("n_layers", "must be at least 1"));
            }
            let m = &mut cfg.model;
            let w = *m.hidden_layers.last().unwrap_or(&128);
            m.hidden_layers.resize(n, w);
            if m.dropout_rates.len() > 1 {
                let d = *m.dropout_rates.last().expect("non-empty");
                m.dropout_rates.resize(n, d);
            }
        }
        for (d, v) in space.dimensions.iter().zip(point) {
            let name = d.name.as_str();
            let f = || v.as_f64().ok_or_else(|| err(name, "expected a number"));
            let u = || int(v).ok_or_else(|| err(name, "expected a non-negative integer"));
            let m = &mut cfg.model;
            match name {
                "n_layers" => {}
                "learning_rate" => cfg.train.learning_rate = f()?,
                "batch_size" => cfg.train.batch_size = u()?,
                "patience" => cfg.train.patience = u()?,
                "max_epochs" => cfg.train.max_epochs = u()?,
                "layer_width" => {
                    let w = u()?;
                    m.hidden_layers.iter_mut().for_each(|x| *x = w);
                }
                "dropout" => m.dropout_rates = vec![f()?],
                "graph_conv_width" => {
                    let w = u()?;
                    m.graph_conv_widths.iter_mut().for_each(|x| *x = w);
                }
                "graph_dense_width" => m.graph_dense_width = u()?,
                "readout" => {
                    m.readout = match v.to_string().as_str() {
                        "sum" => crate::graphconv::Readout::Sum,
                        "mean" => crate::graphconv::Readout::Mean,
                        _ => return Err(err(name, "expected sum or mean")),
                    }
                }
                _ => {
                    if let Some(i) = name.strip_prefix("width_").and_then(|s| s.parse::<usize>().ok()) {
                        let w = u()?;
                        if let Some(x) = m.hidden_layers.get_mut(i) {
                            *x = w;
                        }
                    } else if let Some(i) = name.strip_prefix("dropout_").and_then(|s| s.parse::<usize>().ok()) {
                        let r = f()?;
                        let n = m.hidden_layers.len();
                        if m.dropout_rates.len() != n {
                            let d = m.dropout_rates[0];
                            m.dropout_rates = vec![d; n];
                        }
                        if let Some(x) = m.dropout_rates.get_mut(i) {
                            *x = r;
                        }
                    } else {
                        return Err(err(name, "unknown hyperparameter"));
                    }
                }
            }
        }
        cfg.model.validate().map_err(|e| err("model", &e.to_string()))?;
        cfg.train.validate().map_err(|e| err("train", &e.to_string()))?;
        Ok(cfg)
    }
}

fn int(v: &Value) -> Option<usize> {
    match v {
        Value::Int(i) if *i >= 0 => Some(*i as usize),
        Value::Float(f) if *f >= 0.0 && f.fract() == 0.0 => Some(*f as usize),
        _ => None,
    }
}

/// Reads and validates a `[[dimension]]` TOML search space.
pub fn load_space(path: &Path) -> Result<SearchSpace, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let space: SearchSpace = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    space.validate().map_err(|e| ConfigError::Parse(e.to_string()))?;
    Ok(space)
}

/// A small default search space over the documented hyperparameters.
pub fn default_space() -> SearchSpace {
    toml::from_str(DEFAULT_SPACE).expect("default space parses")
}

pub const DEFAULT_SPACE: &str = r#"[[dimension]]
name = "learning_rate"
type = "continuous"
lo = 0.0001
hi = 0.01
log = true

[[dimension]]
name = "dropout"
type = "continuous"
lo = 0.0
hi = 0.5

[[dimension]]
name = "batch_size"
type = "integer"
lo = 16
hi = 128

[[dimension]]
name = "n_layers"
type = "integer"
lo = 1
hi = 3

[[dimension]]
name = "layer_width"
type = "integer"
lo = 64
hi = 1024
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatchsize = 3\n").is_err());
        assert!(RunConfig::from_toml("[nope]\n").is_err());
        assert!(RunConfig::from_toml("[model]\nvariant = \"padme-foo\"\n").is_err());
        let c = RunConfig::from_toml(
            "[model]\nvariant = \"compound-only-graphconv\"\n[split]\nscheme = \"cold-cluster\"\n",
        )
        .unwrap();
        assert_eq!(c.split.scheme, Scheme::ColdCluster);
    }

    #[test]
    fn seed_applies_everywhere() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        assert_eq!(
            (c.model.seed, c.train.seed, c.split.seed, c.tune.seed),
            (42, 42, 42, 42)
        );
    }

    #[test]
    fn point_application() {
        let space = default_space();
        let point = vec![
            Value::Float(0.002),
            Value::Float(0.3),
            Value::Int(64),
            Value::Int(3),
            Value::Int(100),
        ];
        let c = RunConfig::default().with_point(&space, &point).unwrap();
        assert_eq!(c.train.learning_rate, 0.002);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.model.hidden_layers, vec![100, 100, 100]);
        assert_eq!(c.model.dropout_rates, vec![0.3]);

        let bad: SearchSpace =
            toml::from_str("[[dimension]]\nname = \"colour\"\ntype = \"integer\"\nlo = 0\nhi = 3\n").unwrap();
        assert!(RunConfig::default().with_point(&bad, &vec![Value::Int(1)]).is_err());
    }
}
