//! TOML configuration shared by every subcommand.
//!
//! A file holds any subset of the sections below; unknown keys anywhere are
//! rejected.
//!
//! ```toml
//! seed = 7
//!
//! [scenario]            # ScenarioSpec, with [[scenario.ues]] groups
//! [slicing]             # SliceConfig, with [[slicing.slices]]
//! [train]               # TrainConfig
//! [verify]              # tabular instances and lambda grid
//! [output]              # default artifact paths
//! ```
//!
//! Relative paths (traces, models, outputs) resolve against the directory of
//! the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::oracle::sweep::{uniform_grid, InstanceSampler};
use crate::oracle::TabularMdp;
use crate::scheduler::{SchedError, ScenarioSpec, SliceConfig};
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: `{key}` {reason}")]
    Invalid {
        path: PathBuf,
        key: String,
        reason: String,
    },
}

/// Lambda grid of an oracle check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for LambdaGrid {
    /// Step 0.1 over `[0, 3]`.
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 3.0,
            points: 31,
        }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        uniform_grid(self.lo, self.hi, self.points)
    }
}

fn d_random() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Explicit instances, checked in addition to the random ones.
    #[serde(default)]
    pub instances: Vec<TabularMdp>,
    #[serde(default = "d_random")]
    pub random_instances: usize,
    #[serde(default)]
    pub sampler: InstanceSampler,
    #[serde(default)]
    pub lambda: LambdaGrid,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: Vec::new(),
            random_instances: d_random(),
            sampler: InstanceSampler::default(),
            lambda: LambdaGrid::default(),
        }
    }
}

impl VerifyConfig {
    /// Explicit instances followed by `random_instances` sampled from `seed`.
    pub fn all_instances(&self, seed: u64) -> Vec<TabularMdp> {
        let mut out = self.instances.clone();
        out.extend(self.sampler.instances(self.random_instances, seed));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub slicing: Option<SliceConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub output: OutputPaths,
    /// Directory of the source file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Checks every present section; errors name the offending key.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| sched_key("scenario", e))?;
            if let Some(sl) = &self.slicing {
                sl.validate(s).map_err(|e| sched_key("slicing", e))?;
            }
        }
        if let Some(sl) = &self.slicing {
            if sl.slices.is_empty() {
                return Err(("slicing.slices".into(), "needs at least one slice".into()));
            }
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| match e {
                TrainError::Invalid { field, reason } => (format!("train.{field}"), reason),
                TrainError::Env(e) => env_key("train", e),
                other => ("train".into(), other.to_string()),
            })?;
        }
        if let Some(v) = &self.verify {
            let g = &v.lambda;
            if !(g.lo.is_finite() && g.hi.is_finite() && g.lo <= g.hi) || g.points < 2 {
                return Err((
                    "verify.lambda".into(),
                    "needs finite lo <= hi and at least 2 points".into(),
                ));
            }
            for (i, m) in v.instances.iter().enumerate() {
                m.validate()
                    .map_err(|e| (format!("verify.instances[{i}]"), e.to_string()))?;
            }
            let s = &v.sampler;
            if s.max_queue.0 > s.max_queue.1
                || s.beta.0 > s.beta.1
                || s.gamma.0 > s.gamma.1
                || s.mu.0 > s.mu.1
            {
                return Err(("verify.sampler".into(), "ranges need lo <= hi".into()));
            }
        }
        Ok(())
    }
}

fn env_key(section: &str, e: EnvError) -> (String, String) {
    match e {
        EnvError::Invalid { field, reason } => (format!("{section}.{field}"), reason),
        other => (section.to_string(), other.to_string()),
    }
}

fn sched_key(section: &str, e: SchedError) -> (String, String) {
    match e {
        SchedError::Invalid { field, reason } => (format!("{section}.{field}"), reason),
        SchedError::Env(e) => env_key(section, e),
        other => (section.to_string(), other.to_string()),
    }
}

/// Parses TOML text; `path` only labels errors and sets the base directory.
pub fn parse_config_str(text: &str, path: &Path) -> Result<Config, ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::Parse {
            path: path.to_path_buf(),
            message: "empty configuration".into(),
        });
    }
    let mut cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })?;
    cfg.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    cfg.validate().map_err(|(key, reason)| ConfigError::Invalid {
        path: path.to_path_buf(),
        key,
        reason,
    })?;
    Ok(cfg)
}

/// Reads, parses and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ServiceClass;

    fn parse(text: &str) -> Result<Config, ConfigError> {
        parse_config_str(text, Path::new("dir/x.toml"))
    }

    #[test]
    fn empty_is_a_parse_error() {
        assert!(matches!(parse(""), Err(ConfigError::Parse { .. })));
        assert!(matches!(parse("  \n"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("[train]\nclass = \"embb\"\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = parse("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn wrong_type_is_reported() {
        let err = parse("[scenario]\ntotal_rbgs = \"many\"\nhorizon = 5\nues = []\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("total_rbgs") || msg.contains("integer"), "{msg}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let ok = parse("[train]\nclass = \"embb\"\nweights = [0.2, 0.6, 0.2]\n").unwrap();
        assert_eq!(ok.train.unwrap().class, ServiceClass::Embb);
        let err = parse("[train]\nclass = \"embb\"\nweights = [0.2, 0.6, 0.3]\n").unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "train.weights"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn scenario_budget_checked() {
        let text = "[scenario]\ntotal_rbgs = 8\nhorizon = 5\n[[scenario.ues]]\nclass = \"xr\"\n";
        match parse(text).unwrap_err() {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "scenario.top_r"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn base_dir_from_path() {
        let cfg = parse("seed = 3\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.resolve(Path::new("m.txt")), Path::new("dir/m.txt"));
    }

    #[test]
    fn default_grid_step() {
        let g = LambdaGrid::default().values();
        assert_eq!(g.len(), 31);
        assert!((g[1] - g[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            parse_config(Path::new("/nonexistent/x.toml")),
            Err(ConfigError::Io { .. })
        ));
    }
}
