use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, Interval};
use crate::ensemble::TieBreak;
use crate::error::{Error, Result};
use crate::neuralnet::{Family, ModelSpec};
use crate::optim::OptimizerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub origin: String,
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldSettings {
    pub k: usize,
    pub stratified: bool,
}

impl Default for FoldSettings {
    fn default() -> Self {
        Self { k: 5, stratified: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bagging {
    /// Every member trains on the same fold training set.
    #[default]
    SharedFolds,
    /// Every member trains on its own bootstrap resample of the fold training set.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSettings {
    pub members: usize,
    pub tie_break: TieBreak,
    pub bagging: Bagging,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self {
            members: 4,
            tie_break: TieBreak::SummedProbability,
            bagging: Bagging::SharedFolds,
        }
    }
}

/// Augmentation ranges; the stream seed is derived per training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSettings {
    pub reflect_x_prob: f64,
    pub reflect_y_prob: f64,
    pub rotation_range_deg: Interval,
    pub translate_range_px: Interval,
    pub scale_range: Interval,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self::from_policy(&AugmentPolicy::default_policy(0))
    }
}

impl AugmentSettings {
    pub fn from_policy(p: &AugmentPolicy) -> Self {
        Self {
            reflect_x_prob: p.reflect_x_prob,
            reflect_y_prob: p.reflect_y_prob,
            rotation_range_deg: p.rotation_range_deg,
            translate_range_px: p.translate_range_px,
            scale_range: p.scale_range,
        }
    }

    pub fn policy(&self, seed: u64) -> AugmentPolicy {
        AugmentPolicy {
            reflect_x_prob: self.reflect_x_prob,
            reflect_y_prob: self.reflect_y_prob,
            rotation_range_deg: self.rotation_range_deg,
            translate_range_px: self.translate_range_px,
            scale_range: self.scale_range,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentSettings,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            augment: AugmentSettings::default(),
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, spec: &ModelSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer.clone(),
            augment: self.augment.policy(seed),
            seed,
            spec: spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub spec: ModelSpec,
    #[serde(default)]
    pub train: TrainSettings,
}

/// Everything a cross-validation run needs. Written back into the run
/// directory with all defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_root: Option<PathBuf>,
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub folds: FoldSettings,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    pub models: Vec<ModelEntry>,
}

fn default_name() -> String {
    "run".into()
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && !s.starts_with('.')
}

impl RunConfig {
    /// A starting configuration: one model per family with the default
    /// hyperparameters, and the two dataset roots to be filled in.
    pub fn template() -> Self {
        let models = Family::ALL
            .iter()
            .map(|&f| ModelEntry {
                name: f.name().into(),
                spec: ModelSpec::desk(f),
                train: TrainSettings::default(),
            })
            .collect();
        Self {
            name: default_name(),
            seed: 0,
            out_root: None,
            datasets: vec![
                DatasetSource {
                    origin: "dataset1".into(),
                    root: PathBuf::from("data/dataset1"),
                },
                DatasetSource {
                    origin: "dataset2".into(),
                    root: PathBuf::from("data/dataset2"),
                },
            ],
            folds: FoldSettings::default(),
            ensemble: EnsembleSettings {
                members: 3,
                ..EnsembleSettings::default()
            },
            models,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_name(&self.name) {
            return Err(Error::Config(format!(
                "run name {:?} must be non-empty and use only letters, digits, '_', '-' or '.'",
                self.name
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must not exceed 2^63 - 1".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        let mut origins = BTreeSet::new();
        for d in &self.datasets {
            if !valid_name(&d.origin) || !origins.insert(&d.origin) {
                return Err(Error::Config(format!("dataset origin {:?} is invalid or repeated", d.origin)));
            }
        }
        if self.folds.k < 2 {
            return Err(Error::Config(format!("folds.k must be at least 2, got {}", self.folds.k)));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if !valid_name(&m.name) || !names.insert(&m.name) {
                return Err(Error::Config(format!("model name {:?} is invalid or repeated", m.name)));
            }
            m.train.to_config(&m.spec, 0).validate()?;
        }
        if self.ensemble.members < 2 {
            return Err(Error::Config("ensemble.members must be at least 2".into()));
        }
        Ok(())
    }
}

/// Deterministic child seed from a parent seed and a path of indices.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    // Keep seeds representable in the TOML/JSON integer range.
    path.iter().fold(splitmix(parent), |acc, &p| splitmix(acc ^ splitmix(p))) >> 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_roundtrips_through_toml() {
        let cfg = RunConfig::template();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("learning_rate = 0.00005"));
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let text = r#"
            [[datasets]]
            origin = "a"
            root = "/data/a"

            [[models]]
            name = "m1"
            spec = { family = "plain_stack", input_hw = [32, 32], input_channels = 1, stage_widths = [8, 16] }
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.folds.k, 5);
        assert!(cfg.folds.stratified);
        assert_eq!(cfg.ensemble.members, 4);
        assert_eq!(cfg.models[0].train.epochs, 15);
        assert_eq!(cfg.models[0].train.batch_size, 8);
        assert_eq!(cfg.models[0].train.optimizer.learning_rate, 5e-5);
        assert_eq!(cfg.models[0].train.augment.translate_range_px, Interval::new(-30.0, 30.0));
        // Fully explicit form re-parses to the same value.
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = RunConfig::template();
        cfg.models[1].name = cfg.models[0].name.clone();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::template();
        cfg.folds.k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::template();
        cfg.name = "../x".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::template();
        cfg.models[0].train.epochs = 0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml("datasets = 3").is_err());
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert!(derive_seed(u64::MAX, &[u64::MAX]) <= i64::MAX as u64);
    }
}
