//! Project configuration: one JSON document where every key has a default
//! and unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::ConditionConfig;
use crate::denoiser::{DenoiserConfig, NoiseSchedule, ScheduleError};
use crate::optim::AdamWConfig;
use crate::synth::TaxaSpec;
use crate::taxonomy::NUM_LEVELS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Progressive,
    All,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Progressive => "progressive",
            Strategy::All => "all",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "progressive" => Ok(Strategy::Progressive),
            "all" => Ok(Strategy::All),
            "random" => Ok(Strategy::Random),
            other => Err(ConfigError::Invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Cfg,
    #[default]
    Taxa,
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Taxa => "taxa",
        })
    }
}

impl FromStr for GuidanceMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "cfg" => Ok(GuidanceMode::Cfg),
            "taxa" => Ok(GuidanceMode::Taxa),
            other => Err(ConfigError::Invalid(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Where `gen-data` writes the dataset and where training reads it.
    pub dir: PathBuf,
    /// An external manifest used instead of `dir/manifest.jsonl`.
    pub manifest: Option<PathBuf>,
    pub spec: TaxaSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data"), manifest: None, spec: TaxaSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of taxonomy levels used for conditioning, counted from the root.
    pub levels: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
    pub cond_heads: usize,
    pub channels: [usize; 2],
    pub time_dim: usize,
    pub attn_heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: NUM_LEVELS,
            cond_tokens: 8,
            cond_dim: 64,
            cond_heads: 4,
            channels: [32, 64],
            time_dim: 64,
            attn_heads: 4,
            lora_rank: 4,
            lora_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 250, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub strategy: Strategy,
    pub iterations_per_level: usize,
    pub batch_size: usize,
    /// Learning rate of the first stage (level-0 module, LoRA, backbone).
    pub lr_first: f64,
    /// Learning rate of every later stage.
    pub lr_rest: f64,
    /// Probability of replacing a condition by the null condition, applied
    /// while the backbone trains.
    pub cond_dropout: f64,
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub precision: Precision,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            strategy: Strategy::Progressive,
            iterations_per_level: 2000,
            batch_size: 32,
            lr_first: 1e-4,
            lr_rest: 1e-5,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceDefaults {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub steps: usize,
    pub seed: u64,
    /// Images drawn per call to the network.
    pub batch: usize,
    /// Anchor level of taxa guidance. Anything other than 0 is experimental.
    pub anchor: usize,
}

impl Default for GuidanceDefaults {
    fn default() -> Self {
        GuidanceDefaults { mode: GuidanceMode::Taxa, scale: 6.0, steps: 250, seed: 0, batch: 32, anchor: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub channels: [usize; 3],
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 20, batch_size: 32, lr: 1e-3, channels: [32, 64, 64], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    /// Seeds model initialisation and the training stream.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub guidance: GuidanceDefaults,
    pub probe: ProbeConfig,
    pub output: PathBuf,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            training: TrainingConfig::default(),
            guidance: GuidanceDefaults::default(),
            probe: ProbeConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

impl ProjectConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ProjectConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config as `config.json` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json() + "\n")?;
        Ok(path)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data.manifest.clone().unwrap_or_else(|| self.data.dir.join(crate::dataset::MANIFEST_FILE))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let m = &self.model;
        if m.levels == 0 || m.levels > NUM_LEVELS {
            return bad(format!("model.levels must be in 1..={NUM_LEVELS}, got {}", m.levels));
        }
        if m.cond_tokens == 0 || m.cond_dim == 0 || m.cond_heads == 0 || !m.cond_dim.is_multiple_of(m.cond_heads) {
            return bad("model.cond_dim must be a positive multiple of model.cond_heads".into());
        }
        if m.attn_heads == 0 || !m.channels[1].is_multiple_of(m.attn_heads) || m.channels.contains(&0) || m.time_dim == 0 {
            return bad("model.channels[1] must be a positive multiple of model.attn_heads".into());
        }
        if m.lora_rank == 0 {
            return bad("model.lora_rank must be positive".into());
        }
        if !self.data.spec.image_size.is_multiple_of(4) {
            return bad(format!("data.spec.image_size must be divisible by 4, got {}", self.data.spec.image_size));
        }
        self.schedule.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.training;
        if t.iterations_per_level == 0 || t.batch_size == 0 {
            return bad("training.iterations_per_level and training.batch_size must be positive".into());
        }
        if !(t.lr_first > 0.0 && t.lr_rest > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&t.cond_dropout) {
            return bad(format!("training.cond_dropout must be in [0, 1), got {}", t.cond_dropout));
        }
        if !(t.grad_clip > 0.0) {
            return bad("training.grad_clip must be positive".into());
        }
        let g = &self.guidance;
        if !(g.scale >= 0.0) {
            return bad(format!("guidance.scale must be >= 0, got {}", g.scale));
        }
        if g.steps == 0 || g.steps > self.schedule.steps {
            return bad(format!("guidance.steps must be in 1..={}, got {}", self.schedule.steps, g.steps));
        }
        if g.batch == 0 || g.anchor >= m.levels {
            return bad("guidance.batch must be positive and guidance.anchor a configured level".into());
        }
        let p = &self.probe;
        if p.epochs == 0 || p.batch_size == 0 || !(p.lr > 0.0) || p.channels.contains(&0) {
            return bad("probe settings must be positive".into());
        }
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_size: self.data.spec.image_size,
            channels: self.model.channels,
            time_dim: self.model.time_dim,
            cond_dim: self.model.cond_dim,
            heads: self.model.attn_heads,
            lora_rank: self.model.lora_rank,
            lora_alpha: self.model.lora_alpha,
            steps: self.schedule.steps,
        }
    }

    pub fn condition(&self) -> ConditionConfig {
        ConditionConfig {
            depth: self.model.levels,
            tokens: self.model.cond_tokens,
            dim: self.model.cond_dim,
            heads: self.model.cond_heads,
            seed: taxa_numeric::rng::split(self.seed, 0xE4B),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ProjectConfig::from_json("{}").unwrap();
        assert_eq!(c, ProjectConfig::default());
        assert_eq!(c.guidance.scale, 6.0);
        assert_eq!(c.guidance.steps, 250);
        assert_eq!(c.training.iterations_per_level, 2000);
        assert_eq!(c.training.batch_size, 32);
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        assert!(ProjectConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(ProjectConfig::from_json(r#"{"training": {"lr": 1}}"#).is_err());
        assert!(ProjectConfig::from_json(r#"{"data": {"spec": {"branchin": [2]}}}"#).is_err());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let c = ProjectConfig::from_json(r#"{"training": {"batch_size": 4}, "guidance": {"mode": "cfg"}}"#).unwrap();
        assert_eq!(c.training.batch_size, 4);
        assert_eq!(c.training.lr_first, 1e-4);
        assert_eq!(c.guidance.mode, GuidanceMode::Cfg);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ProjectConfig::from_json(r#"{"seed": 9, "model": {"levels": 3}}"#).unwrap();
        assert_eq!(ProjectConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"model": {"levels": 0}}"#,
            r#"{"model": {"levels": 8}}"#,
            r#"{"guidance": {"steps": 251}}"#,
            r#"{"guidance": {"scale": -1}}"#,
            r#"{"schedule": {"beta_start": 0.5, "beta_end": 0.1}}"#,
            r#"{"training": {"cond_dropout": 1.0}}"#,
        ] {
            assert!(matches!(ProjectConfig::from_json(doc), Err(ConfigError::Invalid(_))), "{doc}");
        }
    }

    #[test]
    fn strategy_and_mode_parse() {
        assert_eq!("all".parse::<Strategy>().unwrap(), Strategy::All);
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!("none".parse::<GuidanceMode>().unwrap(), GuidanceMode::None);
    }
}
