//! Engine configuration and its validation.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Pooling used by the projection layer when reducing pixels to nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Average => "average",
            Pooling::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Number of random-walk stages `T`.
    pub num_stages: usize,
    /// Embedding length `d` produced by each projection.
    pub embed_dim: usize,
    /// Pixel-to-node downsampling factor.
    pub downsample_factor: usize,
    /// Scale inner-product affinities by `1/sqrt(d)`.
    pub affinity_scale: bool,
    pub softmax_temperature: f64,
    pub standardize_epsilon: f64,
    /// 1-based stage numbers to omit from the cascade.
    pub skip_stages: BTreeSet<usize>,
    pub num_classes: usize,
    pub pooling: Pooling,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            num_stages: 5,
            embed_dim: 16,
            downsample_factor: 5,
            affinity_scale: true,
            softmax_temperature: 1.0,
            standardize_epsilon: 1e-5,
            skip_stages: BTreeSet::new(),
            num_classes: 2,
            pooling: Pooling::Average,
        }
    }
}

impl EngineConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    /// Whether the 1-based `stage` takes part in the cascade.
    pub fn stage_enabled(&self, stage: usize) -> bool {
        !self.skip_stages.contains(&stage)
    }
}

/// One violated configuration invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    NumStages(usize),
    EmbedDim(usize),
    DownsampleFactor(usize),
    SoftmaxTemperature(f64),
    StandardizeEpsilon(f64),
    NumClasses(usize),
    SkipStage { stage: usize, num_stages: usize },
    LearningRate(f64),
    Epochs(usize),
    Momentum(f64),
    FdEpsilon(f64),
}

impl ConfigError {
    pub fn field(&self) -> &'static str {
        match self {
            ConfigError::NumStages(_) => "num_stages",
            ConfigError::EmbedDim(_) => "embed_dim",
            ConfigError::DownsampleFactor(_) => "downsample_factor",
            ConfigError::SoftmaxTemperature(_) => "softmax_temperature",
            ConfigError::StandardizeEpsilon(_) => "standardize_epsilon",
            ConfigError::NumClasses(_) => "num_classes",
            ConfigError::SkipStage { .. } => "skip_stages",
            ConfigError::LearningRate(_) => "learning_rate",
            ConfigError::Epochs(_) => "epochs",
            ConfigError::Momentum(_) => "momentum",
            ConfigError::FdEpsilon(_) => "fd_epsilon",
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::NumStages(v) => write!(f, "num_stages must be >= 1, got {v}"),
            ConfigError::EmbedDim(v) => write!(f, "embed_dim must be >= 1, got {v}"),
            ConfigError::DownsampleFactor(v) => {
                write!(f, "downsample_factor must be >= 1, got {v}")
            }
            ConfigError::SoftmaxTemperature(v) => {
                write!(f, "softmax_temperature must be finite and > 0, got {v}")
            }
            ConfigError::StandardizeEpsilon(v) => {
                write!(f, "standardize_epsilon must be finite and > 0, got {v}")
            }
            ConfigError::NumClasses(v) => write!(f, "num_classes must be in 1..=255, got {v}"),
            ConfigError::SkipStage { stage, num_stages } => {
                write!(f, "skip_stages entry {stage} not in 1..={num_stages}")
            }
            ConfigError::LearningRate(v) => {
                write!(f, "learning_rate must be finite and >= 0, got {v}")
            }
            ConfigError::Epochs(v) => write!(f, "epochs must be >= 1, got {v}"),
            ConfigError::Momentum(v) => write!(f, "momentum must lie in [0, 1), got {v}"),
            ConfigError::FdEpsilon(v) => write!(f, "fd_epsilon must be finite and > 0, got {v}"),
        }
    }
}

/// Checks every invariant and reports all violations at once.
pub fn validate_config(cfg: EngineConfig) -> Result<EngineConfig> {
    let mut errors = Vec::new();
    if cfg.num_stages == 0 {
        errors.push(ConfigError::NumStages(cfg.num_stages));
    }
    if cfg.embed_dim == 0 {
        errors.push(ConfigError::EmbedDim(cfg.embed_dim));
    }
    if cfg.downsample_factor == 0 {
        errors.push(ConfigError::DownsampleFactor(cfg.downsample_factor));
    }
    if !(cfg.softmax_temperature.is_finite() && cfg.softmax_temperature > 0.0) {
        errors.push(ConfigError::SoftmaxTemperature(cfg.softmax_temperature));
    }
    if !(cfg.standardize_epsilon.is_finite() && cfg.standardize_epsilon > 0.0) {
        errors.push(ConfigError::StandardizeEpsilon(cfg.standardize_epsilon));
    }
    // 255 is reserved for the ignore label.
    if cfg.num_classes == 0 || cfg.num_classes > 255 {
        errors.push(ConfigError::NumClasses(cfg.num_classes));
    }
    for &stage in &cfg.skip_stages {
        if stage == 0 || stage > cfg.num_stages {
            errors.push(ConfigError::SkipStage {
                stage,
                num_stages: cfg.num_stages,
            });
        }
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::InvalidConfig(errors))
    }
}
