use serde::{Deserialize, Serialize};

use crate::adversarial::{
    ConditioningMap, ConditioningMode, DEFAULT_MULTILINEAR_THRESHOLD, DEFAULT_RANDOM_DIM,
};
use crate::error::{Error, Result};
use crate::kernel::{KernelConfig, DEFAULT_MULTIPLIERS};
use crate::target_losses::DEFAULT_MCC_TEMPERATURE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningChoice {
    /// Exact map up to `threshold` outputs, randomized above.
    Auto,
    ExactMultilinear,
    RandomizedMultilinear,
    Concatenation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub mode: ConditioningChoice,
    pub threshold: usize,
    pub random_dim: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            mode: ConditioningChoice::Auto,
            threshold: DEFAULT_MULTILINEAR_THRESHOLD,
            random_dim: DEFAULT_RANDOM_DIM,
        }
    }
}

impl ConditioningConfig {
    pub fn build(
        &self,
        feature_dim: usize,
        class_count: usize,
        seed: u64,
    ) -> Result<ConditioningMap> {
        match self.mode {
            ConditioningChoice::Auto => ConditioningMap::select(
                feature_dim,
                class_count,
                self.threshold,
                self.random_dim,
                seed,
            ),
            ConditioningChoice::ExactMultilinear => {
                Ok(ConditioningMap::exact(feature_dim, class_count))
            }
            ConditioningChoice::RandomizedMultilinear => {
                ConditioningMap::randomized(feature_dim, class_count, self.random_dim, seed)
            }
            ConditioningChoice::Concatenation => {
                Ok(ConditioningMap::concatenation(feature_dim, class_count))
            }
        }
    }

    pub fn resolved_mode(&self, feature_dim: usize, class_count: usize) -> ConditioningMode {
        match self.mode {
            ConditioningChoice::Auto if feature_dim * class_count <= self.threshold => {
                ConditioningMode::ExactMultilinear
            }
            ConditioningChoice::Auto | ConditioningChoice::RandomizedMultilinear => {
                ConditioningMode::RandomizedMultilinear
            }
            ConditioningChoice::ExactMultilinear => ConditioningMode::ExactMultilinear,
            ConditioningChoice::Concatenation => ConditioningMode::Concatenation,
        }
    }
}

/// Kernel used by both MMD terms. Without a fixed bandwidth the base width
/// comes from the median heuristic on each step's pooled (detached) features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSettings {
    pub multipliers: Vec<f64>,
    pub fixed_bandwidth: Option<f64>,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
            fixed_bandwidth: None,
        }
    }
}

impl KernelSettings {
    pub fn resolve(
        &self,
        x: &crate::autodiff::Tensor,
        y: &crate::autodiff::Tensor,
    ) -> Result<KernelConfig> {
        match self.fixed_bandwidth {
            Some(sigma) => KernelConfig::around(sigma, &self.multipliers),
            None => KernelConfig::from_median(x, y, &self.multipliers),
        }
    }
}

/// Hidden widths of the three networks. The classifier is a single linear
/// layer on top of the features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Widths after the input layer; the last one is the feature dimension.
    pub feature_widths: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            feature_widths: vec![64, 32],
            discriminator_hidden: vec![64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Information maximization weight.
    pub beta: f64,
    /// Class confusion weight.
    pub gamma: f64,
    /// MMD weight.
    pub delta: f64,
    /// Pseudo-label MMD weight.
    pub eta: f64,
    /// Ceiling of the adversarial schedule; 0 disables the discriminator.
    pub lambda_max: f64,
    /// Class-confusion temperature.
    pub temperature: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub conditioning: ConditioningConfig,
    pub kernel: KernelSettings,
    pub architecture: ArchitectureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 32,
            epochs: 20,
            beta: 0.05,
            gamma: 1.4,
            delta: 0.54,
            eta: 0.54,
            lambda_max: 1.0,
            temperature: DEFAULT_MCC_TEMPERATURE,
            optimizer: AdamWConfig::default(),
            seed: 0,
            conditioning: ConditioningConfig::default(),
            kernel: KernelSettings::default(),
            architecture: ArchitectureConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Every adaptation term switched off: plain source classification.
    pub fn source_only(mut self) -> Self {
        self.beta = 0.0;
        self.gamma = 0.0;
        self.delta = 0.0;
        self.eta = 0.0;
        self.lambda_max = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("eta", self.eta),
            ("lambda_max", self.lambda_max),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
        ];
        if let Some((name, v)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::param(format!("{name} must be finite, got {v}")));
        }
        let positive = [
            ("lr", self.lr),
            ("temperature", self.temperature),
            ("optimizer.eps", self.optimizer.eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param(format!("{name} must be positive, got {v}")));
        }
        if self.lambda_max < 0.0 {
            return Err(Error::param(format!(
                "lambda_max must be non-negative, got {}",
                self.lambda_max
            )));
        }
        for (name, b) in [
            ("beta1", self.optimizer.beta1),
            ("beta2", self.optimizer.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(format!(
                    "optimizer.{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("batch_size and epochs must be at least 1"));
        }
        if self.architecture.feature_widths.is_empty() {
            return Err(Error::param(
                "architecture.feature_widths needs at least one layer",
            ));
        }
        if self.kernel.multipliers.is_empty() {
            return Err(Error::param("kernel.multipliers must not be empty"));
        }
        Ok(())
    }
}
