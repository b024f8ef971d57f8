//! Run configuration: one TOML file describes a complete training run.

use crate::error::{Error, Result};
use crate::estimators::{BaselineKind, BaselineSpec, EstimatorKind};
use crate::posterior::PosteriorConfig;
use crate::seqmodel::ModelConfig;
use crate::tasks::TaskConfig;

/// Weight-noise standard deviations covered by the regularization grid.
pub const WEIGHT_NOISE_GRID: [f64; 4] = [0.0, 0.075, 0.1, 0.15];
/// L2 penalty weights covered by the regularization grid.
pub const L2_GRID: [f64; 4] = [0.0, 1e-5, 1e-4, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::validation(format!(
                "optimizer hyperparameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Model sizes as written in config files; `feature_dim` and `vocab` come
/// from the task.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 16,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorDims {
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
}

impl Default for PosteriorDims {
    fn default() -> Self {
        PosteriorDims {
            enc_hidden: 8,
            enc_layers: 1,
            dec_hidden: 12,
            dec_layers: 1,
        }
    }
}

/// Everything one training run needs. Unset fields take the defaults below,
/// so config files only spell out what they change.
///
/// The optimizer block defaults to Adam at learning rate 3e-3 — a choice,
/// not an inherited setting, as is the batch size of 16 with k = 4 samples.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    /// Use the two-stream mixture generator instead of the plain copy task.
    pub mixture: bool,
    pub model: ModelDims,
    pub posterior: PosteriorDims,
    pub estimator: EstimatorKind,
    pub baseline: BaselineKind,
    /// Offset for the constant baseline; ignored by the other kinds.
    pub baseline_constant: f64,
    /// Samples per example per step.
    pub k: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Per-step Gaussian weight noise std; must be one of
    /// [`WEIGHT_NOISE_GRID`].
    pub weight_noise: f64,
    /// L2 penalty weight; must be one of [`L2_GRID`].
    pub l2: f64,
    /// Total optimization steps.
    pub steps: usize,
    /// Metrics row / held-out evaluation cadence, in steps.
    pub eval_interval: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    /// Greedy-decode emission cap; 0 means twice the task's longest target.
    pub max_decode_tokens: usize,
    /// Running mean/std normalization of NVIL's learning signal.
    pub normalize_signals: bool,
    /// Record wall-clock seconds in metrics rows. Off by default so metrics
    /// files are bit-reproducible.
    pub log_wallclock: bool,
    /// Stop early once held-out TER reaches this value; 0 disables.
    pub target_ter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: TaskConfig::copy_default(0),
            mixture: false,
            model: ModelDims::default(),
            posterior: PosteriorDims::default(),
            estimator: EstimatorKind::Vimco,
            baseline: BaselineKind::Loo,
            baseline_constant: 0.0,
            k: 4,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            weight_noise: 0.0,
            l2: 0.0,
            steps: 1000,
            eval_interval: 100,
            train_examples: 256,
            eval_examples: 64,
            max_decode_tokens: 0,
            normalize_signals: false,
            log_wallclock: false,
            target_ter: 0.0,
        }
    }
}

fn in_grid(value: f64, grid: &[f64]) -> bool {
    grid.iter().any(|&g| g == value)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::validation(format!("run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::validation(format!("run config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.optimizer.validate()?;
        self.model_config().validate()?;
        if self.estimator.needs_posterior() {
            self.posterior_config().validate()?;
        }
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::validation("k and batch_size must be positive"));
        }
        if self.estimator == EstimatorKind::Vimco && self.k < 2 {
            return Err(Error::validation("vimco requires k >= 2"));
        }
        if self.baseline == BaselineKind::GeometricMean && self.estimator != EstimatorKind::Vimco {
            return Err(Error::validation(
                "geometric-mean baseline applies only to vimco",
            ));
        }
        if self.baseline == BaselineKind::Parametric && self.estimator == EstimatorKind::Vimco {
            return Err(Error::validation(
                "parametric baseline is not defined for vimco",
            ));
        }
        self.baseline_spec().validate_arity(self.k)?;
        if !in_grid(self.weight_noise, &WEIGHT_NOISE_GRID) {
            return Err(Error::validation(format!(
                "weight_noise {} is not in the grid {WEIGHT_NOISE_GRID:?}",
                self.weight_noise
            )));
        }
        if !in_grid(self.l2, &L2_GRID) {
            return Err(Error::validation(format!(
                "l2 {} is not in the grid {L2_GRID:?}",
                self.l2
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::validation("eval_interval must be positive"));
        }
        if self.train_examples == 0 || self.eval_examples == 0 {
            return Err(Error::validation(
                "train_examples and eval_examples must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.target_ter) {
            return Err(Error::validation("target_ter must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.task.vocab,
            vocab: self.task.vocab,
            hidden: self.model.hidden,
            layers: self.model.layers,
        }
    }

    pub fn posterior_config(&self) -> PosteriorConfig {
        PosteriorConfig {
            feature_dim: self.task.vocab,
            vocab: self.task.vocab,
            enc_hidden: self.posterior.enc_hidden,
            enc_layers: self.posterior.enc_layers,
            dec_hidden: self.posterior.dec_hidden,
            dec_layers: self.posterior.dec_layers,
        }
    }

    pub fn baseline_spec(&self) -> BaselineSpec {
        if self.baseline == BaselineKind::Constant {
            BaselineSpec::constant(self.baseline_constant)
        } else {
            BaselineSpec::of(self.baseline)
        }
    }

    pub fn decode_cap(&self) -> usize {
        if self.max_decode_tokens > 0 {
            self.max_decode_tokens
        } else {
            2 * self.task.n_max
        }
    }
}
