//! Config-driven wrappers around the estimator bias/variance measurements:
//! build a small random instance (or reuse a trained checkpoint), sweep the
//! estimator × baseline grid, and emit CSV.

use crate::diffcore::rng::Prng;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::estimators::{
    estimator_report, variance_report, BaselineKind, BaselineSpec, EstimatorKind,
    EstimatorReport, ReportSpec, VarianceRow,
};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{ModelDims, PosteriorDims};
use crate::harness::train::Trainer;
use crate::posterior::{Posterior, PosteriorConfig};
use crate::seqmodel::{ModelConfig, SeqModel};

/// One estimator/baseline/k cell of a report grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecEntry {
    pub estimator: EstimatorKind,
    pub baseline: BaselineKind,
    pub k: usize,
    #[serde(default)]
    pub constant: f64,
}

impl SpecEntry {
    pub fn to_spec(&self) -> Result<ReportSpec> {
        if self.baseline == BaselineKind::Parametric {
            return Err(Error::validation(
                "parametric baseline is a training-time device; reports measure \
                 the sampling baselines",
            ));
        }
        let baseline = if self.baseline == BaselineKind::Constant {
            BaselineSpec::constant(self.constant)
        } else {
            BaselineSpec::of(self.baseline)
        };
        baseline.validate_arity(self.k)?;
        Ok(ReportSpec {
            estimator: self.estimator,
            baseline,
            k: self.k,
        })
    }
}

/// Report configuration: the instance is a random model scored on random
/// frames with a random target, all derived from `seed`, sized small enough
/// for the exact oracles.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub seed: u64,
    pub draws: usize,
    /// Hidden width of the instance model (and vocabulary/frame size).
    pub vocab: usize,
    pub m: usize,
    pub n: usize,
    pub model: ModelDims,
    pub posterior: PosteriorDims,
    /// Bias gate: pass when `|bias| ≤ se_multiplier · SE` per coordinate.
    pub se_multiplier: f64,
    pub specs: Vec<SpecEntry>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            seed: 0,
            draws: 2000,
            vocab: 4,
            m: 2,
            n: 1,
            model: ModelDims {
                hidden: 4,
                layers: 1,
            },
            posterior: PosteriorDims {
                enc_hidden: 3,
                enc_layers: 1,
                dec_hidden: 4,
                dec_layers: 1,
            },
            se_multiplier: 4.0,
            specs: vec![
                SpecEntry {
                    estimator: EstimatorKind::Reinforce,
                    baseline: BaselineKind::None,
                    k: 2,
                    constant: 0.0,
                },
                SpecEntry {
                    estimator: EstimatorKind::Nvil,
                    baseline: BaselineKind::None,
                    k: 2,
                    constant: 0.0,
                },
                SpecEntry {
                    estimator: EstimatorKind::Vimco,
                    baseline: BaselineKind::GeometricMean,
                    k: 2,
                    constant: 0.0,
                },
            ],
        }
    }
}

/// A freshly initialized instance for a report: model, posterior, and one
/// random `(frames, target)` example.
pub struct ReportInstance {
    pub store: ParamStore,
    pub model: SeqModel,
    pub posterior: Posterior,
    pub frames: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl ReportConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ReportConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("report config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::validation("reports need draws >= 2"));
        }
        if self.vocab < 2 || self.m == 0 || self.n == 0 {
            return Err(Error::validation("report instance sizes out of range"));
        }
        if self.specs.is_empty() {
            return Err(Error::validation("report needs at least one spec"));
        }
        if !(self.se_multiplier > 0.0) {
            return Err(Error::validation("se_multiplier must be positive"));
        }
        for entry in &self.specs {
            entry.to_spec()?;
        }
        Ok(())
    }

    pub fn build_instance(&self) -> Result<ReportInstance> {
        let mut rng = Prng::new(self.seed).fork_stream(7);
        let mut store = ParamStore::new();
        let model = SeqModel::init(
            &mut store,
            ModelConfig {
                feature_dim: self.vocab,
                vocab: self.vocab,
                hidden: self.model.hidden,
                layers: self.model.layers,
            },
            &mut rng,
        )?;
        let posterior = Posterior::init(
            &mut store,
            PosteriorConfig {
                feature_dim: self.vocab,
                vocab: self.vocab,
                enc_hidden: self.posterior.enc_hidden,
                enc_layers: self.posterior.enc_layers,
                dec_hidden: self.posterior.dec_hidden,
                dec_layers: self.posterior.dec_layers,
            },
            &mut rng,
        )?;
        let frames = (0..self.m)
            .map(|_| (0..self.vocab).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let y = (0..self.n).map(|_| rng.below(self.vocab)).collect();
        Ok(ReportInstance {
            store,
            model,
            posterior,
            frames,
            y,
        })
    }

    fn specs(&self) -> Result<Vec<ReportSpec>> {
        self.specs.iter().map(|e| e.to_spec()).collect()
    }
}

/// Oracle-checked unbiasedness sweep. Returns the full report and whether
/// every coordinate of every spec passed the bias gate.
pub fn report_unbiasedness(config: &ReportConfig) -> Result<(EstimatorReport, bool)> {
    config.validate()?;
    let inst = config.build_instance()?;
    let report = estimator_report(
        &inst.store,
        &inst.model,
        Some(&inst.posterior),
        None,
        &inst.frames,
        &inst.y,
        &config.specs()?,
        config.draws,
        config.seed,
    )?;
    let pass = report.all_unbiased(config.se_multiplier);
    Ok((report, pass))
}

/// Variance sweep on a fresh random instance.
pub fn report_variance(config: &ReportConfig) -> Result<Vec<VarianceRow>> {
    config.validate()?;
    let inst = config.build_instance()?;
    variance_report(
        &inst.store,
        &inst.model,
        Some(&inst.posterior),
        None,
        &inst.frames,
        &inst.y,
        &config.specs()?,
        config.draws,
        config.seed,
    )
}

/// Variance sweep against a trained checkpoint, measured on the first
/// held-out example of the checkpoint's own task. This needs no oracle, so
/// it runs at full task sizes.
pub fn report_variance_from_checkpoint(
    ckpt: &Checkpoint,
    specs: &[SpecEntry],
    draws: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if specs.is_empty() {
        return Err(Error::validation("report needs at least one spec"));
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let pair = trainer
        .eval_set()
        .first()
        .ok_or_else(|| Error::validation("checkpoint run has no held-out examples"))?;
    let resolved: Vec<ReportSpec> = specs
        .iter()
        .map(|e| e.to_spec())
        .collect::<Result<_>>()?;
    variance_report(
        &trainer.store,
        &trainer.model,
        trainer.posterior.as_ref(),
        None,
        &pair.x,
        &pair.y,
        &resolved,
        draws,
        seed,
    )
}
