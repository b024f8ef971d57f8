//! Baselines subtracted from the learning signal before it multiplies a
//! score term.
//!
//! Every baseline value `c(i, t)` is independent of sample `i`'s decision at
//! step `t` and of everything after it: it reads only the other samples'
//! reward series and sample `i`'s rewards strictly before `t`. That
//! independence is what keeps the centered estimators unbiased, and it is
//! audited by poisoning tests below.

use crate::diffcore::rng::Prng;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::{ParamStore, SlotId};
use crate::error::{Error, Result};
use crate::estimators::batch::{emission_matching_time, RewardSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    None,
    Constant,
    Parametric,
    SimpleAverage,
    Loo,
    TemporalLoo,
    /// Classic multi-sample signal: replace sample `i`'s weight by the
    /// geometric mean of the others inside the bound. Multi-sample bound only.
    GeometricMean,
}

impl BaselineKind {
    /// Baselines built from the other samples need at least two of them.
    pub fn needs_multiple_samples(&self) -> bool {
        matches!(
            self,
            BaselineKind::SimpleAverage
                | BaselineKind::Loo
                | BaselineKind::TemporalLoo
                | BaselineKind::GeometricMean
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::Constant => "constant",
            BaselineKind::Parametric => "parametric",
            BaselineKind::SimpleAverage => "simple_average",
            BaselineKind::Loo => "loo",
            BaselineKind::TemporalLoo => "temporal_loo",
            BaselineKind::GeometricMean => "geometric_mean",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => BaselineKind::None,
            "constant" => BaselineKind::Constant,
            "parametric" => BaselineKind::Parametric,
            "simple_average" => BaselineKind::SimpleAverage,
            "loo" => BaselineKind::Loo,
            "temporal_loo" => BaselineKind::TemporalLoo,
            "geometric_mean" => BaselineKind::GeometricMean,
            other => return Err(Error::validation(format!("unknown baseline {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Value used when `kind` is `Constant`; ignored otherwise.
    pub constant: f64,
}

impl BaselineSpec {
    pub fn none() -> Self {
        BaselineSpec {
            kind: BaselineKind::None,
            constant: 0.0,
        }
    }

    pub fn of(kind: BaselineKind) -> Self {
        BaselineSpec {
            kind,
            constant: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        BaselineSpec {
            kind: BaselineKind::Constant,
            constant: c,
        }
    }

    pub fn validate_arity(&self, k: usize) -> Result<()> {
        if self.kind.needs_multiple_samples() && k < 2 {
            return Err(Error::validation(format!(
                "baseline {} requires k >= 2 samples, got {k}",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

fn check_pair(series: &[RewardSeries], i: usize, t: usize) -> Result<()> {
    if series.len() < 2 {
        return Err(Error::validation("baseline requires k >= 2 samples"));
    }
    if i >= series.len() {
        return Err(Error::validation(format!("sample index {i} out of range")));
    }
    if t < 1 || t > series[i].len() {
        return Err(Error::validation(format!("step index {t} out of range")));
    }
    Ok(())
}

/// Average return of the other samples at the same step:
/// `c = (1/(k−1)) Σ_{j≠i} R⁽ʲ⁾_t`.
pub fn simple_average_baseline(series: &[RewardSeries], i: usize, t: usize) -> Result<f64> {
    check_pair(series, i, t)?;
    let k = series.len();
    let mut acc = 0.0;
    for (j, s) in series.iter().enumerate() {
        if j != i {
            acc += s.return_at(t);
        }
    }
    Ok(acc / (k - 1) as f64)
}

/// Leave-one-out baseline: the simple average plus a residual that corrects
/// for reward accrued before `t`,
/// `c = (1/(k−1)) Σ_{j≠i} [ R⁽ʲ⁾_t + Σ_{t'<t} (r⁽ʲ⁾_{t'} − r⁽ⁱ⁾_{t'}) ]`.
pub fn loo_baseline(series: &[RewardSeries], i: usize, t: usize) -> Result<f64> {
    check_pair(series, i, t)?;
    let k = series.len();
    let mut acc = 0.0;
    for (j, s) in series.iter().enumerate() {
        if j == i {
            continue;
        }
        let mut v = s.return_at(t);
        for tp in 0..t - 1 {
            v += s.r[tp] - series[i].r[tp];
        }
        acc += v;
    }
    Ok(acc / (k - 1) as f64)
}

/// Temporal leave-one-out baseline: sums each other sample's rewards after
/// the step where it matches sample `i`'s emission count at `t − 1`,
/// `c = (1/(k−1)) Σ_{j≠i} Σ_{t' > e⁽ʲ⁾_{t−1}} r⁽ʲ⁾_{t'}`.
pub fn temporal_loo_baseline(
    series: &[RewardSeries],
    o_tracks: &[&[usize]],
    i: usize,
    t: usize,
) -> Result<f64> {
    check_pair(series, i, t)?;
    if o_tracks.len() != series.len() {
        return Err(Error::validation("o_tracks and series length mismatch"));
    }
    let k = series.len();
    let mut acc = 0.0;
    for (j, s) in series.iter().enumerate() {
        if j == i {
            continue;
        }
        let e = emission_matching_time(o_tracks[i], o_tracks[j], t - 1)?;
        // Sum of r⁽ʲ⁾ over t' > e equals the return at e + 1.
        acc += s.return_at(e + 1);
    }
    Ok(acc / (k - 1) as f64)
}

/// Linear state-value regressor `c(features) = w·φ + b`, with parameters in
/// slots under the `c.` prefix. Features must be prefix-measurable. Trained
/// by squared error against the (stop-gradient) observed return.
#[derive(Debug, Clone)]
pub struct ParametricBaseline {
    pub w: SlotId,
    pub b: SlotId,
    pub dim: usize,
}

impl ParametricBaseline {
    /// Starts at zero weights so the initial prediction is exactly 0.
    pub fn init(store: &mut ParamStore, dim: usize, _rng: &mut Prng) -> Result<Self> {
        let w = store.insert("c.w", Tensor::zeros(vec![dim]))?;
        let b = store.insert("c.b", Tensor::zeros(vec![1]))?;
        Ok(ParametricBaseline { w, b, dim })
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::validation(format!(
                "baseline features have length {}, expected {}",
                features.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Detached prediction used as a signal offset.
    pub fn predict_value(&self, store: &ParamStore, features: &[f64]) -> Result<f64> {
        self.check(features)?;
        let w = store.value(self.w).data();
        let b = store.value(self.b).data()[0];
        let mut acc = b;
        for (wv, f) in w.iter().zip(features) {
            acc += wv * f;
        }
        Ok(acc)
    }

    /// Prediction as a tape node (for the regression update).
    pub fn predict_node(&self, tape: &mut Tape, features: &[f64]) -> Result<NodeId> {
        self.check(features)?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let f = tape.constant(Tensor::vector(features.to_vec()));
        let dot = tape.dot(w, f);
        let bias = tape.pick(b, 0);
        Ok(tape.add(dot, bias))
    }

    /// `−½ (c − R)²` as a node: ascending the surrogate descends the squared
    /// error, so the regressor trains alongside the main objective. The
    /// target enters as a constant (stop-gradient).
    pub fn regression_term(&self, tape: &mut Tape, features: &[f64], target: f64) -> Result<NodeId> {
        let pred = self.predict_node(tape, features)?;
        let shifted = tape.shift(pred, -target);
        let sq = tape.mul(shifted, shifted);
        Ok(tape.scale(sq, -0.5))
    }
}

/// Running mean/variance normalization of the learning signal, per the NVIL
/// recipe. Signals are centered by the pre-update running mean and divided by
/// `max(1, √(v + ε))`; statistics fold in observed signals with exponential
/// decay. Normalization rescales the gradient, so unbiasedness checks run
/// with it disabled.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignalNormalizer {
    pub mean: f64,
    pub var: f64,
    pub initialized: bool,
    pub decay: f64,
    pub eps: f64,
}

impl Default for SignalNormalizer {
    fn default() -> Self {
        SignalNormalizer {
            mean: 0.0,
            var: 0.0,
            initialized: false,
            decay: 0.95,
            eps: 1e-6,
        }
    }
}

impl SignalNormalizer {
    /// Normalizes with statistics that exclude the current signals, so the
    /// centering stays independent of the draw being scored.
    pub fn normalize(&self, signal: f64) -> f64 {
        if !self.initialized {
            return signal;
        }
        (signal - self.mean) / 1.0f64.max((self.var + self.eps).sqrt())
    }

    /// Folds one batch of raw signals into the running statistics.
    pub fn update(&mut self, signals: &[f64]) {
        if signals.is_empty() {
            return;
        }
        let mean: f64 = signals.iter().sum::<f64>() / signals.len() as f64;
        let var: f64 = signals.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / signals.len() as f64;
        if !self.initialized {
            self.mean = mean;
            self.var = var;
            self.initialized = true;
        } else {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * mean;
            self.var = self.decay * self.var + (1.0 - self.decay) * var;
        }
    }
}
