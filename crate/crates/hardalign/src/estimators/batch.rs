//! Trajectory containers shared by every estimator: per-step rewards and
//! returns, sampled-path bookkeeping, and emission-matching times.

use crate::diffcore::tape::NodeId;
use crate::error::{Error, Result};

/// Instantaneous rewards and returns along one trajectory.
///
/// The instantaneous reward is the token log-probability at emit steps and 0
/// at consume steps — a consume assigns no probability to the ground truth.
/// The return `R_t = Σ_{t' ≥ t} r_{t'}` is the suffix sum.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSeries {
    pub r: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RewardSeries {
    pub fn from_rewards(r: Vec<f64>) -> Self {
        let mut returns = vec![0.0; r.len()];
        let mut acc = 0.0;
        for t in (0..r.len()).rev() {
            acc += r[t];
            returns[t] = acc;
        }
        RewardSeries { r, returns }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Total reward `R_1` (0 for an empty series).
    pub fn total(&self) -> f64 {
        self.returns.first().copied().unwrap_or(0.0)
    }

    /// `R_t` for 1-indexed `t`; `t > T` reads 0 (empty suffix).
    pub fn return_at(&self, t: usize) -> f64 {
        if t > self.len() {
            0.0
        } else {
            self.returns[t - 1]
        }
    }
}

/// One sampled trajectory, holding both detached values and the tape nodes
/// the estimators differentiate through.
///
/// `score_nodes` are the sampling-law decision log-probs — under the model
/// for REINFORCE, under the posterior for the variational estimators — and
/// are `None` at forced steps, which have probability 1 and thus no score
/// term. `joint_node` is the full model joint `log p(y, b | x)` including
/// forced decisions.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub decisions: Vec<bool>,
    pub forced: Vec<bool>,
    /// `O(t)` for `t = 1..T`.
    pub o_track: Vec<usize>,
    pub rewards: RewardSeries,
    pub token_nodes: Vec<Option<NodeId>>,
    pub score_nodes: Vec<Option<NodeId>>,
    pub joint_node: NodeId,
    pub log_joint: f64,
    /// Log-probability of the path under its sampling law (free steps only).
    pub log_sampling: f64,
    /// Prefix-measurable feature vector per step for parametric baselines.
    pub features: Vec<Vec<f64>>,
}

impl Trajectory {
    /// `log w = log p(y, b | x) − log q(b | x, y)`.
    pub fn log_weight(&self) -> f64 {
        self.log_joint - self.log_sampling
    }

    /// `O(t)` with `O(0) = 0`.
    pub fn o_at(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            self.o_track[t - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub m: usize,
    pub n: usize,
}

impl TrajectoryBatch {
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn steps(&self) -> usize {
        self.m + self.n
    }

    /// First step at which sample `j` has emitted at least as many tokens as
    /// sample `i` has at step `t`; 0 when `O⁽ⁱ⁾(t) = 0`. Both paths are
    /// complete, so the time always exists for `t ≤ T`.
    pub fn emission_matching_time(&self, i: usize, j: usize, t: usize) -> Result<usize> {
        if i == j {
            return Err(Error::validation("emission_matching_time requires i != j"));
        }
        emission_matching_time(
            &self.trajectories[i].o_track,
            &self.trajectories[j].o_track,
            t,
        )
    }

    pub fn reward_series(&self) -> Vec<&RewardSeries> {
        self.trajectories.iter().map(|t| &t.rewards).collect()
    }
}

/// Builds the reward series from per-step token log-probabilities (`None` at
/// consume steps).
pub fn rewards_and_returns(token_log_probs: &[Option<f64>]) -> RewardSeries {
    RewardSeries::from_rewards(
        token_log_probs
            .iter()
            .map(|v| v.unwrap_or(0.0))
            .collect(),
    )
}

/// [`TrajectoryBatch::emission_matching_time`] over raw `O` tracks.
pub fn emission_matching_time(o_i: &[usize], o_j: &[usize], t: usize) -> Result<usize> {
    let target = if t == 0 { 0 } else { o_i[t - 1] };
    if target == 0 {
        return Ok(0);
    }
    for (idx, &o) in o_j.iter().enumerate() {
        if o >= target {
            return Ok(idx + 1);
        }
    }
    Err(Error::validation(format!(
        "sample never reaches {target} emissions; incomplete path"
    )))
}
