//! The three gradient estimators.
//!
//! Each returns a single-draw estimate of its objective's gradient:
//!
//! * REINFORCE climbs `E_p̃[R]`, the expected total token reward under the
//!   forced model law.
//! * NVIL climbs the single-sample bound `E_q[log p − log q]`.
//! * VIMCO climbs the k-sample bound `E[log (1/k) Σ w_i]`.
//!
//! Gradients are produced by building a surrogate scalar whose tape
//! derivative is the estimator: pathwise terms enter as live nodes, score
//! terms as `Σ sg(signal) · ∇log(prob)` via stop-gradient weighted sums.
//! Forced steps have sampling probability 1 and never contribute score
//! terms. Objective gradients never touch `c.*` slots; the parametric
//! baseline's regression gradient is returned separately.

use crate::diffcore::math::logsumexp;
use crate::diffcore::rng::Prng;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::estimators::baselines::{
    loo_baseline, simple_average_baseline, temporal_loo_baseline, BaselineKind, BaselineSpec,
    ParametricBaseline, SignalNormalizer,
};
use crate::estimators::batch::{rewards_and_returns, Trajectory, TrajectoryBatch};
use crate::posterior::Posterior;
use crate::seqmodel::{Rollout, SampleMode, SeqModel};
use crate::alignment::PositionTracks;

/// One estimator draw: objective gradient, optional split-out pieces, and
/// the objective estimate itself.
#[derive(Debug)]
pub struct EstimatorOutput {
    /// Gradient estimate of the objective w.r.t. model (and posterior)
    /// parameters.
    pub grads: Gradients,
    /// Regression gradient for the parametric baseline's `c.*` slots, when
    /// that baseline is in use.
    pub baseline_grads: Option<Gradients>,
    /// Gradient of the score term alone, when requested; used by the
    /// variance reports.
    pub score_grads: Option<Gradients>,
    /// Objective estimate: mean total reward for REINFORCE, the bound sample
    /// for NVIL/VIMCO.
    pub bound: f64,
    pub diagnostics: EstimatorDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct EstimatorDiagnostics {
    pub k: usize,
    /// Centered (and, for NVIL, normalized) score coefficients per sample,
    /// one entry per free step.
    pub signals: Vec<Vec<f64>>,
    /// VIMCO's normalized importance weights `w̃`; empty for the others.
    pub weights: Vec<f64>,
    /// NVIL's pre-normalization signals, flat over samples and steps, so a
    /// batch driver can fold them into a shared normalizer in a fixed order
    /// after parallel evaluation. Empty for the other estimators.
    pub raw_signals: Vec<f64>,
}

/// Assembles REINFORCE trajectories from model rollouts: the sampling law is
/// the forced model itself, so score nodes are the model's own free-step
/// decision terms. Features are the shared prefix scalars plus the top
/// hidden state entering the step.
pub fn batch_from_rollouts(
    tape: &mut Tape,
    rollouts: Vec<Rollout>,
) -> Result<TrajectoryBatch> {
    if rollouts.is_empty() {
        return Err(Error::validation("batch requires at least one rollout"));
    }
    let (m, n) = (rollouts[0].m(), rollouts[0].n());
    let total = m + n;
    let mut trajectories = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        if r.m() != m || r.n() != n {
            return Err(Error::validation("rollouts mix instance shapes"));
        }
        let tracks = PositionTracks::from_decisions(&r.decisions, m);
        let mut features = Vec::with_capacity(total);
        for t in 1..=total {
            let mut feat = vec![
                1.0,
                t as f64 / total as f64,
                if t > 1 { tracks.o[t - 2] } else { 0 } as f64 / n.max(1) as f64,
                tracks.iclip[t - 1] as f64 / m as f64,
            ];
            feat.extend_from_slice(&r.top_hidden[t - 1]);
            features.push(feat);
        }
        let score_nodes = r
            .decision_log_probs
            .iter()
            .zip(&r.forced)
            .map(|(&d, &f)| if f { None } else { Some(d) })
            .collect();
        let token_values: Vec<Option<f64>> = r
            .token_nodes
            .iter()
            .map(|t| t.map(|node| tape.scalar(node)))
            .collect();
        let joint_node = tape.sum(&r.step_terms);
        trajectories.push(Trajectory {
            decisions: r.decisions,
            forced: r.forced,
            o_track: tracks.o,
            rewards: rewards_and_returns(&token_values),
            token_nodes: r.token_nodes,
            score_nodes,
            joint_node,
            log_joint: tape.scalar(joint_node),
            log_sampling: r.sampling_log_prob,
            features,
        });
    }
    Ok(TrajectoryBatch {
        trajectories,
        m,
        n,
    })
}

/// Per-step baseline values `c(i, t)` for `t = 1..T`. `GeometricMean` is
/// handled inside the VIMCO estimator and rejected here.
fn baseline_values(
    spec: &BaselineSpec,
    parametric: Option<&ParametricBaseline>,
    store: &ParamStore,
    batch: &TrajectoryBatch,
    i: usize,
) -> Result<Vec<f64>> {
    let total = batch.steps();
    let series = batch.reward_series();
    let series: Vec<_> = series.into_iter().cloned().collect();
    match spec.kind {
        BaselineKind::None => Ok(vec![0.0; total]),
        BaselineKind::Constant => Ok(vec![spec.constant; total]),
        BaselineKind::Parametric => {
            let pb = parametric.ok_or_else(|| {
                Error::validation("parametric baseline requested without parameters")
            })?;
            batch.trajectories[i]
                .features
                .iter()
                .map(|f| pb.predict_value(store, f))
                .collect()
        }
        BaselineKind::SimpleAverage => (1..=total)
            .map(|t| simple_average_baseline(&series, i, t))
            .collect(),
        BaselineKind::Loo => (1..=total).map(|t| loo_baseline(&series, i, t)).collect(),
        BaselineKind::TemporalLoo => {
            let tracks: Vec<&[usize]> = batch
                .trajectories
                .iter()
                .map(|tr| tr.o_track.as_slice())
                .collect();
            (1..=total)
                .map(|t| temporal_loo_baseline(&series, &tracks, i, t))
                .collect()
        }
        BaselineKind::GeometricMean => Err(Error::validation(
            "geometric-mean baseline applies only to the multi-sample bound",
        )),
    }
}

/// Free-step score nodes of one trajectory together with the matching
/// per-step coefficient values.
fn score_term(
    tape: &mut Tape,
    trajectory: &Trajectory,
    coefficients: &[f64],
) -> Option<NodeId> {
    let mut nodes = Vec::new();
    let mut coeffs = Vec::new();
    for (t, node) in trajectory.score_nodes.iter().enumerate() {
        if let Some(node) = node {
            nodes.push(*node);
            coeffs.push(coefficients[t]);
        }
    }
    if nodes.is_empty() {
        None
    } else {
        Some(tape.weighted_sum(&nodes, &coeffs))
    }
}

fn collect_signals(trajectory: &Trajectory, coefficients: &[f64]) -> Vec<f64> {
    trajectory
        .score_nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_some())
        .map(|(t, _)| coefficients[t])
        .collect()
}

/// Regression surrogate for the parametric baseline over the free steps of
/// the batch: per-step targets enter stop-gradient, so only `c.*` slots move.
fn parametric_regression(
    tape: &mut Tape,
    pb: &ParametricBaseline,
    batch: &TrajectoryBatch,
    targets: &[Vec<f64>],
) -> Result<Option<Gradients>> {
    let mut terms = Vec::new();
    for (tr, tr_targets) in batch.trajectories.iter().zip(targets) {
        for (t, node) in tr.score_nodes.iter().enumerate() {
            if node.is_some() {
                terms.push(pb.regression_term(tape, &tr.features[t], tr_targets[t])?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let root = tape.sum(&terms);
    let scaled = tape.scale(root, 1.0 / batch.k() as f64);
    Ok(Some(tape.backward(scaled)))
}

fn check_common(k: usize, baseline: &BaselineSpec) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("estimators require k >= 1"));
    }
    baseline.validate_arity(k)
}

/// REINFORCE estimate of `∇ E_p̃[R]` from `k` forced rollouts: the pathwise
/// token terms plus `Σ_t (R_t − c_t) ∇log p(b_t | s_t)` on free steps,
/// averaged over samples.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_gradient(
    store: &ParamStore,
    model: &SeqModel,
    frames: &[Vec<f64>],
    y: &[usize],
    k: usize,
    baseline: &BaselineSpec,
    parametric: Option<&ParametricBaseline>,
    rng: &mut Prng,
    split_score: bool,
) -> Result<EstimatorOutput> {
    check_common(k, baseline)?;
    if baseline.kind == BaselineKind::GeometricMean {
        return Err(Error::validation(
            "geometric-mean baseline applies only to the multi-sample bound",
        ));
    }
    let mut tape = Tape::new(store);
    let rollouts: Result<Vec<Rollout>> = (0..k)
        .map(|_| model.rollout(&mut tape, frames, y, rng, SampleMode::Forced))
        .collect();
    let batch = batch_from_rollouts(&mut tape, rollouts?)?;

    let mut sample_terms = Vec::with_capacity(k);
    let mut score_terms = Vec::new();
    let mut signals = Vec::with_capacity(k);
    let mut bound = 0.0;
    let mut targets = Vec::with_capacity(k);
    for i in 0..k {
        let tr = &batch.trajectories[i];
        let c = baseline_values(baseline, parametric, store, &batch, i)?;
        let coeffs: Vec<f64> = (1..=batch.steps())
            .map(|t| tr.rewards.return_at(t) - c[t - 1])
            .collect();
        signals.push(collect_signals(tr, &coeffs));
        let tokens: Vec<NodeId> = tr.token_nodes.iter().flatten().copied().collect();
        let mut parts = vec![tape.sum(&tokens)];
        if let Some(score) = score_term(&mut tape, tr, &coeffs) {
            parts.push(score);
            score_terms.push(score);
        }
        sample_terms.push(tape.sum(&parts));
        bound += tr.rewards.total() / k as f64;
        targets.push((1..=batch.steps()).map(|t| tr.rewards.return_at(t)).collect());
    }
    let total = tape.sum(&sample_terms);
    let root = tape.scale(total, 1.0 / k as f64);
    let grads = tape.backward(root);
    let score_grads = if split_score && !score_terms.is_empty() {
        let s = tape.sum(&score_terms);
        let s = tape.scale(s, 1.0 / k as f64);
        Some(tape.backward(s))
    } else {
        None
    };
    let baseline_grads = if baseline.kind == BaselineKind::Parametric {
        parametric_regression(&mut tape, parametric.unwrap(), &batch, &targets)?
    } else {
        None
    };
    Ok(EstimatorOutput {
        grads,
        baseline_grads,
        score_grads,
        bound,
        diagnostics: EstimatorDiagnostics {
            k,
            signals,
            weights: Vec::new(),
            raw_signals: Vec::new(),
        },
    })
}

/// NVIL estimate of the single-sample bound gradient from `k` posterior
/// draws: pathwise `∇log p(y,b|x)` plus the score term
/// `Σ_t (ℓ − c_t) ∇log q(b_t | ·)` with `ℓ = log p − log q`, optionally
/// running-mean/std normalized. Draws are averaged.
#[allow(clippy::too_many_arguments)]
pub fn nvil_gradient(
    store: &ParamStore,
    model: &SeqModel,
    posterior: &Posterior,
    frames: &[Vec<f64>],
    y: &[usize],
    k: usize,
    baseline: &BaselineSpec,
    parametric: Option<&ParametricBaseline>,
    mut normalizer: Option<&mut SignalNormalizer>,
    rng: &mut Prng,
    split_score: bool,
) -> Result<EstimatorOutput> {
    check_common(k, baseline)?;
    if baseline.kind == BaselineKind::GeometricMean {
        return Err(Error::validation(
            "geometric-mean baseline applies only to the multi-sample bound",
        ));
    }
    let mut tape = Tape::new(store);
    let batch = posterior.sample_posterior(&mut tape, model, frames, y, rng, k)?;

    let mut sample_terms = Vec::with_capacity(k);
    let mut score_terms = Vec::new();
    let mut signals = Vec::with_capacity(k);
    let mut raw_signals = Vec::new();
    let mut bound = 0.0;
    let mut targets = Vec::with_capacity(k);
    for i in 0..k {
        let tr = &batch.trajectories[i];
        let ell = tr.log_weight();
        bound += ell / k as f64;
        let c = baseline_values(baseline, parametric, store, &batch, i)?;
        let coeffs: Vec<f64> = c
            .iter()
            .map(|&ct| {
                let raw = ell - ct;
                raw_signals.push(raw);
                match normalizer.as_deref() {
                    Some(nz) => nz.normalize(raw),
                    None => raw,
                }
            })
            .collect();
        signals.push(collect_signals(tr, &coeffs));
        let mut parts = vec![tr.joint_node];
        if let Some(score) = score_term(&mut tape, tr, &coeffs) {
            parts.push(score);
            score_terms.push(score);
        }
        sample_terms.push(tape.sum(&parts));
        targets.push(vec![ell; batch.steps()]);
    }
    if let Some(nz) = normalizer.as_deref_mut() {
        nz.update(&raw_signals);
    }
    let total = tape.sum(&sample_terms);
    let root = tape.scale(total, 1.0 / k as f64);
    let grads = tape.backward(root);
    let score_grads = if split_score && !score_terms.is_empty() {
        let s = tape.sum(&score_terms);
        let s = tape.scale(s, 1.0 / k as f64);
        Some(tape.backward(s))
    } else {
        None
    };
    let baseline_grads = if baseline.kind == BaselineKind::Parametric {
        parametric_regression(&mut tape, parametric.unwrap(), &batch, &targets)?
    } else {
        None
    };
    Ok(EstimatorOutput {
        grads,
        baseline_grads,
        score_grads,
        bound,
        diagnostics: EstimatorDiagnostics {
            k,
            signals,
            weights: Vec::new(),
            raw_signals,
        },
    })
}

/// VIMCO estimate of the k-sample bound gradient: backward through
/// `L̂ = log-mean-exp of the log-weights` yields the `w̃`-weighted pathwise
/// terms; the score term gives each sample's free steps the coefficient
/// `L̂ − c`, with `c` from the reward-series baselines or the geometric-mean
/// leave-one-out signal.
#[allow(clippy::too_many_arguments)]
pub fn vimco_gradient(
    store: &ParamStore,
    model: &SeqModel,
    posterior: &Posterior,
    frames: &[Vec<f64>],
    y: &[usize],
    k: usize,
    baseline: &BaselineSpec,
    rng: &mut Prng,
    split_score: bool,
) -> Result<EstimatorOutput> {
    if k < 2 {
        return Err(Error::validation("vimco requires k >= 2"));
    }
    if baseline.kind == BaselineKind::Parametric {
        return Err(Error::validation(
            "parametric baseline is not defined for the multi-sample bound",
        ));
    }
    baseline.validate_arity(k)?;
    let mut tape = Tape::new(store);
    let batch = posterior.sample_posterior(&mut tape, model, frames, y, rng, k)?;

    // Log importance weights as nodes; the free-step q terms are the only
    // live q-dependence.
    let mut lw_nodes = Vec::with_capacity(k);
    let mut lw_values = Vec::with_capacity(k);
    for tr in &batch.trajectories {
        let q_nodes: Vec<NodeId> = tr.score_nodes.iter().flatten().copied().collect();
        let log_q = tape.sum(&q_nodes);
        let lw = tape.sub(tr.joint_node, log_q);
        lw_values.push(tape.scalar(lw));
        lw_nodes.push(lw);
    }
    let lhat_node = tape.log_mean_exp(&lw_nodes);
    let lhat = tape.scalar(lhat_node);
    let lse = logsumexp(&lw_values);
    let weights: Vec<f64> = lw_values.iter().map(|&lw| (lw - lse).exp()).collect();

    let mut score_terms = Vec::new();
    let mut signals = Vec::with_capacity(k);
    for i in 0..k {
        let tr = &batch.trajectories[i];
        let coeffs: Vec<f64> = match baseline.kind {
            BaselineKind::GeometricMean => {
                // Replace sample i's weight by the geometric mean of the
                // others inside the bound.
                let others: Vec<f64> = (0..k).filter(|&j| j != i).map(|j| lw_values[j]).collect();
                let geo = others.iter().sum::<f64>() / (k - 1) as f64;
                let mut terms = others;
                terms.push(geo);
                let lhat_without = logsumexp(&terms) - (k as f64).ln();
                vec![lhat - lhat_without; batch.steps()]
            }
            _ => {
                let c = baseline_values(baseline, None, store, &batch, i)?;
                c.iter().map(|&ct| lhat - ct).collect()
            }
        };
        signals.push(collect_signals(tr, &coeffs));
        if let Some(score) = score_term(&mut tape, tr, &coeffs) {
            score_terms.push(score);
        }
    }
    let mut parts = vec![lhat_node];
    parts.extend_from_slice(&score_terms);
    let root = tape.sum(&parts);
    let grads = tape.backward(root);
    let score_grads = if split_score && !score_terms.is_empty() {
        let s = tape.sum(&score_terms);
        Some(tape.backward(s))
    } else {
        None
    };
    Ok(EstimatorOutput {
        grads,
        baseline_grads: None,
        score_grads,
        bound: lhat,
        diagnostics: EstimatorDiagnostics {
            k,
            signals,
            weights,
            raw_signals: Vec::new(),
        },
    })
}
