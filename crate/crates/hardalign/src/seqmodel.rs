//! The generative model `p(y, b | x)`: a stacked unidirectional LSTM that at
//! every step emits a Bernoulli emit/consume logit and a token distribution.
//!
//! The joint factorizes step by step,
//! `p(y, b | x) = Π_t p(b_t | s_t) · p(y_{O(t)} | s_t, b_t)^{b_t}`,
//! where the state `s_t` summarizes the decisions, frames, and tokens seen so
//! far. The LSTM input at step `t` is the concatenation of the current frame
//! `x_{min(I(t), m)}`, a one-hot of the previous decision, and a one-hot of
//! the last emitted token (or a dedicated Null symbol before any emission).
//! The frame index advances only after a consume decision — the dwell rule —
//! and saturates at `m`.
//!
//! Sampling under `Forced` mode overrides decisions with [`forcing_mask`] so
//! every draw is a complete path with exactly `n` emissions; overridden steps
//! have probability 1 under the sampling law and contribute no score terms.

use crate::alignment::{forcing_mask, AlignmentPath, Forcing};
use crate::diffcore::rng::Prng;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::{sigmoid, Linear, LstmStack, LstmState, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl ModelConfig {
    /// frame ⊕ one-hot(prevDecision) ⊕ one-hot(lastEmittedToken or Null).
    pub fn input_size(&self) -> usize {
        self.feature_dim + 2 + self.vocab + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.vocab < 2 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::validation(format!(
                "model config out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Distribution produced at one step, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct StepDistribution {
    /// Scalar Bernoulli logit for `b_t` (1 = emit).
    pub emit_logit: NodeId,
    /// Raw token logits, length `V`.
    pub token_logits: NodeId,
}

impl StepDistribution {
    pub fn decision_log_prob(&self, tape: &mut Tape, emit: bool) -> NodeId {
        tape.bernoulli_log_prob(self.emit_logit, emit)
    }

    pub fn token_log_prob(&self, tape: &mut Tape, token: usize) -> NodeId {
        let lp = tape.log_softmax(self.token_logits);
        tape.pick(lp, token)
    }

    pub fn emit_prob(&self, tape: &Tape) -> f64 {
        sigmoid(tape.scalar(self.emit_logit))
    }

    /// Highest-logit token, lowest index on ties.
    pub fn argmax_token(&self, tape: &Tape) -> usize {
        let data = tape.value(self.token_logits).data();
        let mut best = 0;
        for (i, v) in data.iter().enumerate() {
            if *v > data[best] {
                best = i;
            }
        }
        best
    }
}

/// Sufficient statistics of `s_t` threaded through a rollout.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub lstm: Vec<LstmState>,
    /// Frame index in `1..=m`; 0 before the first step.
    pub current_frame: usize,
    pub consumed: usize,
    pub emitted: usize,
    pub last_token: Option<usize>,
}

impl ModelState {
    /// Records the decision taken at the step that produced this state. An
    /// emission without a token (possible only in unconstrained sampling past
    /// the end of `y`) keeps the previous token feedback.
    pub fn observe(&mut self, emit: bool, token: Option<usize>) {
        if emit {
            self.emitted += 1;
            if token.is_some() {
                self.last_token = token;
            }
        } else {
            self.consumed += 1;
        }
    }
}

/// Tape nodes scoring one complete path under the model.
#[derive(Debug, Clone)]
pub struct PathScore {
    /// Per-step joint terms `log p(b_t|s_t) + b_t · log p(y_{O(t)}|s_t)`.
    pub steps: Vec<NodeId>,
    /// Per-step decision terms `log p(b_t|s_t)` alone.
    pub decisions: Vec<NodeId>,
    /// Token term `log p(y_{O(t)}|s_t)` at emit steps, `None` at consumes.
    pub tokens: Vec<Option<NodeId>>,
    /// `Σ_t steps = log p(y, b | x)`.
    pub total: NodeId,
}

/// One sampled trajectory with the tape nodes needed by the estimators.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub decisions: Vec<bool>,
    /// Which steps were overridden by the forcing mask.
    pub forced: Vec<bool>,
    /// Per-step joint terms, as in [`PathScore::steps`].
    pub step_terms: Vec<NodeId>,
    /// Per-step `log p(b_t|s_t)` nodes for every step.
    pub decision_log_probs: Vec<NodeId>,
    /// Token term node at emit steps with a ground-truth token.
    pub token_nodes: Vec<Option<NodeId>>,
    /// Top-layer hidden state entering each decision, detached (values only);
    /// a prefix-measurable feature vector for parametric baselines.
    pub top_hidden: Vec<Vec<f64>>,
    /// Value of `log p̃(b|x)` under the sampling law (free steps only).
    pub sampling_log_prob: f64,
    m: usize,
    n: usize,
}

impl Rollout {
    pub fn alignment(&self) -> Result<AlignmentPath> {
        AlignmentPath::new(self.decisions.clone(), self.m, self.n)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Value-level result of [`SeqModel::sample_path`].
#[derive(Debug, Clone)]
pub struct SampledPath {
    pub decisions: Vec<bool>,
    /// Per-step log-probability under the sampling law; forced steps are 0.
    pub step_log_probs: Vec<f64>,
    pub forced: Vec<bool>,
    m: usize,
    n: usize,
}

impl SampledPath {
    pub(crate) fn from_parts(
        decisions: Vec<bool>,
        step_log_probs: Vec<f64>,
        forced: Vec<bool>,
        m: usize,
        n: usize,
    ) -> Result<Self> {
        AlignmentPath::new(decisions.clone(), m, n)?;
        Ok(SampledPath {
            decisions,
            step_log_probs,
            forced,
            m,
            n,
        })
    }

    pub fn total_log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    pub fn into_alignment(self) -> Result<AlignmentPath> {
        AlignmentPath::new(self.decisions, self.m, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Apply the forcing mask so every sample is a complete path.
    Forced,
    /// Sample every step from the model; the draw may be incomplete.
    Unconstrained,
}

#[derive(Debug, Clone)]
pub struct SeqModel {
    pub config: ModelConfig,
    stack: LstmStack,
    head: Linear,
}

impl SeqModel {
    /// Creates parameter slots under the `p.` prefix.
    pub fn init(store: &mut ParamStore, config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let stack = LstmStack::init(
            store,
            "p.lstm",
            config.input_size(),
            config.hidden,
            config.layers,
            rng,
        )?;
        let head = Linear::init(store, "p.head", config.hidden, 1 + config.vocab, rng)?;
        Ok(SeqModel {
            config,
            stack,
            head,
        })
    }

    pub fn init_state(&self, tape: &mut Tape) -> ModelState {
        ModelState {
            lstm: self.stack.zero_state(tape),
            current_frame: 0,
            consumed: 0,
            emitted: 0,
            last_token: None,
        }
    }

    /// One LSTM step. The returned state has `current_frame` advanced iff
    /// `prev_decision` was a consume, saturating at `m`; counters are updated
    /// separately via [`ModelState::observe`] once this step's decision is
    /// known. The first step passes `prev_decision = false`, which moves the
    /// frame index from its initial 0 to `I(1) = 1`.
    pub fn step(
        &self,
        tape: &mut Tape,
        frames: &[Vec<f64>],
        state: &ModelState,
        prev_decision: bool,
    ) -> Result<(StepDistribution, ModelState)> {
        let m = frames.len();
        if m == 0 {
            return Err(Error::validation("step requires at least one frame"));
        }
        let frame_idx = if prev_decision {
            state.current_frame
        } else {
            (state.current_frame + 1).min(m)
        };
        if frame_idx == 0 {
            return Err(Error::validation(
                "first step must pass prev_decision = false",
            ));
        }
        let frame = &frames[frame_idx - 1];
        if frame.len() != self.config.feature_dim {
            return Err(Error::validation(format!(
                "frame has {} features, config expects {}",
                frame.len(),
                self.config.feature_dim
            )));
        }

        let v = self.config.vocab;
        let mut input = Vec::with_capacity(self.config.input_size());
        input.extend_from_slice(frame);
        input.extend_from_slice(if prev_decision {
            &[0.0, 1.0]
        } else {
            &[1.0, 0.0]
        });
        let mut token_onehot = vec![0.0; v + 1];
        token_onehot[state.last_token.unwrap_or(v)] = 1.0;
        input.extend_from_slice(&token_onehot);

        let x = tape.constant(Tensor::vector(input));
        let (top, lstm) = self.stack.step(tape, x, &state.lstm);
        let out = self.head.apply(tape, top);
        let emit_logit = tape.pick(out, 0);
        let token_logits = tape.slice(out, 1, v);

        Ok((
            StepDistribution {
                emit_logit,
                token_logits,
            },
            ModelState {
                lstm,
                current_frame: frame_idx,
                consumed: state.consumed,
                emitted: state.emitted,
                last_token: state.last_token,
            },
        ))
    }

    fn check_pair(&self, frames: &[Vec<f64>], y: &[usize]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::validation("empty frame sequence"));
        }
        if let Some(&t) = y.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::validation(format!(
                "token id {t} outside vocabulary of size {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Scores a given complete path, building all per-step nodes on the tape.
    pub fn score_path(
        &self,
        tape: &mut Tape,
        frames: &[Vec<f64>],
        y: &[usize],
        path: &AlignmentPath,
    ) -> Result<PathScore> {
        self.check_pair(frames, y)?;
        if path.m() != frames.len() || path.n() != y.len() {
            return Err(Error::validation(format!(
                "path shaped for m={}, n={} but got m={}, n={}",
                path.m(),
                path.n(),
                frames.len(),
                y.len()
            )));
        }
        let mut state = self.init_state(tape);
        let mut steps = Vec::with_capacity(path.len());
        let mut decisions = Vec::with_capacity(path.len());
        let mut tokens = Vec::with_capacity(path.len());
        for t in 1..=path.len() {
            let prev = t > 1 && path.emit_at(t - 1);
            let (dist, mut next) = self.step(tape, frames, &state, prev)?;
            let emit = path.emit_at(t);
            let dec = dist.decision_log_prob(tape, emit);
            decisions.push(dec);
            if emit {
                let token = y[state.emitted];
                let tok = dist.token_log_prob(tape, token);
                tokens.push(Some(tok));
                steps.push(tape.sum(&[dec, tok]));
                next.observe(true, Some(token));
            } else {
                tokens.push(None);
                steps.push(dec);
                next.observe(false, None);
            }
            state = next;
        }
        let total = tape.sum(&steps);
        Ok(PathScore {
            steps,
            decisions,
            tokens,
            total,
        })
    }

    /// `log p(y, b | x)` as a single differentiable scalar node.
    pub fn joint_log_prob(
        &self,
        tape: &mut Tape,
        frames: &[Vec<f64>],
        y: &[usize],
        path: &AlignmentPath,
    ) -> Result<NodeId> {
        Ok(self.score_path(tape, frames, y, path)?.total)
    }

    /// Ancestral sampling of the decision sequence on the tape, with
    /// ground-truth token feedback. Runs exactly `m + n` steps.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        frames: &[Vec<f64>],
        y: &[usize],
        rng: &mut Prng,
        mode: SampleMode,
    ) -> Result<Rollout> {
        self.check_pair(frames, y)?;
        let (m, n) = (frames.len(), y.len());
        let total = m + n;
        let mut state = self.init_state(tape);
        let mut decisions = Vec::with_capacity(total);
        let mut forced = Vec::with_capacity(total);
        let mut step_terms = Vec::with_capacity(total);
        let mut decision_log_probs = Vec::with_capacity(total);
        let mut token_nodes = Vec::with_capacity(total);
        let mut top_hidden = Vec::with_capacity(total);
        let mut sampling_log_prob = 0.0;

        for t in 1..=total {
            let prev = t > 1 && decisions[t - 2];
            let (dist, mut next) = self.step(tape, frames, &state, prev)?;
            top_hidden.push(tape.value(next.lstm.last().unwrap().h).data().to_vec());
            let constraint = match mode {
                SampleMode::Forced => forcing_mask(t, state.emitted, state.consumed, m, n)?,
                SampleMode::Unconstrained => Forcing::Free,
            };
            let (emit, was_forced) = match constraint {
                Forcing::ForceEmit => (true, true),
                Forcing::ForceConsume => (false, true),
                Forcing::Free => (rng.bernoulli(dist.emit_prob(tape)), false),
            };
            let dec = dist.decision_log_prob(tape, emit);
            if !was_forced {
                sampling_log_prob += tape.scalar(dec);
            }
            let term = if emit {
                if state.emitted < n {
                    let token = y[state.emitted];
                    let tok = dist.token_log_prob(tape, token);
                    next.observe(true, Some(token));
                    token_nodes.push(Some(tok));
                    tape.sum(&[dec, tok])
                } else {
                    next.observe(true, None);
                    token_nodes.push(None);
                    dec
                }
            } else {
                next.observe(false, None);
                token_nodes.push(None);
                dec
            };
            decisions.push(emit);
            forced.push(was_forced);
            decision_log_probs.push(dec);
            step_terms.push(term);
            state = next;
        }

        Ok(Rollout {
            decisions,
            forced,
            step_terms,
            decision_log_probs,
            token_nodes,
            top_hidden,
            sampling_log_prob,
            m,
            n,
        })
    }

    /// Samples a path without keeping the tape; forced steps record sampling
    /// probability 1 (log-probability 0).
    pub fn sample_path(
        &self,
        store: &ParamStore,
        frames: &[Vec<f64>],
        y: &[usize],
        rng: &mut Prng,
        mode: SampleMode,
    ) -> Result<SampledPath> {
        let mut tape = Tape::new(store);
        let r = self.rollout(&mut tape, frames, y, rng, mode)?;
        let step_log_probs = r
            .decision_log_probs
            .iter()
            .zip(&r.forced)
            .map(|(&node, &f)| if f { 0.0 } else { tape.scalar(node) })
            .collect();
        Ok(SampledPath {
            decisions: r.decisions,
            step_log_probs,
            forced: r.forced,
            m: r.m,
            n: r.n,
        })
    }

    /// Deterministic decode: emit whenever the emit probability exceeds 1/2,
    /// feeding back the argmax token; stops after the `m`-th consume or
    /// `max_tokens` emissions.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        frames: &[Vec<f64>],
        max_tokens: usize,
    ) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_trace(store, frames, max_tokens)?.0)
    }

    /// [`greedy_decode`](Self::greedy_decode) plus the emit/consume decision
    /// sequence actually taken, for emission-position dumps.
    pub fn greedy_decode_trace(
        &self,
        store: &ParamStore,
        frames: &[Vec<f64>],
        max_tokens: usize,
    ) -> Result<(Vec<usize>, Vec<bool>)> {
        if max_tokens == 0 {
            return Err(Error::validation("greedy_decode requires max_tokens >= 1"));
        }
        if frames.is_empty() {
            return Err(Error::validation("empty frame sequence"));
        }
        let m = frames.len();
        let mut tape = Tape::new(store);
        let mut state = self.init_state(&mut tape);
        let mut out = Vec::new();
        let mut decisions = Vec::new();
        let mut prev = false;
        while state.consumed < m && out.len() < max_tokens {
            let (dist, mut next) = self.step(&mut tape, frames, &state, prev)?;
            let emit = dist.emit_prob(&tape) > 0.5;
            if emit {
                let token = dist.argmax_token(&tape);
                out.push(token);
                next.observe(true, Some(token));
            } else {
                next.observe(false, None);
            }
            decisions.push(emit);
            prev = emit;
            state = next;
        }
        Ok((out, decisions))
    }
}
