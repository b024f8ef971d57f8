//! Approximate posterior `q(b | x, y)` over alignment paths.
//!
//! A bidirectional LSTM encoder reads all frames once; a unidirectional
//! decision LSTM then walks the path, seeing the context vector at the
//! current frame, the previous decision, and the next target token that has
//! not been emitted yet (`Null` once all `n` targets are out). Each step
//! produces a single Bernoulli logit for emit-vs-consume.
//!
//! Sampling applies the same forcing mask as the model, so every draw is a
//! complete path; forced steps have sampling probability 1 and contribute
//! nothing to `log q`.

use crate::alignment::{forcing_mask, AlignmentPath, Forcing, PositionTracks};
use crate::diffcore::lstm::{Linear, LstmCell, LstmStack, LstmState};
use crate::diffcore::math::sigmoid;
use crate::diffcore::rng::Prng;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::estimators::batch::{rewards_and_returns, Trajectory, TrajectoryBatch};
use crate::seqmodel::{SampledPath, SeqModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PosteriorConfig {
    pub feature_dim: usize,
    pub vocab: usize,
    /// Hidden size of each direction of the encoder.
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
}

impl PosteriorConfig {
    /// Small default sized for laptop-scale experiments.
    pub fn desk_scale(feature_dim: usize, vocab: usize) -> Self {
        PosteriorConfig {
            feature_dim,
            vocab,
            enc_hidden: 32,
            enc_layers: 1,
            dec_hidden: 32,
            dec_layers: 1,
        }
    }

    /// The full-size configuration used in the original experiments.
    pub fn full_scale(feature_dim: usize, vocab: usize) -> Self {
        PosteriorConfig {
            feature_dim,
            vocab,
            enc_hidden: 256,
            enc_layers: 4,
            dec_hidden: 256,
            dec_layers: 2,
        }
    }

    /// Input width of the decision LSTM: bidirectional context, previous
    /// decision one-hot, next-target one-hot with a `Null` slot.
    pub fn dec_input_size(&self) -> usize {
        2 * self.enc_hidden + 2 + self.vocab + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.vocab < 2
            || self.enc_hidden == 0
            || self.enc_layers == 0
            || self.dec_hidden == 0
            || self.dec_layers == 0
        {
            return Err(Error::validation(format!(
                "invalid posterior config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-frame context vectors `h'_{1:m}` from the bidirectional stack; each
/// has width `2 × enc_hidden` (forward half first).
#[derive(Debug, Clone)]
pub struct PosteriorEncoding {
    pub ctx: Vec<NodeId>,
}

impl PosteriorEncoding {
    pub fn m(&self) -> usize {
        self.ctx.len()
    }

    /// Context node for 1-based frame index `i`.
    pub fn at(&self, i: usize) -> NodeId {
        self.ctx[i - 1]
    }
}

/// Decision-LSTM state plus the path counters that determine the current
/// frame and the next target.
#[derive(Debug, Clone)]
pub struct QState {
    lstm: Vec<LstmState>,
    pub consumed: usize,
    pub emitted: usize,
}

impl QState {
    pub fn observe(&mut self, emit: bool) {
        if emit {
            self.emitted += 1;
        } else {
            self.consumed += 1;
        }
    }

    /// 1-based clipped frame index `Iclip(t) = min(1 + consumed, m)`.
    pub fn frame(&self, m: usize) -> usize {
        (1 + self.consumed).min(m)
    }
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub config: PosteriorConfig,
    /// Forward/backward cell pairs, one per encoder layer.
    enc: Vec<(LstmCell, LstmCell)>,
    dec: LstmStack,
    head: Linear,
}

impl Posterior {
    /// Creates parameter slots under the `q.` prefix.
    pub fn init(store: &mut ParamStore, config: PosteriorConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let mut enc = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let in_size = if l == 0 {
                config.feature_dim
            } else {
                2 * config.enc_hidden
            };
            let fwd = LstmCell::init(
                store,
                &format!("q.enc.l{l}.fwd"),
                in_size,
                config.enc_hidden,
                rng,
            )?;
            let bwd = LstmCell::init(
                store,
                &format!("q.enc.l{l}.bwd"),
                in_size,
                config.enc_hidden,
                rng,
            )?;
            enc.push((fwd, bwd));
        }
        let dec = LstmStack::init(
            store,
            "q.dec",
            config.dec_input_size(),
            config.dec_hidden,
            config.dec_layers,
            rng,
        )?;
        let head = Linear::init(store, "q.head", config.dec_hidden, 1, rng)?;
        Ok(Posterior {
            config,
            enc,
            dec,
            head,
        })
    }

    /// Runs the bidirectional stack over all frames.
    pub fn encode(&self, tape: &mut Tape, frames: &[Vec<f64>]) -> Result<PosteriorEncoding> {
        let m = frames.len();
        if m == 0 {
            return Err(Error::validation("encode requires at least one frame"));
        }
        for f in frames {
            if f.len() != self.config.feature_dim {
                return Err(Error::validation(format!(
                    "frame has {} features, config expects {}",
                    f.len(),
                    self.config.feature_dim
                )));
            }
        }
        let mut inputs: Vec<NodeId> = frames
            .iter()
            .map(|f| tape.constant(Tensor::vector(f.clone())))
            .collect();
        for (fwd, bwd) in &self.enc {
            let mut fh = Vec::with_capacity(m);
            let mut state = fwd.zero_state(tape);
            for &x in &inputs {
                state = fwd.step(tape, x, state);
                fh.push(state.h);
            }
            let mut bh = vec![None; m];
            let mut state = bwd.zero_state(tape);
            for t in (0..m).rev() {
                state = bwd.step(tape, inputs[t], state);
                bh[t] = Some(state.h);
            }
            inputs = (0..m)
                .map(|t| tape.concat(&[fh[t], bh[t].unwrap()]))
                .collect();
        }
        Ok(PosteriorEncoding { ctx: inputs })
    }

    pub fn init_state(&self, tape: &mut Tape) -> QState {
        QState {
            lstm: self.dec.zero_state(tape),
            consumed: 0,
            emitted: 0,
        }
    }

    /// One decision step: returns the emit logit
    /// `q(b_t = 1 | b_{1:t−1}, x, y)` and the advanced LSTM state. Counters
    /// move separately via [`QState::observe`] once the decision is known.
    pub fn q_step(
        &self,
        tape: &mut Tape,
        encoding: &PosteriorEncoding,
        next_target: Option<usize>,
        state: &QState,
        prev_decision: bool,
    ) -> Result<(NodeId, QState)> {
        if let Some(t) = next_target {
            if t >= self.config.vocab {
                return Err(Error::validation(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.config.vocab
                )));
            }
        }
        let v = self.config.vocab;
        let ctx = encoding.at(state.frame(encoding.m()));
        let mut extra = Vec::with_capacity(2 + v + 1);
        extra.extend_from_slice(if prev_decision {
            &[0.0, 1.0]
        } else {
            &[1.0, 0.0]
        });
        let mut onehot = vec![0.0; v + 1];
        onehot[next_target.unwrap_or(v)] = 1.0;
        extra.extend_from_slice(&onehot);
        let extra = tape.constant(Tensor::vector(extra));
        let input = tape.concat(&[ctx, extra]);
        let (top, lstm) = self.dec.step(tape, input, &state.lstm);
        let out = self.head.apply(tape, top);
        let logit = tape.pick(out, 0);
        Ok((
            logit,
            QState {
                lstm,
                consumed: state.consumed,
                emitted: state.emitted,
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

    /// Draws `k` forced-valid paths from `q` and scores each under the model,
    /// sharing one encoder pass. Every per-step node the estimators need ends
    /// up on the given tape.
    pub fn sample_posterior(
        &self,
        tape: &mut Tape,
        model: &SeqModel,
        frames: &[Vec<f64>],
        y: &[usize],
        rng: &mut Prng,
        k: usize,
    ) -> Result<TrajectoryBatch> {
        self.check_pair(frames, y)?;
        if k == 0 {
            return Err(Error::validation("sample_posterior requires k >= 1"));
        }
        if model.config.feature_dim != self.config.feature_dim
            || model.config.vocab != self.config.vocab
        {
            return Err(Error::validation(
                "model and posterior disagree on feature_dim or vocab",
            ));
        }
        let (m, n) = (frames.len(), y.len());
        let total = m + n;
        let encoding = self.encode(tape, frames)?;

        let mut trajectories = Vec::with_capacity(k);
        for _ in 0..k {
            let mut q_state = self.init_state(tape);
            let mut p_state = model.init_state(tape);
            let mut decisions = Vec::with_capacity(total);
            let mut forced = Vec::with_capacity(total);
            let mut score_nodes = Vec::with_capacity(total);
            let mut token_nodes = Vec::with_capacity(total);
            let mut token_values = Vec::with_capacity(total);
            let mut joint_terms = Vec::with_capacity(2 * total);
            let mut features = Vec::with_capacity(total);
            let mut log_sampling = 0.0;

            for t in 1..=total {
                let prev = t > 1 && decisions[t - 2];
                let next_target = if q_state.emitted < n {
                    Some(y[q_state.emitted])
                } else {
                    None
                };
                let frame = q_state.frame(m);
                let mut feat = vec![
                    1.0,
                    t as f64 / total as f64,
                    q_state.emitted as f64 / n.max(1) as f64,
                    frame as f64 / m as f64,
                ];
                feat.extend_from_slice(tape.value(encoding.at(frame)).data());
                features.push(feat);

                let (logit, mut q_next) =
                    self.q_step(tape, &encoding, next_target, &q_state, prev)?;
                let constraint = forcing_mask(t, q_state.emitted, q_state.consumed, m, n)?;
                let (emit, was_forced) = match constraint {
                    Forcing::ForceEmit => (true, true),
                    Forcing::ForceConsume => (false, true),
                    Forcing::Free => (rng.bernoulli(sigmoid(tape.scalar(logit))), false),
                };
                if was_forced {
                    score_nodes.push(None);
                } else {
                    let node = tape.bernoulli_log_prob(logit, emit);
                    log_sampling += tape.scalar(node);
                    score_nodes.push(Some(node));
                }

                let (dist, mut p_next) = model.step(tape, frames, &p_state, prev)?;
                let dec = dist.decision_log_prob(tape, emit);
                joint_terms.push(dec);
                if emit {
                    let token = y[p_state.emitted];
                    let tok = dist.token_log_prob(tape, token);
                    joint_terms.push(tok);
                    token_nodes.push(Some(tok));
                    token_values.push(Some(tape.scalar(tok)));
                    p_next.observe(true, Some(token));
                } else {
                    token_nodes.push(None);
                    token_values.push(None);
                    p_next.observe(false, None);
                }
                q_next.observe(emit);
                decisions.push(emit);
                forced.push(was_forced);
                q_state = q_next;
                p_state = p_next;
            }

            let joint_node = tape.sum(&joint_terms);
            let tracks = PositionTracks::from_decisions(&decisions, m);
            trajectories.push(Trajectory {
                decisions,
                forced,
                o_track: tracks.o,
                rewards: rewards_and_returns(&token_values),
                token_nodes,
                score_nodes,
                joint_node,
                log_joint: tape.scalar(joint_node),
                log_sampling,
                features,
            });
        }
        Ok(TrajectoryBatch {
            trajectories,
            m,
            n,
        })
    }

    /// Scores a given complete path under the sampling law: the sum of
    /// free-step Bernoulli terms (forced steps contribute probability 1).
    /// The encoding must come from the same tape.
    pub fn replay_log_q(
        &self,
        tape: &mut Tape,
        encoding: &PosteriorEncoding,
        y: &[usize],
        path: &AlignmentPath,
    ) -> Result<NodeId> {
        let m = encoding.m();
        let n = y.len();
        if path.m() != m || path.n() != n {
            return Err(Error::validation(format!(
                "path shaped for m={}, n={} but got m={m}, n={n}",
                path.m(),
                path.n()
            )));
        }
        let mut state = self.init_state(tape);
        let mut terms = Vec::new();
        for t in 1..=path.len() {
            let prev = t > 1 && path.emit_at(t - 1);
            let next_target = if state.emitted < n {
                Some(y[state.emitted])
            } else {
                None
            };
            let (logit, mut next) = self.q_step(tape, encoding, next_target, &state, prev)?;
            let emit = path.emit_at(t);
            if forcing_mask(t, state.emitted, state.consumed, m, n)? == Forcing::Free {
                terms.push(tape.bernoulli_log_prob(logit, emit));
            }
            next.observe(emit);
            state = next;
        }
        Ok(tape.sum(&terms))
    }

    /// Draws one path without keeping the tape; forced steps record
    /// log-probability 0.
    pub fn sample_path(
        &self,
        store: &ParamStore,
        frames: &[Vec<f64>],
        y: &[usize],
        rng: &mut Prng,
    ) -> Result<SampledPath> {
        self.check_pair(frames, y)?;
        let (m, n) = (frames.len(), y.len());
        let mut tape = Tape::new(store);
        let encoding = self.encode(&mut tape, frames)?;
        let mut state = self.init_state(&mut tape);
        let mut decisions = Vec::with_capacity(m + n);
        let mut forced = Vec::with_capacity(m + n);
        let mut step_log_probs = Vec::with_capacity(m + n);
        for t in 1..=m + n {
            let prev = t > 1 && decisions[t - 2];
            let next_target = if state.emitted < n {
                Some(y[state.emitted])
            } else {
                None
            };
            let (logit, mut next) = self.q_step(&mut tape, &encoding, next_target, &state, prev)?;
            let constraint = forcing_mask(t, state.emitted, state.consumed, m, n)?;
            let (emit, was_forced) = match constraint {
                Forcing::ForceEmit => (true, true),
                Forcing::ForceConsume => (false, true),
                Forcing::Free => (rng.bernoulli(sigmoid(tape.scalar(logit))), false),
            };
            if was_forced {
                step_log_probs.push(0.0);
            } else {
                let node = tape.bernoulli_log_prob(logit, emit);
                step_log_probs.push(tape.scalar(node));
            }
            next.observe(emit);
            decisions.push(emit);
            forced.push(was_forced);
            state = next;
        }
        SampledPath::from_parts(decisions, step_log_probs, forced, m, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::enumerate_paths;
    use crate::diffcore::check::finite_difference;
    use crate::diffcore::SlotId;
    use crate::seqmodel::ModelConfig;

    fn frames(m: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Prng::new(seed);
        (0..m)
            .map(|_| (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect()
    }

    fn tiny_config() -> PosteriorConfig {
        PosteriorConfig {
            feature_dim: 2,
            vocab: 4,
            enc_hidden: 4,
            enc_layers: 1,
            dec_hidden: 4,
            dec_layers: 1,
        }
    }

    fn zero_params(store: &mut ParamStore) {
        for i in 0..store.len() {
            for v in store.value_mut(SlotId(i)).data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_encodings_and_logit() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(1);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        zero_params(&mut store);
        let x = frames(3, 2, 7);
        let mut tape = Tape::new(&store);
        let enc = q.encode(&mut tape, &x).unwrap();
        for &c in &enc.ctx {
            assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        }
        let state = q.init_state(&mut tape);
        let (logit, _) = q.q_step(&mut tape, &enc, Some(2), &state, false).unwrap();
        assert_eq!(tape.scalar(logit), 0.0);
    }

    /// With the backward cell's weights copied from the forward cell,
    /// encoding the reversed input swaps the two halves of each context
    /// vector (mirror symmetry of the bidirectional scan).
    #[test]
    fn reversed_input_swaps_encoder_halves() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = Prng::new(2);
        let q = Posterior::init(&mut store, cfg, &mut rng).unwrap();
        for part in ["wx", "wh", "b"] {
            let src = store
                .value_by_name(&format!("q.enc.l0.fwd.{part}"))
                .unwrap()
                .clone();
            let dst = store.slot(&format!("q.enc.l0.bwd.{part}")).unwrap();
            *store.value_mut(dst) = src;
        }
        let x = frames(4, 2, 9);
        let mut rev = x.clone();
        rev.reverse();

        let mut tape = Tape::new(&store);
        let e1 = q.encode(&mut tape, &x).unwrap();
        let e2 = q.encode(&mut tape, &rev).unwrap();
        let h = 4;
        for t in 0..4 {
            let a = tape.value(e1.ctx[t]).data().to_vec();
            let b = tape.value(e2.ctx[3 - t]).data().to_vec();
            for i in 0..h {
                assert!((a[i] - b[h + i]).abs() < 1e-12);
                assert!((a[h + i] - b[i]).abs() < 1e-12);
            }
        }
    }

    fn replay_loss<'a>(
        store: &'a ParamStore,
        q: &Posterior,
        x: &[Vec<f64>],
        y: &[usize],
        paths: &[AlignmentPath],
    ) -> (Tape<'a>, NodeId) {
        let mut tape = Tape::new(store);
        let enc = q.encode(&mut tape, x).unwrap();
        let terms: Vec<NodeId> = paths
            .iter()
            .map(|p| q.replay_log_q(&mut tape, &enc, y, p).unwrap())
            .collect();
        let root = tape.sum(&terms);
        (tape, root)
    }

    #[test]
    fn encoder_gradcheck_width_4() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(3);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        let x = frames(3, 2, 11);
        let y = [1usize, 3];
        let paths: Vec<AlignmentPath> = enumerate_paths(3, 2).unwrap().into_iter().take(3).collect();

        let (tape, root) = replay_loss(&store, &q, &x, &y, &paths);
        let grads = tape.backward(root);
        drop(tape);
        let report = finite_difference(&mut store, &grads, 1e-5, |s| {
            let (tape, root) = replay_loss(s, &q, &x, &y, &paths);
            tape.scalar(root)
        });
        assert!(report.passes(1e-4), "finite differences: {report:?}");
    }

    #[test]
    fn q_is_normalized_over_valid_paths() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(4);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        let x = frames(3, 2, 13);
        let y = [0usize, 2];
        let mut tape = Tape::new(&store);
        let enc = q.encode(&mut tape, &x).unwrap();
        let mut mass = 0.0;
        for p in enumerate_paths(3, 2).unwrap() {
            let node = q.replay_log_q(&mut tape, &enc, &y, &p).unwrap();
            mass += tape.scalar(node).exp();
        }
        assert!((mass - 1.0).abs() < 1e-9, "mass = {mass}");
    }

    #[test]
    fn saturated_q_is_deterministic_with_zero_log_prob() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(5);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        zero_params(&mut store);
        let b = store.slot("q.head.b").unwrap();
        store.value_mut(b).data_mut()[0] = -40.0;

        let x = frames(2, 2, 15);
        let y = [1usize];
        for seed in 0..20 {
            let mut rng = Prng::new(seed);
            let path = q.sample_path(&store, &x, &y, &mut rng).unwrap();
            assert_eq!(path.decisions, vec![false, false, true]);
            assert!(path.total_log_prob().abs() < 1e-12);
            assert_eq!(path.forced, vec![false, false, true]);
        }
    }

    #[test]
    fn sampled_batches_are_always_valid_paths() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(6);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        let model = SeqModel::init(
            &mut store,
            ModelConfig {
                feature_dim: 2,
                vocab: 4,
                hidden: 4,
                layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        let x = frames(3, 2, 17);
        let y = [2usize, 0];
        let mut draws = 0;
        for chunk in 0..10 {
            let mut tape = Tape::new(&store);
            let mut rng = Prng::new(100 + chunk);
            let batch = q
                .sample_posterior(&mut tape, &model, &x, &y, &mut rng, 1000)
                .unwrap();
            assert_eq!(batch.k(), 1000);
            for tr in &batch.trajectories {
                AlignmentPath::new(tr.decisions.clone(), 3, 2).unwrap();
                assert_eq!(*tr.o_track.last().unwrap(), 2);
                draws += 1;
            }
        }
        assert_eq!(draws, 10_000);
    }

    #[test]
    fn empirical_distribution_matches_exact_q() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(7);
        let mut cfg = tiny_config();
        cfg.enc_hidden = 3;
        cfg.dec_hidden = 3;
        let q = Posterior::init(&mut store, cfg, &mut rng).unwrap();
        let x = frames(2, 2, 19);
        let y = [3usize];

        let paths = enumerate_paths(2, 1).unwrap();
        let mut tape = Tape::new(&store);
        let enc = q.encode(&mut tape, &x).unwrap();
        let exact: Vec<f64> = paths
            .iter()
            .map(|p| {
                let node = q.replay_log_q(&mut tape, &enc, &y, p).unwrap();
                tape.scalar(node).exp()
            })
            .collect();
        drop(tape);

        let n_draws = 100_000;
        let mut counts = vec![0usize; paths.len()];
        let mut rng = Prng::new(23);
        for _ in 0..n_draws {
            let s = q.sample_path(&store, &x, &y, &mut rng).unwrap();
            let idx = paths
                .iter()
                .position(|p| (1..=p.len()).map(|t| p.emit_at(t)).collect::<Vec<_>>() == s.decisions)
                .unwrap();
            counts[idx] += 1;
        }
        let mut kl = 0.0;
        for (c, &p) in counts.iter().zip(&exact) {
            let hat = *c as f64 / n_draws as f64;
            if hat > 0.0 {
                kl += hat * (hat / p).ln();
            }
        }
        assert!(kl.abs() < 1e-3, "KL = {kl}, counts {counts:?}, exact {exact:?}");
    }

    /// With both nets at zero weights, every free conditional is 1/2 on both
    /// sides, so the importance weight reduces to the forced decision terms
    /// plus the token terms — the REINFORCE decomposition.
    #[test]
    fn matched_conditionals_recover_reinforce_weights() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(8);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        let model = SeqModel::init(
            &mut store,
            ModelConfig {
                feature_dim: 2,
                vocab: 4,
                hidden: 4,
                layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        zero_params(&mut store);
        let x = frames(2, 2, 21);
        let y = [1usize];
        let mut tape = Tape::new(&store);
        let mut rng = Prng::new(29);
        let batch = q
            .sample_posterior(&mut tape, &model, &x, &y, &mut rng, 64)
            .unwrap();
        for tr in &batch.trajectories {
            let forced_count = tr.forced.iter().filter(|&&f| f).count();
            let free_count = tr.forced.len() - forced_count;
            let expect =
                forced_count as f64 * 0.5f64.ln() + tr.rewards.total();
            assert!((tr.log_weight() - expect).abs() < 1e-9);
            assert!((tr.log_sampling - free_count as f64 * 0.5f64.ln()).abs() < 1e-9);
            assert!((tr.rewards.total() - 0.25f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn features_are_prefix_shaped() {
        let mut store = ParamStore::new();
        let mut rng = Prng::new(9);
        let q = Posterior::init(&mut store, tiny_config(), &mut rng).unwrap();
        let model = SeqModel::init(
            &mut store,
            ModelConfig {
                feature_dim: 2,
                vocab: 4,
                hidden: 4,
                layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        let x = frames(3, 2, 25);
        let y = [2usize, 1];
        let mut tape = Tape::new(&store);
        let mut rng = Prng::new(31);
        let batch = q
            .sample_posterior(&mut tape, &model, &x, &y, &mut rng, 4)
            .unwrap();
        for tr in &batch.trajectories {
            assert_eq!(tr.features.len(), 5);
            for (t, feat) in tr.features.iter().enumerate() {
                // Bias, step fraction, emitted fraction, frame fraction, ctx.
                assert_eq!(feat.len(), 4 + 2 * 4);
                assert_eq!(feat[0], 1.0);
                assert!((feat[1] - (t + 1) as f64 / 5.0).abs() < 1e-12);
                let emitted_before = tr.o_at(t);
                assert!((feat[2] - emitted_before as f64 / 2.0).abs() < 1e-12);
            }
        }
    }
}
