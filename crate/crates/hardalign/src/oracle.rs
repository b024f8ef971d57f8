//! Exact quantities on small instances: the marginal likelihood by lattice
//! recursion, exact bound values, and exact gradients of each estimator's
//! target objective by explicit enumeration.
//!
//! Everything here is a test oracle: correctness over speed, with size
//! guards refusing instances where enumeration is no longer practical.

use crate::alignment::{enumerate_paths, forced_mask, forcing_mask, Forcing};
use crate::diffcore::lstm::LstmState;
use crate::diffcore::math::log_add_exp;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::diffcore::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::posterior::Posterior;
use crate::seqmodel::{ModelState, SeqModel};

/// Largest `m + n` accepted by the marginal computation.
pub const MARGINAL_GUARD: usize = 24;
/// Largest `m + n` accepted by the gradient oracles.
pub const GRADIENT_GUARD: usize = 10;
/// Largest number of path tuples enumerated for the multi-sample bound.
pub const TUPLE_GUARD: usize = 100_000;

/// Forward-lattice diagnostic: `alpha[t][o]` is the accumulated log-mass of
/// all length-`t` decision prefixes that have emitted `o` tokens, scored
/// under the model joint. `alpha[0][0] = 0`; unreachable cells are `−∞`.
#[derive(Debug, Clone)]
pub struct LatticeTable {
    pub alpha: Vec<Vec<f64>>,
}

impl LatticeTable {
    /// `log p(y | x)`: the mass of complete prefixes, `alpha[T][n]`.
    pub fn log_marginal(&self) -> f64 {
        *self.alpha.last().unwrap().last().unwrap()
    }
}

/// Detached prefix state, used to re-inject LSTM values into a fresh tape at
/// every branch so lattice memory stays proportional to the search depth.
#[derive(Debug, Clone)]
struct Snapshot {
    lstm: Vec<(Vec<f64>, Vec<f64>)>,
    current_frame: usize,
    consumed: usize,
    emitted: usize,
    last_token: Option<usize>,
    prev_decision: bool,
    log_prob: f64,
}

fn detach(tape: &Tape, state: &ModelState, prev_decision: bool, log_prob: f64) -> Snapshot {
    Snapshot {
        lstm: state
            .lstm
            .iter()
            .map(|s| {
                (
                    tape.value(s.h).data().to_vec(),
                    tape.value(s.c).data().to_vec(),
                )
            })
            .collect(),
        current_frame: state.current_frame,
        consumed: state.consumed,
        emitted: state.emitted,
        last_token: state.last_token,
        prev_decision,
        log_prob,
    }
}

fn reattach(tape: &mut Tape, snap: &Snapshot) -> ModelState {
    ModelState {
        lstm: snap
            .lstm
            .iter()
            .map(|(h, c)| LstmState {
                h: tape.constant(Tensor::vector(h.clone())),
                c: tape.constant(Tensor::vector(c.clone())),
            })
            .collect(),
        current_frame: snap.current_frame,
        consumed: snap.consumed,
        emitted: snap.emitted,
        last_token: snap.last_token,
    }
}

/// Fills the forward lattice by depth-first walk over the forcing-valid
/// prefix tree, replaying the LSTM along each branch.
pub fn lattice(
    store: &ParamStore,
    model: &SeqModel,
    frames: &[Vec<f64>],
    y: &[usize],
) -> Result<LatticeTable> {
    let (m, n) = (frames.len(), y.len());
    if m == 0 {
        return Err(Error::validation("lattice requires at least one frame"));
    }
    if m + n > MARGINAL_GUARD {
        return Err(Error::size_guard(format!(
            "lattice: m + n = {} exceeds guard {MARGINAL_GUARD}",
            m + n
        )));
    }
    let total = m + n;
    let mut alpha = vec![vec![f64::NEG_INFINITY; n + 1]; total + 1];
    alpha[0][0] = 0.0;

    let root = {
        let mut tape = Tape::new(store);
        let state = model.init_state(&mut tape);
        detach(&tape, &state, false, 0.0)
    };
    let mut stack = vec![(root, 0usize)];
    while let Some((snap, t_done)) = stack.pop() {
        if t_done == total {
            continue;
        }
        let t = t_done + 1;
        let mut tape = Tape::new(store);
        let state = reattach(&mut tape, &snap);
        let (dist, next) = model.step(&mut tape, frames, &state, snap.prev_decision)?;
        let forcing = forcing_mask(t, snap.emitted, snap.consumed, m, n)?;
        for emit in [true, false] {
            match forcing {
                Forcing::ForceEmit if !emit => continue,
                Forcing::ForceConsume if emit => continue,
                _ => {}
            }
            let dec = dist.decision_log_prob(&mut tape, emit);
            let mut log_prob = snap.log_prob + tape.scalar(dec);
            let mut child_state = next.clone();
            if emit {
                let token = y[snap.emitted];
                let tok = dist.token_log_prob(&mut tape, token);
                log_prob += tape.scalar(tok);
                child_state.observe(true, Some(token));
            } else {
                child_state.observe(false, None);
            }
            let o = child_state.emitted;
            alpha[t][o] = log_add_exp(alpha[t][o], log_prob);
            stack.push((detach(&tape, &child_state, emit, log_prob), t));
        }
    }
    Ok(LatticeTable { alpha })
}

/// `log p(y | x)` marginalized over every valid path.
pub fn exact_log_marginal(
    store: &ParamStore,
    model: &SeqModel,
    frames: &[Vec<f64>],
    y: &[usize],
) -> Result<f64> {
    Ok(lattice(store, model, frames, y)?.log_marginal())
}

/// The objective whose exact value or gradient is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `log p(y | x)`.
    LogMarginal,
    /// `E_{p̃}[R]`: expected total token reward under the forced model law —
    /// what REINFORCE climbs.
    ReinforceBound,
    /// `E_q[log p(y,b|x) − log q(b|x,y)]`: the single-sample bound.
    SingleSampleELBO,
    /// `E_{q^k}[log (1/k) Σ_i w_i]`: the k-sample bound.
    MultiSampleBound(usize),
}

impl Objective {
    pub fn needs_posterior(&self) -> bool {
        matches!(
            self,
            Objective::SingleSampleELBO | Objective::MultiSampleBound(_)
        )
    }
}

/// Exact objective value and its exact parameter gradient.
#[derive(Debug)]
pub struct ExactGradient {
    pub value: f64,
    pub grads: Gradients,
}

/// Per-path tape nodes shared by the enumeration objectives.
struct PathNodes {
    /// `log p(y, b | x)`.
    joint: NodeId,
    /// `log p̃(b | x)`: the forced sampling law (free decision terms only).
    sampling: NodeId,
    /// `Σ_t b_t log p(y_{O(t)} | s_t)`.
    reward: NodeId,
    /// `log q(b | x, y)`, present when a posterior is supplied.
    log_q: Option<NodeId>,
}

fn build_path_nodes(
    tape: &mut Tape,
    model: &SeqModel,
    posterior: Option<&Posterior>,
    frames: &[Vec<f64>],
    y: &[usize],
) -> Result<Vec<PathNodes>> {
    let (m, n) = (frames.len(), y.len());
    let encoding = match posterior {
        Some(q) => Some(q.encode(tape, frames)?),
        None => None,
    };
    let mut out = Vec::new();
    for path in enumerate_paths(m, n)? {
        let score = model.score_path(tape, frames, y, &path)?;
        let mask = forced_mask(&path)?;
        let free: Vec<NodeId> = score
            .decisions
            .iter()
            .zip(&mask)
            .filter(|&(_, &f)| !f)
            .map(|(&d, _)| d)
            .collect();
        let sampling = tape.sum(&free);
        let tokens: Vec<NodeId> = score.tokens.iter().flatten().copied().collect();
        let reward = tape.sum(&tokens);
        let log_q = match (posterior, &encoding) {
            (Some(q), Some(enc)) => Some(q.replay_log_q(tape, enc, y, &path)?),
            _ => None,
        };
        out.push(PathNodes {
            joint: score.total,
            sampling,
            reward,
            log_q,
        });
    }
    Ok(out)
}

fn objective_root(
    tape: &mut Tape,
    paths: &[PathNodes],
    objective: Objective,
) -> Result<NodeId> {
    match objective {
        Objective::LogMarginal => {
            let joints: Vec<NodeId> = paths.iter().map(|p| p.joint).collect();
            Ok(tape.log_sum_exp(&joints))
        }
        Objective::ReinforceBound => {
            // Σ_b p̃(b) R(b), with the probability itself differentiable so
            // the gradient carries the score-function term exactly.
            let terms: Vec<NodeId> = paths
                .iter()
                .map(|p| {
                    let w = tape.exp(p.sampling);
                    tape.mul(w, p.reward)
                })
                .collect();
            Ok(tape.sum(&terms))
        }
        Objective::SingleSampleELBO => {
            let terms: Vec<NodeId> = paths
                .iter()
                .map(|p| {
                    let lq = p.log_q.expect("posterior checked by caller");
                    let w = tape.exp(lq);
                    let lw = tape.sub(p.joint, lq);
                    tape.mul(w, lw)
                })
                .collect();
            Ok(tape.sum(&terms))
        }
        Objective::MultiSampleBound(k) => {
            if k < 1 {
                return Err(Error::validation("MultiSampleBound requires k >= 1"));
            }
            let tuples = (paths.len() as f64).powi(k as i32);
            if !(tuples <= TUPLE_GUARD as f64) {
                return Err(Error::size_guard(format!(
                    "MultiSampleBound: {} paths^{k} exceeds guard {TUPLE_GUARD}",
                    paths.len()
                )));
            }
            let per_path: Vec<(NodeId, NodeId)> = paths
                .iter()
                .map(|p| {
                    let lq = p.log_q.expect("posterior checked by caller");
                    let lw = tape.sub(p.joint, lq);
                    (lq, lw)
                })
                .collect();
            // Ordered k-tuples with repetition: odometer over path indices.
            let mut terms = Vec::with_capacity(tuples as usize);
            let mut idx = vec![0usize; k];
            loop {
                let lqs: Vec<NodeId> = idx.iter().map(|&i| per_path[i].0).collect();
                let lws: Vec<NodeId> = idx.iter().map(|&i| per_path[i].1).collect();
                let joint_q = tape.sum(&lqs);
                let weight = tape.exp(joint_q);
                let lhat = tape.log_mean_exp(&lws);
                terms.push(tape.mul(weight, lhat));
                let mut pos = k;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < paths.len() {
                        break;
                    }
                    idx[pos] = 0;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
            Ok(tape.sum(&terms))
        }
    }
}

fn check_objective_inputs(
    posterior: Option<&Posterior>,
    frames: &[Vec<f64>],
    objective: Objective,
    guard: usize,
    y: &[usize],
) -> Result<()> {
    if objective.needs_posterior() && posterior.is_none() {
        return Err(Error::validation(format!(
            "{objective:?} requires a posterior"
        )));
    }
    let size = frames.len() + y.len();
    if size > guard {
        return Err(Error::size_guard(format!(
            "m + n = {size} exceeds guard {guard}"
        )));
    }
    Ok(())
}

/// Exact value of the objective by enumeration (lattice recursion for the
/// marginal).
pub fn exact_value(
    store: &ParamStore,
    model: &SeqModel,
    posterior: Option<&Posterior>,
    frames: &[Vec<f64>],
    y: &[usize],
    objective: Objective,
) -> Result<f64> {
    if objective == Objective::LogMarginal {
        return exact_log_marginal(store, model, frames, y);
    }
    check_objective_inputs(posterior, frames, objective, MARGINAL_GUARD, y)?;
    let mut tape = Tape::new(store);
    let paths = build_path_nodes(&mut tape, model, posterior, frames, y)?;
    let root = objective_root(&mut tape, &paths, objective)?;
    Ok(tape.scalar(root))
}

/// Exact gradient (and value) of the objective with respect to every
/// parameter, by differentiating the enumerated expectation.
pub fn exact_gradient(
    store: &ParamStore,
    model: &SeqModel,
    posterior: Option<&Posterior>,
    frames: &[Vec<f64>],
    y: &[usize],
    objective: Objective,
) -> Result<ExactGradient> {
    check_objective_inputs(posterior, frames, objective, GRADIENT_GUARD, y)?;
    let mut tape = Tape::new(store);
    let paths = build_path_nodes(&mut tape, model, posterior, frames, y)?;
    let root = objective_root(&mut tape, &paths, objective)?;
    Ok(ExactGradient {
        value: tape.scalar(root),
        grads: tape.backward(root),
    })
}

/// Values of the complete-path joint under the model, in enumeration order —
/// the brute-force cross-check for the lattice.
pub fn enumerated_path_log_probs(
    store: &ParamStore,
    model: &SeqModel,
    frames: &[Vec<f64>],
    y: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let mut out = Vec::new();
    for path in enumerate_paths(frames.len(), y.len())? {
        let node = model.joint_log_prob(&mut tape, frames, y, &path)?;
        out.push(tape.scalar(node));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check::finite_difference;
    use crate::diffcore::math::logsumexp;
    use crate::diffcore::rng::Prng;
    use crate::diffcore::SlotId;
    use crate::posterior::PosteriorConfig;
    use crate::seqmodel::ModelConfig;

    fn frames(m: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Prng::new(seed);
        (0..m)
            .map(|_| (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect()
    }

    fn zero_params(store: &mut ParamStore) {
        for i in 0..store.len() {
            for v in store.value_mut(SlotId(i)).data_mut() {
                *v = 0.0;
            }
        }
    }

    fn model(store: &mut ParamStore, hidden: usize, seed: u64) -> SeqModel {
        let mut rng = Prng::new(seed);
        SeqModel::init(
            store,
            ModelConfig {
                feature_dim: 2,
                vocab: 4,
                hidden,
                layers: 1,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn posterior(store: &mut ParamStore, hidden: usize, seed: u64) -> Posterior {
        let mut rng = Prng::new(seed);
        Posterior::init(
            store,
            PosteriorConfig {
                feature_dim: 2,
                vocab: 4,
                enc_hidden: hidden,
                enc_layers: 1,
                dec_hidden: hidden,
                dec_layers: 1,
            },
            &mut rng,
        )
        .unwrap()
    }

    /// Zero weights make every decision a coin flip and every token uniform
    /// over V = 4; the three m=2, n=1 paths then have probabilities
    /// (1/2)³·(1/4) + (1/2)³·(1/4) + (1/2)³·(1/4) = 3/32.
    #[test]
    fn stub_marginal_is_log_3_over_32() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 1);
        zero_params(&mut store);
        let x = frames(2, 2, 5);
        let table = lattice(&store, &model, &x, &[2]).unwrap();
        let got = table.log_marginal();
        let want = (3.0f64 / 32.0).ln();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((want + 2.3671).abs() < 5e-5);
        // Lattice shape invariants.
        assert_eq!(table.alpha[0][0], 0.0);
        assert_eq!(table.alpha[0][1], f64::NEG_INFINITY);
        assert_eq!(table.alpha[3][0], f64::NEG_INFINITY);
    }

    #[test]
    fn empty_target_reduces_to_single_path() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 2);
        let x = frames(3, 2, 7);
        let got = exact_log_marginal(&store, &model, &x, &[]).unwrap();
        let want = enumerated_path_log_probs(&store, &model, &x, &[]).unwrap();
        assert_eq!(want.len(), 1);
        assert!((got - want[0]).abs() < 1e-12);
    }

    #[test]
    fn lattice_matches_brute_force_enumeration() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 8, 3);
        let x = frames(3, 2, 9);
        let y = [0usize, 3, 1];
        let got = exact_log_marginal(&store, &model, &x, &y).unwrap();
        let want = logsumexp(&enumerated_path_log_probs(&store, &model, &x, &y).unwrap());
        assert!((got - want).abs() < 1e-9, "lattice {got} vs paths {want}");
    }

    /// At the zero-weight symmetric point the only nonzero gradient
    /// coordinates are the head biases; the unobserved token coordinates are
    /// identical by exchangeability, and softmax shift invariance makes the
    /// token-bias block sum to zero.
    #[test]
    fn symmetric_stub_gradient_structure() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 4);
        zero_params(&mut store);
        let x = frames(2, 2, 11);
        let y = [2usize];
        let out =
            exact_gradient(&store, &model, None, &x, &y, Objective::LogMarginal).unwrap();
        let bias = out
            .grads
            .dense(&store, store.slot("p.head.b").unwrap());
        // Layout: emit logit then the 4 token logits.
        let tok = &bias.data()[1..];
        assert!(tok[2] > 0.0);
        assert!((tok[0] - tok[1]).abs() < 1e-12 && (tok[1] - tok[3]).abs() < 1e-12);
        assert!(tok[0] < 0.0);
        assert!(tok.iter().sum::<f64>().abs() < 1e-12);
        // Hidden states are identically zero at this point, so the head
        // weight matrix gets no gradient.
        let w = out.grads.dense(&store, store.slot("p.head.w").unwrap());
        assert!(w.data().iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn multi_sample_bound_at_k1_is_the_elbo() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 5);
        let q = posterior(&mut store, 3, 6);
        let x = frames(2, 2, 13);
        let y = [1usize];
        let a = exact_gradient(
            &store,
            &model,
            Some(&q),
            &x,
            &y,
            Objective::SingleSampleELBO,
        )
        .unwrap();
        let b = exact_gradient(
            &store,
            &model,
            Some(&q),
            &x,
            &y,
            Objective::MultiSampleBound(1),
        )
        .unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        let fa = a.grads.flatten(&store);
        let fb = b.grads.flatten(&store);
        for (ga, gb) in fa.iter().zip(&fb) {
            assert!((ga - gb).abs() < 1e-12);
        }
    }

    #[test]
    fn reinforce_bound_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 7);
        let x = frames(2, 2, 15);
        let y = [3usize, 0];
        let out =
            exact_gradient(&store, &model, None, &x, &y, Objective::ReinforceBound).unwrap();
        let report = finite_difference(&mut store, &out.grads, 1e-4, |s| {
            exact_value(s, &model, None, &x, &y, Objective::ReinforceBound).unwrap()
        });
        assert!(
            report.passes(1e-6),
            "finite differences: {report:?}"
        );
    }

    #[test]
    fn bounds_are_monotone_in_k_and_below_the_marginal() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 8);
        let q = posterior(&mut store, 3, 9);
        let x = frames(2, 2, 17);
        let y = [0usize, 2];
        let marginal = exact_log_marginal(&store, &model, &x, &y).unwrap();
        let mut last = f64::NEG_INFINITY;
        for k in 1..=3 {
            let v = exact_value(
                &store,
                &model,
                Some(&q),
                &x,
                &y,
                Objective::MultiSampleBound(k),
            )
            .unwrap();
            assert!(v >= last - 1e-9, "k={k}: {v} < {last}");
            assert!(v <= marginal + 1e-9, "k={k}: {v} > {marginal}");
            last = v;
        }
        // Strictly below for this untrained posterior, and strictly
        // improving with k.
        assert!(last < marginal - 1e-6);

        // Jensen at q = forced-p: E_p̃[log p(y,b|x) − log p̃(b)] ≤ marginal.
        let mut tape = Tape::new(&store);
        let paths = build_path_nodes(&mut tape, &model, None, &x, &y).unwrap();
        let mut bound = 0.0;
        for p in &paths {
            let lp = tape.scalar(p.sampling);
            bound += lp.exp() * (tape.scalar(p.joint) - lp);
        }
        assert!(bound <= marginal + 1e-12);
    }

    #[test]
    fn degenerate_sampling_law_collapses_reinforce_bound() {
        // Saturate the emit logit low so the all-consume-then-emit path has
        // probability ≈ 1; the bound then equals that path's reward.
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 10);
        zero_params(&mut store);
        let b = store.slot("p.head.b").unwrap();
        store.value_mut(b).data_mut()[0] = -50.0;
        let x = frames(2, 2, 19);
        let y = [1usize];
        let v = exact_value(&store, &model, None, &x, &y, Objective::ReinforceBound).unwrap();
        assert!((v - 0.25f64.ln()).abs() < 1e-9, "v = {v}");
    }

    #[test]
    fn guards_refuse_oversized_instances() {
        let mut store = ParamStore::new();
        let model = model(&mut store, 4, 11);
        let q = posterior(&mut store, 3, 12);
        let x25 = frames(25, 2, 21);
        assert!(matches!(
            exact_log_marginal(&store, &model, &x25, &[]),
            Err(Error::SizeGuard(_))
        ));
        let x9 = frames(9, 2, 23);
        assert!(matches!(
            exact_gradient(&store, &model, None, &x9, &[0, 1], Objective::LogMarginal),
            Err(Error::SizeGuard(_))
        ));
        // 10 paths at m=3, n=2; 10⁶ quadruples... k=6 pushes past the guard.
        let x3 = frames(3, 2, 25);
        assert!(matches!(
            exact_gradient(
                &store,
                &model,
                Some(&q),
                &x3,
                &[0, 1],
                Objective::MultiSampleBound(6)
            ),
            Err(Error::SizeGuard(_))
        ));
        assert!(matches!(
            exact_value(&store, &model, None, &x3, &[0], Objective::SingleSampleELBO),
            Err(Error::Validation(_))
        ));
    }
}
