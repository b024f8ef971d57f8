//! The training loop: one trainer thread owns the parameters; each step the
//! batch fans out over rollout workers that read a frozen snapshot, and the
//! gradient reduction runs in a fixed order so sequential and parallel
//! execution produce bit-identical runs.

use std::io::Write;

use crate::diffcore::rng::Prng;
use crate::diffcore::{Gradients, ParamStore, SlotId};
use crate::error::{Error, Result};
use crate::estimators::{
    nvil_gradient, reinforce_gradient, vimco_gradient, BaselineKind, BaselineSpec,
    EstimatorKind, EstimatorOutput, ParametricBaseline, SignalNormalizer,
};
use crate::exec::{map_ordered, ExecMode};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::optim::Adam;
use crate::posterior::Posterior;
use crate::seqmodel::SeqModel;
use crate::tasks::{edit_distance, generate_dataset, SequencePair, TaskConfig};

pub const METRICS_HEADER: &str = "step,objective,bound,grad_norm,ter,wallclock_s";

/// Stream ids carved out of the run seed: 1–2 for the trainer's own draws,
/// 3 for initialization, and everything from `STEP_STREAM_BASE` up for
/// per-step per-example estimator randomness (pure functions of the step
/// index, so a restored run replays them without extra bookkeeping).
const DATA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const STEP_STREAM_BASE: u64 = 16;

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Batch-mean objective estimate for this step.
    pub bound: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_run: usize,
    pub final_ter: f64,
    /// First evaluated step at which held-out TER fell to `target_ter`,
    /// when early stopping is enabled and reached.
    pub reached_target_at: Option<usize>,
}

/// Decoded example with its emission trace.
#[derive(Debug, Clone)]
pub struct DecodeDump {
    pub target: Vec<usize>,
    pub decoded: Vec<usize>,
    pub ter: f64,
    /// Greedy emit/consume decisions, in order.
    pub decisions: Vec<bool>,
    /// Frames consumed before each emission: the input position each output
    /// token was produced at.
    pub emit_positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Corpus-level TER: total edit distance over total reference length.
    pub ter: f64,
    pub examples: Vec<DecodeDump>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: SeqModel,
    pub posterior: Option<Posterior>,
    pub parametric: Option<ParametricBaseline>,
    pub adam: Adam,
    pub normalizer: Option<SignalNormalizer>,
    pub step: usize,
    root: Prng,
    data_rng: Prng,
    noise_rng: Prng,
    train_set: Vec<SequencePair>,
    eval_set: Vec<SequencePair>,
}

fn split_dataset(
    task: &TaskConfig,
    mixture: bool,
    train: usize,
    eval: usize,
) -> Result<(Vec<SequencePair>, Vec<SequencePair>)> {
    let mut all = generate_dataset(task, train + eval, mixture)?;
    let eval_set = all.split_off(train);
    Ok((all, eval_set))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Trainer> {
        config.validate()?;
        let (train_set, eval_set) = split_dataset(
            &config.task,
            config.mixture,
            config.train_examples,
            config.eval_examples,
        )?;
        let root = Prng::new(config.seed);
        let mut init_rng = root.fork_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let model = SeqModel::init(&mut store, config.model_config(), &mut init_rng)?;
        let posterior = if config.estimator.needs_posterior() {
            Some(Posterior::init(
                &mut store,
                config.posterior_config(),
                &mut init_rng,
            )?)
        } else {
            None
        };
        let parametric = if config.baseline == BaselineKind::Parametric {
            let dim = match config.estimator {
                EstimatorKind::Reinforce => 4 + config.model.hidden,
                EstimatorKind::Nvil => 4 + 2 * config.posterior.enc_hidden,
                EstimatorKind::Vimco => unreachable!("rejected by validate"),
            };
            Some(ParametricBaseline::init(&mut store, dim, &mut init_rng)?)
        } else {
            None
        };
        let adam = Adam::new(config.optimizer, &store);
        let normalizer = if config.estimator == EstimatorKind::Nvil && config.normalize_signals {
            Some(SignalNormalizer::default())
        } else {
            None
        };
        Ok(Trainer {
            data_rng: root.fork_stream(DATA_STREAM),
            noise_rng: root.fork_stream(NOISE_STREAM),
            root,
            config,
            store,
            model,
            posterior,
            parametric,
            adam,
            normalizer,
            step: 0,
            train_set,
            eval_set,
        })
    }

    fn baseline_spec(&self) -> BaselineSpec {
        self.config.baseline_spec()
    }

    /// One estimator draw for one example against a frozen parameter
    /// snapshot. The normalizer argument is a frozen copy: its in-call
    /// update is discarded, and the trainer folds raw signals into the
    /// master normalizer afterwards in batch order.
    fn example_output(
        &self,
        store: &ParamStore,
        pair: &SequencePair,
        rng: &mut Prng,
        frozen: Option<&SignalNormalizer>,
    ) -> Result<EstimatorOutput> {
        let spec = self.baseline_spec();
        match self.config.estimator {
            EstimatorKind::Reinforce => reinforce_gradient(
                store,
                &self.model,
                &pair.x,
                &pair.y,
                self.config.k,
                &spec,
                self.parametric.as_ref(),
                rng,
                false,
            ),
            EstimatorKind::Nvil => {
                let mut scratch = frozen.cloned();
                nvil_gradient(
                    store,
                    &self.model,
                    self.posterior.as_ref().expect("nvil has a posterior"),
                    &pair.x,
                    &pair.y,
                    self.config.k,
                    &spec,
                    self.parametric.as_ref(),
                    scratch.as_mut(),
                    rng,
                    false,
                )
            }
            EstimatorKind::Vimco => vimco_gradient(
                store,
                &self.model,
                self.posterior.as_ref().expect("vimco has a posterior"),
                &pair.x,
                &pair.y,
                self.config.k,
                &spec,
                rng,
                false,
            ),
        }
    }

    /// Adds per-step Gaussian noise to every model/posterior tensor of a
    /// copy of the weights; baseline (`c.*`) slots stay clean because they
    /// are a control variate, not part of the model.
    fn noisy_snapshot(&mut self) -> ParamStore {
        let mut snapshot = self.store.clone();
        let std = self.config.weight_noise;
        for slot in 0..snapshot.len() {
            let id = SlotId(slot);
            if snapshot.name(id).starts_with("c.") {
                continue;
            }
            for v in snapshot.value_mut(id).data_mut() {
                *v += std * self.noise_rng.normal();
            }
        }
        snapshot
    }

    pub fn train_step(&mut self, mode: ExecMode) -> Result<StepStats> {
        let batch = self.config.batch_size;
        let indices: Vec<usize> = (0..batch)
            .map(|_| self.data_rng.below(self.train_set.len()))
            .collect();
        let noisy = if self.config.weight_noise > 0.0 {
            Some(self.noisy_snapshot())
        } else {
            None
        };
        let snapshot = noisy.as_ref().unwrap_or(&self.store);
        let frozen_nz = self.normalizer.clone();
        let step = self.step as u64;
        let root = &self.root;

        let outputs: Vec<Result<EstimatorOutput>> = map_ordered(mode, batch, |j| {
            let mut rng =
                root.fork_stream(STEP_STREAM_BASE + step * batch as u64 + j as u64);
            self.example_output(
                snapshot,
                &self.train_set[indices[j]],
                &mut rng,
                frozen_nz.as_ref(),
            )
        });

        let mut grads = Gradients::zeros_like(&self.store);
        let mut bound = 0.0;
        for out in outputs {
            let out = out?;
            grads.add_assign(&out.grads);
            if let Some(bg) = &out.baseline_grads {
                grads.add_assign(bg);
            }
            bound += out.bound / batch as f64;
            if let Some(nz) = self.normalizer.as_mut() {
                nz.update(&out.diagnostics.raw_signals);
            }
        }
        grads.scale(1.0 / batch as f64);

        if self.config.l2 > 0.0 {
            let l2 = self.config.l2;
            for slot in 0..self.store.len() {
                let id = SlotId(slot);
                if self.store.name(id).starts_with("c.") {
                    continue;
                }
                let theta = self.store.value(id).data().to_vec();
                let g = grads.slot_or_insert(id, self.store.value(id).shape());
                for (gv, tv) in g.data_mut().iter_mut().zip(&theta) {
                    *gv -= l2 * tv;
                }
            }
        }

        if !bound.is_finite() || !grads.is_finite() {
            return Err(Error::numerical(format!(
                "diverged at step {}: objective {bound}, gradient norm {}",
                self.step + 1,
                grads.norm()
            )));
        }
        let grad_norm = grads.norm();
        self.adam.ascend(&mut self.store, &grads)?;
        self.store.validate_finite()?;
        self.step += 1;
        Ok(StepStats { bound, grad_norm })
    }

    /// Held-out TER with clean weights (weight noise never applies at
    /// evaluation).
    pub fn evaluate_heldout(&self) -> Result<Evaluation> {
        evaluate_pairs(
            &self.store,
            &self.model,
            &self.eval_set,
            self.config.decode_cap(),
        )
    }

    /// Runs the remaining step budget, writing one metrics row every
    /// `eval_interval` steps (and at the final step). The `objective` column
    /// is the mean per-step objective estimate since the previous row,
    /// `bound`/`grad_norm` come from the row's own step, and `ter` is the
    /// held-out greedy-decode error. Early-stops once `target_ter` is hit.
    pub fn run<W: Write>(&mut self, mode: ExecMode, metrics: &mut W) -> Result<RunSummary> {
        writeln!(metrics, "{METRICS_HEADER}")?;
        let start = std::time::Instant::now();
        let mut acc = 0.0;
        let mut acc_n = 0usize;
        let mut final_ter = f64::NAN;
        let mut reached = None;
        while self.step < self.config.steps {
            let stats = self.train_step(mode)?;
            acc += stats.bound;
            acc_n += 1;
            let done = self.step == self.config.steps;
            if self.step % self.config.eval_interval == 0 || done {
                let ter = self.evaluate_heldout()?.ter;
                final_ter = ter;
                let wallclock = if self.config.log_wallclock {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                writeln!(
                    metrics,
                    "{},{:.12e},{:.12e},{:.12e},{:.6},{:.3}",
                    self.step,
                    acc / acc_n as f64,
                    stats.bound,
                    stats.grad_norm,
                    ter,
                    wallclock
                )?;
                acc = 0.0;
                acc_n = 0;
                if self.config.target_ter > 0.0 && ter <= self.config.target_ter {
                    reached = Some(self.step);
                    break;
                }
            }
        }
        Ok(RunSummary {
            steps_run: self.step,
            final_ter,
            reached_target_at: reached,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::with_capacity(self.store.len());
        for slot in 0..self.store.len() {
            let id = SlotId(slot);
            let t = self.store.value(id);
            tensors.push((
                self.store.name(id).to_string(),
                t.shape().to_vec(),
                t.data().to_vec(),
            ));
        }
        Ok(Checkpoint {
            version: crate::harness::checkpoint::CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            tensors,
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            data_rng: self.data_rng.state(),
            noise_rng: self.noise_rng.state(),
            normalizer: self.normalizer.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let mut trainer = Trainer::new(ckpt.config.clone())?;
        if ckpt.tensors.len() != trainer.store.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} tensors, run shape needs {}",
                ckpt.tensors.len(),
                trainer.store.len()
            )));
        }
        for (slot, (name, shape, data)) in ckpt.tensors.iter().enumerate() {
            let id = SlotId(slot);
            if trainer.store.name(id) != name {
                return Err(Error::validation(format!(
                    "checkpoint tensor `{name}` does not match slot `{}`",
                    trainer.store.name(id)
                )));
            }
            let dst = trainer.store.value_mut(id);
            if dst.shape() != shape.as_slice() {
                return Err(Error::validation(format!(
                    "checkpoint tensor `{name}` has shape {shape:?}, expected {:?}",
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(data);
        }
        trainer.adam.t = ckpt.adam_t;
        trainer.adam.m = ckpt.adam_m.clone();
        trainer.adam.v = ckpt.adam_v.clone();
        trainer.data_rng = Prng::from_state(&ckpt.data_rng);
        trainer.noise_rng = Prng::from_state(&ckpt.noise_rng);
        trainer.normalizer = ckpt.normalizer.clone();
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn eval_set(&self) -> &[SequencePair] {
        &self.eval_set
    }

    pub fn train_set(&self) -> &[SequencePair] {
        &self.train_set
    }
}

/// Greedy-decodes every pair and aggregates corpus-level TER; errors on an
/// empty dataset since a reference-free rate is undefined.
pub fn evaluate_pairs(
    store: &ParamStore,
    model: &SeqModel,
    pairs: &[SequencePair],
    decode_cap: usize,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::validation("evaluation dataset is empty"));
    }
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    let mut examples = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.y.is_empty() {
            return Err(Error::validation("evaluation example has no reference"));
        }
        let (decoded, decisions) = model.greedy_decode_trace(store, &pair.x, decode_cap)?;
        let dist = edit_distance(&decoded, &pair.y);
        edits += dist;
        ref_len += pair.y.len();
        let mut consumed = 0usize;
        let mut emit_positions = Vec::new();
        for &emit in &decisions {
            if emit {
                emit_positions.push(consumed);
            } else {
                consumed += 1;
            }
        }
        examples.push(DecodeDump {
            target: pair.y.clone(),
            decoded,
            ter: dist as f64 / pair.y.len() as f64,
            decisions,
            emit_positions,
        });
    }
    Ok(Evaluation {
        ter: edits as f64 / ref_len as f64,
        examples,
    })
}

/// Renders an evaluation to the per-example decode dump format: one block
/// per example with the reference, hypothesis, and emission positions.
pub fn render_dump(eval: &Evaluation) -> String {
    let mut out = format!("corpus_ter {:.6}\n", eval.ter);
    for (i, ex) in eval.examples.iter().enumerate() {
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let trace: String = ex
            .decisions
            .iter()
            .map(|&b| if b { 'E' } else { 'C' })
            .collect();
        out.push_str(&format!(
            "example {i}\n  ref  {}\n  hyp  {}\n  ter  {:.6}\n  trace {trace}\n  emit_positions {}\n",
            join(&ex.target),
            join(&ex.decoded),
            ex.ter,
            join(&ex.emit_positions),
        ));
    }
    out
}

/// Builds a trainer and runs it to completion against `mode`, returning the
/// trainer (for checkpointing) and the run summary.
pub fn train<W: Write>(
    config: RunConfig,
    mode: ExecMode,
    metrics: &mut W,
) -> Result<(Trainer, RunSummary)> {
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run(mode, metrics)?;
    Ok((trainer, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{ModelDims, PosteriorDims};

    fn tiny_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            task: TaskConfig {
                vocab: 4,
                n_min: 1,
                n_max: 2,
                dwell: 1,
                noise: 0.05,
                rho: 1.0,
                seed: seed ^ 0xABCD,
            },
            model: ModelDims {
                hidden: 5,
                layers: 1,
            },
            posterior: PosteriorDims {
                enc_hidden: 3,
                enc_layers: 1,
                dec_hidden: 4,
                dec_layers: 1,
            },
            k: 2,
            batch_size: 3,
            steps: 6,
            eval_interval: 3,
            train_examples: 8,
            eval_examples: 4,
            ..RunConfig::default()
        }
    }

    fn run_to_string(config: RunConfig, mode: ExecMode) -> (Trainer, String) {
        let mut buf = Vec::new();
        let (trainer, _) = train(config, mode, &mut buf).unwrap();
        (trainer, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn zero_step_budget_leaves_initialization_untouched() {
        let mut config = tiny_config(1);
        config.steps = 0;
        let fresh = Trainer::new(config.clone()).unwrap().checkpoint().unwrap();
        let (trainer, metrics) = run_to_string(config, ExecMode::Sequential);
        assert_eq!(trainer.checkpoint().unwrap(), fresh);
        assert_eq!(metrics, format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn same_seed_gives_identical_metrics_files() {
        let (_, a) = run_to_string(tiny_config(2), ExecMode::Sequential);
        let (_, b) = run_to_string(tiny_config(2), ExecMode::Sequential);
        assert_eq!(a, b);
        assert!(a.lines().count() > 1, "expected data rows:\n{a}");
        let (_, c) = run_to_string(tiny_config(3), ExecMode::Sequential);
        assert_ne!(a, c);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (ta, a) = run_to_string(tiny_config(4), ExecMode::Sequential);
        let (tb, b) = run_to_string(tiny_config(4), ExecMode::Parallel);
        assert_eq!(a, b);
        assert_eq!(
            ta.checkpoint().unwrap().encode().unwrap(),
            tb.checkpoint().unwrap().encode().unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_the_next_step() {
        let mut config = tiny_config(5);
        config.weight_noise = 0.1;
        config.l2 = 1e-4;
        config.estimator = EstimatorKind::Nvil;
        config.baseline = BaselineKind::Loo;
        config.normalize_signals = true;
        config.steps = 4;
        let mut direct = Trainer::new(config.clone()).unwrap();
        for _ in 0..2 {
            direct.train_step(ExecMode::Sequential).unwrap();
        }
        let saved = direct.checkpoint().unwrap();
        let text = saved.encode().unwrap();
        let mut restored =
            Trainer::from_checkpoint(&Checkpoint::decode(&text).unwrap()).unwrap();

        direct.train_step(ExecMode::Sequential).unwrap();
        restored.train_step(ExecMode::Sequential).unwrap();
        assert_eq!(
            direct.checkpoint().unwrap().encode().unwrap(),
            restored.checkpoint().unwrap().encode().unwrap()
        );
    }

    #[test]
    fn reinforce_with_parametric_baseline_trains() {
        let mut config = tiny_config(6);
        config.estimator = EstimatorKind::Reinforce;
        config.baseline = BaselineKind::Parametric;
        config.steps = 3;
        let (trainer, metrics) = run_to_string(config, ExecMode::Sequential);
        assert!(metrics.lines().count() >= 2);
        // The regression actually moved the baseline weights.
        let w = trainer.store.value_by_name("c.w").unwrap();
        assert!(w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn metrics_header_and_row_shape_are_stable() {
        let (_, metrics) = run_to_string(tiny_config(7), ExecMode::Sequential);
        let mut lines = metrics.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        for row in lines {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 6, "row `{row}`");
            fields[0].parse::<usize>().unwrap();
            for f in &fields[1..5] {
                f.parse::<f64>().unwrap();
            }
            assert_eq!(fields[5], "0.000", "wallclock stays gated off");
        }
    }

    #[test]
    fn untrained_model_decodes_at_chance_or_worse() {
        let config = RunConfig {
            task: TaskConfig::copy_default(11),
            ..tiny_config(11)
        };
        let trainer = Trainer::new(config).unwrap();
        let eval = trainer.evaluate_heldout().unwrap();
        assert!(eval.ter >= 0.5, "untrained TER {}", eval.ter);
        let dump = render_dump(&eval);
        assert!(dump.starts_with("corpus_ter"));
        assert!(dump.contains("emit_positions"));
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        let trainer = Trainer::new(tiny_config(12)).unwrap();
        assert!(evaluate_pairs(&trainer.store, &trainer.model, &[], 8).is_err());
    }
}
