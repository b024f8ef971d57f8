//! `hardalign` — experiment driver for hard-alignment seq2seq training.
//!
//! Every subcommand reads its settings from one TOML config file; `--seed`
//! overrides the config's seed so sweeps can share a config. Exit codes:
//! 0 success, 2 validation failure, 3 numerical failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use hardalign::alignment::AlignmentPath;
use hardalign::diffcore::{
    finite_difference, FiniteDiffReport, LstmCell, ParamStore, Prng, Tape, Tensor,
};
use hardalign::error::{Error, Result};
use hardalign::estimators::variance_csv;
use hardalign::harness::{
    emit_curves, evaluate_pairs, render_dump, report_unbiasedness, report_variance,
    report_variance_from_checkpoint, Checkpoint, ReportConfig, RunConfig, Trainer,
};
use hardalign::posterior::{Posterior, PosteriorConfig};
use hardalign::seqmodel::{ModelConfig, SeqModel};
use hardalign::tasks::{generate_dataset, read_dataset, write_dataset, TaskConfig};
use hardalign::ExecMode;

#[derive(Parser)]
#[command(name = "hardalign", version, about = "Hard-alignment seq2seq experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedOverride {
    /// Override the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from a task config.
    GenData {
        /// Task config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Number of examples.
        #[arg(long)]
        count: usize,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Use the two-stream mixture generator.
        #[arg(long)]
        mixture: bool,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Train a model from a run config.
    Train {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Metrics CSV output path.
        #[arg(long)]
        metrics: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Force sequential execution (default uses the parallel pool when
        /// the crate is built with it).
        #[arg(long)]
        sequential: bool,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL path.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the per-example decode dump (stdout if omitted).
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on the LSTM, model, and posterior.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Measure estimator bias against the exact oracle.
    ReportUnbiasedness {
        /// Report config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Measure estimator variance (no oracle needed).
    ReportVariance {
        /// Report config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Measure against a trained checkpoint's model on its own task
        /// instead of the config's random instance.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedOverride,
    },
    /// Plot TER curves from metrics CSV files.
    Curves {
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV files, one curve each.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            count,
            out,
            mixture,
            seed,
        } => {
            let mut task: TaskConfig = toml::from_str(&std::fs::read_to_string(&config)?)
                .map_err(|e| Error::validation(format!("task config: {e}")))?;
            if let Some(s) = seed.seed {
                task.seed = s;
            }
            let pairs = generate_dataset(&task, count, mixture)?;
            write_dataset(&out, &pairs)?;
            println!("wrote {} examples to {}", pairs.len(), out.display());
        }
        Command::Train {
            config,
            metrics,
            checkpoint,
            resume,
            sequential,
            seed,
        } => {
            let mut run_config = RunConfig::load(&config)?;
            if let Some(s) = seed.seed {
                run_config.seed = s;
            }
            let mode = if sequential {
                ExecMode::Sequential
            } else {
                ExecMode::default()
            };
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.config != run_config {
                        return Err(Error::validation(
                            "resume checkpoint was produced by a different run config",
                        ));
                    }
                    Trainer::from_checkpoint(&ckpt)?
                }
                None => Trainer::new(run_config)?,
            };
            let mut metrics_file = std::fs::File::create(&metrics)?;
            let summary = trainer.run(mode, &mut metrics_file)?;
            metrics_file.flush()?;
            trainer.checkpoint()?.save(&checkpoint)?;
            match summary.reached_target_at {
                Some(step) => println!(
                    "reached target ter at step {step}; final ter {:.6}",
                    summary.final_ter
                ),
                None => println!(
                    "ran {} steps; final ter {:.6}",
                    summary.steps_run, summary.final_ter
                ),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            dump,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let trainer = Trainer::from_checkpoint(&ckpt)?;
            let pairs = read_dataset(&data)?;
            let eval = evaluate_pairs(
                &trainer.store,
                &trainer.model,
                &pairs,
                trainer.config.decode_cap(),
            )?;
            let text = render_dump(&eval);
            match dump {
                Some(path) => std::fs::write(path, &text)?,
                None => print!("{text}"),
            }
            println!("ter {:.6} over {} examples", eval.ter, eval.examples.len());
        }
        Command::GradCheck { seed, tol } => grad_check(seed, tol)?,
        Command::ReportUnbiasedness { config, out, seed } => {
            let mut report_config = ReportConfig::load(&config)?;
            if let Some(s) = seed.seed {
                report_config.seed = s;
            }
            let (report, pass) = report_unbiasedness(&report_config)?;
            std::fs::write(&out, report.to_csv())?;
            let failures = report.failures(report_config.se_multiplier);
            println!(
                "{} rows, {} bias failures at {} SE -> {}",
                report.rows.len(),
                failures.len(),
                report_config.se_multiplier,
                out.display()
            );
            if !pass {
                return Err(Error::numerical(format!(
                    "{} coordinates exceed the bias gate",
                    failures.len()
                )));
            }
        }
        Command::ReportVariance {
            config,
            out,
            checkpoint,
            seed,
        } => {
            let mut report_config = ReportConfig::load(&config)?;
            if let Some(s) = seed.seed {
                report_config.seed = s;
            }
            let rows = match checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    report_variance_from_checkpoint(
                        &ckpt,
                        &report_config.specs,
                        report_config.draws,
                        report_config.seed,
                    )?
                }
                None => report_variance(&report_config)?,
            };
            std::fs::write(&out, variance_csv(&rows))?;
            println!("{} variance rows -> {}", rows.len(), out.display());
        }
        Command::Curves { out, metrics } => {
            let svg = emit_curves(&metrics)?;
            std::fs::write(&out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Finite-difference checks over the three graph families the estimators
/// differentiate through.
fn grad_check(seed: u64, tol: f64) -> Result<()> {
    let mut failures = 0;
    for (name, report) in [
        ("lstm", check_lstm(seed)?),
        ("model", check_model(seed)?),
        ("posterior", check_posterior(seed)?),
    ] {
        let pass = report.passes(tol);
        println!(
            "{name}: max rel err {:.3e} over {} coords (worst {}[{}]) -> {}",
            report.max_rel,
            report.checked + report.small,
            report.worst_slot,
            report.worst_index,
            if pass { "ok" } else { "FAIL" }
        );
        if !pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::numerical(format!(
            "{failures} gradient check(s) exceeded tolerance {tol}"
        )));
    }
    Ok(())
}

fn check_lstm(seed: u64) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(seed);
    let cell = LstmCell::init(&mut store, "lstm", 3, 4, &mut rng)?;
    let inputs: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    fn scan<'a>(cell: &LstmCell, store: &'a ParamStore, inputs: &[Vec<f64>]) -> (Tape<'a>, hardalign::diffcore::NodeId) {
        let mut tape = Tape::new(store);
        let mut state = cell.zero_state(&mut tape);
        let mut total = Vec::new();
        for input in inputs {
            let x = tape.constant(Tensor::vector(input.clone()));
            state = cell.step(&mut tape, x, state);
            total.push(tape.dot(state.h, state.h));
        }
        let root = tape.sum(&total);
        (tape, root)
    }
    let grads = {
        let (tape, root) = scan(&cell, &store, &inputs);
        tape.backward(root)
    };
    Ok(finite_difference(&mut store, &grads, 1e-5, |store| {
        let (tape, root) = scan(&cell, store, &inputs);
        tape.scalar(root)
    }))
}

fn check_model(seed: u64) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(seed ^ 0x51ed);
    let model = SeqModel::init(
        &mut store,
        ModelConfig {
            feature_dim: 3,
            vocab: 3,
            hidden: 4,
            layers: 2,
        },
        &mut rng,
    )?;
    let frames: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    let path = AlignmentPath::new(vec![false, true, false], 2, 1)?;
    let y = vec![1usize];
    let grads = {
        let mut tape = Tape::new(&store);
        let score = model.score_path(&mut tape, &frames, &y, &path)?;
        tape.backward(score.total)
    };
    Ok(finite_difference(&mut store, &grads, 1e-5, |store| {
        let mut tape = Tape::new(store);
        let score = model
            .score_path(&mut tape, &frames, &y, &path)
            .expect("score_path");
        tape.scalar(score.total)
    }))
}

fn check_posterior(seed: u64) -> Result<FiniteDiffReport> {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(seed ^ 0x9c0a);
    let posterior = Posterior::init(
        &mut store,
        PosteriorConfig {
            feature_dim: 3,
            vocab: 3,
            enc_hidden: 3,
            enc_layers: 1,
            dec_hidden: 4,
            dec_layers: 1,
        },
        &mut rng,
    )?;
    let frames: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    let path = AlignmentPath::new(vec![true, false, false], 2, 1)?;
    let y = vec![2usize];
    let grads = {
        let mut tape = Tape::new(&store);
        let encoding = posterior.encode(&mut tape, &frames)?;
        let lq = posterior.replay_log_q(&mut tape, &encoding, &y, &path)?;
        tape.backward(lq)
    };
    Ok(finite_difference(&mut store, &grads, 1e-5, |store| {
        let mut tape = Tape::new(store);
        let encoding = posterior.encode(&mut tape, &frames).expect("encode");
        let lq = posterior
            .replay_log_q(&mut tape, &encoding, &y, &path)
            .expect("replay_log_q");
        tape.scalar(lq)
    }))
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
