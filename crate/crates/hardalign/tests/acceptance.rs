//! Release acceptance suite. Each test checks one gate and prints a single
//! `[criterion N] name: PASS/FAIL (...)` verdict straight to stdout, past
//! libtest's capture, so a plain `cargo test` run shows all nine lines.
//!
//! The suite covers: lattice-vs-enumeration oracle agreement, finite-
//! difference gradient checks, a 100k-draw unbiasedness sweep over the full
//! estimator × baseline grid, multi-sample bound ordering, exact baseline
//! algebra, measured variance reduction from the temporal leave-one-out
//! baseline, copy-task and mixture-task training runs, and bit-exact
//! determinism of metrics and checkpoints.

use std::io::Write as _;

use hardalign::alignment::AlignmentPath;
use hardalign::diffcore::{
    finite_difference, logsumexp, FiniteDiffReport, LstmCell, ParamStore, Prng, Tape, Tensor,
};
use hardalign::estimators::{
    loo_baseline, simple_average_baseline, temporal_loo_baseline, BaselineKind, EstimatorKind,
    RewardSeries,
};
use hardalign::harness::{
    parse_metrics, render_curves, report_unbiasedness, report_variance_from_checkpoint, train,
    AdamConfig, Checkpoint, ReportConfig, RunConfig, Series, SpecEntry, Trainer,
};
use hardalign::oracle::{enumerated_path_log_probs, exact_log_marginal, exact_value, Objective};
use hardalign::posterior::{Posterior, PosteriorConfig};
use hardalign::seqmodel::{ModelConfig, SeqModel};
use hardalign::tasks::TaskConfig;
use hardalign::ExecMode;

/// Prints the verdict line (unconditionally, so FAIL lines appear too) and
/// then asserts.
fn verdict(number: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[criterion {number}] {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    assert!(pass, "{line}");
}

fn random_frames(rng: &mut Prng, m: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect()
}

fn random_target(rng: &mut Prng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

#[test]
fn c1_oracle_equivalence() {
    let mut max_diff = 0.0f64;
    for i in 0..50 {
        let mut rng = Prng::new(0xACC).fork_stream(i);
        let m = rng.range_inclusive(1, 4);
        let n = rng.range_inclusive(1, 4);
        let vocab = rng.range_inclusive(2, 5);
        let layers = rng.range_inclusive(1, 2);
        let mut store = ParamStore::new();
        let model = SeqModel::init(
            &mut store,
            ModelConfig {
                feature_dim: vocab,
                vocab,
                hidden: 8,
                layers,
            },
            &mut rng,
        )
        .unwrap();
        let frames = random_frames(&mut rng, m, vocab);
        let y = random_target(&mut rng, n, vocab);
        let lattice = exact_log_marginal(&store, &model, &frames, &y).unwrap();
        let brute = logsumexp(&enumerated_path_log_probs(&store, &model, &frames, &y).unwrap());
        max_diff = max_diff.max((lattice - brute).abs());
    }
    verdict(
        1,
        "oracle equivalence",
        max_diff <= 1e-9,
        &format!("max |lattice - enumeration| = {max_diff:.3e} over 50 width-8 models"),
    );
}

fn fd_lstm(seed: u64) -> FiniteDiffReport {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(seed);
    let cell = LstmCell::init(&mut store, "lstm", 4, 5, &mut rng).unwrap();
    let inputs: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    fn scan<'a>(
        cell: &LstmCell,
        store: &'a ParamStore,
        inputs: &[Vec<f64>],
    ) -> (Tape<'a>, hardalign::diffcore::NodeId) {
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
    finite_difference(&mut store, &grads, 1e-5, |store| {
        let (tape, root) = scan(&cell, store, &inputs);
        tape.scalar(root)
    })
}

fn fd_model(seed: u64) -> FiniteDiffReport {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(seed);
    let model = SeqModel::init(
        &mut store,
        ModelConfig {
            feature_dim: 4,
            vocab: 5,
            hidden: 6,
            layers: 2,
        },
        &mut rng,
    )
    .unwrap();
    let frames = random_frames(&mut rng, 3, 4);
    let y = vec![2usize, 4];
    let path = AlignmentPath::new(vec![false, true, false, true, false], 3, 2).unwrap();
    let grads = {
        let mut tape = Tape::new(&store);
        let score = model.score_path(&mut tape, &frames, &y, &path).unwrap();
        tape.backward(score.total)
    };
    finite_difference(&mut store, &grads, 1e-5, |store| {
        let mut tape = Tape::new(store);
        let score = model.score_path(&mut tape, &frames, &y, &path).unwrap();
        tape.scalar(score.total)
    })
}

fn fd_posterior(seed: u64) -> FiniteDiffReport {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(seed);
    let posterior = Posterior::init(
        &mut store,
        PosteriorConfig {
            feature_dim: 4,
            vocab: 5,
            enc_hidden: 4,
            enc_layers: 1,
            dec_hidden: 5,
            dec_layers: 1,
        },
        &mut rng,
    )
    .unwrap();
    let frames = random_frames(&mut rng, 3, 4);
    let y = vec![1usize, 3];
    let path = AlignmentPath::new(vec![true, false, true, false, false], 3, 2).unwrap();
    let grads = {
        let mut tape = Tape::new(&store);
        let encoding = posterior.encode(&mut tape, &frames).unwrap();
        let lq = posterior.replay_log_q(&mut tape, &encoding, &y, &path).unwrap();
        tape.backward(lq)
    };
    finite_difference(&mut store, &grads, 1e-5, |store| {
        let mut tape = Tape::new(store);
        let encoding = posterior.encode(&mut tape, &frames).unwrap();
        let lq = posterior.replay_log_q(&mut tape, &encoding, &y, &path).unwrap();
        tape.scalar(lq)
    })
}

#[test]
fn c2_gradient_correctness() {
    let reports = [
        ("lstm", fd_lstm(2)),
        ("model", fd_model(3)),
        ("posterior", fd_posterior(4)),
    ];
    let pass = reports.iter().all(|(_, r)| r.passes(1e-4));
    let detail = reports
        .iter()
        .map(|(name, r)| format!("{name} {:.3e}", r.max_rel))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        2,
        "gradient correctness",
        pass,
        &format!("max rel err: {detail}; tolerance 1e-4"),
    );
}

#[test]
fn c3_unbiasedness_grid() {
    let mut specs = Vec::new();
    for estimator in [
        EstimatorKind::Reinforce,
        EstimatorKind::Nvil,
        EstimatorKind::Vimco,
    ] {
        for baseline in [
            BaselineKind::None,
            BaselineKind::SimpleAverage,
            BaselineKind::Loo,
            BaselineKind::TemporalLoo,
        ] {
            specs.push(SpecEntry {
                estimator,
                baseline,
                k: 2,
                constant: 0.0,
            });
        }
    }
    let config = ReportConfig {
        draws: 100_000,
        specs,
        ..ReportConfig::default()
    };
    let (report, pass) = report_unbiasedness(&config).unwrap();
    let coords = report
        .rows
        .iter()
        .filter(|r| r.coordinate != "trace")
        .count();
    let failures = report.failures(config.se_multiplier).len();
    verdict(
        3,
        "estimator unbiasedness",
        pass,
        &format!(
            "{failures} failures across {coords} coordinate gates at {} SE, {} draws, 12 estimator/baseline cells",
            config.se_multiplier, config.draws
        ),
    );
}

#[test]
fn c4_bound_ordering() {
    let mut worst = f64::NEG_INFINITY;
    let mut inequalities = 0;
    let shapes = [(2usize, 2usize), (3, 2), (2, 3), (3, 3), (4, 3)];
    for (idx, &(m, n)) in shapes.iter().enumerate() {
        let mut rng = Prng::new(0xB0).fork_stream(idx as u64);
        let vocab = 3;
        let mut store = ParamStore::new();
        let model = SeqModel::init(
            &mut store,
            ModelConfig {
                feature_dim: vocab,
                vocab,
                hidden: 5,
                layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        let posterior = Posterior::init(
            &mut store,
            PosteriorConfig {
                feature_dim: vocab,
                vocab,
                enc_hidden: 4,
                enc_layers: 1,
                dec_hidden: 4,
                dec_layers: 1,
            },
            &mut rng,
        )
        .unwrap();
        let frames = random_frames(&mut rng, m, vocab);
        let y = random_target(&mut rng, n, vocab);
        let mut values: Vec<f64> = (1..=3)
            .map(|k| {
                exact_value(
                    &store,
                    &model,
                    Some(&posterior),
                    &frames,
                    &y,
                    Objective::MultiSampleBound(k),
                )
                .unwrap()
            })
            .collect();
        values.push(exact_log_marginal(&store, &model, &frames, &y).unwrap());
        for w in values.windows(2) {
            worst = worst.max(w[0] - w[1]);
            inequalities += 1;
        }
    }
    verdict(
        4,
        "bound ordering",
        worst <= 1e-9,
        &format!(
            "worst L(k) <= L(k+1) <= exact violation {worst:.3e} over {inequalities} inequalities on {} instances",
            shapes.len()
        ),
    );
}

#[test]
fn c5_baseline_algebra() {
    let mut mismatches: Vec<String> = Vec::new();

    // Leave-one-out = simple average + residual, bit-exact on dyadic rewards
    // (multiples of 0.25, so every sum and halving below is exact in f64).
    let series: Vec<RewardSeries> = [
        vec![-1.5, 0.25, -3.0, 0.5, -0.75],
        vec![0.0, -2.25, 1.5, -0.5, 0.25],
        vec![-0.5, 0.75, -1.25, 2.0, -1.0],
    ]
    .into_iter()
    .map(RewardSeries::from_rewards)
    .collect();
    let mut identities = 0;
    for k in [2usize, 3] {
        let group = &series[..k];
        for i in 0..k {
            for t in 1..=group[i].len() {
                let loo = loo_baseline(group, i, t).unwrap();
                let sa = simple_average_baseline(group, i, t).unwrap();
                let mut residual = 0.0;
                for (j, s) in group.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    for tp in 0..t - 1 {
                        residual += s.r[tp] - group[i].r[tp];
                    }
                }
                residual /= (k - 1) as f64;
                if loo != sa + residual {
                    mismatches.push(format!("loo k={k} i={i} t={t}"));
                }
                identities += 1;
            }
        }
    }

    // Temporal leave-one-out on hand-worked paths. Sample 1 emits at step 1,
    // sample 2 at step 3, sample 3 at step 2; expected values computed by
    // hand from the emission-matching times.
    let r1 = RewardSeries::from_rewards(vec![-1.5, 0.0, 0.0]);
    let r2 = RewardSeries::from_rewards(vec![0.0, 0.0, -2.0]);
    let r3 = RewardSeries::from_rewards(vec![0.0, -0.5, 0.0]);
    let o1: &[usize] = &[1, 1, 1];
    let o2: &[usize] = &[0, 0, 1];
    let o3: &[usize] = &[0, 1, 1];

    let pair = [r1.clone(), r2.clone()];
    let pair_tracks = vec![o1, o2];
    let pair_expect = [
        ((0usize, 1usize), -2.0f64),
        ((0, 2), 0.0),
        ((0, 3), 0.0),
        ((1, 1), -1.5),
        ((1, 2), -1.5),
        ((1, 3), -1.5),
    ];
    for ((i, t), want) in pair_expect {
        let got = temporal_loo_baseline(&pair, &pair_tracks, i, t).unwrap();
        if got != want {
            mismatches.push(format!("temporal k=2 i={i} t={t}: {got} != {want}"));
        }
    }

    let trio = [r1, r2, r3];
    let trio_tracks = vec![o1, o2, o3];
    let trio_expect = [
        ((0usize, 1usize), -1.25f64),
        ((0, 2), 0.0),
        ((2, 2), -1.75),
        ((2, 3), 0.0),
    ];
    for ((i, t), want) in trio_expect {
        let got = temporal_loo_baseline(&trio, &trio_tracks, i, t).unwrap();
        if got != want {
            mismatches.push(format!("temporal k=3 i={i} t={t}: {got} != {want}"));
        }
    }

    let checked = identities + pair_expect.len() + trio_expect.len();
    verdict(
        5,
        "baseline algebra",
        mismatches.is_empty(),
        &format!(
            "{checked} exact equalities{}",
            if mismatches.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {}", mismatches.join("; "))
            }
        ),
    );
}

#[test]
fn c6_variance_reduction() {
    // A mid-training checkpoint: two thousand steps at a conservative learning
    // rate leaves held-out TER around 0.55, where per-sample returns are still
    // dominated by shared path structure — the regime a cross-sample baseline
    // is built for.
    let config = RunConfig {
        seed: 62,
        task: TaskConfig::copy_default(62),
        estimator: EstimatorKind::Reinforce,
        baseline: BaselineKind::TemporalLoo,
        steps: 2000,
        eval_interval: 500,
        optimizer: AdamConfig {
            lr: 3e-4,
            ..AdamConfig::default()
        },
        ..RunConfig::default()
    };
    let mut sink = Vec::new();
    let (trainer, _) = train(config, ExecMode::default(), &mut sink).unwrap();
    let ckpt = trainer.checkpoint().unwrap();
    let specs = vec![
        SpecEntry {
            estimator: EstimatorKind::Reinforce,
            baseline: BaselineKind::TemporalLoo,
            k: 4,
            constant: 0.0,
        },
        SpecEntry {
            estimator: EstimatorKind::Reinforce,
            baseline: BaselineKind::None,
            k: 4,
            constant: 0.0,
        },
    ];
    let rows = report_variance_from_checkpoint(&ckpt, &specs, 2000, 0).unwrap();
    let score = |baseline: &str| {
        rows.iter()
            .find(|r| r.component == "score" && r.baseline == baseline)
            .map(|r| r.trace_variance)
            .unwrap()
    };
    let with = score("temporal_loo");
    let without = score("none");
    verdict(
        6,
        "variance reduction",
        with < without,
        &format!(
            "score-term trace variance {with:.3e} (temporal loo) vs {without:.3e} (none), ratio {:.4}, 2000 draws",
            with / without
        ),
    );
}

#[test]
fn c7_copy_task_convergence() {
    let mut pass = true;
    let mut reached = Vec::new();
    for seed in [0u64, 1, 2] {
        let config = RunConfig {
            seed,
            task: TaskConfig::copy_default(seed),
            steps: 20_000,
            eval_interval: 100,
            target_ter: 0.02,
            ..RunConfig::default()
        };
        let mut sink = Vec::new();
        let (_, summary) = train(config, ExecMode::default(), &mut sink).unwrap();
        match summary.reached_target_at {
            Some(step) if summary.final_ter < 0.02 => reached.push(step.to_string()),
            _ => {
                pass = false;
                reached.push(format!("cap at ter {:.3}", summary.final_ter));
            }
        }
    }
    verdict(
        7,
        "copy-task convergence",
        pass,
        &format!(
            "vimco k=4 loo reached ter < 0.02 at steps [{}] of 20000, seeds 0..2",
            reached.join(", ")
        ),
    );
}

struct MixtureOutcome {
    steps: usize,
    censored: bool,
    series: Series,
}

const MIXTURE_CAP: usize = 12_000;

fn mixture_run(
    rho: f64,
    seed: u64,
    estimator: EstimatorKind,
    baseline: BaselineKind,
    label: String,
) -> MixtureOutcome {
    let config = RunConfig {
        seed,
        task: TaskConfig::mixture(rho, 40 + seed),
        mixture: true,
        estimator,
        baseline,
        steps: MIXTURE_CAP,
        eval_interval: 100,
        target_ter: 0.15,
        ..RunConfig::default()
    };
    let mut metrics = Vec::new();
    let (_, summary) = train(config, ExecMode::default(), &mut metrics).unwrap();
    let series = parse_metrics(&label, &String::from_utf8(metrics).unwrap()).unwrap();
    match summary.reached_target_at {
        Some(step) => MixtureOutcome {
            steps: step,
            censored: false,
            series,
        },
        None => MixtureOutcome {
            steps: MIXTURE_CAP,
            censored: true,
            series,
        },
    }
}

#[test]
fn c8_mixture_convergence_gap() {
    let out_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out_dir).unwrap();
    let rhos = TaskConfig::mixture_rhos();
    let seeds = [0u64, 1, 2];
    let mut gaps = Vec::new();
    let mut wins_mid_rho = 0;
    let mut table =
        String::from("rho,seed,vimco_steps,vimco_censored,reinforce_steps,reinforce_censored,gap\n");
    for &rho in &rhos {
        let mut rho_gap = 0.0;
        let mut curves = Vec::new();
        for &seed in &seeds {
            let v = mixture_run(
                rho,
                seed,
                EstimatorKind::Vimco,
                BaselineKind::Loo,
                format!("vimco seed {seed}"),
            );
            let r = mixture_run(
                rho,
                seed,
                EstimatorKind::Reinforce,
                BaselineKind::TemporalLoo,
                format!("reinforce seed {seed}"),
            );
            let gap = r.steps as f64 - v.steps as f64;
            rho_gap += gap / seeds.len() as f64;
            if rho == rhos[1] && v.steps < r.steps {
                wins_mid_rho += 1;
            }
            table.push_str(&format!(
                "{rho},{seed},{},{},{},{},{gap}\n",
                v.steps, v.censored, r.steps, r.censored
            ));
            curves.push(v.series);
            curves.push(r.series);
        }
        gaps.push(rho_gap);
        let svg = render_curves(&curves).unwrap();
        let name = format!("mixture_rho{:03}.svg", (rho * 100.0).round() as u32);
        std::fs::write(out_dir.join(name), svg).unwrap();
    }
    std::fs::write(out_dir.join("mixture_table.csv"), &table).unwrap();
    let pass = wins_mid_rho >= 2 && gaps[0] > gaps[2];
    verdict(
        8,
        "mixture convergence gap",
        pass,
        &format!(
            "vimco first to ter < 0.15 in {wins_mid_rho}/3 seeds at rho {}; mean step gap at rho {}/{}/{} = {:.0}/{:.0}/{:.0}; curves and table in {}",
            rhos[1],
            rhos[0],
            rhos[1],
            rhos[2],
            gaps[0],
            gaps[1],
            gaps[2],
            out_dir.display()
        ),
    );
}

#[test]
fn c9_determinism() {
    let config = RunConfig {
        seed: 9,
        task: TaskConfig::copy_default(9),
        batch_size: 8,
        steps: 40,
        eval_interval: 10,
        train_examples: 64,
        eval_examples: 16,
        ..RunConfig::default()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    train(config.clone(), ExecMode::default(), &mut a).unwrap();
    train(config.clone(), ExecMode::default(), &mut b).unwrap();
    let rows = String::from_utf8(a.clone()).unwrap().lines().count();
    let metrics_identical = a == b && rows > 1;

    let mut direct = Trainer::new(config).unwrap();
    for _ in 0..3 {
        direct.train_step(ExecMode::default()).unwrap();
    }
    let text = direct.checkpoint().unwrap().encode().unwrap();
    let mut restored = Trainer::from_checkpoint(&Checkpoint::decode(&text).unwrap()).unwrap();
    direct.train_step(ExecMode::default()).unwrap();
    restored.train_step(ExecMode::default()).unwrap();
    let roundtrip_exact = direct.checkpoint().unwrap().encode().unwrap()
        == restored.checkpoint().unwrap().encode().unwrap();

    verdict(
        9,
        "determinism",
        metrics_identical && roundtrip_exact,
        &format!(
            "same-seed metrics bit-identical: {metrics_identical}; checkpoint round-trip next step bit-exact: {roundtrip_exact}"
        ),
    );
}
