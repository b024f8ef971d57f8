//! Compares one optimizer step of the data-parallel batch path against the
//! sequential fallback. Both modes produce bit-identical parameters; this
//! bench measures what the rayon pool buys (or costs, on one core) per step.
//!
//! Run with `cargo bench` for both modes, or
//! `cargo bench --no-default-features` for the sequential build alone.

use criterion::{criterion_group, criterion_main, Criterion};

use hardalign::harness::{ModelDims, PosteriorDims, RunConfig, Trainer};
use hardalign::tasks::TaskConfig;
use hardalign::ExecMode;

/// A mid-sized workload: big enough that the per-example rollouts dominate
/// the ordered reduction, small enough for a quick wall-clock run.
fn bench_config() -> RunConfig {
    RunConfig {
        seed: 0,
        task: TaskConfig {
            vocab: 8,
            n_min: 3,
            n_max: 5,
            dwell: 2,
            noise: 0.1,
            rho: 1.0,
            seed: 0,
        },
        model: ModelDims {
            hidden: 12,
            layers: 1,
        },
        posterior: PosteriorDims {
            enc_hidden: 8,
            enc_layers: 1,
            dec_hidden: 8,
            dec_layers: 1,
        },
        k: 4,
        batch_size: 8,
        train_examples: 64,
        eval_examples: 8,
        ..RunConfig::default()
    }
}

fn bench_modes(c: &mut Criterion) {
    let modes = [
        ("sequential", ExecMode::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", ExecMode::Parallel),
    ];

    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (label, mode) in modes {
        group.bench_function(label, |b| {
            let mut trainer = Trainer::new(bench_config()).expect("trainer");
            b.iter(|| trainer.train_step(mode).expect("step"));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_modes);
criterion_main!(benches);
