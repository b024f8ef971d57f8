//! Synthetic transduction tasks with known ground-truth alignments.
//!
//! The copy task turns each target token into `d` consecutive one-hot frames
//! (plus Gaussian noise), so a model must learn to dwell `d` steps per
//! emission. The mixture task overlays an independent distractor stream at
//! relative amplitude `ρ`, keeping only the primary stream's transcript as
//! the label — the desk-scale analogue of transcribing one speaker in a
//! two-speaker mix.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::diffcore::rng::Prng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Vocabulary size; frames have this many channels.
    pub vocab: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Frames per token.
    pub dwell: usize,
    /// Frame noise standard deviation.
    pub noise: f64,
    /// Distractor amplitude for the mixture task, in (0, 1].
    pub rho: f64,
    pub seed: u64,
}

impl TaskConfig {
    /// Copy-task defaults used throughout the experiments: V = 8 tokens,
    /// 4–8 per sequence, two frames per token, light noise.
    pub fn copy_default(seed: u64) -> Self {
        TaskConfig {
            vocab: 8,
            n_min: 4,
            n_max: 8,
            dwell: 2,
            noise: 0.1,
            rho: 1.0,
            seed,
        }
    }

    /// Mixture-task preset at one of the standard distractor amplitudes.
    pub fn mixture(rho: f64, seed: u64) -> Self {
        TaskConfig {
            rho,
            ..TaskConfig::copy_default(seed)
        }
    }

    /// The three standard mixing proportions, largest first.
    pub fn mixture_rhos() -> [f64; 3] {
        [0.5, 0.25, 0.1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::validation("vocab must be at least 2"));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::validation(format!(
                "invalid length range [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        if self.dwell < 1 {
            return Err(Error::validation("dwell must be at least 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::validation("noise must be nonnegative"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::validation("rho must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One input/target pair with its generator alignment: `alignment[i]` is the
/// 1-based index of the last frame belonging to token `i`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SequencePair {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub alignment: Vec<usize>,
}

impl SequencePair {
    pub fn m(&self) -> usize {
        self.x.len()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self, config: &TaskConfig) -> Result<()> {
        if self.y.len() < self.alignment.len() || self.y.len() != self.alignment.len() {
            return Err(Error::validation("alignment and target lengths differ"));
        }
        if self.y.iter().any(|&t| t >= config.vocab) {
            return Err(Error::validation("token outside vocabulary"));
        }
        let mut prev = 0;
        for &a in &self.alignment {
            if a <= prev || a > self.m() {
                return Err(Error::validation("alignment must be strictly increasing"));
            }
            prev = a;
        }
        if self.x.iter().any(|f| f.len() != config.vocab) {
            return Err(Error::validation("frame width differs from vocab"));
        }
        Ok(())
    }
}

fn raw_copy(config: &TaskConfig, rng: &mut Prng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let n = rng.range_inclusive(config.n_min, config.n_max);
    let y: Vec<usize> = (0..n).map(|_| rng.below(config.vocab)).collect();
    let mut x = Vec::with_capacity(n * config.dwell);
    let mut alignment = Vec::with_capacity(n);
    for &token in &y {
        for _ in 0..config.dwell {
            let mut frame = vec![0.0; config.vocab];
            frame[token] = 1.0;
            if config.noise > 0.0 {
                for v in &mut frame {
                    *v += config.noise * rng.normal();
                }
            }
            x.push(frame);
        }
        alignment.push(x.len());
    }
    (x, y, alignment)
}

/// Frame-dwell copy task: `y` uniform, `m = n · d` one-hot frames plus
/// noise.
pub fn gen_copy(config: &TaskConfig, rng: &mut Prng) -> Result<SequencePair> {
    config.validate()?;
    let (x, y, alignment) = raw_copy(config, rng);
    Ok(SequencePair { x, y, alignment })
}

fn max_abs_normalize(x: &mut [Vec<f64>]) {
    for frame in x {
        let peak = frame.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if peak > 0.0 {
            for v in frame {
                *v /= peak;
            }
        }
    }
}

/// Two-stream mixture task: a primary copy stream plus an independent
/// distractor, both per-frame max-abs normalized, mixed as
/// `x = primary + ρ · distractor`; the label is the primary transcript. The
/// distractor is cropped or zero-padded to the primary length.
pub fn gen_mixture(config: &TaskConfig, rng: &mut Prng) -> Result<SequencePair> {
    config.validate()?;
    let (mut x, y, alignment) = raw_copy(config, rng);
    let (mut distractor, _, _) = raw_copy(config, rng);
    max_abs_normalize(&mut x);
    max_abs_normalize(&mut distractor);
    let m = x.len();
    distractor.resize(m, vec![0.0; config.vocab]);
    for (frame, extra) in x.iter_mut().zip(&distractor) {
        for (v, e) in frame.iter_mut().zip(extra) {
            *v += config.rho * e;
        }
    }
    Ok(SequencePair { x, y, alignment })
}

/// Levenshtein edit distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by reference length.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::validation("token_error_rate needs a nonempty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Line-delimited record layout for dataset files.
#[derive(serde::Serialize, serde::Deserialize)]
struct Record {
    m: usize,
    n: usize,
    frames: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    alignment: Vec<usize>,
}

/// Deterministically generates `count` examples from the config's seed,
/// using the mixture generator when `mixture` is set.
pub fn generate_dataset(
    config: &TaskConfig,
    count: usize,
    mixture: bool,
) -> Result<Vec<SequencePair>> {
    config.validate()?;
    let mut rng = Prng::new(config.seed);
    (0..count)
        .map(|_| {
            if mixture {
                gen_mixture(config, &mut rng)
            } else {
                gen_copy(config, &mut rng)
            }
        })
        .collect()
}

pub fn write_dataset(path: &Path, pairs: &[SequencePair]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in pairs {
        let record = Record {
            m: p.m(),
            n: p.n(),
            frames: p.x.clone(),
            tokens: p.y.clone(),
            alignment: p.alignment.clone(),
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::validation(format!("serializing dataset record: {e}")))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SequencePair>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::validation(format!("dataset line {}: {e}", idx + 1)))?;
        if record.frames.len() != record.m || record.tokens.len() != record.n {
            return Err(Error::validation(format!(
                "dataset line {}: declared sizes disagree with payload",
                idx + 1
            )));
        }
        pairs.push(SequencePair {
            x: record.frames,
            y: record.tokens,
            alignment: record.alignment,
        });
    }
    Ok(pairs)
}
