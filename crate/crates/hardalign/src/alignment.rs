//! Emit/consume decision paths and their bookkeeping.
//!
//! A hard monotonic alignment between `m` input frames and `n` output tokens
//! is a bit sequence `b` of length `T = m + n`: step `t` either emits the
//! next token (`b_t = 1`) or consumes the next frame (`b_t = 0`). Exactly `n`
//! steps emit, so exactly `m` consume. The derived tracks are the output
//! position `O(t) = Σ_{i≤t} b_i` and the input position
//! `I(t) = 1 + Σ_{i<t} (1 − b_i)`, both 1-indexed in `t` with the convention
//! `O(0) = 0`.
//!
//! `I(t)` as defined can reach `m + 1` on paths that consume every frame
//! before the last step; conditioning always reads the clipped track
//! `min(I(t), m)`, i.e. the model dwells on the final frame. `is_strict`
//! identifies the subset of paths where the last consume is the final step,
//! for callers that want to exclude the clipped tail entirely.

use crate::error::{Error, Result};

/// Hard upper bound on `m + n` for exhaustive enumeration.
pub const ENUMERATION_GUARD: usize = 24;

/// A complete emit/consume path. `true` emits a token, `false` consumes a
/// frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    b: Vec<bool>,
    m: usize,
    n: usize,
}

impl AlignmentPath {
    pub fn new(b: Vec<bool>, m: usize, n: usize) -> Result<Self> {
        if b.len() != m + n {
            return Err(Error::validation(format!(
                "path length {} does not equal m + n = {}",
                b.len(),
                m + n
            )));
        }
        let emitted = b.iter().filter(|&&x| x).count();
        if emitted != n {
            return Err(Error::validation(format!(
                "path has {emitted} emissions, expected n = {n}"
            )));
        }
        Ok(AlignmentPath { b, m, n })
    }

    pub fn decisions(&self) -> &[bool] {
        &self.b
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of steps `T = m + n`.
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Decision at 1-indexed step `t`.
    pub fn emit_at(&self, t: usize) -> bool {
        self.b[t - 1]
    }

    pub fn positions(&self) -> PositionTracks {
        PositionTracks::from_decisions(&self.b, self.m)
    }

    /// True when the `m`-th consume is the final step, so the unclipped
    /// input position never exceeds `m`.
    pub fn is_strict(&self) -> bool {
        self.m >= 1
            && !self.b[self.b.len() - 1]
            && self.positions().i.iter().all(|&i| i <= self.m)
    }
}

/// Position tracks for one path; entry `t - 1` holds the value at 1-indexed
/// step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionTracks {
    /// `O(t)`: tokens emitted through step `t`.
    pub o: Vec<usize>,
    /// `I(t)`: unclipped input position entering step `t`.
    pub i: Vec<usize>,
    /// `min(I(t), m)`: the frame index actually read at step `t`.
    pub iclip: Vec<usize>,
}

impl PositionTracks {
    pub fn from_decisions(b: &[bool], m: usize) -> Self {
        let mut o = Vec::with_capacity(b.len());
        let mut i = Vec::with_capacity(b.len());
        let mut iclip = Vec::with_capacity(b.len());
        let mut emitted = 0usize;
        let mut consumed = 0usize;
        for &emit in b {
            let pos = 1 + consumed;
            i.push(pos);
            iclip.push(pos.min(m));
            if emit {
                emitted += 1;
            } else {
                consumed += 1;
            }
            o.push(emitted);
        }
        PositionTracks { o, i, iclip }
    }

    /// `O(t)` with the `O(0) = 0` convention.
    pub fn o_at(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            self.o[t - 1]
        }
    }
}

/// Decision constraint at one sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    Free,
    ForceEmit,
    ForceConsume,
}

/// Constraint for step `t` (1-indexed) given `emitted` and `consumed`
/// counters over steps `1..t`. Sampling under this mask always yields a
/// complete path with `Σ b = n`.
pub fn forcing_mask(
    t: usize,
    emitted: usize,
    consumed: usize,
    m: usize,
    n: usize,
) -> Result<Forcing> {
    let total = m + n;
    if t < 1 || t > total {
        return Err(Error::validation(format!(
            "step t = {t} outside 1..={total}"
        )));
    }
    if emitted > n || consumed > m {
        return Err(Error::validation(format!(
            "counters emitted={emitted}, consumed={consumed} exceed n={n}, m={m}"
        )));
    }
    if emitted + consumed != t - 1 {
        return Err(Error::validation(format!(
            "inconsistent counters at t={t}: emitted={emitted} + consumed={consumed} != {}",
            t - 1
        )));
    }
    let steps_left = total - t + 1;
    if n - emitted == steps_left {
        Ok(Forcing::ForceEmit)
    } else if emitted == n {
        Ok(Forcing::ForceConsume)
    } else {
        Ok(Forcing::Free)
    }
}

/// Which steps of a complete path the forcing mask would have overridden;
/// these are the steps with sampling probability 1.
pub fn forced_mask(path: &AlignmentPath) -> Result<Vec<bool>> {
    let (m, n) = (path.m(), path.n());
    let mut emitted = 0;
    let mut consumed = 0;
    let mut out = Vec::with_capacity(path.len());
    for t in 1..=path.len() {
        let forcing = forcing_mask(t, emitted, consumed, m, n)?;
        let emit = path.emit_at(t);
        match forcing {
            Forcing::ForceEmit if !emit => {
                return Err(Error::validation(format!(
                    "path consumes at step {t} where emission is forced"
                )))
            }
            Forcing::ForceConsume if emit => {
                return Err(Error::validation(format!(
                    "path emits at step {t} where consumption is forced"
                )))
            }
            _ => {}
        }
        out.push(forcing != Forcing::Free);
        if emit {
            emitted += 1;
        } else {
            consumed += 1;
        }
    }
    Ok(out)
}

/// All `C(m + n, n)` complete paths, emissions-first at every branch: for
/// `m = 2, n = 1` the order is `(1,0,0), (0,1,0), (0,0,1)`.
pub fn enumerate_paths(m: usize, n: usize) -> Result<Vec<AlignmentPath>> {
    if m < 1 {
        return Err(Error::validation("enumerate_paths requires m >= 1"));
    }
    if m + n > ENUMERATION_GUARD {
        return Err(Error::size_guard(format!(
            "enumerate_paths: m + n = {} exceeds guard {ENUMERATION_GUARD}",
            m + n
        )));
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(m + n);
    extend(&mut out, &mut prefix, m, n, 0, 0);
    Ok(out)
}

fn extend(
    out: &mut Vec<AlignmentPath>,
    prefix: &mut Vec<bool>,
    m: usize,
    n: usize,
    emitted: usize,
    consumed: usize,
) {
    if prefix.len() == m + n {
        out.push(AlignmentPath {
            b: prefix.clone(),
            m,
            n,
        });
        return;
    }
    if emitted < n {
        prefix.push(true);
        extend(out, prefix, m, n, emitted + 1, consumed);
        prefix.pop();
    }
    if consumed < m {
        prefix.push(false);
        extend(out, prefix, m, n, emitted, consumed + 1);
        prefix.pop();
    }
}
