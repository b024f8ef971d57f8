//! Scalar and slice-level numeric kernels shared by the tape ops and by
//! forward-only callers (sampling, decoding, oracles).

/// Probability floor applied before taking logs of sampled probabilities
/// and when extracting reward values. Keeps reward series bounded even
/// when a model assigns vanishing mass to an outcome.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln(PROB_FLOOR)`, the corresponding floor on log-probabilities.
pub fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-probability of a Bernoulli outcome given the logit of "true".
///
/// `bernoulli_logprob(l, true) = -ln(1 + e^{-l})`, stabilized so that
/// large-magnitude logits neither overflow nor lose the linear tail.
pub fn bernoulli_logprob(logit: f64, outcome: bool) -> f64 {
    if outcome {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

/// Writes the log-softmax of `logits` into `out` (max-shifted).
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        let s = x - max;
        *o = s;
        sum += s.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, &mut out);
    out
}

/// `ln(sum(e^{x_i}))` with max-shift; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable `ln(a + b)` for log-space accumulators.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_minus_log_v() {
        let out = log_softmax(&[0.7, 0.7, 0.7, 0.7]);
        for v in out {
            assert!((v + 4.0f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_handles_extreme_logits() {
        let out = log_softmax(&[1000.0, 0.0]);
        assert!(out[0].abs() < 1e-9);
        assert!((out[1] + 1000.0).abs() < 1e-9);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_normalizes() {
        let out = log_softmax(&[0.3, -1.2, 2.5, 0.0, 4.0]);
        assert!(logsumexp(&out).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_logprob_at_zero_logit() {
        let half = -(2.0f64.ln());
        assert!((bernoulli_logprob(0.0, true) - half).abs() < 1e-15);
        assert!((bernoulli_logprob(0.0, false) - half).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_logprob_is_stable_at_large_logits() {
        assert!((bernoulli_logprob(800.0, true) - 0.0).abs() < 1e-12);
        assert!((bernoulli_logprob(800.0, false) + 800.0).abs() < 1e-9);
        assert!((bernoulli_logprob(-800.0, true) + 800.0).abs() < 1e-9);
        assert!(bernoulli_logprob(-800.0, false).is_finite());
    }

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [0.1_f64, -0.4, 1.3];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - direct).abs() < 1e-12);
    }

    #[test]
    fn log_add_exp_handles_neg_infinity() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -1.0), -1.0);
        assert_eq!(log_add_exp(-1.0, f64::NEG_INFINITY), -1.0);
        let v = log_add_exp(-2.0, -3.0);
        assert!((v - ((-2.0f64).exp() + (-3.0f64).exp()).ln()).abs() < 1e-12);
    }
}
