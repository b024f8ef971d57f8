//! Data-parallel map with a deterministic, order-preserving contract.
//!
//! Batch rollouts, estimator report draws, and evaluation decodes are all
//! independent per item, so they go through [`map_ordered`]. Results come
//! back in input order and any reduction the caller performs is serial, so
//! output bits do not depend on thread count or scheduling. With the
//! `parallel` feature disabled everything runs sequentially through the
//! same entry points.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to execute a batch of independent jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }

    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Sequential
    }
}

/// Applies `f` to `0..n` and returns the results in index order.
pub fn map_ordered<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Applies `f` over a slice and returns results in input order.
pub fn map_slice_ordered<'a, T, U, F>(mode: ExecMode, items: &'a [T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&'a T) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_results_match_sequential() {
        let seq = map_ordered(ExecMode::Sequential, 100, |i| i * i);
        let def = map_ordered(ExecMode::default(), 100, |i| i * i);
        assert_eq!(seq, def);
    }
}
