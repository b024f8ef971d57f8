//! Hard-alignment sequence-to-sequence models trained with score-function
//! gradient estimators.
//!
//! The model transduces a sequence of input frames into a sequence of output
//! tokens through a latent sequence of binary emit/consume decisions — a hard
//! monotonic alignment. Exact marginalization over alignments is exponential,
//! so training relies on sampled gradient estimators: REINFORCE on the
//! forced-alignment sampling law, a single-sample variational bound with a
//! learned posterior, and a multi-sample importance-weighted bound. Their
//! variance is tamed with leave-one-out baselines, including a temporal
//! variant that matches trajectories at equal emission progress rather than
//! equal step index.
//!
//! Everything runs on 64-bit floats over an explicit autodiff tape with a
//! fixed accumulation order, so runs are reproducible bit for bit; small
//! instances are cross-checked against enumeration oracles that compute the
//! exact marginal likelihood, exact bound values, and exact bound gradients.

pub mod alignment;
pub mod diffcore;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod oracle;
pub mod posterior;
pub mod harness;
pub mod seqmodel;
pub mod tasks;

pub use error::{Error, Result};
pub use exec::ExecMode;
