//! Differentiable numeric core: dense tensors, a reverse-mode tape, LSTM and
//! affine layers, stable probability kernels, and a seeded counter-based RNG.

pub mod check;
pub mod lstm;
pub mod math;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use check::{finite_difference, FiniteDiffReport};
pub use lstm::{Linear, LstmCell, LstmStack, LstmState};
pub use math::{
    bernoulli_logprob, log_add_exp, log_floor, log_softmax, logsumexp, sigmoid, softplus,
    PROB_FLOOR,
};
pub use params::{Gradients, ParamStore, SlotId};
pub use rng::{Prng, RngState};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
