//! Numeric core: dense arrays, reverse-mode gradients, and Adam.

mod array;
mod gradcheck;
mod optim;
mod param;
mod tape;

pub use array::{cross_entropy, masked_softmax, Array, Mask, CE_FLOOR};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{matmul, matmul_nt, matmul_tn, Tape, Var};
