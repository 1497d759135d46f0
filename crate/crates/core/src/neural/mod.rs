//! Dense tensors, reverse-mode differentiation and the recurrent layers built on them.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::{
    bigru, bigru_with_init, gru_cell, linear, max_pool_window, softmax_rows, BiGru, GruParams,
};
pub use optim::{clip_grad_norm, sgd_step, Sgd};
pub use tensor::{Grads, ParamId, ParamStore, Tensor};
