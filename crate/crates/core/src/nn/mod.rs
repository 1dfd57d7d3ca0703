//! Differentiable-computation substrate: tensors, a reverse-mode tape,
//! layers, optimizers, checkpointing and a finite-difference gradient checker.

pub mod ckpt;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use ckpt::{read_checkpoint, write_checkpoint, CKPT_MAGIC};
pub use gradcheck::{gradcheck, gradcheck_all, GradCheckReport};
pub use layers::{
    causal_self_attention, causal_self_attention_tape, cross_entropy, gaussian_kl,
    linear_forward, reparameterize,
};
pub use optim::{optimizer_step, OptimKind, OptimizerConfig, ParamEntry, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::{argmax, matmul, softmax, Tensor};
