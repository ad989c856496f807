//! Differentiable sparse operators.
//!
//! Forward passes record onto a [`Tape`]; [`Tape::backward`] returns
//! gradients for parameters and any inputs that asked for them. Layers keep
//! their tensors in a [`ParamStore`] so checkpoints and the optimizer can see
//! every parameter by name.

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{BatchNorm, Conv, SqueezeExcite};
pub use ops::{BatchNormState, BnMode, ConvWeights, SparseVar};
pub use optim::{adam_step, cosine_anneal, AdamState};
pub use params::{Ctx, Mode, NamedTensor, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
