//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod mlp;
mod optim;
mod tape;

pub use gradcheck::{check_gradients, check_leaf_gradients, GradCheck};
pub use mlp::{Activation, Layer, MlpParams, MlpVars};
pub use optim::{clip_grad_norm, cosine_lr, sgd_step, ParamStore, Parameters};
pub use tape::{Gradients, Tape, Var};
