//! Minimal hand-differentiated layer toolkit for 1D sequence models.
//!
//! Every tensor is a [`Tensor2`] laid out as `time x channels`. Layers operate
//! on batches (`&[Tensor2]`), cache what their backward pass needs, and
//! accumulate parameter gradients into their own buffers. Optimisation is
//! done with [`adam_step`] over each layer's [`LayerState`].
//!
//! The crate deliberately avoids a general autodiff graph: each layer carries
//! its own analytic backward pass, and [`grad_check`] verifies it against
//! central finite differences.

mod bundle;
mod error;
mod gemm;
mod gradcheck;
mod layer;
pub mod layers;
mod loss;
mod state;
mod tensor;

pub use bundle::{load_bundle, save_bundle, NamedArray};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_with_inputs, GradCheckReport};
pub use layer::{Layer, Mode, Sequential};
pub use loss::{mae_loss, softmax};
pub use state::{adam_step, AdamConfig, LayerState, Param};
pub use tensor::Tensor2;
