//! Reverse-mode differentiation and the neural building blocks consumed by
//! every other module: affine layers, a GRU cell, Adam, a finite-difference
//! gradient oracle and the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{clip_grad_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, finite_diff_check_params, finite_diff_check_store};
pub use gru::{GruCell, GruState};
pub use layers::{linear_forward, AffineLayer, Mlp};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
