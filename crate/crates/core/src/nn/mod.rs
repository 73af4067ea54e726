//! Minimal differentiable core: dense networks, losses, and Adam.

mod adam;
pub mod checkpoint;
mod loss;
mod mlp;

pub use adam::{clip_grad_norm, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use loss::{gaussian_kl, l1_loss, mse_loss, KlTerm};
pub use mlp::{Activation, Gradients, Mlp, Tape};
