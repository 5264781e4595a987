//! Gaussian latents: the state VAE, the shared message encoder, product of
//! experts fusion and the ELBO / alignment losses.

pub mod encoders;
pub mod fusion;
pub mod gaussian;

pub use encoders::{
    encode_state, kl_to_standard_rows, positive_variance, reparameterize, state_encoder_calls, state_vae_loss, state_vae_loss_rows,
    MessageEncoder, StateVae, VARIANCE_FLOOR,
};
pub use fusion::{fuse_messages, gaussian_kl_rows, message_kl_rows, poe_fuse_taped};
pub use gaussian::{gaussian_kl, message_kl_loss, poe_fuse, DiagonalGaussian, KlDirection};
