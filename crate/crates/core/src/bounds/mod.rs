//! Interval bound propagation: ε-balls, affine and monotone layers,
//! per-message encoder bounds, bounds on the fused latent and per-action
//! value bounds.

pub mod chain;
pub mod fused;
pub mod interval;
pub mod report;

pub use chain::{
    encoder_bounds, ibp_chain, ibp_chain_taped, mlp_chain, q_value_bounds, q_value_bounds_taped, Activation,
    ChainLayer, EncoderBounds,
};
pub use fused::{integration_error_bound, mean_shift, poe_harmonic_bounds, variance_envelope, FusedBounds};
pub use interval::{
    epsilon_ball, ibp_affine, ibp_affine_raw, ibp_monotonic, ibp_monotonic_with, IntervalBounds, Monotone,
    PerturbationBudget,
};
pub use report::{fused_message_bounds, BoundReportWriter};
