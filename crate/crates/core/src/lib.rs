//! Certifiably robust multi-agent communication.
//!
//! Each agent fuses the messages it receives with a product-of-experts over
//! a shared message encoder, certifies the fused latent with interval bound
//! propagation, and is trained with an adversarial loss that pushes apart the
//! value bounds of competing actions.

pub mod attacks;
pub mod bounds;
pub mod diffcore;
pub mod envs;
pub mod harness;
pub mod latent;
pub mod marl;
pub mod verify;
mod error;

pub use error::{Error, Result};
