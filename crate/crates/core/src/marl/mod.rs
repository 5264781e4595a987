//! Agent Q-networks, value mixers and the training objective.

pub mod agent;
pub mod losses;
pub mod mixer;
pub mod model;

pub use agent::{agent_q, AgentNetwork};
pub use losses::{
    adv_loss_value, adv_rows, masked_mean, target_update, td_loss_from, td_target, total_loss, total_loss_value,
    LossWeights,
};
pub use mixer::{mix, Mixer, MixerKind, QmixMixer};
pub use model::{adv_loss, compute_losses, target_next_values, td_loss, CromacModel, LossSettings, LossTerms, ModelDims, QInput};
