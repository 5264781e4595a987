//! Training loop, rollouts, evaluation and run artefacts.

pub mod actor;
pub mod batch;
pub mod buffer;
pub mod config;
pub mod eval;
pub mod explore;
pub mod metrics;
pub mod rollout;
pub mod train;

pub use actor::{Actor, Decision, Fusion, Policy};
pub use batch::{agent_input, Episode, EpisodeBatch};
pub use buffer::ReplayBuffer;
pub use config::{Method, RunConfig};
pub use eval::{evaluate_policy, fgsm_schedule, load_model, run_evaluation, run_evaluation_with, table_attacks, EvalReport};
pub use explore::{argmax, epsilon_greedy, ExplorationSchedule};
pub use metrics::{MetricsRow, MetricsWriter, RunManifest, METRICS_HEADER};
pub use rollout::{run_episode, EpisodeSummary};
pub use train::{build_model, evaluation_fusion, run_training, run_training_with, training_fusion, TrainOutcome, CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE};
