use rand_chacha::ChaCha8Rng;

use super::actor::Policy;
use super::batch::Episode;
use crate::attacks::AttackSpec;
use crate::diffcore::Tensor;
use crate::envs::Env;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub total_reward: f64,
    pub win: bool,
    pub len: usize,
    /// Largest message change the attack made in any step.
    pub max_deviation: f64,
    /// Clean messages of the final decision, `[N, H]`.
    pub last_messages: Tensor,
}

/// Play one episode to termination or the step limit.
pub fn run_episode<P: Policy>(
    env: &mut Env,
    policy: &mut P,
    attack: &AttackSpec,
    env_rng: &mut ChaCha8Rng,
    act_rng: &mut ChaCha8Rng,
) -> Result<(Episode, EpisodeSummary)> {
    policy.reset();
    let first = env.reset(env_rng);
    let mut ep = Episode {
        obs: vec![first.obs],
        states: vec![first.state],
        actions: Vec::new(),
        rewards: Vec::new(),
        terminated: false,
        win: false,
        msg_masks: None,
    };
    let mut masks = Vec::new();
    let mut max_dev: f64 = 0.0;
    let mut last_messages;
    loop {
        let d = policy.act(ep.obs.last().expect("nonempty"), attack, act_rng)?;
        max_dev = max_dev.max(d.deviation);
        last_messages = d.messages;
        if let Some(m) = d.mask {
            masks.push(m);
        }
        let r = env.step(&d.actions, env_rng)?;
        let done = r.done();
        ep.actions.push(d.actions);
        ep.rewards.push(r.reward);
        ep.obs.push(r.obs);
        ep.states.push(r.state);
        if done {
            ep.terminated = r.terminated;
            ep.win = r.info.win;
            break;
        }
    }
    if !masks.is_empty() {
        if let Some(m) = policy.terminal_mask(act_rng)? {
            masks.push(m);
        }
        ep.msg_masks = Some(masks);
    }
    let summary = EpisodeSummary { total_reward: ep.total_reward(), win: ep.win, len: ep.len(), max_deviation: max_dev, last_messages };
    Ok((ep, summary))
}
