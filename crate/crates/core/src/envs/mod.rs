//! Cooperative environments: Hallway, level-based foraging with a single
//! sighted agent, and the easy traffic junction.

pub mod hallway;
pub mod lbf;
pub mod tj;

use rand::Rng;

use crate::error::{contract_err, Error, Result};

pub use hallway::Hallway;
pub use lbf::Foraging;
pub use tj::TrafficJunction;

/// Static description of an environment instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSpec {
    pub name: String,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
}

impl EnvSpec {
    pub fn new(
        name: impl Into<String>,
        n_agents: usize,
        n_actions: usize,
        obs_dim: usize,
        state_dim: usize,
        episode_limit: usize,
    ) -> Result<Self> {
        if n_agents == 0 || obs_dim == 0 || state_dim == 0 || episode_limit == 0 || n_actions < 2 {
            return contract_err("environment sizes must be positive with at least two actions");
        }
        Ok(Self { name: name.into(), n_agents, n_actions, obs_dim, state_dim, episode_limit })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepInfo {
    pub win: bool,
    /// The step limit ended the episode.
    pub truncated: bool,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.info.truncated
    }
}

/// Ids accepted by [`Env::from_id`]. Any `hallway-AxBx..` also parses.
pub const ENV_IDS: [&str; 7] = ["hallway-4x5x6", "hallway-3x3x4x4", "hallway-3x4x5", "lbf-3p1f", "lbf-4p1f", "tj-slow", "tj-fast"];

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Hallway(Hallway),
    Foraging(Foraging),
    Junction(TrafficJunction),
}

impl Env {
    pub fn from_id(id: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown environment id {id:?}"));
        match id {
            "lbf-3p1f" => return Ok(Self::Foraging(Foraging::new(3, 8, 3, 25)?)),
            "lbf-4p1f" => return Ok(Self::Foraging(Foraging::new(4, 8, 3, 15)?)),
            "tj-slow" => return Ok(Self::Junction(TrafficJunction::new(id, 5, 7, 0.3, 20)?)),
            "tj-fast" => return Ok(Self::Junction(TrafficJunction::new(id, 4, 7, 0.4, 20)?)),
            _ => {}
        }
        let lengths = id
            .strip_prefix("hallway-")
            .ok_or_else(unknown)?
            .split('x')
            .map(|s| s.parse::<usize>().map_err(|_| unknown()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Hallway(Hallway::new(&lengths)?))
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            Self::Hallway(e) => e.spec(),
            Self::Foraging(e) => e.spec(),
            Self::Junction(e) => e.spec(),
        }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> StepResult {
        match self {
            Self::Hallway(e) => e.reset(rng),
            Self::Foraging(e) => e.reset(rng),
            Self::Junction(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, actions: &[usize], rng: &mut impl Rng) -> Result<StepResult> {
        match self {
            Self::Hallway(e) => e.step(actions),
            Self::Foraging(e) => e.step(actions),
            Self::Junction(e) => e.step(actions, rng),
        }
    }

    pub fn observation(&self, agent: usize) -> Result<Vec<f64>> {
        match self {
            Self::Hallway(e) => e.observation(agent),
            Self::Foraging(e) => e.observation(agent),
            Self::Junction(e) => e.observation(agent),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        match self {
            Self::Hallway(e) => e.state(),
            Self::Foraging(e) => e.state(),
            Self::Junction(e) => e.state(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_shapes() {
        for id in ENV_IDS {
            let e = Env::from_id(id).unwrap();
            let s = e.spec();
            assert!(s.n_agents > 0 && s.n_actions >= 2, "{id}");
        }
        assert_eq!(Env::from_id("hallway-4x5x6").unwrap().spec().n_agents, 3);
        assert_eq!(Env::from_id("hallway-3x3x4x4").unwrap().spec().n_agents, 4);
        assert_eq!(Env::from_id("lbf-4p1f").unwrap().spec().episode_limit, 15);
        assert_eq!(Env::from_id("tj-fast").unwrap().spec().n_agents, 4);
        assert!(matches!(Env::from_id("smac"), Err(Error::Config(_))));
        assert!(Env::from_id("hallway-3xq").is_err());
    }

    fn rollout(id: &str, seed: u64) -> Vec<StepResult> {
        let mut env = Env::from_id(id).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![env.reset(&mut rng)];
        let (n, a) = (env.spec().n_agents, env.spec().n_actions);
        while !out.last().unwrap().done() {
            let acts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a)).collect();
            out.push(env.step(&acts, &mut rng).unwrap());
        }
        out
    }

    #[test]
    fn seeded_rollouts_repeat_and_respect_limits() {
        for id in ENV_IDS {
            let a = rollout(id, 17);
            assert_eq!(a, rollout(id, 17), "{id}");
            let spec = Env::from_id(id).unwrap().spec().clone();
            assert!(a.len() - 1 <= spec.episode_limit);
            for r in &a {
                assert_eq!(r.obs.len(), spec.n_agents);
                assert!(r.obs.iter().all(|o| o.len() == spec.obs_dim));
                assert_eq!(r.state.len(), spec.state_dim);
                assert!(r.reward.is_finite());
            }
        }
    }
}
