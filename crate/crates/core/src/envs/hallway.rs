use rand::Rng;

use super::{EnvSpec, StepInfo, StepResult};
use crate::error::{contract_err, Result};

pub const TOWARD: usize = 0;
pub const STAY: usize = 1;
pub const AWAY: usize = 2;

/// Parallel corridors, one agent each. Position 0 is the goal `g`; agent `i`
/// starts uniformly in `1..=lengths[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hallway {
    lengths: Vec<usize>,
    pos: Vec<usize>,
    t: usize,
    done: bool,
    spec: EnvSpec,
}

impl Hallway {
    pub fn new(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return contract_err("hallway needs at least one corridor of positive length");
        }
        let n = lengths.len();
        let width = lengths.iter().max().copied().unwrap_or(0) + 1;
        let name = format!("hallway-{}", lengths.iter().map(usize::to_string).collect::<Vec<_>>().join("x"));
        let spec = EnvSpec::new(name, n, 3, width, n * width, width - 1 + 10)?;
        Ok(Self { lengths: lengths.to_vec(), pos: lengths.to_vec(), t: 0, done: true, spec })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    /// Place agents explicitly and restart the step counter.
    pub fn set_positions(&mut self, pos: &[usize]) -> Result<StepResult> {
        if pos.len() != self.lengths.len() || pos.iter().zip(&self.lengths).any(|(p, l)| p > l) {
            return contract_err("positions out of corridor range");
        }
        self.pos = pos.to_vec();
        self.t = 0;
        self.done = false;
        Ok(self.result(0.0, false, false, false))
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> StepResult {
        self.pos = self.lengths.iter().map(|&l| rng.gen_range(1..=l)).collect();
        self.t = 0;
        self.done = false;
        self.result(0.0, false, false, false)
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return contract_err("step called on a finished episode");
        }
        if actions.len() != self.lengths.len() || actions.iter().any(|&a| a > AWAY) {
            return contract_err(format!("hallway expects {} actions in 0..3", self.lengths.len()));
        }
        for ((p, &l), &a) in self.pos.iter_mut().zip(&self.lengths).zip(actions) {
            *p = match a {
                TOWARD => p.saturating_sub(1),
                STAY => *p,
                _ => (*p + 1).min(l),
            };
        }
        self.t += 1;
        let at_goal = self.pos.iter().filter(|&&p| p == 0).count();
        let win = at_goal == self.pos.len();
        let terminated = at_goal > 0;
        let truncated = !terminated && self.t >= self.spec.episode_limit;
        self.done = terminated || truncated;
        Ok(self.result(if win { 1.0 } else { 0.0 }, terminated, truncated, win))
    }

    pub fn observation(&self, agent: usize) -> Result<Vec<f64>> {
        if agent >= self.pos.len() {
            return contract_err(format!("agent {agent} out of range"));
        }
        let mut o = vec![0.0; self.spec.obs_dim];
        o[self.pos[agent]] = 1.0;
        Ok(o)
    }

    pub fn state(&self) -> Vec<f64> {
        (0..self.pos.len()).flat_map(|i| self.observation(i).expect("in range")).collect()
    }

    fn result(&self, reward: f64, terminated: bool, truncated: bool, win: bool) -> StepResult {
        StepResult {
            obs: (0..self.pos.len()).map(|i| self.observation(i).expect("in range")).collect(),
            state: self.state(),
            reward,
            terminated,
            info: StepInfo { win, truncated, step: self.t },
        }
    }
}
