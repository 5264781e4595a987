use rand::Rng;

use super::{EnvSpec, StepInfo, StepResult};
use crate::error::{contract_err, Result};

pub const NOOP: usize = 0;
pub const NORTH: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;
pub const EAST: usize = 4;
pub const LOAD: usize = 5;

const AGENT_LEVEL: usize = 1;

/// Level-based foraging with a single food item where only agent 0 sees the
/// map. Every other agent observes its own coordinates and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct Foraging {
    size: usize,
    food_level: usize,
    agents: Vec<(usize, usize)>,
    food: Option<(usize, usize)>,
    t: usize,
    done: bool,
    spec: EnvSpec,
}

impl Foraging {
    pub fn new(n_agents: usize, size: usize, food_level: usize, limit: usize) -> Result<Self> {
        if n_agents == 0 || size < 3 || n_agents + 1 > size * size {
            return contract_err("foraging grid too small for the agents");
        }
        let cells = size * size;
        let obs_dim = 2 + 2 * cells;
        let spec = EnvSpec::new(format!("lbf-{n_agents}p1f"), n_agents, 6, obs_dim, 2 * n_agents + 2 * cells, limit)?;
        Ok(Self { size, food_level, agents: vec![(0, 0); n_agents], food: None, t: 0, done: true, spec })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn agents(&self) -> &[(usize, usize)] {
        &self.agents
    }

    pub fn food(&self) -> Option<(usize, usize)> {
        self.food
    }

    /// Place food and agents explicitly.
    pub fn set_layout(&mut self, food: (usize, usize), agents: &[(usize, usize)]) -> Result<StepResult> {
        let inside = |p: &(usize, usize)| p.0 < self.size && p.1 < self.size;
        let mut all = agents.to_vec();
        all.push(food);
        all.sort_unstable();
        all.dedup();
        if agents.len() != self.agents.len() || !inside(&food) || !agents.iter().all(inside) || all.len() != agents.len() + 1 {
            return contract_err("layout must place every agent and the food on distinct cells");
        }
        self.food = Some(food);
        self.agents = agents.to_vec();
        self.t = 0;
        self.done = false;
        Ok(self.result(0.0, false, false, false))
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> StepResult {
        // Food away from the border so all four neighbours exist.
        let food = (rng.gen_range(1..self.size - 1), rng.gen_range(1..self.size - 1));
        let mut agents = Vec::with_capacity(self.agents.len());
        while agents.len() < self.agents.len() {
            let p = (rng.gen_range(0..self.size), rng.gen_range(0..self.size));
            if p != food && !agents.contains(&p) {
                agents.push(p);
            }
        }
        self.food = Some(food);
        self.agents = agents;
        self.t = 0;
        self.done = false;
        self.result(0.0, false, false, false)
    }

    fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
    }

    fn target(&self, p: (usize, usize), a: usize) -> (usize, usize) {
        let last = self.size - 1;
        match a {
            NORTH if p.0 > 0 => (p.0 - 1, p.1),
            SOUTH if p.0 < last => (p.0 + 1, p.1),
            WEST if p.1 > 0 => (p.0, p.1 - 1),
            EAST if p.1 < last => (p.0, p.1 + 1),
            _ => p,
        }
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return contract_err("step called on a finished episode");
        }
        if actions.len() != self.agents.len() || actions.iter().any(|&a| a > LOAD) {
            return contract_err(format!("foraging expects {} actions in 0..6", self.agents.len()));
        }
        let mut reward = 0.0;
        let mut collected = false;
        if let Some(f) = self.food {
            let level: usize = self
                .agents
                .iter()
                .zip(actions)
                .filter(|(p, &a)| a == LOAD && Self::adjacent(**p, f))
                .count()
                * AGENT_LEVEL;
            if level >= self.food_level {
                self.food = None;
                collected = true;
                reward = 1.0;
            }
        }

        // Moves resolve simultaneously; clashing or blocked moves stay put.
        let targets: Vec<_> = self.agents.iter().zip(actions).map(|(p, &a)| self.target(*p, a)).collect();
        let mut next = self.agents.clone();
        for (i, t) in targets.iter().enumerate() {
            let clash = targets.iter().enumerate().any(|(j, u)| j != i && u == t);
            let food_cell = Some(*t) == self.food;
            if !clash && !food_cell && (t == &self.agents[i] || !self.agents.contains(t)) {
                next[i] = *t;
            }
        }
        self.agents = next;

        self.t += 1;
        let terminated = collected;
        let truncated = !terminated && self.t >= self.spec.episode_limit;
        self.done = terminated || truncated;
        Ok(self.result(reward, terminated, truncated, collected))
    }

    fn map(&self) -> Vec<f64> {
        let cells = self.size * self.size;
        let mut m = vec![0.0; 2 * cells];
        if let Some((r, c)) = self.food {
            m[r * self.size + c] = self.food_level as f64 / 3.0;
        }
        for &(r, c) in &self.agents {
            m[cells + r * self.size + c] = AGENT_LEVEL as f64;
        }
        m
    }

    /// `[row, col]` scaled to `[0, 1]`, then the food and agent layers.
    pub fn observation(&self, agent: usize) -> Result<Vec<f64>> {
        if agent >= self.agents.len() {
            return contract_err(format!("agent {agent} out of range"));
        }
        let scale = (self.size - 1) as f64;
        let (r, c) = self.agents[agent];
        let mut o = vec![r as f64 / scale, c as f64 / scale];
        if agent == 0 {
            o.extend(self.map());
        } else {
            o.extend(std::iter::repeat_n(0.0, 2 * self.size * self.size));
        }
        Ok(o)
    }

    pub fn state(&self) -> Vec<f64> {
        let scale = (self.size - 1) as f64;
        let mut s: Vec<f64> = self.agents.iter().flat_map(|&(r, c)| [r as f64 / scale, c as f64 / scale]).collect();
        s.extend(self.map());
        s
    }

    fn result(&self, reward: f64, terminated: bool, truncated: bool, win: bool) -> StepResult {
        StepResult {
            obs: (0..self.agents.len()).map(|i| self.observation(i).expect("in range")).collect(),
            state: self.state(),
            reward,
            terminated,
            info: StepInfo { win, truncated, step: self.t },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three() -> Foraging {
        Foraging::new(3, 8, 3, 25).unwrap()
    }

    #[test]
    fn three_loaders_collect() {
        let mut e = three();
        e.set_layout((3, 3), &[(2, 3), (4, 3), (3, 2)]).unwrap();
        let r = e.step(&[LOAD; 3]).unwrap();
        assert_eq!((r.reward, r.terminated, r.info.win), (1.0, true, true));
        assert_eq!(e.food(), None);
    }

    #[test]
    fn two_loaders_are_not_enough() {
        let mut e = three();
        e.set_layout((3, 3), &[(2, 3), (4, 3), (0, 0)]).unwrap();
        let r = e.step(&[LOAD, LOAD, NOOP]).unwrap();
        assert_eq!((r.reward, r.terminated), (0.0, false));
        // Adjacent but not loading does not count.
        e.set_layout((3, 3), &[(2, 3), (4, 3), (3, 2)]).unwrap();
        let r = e.step(&[LOAD, LOAD, NOOP]).unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn moves_are_blocked_by_food_and_clashes() {
        let mut e = three();
        e.set_layout((3, 3), &[(2, 3), (4, 4), (4, 2)]).unwrap();
        e.step(&[SOUTH, WEST, EAST]).unwrap();
        // Agent 0 walks into food, agents 1 and 2 both target (4, 3).
        assert_eq!(e.agents(), &[(2, 3), (4, 4), (4, 2)]);
        e.step(&[WEST, NORTH, NOOP]).unwrap();
        assert_eq!(e.agents(), &[(2, 2), (3, 4), (4, 2)]);
        e.set_layout((3, 3), &[(0, 0), (7, 7), (5, 5)]).unwrap();
        e.step(&[NORTH, SOUTH, NOOP]).unwrap();
        assert_eq!(e.agents()[..2], [(0, 0), (7, 7)]);
    }

    #[test]
    fn only_agent_zero_sees_the_map() {
        let mut e = three();
        e.set_layout((3, 3), &[(0, 0), (7, 7), (1, 5)]).unwrap();
        let o0 = e.observation(0).unwrap();
        let o2 = e.observation(2).unwrap();
        assert_eq!(o0.len(), e.spec().obs_dim);
        assert!(o0[2..].iter().any(|x| *x != 0.0));
        assert!(o2[2..].iter().all(|x| *x == 0.0));
        assert_eq!(o2[..2], [1.0 / 7.0, 5.0 / 7.0]);
        assert!(e.observation(3).is_err());
    }

    #[test]
    fn step_limit_truncates() {
        let mut e = Foraging::new(4, 8, 3, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        e.reset(&mut rng);
        let mut steps = 0;
        loop {
            let r = e.step(&[NOOP; 4]).unwrap();
            steps += 1;
            if r.terminated || r.info.truncated {
                assert!(r.info.truncated);
                break;
            }
        }
        assert_eq!(steps, 15);
    }

    #[test]
    fn reset_places_distinct_cells() {
        let mut e = three();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            e.reset(&mut rng);
            let f = e.food().unwrap();
            assert!((1..7).contains(&f.0) && (1..7).contains(&f.1));
            let mut cells = e.agents().to_vec();
            cells.push(f);
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), 4);
        }
    }
}
