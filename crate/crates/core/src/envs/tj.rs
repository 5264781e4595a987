use rand::Rng;

use super::{EnvSpec, StepInfo, StepResult};
use crate::error::{contract_err, Result};

pub const GAS: usize = 0;
pub const BRAKE: usize = 1;

pub const STEP_PENALTY: f64 = -0.01;
pub const COLLISION_PENALTY: f64 = -10.0;

const ROUTES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Car {
    route: usize,
    /// Index along the route's cells.
    progress: usize,
}

/// Easy traffic junction: one west-to-east and one north-to-south road of
/// `dim` cells crossing in the middle. Each agent is a car slot; cars enter
/// at the road heads with probability `add_rate` per step and leave after
/// the last cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficJunction {
    dim: usize,
    add_rate: f64,
    cars: Vec<Option<Car>>,
    collided: bool,
    t: usize,
    done: bool,
    spec: EnvSpec,
}

impl TrafficJunction {
    pub fn new(name: &str, n_cars: usize, dim: usize, add_rate: f64, limit: usize) -> Result<Self> {
        if dim < 3 || dim.is_multiple_of(2) || !(0.0..=1.0).contains(&add_rate) {
            return contract_err("junction needs an odd road dimension ≥ 3 and add rate in [0, 1]");
        }
        let obs_dim = 1 + ROUTES + dim * dim + 1;
        let spec = EnvSpec::new(name, n_cars, 2, obs_dim, n_cars * (3 + ROUTES), limit)?;
        Ok(Self { dim, add_rate, cars: vec![None; n_cars], collided: false, t: 0, done: true, spec })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Cell of progress `k` along `route`.
    fn cell(&self, route: usize, k: usize) -> (usize, usize) {
        let mid = self.dim / 2;
        if route == 0 { (mid, k) } else { (k, mid) }
    }

    /// Grid cell of each car slot, `None` when the slot is off the road.
    pub fn positions(&self) -> Vec<Option<(usize, usize)>> {
        self.cars.iter().map(|c| c.map(|c| self.cell(c.route, c.progress))).collect()
    }

    pub fn active(&self) -> usize {
        self.cars.iter().flatten().count()
    }

    fn spawn(&mut self, rng: &mut impl Rng) {
        for route in 0..ROUTES {
            if rng.gen::<f64>() < self.add_rate {
                if let Some(slot) = self.cars.iter().position(Option::is_none) {
                    self.cars[slot] = Some(Car { route, progress: 0 });
                }
            }
        }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> StepResult {
        self.cars.iter_mut().for_each(|c| *c = None);
        self.collided = false;
        self.t = 0;
        self.done = false;
        self.spawn(rng);
        self.result(0.0, false)
    }

    /// Place cars explicitly as `(route, progress)` per slot.
    pub fn set_cars(&mut self, cars: &[Option<(usize, usize)>]) -> Result<StepResult> {
        if cars.len() != self.cars.len() || cars.iter().flatten().any(|&(r, k)| r >= ROUTES || k >= self.dim) {
            return contract_err("car layout out of range");
        }
        self.cars = cars.iter().map(|c| c.map(|(route, progress)| Car { route, progress })).collect();
        self.collided = false;
        self.t = 0;
        self.done = false;
        Ok(self.result(0.0, false))
    }

    /// Actions of slots without a car are ignored.
    pub fn step(&mut self, actions: &[usize], rng: &mut impl Rng) -> Result<StepResult> {
        if self.done {
            return contract_err("step called on a finished episode");
        }
        if actions.len() != self.cars.len() || actions.iter().any(|&a| a > BRAKE) {
            return contract_err(format!("junction expects {} actions in 0..2", self.cars.len()));
        }
        for (car, &a) in self.cars.iter_mut().zip(actions) {
            if let (Some(c), GAS) = (car.as_mut(), a) {
                c.progress += 1;
                if c.progress == self.dim {
                    *car = None;
                }
            }
        }
        let pos = self.positions();
        let mut reward = STEP_PENALTY * self.active() as f64;
        for (i, p) in pos.iter().enumerate() {
            if p.is_some() && pos.iter().enumerate().any(|(j, q)| j != i && q == p) {
                reward += COLLISION_PENALTY;
                self.collided = true;
            }
        }
        self.t += 1;
        let truncated = self.t >= self.spec.episode_limit;
        self.done = truncated;
        if !truncated {
            self.spawn(rng);
        }
        Ok(self.result(reward, truncated))
    }

    /// Own-cell view: `[on road, route one-hot, cell one-hot, other cars here]`.
    pub fn observation(&self, agent: usize) -> Result<Vec<f64>> {
        if agent >= self.cars.len() {
            return contract_err(format!("agent {agent} out of range"));
        }
        let mut o = vec![0.0; self.spec.obs_dim];
        if let Some(c) = self.cars[agent] {
            let p = self.cell(c.route, c.progress);
            o[0] = 1.0;
            o[1 + c.route] = 1.0;
            o[1 + ROUTES + p.0 * self.dim + p.1] = 1.0;
            o[self.spec.obs_dim - 1] = self.positions().iter().enumerate().filter(|(j, q)| *j != agent && **q == Some(p)).count() as f64;
        }
        Ok(o)
    }

    pub fn state(&self) -> Vec<f64> {
        let scale = (self.dim - 1) as f64;
        let mut s = Vec::with_capacity(self.spec.state_dim);
        for c in &self.cars {
            match c {
                Some(c) => {
                    let p = self.cell(c.route, c.progress);
                    s.extend([1.0, p.0 as f64 / scale, p.1 as f64 / scale]);
                    s.extend((0..ROUTES).map(|r| if r == c.route { 1.0 } else { 0.0 }));
                }
                None => s.extend(std::iter::repeat_n(0.0, 3 + ROUTES)),
            }
        }
        s
    }

    fn result(&self, reward: f64, truncated: bool) -> StepResult {
        StepResult {
            obs: (0..self.cars.len()).map(|i| self.observation(i).expect("in range")).collect(),
            state: self.state(),
            reward,
            terminated: false,
            info: StepInfo { win: truncated && !self.collided, truncated, step: self.t },
        }
    }
}
