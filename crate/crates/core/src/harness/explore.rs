use rand::Rng;

use crate::error::{contract_err, Result};

/// Index of the largest value; the first one wins ties.
pub fn argmax(q: &[f64]) -> Result<usize> {
    if q.is_empty() {
        return contract_err("argmax of no values");
    }
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Greedy with probability `1 − explore_eps`, uniform otherwise.
pub fn epsilon_greedy(q: &[f64], explore_eps: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&explore_eps) {
        return contract_err(format!("exploration rate {explore_eps} outside [0, 1]"));
    }
    let greedy = argmax(q)?;
    if explore_eps > 0.0 && rng.gen::<f64>() < explore_eps {
        return Ok(rng.gen_range(0..q.len()));
    }
    Ok(greedy)
}

/// Linear decay from `start` to `end` over `anneal_steps` env steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl ExplorationSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}
