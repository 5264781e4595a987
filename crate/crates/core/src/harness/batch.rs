use crate::diffcore::Tensor;
use crate::error::{contract_err, shape_err, Result};

/// One recorded episode, as produced by a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `len + 1` steps of per-agent raw observations.
    pub obs: Vec<Vec<Vec<f64>>>,
    /// `len + 1` global states.
    pub states: Vec<Vec<f64>>,
    /// `len` joint actions.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// The final transition ended the episode (as opposed to the step cap).
    pub terminated: bool,
    pub win: bool,
    /// Per-step `N·N` expert masks (receiver-major) when messages were
    /// ablated during the rollout.
    pub msg_masks: Option<Vec<Vec<f64>>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn n_agents(&self) -> usize {
        self.obs.first().map_or(0, Vec::len)
    }
}

/// Network input for one agent: raw observation, one-hot previous action
/// (all zeros at the first step) and one-hot agent id.
pub fn agent_input(obs: &[f64], last_action: Option<usize>, agent: usize, n_actions: usize, n_agents: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + n_actions + n_agents);
    x.extend_from_slice(obs);
    x.extend((0..n_actions).map(|a| if Some(a) == last_action { 1.0 } else { 0.0 }));
    x.extend((0..n_agents).map(|i| if i == agent { 1.0 } else { 0.0 }));
    x
}

/// Whole episodes padded to a common length. Rows of per-agent tensors are
/// episode-major: row `e·N + i` is agent `i` of episode `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub n_episodes: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub max_len: usize,
    /// `max_len + 1` entries of `[B·N, input_dim]`.
    pub inputs: Vec<Tensor>,
    /// `max_len + 1` entries of `[B, state_dim]`.
    pub states: Vec<Tensor>,
    /// `max_len` entries of `B·N` action indices.
    pub actions: Vec<Vec<usize>>,
    /// `max_len` entries of `[B, 1]`.
    pub rewards: Vec<Tensor>,
    pub terminated: Vec<Tensor>,
    pub mask: Vec<Tensor>,
    /// `max_len + 1` entries of `[B·N·N, 1]`; padded steps keep every expert.
    pub msg_masks: Option<Vec<Tensor>>,
}

impl EpisodeBatch {
    pub fn from_episodes(episodes: &[&Episode], n_actions: usize) -> Result<Self> {
        let Some(first) = episodes.first() else {
            return contract_err("cannot batch zero episodes");
        };
        let n = first.n_agents();
        let obs_dim = first.obs[0][0].len();
        let state_dim = first.states[0].len();
        for e in episodes {
            if e.is_empty() || e.obs.len() != e.len() + 1 || e.states.len() != e.len() + 1 || e.rewards.len() != e.len() {
                return shape_err("malformed episode record");
            }
            if e.n_agents() != n || e.obs[0][0].len() != obs_dim || e.states[0].len() != state_dim {
                return shape_err("episodes disagree in agent count or widths");
            }
        }
        let b = episodes.len();
        let t_max = episodes.iter().map(|e| e.len()).max().expect("nonempty");
        let in_dim = obs_dim + n_actions + n;

        let mut inputs = Vec::with_capacity(t_max + 1);
        let mut states = Vec::with_capacity(t_max + 1);
        for t in 0..=t_max {
            let mut x = Vec::with_capacity(b * n * in_dim);
            let mut s = Vec::with_capacity(b * state_dim);
            for e in episodes {
                if t <= e.len() {
                    for i in 0..n {
                        let last = if t == 0 { None } else { Some(e.actions[t - 1][i]) };
                        x.extend(agent_input(&e.obs[t][i], last, i, n_actions, n));
                    }
                    s.extend_from_slice(&e.states[t]);
                } else {
                    x.extend(std::iter::repeat_n(0.0, n * in_dim));
                    s.extend(std::iter::repeat_n(0.0, state_dim));
                }
            }
            inputs.push(Tensor::matrix(b * n, in_dim, x)?);
            states.push(Tensor::matrix(b, state_dim, s)?);
        }

        let mut actions = Vec::with_capacity(t_max);
        let (mut rewards, mut terminated, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..t_max {
            let mut a = Vec::with_capacity(b * n);
            let (mut r, mut d, mut m) = (Vec::new(), Vec::new(), Vec::new());
            for e in episodes {
                if t < e.len() {
                    if e.actions[t].len() != n || e.actions[t].iter().any(|&x| x >= n_actions) {
                        return shape_err("action record out of range");
                    }
                    a.extend_from_slice(&e.actions[t]);
                    r.push(e.rewards[t]);
                    d.push(if t + 1 == e.len() && e.terminated { 1.0 } else { 0.0 });
                    m.push(1.0);
                } else {
                    a.extend(std::iter::repeat_n(0, n));
                    r.push(0.0);
                    d.push(0.0);
                    m.push(0.0);
                }
            }
            actions.push(a);
            rewards.push(Tensor::matrix(b, 1, r)?);
            terminated.push(Tensor::matrix(b, 1, d)?);
            mask.push(Tensor::matrix(b, 1, m)?);
        }
        let with_masks = episodes.iter().filter(|e| e.msg_masks.is_some()).count();
        let msg_masks = if with_masks == 0 {
            None
        } else if with_masks < b {
            return shape_err("either every episode or none carries message masks");
        } else {
            let mut out = Vec::with_capacity(t_max + 1);
            for t in 0..=t_max {
                let mut m = Vec::with_capacity(b * n * n);
                for e in episodes {
                    let em = e.msg_masks.as_ref().expect("counted");
                    if em.len() != e.len() + 1 || em.iter().any(|x| x.len() != n * n) {
                        return shape_err("message masks must cover every step with N·N entries");
                    }
                    match em.get(t) {
                        Some(x) => m.extend_from_slice(x),
                        None => m.extend(std::iter::repeat_n(1.0, n * n)),
                    }
                }
                out.push(Tensor::matrix(b * n * n, 1, m)?);
            }
            Some(out)
        };
        Ok(Self {
            n_episodes: b,
            n_agents: n,
            n_actions,
            max_len: t_max,
            inputs,
            states,
            actions,
            rewards,
            terminated,
            mask,
            msg_masks,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].cols()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].cols()
    }

    /// The same episodes with `extra` more masked-out steps.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        let (b, n) = (self.n_episodes, self.n_agents);
        for _ in 0..extra {
            out.inputs.push(Tensor::zeros(b * n, self.input_dim()));
            out.states.push(Tensor::zeros(b, self.state_dim()));
            out.actions.push(vec![0; b * n]);
            out.rewards.push(Tensor::zeros(b, 1));
            out.terminated.push(Tensor::zeros(b, 1));
            out.mask.push(Tensor::zeros(b, 1));
            if let Some(m) = out.msg_masks.as_mut() {
                m.push(Tensor::full(b * n * n, 1, 1.0));
            }
        }
        out.max_len += extra;
        out
    }
}
