//! Decentralised execution: every agent encodes its history, broadcasts it
//! as a message, and acts on its history plus the fused received messages.

use rand_chacha::ChaCha8Rng;

use super::batch::agent_input;
use super::explore::{argmax, epsilon_greedy};
use crate::attacks::{ame_subset_masks, ame_subset_sample, ame_vote, attack_objective, max_deviation, AmePolicy, AttackSpec};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{contract_err, Result};
use crate::latent::encoders::standard_normal;
use crate::latent::{poe_fuse_taped, reparameterize, MessageEncoder};
use crate::marl::{AgentNetwork, CromacModel};

/// How received messages are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    /// Product of experts over every message.
    All,
    /// A fresh random `k`-subset of incoming messages per receiver and step.
    RandomSubset(AmePolicy),
    /// One base action per `k`-subset, then a plurality vote.
    Vote(AmePolicy),
}

/// Outcome of one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub actions: Vec<usize>,
    /// Largest per-coordinate message change made by the attack.
    pub deviation: f64,
    /// Clean outgoing messages, `[N, H]`.
    pub messages: Tensor,
    /// Expert mask in effect, `N·N` entries, when subsets were sampled.
    pub mask: Option<Vec<f64>>,
}

/// Anything that can play an episode in evaluation.
pub trait Policy {
    fn reset(&mut self);
    fn act(&mut self, obs: &[Vec<f64>], attack: &AttackSpec, rng: &mut ChaCha8Rng) -> Result<Decision>;

    /// Expert mask for the observation after the last action, if masks are
    /// being recorded.
    fn terminal_mask(&mut self, _rng: &mut ChaCha8Rng) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Rows `(i, j)` hold sender `j`'s message as received by `i`.
pub fn stack_received(messages: &Tensor, n: usize) -> Tensor {
    let h = messages.cols();
    let mut data = Vec::with_capacity(n * n * h);
    for _ in 0..n {
        data.extend_from_slice(messages.data());
    }
    Tensor::matrix(n * n, h, data).expect("stack shape")
}

/// Receiver-side fusion of pre-stacked `[R·N, H]` messages.
pub fn fuse_received(g: &mut Graph, enc: &MessageEncoder, stacked: Var, n: usize, mask: Option<&Tensor>) -> Result<(Var, Var)> {
    let (mean, var) = enc.encode(g, stacked)?;
    let mask = mask.map(|m| g.constant(m.clone()));
    Ok(poe_fuse_taped(g, mean, var, n, mask))
}

/// Every row except a receiver's own message may be perturbed.
pub fn attackable_rows(n: usize) -> Vec<bool> {
    (0..n * n).map(|r| r / n != r % n).collect()
}

fn row_argmax(q: &Tensor) -> Result<Vec<usize>> {
    (0..q.rows()).map(|r| argmax(q.row_slice(r))).collect()
}

/// The learner's policy over a frozen parameter store.
pub struct Actor<'a> {
    model: &'a CromacModel,
    store: &'a ParamStore,
    hidden: Tensor,
    last: Option<Vec<usize>>,
    pub fusion: Fusion,
    pub explore_eps: f64,
    /// Act on a draw of the fused latent instead of its mean.
    pub sample_latent: bool,
}

impl<'a> Actor<'a> {
    pub fn new(model: &'a CromacModel, store: &'a ParamStore, fusion: Fusion) -> Self {
        let hidden = Tensor::zeros(model.dims.n_agents, model.dims.rnn_dim);
        Self { model, store, hidden, last: None, fusion, explore_eps: 0.0, sample_latent: false }
    }

    fn agent(&self) -> &AgentNetwork {
        &self.model.agent
    }

    pub fn n_agents(&self) -> usize {
        self.model.dims.n_agents
    }

    /// Current trajectory encodings, `[N, H]`.
    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }

    /// Random subset mask for one step, or `None` outside subset training.
    pub fn sample_mask(&self, rng: &mut ChaCha8Rng) -> Result<Option<Tensor>> {
        let Fusion::RandomSubset(p) = self.fusion else { return Ok(None) };
        let n = self.n_agents();
        let subs = (0..n).map(|_| ame_subset_sample(n - 1, p.k, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Some(ame_subset_masks(n, &subs)?))
    }

    fn advance(&mut self, obs: &[Vec<f64>]) -> Result<()> {
        let (n, a) = (self.n_agents(), self.model.dims.n_actions);
        if obs.len() != n {
            return contract_err(format!("{} observations for {n} agents", obs.len()));
        }
        let mut x = Vec::new();
        for (i, o) in obs.iter().enumerate() {
            x.extend(agent_input(o, self.last.as_ref().map(|l| l[i]), i, a, n));
        }
        let x = Tensor::matrix(n, self.model.dims.input_dim(), x)?;
        let mut g = Graph::frozen(self.store);
        let xv = g.constant(x);
        let hv = g.constant(self.hidden.clone());
        let h = self.agent().step(&mut g, xv, hv)?;
        self.hidden = g.value(h).clone();
        Ok(())
    }

    /// Per-agent values for each mask, from the fused mean (or a draw).
    fn values(&self, stacked: &Tensor, masks: &[Option<Tensor>], noise: Option<Tensor>) -> Result<Vec<Tensor>> {
        let n = self.n_agents();
        let mut g = Graph::frozen(self.store);
        let m = g.constant(stacked.clone());
        let tau = g.constant(self.hidden.clone());
        let mut out = Vec::with_capacity(masks.len());
        for mask in masks {
            let (mean, var) = fuse_received(&mut g, &self.model.msg_enc, m, n, mask.as_ref())?;
            let z = match &noise {
                Some(eta) => reparameterize(&mut g, mean, var, eta.clone()),
                None => mean,
            };
            let q = self.agent().q(&mut g, tau, z)?;
            out.push(g.value(q).clone());
        }
        Ok(out)
    }

    /// `J = Σ_masks Σ_i CE(Q_i, y_i)` and its gradient in the stacked messages.
    fn objective_grad(&self, stacked: &Tensor, targets: &[usize], masks: &[Option<Tensor>]) -> Result<(f64, Tensor)> {
        let n = self.n_agents();
        let mut g = Graph::frozen(self.store);
        let m = g.leaf(stacked.clone());
        let tau = g.constant(self.hidden.clone());
        let mut total: Option<Var> = None;
        for mask in masks {
            let (mean, _) = fuse_received(&mut g, &self.model.msg_enc, m, n, mask.as_ref())?;
            let q = self.agent().q(&mut g, tau, mean)?;
            let j = attack_objective(&mut g, q, targets);
            total = Some(match total {
                Some(t) => g.add(t, j),
                None => j,
            });
        }
        let j = total.expect("at least one mask");
        let grads = g.backward(j)?;
        Ok((g.scalar(j), grads.get(m)))
    }

    fn vote(&self, qs: &[Tensor]) -> Result<Vec<usize>> {
        let per: Vec<Vec<usize>> = qs.iter().map(row_argmax).collect::<Result<_>>()?;
        (0..self.n_agents()).map(|i| ame_vote(&per.iter().map(|a| a[i]).collect::<Vec<_>>())).collect()
    }
}

impl Policy for Actor<'_> {
    fn reset(&mut self) {
        self.hidden = Tensor::zeros(self.n_agents(), self.model.dims.rnn_dim);
        self.last = None;
    }

    fn act(&mut self, obs: &[Vec<f64>], attack: &AttackSpec, rng: &mut ChaCha8Rng) -> Result<Decision> {
        self.advance(obs)?;
        let n = self.n_agents();
        let clean = stack_received(&self.hidden, n);
        let (masks, flat_mask): (Vec<Option<Tensor>>, Option<Vec<f64>>) = match self.fusion {
            Fusion::All => (vec![None], None),
            Fusion::RandomSubset(_) => {
                let m = self.sample_mask(rng)?.expect("subset fusion");
                let flat = m.data().to_vec();
                (vec![Some(m)], Some(flat))
            }
            Fusion::Vote(p) => {
                let masks = p.subsets().iter().map(|s| ame_subset_masks(n, &vec![s.clone(); n]).map(Some)).collect::<Result<_>>()?;
                (masks, None)
            }
        };
        let voting = matches!(self.fusion, Fusion::Vote(_));
        let noise = if self.sample_latent && !voting {
            Some(standard_normal(n, self.model.dims.z_dim, rng))
        } else {
            None
        };

        let mut received = clean.clone();
        if attack.budget() > 0.0 {
            let q_clean = self.values(&clean, &masks, None)?;
            let targets = if voting { self.vote(&q_clean)? } else { row_argmax(&q_clean[0])? };
            let victim = |m: &Tensor, y: &[usize]| self.objective_grad(m, y, &masks);
            received = attack.apply(&clean, &attackable_rows(n), &victim, &targets, rng)?;
        }
        let deviation = max_deviation(&received, &clean)?;
        if deviation > attack.budget() {
            return contract_err(format!("attack moved a message by {deviation}, budget {}", attack.budget()));
        }

        let qs = self.values(&received, &masks, noise)?;
        let actions = if voting {
            self.vote(&qs)?
        } else {
            (0..n).map(|i| epsilon_greedy(qs[0].row_slice(i), self.explore_eps, rng)).collect::<Result<Vec<_>>>()?
        };
        self.last = Some(actions.clone());
        Ok(Decision { actions, deviation, messages: self.hidden.clone(), mask: flat_mask })
    }

    fn terminal_mask(&mut self, rng: &mut ChaCha8Rng) -> Result<Option<Vec<f64>>> {
        Ok(self.sample_mask(rng)?.map(|m| m.data().to_vec()))
    }
}
