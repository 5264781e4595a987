use rand::Rng;

use super::agent::AgentNetwork;
use super::losses::{adv_rows, masked_mean, td_loss_from, td_target};
use super::mixer::{Mixer, MixerKind};
use crate::bounds::q_value_bounds_taped;
use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::harness::batch::EpisodeBatch;
use crate::latent::encoders::standard_normal;
use crate::latent::{message_kl_rows, poe_fuse_taped, reparameterize, state_vae_loss_rows, KlDirection, MessageEncoder, StateVae};

/// Which latent feeds the Q head during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QInput {
    State,
    Message,
}

impl QInput {
    pub fn as_str(self) -> &'static str {
        match self {
            QInput::State => "state",
            QInput::Message => "message",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(QInput::State),
            "message" => Ok(QInput::Message),
            _ => Err(Error::Config(format!("unknown train_q_input {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub rnn_dim: usize,
    pub z_dim: usize,
    pub vae_hidden: usize,
    pub q_hidden: usize,
    pub msg_hidden: Vec<usize>,
    pub mixer: MixerKind,
    pub mixing_embed: usize,
}

impl ModelDims {
    /// Width of the per-agent network input (observation, last action, id).
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }
}

/// Every network of the learner. Parameter values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CromacModel {
    pub dims: ModelDims,
    pub agent: AgentNetwork,
    pub mixer: Mixer,
    pub msg_enc: MessageEncoder,
    pub vae: StateVae,
}

impl CromacModel {
    pub fn new(dims: ModelDims, rng: &mut impl Rng) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let agent = AgentNetwork::new(
            &mut store,
            "agent",
            dims.input_dim(),
            dims.rnn_dim,
            dims.z_dim,
            dims.q_hidden,
            dims.n_actions,
            rng,
        );
        let mixer = Mixer::new(&mut store, dims.mixer, dims.n_agents, dims.state_dim, dims.mixing_embed, rng);
        let msg_enc = MessageEncoder::new(&mut store, "msg", dims.rnn_dim, &dims.msg_hidden, dims.z_dim, rng);
        let vae = StateVae::new(&mut store, "vae", dims.state_dim, dims.vae_hidden, dims.z_dim, rng);
        (Self { dims, agent, mixer, msg_enc, vae }, store)
    }

    /// Agent and mixer parameters.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        let mut ids = self.agent.param_ids();
        ids.extend(self.mixer.param_ids());
        ids
    }

    pub fn psi_ids(&self) -> Vec<ParamId> {
        self.vae.param_ids()
    }

    pub fn phi_ids(&self) -> Vec<ParamId> {
        self.msg_enc.param_ids()
    }

    /// Fuse, for each of the `R = B·N` receivers, the encodings of all `N`
    /// messages of its episode. `tau: [B·N, H]`; `mask: [B·N·N, 1]`.
    pub fn fuse_group(&self, g: &mut Graph, messages: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let n = self.dims.n_agents;
        let (mean, var) = self.msg_enc.encode(g, messages)?;
        let mean = g.tile_groups(mean, n, n);
        let var = g.tile_groups(var, n, n);
        let mask = mask.map(|m| g.constant(m.clone()));
        Ok(poe_fuse_taped(g, mean, var, n, mask))
    }
}

/// Everything the combined objective needs besides parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub q_input: QInput,
    pub kl_direction: KlDirection,
    pub gamma: f64,
    pub double_q: bool,
    /// State-VAE term is built (needed for state-fed Q heads regardless).
    pub with_vae: bool,
    /// Message-alignment term is built.
    pub with_kl: bool,
    /// `κ·ε` when the adversarial term is active.
    pub adv_radius: Option<f64>,
    /// Per-step `[B·N·N, 1]` expert masks, `max_len + 1` entries.
    pub message_masks: Option<Vec<Tensor>>,
}

/// Scalar loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub td: Var,
    pub vae: Var,
    pub kl: Var,
    pub adv: Option<Var>,
}

fn check_batch(model: &CromacModel, batch: &EpisodeBatch, s: &LossSettings) -> Result<()> {
    if batch.n_episodes == 0 || batch.max_len == 0 {
        return contract_err("empty batch");
    }
    if batch.n_agents != model.dims.n_agents || batch.input_dim() != model.dims.input_dim() {
        return shape_err(format!(
            "batch has {} agents and input width {}, model expects {} and {}",
            batch.n_agents,
            batch.input_dim(),
            model.dims.n_agents,
            model.dims.input_dim()
        ));
    }
    if batch.state_dim() != model.dims.state_dim {
        return shape_err("state width mismatch");
    }
    if let Some(m) = &s.message_masks {
        let rows = batch.n_episodes * batch.n_agents * batch.n_agents;
        if m.len() != batch.max_len + 1 || m.iter().any(|t| t.rows() != rows || t.cols() != 1) {
            return shape_err("message masks must cover every step");
        }
    }
    Ok(())
}

fn row_argmax(q: &Tensor) -> Vec<usize> {
    (0..q.rows())
        .map(|r| {
            let row = q.row_slice(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Joint value of the chosen per-agent values for one step.
fn joint_value(g: &mut Graph, model: &CromacModel, q: Var, actions: &[usize], state: Var, b: usize) -> Result<Var> {
    let chosen = g.gather_cols(q, actions);
    let chosen = g.reshape(chosen, b, model.dims.n_agents);
    model.mixer.forward(g, chosen, state)
}

/// `max_len` tensors `[B, 1]`: the target joint value at step `t + 1`.
pub fn target_next_values(
    model: &CromacModel,
    target: &ParamStore,
    batch: &EpisodeBatch,
    s: &LossSettings,
    online_next_actions: Option<&[Vec<usize>]>,
) -> Result<Vec<Tensor>> {
    let (b, n) = (batch.n_episodes, batch.n_agents);
    let mut g = Graph::frozen(target);
    let mut h = g.constant(Tensor::zeros(b * n, model.dims.rnn_dim));
    let mut out = Vec::with_capacity(batch.max_len);
    for t in 0..=batch.max_len {
        let x = g.constant(batch.inputs[t].clone());
        h = model.agent.step(&mut g, x, h)?;
        let st = g.constant(batch.states[t].clone());
        let z = match s.q_input {
            QInput::State => model.vae.encode(&mut g, st)?.0,
            QInput::Message => {
                let mask = s.message_masks.as_ref().map(|m| &m[t]);
                
                model.fuse_group(&mut g, h, mask)?.0
            }
        };
        let z = match s.q_input {
            QInput::State => g.repeat_rows(z, n),
            QInput::Message => z,
        };
        if t == 0 {
            continue;
        }
        let q = model.agent.q(&mut g, h, z)?;
        let acts = match online_next_actions {
            Some(a) => a[t - 1].clone(),
            None => row_argmax(g.value(q)),
        };
        let v = joint_value(&mut g, model, q, &acts, st, b)?;
        out.push(g.value(v).clone());
    }
    Ok(out)
}

/// Build every loss term of the objective for one batch on `g`.
pub fn compute_losses(
    g: &mut Graph,
    model: &CromacModel,
    batch: &EpisodeBatch,
    target: &ParamStore,
    s: &LossSettings,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    check_batch(model, batch, s)?;
    let (b, n, zd) = (batch.n_episodes, batch.n_agents, model.dims.z_dim);
    let with_vae = s.with_vae || s.q_input == QInput::State;
    let steps = batch.max_len + usize::from(s.double_q);

    let mut h = g.constant(Tensor::zeros(b * n, model.dims.rnn_dim));
    let (mut q_tot, mut vae_rows, mut kl_rows, mut adv_rows_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut next_actions: Vec<Vec<usize>> = Vec::new();
    let chain = model.agent.qhead_chain();

    for t in 0..steps {
        let x = g.constant(batch.inputs[t].clone());
        h = model.agent.step(g, x, h)?;
        let st = g.constant(batch.states[t].clone());

        let mut z_state = None;
        let mut state_post = None;
        if with_vae {
            let noise = standard_normal(b, zd, rng);
            let (rows, z, mean, var) = state_vae_loss_rows(g, &model.vae, st, Some(noise))?;
            vae_rows.push(rows);
            z_state = Some(z);
            state_post = Some((mean, var));
        }

        let need_msg = s.q_input == QInput::Message || s.with_kl;
        let mut fused = None;
        if need_msg {
            // Alignment alone must not reshape the trajectory encoder.
            let messages = if s.q_input == QInput::Message { h } else { g.detach(h) };
            let mask = s.message_masks.as_ref().map(|m| &m[t]);
            fused = Some(model.fuse_group(g, messages, mask)?);
        }
        if s.with_kl {
            let (sm, sv) = state_post.expect("vae built when kl is");
            let (fm, fv) = fused.expect("fused built when kl is");
            let sm = g.repeat_rows(sm, n);
            let sv = g.repeat_rows(sv, n);
            let rows = message_kl_rows(g, sm, sv, fm, fv, s.kl_direction);
            kl_rows.push(g.group_sum(rows, n));
        }

        let z_in = match s.q_input {
            QInput::State => {
                let z = z_state.expect("vae built");
                g.repeat_rows(z, n)
            }
            QInput::Message => {
                let (fm, fv) = fused.expect("fused built");
                reparameterize(g, fm, fv, standard_normal(b * n, zd, rng))
            }
        };
        let q = model.agent.q(g, h, z_in)?;
        if t == batch.max_len {
            // Bootstrap step for double Q: only the greedy actions are used.
            next_actions.push(row_argmax(g.value(q)));
            vae_rows.truncate(batch.max_len);
            kl_rows.truncate(batch.max_len);
            break;
        }
        if t > 0 && s.double_q {
            next_actions.push(row_argmax(g.value(q)));
        }
        q_tot.push(joint_value(g, model, q, &batch.actions[t], st, b)?);

        if let Some(radius) = s.adv_radius {
            let zc = g.detach(z_in);
            let qc = model.agent.q(g, h, zc)?;
            let (lo, hi) = q_value_bounds_taped(g, h, zc, radius, &chain)?;
            let rows = adv_rows(g, qc, lo, hi, &batch.actions[t]);
            adv_rows_t.push(g.group_sum(rows, n));
        }
    }

    let online_next = if s.double_q { Some(next_actions.as_slice()) } else { None };
    let next = target_next_values(model, target, batch, s, online_next)?;
    let mut targets = Vec::with_capacity(batch.max_len);
    for t in 0..batch.max_len {
        targets.push(td_target(&batch.rewards[t], &batch.terminated[t], &next[t], s.gamma)?);
    }
    let td = td_loss_from(g, &q_tot, &targets, &batch.mask)?;
    let zero = || Tensor::zeros(1, 1);
    let vae = if vae_rows.is_empty() { g.constant(zero()) } else { masked_mean(g, &vae_rows, &batch.mask)? };
    let kl = if kl_rows.is_empty() { g.constant(zero()) } else { masked_mean(g, &kl_rows, &batch.mask)? };
    let adv = if adv_rows_t.is_empty() { None } else { Some(masked_mean(g, &adv_rows_t, &batch.mask)?) };
    Ok(LossTerms { td, vae, kl, adv })
}

/// TD term alone.
pub fn td_loss(
    g: &mut Graph,
    model: &CromacModel,
    batch: &EpisodeBatch,
    target: &ParamStore,
    s: &LossSettings,
    rng: &mut impl Rng,
) -> Result<Var> {
    Ok(compute_losses(g, model, batch, target, s, rng)?.td)
}

/// Overlap penalty at radius `κ·ε` alone.
pub fn adv_loss(
    g: &mut Graph,
    model: &CromacModel,
    batch: &EpisodeBatch,
    target: &ParamStore,
    s: &LossSettings,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    let s = LossSettings { adv_radius: Some(radius), ..s.clone() };
    compute_losses(g, model, batch, target, &s, rng)?.adv.ok_or_else(|| Error::Contract("adversarial term missing".into()))
}
