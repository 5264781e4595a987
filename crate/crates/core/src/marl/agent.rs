use rand::Rng;

use crate::bounds::{mlp_chain, ChainLayer};
use crate::diffcore::{AffineLayer, Graph, GruCell, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Result};

/// Shared per-agent recurrent Q-network: observation embedding, GRU, and a
/// Q head over `[τ, z]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentNetwork {
    pub embed: AffineLayer,
    pub gru: GruCell,
    pub qhead: Mlp,
    pub z_dim: usize,
}

impl AgentNetwork {
    /// `q_hidden = 0` gives a single affine Q head.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        rnn_dim: usize,
        z_dim: usize,
        q_hidden: usize,
        n_actions: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embed = AffineLayer::new(store, &format!("{name}.embed"), input_dim, rnn_dim, rng);
        let gru = GruCell::new(store, &format!("{name}.gru"), rnn_dim, rnn_dim, rng);
        let widths: Vec<usize> = if q_hidden == 0 {
            vec![rnn_dim + z_dim, n_actions]
        } else {
            vec![rnn_dim + z_dim, q_hidden, n_actions]
        };
        let qhead = Mlp::new(store, &format!("{name}.q"), &widths, rng);
        Self { embed, gru, qhead, z_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.embed.in_dim
    }

    pub fn rnn_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    pub fn n_actions(&self) -> usize {
        self.qhead.out_dim()
    }

    /// Advance the trajectory encoding by one observation.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let e = self.embed.forward(g, x)?;
        let e = g.relu(e);
        self.gru.step(g, e, h)
    }

    /// Per-action values for `[τ, z]`, one row per agent.
    pub fn q(&self, g: &mut Graph, tau: Var, z: Var) -> Result<Var> {
        let (tw, zw) = (g.value(tau).cols(), g.value(z).cols());
        if tw != self.rnn_dim() || zw != self.z_dim {
            return shape_err(format!("Q head expects τ width {} and z width {}, got {tw} and {zw}", self.rnn_dim(), self.z_dim));
        }
        let x = g.concat_cols(tau, z);
        self.qhead.forward(g, x)
    }

    pub fn qhead_chain(&self) -> Vec<ChainLayer> {
        mlp_chain(&self.qhead)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed.w, self.embed.b];
        ids.extend(self.gru.param_ids());
        ids.extend(self.qhead.param_ids());
        ids
    }
}

/// Evaluate the Q head without a tape.
pub fn agent_q(tau: &Tensor, z: &Tensor, net: &AgentNetwork, store: &ParamStore) -> Result<Tensor> {
    if tau.rows() != z.rows() {
        return shape_err("τ and z row counts differ");
    }
    let mut g = Graph::frozen(store);
    let (t, zv) = (g.constant(tau.clone()), g.constant(z.clone()));
    let q = net.q(&mut g, t, zv)?;
    Ok(g.value(q).clone())
}
