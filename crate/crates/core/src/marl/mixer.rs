use rand::Rng;

use crate::diffcore::{AffineLayer, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract_err, shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Vdn,
    Qmix,
}

impl MixerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::Vdn => "vdn",
            MixerKind::Qmix => "qmix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vdn" => Ok(MixerKind::Vdn),
            "qmix" => Ok(MixerKind::Qmix),
            _ => Err(Error::Config(format!("unknown mixer {s:?}"))),
        }
    }
}

/// Monotone mixing network whose weights are produced from the global state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QmixMixer {
    pub hyper_w1: AffineLayer,
    pub hyper_b1: AffineLayer,
    pub hyper_w2: AffineLayer,
    pub value: Mlp,
    pub n_agents: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mixer {
    Vdn { n_agents: usize },
    Qmix(QmixMixer),
}

impl Mixer {
    pub fn new(
        store: &mut ParamStore,
        kind: MixerKind,
        n_agents: usize,
        state_dim: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            MixerKind::Vdn => Mixer::Vdn { n_agents },
            MixerKind::Qmix => Mixer::Qmix(QmixMixer {
                hyper_w1: AffineLayer::new(store, "mixer.hyper_w1", state_dim, n_agents * embed_dim, rng),
                hyper_b1: AffineLayer::new(store, "mixer.hyper_b1", state_dim, embed_dim, rng),
                hyper_w2: AffineLayer::new(store, "mixer.hyper_w2", state_dim, embed_dim, rng),
                value: Mlp::new(store, "mixer.v", &[state_dim, embed_dim, 1], rng),
                n_agents,
                embed_dim,
            }),
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Vdn { .. } => MixerKind::Vdn,
            Mixer::Qmix(_) => MixerKind::Qmix,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Mixer::Vdn { n_agents } => *n_agents,
            Mixer::Qmix(m) => m.n_agents,
        }
    }

    /// `q: [B, N]` chosen-action values, `state: [B, S]`; returns `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, q: Var, state: Var) -> Result<Var> {
        let n = g.value(q).cols();
        if n != self.n_agents() {
            return contract_err(format!("mixer built for {} agents, got {n}", self.n_agents()));
        }
        if g.value(state).rows() != g.value(q).rows() {
            return shape_err("mixer state and value row counts differ");
        }
        match self {
            Mixer::Vdn { .. } => Ok(g.sum_cols(q)),
            Mixer::Qmix(m) => {
                let w1 = m.hyper_w1.forward(g, state)?;
                let w1 = g.abs(w1);
                let b1 = m.hyper_b1.forward(g, state)?;
                let h = g.rowvec_mat(q, w1);
                let h = g.add(h, b1);
                let h = g.elu(h);
                let w2 = m.hyper_w2.forward(g, state)?;
                let w2 = g.abs(w2);
                let hw = g.mul(h, w2);
                let y = g.sum_cols(hw);
                let v = m.value.forward(g, state)?;
                Ok(g.add(y, v))
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Mixer::Vdn { .. } => Vec::new(),
            Mixer::Qmix(m) => {
                let mut ids = Vec::new();
                for l in [&m.hyper_w1, &m.hyper_b1, &m.hyper_w2] {
                    ids.extend([l.w, l.b]);
                }
                ids.extend(m.value.param_ids());
                ids
            }
        }
    }
}

/// Untaped joint value of the chosen per-agent values.
pub fn mix(per_agent_q: &Tensor, state: &Tensor, mixer: &Mixer, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::frozen(store);
    let (q, s) = (g.constant(per_agent_q.clone()), g.constant(state.clone()));
    let y = mixer.forward(&mut g, q, s)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vdn_sums() {
        let store = ParamStore::new();
        let y = mix(&Tensor::row(&[1.0, 2.0, 3.0]), &Tensor::row(&[0.0]), &Mixer::Vdn { n_agents: 3 }, &store).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn wrong_agent_count() {
        let store = ParamStore::new();
        let r = mix(&Tensor::row(&[1.0, 2.0]), &Tensor::row(&[0.0]), &Mixer::Vdn { n_agents: 3 }, &store);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zeroed_hypernets_return_final_bias() {
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, MixerKind::Qmix, 3, 4, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let ids = mixer.param_ids();
        for id in &ids {
            store.get_mut(*id).data_mut().fill(0.0);
        }
        let Mixer::Qmix(m) = &mixer else { unreachable!() };
        store.get_mut(m.value.layers[1].b).data_mut()[0] = 0.75;
        let y = mix(&Tensor::row(&[5.0, -3.0, 2.0]), &Tensor::row(&[0.1, 0.2, 0.3, 0.4]), &mixer, &store).unwrap();
        assert_eq!(y.data(), &[0.75]);
    }

    #[test]
    fn qmix_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, MixerKind::Qmix, 3, 5, 8, &mut rng);
        let h = 1e-6;
        for _ in 0..100 {
            let s = Tensor::matrix(1, 5, (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for i in 0..3 {
                let (mut up, mut down) = (q.clone(), q.clone());
                up[i] += h;
                down[i] -= h;
                let a = mix(&Tensor::row(&up), &s, &mixer, &store).unwrap().data()[0];
                let b = mix(&Tensor::row(&down), &s, &mixer, &store).unwrap().data()[0];
                assert!((a - b) / (2.0 * h) >= -1e-9);
            }
        }
    }

    #[test]
    fn kind_round_trips() {
        for k in [MixerKind::Vdn, MixerKind::Qmix] {
            assert_eq!(MixerKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(MixerKind::parse("qplex").is_err());
    }
}
