use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;

use super::gaussian::DiagonalGaussian;
use crate::diffcore::{AffineLayer, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Result};

/// Added after softplus so variances stay strictly positive.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Variance head activation: `softplus(x) + VARIANCE_FLOOR`.
pub fn positive_variance(g: &mut Graph, pre: Var) -> Var {
    let sp = g.softplus(pre);
    g.add_scalar(sp, VARIANCE_FLOOR)
}

pub(crate) fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).expect("noise shape")
}

/// `mean + √variance ⊙ η`.
pub fn reparameterize(g: &mut Graph, mean: Var, variance: Var, noise: Tensor) -> Var {
    let sd = g.sqrt(variance);
    let eta = g.constant(noise);
    let scaled = g.mul(sd, eta);
    g.add(mean, scaled)
}

thread_local! {
    static STATE_ENCODES: Cell<u64> = const { Cell::new(0) };
}

/// How many times this thread has run [`StateVae::encode`].
pub fn state_encoder_calls() -> u64 {
    STATE_ENCODES.with(Cell::get)
}

/// Two-headed Gaussian encoder over the state with an MLP decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateVae {
    pub trunk: AffineLayer,
    pub mean_head: AffineLayer,
    pub var_head: AffineLayer,
    pub decoder: Mlp,
}

impl StateVae {
    pub fn new(store: &mut ParamStore, name: &str, state_dim: usize, hidden: usize, z_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            trunk: AffineLayer::new(store, &format!("{name}.enc"), state_dim, hidden, rng),
            mean_head: AffineLayer::new(store, &format!("{name}.mean"), hidden, z_dim, rng),
            var_head: AffineLayer::new(store, &format!("{name}.var"), hidden, z_dim, rng),
            decoder: Mlp::new(store, &format!("{name}.dec"), &[z_dim, hidden, state_dim], rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.in_dim
    }

    pub fn z_dim(&self) -> usize {
        self.mean_head.out_dim
    }

    /// Posterior parameters `(mean, variance)`, one row per state.
    pub fn encode(&self, g: &mut Graph, s: Var) -> Result<(Var, Var)> {
        STATE_ENCODES.with(|c| c.set(c.get() + 1));
        let h = self.trunk.forward(g, s)?;
        let h = g.relu(h);
        let mean = self.mean_head.forward(g, h)?;
        let pre = self.var_head.forward(g, h)?;
        Ok((mean, positive_variance(g, pre)))
    }

    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.decoder.forward(g, z)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.trunk.w, self.trunk.b, self.mean_head.w, self.mean_head.b, self.var_head.w, self.var_head.b];
        ids.extend(self.decoder.param_ids());
        ids
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.param_ids()[..6].to_vec()
    }
}

/// Per-row negative ELBO: `½‖s − ŝ‖² + KL(q(z|s) ‖ N(0, I))`, shape `[rows, 1]`.
///
/// `noise` is the reparameterisation draw; `None` decodes the posterior mean.
/// Also returns the latent that was decoded and the posterior parameters.
pub fn state_vae_loss_rows(
    g: &mut Graph,
    vae: &StateVae,
    s: Var,
    noise: Option<Tensor>,
) -> Result<(Var, Var, Var, Var)> {
    let (mean, var) = vae.encode(g, s)?;
    let z = match noise {
        Some(n) => reparameterize(g, mean, var, n),
        None => mean,
    };
    let recon = vae.decode(g, z)?;
    let err = g.sub(recon, s);
    let sq = g.square(err);
    let rec = g.sum_cols(sq);
    let rec = g.scale(rec, 0.5);
    let kl = kl_to_standard_rows(g, mean, var);
    Ok((g.add(rec, kl), z, mean, var))
}

/// `½ Σ (σ² + μ² − 1 − ln σ²)` per row.
pub fn kl_to_standard_rows(g: &mut Graph, mean: Var, var: Var) -> Var {
    let m2 = g.square(mean);
    let lv = g.ln(var);
    let a = g.add(var, m2);
    let b = g.sub(a, lv);
    let b = g.add_scalar(b, -1.0);
    let s = g.sum_cols(b);
    g.scale(s, 0.5)
}

/// Encode states, sampling the latent when `sample` is set.
pub fn encode_state(
    s: &Tensor,
    vae: &StateVae,
    store: &ParamStore,
    sample: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor, DiagonalGaussian)> {
    if s.cols() != vae.state_dim() {
        return shape_err(format!("state width {} vs encoder width {}", s.cols(), vae.state_dim()));
    }
    let mut g = Graph::frozen(store);
    let sv = g.constant(s.clone());
    let (mean, var) = vae.encode(&mut g, sv)?;
    let post = DiagonalGaussian::new(g.value(mean).clone(), g.value(var).clone())?;
    let z = if sample {
        let noise = standard_normal(s.rows(), vae.z_dim(), rng);
        let z = reparameterize(&mut g, mean, var, noise);
        g.value(z).clone()
    } else {
        post.mean().clone()
    };
    Ok((z, post))
}

/// Mean over rows of the per-row negative ELBO, with one reparameterised draw.
pub fn state_vae_loss(s: &Tensor, vae: &StateVae, store: &ParamStore, rng: &mut impl Rng) -> Result<f64> {
    if s.cols() != vae.state_dim() {
        return shape_err(format!("state width {} vs encoder width {}", s.cols(), vae.state_dim()));
    }
    let mut g = Graph::frozen(store);
    let sv = g.constant(s.clone());
    let noise = standard_normal(s.rows(), vae.z_dim(), rng);
    let (rows, ..) = state_vae_loss_rows(&mut g, vae, sv, Some(noise))?;
    let m = g.mean_all(rows);
    Ok(g.scalar(m))
}

/// Shared encoder applied to every received message.
///
/// Optional hidden ReLU layers precede the two linear heads; the default is
/// none, so each head is a single affine map of the message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEncoder {
    pub hidden: Vec<AffineLayer>,
    pub mean_head: AffineLayer,
    pub var_head: AffineLayer,
}

impl MessageEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_widths: &[usize],
        z_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut hidden = Vec::new();
        let mut width = in_dim;
        for (i, &w) in hidden_widths.iter().enumerate() {
            hidden.push(AffineLayer::new(store, &format!("{name}.h{i}"), width, w, rng));
            width = w;
        }
        Self {
            hidden,
            mean_head: AffineLayer::new(store, &format!("{name}.mean"), width, z_dim, rng),
            var_head: AffineLayer::new(store, &format!("{name}.var"), width, z_dim, rng),
        }
    }

    /// Single-layer encoder with explicit head values.
    pub fn from_heads(store: &mut ParamStore, name: &str, w_m: Tensor, b_m: Tensor, w_v: Tensor, b_v: Tensor) -> Self {
        Self {
            hidden: Vec::new(),
            mean_head: AffineLayer::with_values(store, &format!("{name}.mean"), w_m, b_m),
            var_head: AffineLayer::with_values(store, &format!("{name}.var"), w_v, b_v),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.mean_head).in_dim
    }

    pub fn z_dim(&self) -> usize {
        self.mean_head.out_dim
    }

    /// Per-message posterior `(mean, variance)`, one row per message.
    pub fn encode(&self, g: &mut Graph, m: Var) -> Result<(Var, Var)> {
        let mut h = m;
        for layer in &self.hidden {
            h = layer.forward(g, h)?;
            h = g.relu(h);
        }
        let mean = self.mean_head.forward(g, h)?;
        let pre = self.var_head.forward(g, h)?;
        Ok((mean, positive_variance(g, pre)))
    }

    /// Weight matrices subject to the `[C_MIN, C_MAX]` clamp.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.hidden.iter().map(|l| l.w).chain([self.mean_head.w, self.var_head.w]).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain([&self.mean_head, &self.var_head])
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    /// Clamp every weight entry into `[c_min, c_max]`; biases are untouched.
    pub fn clamp_weights(&self, store: &mut ParamStore, c_min: f64, c_max: f64) {
        for id in self.weight_ids() {
            for x in store.get_mut(id).data_mut() {
                *x = x.clamp(c_min, c_max);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_heads(store: &mut ParamStore, vae: &StateVae) {
        for id in [vae.mean_head.w, vae.mean_head.b, vae.var_head.w, vae.var_head.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn deterministic_encoding_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let vae = StateVae::new(&mut store, "vae", 5, 8, 3, &mut rng);
        let s = Tensor::row(&[0.1, 0.2, -0.3, 0.4, 1.0]);
        let (z, post) = encode_state(&s, &vae, &store, false, &mut rng).unwrap();
        assert_eq!(&z, post.mean());
    }

    #[test]
    fn zeroed_heads_give_softplus_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let vae = StateVae::new(&mut store, "vae", 4, 6, 2, &mut rng);
        zero_heads(&mut store, &vae);
        let (_, post) = encode_state(&Tensor::row(&[1.0, -1.0, 0.5, 2.0]), &vae, &store, false, &mut rng).unwrap();
        assert_eq!(post.mean().data(), &[0.0, 0.0]);
        for v in post.variance().data() {
            assert!((v - (2f64.ln() + VARIANCE_FLOOR)).abs() < 1e-15);
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mut store = ParamStore::new();
        let vae = StateVae::new(&mut store, "vae", 3, 4, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let s = Tensor::row(&[0.5, 0.5, 0.5]);
        let a = encode_state(&s, &vae, &store, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        let b = encode_state(&s, &vae, &store, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert_eq!(a, b);
        assert!(encode_state(&Tensor::row(&[0.5]), &vae, &store, true, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn elbo_terms() {
        // Prior posterior and exact reconstruction: both terms vanish.
        let mut store = ParamStore::new();
        let mut g = Graph::frozen(&store);
        let mean = g.constant(Tensor::row(&[0.0, 0.0]));
        let var = g.constant(Tensor::row(&[1.0, 1.0]));
        let kl = kl_to_standard_rows(&mut g, mean, var);
        assert_eq!(g.scalar(kl), 0.0);
        let mean = g.constant(Tensor::row(&[1.0]));
        let var = g.constant(Tensor::row(&[1.0]));
        let kl = kl_to_standard_rows(&mut g, mean, var);
        assert!((g.scalar(kl) - 0.5).abs() < 1e-15);
        drop(g);

        // Identity decoder, zero posterior: loss is ½‖e‖² plus the KL of
        // N(0, softplus(0)+floor) against the prior.
        let vae = StateVae::new(&mut store, "v", 2, 2, 2, &mut ChaCha8Rng::seed_from_u64(3));
        zero_heads(&mut store, &vae);
        for l in &vae.decoder.layers {
            store.get_mut(l.w).data_mut().fill(0.0);
            store.get_mut(l.b).data_mut().fill(0.0);
        }
        let s = Tensor::row(&[0.6, -0.8]);
        let mut g = Graph::frozen(&store);
        let sv = g.constant(s);
        let (rows, ..) = state_vae_loss_rows(&mut g, &vae, sv, None).unwrap();
        let v = 2f64.ln() + VARIANCE_FLOOR;
        let kl = 2.0 * 0.5 * (v - 1.0 - v.ln());
        assert!((g.scalar(rows) - (0.5 * 1.0 + kl)).abs() < 1e-12);
    }

    #[test]
    fn clamp_touches_weights_only() {
        let mut store = ParamStore::new();
        let enc = MessageEncoder::from_heads(
            &mut store,
            "m",
            Tensor::from_rows(&[vec![0.5, -0.05]]).unwrap(),
            Tensor::row(&[3.0]),
            Tensor::from_rows(&[vec![-2.0, 0.0]]).unwrap(),
            Tensor::row(&[-3.0]),
        );
        enc.clamp_weights(&mut store, -0.1, 0.1);
        assert_eq!(store.get(enc.mean_head.w).data(), &[0.1, -0.05]);
        assert_eq!(store.get(enc.var_head.w).data(), &[-0.1, 0.0]);
        assert_eq!(store.get(enc.mean_head.b).data(), &[3.0]);
    }

    #[test]
    fn hidden_layers_change_input_width() {
        let mut store = ParamStore::new();
        let enc = MessageEncoder::new(&mut store, "m", 6, &[5], 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((enc.in_dim(), enc.z_dim()), (6, 3));
        assert_eq!(enc.weight_ids().len(), 3);
    }
}
