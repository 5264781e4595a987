use super::interval::{epsilon_ball, ibp_affine, ibp_monotonic, IntervalBounds, Monotone, PerturbationBudget};
use crate::diffcore::{AffineLayer, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::latent::{MessageEncoder, VARIANCE_FLOOR};

/// Elementwise activations a network may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    Sigmoid,
    Abs,
}

impl Activation {
    /// The monotone form, if propagation through this activation is exact.
    pub fn monotone(self) -> Option<Monotone> {
        match self {
            Activation::Relu => Some(Monotone::Relu),
            Activation::Softplus => Some(Monotone::Softplus),
            Activation::Tanh => Some(Monotone::Tanh),
            Activation::Sigmoid => Some(Monotone::Sigmoid),
            Activation::Abs => None,
        }
    }
}

/// One stage of a feed-forward network as seen by bound propagation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainLayer {
    Affine(AffineLayer),
    Elementwise(Activation),
}

/// The `affine, relu, affine, …, affine` chain of an [`Mlp`].
pub fn mlp_chain(mlp: &Mlp) -> Vec<ChainLayer> {
    let mut out = Vec::new();
    for (i, l) in mlp.layers.iter().enumerate() {
        if i > 0 {
            out.push(ChainLayer::Elementwise(Activation::Relu));
        }
        out.push(ChainLayer::Affine(l.clone()));
    }
    out
}

fn monotone_of(act: Activation) -> Result<Monotone> {
    act.monotone()
        .map_or_else(|| contract_err(format!("{act:?} is not monotone; bounds cannot be propagated")), Ok)
}

/// Propagate a box through a chain of affine and monotone stages.
pub fn ibp_chain(mut b: IntervalBounds, chain: &[ChainLayer], store: &ParamStore) -> Result<IntervalBounds> {
    for layer in chain {
        b = match layer {
            ChainLayer::Affine(a) => ibp_affine(&b, a, store)?,
            ChainLayer::Elementwise(act) => ibp_monotonic(&b, monotone_of(*act)?),
        };
    }
    Ok(b)
}

/// Mean-head and variance-head boxes of one message.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBounds {
    pub mean: IntervalBounds,
    pub variance: IntervalBounds,
}

/// Bounds on the encoder outputs for every message moved by at most `epsilon`.
pub fn encoder_bounds(
    messages: &[Tensor],
    epsilon: f64,
    enc: &MessageEncoder,
    store: &ParamStore,
) -> Result<Vec<EncoderBounds>> {
    let mut trunk: Vec<ChainLayer> = Vec::new();
    for l in &enc.hidden {
        trunk.push(ChainLayer::Affine(l.clone()));
        trunk.push(ChainLayer::Elementwise(Activation::Relu));
    }
    messages
        .iter()
        .map(|m| {
            if m.cols() != enc.in_dim() {
                return shape_err(format!("message width {} vs encoder width {}", m.cols(), enc.in_dim()));
            }
            let h = ibp_chain(epsilon_ball(m, epsilon)?, &trunk, store)?;
            let mean = ibp_affine(&h, &enc.mean_head, store)?;
            let pre = ibp_affine(&h, &enc.var_head, store)?;
            let sp = ibp_monotonic(&pre, Monotone::Softplus);
            let variance = IntervalBounds::new(
                sp.lower().map(|x| x + VARIANCE_FLOOR),
                sp.upper().map(|x| x + VARIANCE_FLOOR),
            )?;
            Ok(EncoderBounds { mean, variance })
        })
        .collect()
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return shape_err(format!("row counts {} vs {}", a.rows(), b.rows()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row_slice(r));
        data.extend_from_slice(b.row_slice(r));
    }
    Tensor::matrix(a.rows(), a.cols() + b.cols(), data)
}

/// Per-action value bounds of `qhead([τ, z'])` over every `z'` within
/// `κ·ε` of `z` in ℓ∞; `τ` is held exact.
pub fn q_value_bounds(
    tau: &Tensor,
    z: &Tensor,
    budget: PerturbationBudget,
    qhead: &[ChainLayer],
    store: &ParamStore,
) -> Result<IntervalBounds> {
    let r = budget.latent_radius();
    let lower = concat_rows(tau, &z.map(|x| x - r))?;
    let upper = concat_rows(tau, &z.map(|x| x + r))?;
    ibp_chain(IntervalBounds::new(lower, upper)?, qhead, store)
}

/// Differentiable `(average, residual)` propagation; returns `(lower, upper)`.
pub fn ibp_chain_taped(g: &mut Graph, mut avg: Var, mut res: Var, chain: &[ChainLayer]) -> Result<(Var, Var)> {
    for layer in chain {
        match layer {
            ChainLayer::Affine(a) => {
                let mid = a.forward(g, avg)?;
                let w = g.param(a.w);
                let aw = g.abs(w);
                let zero = g.constant(Tensor::zeros(1, a.out_dim));
                res = g.linear(res, aw, zero);
                avg = mid;
            }
            ChainLayer::Elementwise(act) => {
                let f = monotone_of(*act)?;
                let lo = g.sub(avg, res);
                let hi = g.add(avg, res);
                let (lo, hi) = match f {
                    Monotone::Relu => (g.relu(lo), g.relu(hi)),
                    Monotone::Softplus => (g.softplus(lo), g.softplus(hi)),
                    Monotone::Tanh => (g.tanh(lo), g.tanh(hi)),
                    Monotone::Sigmoid => (g.sigmoid(lo), g.sigmoid(hi)),
                };
                let s = g.add(hi, lo);
                let d = g.sub(hi, lo);
                avg = g.scale(s, 0.5);
                res = g.scale(d, 0.5);
            }
        }
    }
    Ok((g.sub(avg, res), g.add(avg, res)))
}

/// Taped form of [`q_value_bounds`]; gradients reach the Q-head weights.
pub fn q_value_bounds_taped(g: &mut Graph, tau: Var, z: Var, radius: f64, qhead: &[ChainLayer]) -> Result<(Var, Var)> {
    let (rows, tw, zw) = (g.value(tau).rows(), g.value(tau).cols(), g.value(z).cols());
    if g.value(z).rows() != rows {
        return shape_err("tau and z row counts differ");
    }
    let avg = g.concat_cols(tau, z);
    let mut res = Vec::with_capacity(rows * (tw + zw));
    for _ in 0..rows {
        res.extend(std::iter::repeat_n(0.0, tw));
        res.extend(std::iter::repeat_n(radius, zw));
    }
    let res = g.constant(Tensor::matrix(rows, tw + zw, res)?);
    ibp_chain_taped(g, avg, res, qhead)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::linear_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_in(b: &IntervalBounds, rng: &mut impl Rng) -> Tensor {
        let data = b
            .lower()
            .data()
            .iter()
            .zip(b.upper().data())
            .map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l })
            .collect();
        Tensor::new(b.lower().shape().to_vec(), data).unwrap()
    }

    fn forward_chain(x: &Tensor, chain: &[ChainLayer], store: &ParamStore) -> Tensor {
        let mut x = x.clone();
        for l in chain {
            x = match l {
                ChainLayer::Affine(a) => linear_forward(&x, a.weight(store), a.bias(store)).unwrap(),
                ChainLayer::Elementwise(act) => x.map(|v| act.monotone().unwrap().apply(v)),
            };
        }
        x
    }

    #[test]
    fn identity_mean_head() {
        let mut store = ParamStore::new();
        let one = || Tensor::from_rows(&[vec![1.0]]).unwrap();
        let enc = MessageEncoder::from_heads(&mut store, "m", one(), Tensor::row(&[0.0]), one(), Tensor::row(&[0.0]));
        let b = encoder_bounds(&[Tensor::row(&[0.5])], 0.1, &enc, &store).unwrap();
        assert!((b[0].mean.lower().data()[0] - 0.4).abs() < 1e-15);
        assert!((b[0].mean.upper().data()[0] - 0.6).abs() < 1e-15);
        let z = encoder_bounds(&[Tensor::row(&[0.5])], 0.0, &enc, &store).unwrap();
        assert_eq!(z[0].mean.lower(), z[0].mean.upper());
        assert!(encoder_bounds(&[Tensor::row(&[0.5, 0.1])], 0.1, &enc, &store).is_err());
    }

    #[test]
    fn clamped_encoder_contains_perturbed_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = MessageEncoder::new(&mut store, "m", 16, &[], 4, &mut rng);
        for id in enc.weight_ids() {
            for x in store.get_mut(id).data_mut() {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
        let m = Tensor::matrix(1, 16, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = &encoder_bounds(std::slice::from_ref(&m), 0.5, &enc, &store).unwrap()[0];
        let ball = epsilon_ball(&m, 0.5).unwrap();
        for _ in 0..1000 {
            let mp = sample_in(&ball, &mut rng);
            let mut g = Graph::frozen(&store);
            let mv = g.constant(mp);
            let (mean, var) = enc.encode(&mut g, mv).unwrap();
            assert!(b.mean.contains(g.value(mean), 1e-9));
            assert!(b.variance.contains(g.value(var), 1e-9));
        }
    }

    #[test]
    fn single_affine_head_by_corners() {
        let mut store = ParamStore::new();
        let layer = AffineLayer::with_values(
            &mut store,
            "q",
            Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            Tensor::row(&[0.0, 0.0]),
        );
        let chain = [ChainLayer::Affine(layer)];
        let budget = PerturbationBudget::new(0.5, 1.0).unwrap();
        let b = q_value_bounds(&Tensor::zeros(1, 0), &Tensor::row(&[0.5]), budget, &chain, &store).unwrap();
        assert_eq!(b.lower().data(), &[0.0, -1.0]);
        assert_eq!(b.upper().data(), &[1.0, 0.0]);
    }

    fn random_head(rng: &mut ChaCha8Rng) -> (ParamStore, Vec<ChainLayer>) {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "q", &[5, 7, 3], rng);
        (store, mlp_chain(&mlp))
    }

    #[test]
    fn zero_radius_gives_exact_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (store, chain) = random_head(&mut rng);
        let tau = Tensor::row(&[0.1, -0.3, 0.7]);
        let z = Tensor::row(&[0.2, -0.5]);
        let b = q_value_bounds(&tau, &z, PerturbationBudget::new(0.0, 1.0).unwrap(), &chain, &store).unwrap();
        let exact = forward_chain(&concat_rows(&tau, &z).unwrap(), &chain, &store);
        for ((l, u), e) in b.lower().data().iter().zip(b.upper().data()).zip(exact.data()) {
            assert!((l - e).abs() < 1e-12 && (u - e).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_head_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (store, chain) = random_head(&mut rng);
        let tau = Tensor::row(&[0.4, 0.0, -0.9]);
        let z = Tensor::row(&[1.2, -0.1]);
        let budget = PerturbationBudget::new(0.3, 1.5).unwrap();
        let b = q_value_bounds(&tau, &z, budget, &chain, &store).unwrap();
        let zb = epsilon_ball(&z, budget.latent_radius()).unwrap();
        for _ in 0..1000 {
            let x = concat_rows(&tau, &sample_in(&zb, &mut rng)).unwrap();
            assert!(b.contains(&forward_chain(&x, &chain, &store), 1e-9));
        }
    }

    #[test]
    fn taped_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (store, chain) = random_head(&mut rng);
        let tau = Tensor::from_rows(&[vec![0.4, 0.0, -0.9], vec![0.1, 0.2, 0.3]]).unwrap();
        let z = Tensor::from_rows(&[vec![1.2, -0.1], vec![0.0, 0.5]]).unwrap();
        let budget = PerturbationBudget::new(0.2, 2.0).unwrap();
        let plain = q_value_bounds(&tau, &z, budget, &chain, &store).unwrap();
        let mut g = Graph::frozen(&store);
        let (tv, zv) = (g.constant(tau), g.constant(z));
        let (lo, hi) = q_value_bounds_taped(&mut g, tv, zv, budget.latent_radius(), &chain).unwrap();
        for (a, b) in g.value(lo).data().iter().zip(plain.lower().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(hi).data().iter().zip(plain.upper().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_monotone_stage_rejected() {
        let store = ParamStore::new();
        let chain = [ChainLayer::Elementwise(Activation::Abs)];
        let r = q_value_bounds(&Tensor::row(&[0.0]), &Tensor::row(&[0.0]), PerturbationBudget::new(0.1, 1.0).unwrap(), &chain, &store);
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn bounds_grow_with_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (store, chain) = random_head(&mut rng);
        let tau = Tensor::row(&[0.4, 0.0, -0.9]);
        let z = Tensor::row(&[1.2, -0.1]);
        let mut prev: Option<IntervalBounds> = None;
        for k in 0..10 {
            let b = q_value_bounds(&tau, &z, PerturbationBudget::new(0.05 * k as f64, 1.0).unwrap(), &chain, &store).unwrap();
            if let Some(p) = prev {
                assert!(b.encloses(&p, 1e-12));
            }
            prev = Some(b);
        }
    }
}
