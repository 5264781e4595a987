use rand::Rng;

use super::layers::AffineLayer;
use super::params::{Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Three-gate recurrent cell:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// u  = σ(W_iu x + b_iu + W_hu h + b_hu)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruCell {
    pub input_reset: AffineLayer,
    pub hidden_reset: AffineLayer,
    pub input_update: AffineLayer,
    pub hidden_update: AffineLayer,
    pub input_candidate: AffineLayer,
    pub hidden_candidate: AffineLayer,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Hidden state carried between steps, one row per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub hidden: Tensor,
}

impl GruState {
    pub fn zeros(rows: usize, hidden_dim: usize) -> Self {
        Self { hidden: Tensor::zeros(rows, hidden_dim) }
    }
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        // Both input and hidden transforms use the 1/√hidden scale, as in the
        // common framework default for recurrent cells.
        let mk = |store: &mut ParamStore, gate: &str, fan_in: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (hidden_dim as f64).sqrt();
            let w = (0..fan_in * hidden_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..hidden_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            AffineLayer::with_values(
                store,
                &format!("{name}.{gate}"),
                Tensor::matrix(hidden_dim, fan_in, w).expect("gru weight"),
                Tensor::matrix(1, hidden_dim, b).expect("gru bias"),
            )
        };
        Self {
            input_reset: mk(store, "ir", input_dim, rng),
            hidden_reset: mk(store, "hr", hidden_dim, rng),
            input_update: mk(store, "iu", input_dim, rng),
            hidden_update: mk(store, "hu", hidden_dim, rng),
            input_candidate: mk(store, "in", input_dim, rng),
            hidden_candidate: mk(store, "hn", hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    /// One recurrent step on the tape; `x: [rows, input_dim]`, `h: [rows, hidden_dim]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        if g.value(h).cols() != self.hidden_dim {
            return shape_err(format!("hidden width {} vs {}", g.value(h).cols(), self.hidden_dim));
        }
        if g.value(x).rows() != g.value(h).rows() {
            return shape_err("input and hidden row counts differ");
        }
        let ir = self.input_reset.forward(g, x)?;
        let hr = self.hidden_reset.forward(g, h)?;
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let iu = self.input_update.forward(g, x)?;
        let hu = self.hidden_update.forward(g, h)?;
        let u = g.add(iu, hu);
        let u = g.sigmoid(u);
        let inn = self.input_candidate.forward(g, x)?;
        let hn = self.hidden_candidate.forward(g, h)?;
        let gated = g.mul(r, hn);
        let n = g.add(inn, gated);
        let n = g.tanh(n);
        // h' = n + u ⊙ (h − n)
        let diff = g.sub(h, n);
        let keep = g.mul(u, diff);
        Ok(g.add(n, keep))
    }

    /// Untaped convenience wrapper.
    pub fn gru_step(&self, store: &ParamStore, x: &Tensor, state: &GruState) -> Result<GruState> {
        let mut g = Graph::frozen(store);
        let xv = g.constant(x.clone());
        let hv = g.constant(state.hidden.clone());
        let out = self.step(&mut g, xv, hv)?;
        Ok(GruState { hidden: g.value(out).clone() })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            &self.input_reset,
            &self.hidden_reset,
            &self.input_update,
            &self.hidden_update,
            &self.input_candidate,
            &self.hidden_candidate,
        ]
        .iter()
        .flat_map(|l| [l.w, l.b])
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed() -> (ParamStore, GruCell) {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        (store, cell)
    }

    #[test]
    fn all_zero_is_a_fixed_point() {
        let (store, cell) = zeroed();
        let s = cell.gru_step(&store, &Tensor::zeros(1, 3), &GruState::zeros(1, 4)).unwrap();
        assert_eq!(s.hidden.data(), &[0.0; 4]);
    }

    #[test]
    fn zero_weights_halve_the_hidden_state() {
        let (store, cell) = zeroed();
        let h = GruState { hidden: Tensor::row(&[0.8, -0.4, 0.2, 1.0]) };
        let s = cell.gru_step(&store, &Tensor::row(&[5.0, -2.0, 0.3]), &h).unwrap();
        assert_eq!(s.hidden.data(), &[0.4, -0.2, 0.1, 0.5]);
    }

    #[test]
    fn repeated_input_stays_in_unit_box() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let x = Tensor::row(&[4.0, -3.0, 2.5]);
        let mut s = GruState::zeros(1, 4);
        for _ in 0..50 {
            s = cell.gru_step(&store, &x, &s).unwrap();
            assert!(s.hidden.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn wrong_input_width() {
        let (store, cell) = zeroed();
        assert!(cell.gru_step(&store, &Tensor::zeros(1, 2), &GruState::zeros(1, 4)).is_err());
    }
}
