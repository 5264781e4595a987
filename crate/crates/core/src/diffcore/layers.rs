use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Fully connected layer `y = W·x + b`; `W` is `out × in`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineLayer {
    /// Register a layer with the usual `U(-1/√in, 1/√in)` initialisation.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::with_values(
            store,
            name,
            Tensor::matrix(out_dim, in_dim, w).expect("weight shape"),
            Tensor::matrix(1, out_dim, b).expect("bias shape"),
        )
    }

    pub fn with_values(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor) -> Self {
        let (out_dim, in_dim) = (w.rows(), w.cols());
        assert_eq!(b.len(), out_dim, "bias length must equal weight rows");
        let b = b.reshaped(1, out_dim).expect("bias");
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), b);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.in_dim {
            return shape_err(format!("affine layer expects width {}, got {width}", self.in_dim));
        }
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.linear(x, w, b))
    }

    pub fn weight<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.get(self.w)
    }

    pub fn bias<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.get(self.b)
    }
}

/// Evaluate `x · Wᵀ + b` without recording a tape. `x` may hold several rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k, o) = (x.rows(), x.cols(), w.rows());
    if w.cols() != k {
        return shape_err(format!("input width {k} vs weight width {}", w.cols()));
    }
    if b.len() != o {
        return shape_err(format!("bias length {} vs {o} outputs", b.len()));
    }
    let mut out = Vec::with_capacity(r * o);
    for i in 0..r {
        let xr = x.row_slice(i);
        for j in 0..o {
            out.push(xr.iter().zip(w.row_slice(j)).fold(b.data()[j], |acc, (a, b)| acc + a * b));
        }
    }
    Tensor::matrix(r, o, out)
}

/// Stack of affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<AffineLayer>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| AffineLayer::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}
