use crate::diffcore::{linear_forward, AffineLayer, ParamStore, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Elementwise box `[lower, upper]`.
///
/// Equivalently described by its average `½(upper + lower)` and residual
/// `½(upper − lower)`, the form in which affine layers propagate it.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalBounds {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return shape_err(format!("lower {:?} vs upper {:?}", lower.shape(), upper.shape()));
        }
        if let Some((l, u)) = lower.data().iter().zip(upper.data()).find(|(l, u)| l > u) {
            return Err(Error::Domain(format!("lower bound {l} exceeds upper bound {u}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: &Tensor) -> Self {
        Self { lower: x.clone(), upper: x.clone() }
    }

    pub fn from_average_residual(average: &Tensor, residual: &Tensor) -> Result<Self> {
        if residual.data().iter().any(|r| *r < 0.0) {
            return Err(Error::Domain("negative residual".into()));
        }
        let lower = average.zip_map(residual, |m, r| m - r)?;
        let upper = average.zip_map(residual, |m, r| m + r)?;
        Self::new(lower, upper)
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn average(&self) -> Tensor {
        self.upper.zip_map(&self.lower, |u, l| 0.5 * (u + l)).expect("equal shapes")
    }

    pub fn residual(&self) -> Tensor {
        self.upper.zip_map(&self.lower, |u, l| 0.5 * (u - l)).expect("equal shapes")
    }

    pub fn width(&self) -> Tensor {
        self.upper.zip_map(&self.lower, |u, l| u - l).expect("equal shapes")
    }

    /// Whether `x` lies inside the box up to `slack`.
    pub fn contains(&self, x: &Tensor, slack: f64) -> bool {
        x.shape() == self.lower.shape()
            && x.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| *v >= l - slack && *v <= u + slack)
    }

    /// Whether `other` is contained in `self` elementwise.
    pub fn encloses(&self, other: &IntervalBounds, slack: f64) -> bool {
        self.contains(&other.lower, slack) && self.contains(&other.upper, slack)
    }
}

/// ℓ∞ adversary strength: messages move by at most `epsilon`; the latent
/// certification radius used by the adversarial loss is `kappa · epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationBudget {
    epsilon: f64,
    kappa: f64,
}

impl PerturbationBudget {
    pub fn new(epsilon: f64, kappa: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return contract_err(format!("epsilon must be a finite value ≥ 0, got {epsilon}"));
        }
        if !(kappa > 0.0) || !kappa.is_finite() {
            return contract_err(format!("kappa must be finite and > 0, got {kappa}"));
        }
        Ok(Self { epsilon, kappa })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `κ·ε`.
    pub fn latent_radius(&self) -> f64 {
        self.kappa * self.epsilon
    }
}

/// `[x − ε, x + ε]`.
pub fn epsilon_ball(x: &Tensor, epsilon: f64) -> Result<IntervalBounds> {
    if !(epsilon >= 0.0) {
        return contract_err(format!("epsilon must be ≥ 0, got {epsilon}"));
    }
    Ok(IntervalBounds { lower: x.map(|v| v - epsilon), upper: x.map(|v| v + epsilon) })
}

/// Push a box through `W·x + b`: the average maps affinely, the residual
/// through `|W|`.
pub fn ibp_affine_raw(input: &IntervalBounds, w: &Tensor, b: &Tensor) -> Result<IntervalBounds> {
    let avg = linear_forward(&input.average(), w, b)?;
    let abs_w = w.map(f64::abs);
    let zero_bias = Tensor::zeros(1, w.rows());
    let res = linear_forward(&input.residual(), &abs_w, &zero_bias)?;
    IntervalBounds::from_average_residual(&avg, &res)
}

pub fn ibp_affine(input: &IntervalBounds, layer: &AffineLayer, store: &ParamStore) -> Result<IntervalBounds> {
    ibp_affine_raw(input, layer.weight(store), layer.bias(store))
}

/// Elementwise nondecreasing maps with exact interval images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotone {
    Relu,
    Softplus,
    Tanh,
    Sigmoid,
}

impl Monotone {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Monotone::Relu => x.max(0.0),
            Monotone::Softplus => softplus(x),
            Monotone::Tanh => x.tanh(),
            Monotone::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Image of a box under a monotone nondecreasing elementwise map.
pub fn ibp_monotonic(input: &IntervalBounds, f: Monotone) -> IntervalBounds {
    ibp_monotonic_with(input, |x| f.apply(x))
}

/// As [`ibp_monotonic`] for an arbitrary map the caller asserts is nondecreasing.
pub fn ibp_monotonic_with(input: &IntervalBounds, f: impl Fn(f64) -> f64) -> IntervalBounds {
    IntervalBounds { lower: input.lower.map(&f), upper: input.upper.map(&f) }
}
