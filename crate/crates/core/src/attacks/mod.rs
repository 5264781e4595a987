//! Test-time message perturbations and the ablated-message-ensemble
//! baseline.

pub mod ame;

use rand::Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub use ame::{ame_subset_masks, ame_subset_sample, ame_subsets, ame_vote, AmePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Natural,
    Random,
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Natural => "natural",
            AttackKind::Random => "random",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(AttackKind::Natural),
            "random" => Ok(AttackKind::Random),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            _ => Err(Error::Config(format!("unknown attack {s:?}"))),
        }
    }
}

/// A perturbation model with its ℓ∞ budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Iterations for PGD; ignored otherwise.
    pub steps: usize,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, epsilon: f64, steps: usize) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("attack epsilon must be finite and ≥ 0, got {epsilon}")));
        }
        if kind == AttackKind::Pgd && steps == 0 {
            return Err(Error::Config("pgd needs at least one step".into()));
        }
        Ok(Self { kind, epsilon, steps })
    }

    pub fn natural() -> Self {
        Self { kind: AttackKind::Natural, epsilon: 0.0, steps: 1 }
    }

    pub fn fgsm(epsilon: f64) -> Result<Self> {
        Self::new(AttackKind::Fgsm, epsilon, 1)
    }

    pub fn pgd(epsilon: f64) -> Result<Self> {
        Self::new(AttackKind::Pgd, epsilon, 3)
    }

    pub fn random(epsilon: f64) -> Result<Self> {
        Self::new(AttackKind::Random, epsilon, 1)
    }

    /// Largest deviation any output may have from its input.
    pub fn budget(&self) -> f64 {
        match self.kind {
            AttackKind::Natural => 0.0,
            _ => self.epsilon,
        }
    }

    /// Perturb the rows of `messages` flagged in `attackable`.
    pub fn apply(
        &self,
        messages: &Tensor,
        attackable: &[bool],
        victim: &impl Victim,
        targets: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        match self.kind {
            AttackKind::Natural => Ok(messages.clone()),
            AttackKind::Random => random_attack(messages, attackable, self.epsilon, rng),
            AttackKind::Fgsm => fgsm_attack(messages, attackable, victim, targets, self.epsilon),
            AttackKind::Pgd => pgd_attack(messages, attackable, victim, targets, self.epsilon, self.steps),
        }
    }
}

/// White-box access to the receiving network: the attack objective and its
/// gradient with respect to the message rows.
pub trait Victim {
    fn objective_grad(&self, messages: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)>;
}

impl<F> Victim for F
where
    F: Fn(&Tensor, &[usize]) -> Result<(f64, Tensor)>,
{
    fn objective_grad(&self, messages: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
        self(messages, targets)
    }
}

/// `Σ_r −log softmax(q_r)[y_r]`: the cross-entropy of each row's values
/// against the action it originally chose.
pub fn attack_objective(g: &mut Graph, q: Var, targets: &[usize]) -> Var {
    let lp = g.log_softmax(q);
    let picked = g.gather_cols(lp, targets);
    let s = g.sum_all(picked);
    g.scale(s, -1.0)
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `x` into `[orig − eps, orig + eps]` so that `|x − orig| ≤ eps` holds
/// after rounding, not just in exact arithmetic.
pub fn project(orig: f64, x: f64, eps: f64) -> f64 {
    let mut y = x.clamp(orig - eps, orig + eps);
    while (y - orig).abs() > eps {
        y = if y > orig { y.next_down() } else { y.next_up() };
    }
    y
}

fn check_rows(messages: &Tensor, attackable: &[bool]) -> Result<()> {
    if attackable.len() != messages.rows() {
        return shape_err(format!("{} attack flags for {} message rows", attackable.len(), messages.rows()));
    }
    Ok(())
}

fn signed_step(orig: &Tensor, current: &Tensor, grad: &Tensor, attackable: &[bool], step: f64, eps: f64) -> Result<Tensor> {
    if grad.shape() != current.shape() {
        return shape_err("victim gradient shape differs from messages");
    }
    let cols = current.cols();
    let mut out = current.clone();
    for (r, &on) in attackable.iter().enumerate() {
        if !on {
            continue;
        }
        for c in 0..cols {
            let k = r * cols + c;
            let x = current.data()[k] + step * sign(grad.data()[k]);
            out.data_mut()[k] = project(orig.data()[k], x, eps);
        }
    }
    Ok(out)
}

/// `m̂ = m + ε·sign(∇_m J)` on attackable rows.
pub fn fgsm_attack(messages: &Tensor, attackable: &[bool], victim: &impl Victim, targets: &[usize], epsilon: f64) -> Result<Tensor> {
    check_rows(messages, attackable)?;
    if epsilon == 0.0 {
        return Ok(messages.clone());
    }
    let (_, grad) = victim.objective_grad(messages, targets)?;
    signed_step(messages, messages, &grad, attackable, epsilon, epsilon)
}

/// `steps` signed steps of size `ε/3`, each projected back onto the ε-ball
/// around the clean messages.
pub fn pgd_attack(
    messages: &Tensor,
    attackable: &[bool],
    victim: &impl Victim,
    targets: &[usize],
    epsilon: f64,
    steps: usize,
) -> Result<Tensor> {
    check_rows(messages, attackable)?;
    let mut m = messages.clone();
    if epsilon == 0.0 {
        return Ok(m);
    }
    for _ in 0..steps {
        let (_, grad) = victim.objective_grad(&m, targets)?;
        m = signed_step(messages, &m, &grad, attackable, epsilon / 3.0, epsilon)?;
    }
    Ok(m)
}

/// Uniform noise in `[−ε, ε]` on attackable rows.
pub fn random_attack(messages: &Tensor, attackable: &[bool], epsilon: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_rows(messages, attackable)?;
    let mut out = messages.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let cols = messages.cols();
    for (r, &on) in attackable.iter().enumerate() {
        if !on {
            continue;
        }
        for c in 0..cols {
            let k = r * cols + c;
            let m = messages.data()[k];
            out.data_mut()[k] = project(m, m + rng.gen_range(-epsilon..=epsilon), epsilon);
        }
    }
    Ok(out)
}

/// `max |a − b|` over all coordinates.
pub fn max_deviation(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err("deviation of differently shaped tensors");
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{AffineLayer, ParamStore};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_victim(g: Vec<f64>) -> impl Fn(&Tensor, &[usize]) -> Result<(f64, Tensor)> {
        move |m: &Tensor, _: &[usize]| {
            let j = m.data().iter().zip(&g).map(|(a, b)| a * b).sum();
            Ok((j, Tensor::matrix(m.rows(), m.cols(), g.clone())?))
        }
    }

    /// Cross-entropy through one random affine layer over concatenated rows.
    struct LinearVictim {
        store: ParamStore,
        layer: AffineLayer,
    }

    impl LinearVictim {
        fn new(rows: usize, cols: usize, actions: usize, seed: u64) -> Self {
            let mut store = ParamStore::new();
            let layer = AffineLayer::new(&mut store, "v", rows * cols, actions, &mut ChaCha8Rng::seed_from_u64(seed));
            Self { store, layer }
        }
    }

    impl Victim for LinearVictim {
        fn objective_grad(&self, m: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
            let mut g = Graph::frozen(&self.store);
            let x = g.leaf(m.clone());
            let flat = g.reshape(x, 1, m.len());
            let q = self.layer.forward(&mut g, flat)?;
            let j = attack_objective(&mut g, q, targets);
            let grads = g.backward(j)?;
            Ok((g.scalar(j), grads.get(x)))
        }
    }

    #[test]
    fn fgsm_examples() {
        let m = Tensor::row(&[1.0, 2.0, 3.0]);
        let v = constant_victim(vec![0.3, -0.1, 0.0]);
        let out = fgsm_attack(&m, &[true], &v, &[0], 0.5).unwrap();
        let eta: Vec<f64> = out.data().iter().zip(m.data()).map(|(a, b)| a - b).collect();
        assert_eq!(eta, vec![0.5, -0.5, 0.0]);
        assert_eq!(fgsm_attack(&m, &[true], &v, &[0], 0.0).unwrap(), m);
        assert_eq!(fgsm_attack(&m, &[false], &v, &[0], 0.5).unwrap(), m);
    }

    #[test]
    fn pgd_examples() {
        let m = Tensor::from_rows(&[vec![0.1, -0.7], vec![0.3, 0.2]]).unwrap();
        let v = constant_victim(vec![1.0, -2.0, 0.5, -0.1]);
        let one = pgd_attack(&m, &[true, true], &v, &[0], 0.6, 1).unwrap();
        // Equal up to the rounding guard of the tighter FGSM ball.
        let fgsm = fgsm_attack(&m, &[true, true], &v, &[0], 0.2).unwrap();
        assert!(max_deviation(&one, &fgsm).unwrap() < 1e-15);
        let three = pgd_attack(&m, &[true, true], &v, &[0], 0.6, 3).unwrap();
        let full = fgsm_attack(&m, &[true, true], &v, &[0], 0.6).unwrap();
        assert!(max_deviation(&three, &full).unwrap() < 1e-12);
        let five = pgd_attack(&m, &[true, true], &v, &[0], 0.6, 5).unwrap();
        assert!(max_deviation(&five, &m).unwrap() <= 0.6);
    }

    #[test]
    fn random_examples() {
        let m = Tensor::full(100, 100, 0.1);
        let flags = vec![true; 100];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_attack(&m, &flags, 0.0, &mut rng).unwrap(), m);
        let a = random_attack(&m, &flags, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_attack(&m, &flags, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let d = max_deviation(&a, &m).unwrap();
        assert!(d <= 0.3 && d > 0.29);
    }

    #[test]
    fn parse_round_trip() {
        for k in [AttackKind::Natural, AttackKind::Random, AttackKind::Fgsm, AttackKind::Pgd] {
            assert_eq!(AttackKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(AttackKind::parse("cw").is_err());
        assert!(AttackSpec::new(AttackKind::Fgsm, -0.1, 1).is_err());
        assert!(AttackSpec::new(AttackKind::Pgd, 0.1, 0).is_err());
    }

    #[test]
    fn victim_gradient_matches_finite_differences() {
        let v = LinearVictim::new(2, 3, 4, 1);
        let m = Tensor::from_rows(&[vec![0.2, -0.4, 0.9], vec![0.0, 0.5, -1.0]]).unwrap();
        let (_, grad) = v.objective_grad(&m, &[2]).unwrap();
        for k in 0..m.len() {
            let h = 1e-6;
            let (mut p, mut q) = (m.clone(), m.clone());
            p.data_mut()[k] += h;
            q.data_mut()[k] -= h;
            let fd = (v.objective_grad(&p, &[2]).unwrap().0 - v.objective_grad(&q, &[2]).unwrap().0) / (2.0 * h);
            assert!((fd - grad.data()[k]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn budgets_hold_exactly(
            seed in 0u64..10_000,
            eps in prop_oneof![Just(0.1), Just(0.3), Just(0.7), 0.0f64..2.0],
            vals in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let m = Tensor::matrix(2, 3, vals).unwrap();
            let v = LinearVictim::new(2, 3, 3, seed);
            let flags = [true, seed % 2 == 0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for spec in [AttackSpec::fgsm(eps).unwrap(), AttackSpec::pgd(eps).unwrap(), AttackSpec::random(eps).unwrap()] {
                let out = spec.apply(&m, &flags, &v, &[1], &mut rng).unwrap();
                for r in 0..2 {
                    for c in 0..3 {
                        let d = (out.get(r, c) - m.get(r, c)).abs();
                        prop_assert!(d <= eps);
                        if !flags[r] {
                            prop_assert_eq!(d, 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn fgsm_ascends(seed in 0u64..10_000, vals in proptest::collection::vec(-2.0f64..2.0, 6), y in 0usize..3) {
            let m = Tensor::matrix(2, 3, vals).unwrap();
            let v = LinearVictim::new(2, 3, 3, seed);
            let (j0, grad) = v.objective_grad(&m, &[y]).unwrap();
            let l1: f64 = grad.data().iter().map(|x| x.abs()).sum();
            prop_assume!(l1 > 1e-6);
            let eps = 1e-6;
            let out = fgsm_attack(&m, &[true, true], &v, &[y], eps).unwrap();
            let (j1, _) = v.objective_grad(&out, &[y]).unwrap();
            // First order: J rises by ε·‖∇J‖₁.
            prop_assert!(j1 > j0);
            prop_assert!(((j1 - j0) - eps * l1).abs() < 1e-3 * eps * l1 + 1e-12);
        }
    }

    #[test]
    fn projection_survives_rounding() {
        // 0.1 + 0.3 − 0.1 rounds above 0.3.
        let y = project(0.1, 0.1 + 0.3, 0.3);
        assert!((y - 0.1).abs() <= 0.3);
        assert_eq!(project(1.0, 5.0, 0.0), 1.0);
    }
}
