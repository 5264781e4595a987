use crate::diffcore::Tensor;
use crate::error::{contract_err, shape_err, Error, Result};

/// Diagonal Gaussian `N(mean, diag(variance))`; one distribution per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Tensor,
    variance: Tensor,
}

impl DiagonalGaussian {
    pub fn new(mean: Tensor, variance: Tensor) -> Result<Self> {
        if mean.shape() != variance.shape() {
            return shape_err(format!("mean {:?} vs variance {:?}", mean.shape(), variance.shape()));
        }
        if let Some(v) = variance.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("variance must be > 0, got {v}")));
        }
        Ok(Self { mean, variance })
    }

    /// `N(0, I)` of the given width.
    pub fn standard(rows: usize, dim: usize) -> Self {
        Self { mean: Tensor::zeros(rows, dim), variance: Tensor::full(rows, dim, 1.0) }
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn variance(&self) -> &Tensor {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn precision(&self) -> Tensor {
        self.variance.map(f64::recip)
    }
}

/// Product of Gaussian experts: precisions add, the mean is the
/// precision-weighted average.
pub fn poe_fuse(experts: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let Some(first) = experts.first() else {
        return contract_err("product of experts needs at least one expert");
    };
    let shape = first.mean.shape().to_vec();
    let mut precision = vec![0.0; first.mean.len()];
    let mut weighted = vec![0.0; first.mean.len()];
    for e in experts {
        if e.mean.shape() != shape.as_slice() {
            return shape_err(format!("expert shape {:?} vs {:?}", e.mean.shape(), shape));
        }
        for ((p, w), (m, v)) in precision.iter_mut().zip(weighted.iter_mut()).zip(e.mean.data().iter().zip(e.variance.data())) {
            let t = 1.0 / v;
            *p += t;
            *w += m * t;
        }
    }
    let variance: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
    let mean: Vec<f64> = weighted.iter().zip(&variance).map(|(w, v)| w * v).collect();
    DiagonalGaussian::new(Tensor::new(shape.clone(), mean)?, Tensor::new(shape, variance)?)
}

/// Which argument of the message KL is the stop-gradient state posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(sg(state) ‖ message)`.
    #[default]
    StateToMessage,
    /// `KL(message ‖ sg(state))`.
    MessageToState,
}

impl KlDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::StateToMessage => "state-to-message",
            KlDirection::MessageToState => "message-to-state",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "state-to-message" => Ok(KlDirection::StateToMessage),
            "message-to-state" => Ok(KlDirection::MessageToState),
            _ => Err(Error::Config(format!("unknown kl direction {s:?}"))),
        }
    }
}

/// `KL(p ‖ q)` summed over dimensions and rows.
pub fn gaussian_kl(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    if p.mean.shape() != q.mean.shape() {
        return shape_err(format!("{:?} vs {:?}", p.mean.shape(), q.mean.shape()));
    }
    let mut total = 0.0;
    for i in 0..p.mean.len() {
        let (mp, vp) = (p.mean.data()[i], p.variance.data()[i]);
        let (mq, vq) = (q.mean.data()[i], q.variance.data()[i]);
        total += 0.5 * ((vq / vp).ln() + (vp + (mp - mq).powi(2)) / vq - 1.0);
    }
    Ok(total)
}

/// Message-alignment loss between the state posterior and the fused message
/// posterior. The state side is treated as a constant.
pub fn message_kl_loss(state: &DiagonalGaussian, fused: &DiagonalGaussian, direction: KlDirection) -> Result<f64> {
    match direction {
        KlDirection::StateToMessage => gaussian_kl(state, fused),
        KlDirection::MessageToState => gaussian_kl(fused, state),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(m: &[f64], v: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(Tensor::row(m), Tensor::row(v)).unwrap()
    }

    // Two-expert product written the other way round.
    fn pair(a: &DiagonalGaussian, b: &DiagonalGaussian) -> DiagonalGaussian {
        let mean = a
            .mean
            .zip_map(&b.variance, |m, v| m * v)
            .unwrap()
            .zip_map(&b.mean.zip_map(&a.variance, |m, v| m * v).unwrap(), |x, y| x + y)
            .unwrap()
            .zip_map(&a.variance.zip_map(&b.variance, |x, y| x + y).unwrap(), |n, d| n / d)
            .unwrap();
        let var = a
            .variance
            .zip_map(&b.variance, |x, y| x * y / (x + y))
            .unwrap();
        DiagonalGaussian::new(mean, var).unwrap()
    }

    #[test]
    fn two_standard_normals() {
        let f = poe_fuse(&[g(&[0.0], &[1.0]), g(&[0.0], &[1.0])]).unwrap();
        assert_eq!(f.mean().data(), &[0.0]);
        assert_eq!(f.variance().data(), &[0.5]);
    }

    #[test]
    fn means_one_and_three() {
        let f = poe_fuse(&[g(&[1.0], &[1.0]), g(&[3.0], &[1.0])]).unwrap();
        assert!((f.mean().data()[0] - 2.0).abs() < 1e-15);
        assert!((f.variance().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_experts_divide_variance() {
        let e = g(&[0.7, -0.2], &[0.9, 2.5]);
        let f = poe_fuse(&vec![e.clone(); 4]).unwrap();
        for (a, b) in f.mean().data().iter().zip(e.mean().data()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in f.variance().data().iter().zip(e.variance().data()) {
            assert!((a - b / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(poe_fuse(&[]), Err(Error::Contract(_))));
        assert!(matches!(DiagonalGaussian::new(Tensor::row(&[0.0]), Tensor::row(&[0.0])), Err(Error::Domain(_))));
        assert!(poe_fuse(&[g(&[0.0], &[1.0]), g(&[0.0, 1.0], &[1.0, 1.0])]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl(&g(&[0.3], &[0.7]), &g(&[0.3], &[0.7])).unwrap(), 0.0);
        let kl = gaussian_kl(&g(&[0.0], &[1.0]), &g(&[1.0], &[1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let kl = gaussian_kl(&g(&[1.0], &[1.0]), &DiagonalGaussian::standard(1, 1)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn direction_swaps_arguments() {
        let (p, q) = (g(&[0.0], &[1.0]), g(&[0.5], &[3.0]));
        let a = message_kl_loss(&p, &q, KlDirection::StateToMessage).unwrap();
        let b = message_kl_loss(&p, &q, KlDirection::MessageToState).unwrap();
        assert_eq!(a, gaussian_kl(&p, &q).unwrap());
        assert_eq!(b, gaussian_kl(&q, &p).unwrap());
        assert_eq!(KlDirection::parse(KlDirection::MessageToState.as_str()).unwrap(), KlDirection::MessageToState);
    }

    fn expert() -> impl Strategy<Value = DiagonalGaussian> {
        (prop::collection::vec(-3.0f64..3.0, 3), prop::collection::vec(0.05f64..4.0, 3)).prop_map(|(m, v)| g(&m, &v))
    }

    proptest! {
        #[test]
        fn batch_matches_pairwise_folding(es in prop::collection::vec(expert(), 1..6)) {
            let batch = poe_fuse(&es).unwrap();
            let folded = es[1..].iter().fold(es[0].clone(), |acc, e| pair(&acc, e));
            for (a, b) in batch.mean().data().iter().zip(folded.mean().data()) {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0));
            }
            for (a, b) in batch.variance().data().iter().zip(folded.variance().data()) {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
            }
        }

        #[test]
        fn order_invariant(es in prop::collection::vec(expert(), 2..6)) {
            let fwd = poe_fuse(&es).unwrap();
            let rev: Vec<_> = es.iter().rev().cloned().collect();
            let back = poe_fuse(&rev).unwrap();
            for (a, b) in fwd.mean().data().iter().zip(back.mean().data()) {
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }

        #[test]
        fn precision_is_sum_of_precisions(es in prop::collection::vec(expert(), 1..6)) {
            let f = poe_fuse(&es).unwrap();
            for d in 0..3 {
                let sum: f64 = es.iter().map(|e| 1.0 / e.variance().data()[d]).sum();
                let got = 1.0 / f.variance().data()[d];
                prop_assert!((got - sum).abs() <= 1e-12 * sum);
            }
        }

        #[test]
        fn kl_is_nonnegative(p in expert(), q in expert()) {
            prop_assert!(gaussian_kl(&p, &q).unwrap() >= -1e-12);
        }
    }
}
