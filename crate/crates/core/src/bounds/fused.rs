use super::interval::IntervalBounds;
use crate::diffcore::Tensor;
use crate::error::{contract_err, shape_err, Error, Result};

/// Boxes on the fused mean and fused variance of a product of experts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBounds {
    pub mean: IntervalBounds,
    pub variance: IntervalBounds,
}

fn check_set(set: &[IntervalBounds], what: &str) -> Result<Vec<usize>> {
    let Some(first) = set.first() else {
        return contract_err(format!("empty list of {what} bounds"));
    };
    let shape = first.lower().shape().to_vec();
    if set.iter().any(|b| b.lower().shape() != shape.as_slice()) {
        return shape_err(format!("{what} bounds disagree in shape"));
    }
    Ok(shape)
}

/// `(Σ_i 1/x_i)⁻¹` elementwise, i.e. the fused variance of experts with
/// variances `x_i`.
fn harmonic_sum(xs: &[&Tensor], shape: &[usize]) -> Tensor {
    let mut acc = vec![0.0; xs[0].len()];
    for x in xs {
        for (a, v) in acc.iter_mut().zip(x.data()) {
            *a += 1.0 / v;
        }
    }
    Tensor::new(shape.to_vec(), acc.into_iter().map(|p| 1.0 / p).collect()).expect("shape")
}

/// Constant added to every mean bound so the smallest becomes 1.
pub fn mean_shift(mean_bounds: &[IntervalBounds]) -> f64 {
    let min = mean_bounds
        .iter()
        .flat_map(|b| b.lower().data())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    1.0 - min
}

/// Bounds on the fused latent given per-expert boxes.
///
/// The fused variance is increasing in every expert variance, so the box is
/// `[(Σ 1/z̲_i)⁻¹, (Σ 1/z̄_i)⁻¹]`, which lies within
/// `[min(z̲)/N, max(z̄)/N]`. The fused mean is a weighted harmonic mean of the
/// expert means once they are shifted positive, so it stays within the range
/// of the shifted means; the shift is undone afterwards.
pub fn poe_harmonic_bounds(variance_bounds: &[IntervalBounds], mean_bounds: &[IntervalBounds]) -> Result<FusedBounds> {
    let shape = check_set(variance_bounds, "variance")?;
    if check_set(mean_bounds, "mean")? != shape || mean_bounds.len() != variance_bounds.len() {
        return shape_err("mean and variance bounds must pair up");
    }
    if let Some(v) = variance_bounds.iter().flat_map(|b| b.lower().data()).find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("variance lower bound must be > 0, got {v}")));
    }

    let lowers: Vec<&Tensor> = variance_bounds.iter().map(|b| b.lower()).collect();
    let uppers: Vec<&Tensor> = variance_bounds.iter().map(|b| b.upper()).collect();
    let variance = IntervalBounds::new(harmonic_sum(&lowers, &shape), harmonic_sum(&uppers, &shape))?;

    let c = mean_shift(mean_bounds);
    let len = mean_bounds[0].lower().len();
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    for b in mean_bounds {
        for k in 0..len {
            lo[k] = lo[k].min(b.lower().data()[k] + c);
            hi[k] = hi[k].max(b.upper().data()[k] + c);
        }
    }
    let mean = IntervalBounds::new(
        Tensor::new(shape.clone(), lo.into_iter().map(|x| x - c).collect())?,
        Tensor::new(shape, hi.into_iter().map(|x| x - c).collect())?,
    )?;
    Ok(FusedBounds { mean, variance })
}

/// The coarser scalar envelope `[min(z̲)/N, max(z̄)/N]` broadcast to the
/// latent shape, where min and max run over every entry of every expert.
pub fn variance_envelope(variance_bounds: &[IntervalBounds]) -> Result<IntervalBounds> {
    let shape = check_set(variance_bounds, "variance")?;
    let n = variance_bounds.len() as f64;
    let (min, max) = extremes(variance_bounds);
    let len: usize = shape.iter().product();
    IntervalBounds::new(Tensor::new(shape.clone(), vec![min / n; len])?, Tensor::new(shape, vec![max / n; len])?)
}

fn extremes(set: &[IntervalBounds]) -> (f64, f64) {
    let min = set.iter().flat_map(|b| b.lower().data()).cloned().fold(f64::INFINITY, f64::min);
    let max = set.iter().flat_map(|b| b.upper().data()).cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// `(max(z̄) − min(z̲)) / N` over every entry of every box.
pub fn integration_error_bound(z_bounds: &[IntervalBounds], n: usize) -> Result<f64> {
    check_set(z_bounds, "latent")?;
    if n == 0 {
        return contract_err("expert count must be positive");
    }
    let (min, max) = extremes(z_bounds);
    Ok((max - min) / n as f64)
}
