use std::io::Write;

use super::fused::{integration_error_bound, poe_harmonic_bounds, FusedBounds};
use super::chain::encoder_bounds;
use super::interval::IntervalBounds;
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{shape_err, Result};
use crate::latent::MessageEncoder;

/// Fused-latent envelope for a receiver together with its integration-error
/// bound (computed from the variance boxes).
pub fn fused_message_bounds(
    messages: &[Tensor],
    epsilon: f64,
    enc: &MessageEncoder,
    store: &ParamStore,
) -> Result<(FusedBounds, f64)> {
    let per = encoder_bounds(messages, epsilon, enc, store)?;
    let vb: Vec<IntervalBounds> = per.iter().map(|b| b.variance.clone()).collect();
    let mb: Vec<IntervalBounds> = per.into_iter().map(|b| b.mean).collect();
    let fused = poe_harmonic_bounds(&vb, &mb)?;
    let err = integration_error_bound(&vb, messages.len())?;
    Ok((fused, err))
}

/// CSV stream of `step, agent, lower_0.., upper_0.., int_err_bound`.
pub struct BoundReportWriter<W: Write> {
    out: W,
    z_dim: usize,
}

impl<W: Write> BoundReportWriter<W> {
    pub fn new(mut out: W, z_dim: usize) -> Result<Self> {
        let mut cols = vec!["step".to_string(), "agent".to_string()];
        cols.extend((0..z_dim).map(|d| format!("lower_{d}")));
        cols.extend((0..z_dim).map(|d| format!("upper_{d}")));
        cols.push("int_err_bound".into());
        writeln!(out, "{}", cols.join(","))?;
        Ok(Self { out, z_dim })
    }

    pub fn write_row(&mut self, step: u64, agent: usize, z: &IntervalBounds, int_err: f64) -> Result<()> {
        if z.lower().len() != self.z_dim {
            return shape_err(format!("report expects {} dims, got {}", self.z_dim, z.lower().len()));
        }
        let mut fields = vec![step.to_string(), agent.to_string()];
        fields.extend(z.lower().data().iter().map(|x| x.to_string()));
        fields.extend(z.upper().data().iter().map(|x| x.to_string()));
        fields.push(int_err.to_string());
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_layout() {
        let mut w = BoundReportWriter::new(Vec::new(), 2).unwrap();
        let b = IntervalBounds::new(Tensor::row(&[-1.0, 0.0]), Tensor::row(&[1.0, 0.5])).unwrap();
        w.write_row(7, 1, &b, 0.25).unwrap();
        assert!(w.write_row(8, 0, &IntervalBounds::point(&Tensor::row(&[0.0])), 0.0).is_err());
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text, "step,agent,lower_0,lower_1,upper_0,upper_1,int_err_bound\n7,1,-1,0,1,0.5,0.25\n");
    }

    #[test]
    fn fused_envelope_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = MessageEncoder::new(&mut store, "m", 3, &[], 2, &mut rng);
        let msgs = vec![Tensor::row(&[0.1, 0.2, 0.3]), Tensor::row(&[-0.5, 0.0, 0.9])];
        let (f, err) = fused_message_bounds(&msgs, 0.2, &enc, &store).unwrap();
        let width = f.variance.width().data().iter().cloned().fold(0.0, f64::max);
        assert!(width <= err + 1e-12);
    }
}
