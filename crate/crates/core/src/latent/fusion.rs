use rand::Rng;

use super::encoders::{reparameterize, standard_normal, MessageEncoder};
use super::gaussian::{DiagonalGaussian, KlDirection};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};

/// Product of experts on the tape. `mean` and `var` hold `group` consecutive
/// expert rows per output row; `mask` (`[rows, 1]`, entries 0 or 1) drops
/// experts from the product.
pub fn poe_fuse_taped(g: &mut Graph, mean: Var, var: Var, group: usize, mask: Option<Var>) -> (Var, Var) {
    let mut prec = g.recip(var);
    if let Some(m) = mask {
        let cols = g.value(var).cols();
        let mb = g.broadcast_cols(m, cols);
        prec = g.mul(prec, mb);
    }
    let total = g.group_sum(prec, group);
    let fused_var = g.recip(total);
    let weighted = g.mul(mean, prec);
    let num = g.group_sum(weighted, group);
    (g.mul(num, fused_var), fused_var)
}

/// Per-row `KL(p ‖ q)` between diagonal Gaussians, shape `[rows, 1]`.
pub fn gaussian_kl_rows(g: &mut Graph, mean_p: Var, var_p: Var, mean_q: Var, var_q: Var) -> Var {
    let ratio = g.div(var_q, var_p);
    let log_ratio = g.ln(ratio);
    let diff = g.sub(mean_p, mean_q);
    let d2 = g.square(diff);
    let num = g.add(var_p, d2);
    let quad = g.div(num, var_q);
    let s = g.add(log_ratio, quad);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_cols(s);
    g.scale(s, 0.5)
}

/// Per-row message-alignment KL with the state posterior detached.
pub fn message_kl_rows(
    g: &mut Graph,
    state_mean: Var,
    state_var: Var,
    msg_mean: Var,
    msg_var: Var,
    direction: KlDirection,
) -> Var {
    let sm = g.detach(state_mean);
    let sv = g.detach(state_var);
    match direction {
        KlDirection::StateToMessage => gaussian_kl_rows(g, sm, sv, msg_mean, msg_var),
        KlDirection::MessageToState => gaussian_kl_rows(g, msg_mean, msg_var, sm, sv),
    }
}

/// Encode every message with the shared encoder and fuse the posteriors.
/// Returns a sample of the fused latent when `sample` is set, else its mean.
pub fn fuse_messages(
    messages: &[Tensor],
    enc: &MessageEncoder,
    store: &ParamStore,
    sample: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor, DiagonalGaussian)> {
    if messages.is_empty() {
        return contract_err("no messages to fuse");
    }
    let rows = messages[0].rows();
    for m in messages {
        if m.cols() != enc.in_dim() || m.rows() != rows {
            return shape_err(format!("message shape {:?}, encoder width {}", m.shape(), enc.in_dim()));
        }
    }
    // Interleave so every output row sees its `k` messages consecutively.
    let k = messages.len();
    let mut stacked = Vec::with_capacity(rows * k * enc.in_dim());
    for r in 0..rows {
        for m in messages {
            stacked.extend_from_slice(m.row_slice(r));
        }
    }
    let mut g = Graph::frozen(store);
    let mv = g.constant(Tensor::matrix(rows * k, enc.in_dim(), stacked)?);
    let (mean, var) = enc.encode(&mut g, mv)?;
    let (fm, fv) = poe_fuse_taped(&mut g, mean, var, k, None);
    let fused = DiagonalGaussian::new(g.value(fm).clone(), g.value(fv).clone())?;
    let z = if sample {
        let z = reparameterize(&mut g, fm, fv, standard_normal(rows, enc.z_dim(), rng));
        g.value(z).clone()
    } else {
        fused.mean().clone()
    };
    Ok((z, fused))
}
