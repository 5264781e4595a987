use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{contract_err, shape_err, Error, Result};

/// Weights of the combined objective and the step after which the
/// adversarial term is switched on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub t_r: u64,
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64, t_r: u64) -> Result<Self> {
        for (name, a) in [("alpha1", alpha1), ("alpha2", alpha2), ("alpha3", alpha3)] {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {a}")));
            }
        }
        Ok(Self { alpha1, alpha2, alpha3, t_r })
    }

    /// Whether the adversarial term contributes at env step `t`.
    pub fn adversarial_active(&self, t: u64) -> bool {
        t > self.t_r && self.alpha3 > 0.0
    }
}

/// `L_TD + α₁·L(ψ) + α₂·L(φ) + 1[t > T_r]·α₃·L_adv` for plain numbers.
pub fn total_loss_value(ltd: f64, lpsi: f64, lphi: f64, ladv: f64, w: &LossWeights, t: u64) -> f64 {
    let mut total = ltd + w.alpha1 * lpsi + w.alpha2 * lphi;
    if t > w.t_r {
        total += w.alpha3 * ladv;
    }
    total
}

/// Taped combined objective. When the gate is closed `ladv` is not
/// attached at all, so it cannot contribute gradient.
pub fn total_loss(g: &mut Graph, ltd: Var, lpsi: Var, lphi: Var, ladv: Option<Var>, w: &LossWeights, t: u64) -> Var {
    let a = g.scale(lpsi, w.alpha1);
    let b = g.scale(lphi, w.alpha2);
    let mut total = g.add(ltd, a);
    total = g.add(total, b);
    if let (Some(adv), true) = (ladv, t > w.t_r) {
        let c = g.scale(adv, w.alpha3);
        total = g.add(total, c);
    }
    total
}

/// `r + γ·(1 − terminated)·next`, all `[B, 1]`.
pub fn td_target(reward: &Tensor, terminated: &Tensor, next: &Tensor, gamma: f64) -> Result<Tensor> {
    let cont = terminated.zip_map(next, |d, n| (1.0 - d) * n)?;
    reward.zip_map(&cont, |r, c| r + gamma * c)
}

/// `Σ_t Σ_b mask·row / Σ mask` over per-step `[B, 1]` rows.
pub fn masked_mean(g: &mut Graph, rows: &[Var], masks: &[Tensor]) -> Result<Var> {
    if rows.len() != masks.len() {
        return shape_err(format!("{} steps of values vs {} masks", rows.len(), masks.len()));
    }
    let count: f64 = masks.iter().map(Tensor::sum).sum();
    if rows.is_empty() || count == 0.0 {
        return contract_err("no valid timesteps in batch");
    }
    let mut acc: Option<Var> = None;
    for (r, m) in rows.iter().zip(masks) {
        let mv = g.constant(m.clone());
        let prod = g.mul(*r, mv);
        let s = g.sum_all(prod);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    Ok(g.scale(acc.expect("nonempty"), 1.0 / count))
}

/// Masked mean squared TD error between `q_tot` and fixed `targets`.
pub fn td_loss_from(g: &mut Graph, q_tot: &[Var], targets: &[Tensor], masks: &[Tensor]) -> Result<Var> {
    if q_tot.len() != targets.len() {
        return shape_err("one target per step required");
    }
    let mut sq = Vec::with_capacity(q_tot.len());
    for (q, y) in q_tot.iter().zip(targets) {
        let yv = g.constant(y.clone());
        let d = g.sub(*q, yv);
        sq.push(g.square(d));
    }
    masked_mean(g, &sq, masks)
}

/// Per-row overlap penalty
/// `Σ_y relu(Q(a) − Q(y)) · relu(Q̄(y) − Q̲(a))`, shape `[R, 1]`.
pub fn adv_rows(g: &mut Graph, q: Var, lower: Var, upper: Var, actions: &[usize]) -> Var {
    let n_actions = g.value(q).cols();
    let qa = g.gather_cols(q, actions);
    let qa = g.broadcast_cols(qa, n_actions);
    let diff = g.sub(qa, q);
    let diff = g.relu(diff);
    let la = g.gather_cols(lower, actions);
    let la = g.broadcast_cols(la, n_actions);
    let ovl = g.sub(upper, la);
    let ovl = g.relu(ovl);
    let prod = g.mul(diff, ovl);
    g.sum_cols(prod)
}

/// Plain evaluation of the overlap penalty for one agent.
pub fn adv_loss_value(q: &[f64], action: usize, lower: &[f64], upper: &[f64]) -> Result<f64> {
    if q.len() != lower.len() || q.len() != upper.len() || action >= q.len() {
        return shape_err("value and bound widths differ or action out of range");
    }
    Ok((0..q.len())
        .map(|y| (q[action] - q[y]).max(0.0) * (upper[y] - lower[action]).max(0.0))
        .sum())
}

/// Hard copy of every online parameter into the target store.
pub fn target_update(online: &ParamStore, target: &mut ParamStore) -> Result<()> {
    let ids: Vec<_> = online.ids().collect();
    target.copy_from(online, &ids)
}
