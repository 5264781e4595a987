use rand::seq::index;
use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{contract_err, shape_err, Result};

/// Ablation size `k` of the message ensemble: each base action sees `k` of
/// the `N − 1` incoming messages plus the receiver's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmePolicy {
    pub k: usize,
    pub n_agents: usize,
}

impl AmePolicy {
    pub fn new(k: usize, n_agents: usize) -> Result<Self> {
        if k == 0 || k + 1 > n_agents {
            return contract_err(format!("ablation size {k} must lie in 1..={}", n_agents.saturating_sub(1)));
        }
        Ok(Self { k, n_agents })
    }

    /// The largest `k` with `k ≤ (N − 1) / 2`, at least 1.
    pub fn half(n_agents: usize) -> Result<Self> {
        Self::new(((n_agents - 1) / 2).max(1), n_agents)
    }

    pub fn subsets(&self) -> Vec<Vec<usize>> {
        ame_subsets(self.n_agents - 1, self.k)
    }
}

/// A uniformly random `k`-subset of `0..available`, sorted.
pub fn ame_subset_sample(available: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > available {
        return contract_err(format!("cannot pick {k} of {available} messages"));
    }
    let mut s = index::sample(rng, available, k).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn ame_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// Plurality vote; ties go to the lowest action index.
pub fn ame_vote(actions: &[usize]) -> Result<usize> {
    let Some(&top) = actions.iter().max() else {
        return contract_err("vote over no base actions");
    };
    let mut counts = vec![0usize; top + 1];
    for &a in actions {
        counts[a] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(counts.iter().position(|&c| c == best).expect("nonempty"))
}

/// Expert mask `[N·N, 1]` for one episode: receiver `i` keeps its own
/// message and the incoming ones listed (as positions among its `N − 1`
/// senders, in agent order) in `subsets[i]`.
pub fn ame_subset_masks(n_agents: usize, subsets: &[Vec<usize>]) -> Result<Tensor> {
    if subsets.len() != n_agents {
        return shape_err("one subset per receiver required");
    }
    let mut m = vec![0.0; n_agents * n_agents];
    for (i, sub) in subsets.iter().enumerate() {
        m[i * n_agents + i] = 1.0;
        for &p in sub {
            if p + 1 >= n_agents {
                return contract_err("subset position out of range");
            }
            let j = if p < i { p } else { p + 1 };
            m[i * n_agents + j] = 1.0;
        }
    }
    Tensor::matrix(n_agents * n_agents, 1, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vote_examples() {
        assert_eq!(ame_vote(&[2, 2, 1]).unwrap(), 2);
        assert_eq!(ame_vote(&[0, 1]).unwrap(), 0);
        assert_eq!(ame_vote(&[1, 0]).unwrap(), 0);
        assert_eq!(ame_vote(&[3; 6]).unwrap(), 3);
        assert!(ame_vote(&[]).is_err());
    }

    #[test]
    fn subset_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ame_subset_sample(4, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert!(ame_subset_sample(2, 3, &mut rng).is_err());
        let a = ame_subset_sample(6, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, ame_subset_sample(6, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
        assert_eq!(ame_subsets(4, 2).len(), 6);
        assert_eq!(ame_subsets(3, 1), vec![vec![0], vec![1], vec![2]]);
        assert!(AmePolicy::new(0, 3).is_err() && AmePolicy::new(3, 3).is_err());
        assert_eq!(AmePolicy::half(3).unwrap().k, 1);
        assert_eq!(AmePolicy::half(5).unwrap().k, 2);
    }

    #[test]
    fn singletons_are_uniform() {
        // χ² with 4 degrees of freedom; 18.47 is the 0.001 critical value.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[ame_subset_sample(5, 1, &mut rng).unwrap()[0]] += 1;
        }
        let e = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 18.47, "{chi2} {counts:?}");
    }

    #[test]
    fn ensemble_matches_exhaustive_plurality() {
        // Base policy: action = parity of the summed sender ids.
        for n in 2..=5 {
            for k in 1..n {
                let p = AmePolicy::new(k, n).unwrap();
                let base: Vec<usize> = p.subsets().iter().map(|s| s.iter().sum::<usize>() % 2).collect();
                let ones = base.iter().filter(|&&a| a == 1).count();
                let want = if 2 * ones > base.len() { 1 } else { 0 };
                assert_eq!(ame_vote(&base).unwrap(), want);
            }
        }
    }

    #[test]
    fn masks_keep_own_and_chosen() {
        let m = ame_subset_masks(3, &[vec![1], vec![0], vec![0]]).unwrap();
        // Receiver 0 keeps {0, 2}; receiver 1 keeps {1, 0}; receiver 2 keeps {2, 0}.
        assert_eq!(m.data(), &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(ame_subset_masks(3, &[vec![2], vec![0], vec![0]]).is_err());
    }
}
