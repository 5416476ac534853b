use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::scalar::Real;
use crate::tree::{RankPath, TreeMask};

/// Largest mask [`expected_tau_exhaustive`] enumerates.
pub const EXHAUSTIVE_NODE_LIMIT: usize = 20;

/// Per-node acceptance probabilities: a node at level `j` with sibling rank
/// `r` is accepted with probability `α_j · ρ^r`, independently of every
/// other node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "")]
pub struct AcceptanceModel<F: Real> {
    pub per_level_accept: Vec<F>,
    pub branch_rank_decay: F,
    #[serde(default = "yes")]
    pub independent: bool,
}

fn yes() -> bool {
    true
}

impl<F: Real> Default for AcceptanceModel<F> {
    fn default() -> Self {
        AcceptanceModel {
            per_level_accept: [0.75, 0.6, 0.5, 0.4].iter().map(|&a| F::lit(a)).collect(),
            branch_rank_decay: F::lit(0.6),
            independent: true,
        }
    }
}

impl<F: Real> AcceptanceModel<F> {
    pub fn new(per_level_accept: Vec<F>, branch_rank_decay: F) -> Result<Self, SimError> {
        let m = AcceptanceModel {
            per_level_accept,
            branch_rank_decay,
            independent: true,
        };
        m.validate()?;
        Ok(m)
    }

    /// Same `α` at every one of `levels` levels.
    pub fn uniform(levels: usize, alpha: F, branch_rank_decay: F) -> Result<Self, SimError> {
        Self::new(vec![alpha; levels], branch_rank_decay)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidAcceptance(m));
        if self.per_level_accept.is_empty() {
            return bad("at least one level is required".into());
        }
        for (j, &a) in self.per_level_accept.iter().enumerate() {
            if !(a >= F::zero() && a <= F::one()) {
                return bad(format!("alpha at level {} is {a}, outside [0, 1]", j + 1));
            }
        }
        let rho = self.branch_rank_decay;
        if !(rho > F::zero() && rho <= F::one()) {
            return bad(format!("rank decay {rho} is outside (0, 1]"));
        }
        if !self.independent {
            return bad("only independent node acceptance is modelled".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.per_level_accept.len()
    }

    /// The model cut or extended to `levels` levels; extension repeats the
    /// deepest level's `α`.
    pub fn for_levels(&self, levels: usize) -> Self {
        let mut per_level_accept = self.per_level_accept.clone();
        let last = per_level_accept.last().copied().unwrap_or_else(F::zero);
        per_level_accept.resize(levels.max(1), last);
        AcceptanceModel {
            per_level_accept,
            ..self.clone()
        }
    }

    /// `α_level · ρ^rank`; the root (level 0) is always accepted.
    pub fn node_probability(&self, level: u32, rank: u32) -> F {
        if level == 0 {
            return F::one();
        }
        self.per_level_accept[level as usize - 1] * self.branch_rank_decay.powi(rank as i32)
    }

    /// Acceptance probability of every node of `mask`, in node order.
    pub fn probabilities(&self, mask: &TreeMask) -> Result<Vec<F>, SimError> {
        self.validate()?;
        if self.levels() != mask.levels() as usize {
            return Err(SimError::LevelMismatch {
                model: self.levels(),
                mask: mask.levels() as usize,
            });
        }
        Ok(mask
            .nodes()
            .iter()
            .map(|n| self.node_probability(n.level, n.rank))
            .collect())
    }
}

/// Result of verifying one tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub chosen_path: RankPath,
    pub chosen_node: usize,
    pub accepted_speculative: u32,
    pub tau: u32,
}

/// Picks the deepest node whose whole root path is accepted, leftmost among
/// equals. `accepted[0]` (the root) is ignored.
pub fn resolve_step(mask: &TreeMask, accepted: &[bool]) -> StepOutcome {
    assert_eq!(accepted.len(), mask.node_count(), "one decision per node");
    let mut full = vec![false; mask.node_count()];
    full[0] = true;
    let mut best = 0usize;
    for node in &mask.nodes()[1..] {
        let parent = node.parent.expect("non-root node");
        full[node.id] = full[parent] && accepted[node.id];
        // node order is level-major, left to right, so the first hit at a
        // deeper level is the leftmost one there
        if full[node.id] && node.level > mask.nodes()[best].level {
            best = node.id;
        }
    }
    let depth = mask.nodes()[best].level;
    StepOutcome {
        chosen_path: mask.path(best).to_vec(),
        chosen_node: best,
        accepted_speculative: depth,
        tau: depth + 1,
    }
}

pub(crate) fn draw_step<F: Real, R: Rng>(mask: &TreeMask, probs: &[F], rng: &mut R) -> StepOutcome {
    let accepted: Vec<bool> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u: f64 = rng.gen();
            i == 0 || F::lit(u) < p
        })
        .collect();
    resolve_step(mask, &accepted)
}

/// One verification step with independent draws for every non-root node.
pub fn step_accept<F: Real>(mask: &TreeMask, acc: &AcceptanceModel<F>, seed: u64) -> Result<StepOutcome, SimError> {
    let probs = acc.probabilities(mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw_step(mask, &probs, &mut rng))
}

/// `E[τ]` by enumerating all `2^(N−1)` accept/reject assignments.
pub fn expected_tau_exhaustive<F: Real>(mask: &TreeMask, acc: &AcceptanceModel<F>) -> Result<F, SimError> {
    let n = mask.node_count();
    if n > EXHAUSTIVE_NODE_LIMIT {
        return Err(SimError::TooLarge {
            nodes: n,
            limit: EXHAUSTIVE_NODE_LIMIT,
        });
    }
    let probs = acc.probabilities(mask)?;
    let mut accepted = vec![true; n];
    let mut total = F::zero();
    for bits in 0u32..(1u32 << (n - 1)) {
        let mut weight = F::one();
        for i in 1..n {
            let on = bits >> (i - 1) & 1 == 1;
            accepted[i] = on;
            weight = weight * if on { probs[i] } else { F::one() - probs[i] };
        }
        if weight > F::zero() {
            total = total + weight * F::from_count(resolve_step(mask, &accepted).tau as u64);
        }
    }
    Ok(total)
}

/// `E[τ]` in `O(N · l)`.
///
/// With `q_v(d)` the probability that some fully accepted path below an
/// accepted node `v` reaches level `d`, `q_v(d) = 1 − Π_c (1 − a_c q_c(d))`
/// and `E[τ] = 1 + Σ_d q_root(d)`.
pub fn expected_tau<F: Real>(mask: &TreeMask, acc: &AcceptanceModel<F>) -> Result<F, SimError> {
    let probs = acc.probabilities(mask)?;
    let nodes = mask.nodes();
    let mut sum = F::one();
    let mut q = vec![F::zero(); nodes.len()];
    for d in 1..=mask.levels() {
        for id in (0..nodes.len()).rev() {
            let level = nodes[id].level;
            q[id] = if level > d {
                F::zero()
            } else if level == d {
                F::one()
            } else {
                let miss = mask
                    .children(id)
                    .iter()
                    .fold(F::one(), |m, &c| m * (F::one() - probs[c] * q[c]));
                F::one() - miss
            };
        }
        sum = sum + q[0];
    }
    Ok(sum)
}

/// Sample mean of `τ` and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate<F> {
    pub mean: F,
    pub std_error: F,
    pub steps: u64,
}

/// Monte Carlo estimate of `E[τ]` over `steps` independent steps.
pub fn monte_carlo_tau<F: Real>(
    mask: &TreeMask,
    acc: &AcceptanceModel<F>,
    steps: u64,
    seed: u64,
) -> Result<TauEstimate<F>, SimError> {
    if steps < 2 {
        return Err(SimError::Precondition("at least two steps are needed for an error estimate".into()));
    }
    let probs = acc.probabilities(mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s1, mut s2) = (0f64, 0f64);
    for _ in 0..steps {
        let t = draw_step(mask, &probs, &mut rng).tau as f64;
        s1 += t;
        s2 += t * t;
    }
    let n = steps as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(TauEstimate {
        mean: F::lit(mean),
        std_error: F::lit((var / n).sqrt()),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::full_tree;
    use approx::assert_abs_diff_eq;

    fn chain(l: usize) -> TreeMask {
        TreeMask::from_paths(1, (1..=l).map(|d| vec![0; d])).unwrap()
    }

    #[test]
    fn certain_and_impossible_acceptance() {
        let m = TreeMask::medusa_vicuna_7b();
        let all = AcceptanceModel::<f64>::uniform(4, 1.0, 1.0).unwrap();
        let out = step_accept(&m, &all, 1).unwrap();
        assert_eq!(out.tau, 5);
        assert_eq!(out.chosen_path, vec![0, 0, 0, 0]);
        let none = AcceptanceModel::<f64>::uniform(4, 0.0, 1.0).unwrap();
        let out = step_accept(&m, &none, 1).unwrap();
        assert_eq!((out.tau, out.chosen_node), (1, 0));
    }

    #[test]
    fn chain_of_two_at_half() {
        let acc = AcceptanceModel::<f64>::uniform(2, 0.5, 1.0).unwrap();
        assert_eq!(expected_tau_exhaustive(&chain(2), &acc).unwrap(), 1.75);
        assert_eq!(expected_tau(&chain(2), &acc).unwrap(), 1.75);
    }

    #[test]
    fn small_full_tree_regression() {
        // 1 + P(some level-1 node) + P(some accepted pair): 1 + 3/4 + 1 - (1 - 3/8)^2
        let acc = AcceptanceModel::<f64>::uniform(2, 0.5, 1.0).unwrap();
        let t = full_tree(2, 2).unwrap();
        let exact = expected_tau_exhaustive(&t, &acc).unwrap();
        assert_eq!(exact, 2.359375);
        assert_abs_diff_eq!(expected_tau(&t, &acc).unwrap(), exact, epsilon = 1e-12);
    }

    #[test]
    fn all_accept_gives_depth_plus_one() {
        let t = full_tree(2, 3).unwrap();
        let sure = AcceptanceModel::<f64>::uniform(3, 1.0, 1.0).unwrap();
        assert_eq!(expected_tau_exhaustive(&t, &sure).unwrap(), 4.0);
        // the rank-0 chain alone is certain even with rank decay
        let decayed = AcceptanceModel::<f64>::uniform(3, 1.0, 0.5).unwrap();
        assert_eq!(expected_tau_exhaustive(&t, &decayed).unwrap(), 4.0);
    }

    #[test]
    fn leftmost_tie_break() {
        let t = full_tree(3, 2).unwrap();
        let mut accepted = vec![false; t.node_count()];
        for p in [[1u32].as_slice(), &[2], &[1, 2], &[2, 0]] {
            accepted[t.find(p).unwrap()] = true;
        }
        let out = resolve_step(&t, &accepted);
        assert_eq!(out.chosen_path, vec![1, 2]);
        assert_eq!(out.tau, 3);
        // an accepted child under a rejected parent does not count
        let mut accepted = vec![false; t.node_count()];
        accepted[t.find(&[0, 0]).unwrap()] = true;
        accepted[t.find(&[2]).unwrap()] = true;
        assert_eq!(resolve_step(&t, &accepted).chosen_path, vec![2]);
    }

    #[test]
    fn dp_matches_exhaustive_and_f32_works() {
        let m = TreeMask::from_label(3, "1-3-4-2").unwrap();
        let acc = AcceptanceModel::<f64>::new(vec![0.7, 0.4, 0.9], 0.8).unwrap();
        let a = expected_tau_exhaustive(&m, &acc).unwrap();
        let b = expected_tau(&m, &acc).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        let acc32 = AcceptanceModel::<f32>::new(vec![0.7, 0.4, 0.9], 0.8).unwrap();
        assert!((expected_tau(&m, &acc32).unwrap() as f64 - b).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_models() {
        assert!(AcceptanceModel::<f64>::new(vec![1.2], 0.5).is_err());
        assert!(AcceptanceModel::<f64>::new(vec![0.5], 0.0).is_err());
        assert!(AcceptanceModel::<f64>::new(vec![], 0.5).is_err());
        let acc = AcceptanceModel::<f64>::uniform(3, 0.5, 1.0).unwrap();
        assert!(matches!(expected_tau(&chain(2), &acc), Err(SimError::LevelMismatch { .. })));
        let big = full_tree(5, 2).unwrap();
        let acc2 = AcceptanceModel::<f64>::uniform(2, 0.5, 1.0).unwrap();
        assert!(matches!(expected_tau_exhaustive(&big, &acc2), Err(SimError::TooLarge { .. })));
    }
}
