use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::build::{check_domain, DEFAULT_NODE_LIMIT};
use super::{RankPath, TreeError, TreeMask};
use crate::scalar::Real;

/// Scaled logistic pruning schedule.
///
/// The defaults are estimates: they keep level 1 nearly whole and prune deep
/// levels hard.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule<F> {
    pub r_min: F,
    pub r_max: F,
    pub midpoint_level: F,
    pub steepness: F,
}

impl<F: Real> Default for PruneSchedule<F> {
    fn default() -> Self {
        PruneSchedule {
            r_min: F::lit(0.1),
            r_max: F::lit(0.95),
            midpoint_level: F::lit(2.5),
            steepness: F::lit(2.0),
        }
    }
}

impl<F: Real> PruneSchedule<F> {
    /// Constant rate at every level.
    pub fn constant(rate: F) -> Self {
        PruneSchedule {
            r_min: rate,
            r_max: rate,
            midpoint_level: F::zero(),
            steepness: F::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: &str| Err(TreeError::InvalidSchedule(m.to_string()));
        let fields = [self.r_min, self.r_max, self.midpoint_level, self.steepness];
        if fields.iter().any(|x| !x.is_finite()) {
            return bad("all parameters must be finite");
        }
        if !(F::zero() <= self.r_min && self.r_min <= self.r_max && self.r_max <= F::one()) {
            return bad("need 0 <= r_min <= r_max <= 1");
        }
        if self.steepness < F::zero() {
            return bad("steepness must be non-negative");
        }
        Ok(())
    }

    pub fn rate(&self, level: u32) -> F {
        prune_rate(level, self)
    }
}

/// `r_min + (r_max - r_min) / (1 + exp(-steepness * (level - midpoint)))`.
pub fn prune_rate<F: Real>(level: u32, schedule: &PruneSchedule<F>) -> F {
    let x = -schedule.steepness * (F::from_count(level as u64) - schedule.midpoint_level);
    schedule.r_min + (schedule.r_max - schedule.r_min) / (F::one() + x.exp())
}

/// Prunes a complete tree level by level.
///
/// Level `i` keeps `ceil((1 - r(i)) * arity^i)` nodes, taken among the
/// children of retained nodes in order of sibling rank, then position.
/// Level 1 always keeps all `arity` nodes. If a level keeps nothing the tree
/// ends at the level above.
pub fn prune_full_tree<F: Real>(
    arity: u32,
    levels: u32,
    schedule: &PruneSchedule<F>,
) -> Result<TreeMask, TreeError> {
    schedule.validate()?;
    check_domain(arity, levels, DEFAULT_NODE_LIMIT)?;
    let mut paths: Vec<RankPath> = vec![Vec::new()];
    let mut prev: Vec<RankPath> = vec![Vec::new()];
    let mut ideal: u64 = 1;
    for level in 1..=levels {
        ideal *= arity as u64;
        let keep = if level == 1 {
            ideal
        } else {
            let frac = (F::one() - schedule.rate(level)).max(F::zero());
            let x = (frac * F::from_count(ideal)).as_f64();
            // absorb float noise so that e.g. 0.5 * 10 stays 5
            let x = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
            x as u64
        };
        let mut candidates: Vec<(u32, usize, RankPath)> = Vec::new();
        for (pos, parent) in prev.iter().enumerate() {
            for r in 0..arity {
                let mut p = parent.clone();
                p.push(r);
                candidates.push((r, pos, p));
            }
        }
        candidates.sort_unstable_by_key(|c| (c.0, c.1));
        candidates.truncate(keep as usize);
        if candidates.is_empty() {
            break;
        }
        let mut cur: Vec<RankPath> = candidates.into_iter().map(|c| c.2).collect();
        cur.sort();
        paths.extend(cur.iter().cloned());
        prev = cur;
    }
    TreeMask::from_ordered_paths(arity, paths)
}

#[derive(PartialEq, Eq)]
struct RemovalKey {
    rank_sum: u64,
    first_rank: Reverse<u32>,
    path: RankPath,
}

impl Ord for RemovalKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.rank_sum, self.first_rank, &self.path).cmp(&(other.rank_sum, other.first_rank, &other.path))
    }
}

impl PartialOrd for RemovalKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Smallest target [`prune_in_place`] accepts: one node per level plus root.
pub fn prune_floor(mask: &TreeMask) -> usize {
    mask.levels() as usize + 1
}

/// Removes leaves one at a time until exactly `target_nodes` remain.
///
/// The leaf removed next is the least likely one: largest sum of sibling
/// ranks along its path, then the one under the smaller level-1 rank, then
/// the rightmost. The most likely deepest path is never removed, so the
/// result keeps every level. When the target can hold that path plus the
/// whole first level, level-1 nodes are kept while any other leaf remains.
pub fn prune_in_place(mask: &TreeMask, target_nodes: usize) -> Result<TreeMask, TreeError> {
    let size = mask.node_count();
    let floor = prune_floor(mask).min(size);
    if target_nodes < floor || target_nodes > size {
        return Err(TreeError::TargetOutOfRange {
            target: target_nodes,
            floor,
            size,
        });
    }
    let first_level = mask.nodes().iter().filter(|n| n.level == 1).count();
    let protect = target_nodes >= first_level + mask.levels() as usize;

    let key = |id: usize| {
        let p = mask.path(id);
        RemovalKey {
            rank_sum: p.iter().map(|&r| r as u64).sum(),
            first_rank: Reverse(p[0]),
            path: p.to_vec(),
        }
    };
    let deepest = mask.levels();
    let tip = (1..size)
        .filter(|&id| mask.nodes()[id].level == deepest)
        .min_by_key(|&id| key(id))
        .unwrap_or(0);
    let mut spine = vec![false; size];
    let mut at = Some(tip);
    while let Some(id) = at {
        spine[id] = true;
        at = mask.nodes()[id].parent;
    }
    let mut alive = vec![true; size];
    let mut live_children: Vec<usize> = (0..size).map(|i| mask.children(i).len()).collect();
    let mut open: BinaryHeap<(RemovalKey, usize)> = BinaryHeap::new();
    let mut held: BinaryHeap<(RemovalKey, usize)> = BinaryHeap::new();
    for id in 1..size {
        if live_children[id] == 0 && !spine[id] {
            if protect && mask.nodes()[id].level == 1 {
                held.push((key(id), id));
            } else {
                open.push((key(id), id));
            }
        }
    }
    let mut count = size;
    while count > target_nodes {
        let (_, id) = open
            .pop()
            .or_else(|| held.pop())
            .expect("a non-root leaf exists while more than one node remains");
        alive[id] = false;
        count -= 1;
        let parent = mask.nodes()[id].parent.expect("root is never queued");
        live_children[parent] -= 1;
        if !spine[parent] && live_children[parent] == 0 {
            if protect && mask.nodes()[parent].level == 1 {
                held.push((key(parent), parent));
            } else {
                open.push((key(parent), parent));
            }
        }
    }
    let kept = (0..size).filter(|&i| alive[i]).map(|i| mask.path(i).to_vec()).collect();
    TreeMask::from_ordered_paths(mask.arity(), kept)
}

#[cfg(test)]
mod tests {
    use super::super::full_tree;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rate_closed_form() {
        let s = PruneSchedule::<f64>::default();
        assert_abs_diff_eq!(prune_rate(1, &s), 0.14, epsilon = 0.005);
        assert_abs_diff_eq!(
            prune_rate(0, &PruneSchedule { midpoint_level: 0.0, ..s }),
            (0.1 + 0.95) / 2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(prune_rate(200, &s), 0.95, epsilon = 1e-12);
        for l in 1..10 {
            assert!(prune_rate(l + 1, &s) >= prune_rate(l, &s));
        }
        let s32 = PruneSchedule::<f32>::default();
        assert!((prune_rate(1, &s32) - 0.14).abs() < 0.005);
    }

    #[test]
    fn schedule_validation() {
        let s = PruneSchedule::<f64> { r_min: 0.5, r_max: 0.2, ..Default::default() };
        assert!(s.validate().is_err());
        assert!(PruneSchedule::<f64>::constant(1.2).validate().is_err());
        assert!(PruneSchedule::<f64>::constant(f64::NAN).validate().is_err());
    }

    #[test]
    fn zero_schedule_is_identity() {
        let t = prune_full_tree(5, 3, &PruneSchedule::constant(0.0)).unwrap();
        assert_eq!(t, full_tree(5, 3).unwrap());
    }

    #[test]
    fn maximal_schedule_keeps_first_level() {
        let t = prune_full_tree(10, 4, &PruneSchedule::constant(1.0)).unwrap();
        assert_eq!((t.node_count(), t.leaf_count()), (11, 10));
    }

    #[test]
    fn default_schedule_fractions_decrease() {
        let t = prune_full_tree(10, 4, &PruneSchedule::<f64>::default()).unwrap();
        t.validate().unwrap();
        let counts = t.level_counts();
        assert_eq!(counts, vec![1, 10, 68, 279, 904]);
        let fracs: Vec<f64> = counts.iter().enumerate().map(|(i, &c)| c as f64 / 10f64.powi(i as i32)).collect();
        for w in fracs[1..].windows(2) {
            assert!(w[1] < w[0], "{fracs:?}");
        }
    }

    #[test]
    fn medusa_prune_targets() {
        let m = TreeMask::medusa_vicuna_7b();
        for (target, leaves) in [(5, 1), (16, 10), (27, 18), (31, 20)] {
            let p = prune_in_place(&m, target).unwrap();
            p.validate().unwrap();
            assert_eq!((p.node_count(), p.leaf_count()), (target, leaves));
            assert!(p.is_left_prefix());
        }
        assert_eq!(prune_in_place(&m, 5).unwrap().candidate_paths(), vec![vec![0, 0, 0, 0]]);
        assert_eq!(prune_in_place(&m, 64).unwrap(), m);
        assert!(matches!(prune_in_place(&m, 4), Err(TreeError::TargetOutOfRange { .. })));
        assert!(matches!(prune_in_place(&m, 65), Err(TreeError::TargetOutOfRange { .. })));
    }

    #[test]
    fn protected_first_level() {
        let m = TreeMask::medusa_vicuna_7b();
        for target in 14..=64 {
            let p = prune_in_place(&m, target).unwrap();
            assert_eq!(p.level_counts()[1], 10, "target {target}");
        }
        for target in 5..14 {
            assert_eq!(prune_in_place(&m, target).unwrap().levels(), 4, "target {target}");
        }
    }
}
