use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::{RankPath, TreeError, TreeMask};

/// Default node limit for [`full_tree`].
pub const DEFAULT_NODE_LIMIT: u64 = 1_000_000;

/// Largest tree [`build_custom_tree`] will search for.
pub const CUSTOM_TREE_LIMIT: u64 = 2_048;

/// Complete `arity`-ary tree of the given depth, capped at [`DEFAULT_NODE_LIMIT`].
pub fn full_tree(arity: u32, levels: u32) -> Result<TreeMask, TreeError> {
    full_tree_capped(arity, levels, DEFAULT_NODE_LIMIT)
}

pub(crate) fn full_tree_size(arity: u32, levels: u32) -> u128 {
    let mut total: u128 = 0;
    let mut width: u128 = 1;
    for _ in 0..=levels {
        total = total.saturating_add(width);
        width = width.saturating_mul(arity as u128);
    }
    total
}

pub(crate) fn check_domain(arity: u32, levels: u32, limit: u64) -> Result<(), TreeError> {
    if arity == 0 {
        return Err(TreeError::InvalidArity);
    }
    if levels == 0 {
        return Err(TreeError::InvalidLevels);
    }
    if !(arity == 5 || arity == 10) || levels > 5 {
        log::warn!("arity {arity} with {levels} levels is outside the usual k in {{5, 10}}, l in 1..=5");
    }
    let nodes = full_tree_size(arity, levels);
    if nodes > limit as u128 {
        return Err(TreeError::TooLarge { nodes, limit });
    }
    Ok(())
}

/// Complete tree with an explicit node limit.
pub fn full_tree_capped(arity: u32, levels: u32, limit: u64) -> Result<TreeMask, TreeError> {
    check_domain(arity, levels, limit)?;
    let mut paths: Vec<RankPath> = vec![Vec::new()];
    let mut start = 0;
    for _ in 0..levels {
        let end = paths.len();
        for i in start..end {
            for r in 0..arity {
                let mut p = paths[i].clone();
                p.push(r);
                paths.push(p);
            }
        }
        start = end;
    }
    TreeMask::from_ordered_paths(arity, paths)
}

/// Inclusive range of achievable internal-node totals. Exhaustive checks
/// (see the tests) show the achievable set is always contiguous.
type Span = Option<(usize, usize)>;

fn widen(acc: Span, lo: usize, hi: usize) -> Span {
    match acc {
        None => Some((lo, hi)),
        Some((a, b)) => Some((a.min(lo), b.max(hi))),
    }
}

struct Search {
    arity: usize,
    levels: usize,
    memo: HashMap<(usize, usize, usize), Span>,
}

impl Search {
    fn new(arity: usize, levels: usize) -> Self {
        Search {
            arity,
            levels,
            memo: HashMap::new(),
        }
    }

    /// Internal-node counts achievable on levels `level..levels` when `level`
    /// has `width` nodes and `rest` nodes remain for the levels below it.
    fn reach(&mut self, level: usize, width: usize, rest: usize) -> Span {
        if let Some(&r) = self.memo.get(&(level, width, rest)) {
            return r;
        }
        let mut out = None;
        if level == self.levels {
            if rest == 0 {
                out = Some((0, 0));
            }
        } else {
            let below = self.levels - level - 1;
            let max_next = (self.arity * width).min(rest.saturating_sub(below));
            for next in 1..=max_next {
                if let Some((a, b)) = self.reach(level + 1, next, rest - next) {
                    out = widen(out, a + next.div_ceil(self.arity), b + width.min(next));
                }
            }
        }
        self.memo.insert((level, width, rest), out);
        out
    }

    fn contains(&mut self, level: usize, width: usize, rest: usize, internal: usize) -> bool {
        self.reach(level, width, rest)
            .is_some_and(|(a, b)| a <= internal && internal <= b)
    }
}

/// Leaf counts `S` for which [`build_custom_tree`] succeeds with `total_nodes`
/// nodes, as an inclusive range. `None` when no tree of that size exists.
pub fn feasible_leaf_range(total_nodes: u64, arity: u32, levels: u32) -> Option<(u64, u64)> {
    if arity == 0 || levels == 0 || total_nodes < levels as u64 + 1 || total_nodes > CUSTOM_TREE_LIMIT {
        return None;
    }
    let n = total_nodes as usize;
    let (lo, hi) = Search::new(arity as usize, levels as usize).reach(0, 1, n - 1)?;
    Some(((n - hi) as u64, (n - lo) as u64))
}

/// Deterministic left-heavy tree with exactly `total_nodes` nodes (root
/// included) and `total_leaves` leaves over `levels` levels.
///
/// Levels are filled top-down. Each level takes as many nodes as the
/// remaining budget allows, and the fewest parents from the level above;
/// parents are the leftmost nodes, each filled to the arity from rank 0.
pub fn build_custom_tree(
    total_nodes: u64,
    total_leaves: u64,
    arity: u32,
    levels: u32,
) -> Result<TreeMask, TreeError> {
    if arity == 0 {
        return Err(TreeError::InvalidArity);
    }
    if levels == 0 {
        return Err(TreeError::InvalidLevels);
    }
    let (n, s, k, l) = (total_nodes as u128, total_leaves as u128, arity as u128, levels as u128);
    let infeasible = |why: String| Err(TreeError::Infeasible(why));
    if n < l + 1 {
        return infeasible(format!("total_nodes ({n}) must be at least levels + 1 ({})", l + 1));
    }
    if s == 0 {
        return infeasible("total_leaves must be at least 1".into());
    }
    if s > n - l {
        return infeasible(format!("total_leaves ({s}) must not exceed total_nodes - levels ({})", n - l));
    }
    let full = full_tree_size(arity, levels);
    if n > full {
        return infeasible(format!("total_nodes ({n}) exceeds the full tree size ({full})"));
    }
    let max_leaves = (arity as u128).checked_pow(levels).unwrap_or(u128::MAX);
    if s > max_leaves {
        return infeasible(format!("total_leaves ({s}) must not exceed arity^levels ({max_leaves})"));
    }
    if n - 1 > k * (n - s) {
        return infeasible(format!(
            "{} internal nodes cannot host {} children with arity {k}",
            n - s,
            n - 1
        ));
    }
    if total_nodes > CUSTOM_TREE_LIMIT {
        return Err(TreeError::TooLarge {
            nodes: n,
            limit: CUSTOM_TREE_LIMIT,
        });
    }

    let (n, s, k, l) = (n as usize, s as usize, k as usize, l as usize);
    let mut search = Search::new(k, l);
    if !search.contains(0, 1, n - 1, n - s) {
        return infeasible(format!(
            "no level profile with {l} non-empty levels gives {n} nodes and {s} leaves under arity {k}"
        ));
    }
    Ok(walk(&mut search, n, s))
}

/// Lays out the tree once `search` is known to contain `(n, s)`: per level,
/// the widest next level first, then the fewest parents.
fn walk(search: &mut Search, n: usize, s: usize) -> TreeMask {
    let (k, l) = (search.arity, search.levels);
    let mut widths = Vec::with_capacity(l);
    let mut parents = Vec::with_capacity(l);
    let (mut width, mut rest, mut internal_left) = (1usize, n - 1, n - s);
    for level in 0..l {
        let below = l - level - 1;
        let max_next = (k * width).min(rest - below);
        let mut chosen = None;
        'next: for next in (1..=max_next).rev() {
            for internal in next.div_ceil(k)..=width.min(next) {
                if internal <= internal_left && search.contains(level + 1, next, rest - next, internal_left - internal) {
                    chosen = Some((next, internal));
                    break 'next;
                }
            }
        }
        let (next, internal) = chosen.expect("reachability checked by the caller");
        widths.push(next);
        parents.push(internal);
        width = next;
        rest -= next;
        internal_left -= internal;
    }

    let mut paths: Vec<RankPath> = vec![Vec::new()];
    let mut prev: Vec<RankPath> = vec![Vec::new()];
    for (&next, &internal) in widths.iter().zip(&parents) {
        let mut extra = next - internal;
        let mut cur = Vec::with_capacity(next);
        for parent in prev.iter().take(internal) {
            let count = 1 + extra.min(k - 1);
            extra -= count - 1;
            for r in 0..count {
                let mut p = parent.clone();
                p.push(r as u32);
                cur.push(p);
            }
        }
        paths.extend(cur.iter().cloned());
        prev = cur;
    }
    TreeMask::from_ordered_paths(k as u32, paths).expect("walk yields a prefix-closed tree")
}

/// Every tree [`build_custom_tree`] can produce with `total_nodes` nodes,
/// ordered by leaf count. Results are cached for the life of the process.
pub fn custom_tree_family(total_nodes: u64, arity: u32, levels: u32) -> Arc<Vec<TreeMask>> {
    type Key = (u64, u32, u32);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Vec<TreeMask>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (total_nodes, arity, levels);
    if let Some(hit) = cache.lock().expect("tree cache lock").get(&key) {
        return hit.clone();
    }
    let family = match feasible_leaf_range(total_nodes, arity, levels) {
        None => Vec::new(),
        Some((lo, hi)) => {
            let mut search = Search::new(arity as usize, levels as usize);
            let n = total_nodes as usize;
            (lo..=hi).map(|s| walk(&mut search, n, s as usize))
                .collect()
        }
    };
    let family = Arc::new(family);
    cache.lock().expect("tree cache lock").insert(key, family.clone());
    family
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn full_tree_sizes() {
        assert_eq!(full_tree(5, 2).unwrap().node_count(), 31);
        assert_eq!(full_tree(10, 1).unwrap().node_count(), 11);
        let big = full_tree(10, 4).unwrap();
        assert_eq!(big.node_count(), 11_111);
        assert_eq!(big.leaf_count(), 10_000);
        big.validate().unwrap();
    }

    #[test]
    fn full_tree_cap_and_domain() {
        assert!(matches!(full_tree(10, 6), Err(TreeError::TooLarge { .. })));
        assert!(matches!(full_tree_capped(10, 2, 100), Err(TreeError::TooLarge { .. })));
        assert_eq!(full_tree(3, 2).unwrap().node_count(), 13);
        assert_eq!(full_tree(0, 2), Err(TreeError::InvalidArity));
        assert_eq!(full_tree(2, 0), Err(TreeError::InvalidLevels));
    }

    #[test]
    fn custom_trees_hit_exact_features() {
        for (n, s) in [(44, 37), (64, 56), (44, 23), (64, 42), (31, 20), (16, 10)] {
            let t = build_custom_tree(n, s, 10, 4).unwrap();
            t.validate().unwrap();
            assert_eq!((t.node_count() as u64, t.leaf_count() as u64), (n, s), "{n}/{s}");
            assert!(t.is_left_prefix());
        }
        let t = build_custom_tree(44, 37, 10, 4).unwrap();
        assert_eq!(t.levels(), 4);
        assert_eq!(t.level_counts()[1], 10);
    }

    /// Exact set of internal counts by brute force over level profiles.
    fn reference_internal_sets(k: usize, l: usize, level: usize, width: usize, rest: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        if level == l {
            if rest == 0 {
                out.insert(0);
            }
            return out;
        }
        for next in 1..=(k * width).min(rest) {
            let sub = reference_internal_sets(k, l, level + 1, next, rest - next);
            for internal in next.div_ceil(k)..=width.min(next) {
                out.extend(sub.iter().map(|j| j + internal));
            }
        }
        out
    }

    #[test]
    fn internal_counts_are_contiguous() {
        for k in [1usize, 2, 3, 5, 10] {
            for l in 1..=4usize {
                for n in l + 1..=22 {
                    let reference = reference_internal_sets(k, l, 0, 1, n - 1);
                    let range = feasible_leaf_range(n as u64, k as u32, l as u32);
                    match range {
                        None => assert!(reference.is_empty(), "k={k} l={l} n={n}"),
                        Some((lo, hi)) => {
                            let leaves: BTreeSet<usize> = reference.iter().map(|j| n - j).collect();
                            let expect: BTreeSet<usize> = (lo as usize..=hi as usize).collect();
                            assert_eq!(leaves, expect, "k={k} l={l} n={n}");
                            for s in lo..=hi {
                                let t = build_custom_tree(n as u64, s, k as u32, l as u32).unwrap();
                                assert_eq!((t.node_count(), t.leaf_count(), t.levels()), (n, s as usize, l as u32));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn family_matches_single_builds() {
        let fam = custom_tree_family(44, 10, 4);
        let (lo, hi) = feasible_leaf_range(44, 10, 4).unwrap();
        assert_eq!(fam.len() as u64, hi - lo + 1);
        for t in fam.iter() {
            let single = build_custom_tree(44, t.leaf_count() as u64, 10, 4).unwrap();
            assert_eq!(&single, t);
        }
        assert!(custom_tree_family(3, 10, 4).is_empty());
    }

    #[test]
    fn custom_chain() {
        for l in 1..=5 {
            let t = build_custom_tree(l as u64 + 1, 1, 10, l).unwrap();
            assert_eq!(t.candidate_paths(), vec![vec![0; l as usize]]);
        }
    }

    #[test]
    fn custom_infeasible_names_constraint() {
        let err = build_custom_tree(10, 9, 10, 4).unwrap_err().to_string();
        assert!(err.contains("total_nodes - levels"), "{err}");
        let err = build_custom_tree(20, 16, 2, 4).unwrap_err().to_string();
        assert!(err.contains("arity^levels") || err.contains("internal"), "{err}");
        let err = build_custom_tree(3, 1, 10, 4).unwrap_err().to_string();
        assert!(err.contains("levels + 1"), "{err}");
        assert!(build_custom_tree(12, 1, 10, 4).is_err());
    }
}
