//! Tree-based attention masks.
//!
//! A [`TreeMask`] is a rooted tree of candidate tokens. Every non-root node is
//! identified by its rank path: the sequence of sibling ranks from the root,
//! where rank 0 is the highest-probability token sampled by that level's
//! head. Root-to-leaf paths are the candidate sequences verified in one pass.
//!
//! Nodes are stored level-major and, within a level, in left-to-right order
//! (lexicographic order of rank paths). Node ids are positions in that order,
//! so the root is always id 0 and parents precede children.

mod build;
mod io;
mod prune;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory_model::TreeShape;

pub use build::{build_custom_tree, custom_tree_family, feasible_leaf_range, full_tree, full_tree_capped, CUSTOM_TREE_LIMIT, DEFAULT_NODE_LIMIT};
pub use io::{NativeMask, NativeNode};
pub use prune::{prune_floor, prune_full_tree, prune_in_place, prune_rate, PruneSchedule};

/// Sequence of sibling ranks from the root; empty for the root itself.
pub type RankPath = Vec<u32>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("arity must be at least 1")]
    InvalidArity,
    #[error("levels must be at least 1")]
    InvalidLevels,
    #[error("tree of {nodes} nodes exceeds the node limit {limit}")]
    TooLarge { nodes: u128, limit: u64 },
    #[error("node {path:?} has no parent in the mask")]
    MissingParent { path: RankPath },
    #[error("node {path:?} appears twice")]
    DuplicateNode { path: RankPath },
    #[error("node {path:?} has rank {rank} which is not below arity {arity}")]
    RankOutOfRange { path: RankPath, rank: u32, arity: u32 },
    #[error("node {id}: {reason}")]
    Malformed { id: usize, reason: String },
    #[error("infeasible tree: {0}")]
    Infeasible(String),
    #[error("target of {target} nodes is outside [{floor}, {size}]")]
    TargetOutOfRange { target: usize, floor: usize, size: usize },
    #[error("invalid prune schedule: {0}")]
    InvalidSchedule(String),
    #[error("mask parse error: {0}")]
    Parse(String),
}

/// One node of a mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    pub level: u32,
    pub rank: u32,
}

/// Immutable tree-based attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeMask {
    arity: u32,
    nodes: Vec<Node>,
    paths: Vec<RankPath>,
    children: Vec<Vec<usize>>,
}

/// Counts plus the per-level label, e.g. `1-10-16-17`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    pub shape: TreeShape,
    pub label: String,
    pub level_counts: Vec<u64>,
}

impl TreeMask {
    /// Builds a mask from the rank paths of its non-root nodes.
    ///
    /// Every proper prefix of every path must itself be listed. Order of the
    /// input does not matter.
    pub fn from_paths<I>(arity: u32, paths: I) -> Result<Self, TreeError>
    where
        I: IntoIterator<Item = RankPath>,
    {
        if arity == 0 {
            return Err(TreeError::InvalidArity);
        }
        let mut set: BTreeSet<(usize, RankPath)> = BTreeSet::new();
        set.insert((0, Vec::new()));
        for p in paths {
            if p.is_empty() {
                continue;
            }
            if let Some(&rank) = p.iter().find(|&&r| r >= arity) {
                return Err(TreeError::RankOutOfRange { path: p, rank, arity });
            }
            if !set.insert((p.len(), p.clone())) {
                return Err(TreeError::DuplicateNode { path: p });
            }
        }
        // BTreeSet order is (level, lexicographic path): exactly the node order
        let ordered: Vec<RankPath> = set.into_iter().map(|(_, p)| p).collect();
        Self::from_ordered_paths(arity, ordered)
    }

    fn from_ordered_paths(arity: u32, paths: Vec<RankPath>) -> Result<Self, TreeError> {
        let index: std::collections::HashMap<&[u32], usize> =
            paths.iter().enumerate().map(|(i, p)| (p.as_slice(), i)).collect();
        let mut nodes = Vec::with_capacity(paths.len());
        let mut children = vec![Vec::new(); paths.len()];
        for (id, p) in paths.iter().enumerate() {
            let parent = if p.is_empty() {
                None
            } else {
                let parent_path = &p[..p.len() - 1];
                let pid = *index
                    .get(parent_path)
                    .ok_or_else(|| TreeError::MissingParent { path: p.clone() })?;
                children[pid].push(id);
                Some(pid)
            };
            nodes.push(Node {
                id,
                parent,
                level: p.len() as u32,
                rank: p.last().copied().unwrap_or(0),
            });
        }
        Ok(TreeMask {
            arity,
            nodes,
            paths,
            children,
        })
    }

    /// A mask holding only the root.
    pub fn root_only(arity: u32) -> Result<Self, TreeError> {
        Self::from_paths(arity, std::iter::empty())
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.children[id].is_empty()
    }

    pub fn path(&self, id: usize) -> &[u32] {
        &self.paths[id]
    }

    pub fn paths(&self) -> &[RankPath] {
        &self.paths
    }

    pub fn find(&self, path: &[u32]) -> Option<usize> {
        let level = path.len();
        let start = self.nodes.partition_point(|n| (n.level as usize) < level);
        let end = self.nodes.partition_point(|n| (n.level as usize) <= level);
        self.paths[start..end]
            .binary_search_by(|p| p.as_slice().cmp(path))
            .ok()
            .map(|i| start + i)
    }

    pub fn leaf_count(&self) -> usize {
        self.children.iter().filter(|c| c.is_empty()).count()
    }

    /// Depth of the deepest node; the root alone has zero levels.
    pub fn levels(&self) -> u32 {
        self.nodes.last().map(|n| n.level).unwrap_or(0)
    }

    /// Node counts per level, root level included.
    pub fn level_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.levels() as usize + 1];
        for n in &self.nodes {
            counts[n.level as usize] += 1;
        }
        counts
    }

    pub fn label(&self) -> String {
        self.level_counts()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn shape(&self) -> TreeShape {
        TreeShape {
            nodes: self.node_count() as u64,
            leaves: self.leaf_count() as u64,
            levels: self.levels() as u64,
            arity: self.arity as u64,
        }
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            shape: self.shape(),
            label: self.label(),
            level_counts: self.level_counts(),
        }
    }

    /// Rank paths of all leaves, left to right.
    pub fn candidate_paths(&self) -> Vec<RankPath> {
        let mut leaves: Vec<RankPath> = (0..self.node_count())
            .filter(|&i| self.is_leaf(i))
            .map(|i| self.paths[i].clone())
            .collect();
        leaves.sort();
        leaves
    }

    /// `N × N` matrix whose entry `(i, j)` is set iff node `j` is node `i` or
    /// one of its ancestors.
    pub fn ancestor_mask(&self) -> Vec<Vec<bool>> {
        let n = self.node_count();
        let mut rows = vec![vec![false; n]; n];
        for i in 0..n {
            rows[i][i] = true;
            if let Some(p) = self.nodes[i].parent {
                // parents precede children, so the parent row is complete
                let (head, tail) = rows.split_at_mut(i);
                for (dst, &src) in tail[0].iter_mut().zip(head[p].iter()) {
                    *dst |= src;
                }
            }
        }
        rows
    }

    /// Ids of `id`'s ancestors from the root down, excluding `id`.
    pub fn ancestors(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out.reverse();
        out
    }

    /// The same mask cut off below `levels`.
    pub fn truncate(&self, levels: u32) -> TreeMask {
        let keep = self
            .paths
            .iter()
            .filter(|p| p.len() as u32 <= levels)
            .cloned()
            .collect();
        Self::from_ordered_paths(self.arity, keep).expect("prefix-closed subset")
    }

    /// Rebuilds a left-heavy tree from per-level counts: the children of each
    /// level are packed onto its leftmost nodes, each filled up to the arity.
    pub fn from_level_counts(arity: u32, counts: &[u64]) -> Result<Self, TreeError> {
        if arity == 0 {
            return Err(TreeError::InvalidArity);
        }
        if counts.first() != Some(&1) {
            return Err(TreeError::Infeasible("the root level must hold exactly one node".into()));
        }
        let mut paths: Vec<RankPath> = vec![Vec::new()];
        let mut prev: Vec<RankPath> = vec![Vec::new()];
        for (level, &count) in counts.iter().enumerate().skip(1) {
            let capacity = prev.len() as u64 * arity as u64;
            if count == 0 || count > capacity {
                return Err(TreeError::Infeasible(format!(
                    "level {level} holds {count} nodes but its parents allow 1..={capacity}"
                )));
            }
            let mut cur = Vec::with_capacity(count as usize);
            'fill: for parent in &prev {
                for r in 0..arity {
                    if cur.len() as u64 == count {
                        break 'fill;
                    }
                    let mut p = parent.clone();
                    p.push(r);
                    cur.push(p);
                }
            }
            paths.extend(cur.iter().cloned());
            prev = cur;
        }
        Self::from_ordered_paths(arity, paths)
    }

    /// Parses a label such as `1-10-16-17` and rebuilds the left-heavy tree.
    pub fn from_label(arity: u32, label: &str) -> Result<Self, TreeError> {
        let counts = label
            .split('-')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TreeError::Parse(format!("bad label `{label}`: {e}")))?;
        Self::from_level_counts(arity, &counts)
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() || !self.paths[0].is_empty() {
            return Err(TreeError::Malformed {
                id: 0,
                reason: "first node must be the root".into(),
            });
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.id != id {
                return Err(TreeError::Malformed {
                    id,
                    reason: format!("stored id {}", node.id),
                });
            }
            if id == 0 {
                continue;
            }
            let parent = node.parent.ok_or_else(|| TreeError::Malformed {
                id,
                reason: "second root".into(),
            })?;
            if parent >= id || self.nodes[parent].level + 1 != node.level {
                return Err(TreeError::Malformed {
                    id,
                    reason: "parent must precede the node and sit one level up".into(),
                });
            }
            if node.rank >= self.arity {
                return Err(TreeError::RankOutOfRange {
                    path: self.paths[id].clone(),
                    rank: node.rank,
                    arity: self.arity,
                });
            }
            if (self.paths[id][..self.paths[id].len() - 1]) != self.paths[parent][..] {
                return Err(TreeError::Malformed {
                    id,
                    reason: "path does not extend the parent path".into(),
                });
            }
            let prev = &self.nodes[id - 1];
            let ordered = (prev.level, &self.paths[id - 1]) < (node.level, &self.paths[id]);
            if !ordered {
                return Err(TreeError::Malformed {
                    id,
                    reason: "nodes out of level-major order or duplicated".into(),
                });
            }
        }
        Ok(())
    }

    /// Whether every retained node's lower-ranked siblings are also present.
    pub fn is_left_prefix(&self) -> bool {
        self.children.iter().all(|kids| {
            kids.iter()
                .enumerate()
                .all(|(i, &c)| self.nodes[c].rank as usize == i)
        })
    }
}

impl fmt::Display for TreeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} nodes, {} leaves, {} levels, arity {})",
            self.label(),
            self.node_count(),
            self.leaf_count(),
            self.levels(),
            self.arity
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(levels: u32) -> TreeMask {
        TreeMask::from_paths(10, (1..=levels).map(|l| vec![0; l as usize])).unwrap()
    }

    #[test]
    fn medusa_mask_stats() {
        let m = TreeMask::medusa_vicuna_7b();
        let s = m.stats();
        assert_eq!((s.shape.nodes, s.shape.leaves, s.shape.levels), (64, 42, 4));
        assert_eq!(s.label, "1-10-28-23-2");
        assert_eq!(m.candidate_paths().len(), 42);
        m.validate().unwrap();
        assert!(m.is_left_prefix());
    }

    #[test]
    fn candidate_paths_of_small_full_tree() {
        let t = full_tree(2, 2).unwrap();
        assert_eq!(
            t.candidate_paths(),
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        assert_eq!(chain(3).candidate_paths(), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn ancestor_mask_rows() {
        let t = full_tree(2, 2).unwrap();
        let m = t.ancestor_mask();
        assert_eq!(m[0].iter().filter(|&&b| b).count(), 1);
        let leaf = t.find(&[1, 1]).unwrap();
        assert_eq!(m[leaf].iter().filter(|&&b| b).count(), 3);

        let c = chain(3).ancestor_mask();
        for (i, row) in c.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                assert_eq!(b, j <= i);
            }
        }
    }

    #[test]
    fn label_of_full_tree() {
        assert_eq!(full_tree(5, 2).unwrap().label(), "1-5-25");
    }

    #[test]
    fn rejects_missing_parent_and_bad_rank() {
        assert!(matches!(
            TreeMask::from_paths(10, vec![vec![0, 0]]),
            Err(TreeError::MissingParent { .. })
        ));
        assert!(matches!(
            TreeMask::from_paths(2, vec![vec![2]]),
            Err(TreeError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            TreeMask::from_paths(2, vec![vec![1], vec![1]]),
            Err(TreeError::DuplicateNode { .. })
        ));
    }

    #[test]
    fn truncation_keeps_upper_levels() {
        let m = TreeMask::medusa_vicuna_7b();
        assert_eq!(m.truncate(1).label(), "1-10");
        assert_eq!(m.truncate(2).node_count(), 39);
        assert_eq!(m.truncate(9), m);
    }

    #[test]
    fn level_counts_round_trip() {
        let t = TreeMask::from_label(10, "1-10-16-17").unwrap();
        assert_eq!(t.label(), "1-10-16-17");
        assert_eq!(t.node_count(), 44);
        // 16 children on the two leftmost level-1 nodes, 17 on two level-2 nodes
        assert_eq!(t.leaf_count(), 8 + 14 + 17);
        assert!(TreeMask::from_label(2, "1-3").is_err());
        assert!(TreeMask::from_label(2, "2-1").is_err());
    }

    #[test]
    fn find_locates_nodes() {
        let m = TreeMask::medusa_vicuna_7b();
        for id in 0..m.node_count() {
            assert_eq!(m.find(m.path(id)), Some(id));
        }
        assert_eq!(m.find(&[9, 9]), None);
    }
}
