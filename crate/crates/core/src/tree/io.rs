use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Node, RankPath, TreeError, TreeMask};

const MEDUSA_VICUNA_7B: &str = include_str!("../../data/medusa_vicuna_7b.json");

/// Native on-disk form: `{arity, nodes: [{id, parent, level, rank}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeMask {
    pub arity: u32,
    pub nodes: Vec<NativeNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub level: u32,
    pub rank: u32,
}

impl TreeMask {
    /// The 64-node Medusa mask shipped for Vicuna-7B (42 candidate paths).
    pub fn medusa_vicuna_7b() -> TreeMask {
        TreeMask::from_path_list(MEDUSA_VICUNA_7B, Some(10)).expect("bundled mask is valid")
    }

    /// Parses a JSON list of rank paths such as `[[0],[1],[0,0]]`. The root is
    /// implicit. Without an explicit arity the largest rank plus one is used.
    pub fn from_path_list(text: &str, arity: Option<u32>) -> Result<TreeMask, TreeError> {
        let paths: Vec<RankPath> =
            serde_json::from_str(text).map_err(|e| TreeError::Parse(e.to_string()))?;
        let arity = match arity {
            Some(a) => a,
            None => paths.iter().flatten().copied().max().map_or(1, |r| r + 1),
        };
        TreeMask::from_paths(arity, paths)
    }

    /// Path list in node order, root omitted.
    pub fn to_path_list(&self) -> String {
        serde_json::to_string(&self.paths()[1..]).expect("paths serialize")
    }

    pub fn to_native(&self) -> NativeMask {
        NativeMask {
            arity: self.arity(),
            nodes: self
                .nodes()
                .iter()
                .map(|n: &Node| NativeNode {
                    id: n.id,
                    parent: n.parent,
                    level: n.level,
                    rank: n.rank,
                })
                .collect(),
        }
    }

    /// Rebuilds a mask from native form, checking every node record against
    /// the canonical ordering.
    pub fn from_native(native: &NativeMask) -> Result<TreeMask, TreeError> {
        let mut paths: Vec<RankPath> = Vec::with_capacity(native.nodes.len());
        for (pos, n) in native.nodes.iter().enumerate() {
            if n.id != pos {
                return Err(TreeError::Malformed {
                    id: n.id,
                    reason: format!("ids must be dense and ordered; found at position {pos}"),
                });
            }
            let path = match n.parent {
                None if pos == 0 && n.level == 0 => Vec::new(),
                None => {
                    return Err(TreeError::Malformed {
                        id: n.id,
                        reason: "only node 0 may be the root".into(),
                    })
                }
                Some(p) if p < pos => {
                    let mut path = paths[p].clone();
                    path.push(n.rank);
                    path
                }
                Some(_) => {
                    return Err(TreeError::Malformed {
                        id: n.id,
                        reason: "parent must precede its child".into(),
                    })
                }
            };
            if path.len() as u32 != n.level {
                return Err(TreeError::Malformed {
                    id: n.id,
                    reason: format!("level {} disagrees with depth {}", n.level, path.len()),
                });
            }
            paths.push(path);
        }
        if paths.is_empty() {
            return Err(TreeError::Malformed {
                id: 0,
                reason: "mask has no root".into(),
            });
        }
        let mask = TreeMask::from_paths(native.arity, paths.iter().skip(1).cloned())?;
        if mask.paths() != paths.as_slice() {
            return Err(TreeError::Malformed {
                id: 0,
                reason: "nodes are not in level-major, left-to-right order".into(),
            });
        }
        Ok(mask)
    }

    pub fn to_native_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_native()).expect("mask serializes")
    }

    pub fn from_native_json(text: &str) -> Result<TreeMask, TreeError> {
        let native: NativeMask = serde_json::from_str(text).map_err(|e| TreeError::Parse(e.to_string()))?;
        TreeMask::from_native(&native)
    }

    /// Loads a mask file in either format: an object is native, an array is a
    /// path list.
    pub fn load(path: &Path, arity: Option<u32>) -> Result<TreeMask, TreeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TreeError::Parse(format!("{}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let mask = TreeMask::from_native_json(&text)?;
            match arity {
                Some(a) if a != mask.arity() => Err(TreeError::Parse(format!(
                    "{} declares arity {} but {a} was requested",
                    path.display(),
                    mask.arity()
                ))),
                _ => Ok(mask),
            }
        } else {
            TreeMask::from_path_list(&text, arity)
        }
    }
}
