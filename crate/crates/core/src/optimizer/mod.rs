//! Memory-budget planning.
//!
//! [`optimize`] walks a fixed cascade until a configuration fits the device:
//! the default heads and mask, then smaller custom masks, then fewer heads,
//! and only then a coarser precision. [`ratio_baseline_plan`] is the static
//! cache:model split it is compared against.

mod baseline;
mod budget;
mod engine;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory_model::{Bytes, MemoryBreakdown, MemoryError, OomReason, Precision, TreeShape};
use crate::simulator::SimError;
use crate::tree::{TreeError, TreeMask};

pub use baseline::{ratio_baseline_plan, CacheModelRatio};
pub use budget::{ClusterSpec, DeviceBudget, DEFAULT_SAFETY_MARGIN};
pub use engine::{
    avail_memory, check_decision_order, compute_min_cache, explore_tree_configs, optimize, select_best_config,
    Availability, ConfigResult, ExploreOptions, PlanDefaults,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("invalid device: {0}")]
    InvalidDevice(String),
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
    #[error("no candidate configurations to choose from")]
    EmptyResults,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Where the plan's mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeOrigin {
    Default,
    Truncated,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub label: String,
    pub shape: TreeShape,
    pub origin: TreeOrigin,
}

/// One step of the planning cascade, in the order taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Decision {
    MinCache {
        precision: Precision,
        bytes: Bytes,
    },
    Defaults {
        heads: u32,
        label: String,
        fits: bool,
        reason: Option<OomReason>,
    },
    TreeExploration {
        heads: u32,
        precision: Precision,
        budget: Option<Bytes>,
        candidates: usize,
        chosen: Option<String>,
    },
    HeadReduction {
        from: u32,
        to: u32,
        fits: bool,
        reason: Option<OomReason>,
    },
    Quantization {
        from: Precision,
        to: Precision,
    },
    Infeasible {
        reason: OomReason,
    },
}

impl Decision {
    pub fn stage(&self) -> &'static str {
        match self {
            Decision::MinCache { .. } => "min_cache",
            Decision::Defaults { .. } => "defaults",
            Decision::TreeExploration { .. } => "tree_exploration",
            Decision::HeadReduction { .. } => "head_reduction",
            Decision::Quantization { .. } => "quantization",
            Decision::Infeasible { .. } => "infeasible",
        }
    }
}

/// Output of the planner or the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub cache_bytes: Bytes,
    pub head_count: u32,
    pub tree: TreeConfig,
    pub precision: Precision,
    pub breakdown: MemoryBreakdown,
    pub usable_bytes: Bytes,
    pub feasible: bool,
    pub oom_reason: Option<OomReason>,
    pub expected_tau: Option<f64>,
    pub expected_speedup: Option<f64>,
    pub decisions_log: Vec<Decision>,
    #[serde(skip)]
    pub mask: Option<TreeMask>,
}
