//! Memory budgeting and simulation for tree-based speculative decoding.
//!
//! The crate estimates device memory for a base model with extra decoding
//! heads and a tree attention mask, plans configurations that fit a memory
//! budget, and simulates decoding throughput under a parametric cost model.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix it to `f64`
//! or `f32`.

pub mod memory_model;
pub mod optimizer;
pub mod report;
pub mod scalar;
pub mod simulator;
pub mod tree;
pub mod units;

pub use memory_model::{Bytes, MemoryBreakdown, ModelSpec, OomReason, Precision, TreeShape, Workload};
pub use optimizer::{optimize, BudgetPlan, ClusterSpec, DeviceBudget, OptimizerError};
pub use scalar::Real;
pub use simulator::{SimError, Token};
pub use tree::{TreeError, TreeMask};

pub type AcceptanceModelF64 = simulator::AcceptanceModel<f64>;
pub type AcceptanceModelF32 = simulator::AcceptanceModel<f32>;
pub type CostModelF64 = simulator::CostModel<f64>;
pub type CostModelF32 = simulator::CostModel<f32>;
pub type SimResultF64 = simulator::SimResult<f64>;
pub type SimResultF32 = simulator::SimResult<f32>;
pub type PlanDefaultsF64 = optimizer::PlanDefaults<f64>;
pub type PlanDefaultsF32 = optimizer::PlanDefaults<f32>;
pub type ClusterSpecF64 = optimizer::ClusterSpec<f64>;
pub type ClusterSpecF32 = optimizer::ClusterSpec<f32>;
