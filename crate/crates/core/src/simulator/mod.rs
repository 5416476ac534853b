//! Seeded simulation of tree-based speculative generation.
//!
//! Per step a tree mask is verified: every candidate node is accepted or
//! rejected, the deepest fully accepted path is committed and the base model
//! contributes one bonus token, so `τ = accepted + 1`. Step latency comes
//! from a linear [`CostModel`]. Batched runs follow the right-padding
//! protocol in [`batch`], and pipeline runs split layers across devices.

mod acceptance;
mod batch;
mod run;
mod stub;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory_model::MemoryError;
use crate::scalar::Real;

pub use acceptance::{
    expected_tau, expected_tau_exhaustive, monte_carlo_tau, resolve_step, step_accept, AcceptanceModel,
    StepOutcome, TauEstimate, EXHAUSTIVE_NODE_LIMIT,
};
pub use batch::{apply_padded, batched_verify_pad, BatchState, PaddedBatch};
pub use run::{
    layer_split, simulate_batched, simulate_distributed, simulate_generation, simulate_sequence, BatchedResult,
    DistributedResult, MemoryProbe, MemorySample, SimResult, StageReport, StageVerdict, StepRecord, Verifier,
};
pub use stub::{context_hash, stub_model_decode, DecodeMode, StubDecode, StubModel};

pub type Token = u32;

/// Filler token for padded slots.
pub const PAD: Token = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid acceptance model: {0}")]
    InvalidAcceptance(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("acceptance model has {model} levels but the mask has {mask}")]
    LevelMismatch { model: usize, mask: usize },
    #[error("mask of {nodes} nodes exceeds the exhaustive limit of {limit}")]
    TooLarge { nodes: usize, limit: usize },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Linear latency model, all costs in seconds.
///
/// A verification step over `N` nodes costs `c0 + c1 · N`. In a batch the
/// node term is scaled by `batch^batch_scaling · padded_width / mean_width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "")]
pub struct CostModel<F: Real> {
    pub fixed_step_cost: F,
    pub per_node_cost: F,
    pub per_token_vanilla: F,
    #[serde(default)]
    pub comm_cost: F,
    #[serde(default)]
    pub batch_scaling: F,
    #[serde(default)]
    pub pipeline_overlap: F,
}

impl<F: Real> Default for CostModel<F> {
    /// Roughly a 7B model on one accelerator: 20 ms per forward pass plus
    /// 0.05 ms per verified tree node, with the node term growing as
    /// `batch^0.25`.
    fn default() -> Self {
        CostModel {
            fixed_step_cost: F::lit(0.020),
            per_node_cost: F::lit(0.000_05),
            per_token_vanilla: F::lit(0.020),
            comm_cost: F::lit(0.001),
            batch_scaling: F::lit(0.25),
            pipeline_overlap: F::zero(),
        }
    }
}

impl<F: Real> CostModel<F> {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("fixed_step_cost", self.fixed_step_cost),
            ("per_node_cost", self.per_node_cost),
            ("per_token_vanilla", self.per_token_vanilla),
            ("comm_cost", self.comm_cost),
            ("batch_scaling", self.batch_scaling),
            ("pipeline_overlap", self.pipeline_overlap),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= F::zero()) {
                return Err(SimError::InvalidCost(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.pipeline_overlap > F::one() {
            return Err(SimError::InvalidCost("pipeline_overlap must be at most 1".into()));
        }
        if self.fixed_step_cost + self.per_node_cost <= F::zero() {
            return Err(SimError::InvalidCost("a step must take positive time".into()));
        }
        Ok(())
    }

    /// Latency of one unbatched step over `nodes` nodes.
    pub fn step_latency(&self, nodes: usize) -> F {
        self.fixed_step_cost + self.per_node_cost * F::from_count(nodes as u64)
    }

    /// Latency of one batched step. `taus` are the acceptance lengths of the
    /// sequences in the batch.
    pub fn batched_step_latency(&self, nodes: usize, taus: &[u32]) -> F {
        if taus.is_empty() {
            return self.step_latency(nodes);
        }
        let width = F::from_count(*taus.iter().max().expect("non-empty") as u64);
        let mean = F::from_count(taus.iter().map(|&t| t as u64).sum()) / F::from_count(taus.len() as u64);
        let eff = F::from_count(taus.len() as u64).powf(self.batch_scaling) * width / mean;
        self.fixed_step_cost + self.per_node_cost * F::from_count(nodes as u64) * eff
    }

    /// Expected speedup over vanilla decoding for a mask of `nodes` nodes
    /// whose expected acceptance length is `tau`.
    pub fn expected_speedup(&self, nodes: usize, tau: F) -> F {
        self.per_token_vanilla * tau / self.step_latency(nodes)
    }
}
