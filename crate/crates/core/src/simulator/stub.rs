use serde::{Deserialize, Serialize};

use super::acceptance::{resolve_step, AcceptanceModel, StepOutcome};
use super::{Token, PAD};
use crate::scalar::Real;
use crate::tree::TreeMask;

/// Deterministic toy verifier. Its decisions depend only on the real
/// (non-pad) tokens of the context and their positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "")]
pub struct StubModel<F: Real> {
    pub acceptance: AcceptanceModel<F>,
    pub vocab_size: u32,
}

impl<F: Real> StubModel<F> {
    pub fn new(acceptance: AcceptanceModel<F>, vocab_size: u32) -> Self {
        StubModel {
            acceptance,
            vocab_size: vocab_size.max(1),
        }
    }
}

/// Whether the context handed to the stub may contain pad slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Single,
    Batched,
}

/// Stub output for one tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StubDecode {
    pub context_hash: u64,
    /// Candidate token per node; the root entry is unused and set to `PAD`.
    pub candidates: Vec<Token>,
    pub accepted: Vec<bool>,
}

pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Hash of the real tokens of `context` together with their positions.
pub fn context_hash(context: &[Token]) -> u64 {
    context
        .iter()
        .filter(|&&t| t != PAD)
        .enumerate()
        .fold(0x5EED_u64, |h, (pos, &t)| mix(h ^ mix(((pos as u64) << 32) | t as u64)))
}

fn path_hash(seed: u64, path: &[u32]) -> u64 {
    path.iter().fold(mix(seed ^ 0xA5A5), |h, &r| mix(h ^ (r as u64 + 1)))
}

/// Candidate tokens and accept decisions for every node of `mask` given the
/// context so far. Pads are skipped, so a padded cache decodes exactly like
/// its compacted form.
pub fn stub_model_decode<F: Real>(
    context: &[Token],
    mask: &TreeMask,
    stub: &StubModel<F>,
    mode: DecodeMode,
) -> StubDecode {
    debug_assert!(mode == DecodeMode::Batched || !context.contains(&PAD));
    let h = context_hash(context);
    let mut candidates = Vec::with_capacity(mask.node_count());
    let mut accepted = Vec::with_capacity(mask.node_count());
    for node in mask.nodes() {
        if node.id == 0 {
            candidates.push(PAD);
            accepted.push(true);
            continue;
        }
        let nh = path_hash(h, mask.path(node.id));
        candidates.push((nh % stub.vocab_size as u64) as Token);
        let p = stub.acceptance.node_probability(node.level, node.rank).as_f64();
        accepted.push(unit(mix(nh ^ 0xACCE)) < p);
    }
    StubDecode {
        context_hash: h,
        candidates,
        accepted,
    }
}

impl StubDecode {
    /// The step outcome and the tokens it commits: accepted candidates along
    /// the chosen path followed by the bonus token.
    pub fn commit(&self, mask: &TreeMask, vocab_size: u32) -> (StepOutcome, Vec<Token>) {
        let outcome = resolve_step(mask, &self.accepted);
        let mut tokens: Vec<Token> = mask
            .ancestors(outcome.chosen_node)
            .into_iter()
            .skip(1)
            .chain((outcome.chosen_node != 0).then_some(outcome.chosen_node))
            .map(|id| self.candidates[id])
            .collect();
        let bonus = mix(path_hash(self.context_hash, &outcome.chosen_path) ^ 0xB0B0);
        tokens.push((bonus % vocab_size.max(1) as u64) as Token);
        (outcome, tokens)
    }
}
