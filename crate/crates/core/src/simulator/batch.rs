use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::acceptance::StepOutcome;
use super::{SimError, Token, PAD};

/// Per-sequence bookkeeping for batched decoding.
///
/// `cache` mirrors the KV cache layout: real tokens and pad slots in the
/// order they were written. `position_counter` counts real tokens only.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchState {
    pub generated_tokens: Vec<Token>,
    pub cache: Vec<Token>,
    pub position_counter: u64,
    pub pad_positions: BTreeSet<usize>,
}

impl BatchState {
    pub fn new(prompt: &[Token]) -> Self {
        BatchState {
            generated_tokens: Vec::new(),
            cache: prompt.to_vec(),
            position_counter: prompt.len() as u64,
            pad_positions: BTreeSet::new(),
        }
    }

    pub fn real_token_count(&self) -> usize {
        self.cache.len() - self.pad_positions.len()
    }
}

/// Uniform tensors for one batched verification step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedBatch {
    pub width: usize,
    pub tokens: Vec<Vec<Token>>,
    /// Position id of each slot; `None` for pads.
    pub position_ids: Vec<Vec<Option<u64>>>,
    /// `true` where the slot is a pad and must be masked out.
    pub pad_mask: Vec<Vec<bool>>,
    pub pad_counts: Vec<usize>,
}

/// Right-pads each sequence's committed tokens to the longest acceptance in
/// the batch. Position ids continue from each sequence's real-token count.
pub fn batched_verify_pad(
    outcomes: &[StepOutcome],
    committed: &[Vec<Token>],
    states: &[BatchState],
) -> Result<PaddedBatch, SimError> {
    if outcomes.is_empty() {
        return Err(SimError::Precondition("batch must hold at least one sequence".into()));
    }
    if outcomes.len() != states.len() || outcomes.len() != committed.len() {
        return Err(SimError::Precondition(format!(
            "{} outcomes, {} token lists and {} states do not line up",
            outcomes.len(),
            committed.len(),
            states.len()
        )));
    }
    for (i, (o, c)) in outcomes.iter().zip(committed).enumerate() {
        if o.tau as usize != c.len() {
            return Err(SimError::Precondition(format!(
                "sequence {i} commits {} tokens but tau is {}",
                c.len(),
                o.tau
            )));
        }
    }
    let width = outcomes.iter().map(|o| o.tau as usize).max().unwrap_or(0);
    let mut batch = PaddedBatch {
        width,
        tokens: Vec::with_capacity(states.len()),
        position_ids: Vec::with_capacity(states.len()),
        pad_mask: Vec::with_capacity(states.len()),
        pad_counts: Vec::with_capacity(states.len()),
    };
    for (state, toks) in states.iter().zip(committed) {
        let pads = width - toks.len();
        let mut row = toks.clone();
        row.resize(width, PAD);
        let ids = (0..width)
            .map(|j| (j < toks.len()).then(|| state.position_counter + j as u64))
            .collect();
        batch.pad_mask.push((0..width).map(|j| j >= toks.len()).collect());
        batch.tokens.push(row);
        batch.position_ids.push(ids);
        batch.pad_counts.push(pads);
    }
    Ok(batch)
}

/// Writes a padded step into the states: real tokens extend the generated
/// stream, every slot extends the cache, and pad slots are recorded.
pub fn apply_padded(states: &mut [BatchState], batch: &PaddedBatch) {
    for (i, state) in states.iter_mut().enumerate() {
        for (j, &tok) in batch.tokens[i].iter().enumerate() {
            let slot = state.cache.len();
            state.cache.push(tok);
            if batch.pad_mask[i][j] {
                state.pad_positions.insert(slot);
            } else {
                state.generated_tokens.push(tok);
                state.position_counter += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(tau: u32) -> StepOutcome {
        StepOutcome {
            chosen_path: vec![0; tau as usize - 1],
            chosen_node: 0,
            accepted_speculative: tau - 1,
            tau,
        }
    }

    #[test]
    fn uneven_acceptance_pads() {
        let taus = [2, 4, 1, 2];
        let outs: Vec<_> = taus.iter().map(|&t| outcome(t)).collect();
        let toks: Vec<Vec<Token>> = taus.iter().map(|&t| (0..t).collect()).collect();
        let mut states = vec![BatchState::new(&[7, 7, 7]); 4];
        let b = batched_verify_pad(&outs, &toks, &states).unwrap();
        assert_eq!(b.width, 4);
        assert_eq!(b.pad_counts, vec![2, 0, 3, 2]);
        assert_eq!(b.position_ids[2], vec![Some(3), None, None, None]);
        apply_padded(&mut states, &b);
        for (s, &t) in states.iter().zip(&taus) {
            assert_eq!(s.position_counter, 3 + t as u64);
            assert_eq!(s.real_token_count() as u64, s.position_counter);
            assert_eq!(s.cache.len(), 7);
        }
        assert_eq!(states[2].pad_positions.iter().copied().collect::<Vec<_>>(), vec![4, 5, 6]);
    }

    #[test]
    fn no_pads_when_equal_or_single() {
        let outs = vec![outcome(3), outcome(3)];
        let toks = vec![vec![1, 2, 3], vec![4, 5, 6]];
        let states = vec![BatchState::default(); 2];
        assert_eq!(batched_verify_pad(&outs, &toks, &states).unwrap().pad_counts, vec![0, 0]);
        let b = batched_verify_pad(&outs[..1], &toks[..1], &states[..1]).unwrap();
        assert_eq!(b.pad_counts, vec![0]);
    }

    #[test]
    fn precondition_errors() {
        assert!(batched_verify_pad(&[], &[], &[]).is_err());
        let states = vec![BatchState::default()];
        assert!(batched_verify_pad(&[outcome(2)], &[vec![1]], &states).is_err());
    }
}
