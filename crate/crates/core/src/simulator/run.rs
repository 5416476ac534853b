use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::acceptance::{draw_step, AcceptanceModel, StepOutcome};
use super::batch::{apply_padded, batched_verify_pad, BatchState};
use super::stub::{mix, stub_model_decode, DecodeMode, StubModel};
use super::{CostModel, SimError, Token};
use crate::memory_model::{
    base_model_bytes, buffer_bytes, heads_bytes, kv_cache_bytes, kv_cache_bytes_for_tokens, Bytes, ModelSpec,
    Precision, Workload,
};
use crate::optimizer::ClusterSpec;
use crate::scalar::Real;
use crate::tree::TreeMask;

const SAMPLED_VOCAB: u32 = 32_000;
const PROMPT_TOKENS: usize = 8;

/// Source of accept/reject decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "")]
pub enum Verifier<F: Real> {
    /// Independent random draws from a seeded generator.
    Sampled(AcceptanceModel<F>),
    /// Deterministic hash-based verifier.
    Stub(StubModel<F>),
}

impl<F: Real> Verifier<F> {
    pub fn acceptance(&self) -> &AcceptanceModel<F> {
        match self {
            Verifier::Sampled(a) => a,
            Verifier::Stub(s) => &s.acceptance,
        }
    }
}

/// Adds a per-step memory trace to a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryProbe {
    pub model: ModelSpec,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StepRecord<F: Real> {
    pub step: u64,
    pub tau: u32,
    pub latency: F,
    pub cumulative_tokens: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySample {
    pub step: u64,
    pub buffer_bytes: Bytes,
    pub cache_bytes: Bytes,
}

/// Summary of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SimResult<F: Real> {
    pub mean_tau: F,
    pub tokens_per_second: F,
    pub per_token_latency: F,
    pub speedup: F,
    pub total_steps: u64,
    pub total_tokens: u64,
    pub total_time: F,
    pub steps: Vec<StepRecord<F>>,
    pub memory_trace: Vec<MemorySample>,
    #[serde(skip)]
    pub tokens: Vec<Token>,
}

impl<F: Real> SimResult<F> {
    fn from_steps(steps: Vec<StepRecord<F>>, taus: u64, vanilla: F, tokens: Vec<Token>) -> Self {
        let total_steps = steps.len() as u64;
        let total_tokens = steps.last().map_or(0, |s| s.cumulative_tokens);
        let total_time = steps.iter().fold(F::zero(), |t, s| t + s.latency);
        let count = |n: u64| F::from_count(n.max(1));
        let per_token_latency = total_time / count(total_tokens);
        SimResult {
            mean_tau: F::from_count(taus) / count(total_steps),
            tokens_per_second: F::from_count(total_tokens) / total_time,
            per_token_latency,
            speedup: vanilla / per_token_latency,
            total_steps,
            total_tokens,
            total_time,
            steps,
            memory_trace: Vec::new(),
            tokens,
        }
    }

    /// One CSV row per step: `step,tau,latency,cumulative_tokens`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One sequence's prompt, a pure function of the seed and its index.
fn prompt(seed: u64, index: usize) -> Vec<Token> {
    (0..PROMPT_TOKENS)
        .map(|j| (mix(seed ^ mix(index as u64) ^ (j as u64) << 40) % SAMPLED_VOCAB as u64) as Token)
        .collect()
}

struct Lane {
    state: BatchState,
    rng: ChaCha8Rng,
    steps: Vec<(u64, u32)>,
}

impl Lane {
    fn new(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        Lane {
            state: BatchState::new(&prompt(seed, index)),
            rng,
            steps: Vec::new(),
        }
    }

    fn decide<F: Real>(&mut self, mask: &TreeMask, verifier: &Verifier<F>, probs: &[F]) -> (StepOutcome, Vec<Token>) {
        match verifier {
            Verifier::Sampled(_) => {
                let outcome = draw_step(mask, probs, &mut self.rng);
                let tokens = (0..outcome.tau).map(|_| self.rng.gen_range(0..SAMPLED_VOCAB)).collect();
                (outcome, tokens)
            }
            Verifier::Stub(stub) => {
                let mode = if self.state.pad_positions.is_empty() {
                    DecodeMode::Single
                } else {
                    DecodeMode::Batched
                };
                stub_model_decode(&self.state.cache, mask, stub, mode).commit(mask, stub.vocab_size)
            }
        }
    }
}

struct Run<F: Real> {
    lanes: Vec<Lane>,
    aggregate: Vec<StepRecord<F>>,
    memory: Vec<MemorySample>,
    pads: u64,
}

/// Steps every lane in lockstep until each has `target` tokens. Finished
/// lanes leave the batch. `latency` prices a step from its acceptance
/// lengths.
fn run_lanes<F: Real>(
    mask: &TreeMask,
    verifier: &Verifier<F>,
    target: u64,
    seed: u64,
    indices: &[usize],
    probe: Option<&MemoryProbe>,
    latency: impl Fn(&[u32]) -> F,
) -> Result<Run<F>, SimError> {
    if target == 0 {
        return Err(SimError::Precondition("target_tokens must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(SimError::Precondition("batch_size must be at least 1".into()));
    }
    let probs = verifier.acceptance().probabilities(mask)?;
    let mut lanes: Vec<Lane> = indices.iter().map(|&i| Lane::new(seed, i)).collect();
    let mut aggregate = Vec::new();
    let mut memory = Vec::new();
    let mut pads = 0u64;
    let mut cumulative = 0u64;
    for step in 0u64.. {
        let active: Vec<usize> = (0..lanes.len())
            .filter(|&i| (lanes[i].state.generated_tokens.len() as u64) < target)
            .collect();
        if active.is_empty() {
            break;
        }
        let mut outcomes = Vec::with_capacity(active.len());
        let mut committed = Vec::with_capacity(active.len());
        for &i in &active {
            let (o, t) = lanes[i].decide(mask, verifier, &probs);
            outcomes.push(o);
            committed.push(t);
        }
        let mut states: Vec<BatchState> = active.iter().map(|&i| std::mem::take(&mut lanes[i].state)).collect();
        let padded = batched_verify_pad(&outcomes, &committed, &states)?;
        apply_padded(&mut states, &padded);
        for (&i, s) in active.iter().zip(states) {
            lanes[i].state = s;
        }
        pads += padded.pad_counts.iter().sum::<usize>() as u64;
        let taus: Vec<u32> = outcomes.iter().map(|o| o.tau).collect();
        let step_latency = latency(&taus);
        let tau_sum: u32 = taus.iter().sum();
        cumulative += tau_sum as u64;
        for (&i, &tau) in active.iter().zip(&taus) {
            lanes[i].steps.push((step, tau));
        }
        aggregate.push(StepRecord {
            step,
            tau: tau_sum,
            latency: step_latency,
            cumulative_tokens: cumulative,
        });
        if let Some(p) = probe {
            let slots: u64 = active.iter().map(|&i| lanes[i].state.cache.len() as u64).sum();
            memory.push(MemorySample {
                step,
                buffer_bytes: buffer_bytes(&mask.shape(), &p.model, active.len() as u64, p.precision)?,
                cache_bytes: kv_cache_bytes_for_tokens(&p.model, slots, 1, p.precision)?,
            });
        }
    }
    Ok(Run {
        lanes,
        aggregate,
        memory,
        pads,
    })
}

fn lane_result<F: Real>(lane: &Lane, aggregate: &[StepRecord<F>], vanilla: F) -> SimResult<F> {
    let mut cumulative = 0;
    let mut taus = 0;
    let steps = lane
        .steps
        .iter()
        .map(|&(step, tau)| {
            cumulative += tau as u64;
            taus += tau as u64;
            StepRecord {
                step,
                tau,
                latency: aggregate[step as usize].latency,
                cumulative_tokens: cumulative,
            }
        })
        .collect();
    SimResult::from_steps(steps, taus, vanilla, lane.state.generated_tokens.clone())
}

/// Runs sequence `index` of a seeded workload alone. Sequence 0 is what
/// [`simulate_generation`] runs.
pub fn simulate_sequence<F: Real>(
    mask: &TreeMask,
    verifier: &Verifier<F>,
    cost: &CostModel<F>,
    target_tokens: u64,
    seed: u64,
    index: usize,
    probe: Option<&MemoryProbe>,
) -> Result<SimResult<F>, SimError> {
    cost.validate()?;
    let n = mask.node_count();
    let run = run_lanes(mask, verifier, target_tokens, seed, &[index], probe, |_| cost.step_latency(n))?;
    let mut res = lane_result(&run.lanes[0], &run.aggregate, cost.per_token_vanilla);
    res.memory_trace = run.memory;
    Ok(res)
}

/// Generates at least `target_tokens` tokens with independent node draws.
pub fn simulate_generation<F: Real>(
    mask: &TreeMask,
    acc: &AcceptanceModel<F>,
    cost: &CostModel<F>,
    target_tokens: u64,
    seed: u64,
) -> Result<SimResult<F>, SimError> {
    simulate_sequence(mask, &Verifier::Sampled(acc.clone()), cost, target_tokens, seed, 0, None)
}

/// Per-sequence results and the batch-wide aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchedResult<F: Real> {
    pub batch_size: usize,
    pub per_sequence: Vec<SimResult<F>>,
    pub aggregate: SimResult<F>,
    pub total_pads: u64,
    #[serde(skip)]
    pub states: Vec<BatchState>,
}

/// Decodes `batch_size` sequences together, padding every step to the
/// longest acceptance. Sequence `i` is the same sequence
/// [`simulate_sequence`] runs with index `i`.
pub fn simulate_batched<F: Real>(
    batch_size: usize,
    mask: &TreeMask,
    verifier: &Verifier<F>,
    cost: &CostModel<F>,
    target_tokens: u64,
    seed: u64,
    probe: Option<&MemoryProbe>,
) -> Result<BatchedResult<F>, SimError> {
    cost.validate()?;
    let indices: Vec<usize> = (0..batch_size).collect();
    let n = mask.node_count();
    let run = run_lanes(mask, verifier, target_tokens, seed, &indices, probe, |taus| {
        cost.batched_step_latency(n, taus)
    })?;
    let per_sequence = run
        .lanes
        .iter()
        .map(|l| lane_result(l, &run.aggregate, cost.per_token_vanilla))
        .collect();
    let taus: u64 = run.lanes.iter().flat_map(|l| l.steps.iter()).map(|&(_, t)| t as u64).sum();
    let lane_steps: u64 = run.lanes.iter().map(|l| l.steps.len() as u64).sum();
    let mut aggregate = SimResult::from_steps(run.aggregate, taus, cost.per_token_vanilla, Vec::new());
    aggregate.mean_tau = F::from_count(taus) / F::from_count(lane_steps.max(1));
    aggregate.memory_trace = run.memory;
    Ok(BatchedResult {
        batch_size,
        per_sequence,
        aggregate,
        total_pads: run.pads,
        states: run.lanes.into_iter().map(|l| l.state).collect(),
    })
}

/// Layers per pipeline stage: equal chunks with the remainder on the last.
pub fn layer_split(layers: u64, stages: u64) -> Result<Vec<u64>, SimError> {
    if stages == 0 || layers < stages {
        return Err(SimError::Precondition(format!("cannot split {layers} layers over {stages} stages")));
    }
    let chunk = layers / stages;
    let mut split = vec![chunk; stages as usize];
    *split.last_mut().expect("at least one stage") += layers % stages;
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub layers: u64,
    pub required: Bytes,
    pub usable: Bytes,
    pub fits: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum StageVerdict {
    Feasible,
    Infeasible { stage: usize, required: Bytes, usable: Bytes },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DistributedResult<F: Real> {
    pub step_latency: F,
    pub stages: Vec<StageReport>,
    pub verdict: StageVerdict,
    pub sim: SimResult<F>,
}

/// Pipeline run over `cluster.device_count` stages.
///
/// Each stage holds its share of the base model and of the KV cache; the
/// last stage also holds the decoding heads and the tree buffers. A step
/// costs `c0 + c1 · N` of compute split across stages plus one
/// communication cost per stage boundary.
#[allow(clippy::too_many_arguments)]
pub fn simulate_distributed<F: Real>(
    cluster: &ClusterSpec<F>,
    model: &ModelSpec,
    workload: &Workload,
    precision: Precision,
    mask: &TreeMask,
    acc: &AcceptanceModel<F>,
    cost: &CostModel<F>,
    target_tokens: u64,
    seed: u64,
) -> Result<DistributedResult<F>, SimError> {
    cost.validate()?;
    cluster
        .validate()
        .map_err(|e| SimError::Precondition(e.to_string()))?;
    model.validate()?;
    let g = cluster.device_count;
    let split = layer_split(model.hidden_layers, g)?;
    let base = base_model_bytes(model, precision)? as u128;
    let usable = cluster.per_device.usable();
    let last = split.len() - 1;
    let mut stages = Vec::with_capacity(split.len());
    let mut verdict = StageVerdict::Feasible;
    for (stage, &layers) in split.iter().enumerate() {
        let share = (base * layers as u128).div_ceil(model.hidden_layers as u128) as Bytes;
        let slice_model = ModelSpec {
            hidden_layers: layers,
            ..model.clone()
        };
        let mut required = share
            .checked_add(kv_cache_bytes(&slice_model, workload, precision)?)
            .ok_or(crate::memory_model::MemoryError::Overflow("stage memory"))?;
        if stage == last {
            let extra = heads_bytes(mask.levels() as u64, model)?
                .checked_add(buffer_bytes(&mask.shape(), model, workload.batch_size(), precision)?);
            required = extra
                .and_then(|e| e.checked_add(required))
                .ok_or(crate::memory_model::MemoryError::Overflow("stage memory"))?;
        }
        let fits = required <= usable;
        if !fits && verdict == StageVerdict::Feasible {
            verdict = StageVerdict::Infeasible {
                stage,
                required,
                usable,
            };
        }
        stages.push(StageReport {
            stage,
            layers,
            required,
            usable,
            fits,
        });
    }
    let comm = cluster.interconnect_cost.unwrap_or(cost.comm_cost);
    let boundaries = F::from_count(g - 1);
    let step_latency = cost.step_latency(mask.node_count()) + boundaries * comm * (F::one() - cost.pipeline_overlap);
    let run = run_lanes(mask, &Verifier::Sampled(acc.clone()), target_tokens, seed, &[0], None, |_| step_latency)?;
    let sim = lane_result(&run.lanes[0], &run.aggregate, cost.per_token_vanilla);
    Ok(DistributedResult {
        step_latency,
        stages,
        verdict,
        sim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::DeviceBudget;
    use crate::units::GB;
    use approx::assert_relative_eq;

    fn chain(l: usize) -> TreeMask {
        TreeMask::from_paths(1, (1..=l).map(|d| vec![0; d])).unwrap()
    }

    #[test]
    fn certain_chain_closed_form() {
        let cost = CostModel::<f64>::default();
        let acc = AcceptanceModel::uniform(4, 1.0, 1.0).unwrap();
        let r = simulate_generation(&chain(4), &acc, &cost, 100, 7).unwrap();
        assert_relative_eq!(r.per_token_latency, (0.020 + 5.0 * 0.000_05) / 5.0, max_relative = 1e-12);
        assert_eq!(r.mean_tau, 5.0);
        assert_eq!(r.total_tokens, 100);
    }

    #[test]
    fn rejection_only_is_slower_than_vanilla() {
        let cost = CostModel::<f64>::default();
        let m = TreeMask::medusa_vicuna_7b();
        let acc = AcceptanceModel::uniform(4, 0.0, 1.0).unwrap();
        let r = simulate_generation(&m, &acc, &cost, 10, 1).unwrap();
        assert_relative_eq!(r.per_token_latency, 0.020 + 64.0 * 0.000_05, max_relative = 1e-12);
        assert!(r.speedup < 1.0);
        assert_eq!(r.mean_tau, 1.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let cost = CostModel::<f64>::default();
        let m = TreeMask::medusa_vicuna_7b();
        let acc = AcceptanceModel::default();
        let a = simulate_generation(&m, &acc, &cost, 500, 42).unwrap();
        let b = simulate_generation(&m, &acc, &cost, 500, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens, b.tokens);
        let c = simulate_generation(&m, &acc, &cost, 500, 43).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn identical_acceptance_means_no_pads() {
        let cost = CostModel::<f64> {
            batch_scaling: 0.0,
            ..CostModel::default()
        };
        let m = TreeMask::medusa_vicuna_7b();
        let acc = AcceptanceModel::uniform(4, 1.0, 1.0).unwrap();
        let one = simulate_batched(1, &m, &Verifier::Sampled(acc.clone()), &cost, 100, 3, None).unwrap();
        let ten = simulate_batched(10, &m, &Verifier::Sampled(acc), &cost, 100, 3, None).unwrap();
        assert_eq!(ten.total_pads, 0);
        assert_relative_eq!(
            ten.aggregate.tokens_per_second,
            10.0 * one.aggregate.tokens_per_second,
            max_relative = 1e-12
        );
    }

    #[test]
    fn position_counters_track_real_tokens() {
        let cost = CostModel::<f64>::default();
        let m = TreeMask::medusa_vicuna_7b();
        let stub = StubModel::new(AcceptanceModel::default(), 32_000);
        let r = simulate_batched(6, &m, &Verifier::Stub(stub), &cost, 120, 9, None).unwrap();
        assert!(r.total_pads > 0);
        for s in &r.states {
            assert_eq!(s.position_counter as usize, s.real_token_count());
            assert_eq!(s.generated_tokens.len() + PROMPT_TOKENS, s.real_token_count());
            for &p in &s.pad_positions {
                assert_eq!(s.cache[p], super::super::PAD);
            }
        }
    }

    #[test]
    fn memory_trace_grows_with_cache() {
        let cost = CostModel::<f64>::default();
        let m = TreeMask::medusa_vicuna_7b();
        let probe = MemoryProbe {
            model: ModelSpec::vicuna_7b(),
            precision: Precision::Fp16,
        };
        let v = Verifier::Sampled(AcceptanceModel::default());
        let r = simulate_sequence(&m, &v, &cost, 50, 1, 0, Some(&probe)).unwrap();
        assert_eq!(r.memory_trace.len() as u64, r.total_steps);
        assert!(r.memory_trace.iter().all(|s| s.buffer_bytes == 57_856_000));
        assert!(r.memory_trace.windows(2).all(|w| w[1].cache_bytes > w[0].cache_bytes));
    }

    #[test]
    fn layer_splits() {
        assert_eq!(layer_split(80, 8).unwrap(), vec![10; 8]);
        assert_eq!(layer_split(32, 3).unwrap(), vec![10, 10, 12]);
        assert!(layer_split(2, 3).is_err());
    }

    #[test]
    fn distributed_reductions() {
        let cost = CostModel::<f64>::default();
        let m = TreeMask::medusa_vicuna_7b();
        let acc = AcceptanceModel::default();
        let model = ModelSpec::llama2_70b();
        let w = Workload::new(20, 128, 1).unwrap();
        let single = simulate_generation(&m, &acc, &cost, 300, 5).unwrap();

        let one = ClusterSpec::new(1, DeviceBudget::new(200 * GB).unwrap()).unwrap();
        let d1 = simulate_distributed(&one, &model, &w, Precision::Fp16, &m, &acc, &cost, 300, 5).unwrap();
        assert_eq!(d1.sim, single);

        let mut eight = ClusterSpec::new(8, DeviceBudget::new(24 * GB).unwrap()).unwrap();
        eight.interconnect_cost = Some(0.0);
        let d8 = simulate_distributed(&eight, &model, &w, Precision::Fp16, &m, &acc, &cost, 300, 5).unwrap();
        assert_eq!(d8.step_latency, cost.step_latency(64));
        assert!(d8.stages.iter().all(|s| s.layers == 10));
        assert_eq!(d8.verdict, StageVerdict::Feasible);

        let small = ClusterSpec::new(8, DeviceBudget::new(16 * GB).unwrap()).unwrap();
        let bad = simulate_distributed(&small, &model, &w, Precision::Fp16, &m, &acc, &cost, 10, 5).unwrap();
        assert!(matches!(bad.verdict, StageVerdict::Infeasible { stage: 0, .. }));
        assert!(bad.step_latency > cost.step_latency(64));
    }

    #[test]
    fn csv_rows() {
        let cost = CostModel::<f64>::default();
        let r = simulate_generation(&chain(2), &AcceptanceModel::uniform(2, 1.0, 1.0).unwrap(), &cost, 6, 0).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,tau,latency,cumulative_tokens"));
        assert_eq!(lines.count(), 2);
    }
}
