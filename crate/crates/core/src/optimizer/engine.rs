use std::cmp::Ordering;

use rayon::prelude::*;

use super::{BudgetPlan, Decision, DeviceBudget, OptimizerError, TreeConfig, TreeOrigin};
use crate::memory_model::{
    base_model_bytes, buffer_bytes, heads_bytes, kv_cache_bytes_for_tokens, Bytes, MemoryBreakdown, ModelSpec,
    OomReason, Precision, TreeShape, Workload,
};
use crate::scalar::Real;
use crate::simulator::{expected_tau, AcceptanceModel, CostModel};
use crate::tree::{custom_tree_family, feasible_leaf_range, TreeMask};

/// KV cache for the whole workload: `n · (m + safety_tokens)` tokens.
pub fn compute_min_cache(
    workload: &Workload,
    model: &ModelSpec,
    precision: Precision,
    safety_tokens: u64,
) -> Result<Bytes, OptimizerError> {
    model.validate()?;
    let per_query = workload
        .max_tokens_per_query()
        .checked_add(safety_tokens)
        .ok_or(crate::memory_model::MemoryError::Overflow("sequence length"))?;
    let tokens = workload
        .query_count()
        .checked_mul(per_query)
        .ok_or(crate::memory_model::MemoryError::Overflow("sequence length"))?;
    Ok(kv_cache_bytes_for_tokens(model, tokens, workload.batch_size(), precision)?)
}

/// Memory left after allocating model, cache and buffers in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Availability {
    Fits { remaining: Bytes },
    Overflow { reason: OomReason, shortfall: Bytes },
}

impl Availability {
    pub fn fits(&self) -> bool {
        matches!(self, Availability::Fits { .. })
    }

    pub fn reason(&self) -> Option<OomReason> {
        match self {
            Availability::Fits { .. } => None,
            Availability::Overflow { reason, .. } => Some(*reason),
        }
    }
}

/// Allocates base model plus heads, then the cache, then the tree buffers
/// (none when `shape` is `None`) against the usable budget. The verdict
/// names the first component that does not fit.
pub fn avail_memory(
    device: &DeviceBudget,
    model: &ModelSpec,
    cache_bytes: Bytes,
    shape: Option<&TreeShape>,
    head_count: u32,
    batch: u64,
    precision: Precision,
) -> Result<Availability, OptimizerError> {
    device.validate()?;
    let usable = device.usable() as u128;
    let model_bytes = base_model_bytes(model, precision)? as u128 + heads_bytes(head_count as u64, model)? as u128;
    let buffers = match shape {
        Some(s) => buffer_bytes(s, model, batch, precision)?,
        None => 0,
    };
    let steps = [
        (OomReason::Model, model_bytes),
        (OomReason::Cache, cache_bytes as u128),
        (OomReason::Buffer, buffers as u128),
    ];
    let mut used: u128 = 0;
    for (reason, bytes) in steps {
        used += bytes;
        if used > usable {
            return Ok(Availability::Overflow {
                reason,
                shortfall: u64::try_from(used - usable).unwrap_or(u64::MAX),
            });
        }
    }
    Ok(Availability::Fits {
        remaining: (usable - used) as Bytes,
    })
}

/// Search bounds for [`explore_tree_configs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExploreOptions {
    pub max_nodes: u64,
    /// Leaf-count stride; `None` uses 1 up to 128 nodes and 4 above.
    pub leaf_stride: Option<u64>,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            max_nodes: 64,
            leaf_stride: None,
        }
    }
}

impl ExploreOptions {
    fn stride(&self, nodes: u64) -> u64 {
        self.leaf_stride.unwrap_or(if nodes <= 128 { 1 } else { 4 }).max(1)
    }
}

/// Every buildable `(N, S)` whose buffers fit `budget_remaining`, with `N`
/// from `arity · head_count` up to `options.max_nodes`.
pub fn explore_tree_configs(
    budget_remaining: Bytes,
    head_count: u32,
    arity: u32,
    model: &ModelSpec,
    batch: u64,
    precision: Precision,
    options: &ExploreOptions,
) -> Result<Vec<TreeShape>, OptimizerError> {
    if head_count < 2 {
        return Err(OptimizerError::InvalidInput("tree exploration needs at least 2 heads".into()));
    }
    let floor = arity as u64 * head_count as u64;
    let mut out = Vec::new();
    for nodes in floor..=options.max_nodes {
        let Some((lo, hi)) = feasible_leaf_range(nodes, arity, head_count) else {
            continue;
        };
        let mut any = false;
        for leaves in (lo..=hi).step_by(options.stride(nodes) as usize) {
            let shape = TreeShape {
                nodes,
                leaves,
                levels: head_count as u64,
                arity: arity as u64,
            };
            if buffer_bytes(&shape, model, batch, precision)? > budget_remaining {
                break;
            }
            any = true;
            out.push(shape);
        }
        // the thinnest tree only gets larger with N, so stop at the first
        // size where nothing fits
        if !any {
            break;
        }
    }
    Ok(out)
}

/// A candidate configuration with its evaluated quality.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigResult<F> {
    pub shape: TreeShape,
    pub label: String,
    pub buffer_bytes: Bytes,
    pub mean_tau: F,
    pub speedup: F,
}

/// Highest speedup; ties go to the smaller buffers, then the smaller label.
pub fn select_best_config<F: Real>(results: &[ConfigResult<F>]) -> Result<&ConfigResult<F>, OptimizerError> {
    results
        .iter()
        .min_by(|a, b| {
            b.speedup
                .partial_cmp(&a.speedup)
                .unwrap_or(Ordering::Equal)
                .then(a.buffer_bytes.cmp(&b.buffer_bytes))
                .then_with(|| a.label.cmp(&b.label))
        })
        .ok_or(OptimizerError::EmptyResults)
}

/// Inputs of [`optimize`] that have sensible defaults.
#[derive(Clone, Debug)]
pub struct PlanDefaults<F: Real> {
    pub heads: u32,
    pub min_heads: u32,
    pub mask: TreeMask,
    pub precision: Precision,
    pub safety_tokens: u64,
    pub explore: ExploreOptions,
    pub acceptance: AcceptanceModel<F>,
    pub cost: CostModel<F>,
}

impl<F: Real> Default for PlanDefaults<F> {
    fn default() -> Self {
        PlanDefaults {
            heads: 4,
            min_heads: 2,
            mask: TreeMask::medusa_vicuna_7b(),
            precision: Precision::Fp16,
            safety_tokens: 0,
            explore: ExploreOptions::default(),
            acceptance: AcceptanceModel::default(),
            cost: CostModel::default(),
        }
    }
}

impl<F: Real> PlanDefaults<F> {
    fn validate(&self) -> Result<(), OptimizerError> {
        if self.min_heads < 2 {
            return Err(OptimizerError::InvalidInput("min_heads must be at least 2".into()));
        }
        if self.heads < self.min_heads {
            return Err(OptimizerError::InvalidInput(format!(
                "default heads {} are below the floor {}",
                self.heads, self.min_heads
            )));
        }
        if self.mask.levels() < self.heads {
            return Err(OptimizerError::InvalidInput(format!(
                "default mask has {} levels, fewer than the {} default heads",
                self.mask.levels(),
                self.heads
            )));
        }
        self.acceptance.validate()?;
        self.cost.validate()?;
        Ok(())
    }

    /// The default mask cut to `heads` levels.
    fn mask_for(&self, heads: u32) -> TreeMask {
        if self.mask.levels() == heads {
            self.mask.clone()
        } else {
            self.mask.truncate(heads)
        }
    }

    fn evaluate(&self, mask: &TreeMask) -> Result<(F, F), OptimizerError> {
        let acc = self.acceptance.for_levels(mask.levels() as usize);
        let tau = expected_tau(mask, &acc)?;
        Ok((tau, self.cost.expected_speedup(mask.node_count(), tau)))
    }
}

struct Planner<'a, F: Real> {
    device: &'a DeviceBudget,
    model: &'a ModelSpec,
    workload: &'a Workload,
    defaults: &'a PlanDefaults<F>,
    log: Vec<Decision>,
}

impl<F: Real> Planner<'_, F> {
    fn batch(&self) -> u64 {
        self.workload.batch_size()
    }

    fn cache(&self, precision: Precision) -> Result<Bytes, OptimizerError> {
        compute_min_cache(self.workload, self.model, precision, self.defaults.safety_tokens)
    }

    fn fits(&self, mask: &TreeMask, heads: u32, precision: Precision) -> Result<Availability, OptimizerError> {
        avail_memory(
            self.device,
            self.model,
            self.cache(precision)?,
            Some(&mask.shape()),
            heads,
            self.batch(),
            precision,
        )
    }

    fn plan(
        &self,
        mask: TreeMask,
        origin: TreeOrigin,
        heads: u32,
        precision: Precision,
        quality: Option<(F, F)>,
    ) -> Result<BudgetPlan, OptimizerError> {
        let cache = self.cache(precision)?;
        let breakdown = MemoryBreakdown::compose(
            cache,
            buffer_bytes(&mask.shape(), self.model, self.batch(), precision)?,
            heads_bytes(heads as u64, self.model)?,
            base_model_bytes(self.model, precision)?,
        )?;
        let usable = self.device.usable();
        let verdict = self.fits(&mask, heads, precision)?;
        Ok(BudgetPlan {
            cache_bytes: cache,
            head_count: heads,
            tree: TreeConfig {
                label: mask.label(),
                shape: mask.shape(),
                origin,
            },
            precision,
            breakdown,
            usable_bytes: usable,
            feasible: verdict.fits() && breakdown.total <= usable,
            oom_reason: verdict.reason(),
            expected_tau: quality.map(|q| q.0.as_f64()),
            expected_speedup: quality.map(|q| q.1.as_f64()),
            decisions_log: self.log.clone(),
            mask: Some(mask),
        })
    }

    /// Budget left for buffers after model, heads and cache, if any.
    fn buffer_budget(&self, heads: u32, precision: Precision) -> Result<Option<Bytes>, OptimizerError> {
        let v = avail_memory(
            self.device,
            self.model,
            self.cache(precision)?,
            None,
            heads,
            self.batch(),
            precision,
        )?;
        Ok(match v {
            Availability::Fits { remaining } => Some(remaining),
            Availability::Overflow { .. } => None,
        })
    }

    fn explore(&mut self, heads: u32, precision: Precision) -> Result<Option<BudgetPlan>, OptimizerError> {
        let budget = self.buffer_budget(heads, precision)?;
        let arity = self.defaults.mask.arity();
        let shapes = match budget {
            Some(b) => explore_tree_configs(b, heads, arity, self.model, self.batch(), precision, &self.defaults.explore)?,
            None => Vec::new(),
        };
        let masks: Vec<TreeMask> = shapes
            .iter()
            .filter_map(|s| {
                let fam = custom_tree_family(s.nodes, arity, heads);
                fam.iter().find(|t| t.leaf_count() as u64 == s.leaves).cloned()
            })
            .collect();
        let results: Vec<ConfigResult<F>> = masks
            .par_iter()
            .map(|m| {
                let (tau, speedup) = self.defaults.evaluate(m)?;
                Ok(ConfigResult {
                    shape: m.shape(),
                    label: m.label(),
                    buffer_bytes: buffer_bytes(&m.shape(), self.model, self.batch(), precision)?,
                    mean_tau: tau,
                    speedup,
                })
            })
            .collect::<Result<_, OptimizerError>>()?;
        let best = if results.is_empty() {
            None
        } else {
            Some(select_best_config(&results)?.clone())
        };
        self.log.push(Decision::TreeExploration {
            heads,
            precision,
            budget,
            candidates: results.len(),
            chosen: best.as_ref().map(|b| b.label.clone()),
        });
        match best {
            None => Ok(None),
            Some(b) => {
                let mask = masks
                    .into_iter()
                    .find(|m| m.shape() == b.shape)
                    .expect("selected config comes from the candidate list");
                self.plan(mask, TreeOrigin::Custom, heads, precision, Some((b.mean_tau, b.speedup)))
                    .map(Some)
            }
        }
    }
}

/// Finds a configuration that fits `device`.
///
/// 1. The default heads, mask and precision with the minimum cache.
/// 2. Otherwise custom masks at the current head count.
/// 3. Otherwise one head fewer at a time, down to `min_heads`, probing the
///    default mask cut to that depth; on a fit, back to step 2.
/// 4. Otherwise the next coarser precision, keeping the head count, and
///    back to step 2.
///
/// When nothing fits at the coarsest precision the returned plan is marked
/// infeasible and names the component that overflows first.
pub fn optimize<F: Real>(
    device: &DeviceBudget,
    model: &ModelSpec,
    workload: &Workload,
    defaults: &PlanDefaults<F>,
) -> Result<BudgetPlan, OptimizerError> {
    device.validate()?;
    model.validate()?;
    defaults.validate()?;
    let mut p = Planner {
        device,
        model,
        workload,
        defaults,
        log: Vec::new(),
    };
    let mut precision = defaults.precision;
    let mut heads = defaults.heads;

    p.log.push(Decision::MinCache {
        precision,
        bytes: p.cache(precision)?,
    });
    let default_mask = defaults.mask_for(heads);
    let verdict = p.fits(&default_mask, heads, precision)?;
    p.log.push(Decision::Defaults {
        heads,
        label: default_mask.label(),
        fits: verdict.fits(),
        reason: verdict.reason(),
    });
    if verdict.fits() {
        let origin = if default_mask == defaults.mask {
            TreeOrigin::Default
        } else {
            TreeOrigin::Truncated
        };
        let quality = defaults.evaluate(&default_mask)?;
        return p.plan(default_mask, origin, heads, precision, Some(quality));
    }

    loop {
        if let Some(plan) = p.explore(heads, precision)? {
            return Ok(plan);
        }
        let mut reduced = false;
        if heads == defaults.min_heads {
            let v = p.fits(&defaults.mask_for(heads), heads, precision)?;
            p.log.push(Decision::HeadReduction {
                from: heads,
                to: heads,
                fits: false,
                reason: v.reason(),
            });
        }
        while heads > defaults.min_heads {
            let to = heads - 1;
            let v = p.fits(&defaults.mask_for(to), to, precision)?;
            p.log.push(Decision::HeadReduction {
                from: heads,
                to,
                fits: v.fits(),
                reason: v.reason(),
            });
            heads = to;
            if v.fits() {
                reduced = true;
                break;
            }
        }
        if reduced {
            continue;
        }
        match precision.next_lower() {
            Some(lower) => {
                log::info!("quantizing from {precision} to {lower}");
                p.log.push(Decision::Quantization {
                    from: precision,
                    to: lower,
                });
                precision = lower;
                p.log.push(Decision::MinCache {
                    precision,
                    bytes: p.cache(precision)?,
                });
            }
            None => break,
        }
    }

    // nothing fits: report the smallest tree at the floor
    let floor_mask = defaults.mask_for(heads);
    let thinnest = (defaults.mask.arity() as u64 * heads as u64..=defaults.explore.max_nodes.max(heads as u64 + 1))
        .find_map(|n| {
            let fam = custom_tree_family(n, defaults.mask.arity(), heads);
            fam.first().cloned()
        });
    let mask = thinnest.unwrap_or(floor_mask);
    let verdict = p.fits(&mask, heads, precision)?;
    let reason = verdict.reason().unwrap_or(OomReason::Buffer);
    p.log.push(Decision::Infeasible { reason });
    let mut plan = p.plan(mask, TreeOrigin::Custom, heads, precision, None)?;
    plan.feasible = false;
    plan.oom_reason = Some(reason);
    Ok(plan)
}

/// Checks that a decisions log follows the cascade: defaults first,
/// exploration only after a failed default or a change of heads or
/// precision, head reduction only after a failed exploration, and
/// quantization only once head reduction has reached its floor without a
/// fit.
pub fn check_decision_order(log: &[Decision], min_heads: u32) -> Result<(), String> {
    #[derive(Clone, Copy, PartialEq, Debug)]
    enum Prev {
        Start,
        MinCache,
        DefaultsFailed,
        DefaultsFit,
        ExploreFailed,
        ExploreFound,
        ReduceFailed { at_floor: bool },
        ReduceFit,
        Quantized,
        QuantCache,
        Done,
    }
    let mut prev = Prev::Start;
    let mut floor_reached = false;
    for (i, d) in log.iter().enumerate() {
        let err = |why: &str| Err(format!("entry {i} ({}): {why} after {prev:?}", d.stage()));
        prev = match (prev, d) {
            (Prev::Start, Decision::MinCache { .. }) => Prev::MinCache,
            (Prev::Quantized, Decision::MinCache { .. }) => Prev::QuantCache,
            (Prev::MinCache, Decision::Defaults { fits, .. }) => {
                if *fits {
                    Prev::DefaultsFit
                } else {
                    Prev::DefaultsFailed
                }
            }
            (Prev::DefaultsFailed | Prev::ReduceFit | Prev::QuantCache, Decision::TreeExploration { candidates, .. }) => {
                floor_reached = false;
                if *candidates > 0 {
                    Prev::ExploreFound
                } else {
                    Prev::ExploreFailed
                }
            }
            (Prev::ExploreFailed | Prev::ReduceFailed { at_floor: false }, Decision::HeadReduction { from, to, fits, .. }) => {
                if to > from || (from == to && *fits) {
                    return err("head count must not grow");
                }
                if *fits {
                    Prev::ReduceFit
                } else {
                    let at_floor = to == from || *to == min_heads;
                    floor_reached = at_floor;
                    Prev::ReduceFailed { at_floor }
                }
            }
            (Prev::ReduceFailed { at_floor: true }, Decision::Quantization { from, to }) => {
                if !floor_reached || to >= from {
                    return err("quantization must follow exhausted head reduction and lower precision");
                }
                Prev::Quantized
            }
            (Prev::ReduceFailed { at_floor: true }, Decision::Infeasible { .. }) => Prev::Done,
            (_, _) => return err("out of order"),
        };
    }
    match prev {
        Prev::DefaultsFit | Prev::ExploreFound | Prev::Done => Ok(()),
        other => Err(format!("log ends in state {other:?}")),
    }
}
