use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{MaskCell, ReportError, RunConfig};
use crate::memory_model::{base_model_bytes, buffer_bytes, heads_bytes, OomReason, Precision, Workload};
use crate::optimizer::{avail_memory, compute_min_cache};
use crate::simulator::{expected_tau, simulate_batched, Verifier};
use crate::tree::{build_custom_tree, custom_tree_family, TreeMask};
use crate::units::{to_mb, to_mib};

/// Column order of the sweep CSV.
pub const SWEEP_HEADER: [&str; 22] = [
    "heads",
    "mask",
    "nodes",
    "leaves",
    "cache_tokens",
    "batch",
    "precision",
    "feasible",
    "oom_reason",
    "buffer_bytes",
    "buffer_mib",
    "chat_buffer_bytes",
    "chat_buffer_mib",
    "chat_buffer_mb",
    "cache_bytes",
    "model_bytes",
    "total_bytes",
    "mean_tau",
    "expected_tau",
    "per_token_latency_ms",
    "tokens_per_second",
    "speedup",
];

/// One grid cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub heads: u32,
    pub mask: String,
    pub nodes: u64,
    pub leaves: u64,
    pub cache_tokens: u64,
    pub batch: u64,
    pub precision: Precision,
    pub feasible: bool,
    pub oom_reason: Option<OomReason>,
    pub buffer_bytes: u64,
    pub buffer_mib: f64,
    pub chat_buffer_bytes: u64,
    pub chat_buffer_mib: f64,
    pub chat_buffer_mb: f64,
    pub cache_bytes: u64,
    pub model_bytes: u64,
    pub total_bytes: u64,
    pub mean_tau: f64,
    pub expected_tau: f64,
    pub per_token_latency_ms: f64,
    pub tokens_per_second: f64,
    pub speedup: f64,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>, ReportError> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(ReportError::EmptyGrid(format!("`sweep.{name}` has no values"))),
        Some(v) => Ok(v.clone()),
    }
}

fn best_of_size(cfg: &RunConfig, nodes: u64, arity: u32, levels: u32) -> Result<TreeMask, ReportError> {
    let acc = cfg.acceptance().for_levels(levels as usize);
    let cost = cfg.cost();
    let family = custom_tree_family(nodes, arity, levels);
    let mut best: Option<(f64, &TreeMask)> = None;
    for m in family.iter() {
        let s = cost.expected_speedup(m.node_count(), expected_tau(m, &acc)?);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, m));
        }
    }
    best.map(|(_, m)| m.clone()).ok_or_else(|| {
        ReportError::config(
            "sweep.mask",
            format!("no tree of {nodes} nodes with {levels} levels at arity {arity}"),
        )
    })
}

fn resolve_mask(cfg: &RunConfig, base: &TreeMask, cell: Option<&MaskCell>, heads: u32) -> Result<TreeMask, ReportError> {
    let arity = base.arity();
    match cell {
        None if base.levels() >= heads => Ok(if base.levels() == heads { base.clone() } else { base.truncate(heads) }),
        None => Err(ReportError::config(
            "sweep.heads",
            format!("the configured mask has {} levels, fewer than {heads}", base.levels()),
        )),
        Some(c) => {
            let levels = c.levels.unwrap_or(heads);
            match c.leaves {
                Some(s) => Ok(build_custom_tree(c.nodes, s, arity, levels)?),
                None => best_of_size(cfg, c.nodes, arity, levels),
            }
        }
    }
}

/// Evaluates every cell of the configured grid. Rows come back in grid
/// order whatever order the cells finished in.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, ReportError> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ReportError::EmptyGrid("config has no `sweep` section".into()))?;
    let heads_given = grid.heads.is_some();
    let heads = axis("heads", &grid.heads, cfg.planner.heads)?;
    let masks: Vec<Option<MaskCell>> = match &grid.mask {
        None => vec![None],
        Some(v) if v.is_empty() => return Err(ReportError::EmptyGrid("`sweep.mask` has no values".into())),
        Some(v) => v.iter().cloned().map(Some).collect(),
    };
    if heads_given {
        if let Some(c) = masks.iter().flatten().find(|c| c.levels.is_some()) {
            return Err(ReportError::config(
                "sweep.mask.levels",
                format!("mask of {} nodes fixes its levels while `sweep.heads` is also set", c.nodes),
            ));
        }
    }
    let cache = axis("cache", &grid.cache, cfg.workload.max_tokens_per_query)?;
    let batch = axis("batch", &grid.batch, cfg.workload.batch_size)?;
    let precision = axis("precision", &grid.precision, cfg.planner.precision)?;
    let base_mask = cfg.mask()?;

    let mut cells = Vec::new();
    for (hi, &h) in heads.iter().enumerate() {
        for (mi, m) in masks.iter().enumerate() {
            for (ci, &c) in cache.iter().enumerate() {
                for (bi, &b) in batch.iter().enumerate() {
                    for (pi, &p) in precision.iter().enumerate() {
                        cells.push(((hi, mi, ci, bi, pi), h, m.as_ref(), c, b, p));
                    }
                }
            }
        }
    }
    let mut rows: Vec<_> = cells
        .par_iter()
        .map(|&(key, h, m, c, b, p)| {
            let mask = resolve_mask(cfg, &base_mask, m, h)?;
            Ok((key, evaluate(cfg, &mask, c, b, p)?))
        })
        .collect::<Result<_, ReportError>>()?;
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn evaluate(cfg: &RunConfig, mask: &TreeMask, cache_tokens: u64, batch: u64, p: Precision) -> Result<SweepRow, ReportError> {
    let model = cfg.model()?;
    let device = cfg.device()?;
    let workload = Workload::new(cfg.workload.queries, cache_tokens, batch)?;
    let heads = mask.levels();
    let shape = mask.shape();
    let cache_bytes = compute_min_cache(&workload, &model, p, cfg.planner.safety_tokens)?;
    let buffers = buffer_bytes(&shape, &model, batch, p)?;
    let model_bytes = base_model_bytes(&model, p)? + heads_bytes(heads as u64, &model)?;
    let verdict = avail_memory(&device, &model, cache_bytes, Some(&shape), heads, batch, p)?;
    let chat = buffers * workload.query_count();
    let acc = cfg.acceptance().for_levels(heads as usize);
    let verifier = match cfg.verifier(heads as usize) {
        Verifier::Sampled(_) => Verifier::Sampled(acc.clone()),
        v => v,
    };
    let cost = cfg.cost();
    let sim = simulate_batched(
        batch as usize,
        mask,
        &verifier,
        &cost,
        cfg.simulation.target_tokens,
        cfg.seed,
        None,
    )?;
    Ok(SweepRow {
        heads,
        mask: mask.label(),
        nodes: shape.nodes,
        leaves: shape.leaves,
        cache_tokens,
        batch,
        precision: p,
        feasible: verdict.fits(),
        oom_reason: verdict.reason(),
        buffer_bytes: buffers,
        buffer_mib: to_mib(buffers),
        chat_buffer_bytes: chat,
        chat_buffer_mib: to_mib(chat),
        chat_buffer_mb: to_mb(chat),
        cache_bytes,
        model_bytes,
        total_bytes: model_bytes + cache_bytes + buffers,
        mean_tau: sim.aggregate.mean_tau,
        expected_tau: expected_tau(mask, &acc)?,
        per_token_latency_ms: sim.aggregate.per_token_latency * 1e3,
        tokens_per_second: sim.aggregate.tokens_per_second,
        speedup: sim.aggregate.speedup,
    })
}

/// CSV with [`SWEEP_HEADER`] and one line per row.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
