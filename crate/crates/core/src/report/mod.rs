//! Config ingestion and report emission for the command-line front end.
//!
//! A run is described by one JSON document ([`RunConfig`]). Byte sizes in it
//! must carry a unit. Reports are JSON summaries plus CSV tables with a
//! fixed header.

mod config;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::memory_model::{Bytes, MemoryBreakdown, MemoryError, OomReason, Precision, TreeShape};
use crate::optimizer::{optimize, ratio_baseline_plan, BudgetPlan, CacheModelRatio, OptimizerError};
use crate::simulator::{
    layer_split, simulate_batched, simulate_distributed, simulate_sequence, SimError, SimResult, StageReport,
    StageVerdict, Token,
};
use crate::tree::TreeError;
use crate::units::HumanBytes;

pub use config::{
    ByteSize, ClusterConfig, DeviceConfig, MaskCell, ModelConfig, PlannerConfig, RunConfig, SimulationConfig,
    SweepConfig, TreeSource, VerifierKind, WorkloadConfig,
};
pub use sweep::{run_sweep, write_sweep_csv, SweepRow, SWEEP_HEADER};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("empty sweep grid: {0}")]
    EmptyGrid(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

impl ReportError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        ReportError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Valid input that cannot be satisfied, as opposed to a usage error.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            ReportError::Tree(TreeError::Infeasible(_) | TreeError::TargetOutOfRange { .. } | TreeError::TooLarge { .. })
        )
    }
}

fn io_err(path: &Path, e: impl ToString) -> ReportError {
    ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Byte counts rendered for people.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HumanBreakdown {
    pub kv_cache: String,
    pub buffers: String,
    pub heads: String,
    pub base_model: String,
    pub total: String,
    pub usable: String,
}

impl HumanBreakdown {
    fn new(b: &MemoryBreakdown, usable: Bytes) -> Self {
        let h = |x: Bytes| HumanBytes(x).to_string();
        HumanBreakdown {
            kv_cache: h(b.kv_cache),
            buffers: h(b.buffers),
            heads: h(b.heads),
            base_model: h(b.base_model),
            total: h(b.total),
            usable: h(usable),
        }
    }
}

/// Static split regions of a baseline run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Regions {
    pub ratio: String,
    pub cache: Bytes,
    pub model: Bytes,
    pub cache_human: String,
    pub model_human: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanReport {
    pub mode: &'static str,
    pub feasible: bool,
    pub oom_reason: Option<OomReason>,
    pub regions: Option<Regions>,
    pub plan: BudgetPlan,
    pub human: HumanBreakdown,
}

/// Runs the planner, or the fixed-ratio baseline when `baseline` is set.
pub fn plan_report(cfg: &RunConfig, baseline: Option<CacheModelRatio>) -> Result<PlanReport, ReportError> {
    let device = cfg.device()?;
    let model = cfg.model()?;
    let workload = cfg.workload()?;
    let (plan, regions, mode) = match baseline {
        None => (optimize(&device, &model, &workload, &cfg.plan_defaults()?)?, None, "optimize"),
        Some(ratio) => {
            let defaults = cfg.plan_defaults()?;
            let heads = defaults.heads;
            let mask = if defaults.mask.levels() > heads {
                defaults.mask.truncate(heads)
            } else {
                defaults.mask.clone()
            };
            let plan = ratio_baseline_plan(&device, &model, &workload, ratio, defaults.precision, &mask, heads)?;
            let cache = ratio.cache_region(device.capacity);
            let model_region = device.capacity - cache;
            let regions = Regions {
                ratio: ratio.to_string(),
                cache,
                model: model_region,
                cache_human: HumanBytes(cache).to_string(),
                model_human: HumanBytes(model_region).to_string(),
            };
            (plan, Some(regions), "baseline")
        }
    };
    Ok(PlanReport {
        mode,
        feasible: plan.feasible,
        oom_reason: plan.oom_reason,
        regions,
        human: HumanBreakdown::new(&plan.breakdown, plan.usable_bytes),
        plan,
    })
}

/// Summary numbers of one simulated run, without the per-step trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimSummary {
    pub mean_tau: f64,
    pub tokens_per_second: f64,
    pub per_token_latency: f64,
    pub speedup: f64,
    pub total_steps: u64,
    pub total_tokens: u64,
    pub total_time: f64,
}

impl From<&SimResult<f64>> for SimSummary {
    fn from(r: &SimResult<f64>) -> Self {
        SimSummary {
            mean_tau: r.mean_tau,
            tokens_per_second: r.tokens_per_second,
            per_token_latency: r.per_token_latency,
            speedup: r.speedup,
            total_steps: r.total_steps,
            total_tokens: r.total_tokens,
            total_time: r.total_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub devices: u64,
    pub layers_per_stage: Vec<u64>,
    pub step_latency: f64,
    pub stages: Vec<StageReport>,
    pub verdict: StageVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationReport {
    pub mode: &'static str,
    pub seed: u64,
    pub mask: String,
    pub shape: TreeShape,
    pub precision: Precision,
    pub batch_size: usize,
    pub aggregate: SimSummary,
    pub per_sequence: Vec<SimSummary>,
    pub total_pads: u64,
    pub pipeline: Option<PipelineSummary>,
    #[serde(skip)]
    pub trace: SimResult<f64>,
    #[serde(skip)]
    pub streams: Vec<Vec<Token>>,
}

impl SimulationReport {
    /// True when the pipeline did not fit on its devices.
    pub fn infeasible(&self) -> bool {
        matches!(
            self.pipeline,
            Some(PipelineSummary {
                verdict: StageVerdict::Infeasible { .. },
                ..
            })
        )
    }
}

/// One unbatched run by default, `batch` sequences together, or a pipeline
/// over `distributed` devices.
pub fn simulate_report(
    cfg: &RunConfig,
    batch: Option<usize>,
    distributed: Option<u64>,
) -> Result<SimulationReport, ReportError> {
    let mask = cfg.mask()?;
    let verifier = cfg.verifier(mask.levels() as usize);
    let cost = cfg.cost();
    let target = cfg.simulation.target_tokens;
    let precision = cfg.planner.precision;
    let base = |mode, batch_size, trace: SimResult<f64>| SimulationReport {
        mode,
        seed: cfg.seed,
        mask: mask.label(),
        shape: mask.shape(),
        precision,
        batch_size,
        aggregate: SimSummary::from(&trace),
        per_sequence: Vec::new(),
        total_pads: 0,
        pipeline: None,
        streams: Vec::new(),
        trace,
    };
    match (batch, distributed) {
        (Some(_), Some(_)) => Err(ReportError::config("--batch", "cannot be combined with --distributed")),
        (Some(0), None) => Err(ReportError::config("--batch", "must be at least 1")),
        (Some(b), None) => {
            let r = simulate_batched(b, &mask, &verifier, &cost, target, cfg.seed, None)?;
            let mut rep = base("batched", b, r.aggregate.clone());
            rep.per_sequence = r.per_sequence.iter().map(SimSummary::from).collect();
            rep.streams = r.per_sequence.into_iter().map(|s| s.tokens).collect();
            rep.total_pads = r.total_pads;
            Ok(rep)
        }
        (None, Some(g)) => {
            let cluster = cfg.cluster(Some(g))?;
            let model = cfg.model()?;
            let split = layer_split(model.hidden_layers, g)?;
            let r = simulate_distributed(
                &cluster,
                &model,
                &cfg.workload()?,
                precision,
                &mask,
                verifier.acceptance(),
                &cost,
                target,
                cfg.seed,
            )?;
            let mut rep = base("distributed", 1, r.sim.clone());
            rep.streams = vec![r.sim.tokens.clone()];
            rep.pipeline = Some(PipelineSummary {
                devices: g,
                layers_per_stage: split,
                step_latency: r.step_latency,
                stages: r.stages,
                verdict: r.verdict,
            });
            Ok(rep)
        }
        (None, None) => {
            let r = simulate_sequence(&mask, &verifier, &cost, target, cfg.seed, 0, None)?;
            let mut rep = base("single", 1, r);
            rep.streams = vec![rep.trace.tokens.clone()];
            Ok(rep)
        }
    }
}

/// Writes `summary.json`, `steps.csv` and `tokens.csv` into `dir`.
pub fn write_simulation(report: &SimulationReport, dir: &Path) -> Result<(), ReportError> {
    ensure_dir(dir)?;
    write_json(&dir.join("summary.json"), report)?;
    let steps = dir.join("steps.csv");
    let f = fs::File::create(&steps).map_err(|e| io_err(&steps, e))?;
    report.trace.write_csv(f)?;
    let tokens = dir.join("tokens.csv");
    let mut w = csv::Writer::from_path(&tokens)?;
    w.write_record(["sequence", "position", "token"])?;
    for (i, stream) in report.streams.iter().enumerate() {
        for (j, t) in stream.iter().enumerate() {
            w.write_record([i.to_string(), j.to_string(), t.to_string()])?;
        }
    }
    w.flush().map_err(|e| io_err(&tokens, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GB;

    fn cfg(capacity: &str) -> RunConfig {
        let text = format!(
            r#"{{
                "model": {{"preset": "vicuna-7b"}},
                "device": {{"capacity": "{capacity}"}},
                "workload": {{"queries": 20, "max_tokens_per_query": 128}},
                "simulation": {{"target_tokens": 64}}
            }}"#
        );
        RunConfig::from_json(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn plan_default_at_24_gb() {
        let r = plan_report(&cfg("24 gb"), None).unwrap();
        assert!(r.feasible);
        assert_eq!(r.plan.tree.label, "1-10-28-23-2");
    }

    #[test]
    fn baseline_one_to_two_fails_on_model() {
        let r = plan_report(&cfg("16 gb"), Some("1:2".parse().unwrap())).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.oom_reason, Some(OomReason::Model));
        let regions = r.regions.unwrap();
        assert_eq!(regions.cache + regions.model, 16 * GB);
    }

    #[test]
    fn batch_one_matches_single() {
        let c = cfg("24 gb");
        let a = simulate_report(&c, None, None).unwrap();
        let b = simulate_report(&c, Some(1), None).unwrap();
        assert_eq!(a.streams, b.streams);
    }

    #[test]
    fn batch_and_pipeline_conflict() {
        assert!(simulate_report(&cfg("24 gb"), Some(2), Some(2)).is_err());
    }
}
