use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use specbudget::memory_model::buffer_bytes;
use specbudget::optimizer::CacheModelRatio;
use specbudget::report::{
    ensure_dir, plan_report, run_sweep, simulate_report, write_json, write_simulation, write_sweep_csv, ReportError,
    RunConfig,
};
use specbudget::tree::{build_custom_tree, full_tree, prune_full_tree, prune_in_place, PruneSchedule};
use specbudget::units::HumanBytes;
use specbudget::{ModelSpec, Precision, TreeMask};

#[derive(Parser)]
#[command(name = "specbudget", version, about = "Memory planning and simulation for tree-based speculative decoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan a configuration that fits the device.
    Plan {
        #[command(flatten)]
        run: RunArgs,
        /// Use a fixed cache:model split instead of the planner, e.g. `1:2`.
        #[arg(long, value_name = "X:Y")]
        baseline_ratio: Option<String>,
    },
    /// Simulate decoding and write per-step traces.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        batch: Option<usize>,
        /// Pipeline the model over this many devices.
        #[arg(long, value_name = "G")]
        distributed: Option<u64>,
    },
    /// Evaluate the grid in the config's `sweep` section.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build, prune and inspect tree masks.
    Tree {
        #[command(subcommand)]
        action: TreeCmd,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    /// JSON list of rank paths.
    Paths,
    /// JSON nodes with parent, level and rank.
    Native,
}

#[derive(Args)]
struct MaskOut {
    #[arg(long, value_enum, default_value = "paths")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TreeCmd {
    /// Custom tree with exactly N nodes and S leaves.
    Build {
        nodes: u64,
        leaves: u64,
        #[arg(long, default_value_t = 10)]
        arity: u32,
        #[arg(long, default_value_t = 4)]
        levels: u32,
        #[command(flatten)]
        out: MaskOut,
    },
    /// Remove the least likely leaves until N nodes remain.
    Prune {
        /// Mask file, or `medusa` for the bundled mask.
        mask: String,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        arity: Option<u32>,
        #[command(flatten)]
        out: MaskOut,
    },
    /// Full k-ary tree, optionally thinned level by level.
    Full {
        #[arg(long, default_value_t = 10)]
        arity: u32,
        #[arg(long, default_value_t = 4)]
        levels: u32,
        /// Apply the default per-level prune rate.
        #[arg(long)]
        prune: bool,
        #[command(flatten)]
        out: MaskOut,
    },
    /// Print label, shape and buffer size.
    Stats {
        #[arg(default_value = "medusa")]
        mask: String,
        #[arg(long)]
        arity: Option<u32>,
        #[arg(long, default_value = "vicuna-7b")]
        model: String,
        #[arg(long, default_value = "fp16")]
        precision: String,
        #[arg(long, default_value_t = 1)]
        batch: u64,
    },
    /// Convert a mask between formats.
    Export {
        #[arg(default_value = "medusa")]
        mask: String,
        #[arg(long)]
        arity: Option<u32>,
        #[command(flatten)]
        out: MaskOut,
    },
}

enum Failure {
    Usage(String),
    Infeasible(String),
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        if e.is_infeasible() {
            Failure::Infeasible(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<specbudget::TreeError> for Failure {
    fn from(e: specbudget::TreeError) -> Self {
        ReportError::from(e).into()
    }
}

type Outcome = Result<bool, Failure>;

fn load(run: &RunArgs) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    let out = run
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&out)?;
    Ok((cfg, out))
}

fn cmd_plan(run: &RunArgs, ratio: Option<&str>) -> Outcome {
    let (cfg, out) = load(run)?;
    let ratio = ratio
        .map(|r| r.parse::<CacheModelRatio>())
        .transpose()
        .map_err(|e| Failure::Usage(format!("--baseline-ratio: {e}")))?;
    let report = plan_report(&cfg, ratio)?;
    let path = out.join("plan.json");
    write_json(&path, &report)?;
    let p = &report.plan;
    if report.feasible {
        println!(
            "feasible: {} heads, tree {}, {}, total {} of {} usable",
            p.head_count, p.tree.label, p.precision, report.human.total, report.human.usable
        );
    } else {
        let reason = p.oom_reason.map_or("unknown".to_string(), |r| r.to_string());
        println!("infeasible: {reason} does not fit ({} needed)", report.human.total);
    }
    println!("wrote {}", path.display());
    Ok(report.feasible)
}

fn cmd_simulate(run: &RunArgs, batch: Option<usize>, distributed: Option<u64>) -> Outcome {
    let (cfg, out) = load(run)?;
    let report = simulate_report(&cfg, batch, distributed)?;
    write_simulation(&report, &out)?;
    let a = &report.aggregate;
    println!(
        "{} run of {}: mean tau {:.4}, {:.1} tokens/s, speedup {:.3}",
        report.mode, report.mask, a.mean_tau, a.tokens_per_second, a.speedup
    );
    if let Some(p) = &report.pipeline {
        println!("layers per stage: {:?}", p.layers_per_stage);
    }
    println!("wrote {}", out.display());
    Ok(!report.infeasible())
}

fn cmd_sweep(run: &RunArgs) -> Outcome {
    let (cfg, out) = load(run)?;
    let rows = run_sweep(&cfg)?;
    let path = out.join("sweep.csv");
    let f = fs::File::create(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    write_sweep_csv(&rows, f)?;
    println!("{} rows, wrote {}", rows.len(), path.display());
    Ok(true)
}

fn load_mask(spec: &str, arity: Option<u32>) -> Result<TreeMask, Failure> {
    if spec == "medusa" {
        return Ok(TreeMask::medusa_vicuna_7b());
    }
    TreeMask::load(Path::new(spec), arity).map_err(|e| Failure::Usage(e.to_string()))
}

fn emit(mask: &TreeMask, out: &MaskOut) -> Result<(), Failure> {
    let mut text = match out.format {
        Format::Paths => mask.to_path_list(),
        Format::Native => mask.to_native_json(),
    };
    text.push('\n');
    match &out.out {
        Some(p) => {
            fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            eprintln!("{} ({} nodes, {} leaves) -> {}", mask.label(), mask.node_count(), mask.leaf_count(), p.display());
        }
        None => match io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => return Err(Failure::Usage(format!("stdout: {e}"))),
            _ => {}
        },
    }
    Ok(())
}

fn cmd_tree(action: &TreeCmd) -> Outcome {
    match action {
        TreeCmd::Build {
            nodes,
            leaves,
            arity,
            levels,
            out,
        } => emit(&build_custom_tree(*nodes, *leaves, *arity, *levels)?, out)?,
        TreeCmd::Prune { mask, nodes, arity, out } => {
            let m = load_mask(mask, *arity)?;
            emit(&prune_in_place(&m, *nodes)?, out)?
        }
        TreeCmd::Full {
            arity,
            levels,
            prune,
            out,
        } => {
            let m = if *prune {
                prune_full_tree(*arity, *levels, &PruneSchedule::<f64>::default())?
            } else {
                full_tree(*arity, *levels)?
            };
            emit(&m, out)?
        }
        TreeCmd::Stats {
            mask,
            arity,
            model,
            precision,
            batch,
        } => {
            let m = load_mask(mask, *arity)?;
            let spec = ModelSpec::preset(model).ok_or_else(|| Failure::Usage(format!("unknown model preset `{model}`")))?;
            let p: Precision = precision.parse().map_err(Failure::Usage)?;
            let shape = m.shape();
            let buffers = buffer_bytes(&shape, &spec, *batch, p).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("label: {}", m.label());
            println!("{} nodes, {} leaves", shape.nodes, shape.leaves);
            println!("(N, S, l) = ({}, {}, {})", shape.nodes, shape.leaves, shape.levels);
            println!("arity: {}", shape.arity);
            println!("buffers ({p}, batch {batch}): {buffers} B = {}", HumanBytes(buffers));
        }
        TreeCmd::Export { mask, arity, out } => emit(&load_mask(mask, *arity)?, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.cmd {
        Cmd::Plan { run, baseline_ratio } => cmd_plan(run, baseline_ratio.as_deref()),
        Cmd::Simulate {
            run,
            batch,
            distributed,
        } => cmd_simulate(run, *batch, *distributed),
        Cmd::Sweep { run } => cmd_sweep(run),
        Cmd::Tree { action } => cmd_tree(action),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible(msg)) => {
            eprintln!("infeasible: {msg}");
            ExitCode::from(2)
        }
    }
}
