use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::memory_model::{Bytes, ModelSpec, Precision, Workload};
use crate::optimizer::{ClusterSpec, DeviceBudget, ExploreOptions, PlanDefaults, DEFAULT_SAFETY_MARGIN};
use crate::simulator::{AcceptanceModel, CostModel, StubModel, Verifier};
use crate::tree::{build_custom_tree, TreeMask};
use crate::units::parse_bytes;

/// A byte quantity written with an explicit unit, e.g. `"24 gb"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ByteSize(pub Bytes);

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = ByteSize;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a string with a unit such as \"24 gb\" or \"512 mib\"")
            }

            fn visit_str<E: de::Error>(self, s: &str) -> Result<ByteSize, E> {
                parse_bytes(s).map(ByteSize).map_err(E::custom)
            }
        }
        d.deserialize_str(V)
    }
}

/// Model geometry, either a named preset or every field spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub hidden_layers: Option<u64>,
    #[serde(default)]
    pub kv_heads: Option<u64>,
    #[serde(default)]
    pub head_dim: Option<u64>,
    #[serde(default)]
    pub vocab_size: Option<u64>,
    #[serde(default)]
    pub param_count: Option<u64>,
    #[serde(default)]
    pub head_size: Option<ByteSize>,
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<ModelSpec, ReportError> {
        let base = match &self.preset {
            Some(name) => Some(
                ModelSpec::preset(name)
                    .ok_or_else(|| ReportError::config("model.preset", format!("unknown preset `{name}`")))?,
            ),
            None => None,
        };
        let pick = |field: &str, v: Option<u64>, preset: Option<u64>| {
            v.or(preset)
                .ok_or_else(|| ReportError::config(&format!("model.{field}"), "missing field (or give a preset)"))
        };
        let spec = ModelSpec {
            hidden_layers: pick("hidden_layers", self.hidden_layers, base.as_ref().map(|b| b.hidden_layers))?,
            kv_heads: pick("kv_heads", self.kv_heads, base.as_ref().map(|b| b.kv_heads))?,
            head_dim: pick("head_dim", self.head_dim, base.as_ref().map(|b| b.head_dim))?,
            vocab_size: pick("vocab_size", self.vocab_size, base.as_ref().map(|b| b.vocab_size))?,
            param_count: pick("param_count", self.param_count, base.as_ref().map(|b| b.param_count))?,
            per_head_bytes: self
                .head_size
                .map(|b| b.0)
                .or(base.as_ref().map(|b| b.per_head_bytes))
                .unwrap_or(ModelSpec::DEFAULT_PER_HEAD_BYTES),
        };
        spec.validate().map_err(|e| ReportError::config("model", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub capacity: ByteSize,
    #[serde(default = "default_margin")]
    pub safety_margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_SAFETY_MARGIN
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub device_count: u64,
    #[serde(default)]
    pub interconnect_cost: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub queries: u64,
    pub max_tokens_per_query: u64,
    #[serde(default = "one")]
    pub batch_size: u64,
}

fn one() -> u64 {
    1
}

/// Where the mask comes from. Exactly one key may be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum TreeSource {
    /// `"medusa_vicuna_7b"` is the only bundled mask.
    Builtin(String),
    PathList {
        path: PathBuf,
        #[serde(default)]
        arity: Option<u32>,
    },
    Custom {
        nodes: u64,
        leaves: u64,
        arity: u32,
        levels: u32,
    },
}

impl Default for TreeSource {
    fn default() -> Self {
        TreeSource::Builtin("medusa_vicuna_7b".into())
    }
}

impl TreeSource {
    pub fn load(&self) -> Result<TreeMask, ReportError> {
        match self {
            TreeSource::Builtin(name) => match name.as_str() {
                "medusa_vicuna_7b" | "medusa" => Ok(TreeMask::medusa_vicuna_7b()),
                other => Err(ReportError::config("tree.builtin", format!("unknown mask `{other}`"))),
            },
            TreeSource::PathList { path, arity } => {
                TreeMask::load(path, *arity).map_err(|e| ReportError::config("tree.path_list", e.to_string()))
            }
            TreeSource::Custom {
                nodes,
                leaves,
                arity,
                levels,
            } => Ok(build_custom_tree(*nodes, *leaves, *arity, *levels)?),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    #[default]
    Sampled,
    Stub,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_target")]
    pub target_tokens: u64,
    #[serde(default)]
    pub verifier: VerifierKind,
}

fn default_target() -> u64 {
    256
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            target_tokens: default_target(),
            verifier: VerifierKind::Sampled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    #[serde(default = "four")]
    pub heads: u32,
    #[serde(default = "two")]
    pub min_heads: u32,
    #[serde(default = "fp16")]
    pub precision: Precision,
    #[serde(default)]
    pub safety_tokens: u64,
    #[serde(default = "max_nodes")]
    pub max_nodes: u64,
}

fn four() -> u32 {
    4
}
fn two() -> u32 {
    2
}
fn fp16() -> Precision {
    Precision::Fp16
}
fn max_nodes() -> u64 {
    ExploreOptions::default().max_nodes
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            heads: four(),
            min_heads: two(),
            precision: fp16(),
            safety_tokens: 0,
            max_nodes: max_nodes(),
        }
    }
}

/// One grid axis value for the mask dimension of a sweep.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskCell {
    pub nodes: u64,
    /// Without a leaf count the best custom tree of that size is used.
    #[serde(default)]
    pub leaves: Option<u64>,
    #[serde(default)]
    pub levels: Option<u32>,
}

/// Sweep axes. A missing axis takes the run's base value; an empty list is
/// an error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub heads: Option<Vec<u32>>,
    #[serde(default)]
    pub mask: Option<Vec<MaskCell>>,
    /// Tokens per query, which sets the KV cache.
    #[serde(default)]
    pub cache: Option<Vec<u64>>,
    #[serde(default)]
    pub batch: Option<Vec<u64>>,
    #[serde(default)]
    pub precision: Option<Vec<Precision>>,
}

/// A complete run description as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub device: DeviceConfig,
    #[serde(default)]
    pub cluster: Option<ClusterConfig>,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub tree: TreeSource,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub acceptance: Option<AcceptanceModel<f64>>,
    #[serde(default)]
    pub cost: Option<CostModel<f64>>,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and checks a config. Relative mask paths resolve against
    /// `base_dir`, and referenced files must exist.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<RunConfig, ReportError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ReportError::Config {
                field: path,
                message: inner.to_string(),
            }
        })?;
        if let TreeSource::PathList { path, .. } = &mut cfg.tree {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
            if !path.is_file() {
                return Err(ReportError::config(
                    "tree.path_list.path",
                    format!("{} does not exist", path.display()),
                ));
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReportError::config("", format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, dir)
    }

    fn check(&self) -> Result<(), ReportError> {
        self.model.resolve()?;
        self.device()?;
        self.workload()?;
        if let Some(a) = &self.acceptance {
            a.validate().map_err(|e| ReportError::config("acceptance", e.to_string()))?;
        }
        if let Some(c) = &self.cost {
            c.validate().map_err(|e| ReportError::config("cost", e.to_string()))?;
        }
        if self.simulation.target_tokens == 0 {
            return Err(ReportError::config("simulation.target_tokens", "must be positive"));
        }
        if let Some(c) = &self.cluster {
            self.cluster(Some(c.device_count))?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelSpec, ReportError> {
        self.model.resolve()
    }

    pub fn device(&self) -> Result<DeviceBudget, ReportError> {
        DeviceBudget::with_margin(self.device.capacity.0, self.device.safety_margin)
            .map_err(|e| ReportError::config("device", e.to_string()))
    }

    /// The pipeline cluster; `devices` overrides the configured count.
    pub fn cluster(&self, devices: Option<u64>) -> Result<ClusterSpec<f64>, ReportError> {
        let count = devices.or(self.cluster.map(|c| c.device_count)).unwrap_or(1);
        let mut c =
            ClusterSpec::new(count, self.device()?).map_err(|e| ReportError::config("cluster", e.to_string()))?;
        c.interconnect_cost = self.cluster.and_then(|c| c.interconnect_cost);
        c.validate().map_err(|e| ReportError::config("cluster", e.to_string()))?;
        Ok(c)
    }

    pub fn workload(&self) -> Result<Workload, ReportError> {
        let w = &self.workload;
        Workload::new(w.queries, w.max_tokens_per_query, w.batch_size)
            .map_err(|e| ReportError::config("workload", e.to_string()))
    }

    pub fn mask(&self) -> Result<TreeMask, ReportError> {
        self.tree.load()
    }

    pub fn acceptance(&self) -> AcceptanceModel<f64> {
        self.acceptance.clone().unwrap_or_default()
    }

    pub fn cost(&self) -> CostModel<f64> {
        self.cost.unwrap_or_default()
    }

    pub fn verifier(&self, levels: usize) -> Verifier<f64> {
        let acc = self.acceptance().for_levels(levels);
        match self.simulation.verifier {
            VerifierKind::Sampled => Verifier::Sampled(acc),
            VerifierKind::Stub => Verifier::Stub(StubModel::new(acc, 32_000)),
        }
    }

    pub fn plan_defaults(&self) -> Result<PlanDefaults<f64>, ReportError> {
        let p = &self.planner;
        Ok(PlanDefaults {
            heads: p.heads,
            min_heads: p.min_heads,
            mask: self.mask()?,
            precision: p.precision,
            safety_tokens: p.safety_tokens,
            explore: ExploreOptions {
                max_nodes: p.max_nodes,
                leaf_stride: None,
            },
            acceptance: self.acceptance(),
            cost: self.cost(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GB;

    const MINIMAL: &str = r#"{
        "model": {"preset": "vicuna-7b"},
        "device": {"capacity": "24 gb"},
        "workload": {"queries": 20, "max_tokens_per_query": 128}
    }"#;

    #[test]
    fn minimal_config_defaults() {
        let c = RunConfig::from_json(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.device().unwrap().capacity, 24 * GB);
        assert_eq!(c.seed, 0);
        assert_eq!(c.model().unwrap(), ModelSpec::vicuna_7b());
        assert_eq!(c.mask().unwrap().shape().nodes, 64);
    }

    #[test]
    fn bare_numbers_are_not_sizes() {
        let bad = MINIMAL.replace("\"24 gb\"", "24");
        let e = RunConfig::from_json(&bad, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("device.capacity"), "{e}");
    }

    #[test]
    fn unknown_and_missing_fields() {
        let bad = MINIMAL.replace("\"queries\"", "\"querys\"");
        let e = RunConfig::from_json(&bad, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("workload"), "{e}");
        let no_model = r#"{"device": {"capacity": "24 gb"}, "workload": {"queries": 1, "max_tokens_per_query": 8}}"#;
        let e = RunConfig::from_json(no_model, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
        let partial = MINIMAL.replace(r#"{"preset": "vicuna-7b"}"#, r#"{"hidden_layers": 32}"#);
        let e = RunConfig::from_json(&partial, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("model.kv_heads"), "{e}");
    }

    #[test]
    fn two_tree_sources_rejected() {
        let bad = MINIMAL.replace(
            "\"workload\"",
            r#""tree": {"builtin": "medusa", "custom": {"nodes": 44, "leaves": 37, "arity": 10, "levels": 4}}, "workload""#,
        );
        assert!(RunConfig::from_json(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn missing_mask_file() {
        let bad = MINIMAL.replace("\"workload\"", r#""tree": {"path_list": {"path": "nope.json"}}, "workload""#);
        let e = RunConfig::from_json(&bad, Path::new("/nonexistent")).unwrap_err();
        assert!(e.to_string().contains("does not exist"), "{e}");
    }
}
