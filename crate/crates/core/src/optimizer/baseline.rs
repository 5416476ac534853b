use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{compute_min_cache, BudgetPlan, DeviceBudget, OptimizerError, TreeConfig, TreeOrigin};
use crate::memory_model::{
    base_model_bytes, buffer_bytes, heads_bytes, Bytes, MemoryBreakdown, ModelSpec, OomReason, Precision, Workload,
};
use crate::tree::TreeMask;

/// Static `cache:model` split of the device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheModelRatio {
    pub cache: f64,
    pub model: f64,
}

impl CacheModelRatio {
    pub fn new(cache: f64, model: f64) -> Result<Self, OptimizerError> {
        for v in [cache, model] {
            if !(v.is_finite() && v > 0.0) {
                return Err(OptimizerError::InvalidInput(format!(
                    "ratio parts must be positive and finite, got {cache}:{model}"
                )));
            }
        }
        Ok(CacheModelRatio { cache, model })
    }

    /// Bytes of `capacity` given to the cache; the model region is the rest.
    pub fn cache_region(&self, capacity: Bytes) -> Bytes {
        let share = self.cache / (self.cache + self.model);
        ((capacity as f64) * share).floor() as Bytes
    }
}

impl FromStr for CacheModelRatio {
    type Err = OptimizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || OptimizerError::InvalidInput(format!("ratio must look like `1:2`, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        CacheModelRatio::new(a, b)
    }
}

impl fmt::Display for CacheModelRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.cache, self.model)
    }
}

/// Fixed-split plan: the cache region holds the KV cache, the model region
/// holds weights, heads and tree buffers. Nothing is adapted, so the plan is
/// either feasible as given or names the region that overflows.
pub fn ratio_baseline_plan(
    device: &DeviceBudget,
    model: &ModelSpec,
    workload: &Workload,
    ratio: CacheModelRatio,
    precision: Precision,
    mask: &TreeMask,
    heads: u32,
) -> Result<BudgetPlan, OptimizerError> {
    device.validate()?;
    model.validate()?;
    let cache_region = ratio.cache_region(device.capacity);
    let model_region = device.capacity - cache_region;
    let cache = compute_min_cache(workload, model, precision, 0)?;
    let shape = mask.shape();
    let buffers = buffer_bytes(&shape, model, workload.batch_size(), precision)?;
    let heads_b = heads_bytes(heads as u64, model)?;
    let base = base_model_bytes(model, precision)?;
    let breakdown = MemoryBreakdown::compose(cache, buffers, heads_b, base)?;
    let weights = base as u128 + heads_b as u128;
    let reason = if weights > model_region as u128 {
        Some(OomReason::Model)
    } else if cache > cache_region {
        Some(OomReason::Cache)
    } else if weights + buffers as u128 > model_region as u128 {
        Some(OomReason::Buffer)
    } else {
        None
    };
    Ok(BudgetPlan {
        cache_bytes: cache_region,
        head_count: heads,
        tree: TreeConfig {
            label: mask.label(),
            shape,
            origin: TreeOrigin::Default,
        },
        precision,
        breakdown,
        usable_bytes: device.capacity,
        feasible: reason.is_none(),
        oom_reason: reason,
        expected_tau: None,
        expected_speedup: None,
        decisions_log: Vec::new(),
        mask: Some(mask.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GB;

    #[test]
    fn parse_ratio() {
        let r: CacheModelRatio = "1:2".parse().unwrap();
        assert_eq!(r, CacheModelRatio { cache: 1.0, model: 2.0 });
        assert!("1:0".parse::<CacheModelRatio>().is_err());
        assert!("-1:2".parse::<CacheModelRatio>().is_err());
        assert!("12".parse::<CacheModelRatio>().is_err());
        assert!("a:b".parse::<CacheModelRatio>().is_err());
    }

    #[test]
    fn regions_split_capacity() {
        let r = CacheModelRatio::new(1.0, 15.0).unwrap();
        assert_eq!(r.cache_region(16 * GB), GB);
    }

    #[test]
    fn one_to_two_starves_the_model() {
        let device = DeviceBudget::new(16 * GB).unwrap();
        let w = Workload::new(20, 64, 64).unwrap();
        let plan = ratio_baseline_plan(
            &device,
            &ModelSpec::vicuna_7b(),
            &w,
            "1:2".parse().unwrap(),
            Precision::Fp16,
            &TreeMask::medusa_vicuna_7b(),
            4,
        )
        .unwrap();
        assert!(!plan.feasible);
        assert_eq!(plan.oom_reason, Some(OomReason::Model));
    }
}
