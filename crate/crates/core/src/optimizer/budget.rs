use serde::{Deserialize, Serialize};

use crate::memory_model::Bytes;
use crate::scalar::Real;

use super::OptimizerError;

/// Safety margin used when none is given.
pub const DEFAULT_SAFETY_MARGIN: f64 = 0.02;

/// Device memory and the fraction held back as headroom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceBudget {
    pub capacity: Bytes,
    #[serde(default = "default_margin")]
    pub safety_margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_SAFETY_MARGIN
}

impl DeviceBudget {
    pub fn new(capacity: Bytes) -> Result<Self, OptimizerError> {
        Self::with_margin(capacity, DEFAULT_SAFETY_MARGIN)
    }

    pub fn with_margin(capacity: Bytes, safety_margin: f64) -> Result<Self, OptimizerError> {
        let d = DeviceBudget {
            capacity,
            safety_margin,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.capacity == 0 {
            return Err(OptimizerError::InvalidDevice("capacity must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.safety_margin) {
            return Err(OptimizerError::InvalidDevice(format!(
                "safety margin {} is outside [0, 1)",
                self.safety_margin
            )));
        }
        Ok(())
    }

    /// `capacity · (1 − margin)`, rounded down to whole bytes.
    pub fn usable(&self) -> Bytes {
        let reserve = (self.capacity as f64 * self.safety_margin).ceil() as u64;
        self.capacity.saturating_sub(reserve)
    }
}

/// A group of identical devices joined in a pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "")]
pub struct ClusterSpec<F: Real> {
    pub device_count: u64,
    pub per_device: DeviceBudget,
    /// Seconds per stage boundary per step. Falls back to the cost model's
    /// communication cost when absent.
    #[serde(default)]
    pub interconnect_cost: Option<F>,
}

impl<F: Real> ClusterSpec<F> {
    pub fn new(device_count: u64, per_device: DeviceBudget) -> Result<Self, OptimizerError> {
        let c = ClusterSpec {
            device_count,
            per_device,
            interconnect_cost: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.device_count == 0 {
            return Err(OptimizerError::InvalidDevice("cluster needs at least one device".into()));
        }
        if let Some(c) = self.interconnect_cost {
            if !(c.is_finite() && c >= F::zero()) {
                return Err(OptimizerError::InvalidDevice("interconnect cost must be finite and >= 0".into()));
            }
        }
        self.per_device.validate()
    }
}
