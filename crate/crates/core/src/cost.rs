//! Analytical device cost model: activation memory, round time, traffic and
//! energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::stld::LayerMask;

/// Activation footprint `(34·b·s·h + 5·b·s²·a) · L_active · bytes_per_elem`.
pub fn activation_bytes(b: u64, s: u64, h: u64, a: u64, active_layers: u64, bytes_per_elem: u64) -> u64 {
    (34 * b * s * h + 5 * b * s * s * a) * active_layers * bytes_per_elem
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// flops per second
    pub throughput: f64,
    /// bits per second
    pub bandwidth: f64,
    /// bytes
    pub mem_capacity: f64,
    /// watts
    pub power: f64,
}

impl DeviceProfile {
    pub fn new(throughput: f64, bandwidth: f64, mem_capacity: f64, power: f64) -> Result<Self> {
        let p = Self {
            throughput,
            bandwidth,
            mem_capacity,
            power,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("throughput", self.throughput),
            ("bandwidth", self.bandwidth),
            ("mem_capacity", self.mem_capacity),
            ("power", self.power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("device {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub compute_seconds: f64,
    pub comm_seconds: f64,
    /// Round time `T_i = compute + comm`.
    pub total_seconds: f64,
    pub activation_bytes: u64,
    pub peak_bytes: u64,
    pub traffic_bytes: u64,
    pub energy_joules: f64,
}

/// Simulated cost of one device round. Energy counts compute time only.
pub fn round_time(flops: f64, upload_bytes: u64, download_bytes: u64, profile: &DeviceProfile) -> CostReport {
    let compute_seconds = flops / profile.throughput;
    let traffic = upload_bytes + download_bytes;
    let comm_seconds = 8.0 * traffic as f64 / profile.bandwidth;
    CostReport {
        compute_seconds,
        comm_seconds,
        total_seconds: compute_seconds + comm_seconds,
        activation_bytes: 0,
        peak_bytes: 0,
        traffic_bytes: traffic,
        energy_joules: profile.power * compute_seconds,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryModel {
    pub bytes_per_elem: u64,
    /// Optimizer state tensors per trainable parameter (2 for AdamW, 0 for SGD).
    pub optimizer_moments: u64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self {
            bytes_per_elem: 8,
            optimizer_moments: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub parameters: u64,
    pub activations: u64,
    pub gradients: u64,
    pub optimizer_states: u64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> u64 {
        self.parameters + self.activations + self.gradients + self.optimizer_states
    }

    pub fn activation_fraction(&self) -> f64 {
        self.activations as f64 / self.total() as f64
    }
}

/// Peak training memory for one batch: all parameters, activations of the
/// active layers, gradients of their adapters plus the head, and optimizer
/// state proportional to those gradients.
pub fn peak_memory(
    config: &ModelConfig,
    mask: &LayerMask,
    b: usize,
    s: usize,
    model: &MemoryModel,
) -> Result<MemoryBreakdown> {
    if mask.len() != config.layers {
        return Err(Error::input(format!(
            "mask has {} entries for {} layers",
            mask.len(),
            config.layers
        )));
    }
    let bpe = model.bytes_per_elem;
    let active = mask.active_count() as u64;
    let grad_elems = active * config.peft_layer_params() as u64 + config.head_params() as u64;
    let gradients = grad_elems * bpe;
    Ok(MemoryBreakdown {
        parameters: config.total_params() as u64 * bpe,
        activations: activation_bytes(
            b as u64,
            s as u64,
            config.hidden as u64,
            config.heads as u64,
            active,
            bpe,
        ),
        gradients,
        optimizer_states: model.optimizer_moments * gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_formula() {
        assert_eq!(activation_bytes(0, 256, 32, 2, 6, 8), 0);
        // 34·16·256·32 = 4_456_448 ; 5·16·256²·2 = 10_485_760 ; sum 14_942_208
        assert_eq!(activation_bytes(16, 256, 32, 2, 6, 8), 14_942_208 * 6 * 8);
        assert_eq!(
            activation_bytes(4, 16, 32, 2, 6, 2),
            2 * activation_bytes(4, 16, 32, 2, 3, 2)
        );
    }

    #[test]
    fn round_time_examples() {
        let p = DeviceProfile::new(2e12, 4e7, 8e9, 10.0).unwrap();
        assert_eq!(round_time(0.0, 0, 0, &p).total_seconds, 0.0);
        let r = round_time(2e12, 0, 0, &p);
        assert_eq!(r.total_seconds, 1.0);
        assert_eq!(r.energy_joules, 10.0);
        let r = round_time(0.0, 5_000_000, 5_000_000, &p);
        assert_eq!(r.comm_seconds, 2.0);
        assert_eq!(r.traffic_bytes, 10_000_000);
        assert_eq!(r.energy_joules, 0.0);
        assert_eq!(r.total_seconds, r.compute_seconds + r.comm_seconds);
    }

    #[test]
    fn profile_must_be_positive() {
        assert!(DeviceProfile::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(DeviceProfile::new(-1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn all_dropped_memory() {
        let c = ModelConfig::default();
        let m = MemoryModel::default();
        let mem = peak_memory(&c, &LayerMask::all_dropped(6), 16, 16, &m).unwrap();
        assert_eq!(mem.activations, 0);
        assert_eq!(mem.gradients, c.head_params() as u64 * 8);
        assert_eq!(mem.optimizer_states, 2 * mem.gradients);
        assert_eq!(mem.parameters, c.total_params() as u64 * 8);
    }

    #[test]
    fn activation_share_shrinks_with_dropping() {
        let c = ModelConfig::default();
        let m = MemoryModel::default();
        let mut dropped = vec![false; 6];
        let mut prev = peak_memory(&c, &LayerMask::new(dropped.clone()), 16, 16, &m)
            .unwrap()
            .activation_fraction();
        for l in [2, 4, 0, 5, 1, 3] {
            dropped[l] = true;
            let f = peak_memory(&c, &LayerMask::new(dropped.clone()), 16, 16, &m)
                .unwrap()
                .activation_fraction();
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn breakdown_ordering_at_large_batch() {
        let c = ModelConfig::default();
        let mem = peak_memory(&c, &LayerMask::all_active(6), 16, 16, &MemoryModel::default()).unwrap();
        assert!(mem.activations > mem.optimizer_states);
        assert!(mem.optimizer_states > mem.gradients);
    }
}
