//! Experiment configuration: one JSON document with a section per concern.
//!
//! `partition.total_devices`, `federation.max_rounds` and
//! `federation.devices_per_round` are required; everything else has a
//! default. Unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::configurator::{Arm, BanditParams};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Seed used when neither the config nor the caller supplies one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub stld: StldConfig,
    #[serde(default)]
    pub configurator: BanditParams,
    #[serde(default)]
    pub ptls: PtlsConfig,
    #[serde(default)]
    pub devices: DeviceConfig,
    /// Only read by the `sweep` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub total_devices: usize,
    /// Dirichlet concentration; smaller means more label skew.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Central full-model steps on the pooled training split before the base
    /// is frozen. 0 skips pretraining.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Plain gradient descent, no state.
    Sgd,
    AdamW {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// Per-parameter state tensors the optimizer keeps.
    pub fn moments(&self) -> u64 {
        match self {
            OptimizerConfig::Sgd => 0,
            OptimizerConfig::AdamW { .. } => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Every contributing device counts equally.
    Uniform,
    /// Devices weighted by training-shard size.
    Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub max_rounds: usize,
    pub devices_per_round: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    /// Train the sampled devices of a round on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
    /// End the run once the round's mean device accuracy reaches
    /// `configurator.target_accuracy`.
    #[serde(default = "default_true")]
    pub stop_at_target: bool,
}

fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.05
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::Sgd
}
fn default_weighting() -> Weighting {
    Weighting::Uniform
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StldConfig {
    /// Off: every layer trains in every batch.
    pub enabled: bool,
    /// Run this arm every round instead of consulting the configurator.
    pub fixed: Option<Arm>,
}

impl Default for StldConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fixed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtlsConfig {
    pub enabled: bool,
    /// Personalized layers per device; defaults to `layers / 2`.
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    /// Flop/s of the slowest tier.
    pub base_throughput: f64,
    /// Throughput multipliers of the tiers; each device draws one.
    pub tiers: Vec<f64>,
    /// Power draw per tier, watts.
    pub power_watts: Vec<f64>,
    /// Per-round uplink/downlink bandwidth is uniform in this range, Mbit/s.
    pub bandwidth_mbps: [f64; 2],
    pub mem_capacity_bytes: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            base_throughput: 2.5e8,
            tiers: vec![1.0, 2.0, 4.0],
            power_watts: vec![7.5, 10.0, 15.0],
            bandwidth_mbps: [1.0, 100.0],
            mem_capacity_bytes: 8.0 * 1024.0 * 1024.0 * 1024.0,
        }
    }
}

/// Cross-product grid for `sweep`; an absent axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub avg_rate: Vec<f64>,
    pub distribution: Vec<crate::stld::RateDistribution>,
    pub alpha: Vec<f64>,
}

impl ExperimentConfig {
    /// Parses JSON; errors name the offending field path and line.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// `explicit` wins over the config's seed, which wins over `fallback`
    /// (e.g. an environment variable), then [`DEFAULT_SEED`].
    pub fn resolve_seed(&self, explicit: Option<u64>, fallback: Option<u64>) -> u64 {
        explicit.or(self.seed).or(fallback).unwrap_or(DEFAULT_SEED)
    }

    /// The config with every default materialized, including seed and `k`.
    pub fn effective(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = Some(seed);
        out.ptls.k = Some(self.ptls_k());
        out
    }

    pub fn ptls_k(&self) -> usize {
        self.ptls.k.unwrap_or(self.model.layers / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.data.validate()?;
        self.configurator.validate()?;
        if self.partition.total_devices == 0 {
            return fail("partition.total_devices must be >= 1".into());
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return fail(format!("partition.alpha must be > 0, got {}", self.partition.alpha));
        }
        let f = &self.federation;
        if f.devices_per_round == 0 || f.devices_per_round > self.partition.total_devices {
            return fail(format!(
                "federation.devices_per_round must be in 1..={}, got {}",
                self.partition.total_devices, f.devices_per_round
            ));
        }
        if f.batch_size == 0 {
            return fail("federation.batch_size must be >= 1".into());
        }
        if !(f.learning_rate >= 0.0 && f.learning_rate.is_finite()) {
            return fail(format!("federation.learning_rate must be >= 0, got {}", f.learning_rate));
        }
        if let OptimizerConfig::AdamW { beta1, beta2, eps, weight_decay } = f.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || weight_decay < 0.0 {
                return fail("federation.optimizer: need 0 <= beta < 1, eps > 0, weight_decay >= 0".into());
            }
        }
        if self.pretrain.steps > 0 && (self.pretrain.batch_size == 0 || !(self.pretrain.learning_rate > 0.0)) {
            return fail("pretrain: batch_size must be >= 1 and learning_rate > 0".into());
        }
        if self.ptls_k() > self.model.layers {
            return fail(format!("ptls.k = {} exceeds {} layers", self.ptls_k(), self.model.layers));
        }
        if let Some(arm) = &self.stld.fixed {
            if arm.avg_rate() > self.configurator.cap + 1e-12 {
                return fail(format!("stld.fixed arm {arm} exceeds cap {}", self.configurator.cap));
            }
        }
        let d = &self.devices;
        if d.tiers.is_empty() || d.tiers.len() != d.power_watts.len() {
            return fail("devices.tiers and devices.power_watts must be non-empty and equally long".into());
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(d.base_throughput)
            || !d.tiers.iter().all(|&t| positive(t))
            || !d.power_watts.iter().all(|&p| positive(p))
            || !positive(d.mem_capacity_bytes)
        {
            return fail("devices: throughput, tiers, power and memory must be > 0".into());
        }
        if !(positive(d.bandwidth_mbps[0]) && d.bandwidth_mbps[0] <= d.bandwidth_mbps[1]) {
            return fail(format!("devices.bandwidth_mbps must be 0 < lo <= hi, got {:?}", d.bandwidth_mbps));
        }
        Ok(())
    }
}
