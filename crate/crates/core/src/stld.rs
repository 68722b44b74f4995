//! Per-layer dropout rates, their distribution families, and Bernoulli mask
//! sampling for stochastic transformer-layer dropout.
//!
//! Formulas index layers from 1; storage is 0-based. The conversion happens
//! only inside [`DropPlan::new`].

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CAP: f64 = 0.6;

/// Spread of the per-layer rates in the `normal` family.
const NORMAL_STD: f64 = 0.1;

/// Shapes of dropout-rate vectors across layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateDistribution {
    Uniform,
    /// `P_l = 1 - l/(L+1)`: early layers dropped most.
    Decay,
    /// `P_l = l/(L+1)`: late layers dropped most.
    Incremental,
    /// `P_l ~ N(avg, 0.1)`, drawn from a seeded stream.
    Normal,
}

impl RateDistribution {
    pub const ALL: [RateDistribution; 4] = [
        RateDistribution::Uniform,
        RateDistribution::Decay,
        RateDistribution::Incremental,
        RateDistribution::Normal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RateDistribution::Uniform => "uniform",
            RateDistribution::Decay => "decay",
            RateDistribution::Incremental => "incremental",
            RateDistribution::Normal => "normal",
        }
    }
}

impl fmt::Display for RateDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RateDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RateDistribution::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown rate distribution `{s}`")))
    }
}

/// Per-layer dropout rates `P_1..P_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropPlan {
    rates: Vec<f64>,
    distribution: RateDistribution,
    avg_rate: f64,
    cap: f64,
}

impl DropPlan {
    /// Builds the distribution's shape at its natural mean 0.5, rescales it
    /// linearly to `avg_rate`, then clamps into `[0, cap]`. `seed` only
    /// matters for [`RateDistribution::Normal`].
    pub fn new(
        distribution: RateDistribution,
        avg_rate: f64,
        layers: usize,
        cap: f64,
        seed: u64,
    ) -> Result<Self> {
        validate_cap(cap)?;
        if layers == 0 {
            return Err(Error::input("a plan needs at least one layer"));
        }
        if !(0.0..=cap).contains(&avg_rate) {
            return Err(Error::input(format!(
                "avg_rate {avg_rate} outside [0, cap={cap}]"
            )));
        }
        let rates = match distribution {
            RateDistribution::Normal => {
                let normal = Normal::new(avg_rate, NORMAL_STD).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..layers).map(|_| normal.sample(&mut rng)).collect()
            }
            shaped => base_shape(shaped, layers)
                .into_iter()
                .map(|p| p * (avg_rate / 0.5))
                .collect::<Vec<_>>(),
        };
        let rates = rates.into_iter().map(|p: f64| p.clamp(0.0, cap)).collect();
        Ok(Self {
            rates,
            distribution,
            avg_rate,
            cap,
        })
    }

    /// Takes explicit rates, e.g. for per-layer tuned configurations.
    pub fn from_rates(rates: Vec<f64>, cap: f64) -> Result<Self> {
        validate_cap(cap)?;
        if rates.is_empty() {
            return Err(Error::input("a plan needs at least one layer"));
        }
        if let Some(bad) = rates.iter().find(|p| !(0.0..=cap).contains(*p)) {
            return Err(Error::input(format!("rate {bad} outside [0, cap={cap}]")));
        }
        let avg_rate = rates.iter().sum::<f64>() / rates.len() as f64;
        Ok(Self {
            rates,
            distribution: RateDistribution::Uniform,
            avg_rate,
            cap,
        })
    }

    /// Every layer always active.
    pub fn no_dropout(layers: usize) -> Self {
        Self {
            rates: vec![0.0; layers],
            distribution: RateDistribution::Uniform,
            avg_rate: 0.0,
            cap: DEFAULT_CAP,
        }
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn layers(&self) -> usize {
        self.rates.len()
    }

    pub fn distribution(&self) -> RateDistribution {
        self.distribution
    }

    /// The requested mean rate.
    pub fn target_rate(&self) -> f64 {
        self.avg_rate
    }

    /// The mean rate after clamping; differs from the target when the cap bit.
    pub fn realized_rate(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// `E[L̃] = Σ (1 - P_l)`, the expected number of active layers per batch.
    pub fn expected_active(&self) -> f64 {
        self.rates.iter().map(|p| 1.0 - p).sum()
    }

    /// Draws `d_l ~ Bernoulli(P_l)` independently for every layer.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerMask {
        LayerMask {
            dropped: self.rates.iter().map(|&p| rng.random::<f64>() < p).collect(),
        }
    }
}

fn validate_cap(cap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&cap) {
        return Err(Error::input(format!("cap {cap} must lie in [0, 1)")));
    }
    Ok(())
}

/// Shape at natural mean 0.5, with 1-based layer index `l` in the formulas.
fn base_shape(distribution: RateDistribution, layers: usize) -> Vec<f64> {
    let denom = (layers + 1) as f64;
    (1..=layers)
        .map(|l| match distribution {
            RateDistribution::Uniform | RateDistribution::Normal => 0.5,
            RateDistribution::Decay => 1.0 - l as f64 / denom,
            RateDistribution::Incremental => l as f64 / denom,
        })
        .collect()
}

/// Which layers a batch skips. `true` at index `l` means `d_l = 1` (layer
/// replaced by identity).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerMask {
    dropped: Vec<bool>,
}

impl LayerMask {
    pub fn new(dropped: Vec<bool>) -> Self {
        Self { dropped }
    }

    pub fn all_active(layers: usize) -> Self {
        Self {
            dropped: vec![false; layers],
        }
    }

    pub fn all_dropped(layers: usize) -> Self {
        Self {
            dropped: vec![true; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }

    pub fn is_dropped(&self, layer: usize) -> bool {
        self.dropped[layer]
    }

    pub fn dropped(&self) -> &[bool] {
        &self.dropped
    }

    pub fn active_count(&self) -> usize {
        self.dropped.iter().filter(|d| !**d).count()
    }

    pub fn active_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.dropped
            .iter()
            .enumerate()
            .filter(|(_, d)| !**d)
            .map(|(l, _)| l)
    }
}

/// The discrete average-rate grid `{0.0, 0.1, ...}` up to and including `cap`.
pub fn rate_grid(cap: f64) -> Vec<f64> {
    (0..=9)
        .map(|i| i as f64 / 10.0)
        .filter(|r| *r <= cap + 1e-12)
        .collect()
}
