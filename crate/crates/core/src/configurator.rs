//! Online exploration–exploitation configurator for dropout rates.
//!
//! Each arm is a `(distribution, average rate)` pair. The configurator
//! alternates between an exploration sweep, where every candidate in
//! `list_c` (plus `⌈n·ε⌉` fresh random arms) is tried for one round, and
//! `explor_r` exploitation rounds of the best arm in the history window
//! `list_h`. The reward of an arm is accuracy gain per second of simulated
//! round time.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::DeviceProfile;
use crate::error::{Error, Result};
use crate::stld::{rate_grid, DropPlan, RateDistribution, DEFAULT_CAP};

/// `R = ΔA / T`. Negative gains give negative rewards.
pub fn reward(delta_acc: f64, t_seconds: f64) -> Result<f64> {
    if !(t_seconds > 0.0) {
        return Err(Error::input(format!("round time must be > 0, got {t_seconds}")));
    }
    Ok(delta_acc / t_seconds)
}

/// One bandit arm. The average rate is stored in tenths so arms compare
/// exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "ArmSpec", into = "ArmSpec")]
pub struct Arm {
    distribution: RateDistribution,
    tenths: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmSpec {
    distribution: RateDistribution,
    avg_rate: f64,
}

impl TryFrom<ArmSpec> for Arm {
    type Error = Error;

    fn try_from(spec: ArmSpec) -> Result<Self> {
        Arm::new(spec.distribution, spec.avg_rate)
    }
}

impl From<Arm> for ArmSpec {
    fn from(arm: Arm) -> Self {
        ArmSpec {
            distribution: arm.distribution,
            avg_rate: arm.avg_rate(),
        }
    }
}

impl Arm {
    /// `avg_rate` must sit on the 0.1 grid.
    pub fn new(distribution: RateDistribution, avg_rate: f64) -> Result<Self> {
        let scaled = avg_rate * 10.0;
        let tenths = scaled.round();
        if (scaled - tenths).abs() > 1e-9 || !(0.0..=9.0).contains(&tenths) {
            return Err(Error::input(format!("avg_rate {avg_rate} is not on the 0.1 grid")));
        }
        Ok(Self {
            distribution,
            tenths: tenths as u8,
        })
    }

    pub fn distribution(&self) -> RateDistribution {
        self.distribution
    }

    pub fn avg_rate(&self) -> f64 {
        self.tenths as f64 / 10.0
    }

    /// Stable identifier, e.g. `incremental@0.5`.
    pub fn id(&self) -> String {
        self.to_string()
    }

    /// Every distribution at every grid rate up to `cap`.
    pub fn space(cap: f64) -> Vec<Arm> {
        RateDistribution::ALL
            .into_iter()
            .flat_map(|d| rate_grid(cap).into_iter().map(move |r| Arm::new(d, r).expect("grid rate")))
            .collect()
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{:.1}", self.distribution, self.avg_rate())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditParams {
    /// Exploration rate ε in [0, 1].
    pub epsilon: f64,
    /// Candidate count n.
    pub candidates: usize,
    /// History window size_w.
    pub window: usize,
    /// Exploitation rounds per phase (explor_r).
    pub exploit_rounds: usize,
    /// Acc_t; training stops once mean device accuracy reaches it.
    pub target_accuracy: f64,
    pub cap: f64,
    /// 0 gives every device the same rates; 1 scales each device's rate by
    /// `median_throughput / throughput`.
    pub resource_exponent: f64,
    pub startup: Vec<Arm>,
}

impl Default for BanditParams {
    fn default() -> Self {
        let startup = [
            RateDistribution::Uniform,
            RateDistribution::Incremental,
            RateDistribution::Decay,
        ]
        .into_iter()
        .flat_map(|d| [0.2, 0.4, 0.6].map(|r| Arm::new(d, r).expect("grid rate")))
        .collect();
        Self {
            epsilon: 0.5,
            candidates: 6,
            window: 12,
            exploit_rounds: 5,
            target_accuracy: 0.8,
            cap: DEFAULT_CAP,
            resource_exponent: 0.0,
            startup,
        }
    }
}

impl BanditParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail(format!("configurator.epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if self.window == 0 {
            return fail("configurator.window must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.cap) {
            return fail(format!("configurator.cap must be in [0, 1), got {}", self.cap));
        }
        if let Some(arm) = self.startup.iter().find(|a| a.avg_rate() > self.cap + 1e-12) {
            return fail(format!("configurator.startup arm {arm} exceeds cap {}", self.cap));
        }
        Ok(())
    }

    /// Fresh arms per sweep, `⌈n·ε⌉`.
    pub fn fresh_per_sweep(&self) -> usize {
        (self.candidates as f64 * self.epsilon - 1e-12).ceil().max(0.0) as usize
    }

    /// Arms kept after pruning, `⌊n·(1−ε)⌋`.
    pub fn retained(&self) -> usize {
        (self.candidates as f64 * (1.0 - self.epsilon) + 1e-12).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub arm: Arm,
    pub reward: f64,
    /// Insertion order; later observations get larger stamps.
    pub stamp: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Phase {
    Exploring { next: usize, seeded: bool },
    Exploiting { done: usize, winner: Arm },
}

/// Per-device plans for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub arm: Arm,
    pub plans: Vec<DropPlan>,
}

#[derive(Clone, Debug)]
pub struct Configurator {
    params: BanditParams,
    space: Vec<Arm>,
    candidates: Vec<Arm>,
    history: Vec<HistoryEntry>,
    phase: Phase,
    pending: Option<Arm>,
    stamp: u64,
    rng: ChaCha8Rng,
}

impl Configurator {
    pub fn new(params: BanditParams, seed: u64) -> Result<Self> {
        let space = Arm::space(params.cap);
        Self::with_space(params, space, seed)
    }

    /// Restricts fresh exploration to `space`.
    pub fn with_space(params: BanditParams, space: Vec<Arm>, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut candidates: Vec<Arm> = Vec::new();
        for arm in &params.startup {
            if !candidates.contains(arm) {
                candidates.push(*arm);
            }
        }
        Ok(Self {
            params,
            space,
            candidates,
            history: Vec::new(),
            phase: Phase::Exploring {
                next: 0,
                seeded: false,
            },
            pending: None,
            stamp: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn params(&self) -> &BanditParams {
        &self.params
    }

    /// `list_c`.
    pub fn candidates(&self) -> &[Arm] {
        &self.candidates
    }

    /// `list_h`, oldest first.
    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn is_exploring(&self) -> bool {
        matches!(self.phase, Phase::Exploring { .. })
    }

    /// True once the mean device accuracy reaches the target.
    pub fn stopping(&self, mean_acc: f64) -> bool {
        mean_acc >= self.params.target_accuracy
    }

    /// The arm to run this round. Calling twice without recording an
    /// outcome returns the same arm.
    pub fn next_arm(&mut self) -> Result<Arm> {
        if let Some(arm) = self.pending {
            return Ok(arm);
        }
        let arm = match &mut self.phase {
            Phase::Exploring { next, seeded } => {
                if !*seeded {
                    *seeded = true;
                    let fresh = self.params.fresh_per_sweep();
                    let mut pool: Vec<Arm> = self
                        .space
                        .iter()
                        .filter(|a| !self.candidates.contains(a))
                        .copied()
                        .collect();
                    pool.shuffle(&mut self.rng);
                    // never-tried arms first, then ones already in the window
                    let seen = |a: &Arm| self.history.iter().any(|h| h.arm == *a);
                    pool.sort_by_key(seen);
                    self.candidates.extend(pool.into_iter().take(fresh));
                }
                *self.candidates.get(*next).ok_or_else(|| {
                    Error::state("configurator has no candidate configurations")
                })?
            }
            Phase::Exploiting { winner, .. } => *winner,
        };
        self.pending = Some(arm);
        Ok(arm)
    }

    /// Chooses this round's arm and expands it into one plan per device.
    pub fn next_assignment(
        &mut self,
        devices: &[DeviceProfile],
        layers: usize,
        plan_seed: u64,
    ) -> Result<Assignment> {
        let arm = self.next_arm()?;
        let plans = expand_arm(&arm, devices, layers, &self.params, plan_seed)?;
        Ok(Assignment { arm, plans })
    }

    /// Records the per-device rewards of `arm` (averaged) and advances the
    /// exploration/exploitation state.
    pub fn record_outcome(&mut self, arm: &Arm, rewards: &[f64]) -> Result<()> {
        if self.pending != Some(*arm) {
            return Err(Error::input(format!("arm {arm} was not assigned this round")));
        }
        if rewards.is_empty() {
            return Err(Error::input("no rewards to record"));
        }
        let reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        self.pending = None;
        self.observe(*arm, reward);

        self.phase = match std::mem::replace(
            &mut self.phase,
            Phase::Exploring {
                next: 0,
                seeded: false,
            },
        ) {
            Phase::Exploring { next, seeded } if next + 1 < self.candidates.len() => {
                Phase::Exploring {
                    next: next + 1,
                    seeded,
                }
            }
            Phase::Exploring { .. } => self.finish_sweep(),
            Phase::Exploiting { done, winner } if done + 1 < self.params.exploit_rounds => {
                Phase::Exploiting {
                    done: done + 1,
                    winner,
                }
            }
            Phase::Exploiting { .. } => Phase::Exploring {
                next: 0,
                seeded: false,
            },
        };
        Ok(())
    }

    /// Latest observation replaces any earlier reward for the same arm; the
    /// window keeps the `size_w` most recent arms.
    fn observe(&mut self, arm: Arm, reward: f64) {
        self.history.retain(|h| h.arm != arm);
        self.stamp += 1;
        self.history.push(HistoryEntry {
            arm,
            reward,
            stamp: self.stamp,
        });
        let excess = self.history.len().saturating_sub(self.params.window);
        self.history.drain(..excess);
    }

    /// History sorted by reward, ties to the earlier insertion.
    fn ranked(&self) -> Vec<&HistoryEntry> {
        let mut ranked: Vec<&HistoryEntry> = self.history.iter().collect();
        ranked.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.stamp.cmp(&b.stamp)));
        ranked
    }

    /// Best arm in the window.
    pub fn winner(&self) -> Option<Arm> {
        self.ranked().first().map(|h| h.arm)
    }

    fn finish_sweep(&mut self) -> Phase {
        let keep = self.params.retained();
        self.candidates = self.ranked().into_iter().take(keep).map(|h| h.arm).collect();
        match self.winner() {
            Some(winner) if self.params.exploit_rounds > 0 => Phase::Exploiting { done: 0, winner },
            _ => Phase::Exploring {
                next: 0,
                seeded: false,
            },
        }
    }
}

/// Per-device plans for an arm. With a nonzero resource exponent, slower
/// devices get proportionally higher rates (clamped to the cap).
pub fn expand_arm(
    arm: &Arm,
    devices: &[DeviceProfile],
    layers: usize,
    params: &BanditParams,
    plan_seed: u64,
) -> Result<Vec<DropPlan>> {
    let median = median_throughput(devices);
    devices
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let scale = (median / d.throughput).powf(params.resource_exponent);
            let rate = (arm.avg_rate() * scale).clamp(0.0, params.cap);
            DropPlan::new(
                arm.distribution(),
                rate,
                layers,
                params.cap,
                plan_seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

fn median_throughput(devices: &[DeviceProfile]) -> f64 {
    if devices.is_empty() {
        return 1.0;
    }
    let mut t: Vec<f64> = devices.iter().map(|d| d.throughput).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arm(d: RateDistribution, r: f64) -> Arm {
        Arm::new(d, r).unwrap()
    }

    fn params(startup: Vec<Arm>, n: usize, eps: f64, window: usize, exploit: usize) -> BanditParams {
        BanditParams {
            epsilon: eps,
            candidates: n,
            window,
            exploit_rounds: exploit,
            startup,
            ..Default::default()
        }
    }

    #[test]
    fn reward_examples() {
        assert!((reward(0.02, 100.0).unwrap() - 2e-4).abs() < 1e-18);
        assert_eq!(reward(0.0, 3.0).unwrap(), 0.0);
        assert!((reward(-0.01, 50.0).unwrap() + 2e-4).abs() < 1e-18);
        assert!(reward(0.1, 0.0).is_err());
        assert!(reward(0.1, -1.0).is_err());
    }

    #[test]
    fn arm_grid_and_ids() {
        assert!(Arm::new(RateDistribution::Decay, 0.35).is_err());
        let a = arm(RateDistribution::Incremental, 0.5);
        assert_eq!(a.id(), "incremental@0.5");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Arm>(&json).unwrap(), a);
        assert_eq!(Arm::space(0.6).len(), 28);
    }

    #[test]
    fn exploitation_picks_highest_reward() {
        let a = arm(RateDistribution::Uniform, 0.2);
        let b = arm(RateDistribution::Decay, 0.4);
        let mut c = Configurator::with_space(params(vec![a, b], 2, 0.0, 4, 3), vec![a, b], 0).unwrap();
        assert_eq!(c.next_arm().unwrap(), a);
        c.record_outcome(&a, &[3e-4]).unwrap();
        assert_eq!(c.next_arm().unwrap(), b);
        c.record_outcome(&b, &[1e-4]).unwrap();
        assert_eq!(c.phase(), &Phase::Exploiting { done: 0, winner: a });
        for _ in 0..3 {
            assert_eq!(c.next_arm().unwrap(), a);
            c.record_outcome(&a, &[5e-4]).unwrap();
        }
        assert!(c.is_exploring());
    }

    #[test]
    fn ties_go_to_earlier_insertion() {
        let a = arm(RateDistribution::Uniform, 0.2);
        let b = arm(RateDistribution::Decay, 0.4);
        let mut c = Configurator::with_space(params(vec![a, b], 2, 0.0, 4, 1), vec![a, b], 0).unwrap();
        for x in [a, b] {
            c.next_arm().unwrap();
            c.record_outcome(&x, &[1e-4]).unwrap();
        }
        assert_eq!(c.winner(), Some(a));
    }

    #[test]
    fn window_evicts_oldest() {
        let arms: Vec<Arm> = [0.1, 0.2, 0.3].iter().map(|&r| arm(RateDistribution::Uniform, r)).collect();
        let mut c = Configurator::with_space(params(arms.clone(), 3, 0.0, 2, 1), arms.clone(), 0).unwrap();
        for (i, a) in arms.iter().enumerate() {
            assert_eq!(c.next_arm().unwrap(), *a);
            // the first arm has the best reward but is stale by the end of the sweep
            c.record_outcome(a, &[if i == 0 { 9.0 } else { 1.0 }]).unwrap();
            assert!(c.history().len() <= 2);
        }
        let kept: Vec<Arm> = c.history().iter().map(|h| h.arm).collect();
        assert_eq!(kept, vec![arms[1], arms[2]]);
        assert_eq!(c.winner(), Some(arms[1]));
    }

    #[test]
    fn pruning_keeps_top_rewards() {
        let names = [0.1, 0.2, 0.3, 0.4];
        let arms: Vec<Arm> = names.iter().map(|&r| arm(RateDistribution::Uniform, r)).collect();
        // ε = 0.5 with a space equal to the startup list: no fresh arms available
        let mut c = Configurator::with_space(params(arms.clone(), 4, 0.5, 8, 2), arms.clone(), 0).unwrap();
        for (a, r) in arms.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            c.next_arm().unwrap();
            c.record_outcome(a, &[r]).unwrap();
        }
        assert_eq!(c.candidates(), &arms[..2]);
    }

    #[test]
    fn single_arm_is_exploited() {
        let a = arm(RateDistribution::Incremental, 0.5);
        let mut c = Configurator::with_space(params(vec![a], 1, 0.0, 4, 2), vec![a], 0).unwrap();
        c.next_arm().unwrap();
        c.record_outcome(&a, &[-1.0]).unwrap();
        assert_eq!(c.candidates(), &[a]);
        assert_eq!(c.phase(), &Phase::Exploiting { done: 0, winner: a });
    }

    #[test]
    fn reobservation_replaces_reward() {
        let a = arm(RateDistribution::Incremental, 0.5);
        let mut c = Configurator::with_space(params(vec![a], 1, 0.0, 4, 2), vec![a], 0).unwrap();
        for r in [5.0, 1.0] {
            c.next_arm().unwrap();
            c.record_outcome(&a, &[r]).unwrap();
        }
        assert_eq!(c.history().len(), 1);
        assert_eq!(c.history()[0].reward, 1.0);
    }

    #[test]
    fn rewards_are_averaged_over_devices() {
        let a = arm(RateDistribution::Uniform, 0.3);
        let mut c = Configurator::with_space(params(vec![a], 1, 0.0, 4, 1), vec![a], 0).unwrap();
        c.next_arm().unwrap();
        c.record_outcome(&a, &[1.0, 2.0, 6.0]).unwrap();
        assert_eq!(c.history()[0].reward, 3.0);
    }

    #[test]
    fn unknown_arm_rejected() {
        let a = arm(RateDistribution::Uniform, 0.3);
        let b = arm(RateDistribution::Uniform, 0.4);
        let mut c = Configurator::with_space(params(vec![a], 1, 0.0, 4, 1), vec![a], 0).unwrap();
        assert!(c.record_outcome(&a, &[1.0]).is_err());
        c.next_arm().unwrap();
        assert!(c.record_outcome(&b, &[1.0]).is_err());
    }

    #[test]
    fn empty_candidates_is_state_error() {
        let mut c = Configurator::with_space(params(vec![], 4, 0.0, 4, 1), vec![], 0).unwrap();
        assert!(matches!(c.next_arm(), Err(Error::State(_))));
    }

    #[test]
    fn exploration_adds_fresh_arms() {
        let p = BanditParams::default();
        let fresh = p.fresh_per_sweep();
        assert_eq!(fresh, 3);
        let startup = p.startup.len();
        let mut c = Configurator::new(p, 1).unwrap();
        c.next_arm().unwrap();
        assert_eq!(c.candidates().len(), startup + fresh);
        let unique: std::collections::HashSet<_> = c.candidates().iter().collect();
        assert_eq!(unique.len(), c.candidates().len());
    }

    #[test]
    fn modes_alternate() {
        let p = BanditParams::default();
        let (n, explor_r) = (p.candidates, p.exploit_rounds);
        let mut c = Configurator::new(p, 2).unwrap();
        let mut reward = 0.0;
        for cycle in 0..4 {
            assert!(c.is_exploring());
            c.next_arm().unwrap();
            let sweep = c.candidates().len();
            if cycle > 0 {
                assert_eq!(sweep, n);
            }
            for _ in 0..sweep {
                let a = c.next_arm().unwrap();
                reward += 1.0;
                c.record_outcome(&a, &[reward % 7.0]).unwrap();
            }
            assert!(c.candidates().len() <= n);
            let Phase::Exploiting { winner, .. } = c.phase().clone() else {
                panic!("expected exploitation")
            };
            assert_eq!(Some(winner), c.winner());
            for _ in 0..explor_r {
                assert_eq!(c.next_arm().unwrap(), winner);
                c.record_outcome(&winner, &[-1.0]).unwrap();
            }
        }
    }

    #[test]
    fn stopping_rule() {
        let mut p = BanditParams::default();
        p.target_accuracy = 0.75;
        let c = Configurator::new(p.clone(), 0).unwrap();
        assert!(c.stopping(0.80));
        assert!(!c.stopping(0.74999));
        p.target_accuracy = 0.0;
        assert!(Configurator::new(p, 0).unwrap().stopping(0.0));
    }

    #[test]
    fn resource_adaptive_expansion() {
        let devices: Vec<DeviceProfile> = [1e9, 2e9, 4e9]
            .iter()
            .map(|&t| DeviceProfile::new(t, 1e7, 1e9, 5.0).unwrap())
            .collect();
        let a = arm(RateDistribution::Uniform, 0.2);
        let mut p = BanditParams::default();
        let same = expand_arm(&a, &devices, 4, &p, 0).unwrap();
        assert!(same.iter().all(|plan| plan.rates() == same[0].rates()));
        p.resource_exponent = 1.0;
        let adaptive = expand_arm(&a, &devices, 4, &p, 0).unwrap();
        let rates: Vec<f64> = adaptive.iter().map(|p| p.rates()[0]).collect();
        assert!((rates[0] - 0.4).abs() < 1e-12);
        assert!((rates[1] - 0.2).abs() < 1e-12);
        assert!((rates[2] - 0.1).abs() < 1e-12);
    }
}
