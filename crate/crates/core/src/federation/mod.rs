//! Synchronous federated fine-tuning simulation.
//!
//! A run generates the synthetic task, pretrains the full model centrally,
//! freezes the base and zeroes the head, then repeats rounds: sample devices,
//! assign dropout plans, train adapters + head locally with layer dropout,
//! aggregate (plainly or with personalized layer sharing) and account
//! simulated time, traffic, energy and memory.
//!
//! Every random choice comes from a ChaCha stream keyed by
//! `(seed, round, purpose or device)`, so device training can run in
//! parallel and still produce byte-identical results.

mod metrics;
mod optim;

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use metrics::{
    read_metrics_csv, time_to_accuracy, write_metrics_csv, MetricsRow, RoundMetrics, Summary, METRICS_HEADER,
};
pub use optim::Optimizer;

use crate::config::{ExperimentConfig, OptimizerConfig, PretrainConfig, Weighting};
use crate::configurator::{expand_arm, Arm, Configurator};
use crate::cost::{peak_memory, round_time, CostReport, DeviceProfile, MemoryModel};
use crate::data::{dirichlet_partition, generate, Dataset, DeviceShard, Partition, Split};
use crate::error::{Error, Result};
use crate::model::{FlopCount, ModelConfig, TrainScope, TransformerStack};
use crate::ptls::{aggregate_weighted, select_shared, ImportanceTracker, LayerUpdate, ShareSet};
use crate::stld::{DropPlan, LayerMask};

const STREAM_DATA: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_MODEL: u64 = 3;
const STREAM_PRETRAIN: u64 = 4;
const STREAM_DEVICES: u64 = 5;
const STREAM_CONFIGURATOR: u64 = 6;
const STREAM_SAMPLING: u64 = 1 << 40;
const STREAM_PLANS: u64 = (1 << 40) + 1;

/// Examples per evaluation forward pass.
const EVAL_CHUNK: usize = 64;

/// Derives an independent 64-bit seed from `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17))
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, a, b))
}

/// Accuracy of `model` on the given examples, evaluated in chunks.
pub fn accuracy(model: &TransformerStack, dataset: &Dataset, split: Split, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::input("cannot evaluate on an empty set"));
    }
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        correct += model.correct(&dataset.batch(split, chunk))?;
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Central pretraining of the whole model on the pooled training split.
/// Adapters stay at their no-op initialization; the head is zeroed
/// afterwards so fine-tuning starts from an untrained classifier. Returns the
/// model and its pooled validation accuracy before the head reset.
pub fn pretrain(
    config: &ModelConfig,
    dataset: &Dataset,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(TransformerStack, f64)> {
    let mut model = TransformerStack::new(config.clone(), derive_seed(seed, 0, STREAM_MODEL))?;
    let n = dataset.split(Split::Train).len();
    let ids: Vec<_> = model
        .base_param_ids()
        .chain(model.head_ids())
        .collect();
    let mut rng = stream(seed, 0, STREAM_PRETRAIN);
    let mut opt = Optimizer::new(
        OptimizerConfig::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
        pretrain.learning_rate,
    );
    let mask = LayerMask::all_active(config.layers);
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    for _ in 0..pretrain.steps {
        if pos + pretrain.batch_size > n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + pretrain.batch_size).min(n);
        let batch = dataset.batch(Split::Train, &order[pos..end]);
        pos = end;
        let pass = model.forward_stld(&batch, &mask, TrainScope::Full)?;
        let grads = model.backward_stld(&pass.cache, &mask)?;
        opt.step(&mut model, &grads, &ids);
    }
    let val: Vec<usize> = (0..dataset.split(Split::Validation).len()).collect();
    let acc = if val.is_empty() {
        0.0
    } else {
        accuracy(&model, dataset, Split::Validation, &val)?
    };
    model.reset_head();
    Ok((model, acc))
}

#[derive(Clone, Debug)]
pub struct DeviceState {
    pub id: usize,
    pub shard: DeviceShard,
    pub tier: usize,
    pub throughput: f64,
    pub power: f64,
    /// Adapter values of the layers this device kept local last time it
    /// trained.
    pub personalized: BTreeMap<usize, Vec<f64>>,
    /// Last local validation accuracy.
    pub last_accuracy: f64,
    pub tracker: ImportanceTracker,
    pub rounds_trained: usize,
}

impl DeviceState {
    /// Split and indices used for local validation; falls back to the
    /// training shard when the validation slice is empty.
    pub fn validation_set(&self) -> (Split, &[usize]) {
        if self.shard.validation.is_empty() {
            (Split::Train, &self.shard.train)
        } else {
            (Split::Validation, &self.shard.validation)
        }
    }
}

/// What one device sends back after local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub device: usize,
    /// New minus received adapter values, per layer (zero for layers dropped
    /// in every batch).
    pub deltas: Vec<Vec<f64>>,
    pub head_delta: Vec<f64>,
    /// Adapter values after training, per layer.
    pub adapters: Vec<Vec<f64>>,
    pub accuracy: f64,
    pub share: ShareSet,
    pub tracker: ImportanceTracker,
    pub flops: FlopCount,
    pub cost: CostReport,
    pub batches: usize,
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundMetrics>,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn rows(&self) -> impl Iterator<Item = MetricsRow> + '_ {
        self.rounds.iter().map(|r| r.row.clone())
    }

    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_metrics_csv(self.rows(), &mut buf)?;
        Ok(buf)
    }
}

enum Policy {
    NoDropout,
    Fixed(Arm),
    Bandit(Box<Configurator>),
}

pub struct Simulation {
    config: ExperimentConfig,
    seed: u64,
    dataset: Dataset,
    partition: Partition,
    global: TransformerStack,
    devices: Vec<DeviceState>,
    policy: Policy,
    memory: MemoryModel,
    round: usize,
    wall_clock: f64,
    pretrain_accuracy: f64,
}

impl Simulation {
    /// Generates data, partitions it and pretrains the base.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.resolve_seed(None, None);
        let m = &config.model;
        let dataset = generate(m.vocab, m.seq_len, m.classes, &config.data, derive_seed(seed, 0, STREAM_DATA))?;
        let (base, acc) = pretrain(m, &dataset, &config.pretrain, seed)?;
        Self::with_base(config, dataset, base, acc)
    }

    /// Starts from an existing dataset and pretrained base (head already
    /// reset), e.g. to share one pretraining across several runs.
    pub fn with_base(
        config: &ExperimentConfig,
        dataset: Dataset,
        base: TransformerStack,
        pretrain_accuracy: f64,
    ) -> Result<Self> {
        config.validate()?;
        if base.config() != &config.model {
            return Err(Error::Config("base model architecture differs from model config".into()));
        }
        let seed = config.resolve_seed(None, None);
        let partition = dirichlet_partition(
            &dataset,
            config.partition.total_devices,
            config.partition.alpha,
            derive_seed(seed, 0, STREAM_PARTITION),
        )?;
        let d = &config.devices;
        let mut rng = stream(seed, 0, STREAM_DEVICES);
        let mut devices = Vec::with_capacity(partition.num_devices());
        for (id, shard) in partition.devices.iter().enumerate() {
            let tier = rng.random_range(0..d.tiers.len());
            devices.push(DeviceState {
                id,
                shard: shard.clone(),
                tier,
                throughput: d.base_throughput * d.tiers[tier],
                power: d.power_watts[tier],
                personalized: BTreeMap::new(),
                last_accuracy: 0.0,
                tracker: ImportanceTracker::new(config.model.layers),
                rounds_trained: 0,
            });
        }
        for dev in &mut devices {
            let (split, idx) = dev.validation_set();
            dev.last_accuracy = accuracy(&base, &dataset, split, idx)?;
        }
        let policy = match (config.stld.enabled, config.stld.fixed) {
            (false, _) => Policy::NoDropout,
            (true, Some(arm)) => Policy::Fixed(arm),
            (true, None) => Policy::Bandit(Box::new(Configurator::new(
                config.configurator.clone(),
                derive_seed(seed, 0, STREAM_CONFIGURATOR),
            )?)),
        };
        let memory = MemoryModel {
            bytes_per_elem: 8,
            optimizer_moments: config.federation.optimizer.moments(),
        };
        Ok(Self {
            config: config.effective(seed),
            seed,
            dataset,
            partition,
            global: base,
            devices,
            policy,
            memory,
            round: 0,
            wall_clock: 0.0,
            pretrain_accuracy,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn global(&self) -> &TransformerStack {
        &self.global
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn wall_clock(&self) -> f64 {
        self.wall_clock
    }

    pub fn pretrain_accuracy(&self) -> f64 {
        self.pretrain_accuracy
    }

    pub fn configurator(&self) -> Option<&Configurator> {
        match &self.policy {
            Policy::Bandit(c) => Some(c),
            _ => None,
        }
    }

    /// The global model with `device`'s personalized layers swapped in.
    pub fn device_model(&self, device: usize) -> Result<TransformerStack> {
        let mut model = self.global.clone();
        for (&l, values) in &self.devices[device].personalized {
            model.set_adapter_flat(l, values)?;
        }
        Ok(model)
    }

    fn upload_bytes(&self, shared_layers: usize) -> u64 {
        let m = &self.config.model;
        (shared_layers * m.peft_layer_params() + m.head_params()) as u64 * self.memory.bytes_per_elem
    }

    fn download_bytes(&self) -> u64 {
        self.upload_bytes(self.config.model.layers)
    }

    /// Local STLD training of one device on the current global model.
    /// Returns `None` (with a warning) for a device without training data.
    pub fn local_train(&self, device: usize, plan: &DropPlan, bandwidth: f64) -> Result<Option<LocalOutcome>> {
        let state = &self.devices[device];
        let layers = self.config.model.layers;
        if plan.layers() != layers {
            return Err(Error::input(format!("plan has {} layers, model {layers}", plan.layers())));
        }
        if state.shard.train.is_empty() {
            warn!("device {device} has no training data; skipped");
            return Ok(None);
        }
        let fed = &self.config.federation;
        let mut model = self.device_model(device)?;
        let before: Vec<Vec<f64>> = (0..layers).map(|l| model.adapter_flat(l)).collect();
        let head_before = model.head_flat();
        let mut rng = stream(self.seed, self.round as u64, device as u64);
        let mut opt = Optimizer::new(fed.optimizer, fed.learning_rate);
        let mut tracker = ImportanceTracker::new(layers);
        let mut flops = FlopCount::default();
        let mut peak = 0u64;
        let mut peak_activations = 0u64;
        let mut batches = 0;
        let mut order = state.shard.train.clone();
        let adapter_ids: Vec<_> = (0..layers).map(|l| model.adapter_ids(l)).collect();
        let head_ids = model.head_ids();
        for _ in 0..fed.local_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(fed.batch_size) {
                let batch = self.dataset.batch(Split::Train, chunk);
                let mask = plan.sample_mask(&mut rng);
                let pass = model.forward_stld(&batch, &mask, TrainScope::Adapters)?;
                let grads = model.backward_stld(&pass.cache, &mask)?;
                let norms: Vec<f64> = adapter_ids.iter().map(|ids| grads.norm_over(ids)).collect();
                tracker.record_batch(&norms, &mask)?;
                let mut step_ids: Vec<_> = mask.active_layers().flat_map(|l| adapter_ids[l]).collect();
                step_ids.extend(head_ids);
                opt.step(&mut model, &grads, &step_ids);
                flops += self.config.model.count_flops(&mask, chunk.len(), self.config.model.seq_len)?;
                let mem = peak_memory(&self.config.model, &mask, chunk.len(), self.config.model.seq_len, &self.memory)?;
                peak = peak.max(mem.total());
                peak_activations = peak_activations.max(mem.activations);
                batches += 1;
            }
        }
        let (split, idx) = state.validation_set();
        let acc = accuracy(&model, &self.dataset, split, idx)?;
        let adapters: Vec<Vec<f64>> = (0..layers).map(|l| model.adapter_flat(l)).collect();
        let deltas = adapters
            .iter()
            .zip(&before)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let head_delta = model.head_flat().iter().zip(&head_before).map(|(x, y)| x - y).collect();
        let share = if self.config.ptls.enabled {
            select_shared(device, &tracker.importance(), self.config.ptls_k())?
        } else {
            ShareSet::all_shared(device, layers)
        };
        let profile = DeviceProfile::new(state.throughput, bandwidth, self.config.devices.mem_capacity_bytes, state.power)?;
        let mut cost = round_time(
            flops.total() as f64,
            self.upload_bytes(share.shared.len()),
            self.download_bytes(),
            &profile,
        );
        cost.peak_bytes = peak;
        cost.activation_bytes = peak_activations;
        if peak as f64 > profile.mem_capacity {
            warn!("device {device} needs {peak} bytes, above its {} byte capacity", profile.mem_capacity);
        }
        Ok(Some(LocalOutcome {
            device,
            deltas,
            head_delta,
            adapters,
            accuracy: acc,
            share,
            tracker,
            flops,
            cost,
            batches,
        }))
    }

    /// Runs one synchronous round and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        Ok(self.run_round_detailed()?.0)
    }

    /// Like [`Simulation::run_round`], also returning what each device
    /// sent back.
    pub fn run_round_detailed(&mut self) -> Result<(RoundMetrics, Vec<LocalOutcome>)> {
        self.round += 1;
        let round = self.round;
        let layers = self.config.model.layers;
        let fed = self.config.federation.clone();

        let mut rng = stream(self.seed, round as u64, STREAM_SAMPLING);
        let mut participants = index::sample(&mut rng, self.devices.len(), fed.devices_per_round).into_vec();
        participants.sort_unstable();
        let [lo, hi] = self.config.devices.bandwidth_mbps;
        let bandwidths: Vec<f64> = participants
            .iter()
            .map(|_| 1e6 * if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        let profiles: Vec<DeviceProfile> = participants
            .iter()
            .zip(&bandwidths)
            .map(|(&d, &bw)| {
                let s = &self.devices[d];
                DeviceProfile::new(s.throughput, bw, self.config.devices.mem_capacity_bytes, s.power)
            })
            .collect::<Result<_>>()?;

        let plan_seed = derive_seed(self.seed, round as u64, STREAM_PLANS);
        let (arm, plans) = match &mut self.policy {
            Policy::NoDropout => (None, vec![DropPlan::no_dropout(layers); participants.len()]),
            Policy::Fixed(arm) => (
                Some(*arm),
                expand_arm(arm, &profiles, layers, &self.config.configurator, plan_seed)?,
            ),
            Policy::Bandit(c) => {
                let a = c.next_assignment(&profiles, layers, plan_seed)?;
                (Some(a.arm), a.plans)
            }
        };

        let this = &*self;
        let train = |(i, &d): (usize, &usize)| this.local_train(d, &plans[i], bandwidths[i]);
        let results: Vec<Option<LocalOutcome>> = if fed.parallel {
            participants.par_iter().enumerate().map(train).collect::<Result<_>>()?
        } else {
            participants.iter().enumerate().map(train).collect::<Result<_>>()?
        };
        let outcomes: Vec<LocalOutcome> = results.into_iter().flatten().collect();
        if outcomes.is_empty() {
            return Err(Error::state(format!("round {round}: no sampled device could train")));
        }

        // aggregation
        let weights: Vec<f64> = outcomes
            .iter()
            .map(|o| match fed.weighting {
                Weighting::Uniform => 1.0,
                Weighting::Samples => self.devices[o.device].shard.train.len() as f64,
            })
            .collect();
        let updates: Vec<LayerUpdate> = outcomes
            .iter()
            .map(|o| LayerUpdate::from_share_set(&o.share, &o.deltas))
            .collect::<Result<_>>()?;
        let global_adapters: Vec<Vec<f64>> = (0..layers).map(|l| self.global.adapter_flat(l)).collect();
        let new_adapters = aggregate_weighted(&updates, &weights, &global_adapters)?;
        let head_updates: Vec<LayerUpdate> = outcomes
            .iter()
            .map(|o| LayerUpdate {
                device: o.device,
                layers: BTreeMap::from([(0, o.head_delta.clone())]),
            })
            .collect();
        let new_head = aggregate_weighted(&head_updates, &weights, &[self.global.head_flat()])?;
        for (l, values) in new_adapters.iter().enumerate() {
            self.global.set_adapter_flat(l, values)?;
        }
        self.global.set_head_flat(&new_head[0])?;

        // device bookkeeping and rewards
        let mut rewards = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            let dev = &mut self.devices[o.device];
            rewards.push(crate::configurator::reward(o.accuracy - dev.last_accuracy, o.cost.total_seconds)?);
            dev.last_accuracy = o.accuracy;
            dev.tracker = o.tracker.clone();
            dev.rounds_trained += 1;
            dev.personalized = o.share.personalized.iter().map(|&l| (l, o.adapters[l].clone())).collect();
        }
        if let (Policy::Bandit(c), Some(a)) = (&mut self.policy, arm) {
            c.record_outcome(&a, &rewards)?;
        }

        let round_seconds: Vec<f64> = outcomes.iter().map(|o| o.cost.total_seconds).collect();
        let step = round_seconds.iter().copied().fold(0.0, f64::max);
        self.wall_clock += step;
        let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
        let mean_acc = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let row = MetricsRow {
            round,
            wall_clock_s: self.wall_clock,
            mean_acc,
            flops: outcomes.iter().map(|o| o.flops.total()).sum(),
            traffic_bytes: outcomes.iter().map(|o| o.cost.traffic_bytes).sum(),
            energy_j: outcomes.iter().map(|o| o.cost.energy_joules).sum(),
            peak_mem_bytes: outcomes.iter().map(|o| o.cost.peak_bytes).max().unwrap_or(0),
            arm_id: arm.map_or_else(|| "none".to_string(), |a| a.id()),
        };
        info!(
            "round {round}: acc {mean_acc:.4} clock {:.2}s arm {} devices {:?}",
            self.wall_clock, row.arm_id, participants
        );
        debug!("round {round} rewards {rewards:?}");
        let metrics = RoundMetrics {
            row,
            layer_flops: outcomes.iter().map(|o| o.flops.layers).sum(),
            participants: outcomes.iter().map(|o| o.device).collect(),
            accuracies,
            rewards,
            shared_layers: outcomes.iter().map(|o| o.share.shared.len()).collect(),
            round_seconds,
        };
        Ok((metrics, outcomes))
    }

    /// Mean test accuracy over devices with a non-empty test slice, each
    /// evaluated with its personalized layers.
    pub fn final_accuracy(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut counted = 0;
        for dev in &self.devices {
            if dev.shard.test.is_empty() {
                continue;
            }
            let model = self.device_model(dev.id)?;
            total += accuracy(&model, &self.dataset, Split::Test, &dev.shard.test)?;
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::Evaluation("no device has test data".into()));
        }
        Ok(total / counted as f64)
    }

    /// Runs rounds until the target is reached (if stopping is enabled) or
    /// `max_rounds` have run.
    pub fn run(mut self) -> Result<ExperimentResult> {
        let target = self.config.configurator.target_accuracy;
        let mut rounds = Vec::new();
        while self.round < self.config.federation.max_rounds {
            let m = self.run_round()?;
            let reached = m.row.mean_acc >= target;
            rounds.push(m);
            if self.config.federation.stop_at_target && reached {
                info!("target accuracy {target} reached after {} rounds", self.round);
                break;
            }
        }
        let rows: Vec<MetricsRow> = rounds.iter().map(|r| r.row.clone()).collect();
        let summary = Summary {
            seed: self.seed,
            rounds: rounds.len(),
            target_accuracy: target,
            time_to_accuracy_s: time_to_accuracy(&rows, target),
            final_accuracy: self.final_accuracy()?,
            pretrain_accuracy: self.pretrain_accuracy,
            wall_clock_s: self.wall_clock,
            total_flops: rows.iter().map(|r| r.flops).sum(),
            total_layer_flops: rounds.iter().map(|r| r.layer_flops).sum(),
            total_traffic_bytes: rows.iter().map(|r| r.traffic_bytes).sum(),
            total_energy_j: rows.iter().map(|r| r.energy_j).sum(),
            peak_mem_bytes: rows.iter().map(|r| r.peak_mem_bytes).max().unwrap_or(0),
        };
        Ok(ExperimentResult {
            config: self.config,
            rounds,
            summary,
        })
    }
}

/// Generates data, pretrains, and runs the federated rounds of `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    Simulation::new(config)?.run()
}
