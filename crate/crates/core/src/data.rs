//! Synthetic sequence-classification data and Dirichlet label-skew
//! partitioning.
//!
//! Each class owns a disjoint band of `V / C` token ids. A token of a class-`c`
//! example comes from band `c` with probability `signal` and is uniform over
//! the whole vocabulary otherwise, so the label is recoverable from token
//! counts but not perfectly.

use std::io::{BufRead, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub examples: usize,
    /// Probability that a token is drawn from the class band.
    pub signal: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            examples: 8000,
            signal: 0.25,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::Config(format!("data.signal must be in [0, 1], got {}", self.signal)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    vocab: usize,
    seq_len: usize,
    classes: usize,
    train: Vec<Example>,
    validation: Vec<Example>,
    test: Vec<Example>,
}

impl Dataset {
    /// Validates token range, sequence length and class coverage.
    pub fn new(
        vocab: usize,
        seq_len: usize,
        classes: usize,
        train: Vec<Example>,
        validation: Vec<Example>,
        test: Vec<Example>,
    ) -> Result<Self> {
        let ds = Self {
            vocab,
            seq_len,
            classes,
            train,
            validation,
            test,
        };
        let mut seen = vec![false; classes];
        for (split, ex) in ds.iter() {
            if ex.tokens.len() != seq_len {
                return Err(Error::input(format!(
                    "{split:?} example has {} tokens, expected {seq_len}",
                    ex.tokens.len()
                )));
            }
            if let Some(t) = ex.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::input(format!("token {t} outside vocabulary of {vocab}")));
            }
            *seen
                .get_mut(ex.label)
                .ok_or_else(|| Error::input(format!("label {} outside {classes} classes", ex.label)))? = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::input(format!("class {c} never appears in the dataset")));
        }
        Ok(ds)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &Example)> {
        [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |e| (s, e)))
    }

    /// Gathers `indices` of one split into a model batch.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Batch {
        let data = self.split(split);
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend(data[i].tokens.iter().map(|&t| t as usize));
            labels.push(data[i].label);
        }
        Batch { tokens, labels }
    }

    /// Label counts of `indices` within one split.
    pub fn label_counts(&self, split: Split, indices: &[usize]) -> Vec<usize> {
        let data = self.split(split);
        let mut counts = vec![0; self.classes];
        for &i in indices {
            counts[data[i].label] += 1;
        }
        counts
    }

    /// Writes one JSON object per line: `{"split":…,"tokens":[…],"label":…}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            split: Split,
            tokens: &'a [u32],
            label: usize,
        }
        for (split, ex) in self.iter() {
            serde_json::to_writer(
                &mut w,
                &Line {
                    split,
                    tokens: &ex.tokens,
                    label: ex.label,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_jsonl`]. The sequence
    /// length is taken from the first line.
    pub fn read_jsonl<R: BufRead>(r: R, vocab: usize, classes: usize) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            split: Split,
            tokens: Vec<u32>,
            label: usize,
        }
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let mut seq_len = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::input(format!("line {}: {e}", n + 1)))?;
            seq_len.get_or_insert(parsed.tokens.len());
            let ex = Example {
                tokens: parsed.tokens,
                label: parsed.label,
            };
            match parsed.split {
                Split::Train => train.push(ex),
                Split::Validation => validation.push(ex),
                Split::Test => test.push(ex),
            }
        }
        let seq_len = seq_len.ok_or_else(|| Error::input("dataset file is empty"))?;
        Self::new(vocab, seq_len, classes, train, validation, test)
    }
}

/// Class-band token task with an 80/10/10 train/validation/test split.
/// Labels are exactly balanced and shuffled.
pub fn generate(vocab: usize, seq_len: usize, classes: usize, config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if classes == 0 || classes > vocab {
        return Err(Error::input(format!("need 1 <= classes <= vocab, got {classes} classes, vocab {vocab}")));
    }
    if seq_len == 0 {
        return Err(Error::input("seq_len must be >= 1"));
    }
    let n = config.examples;
    if n < classes {
        return Err(Error::input(format!("{n} examples cannot cover {classes} classes")));
    }
    let band = vocab / classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let examples: Vec<Example> = labels
        .into_iter()
        .map(|label| {
            let tokens = (0..seq_len)
                .map(|_| {
                    let t = if rng.random::<f64>() < config.signal {
                        label * band + rng.random_range(0..band)
                    } else {
                        rng.random_range(0..vocab)
                    };
                    t as u32
                })
                .collect();
            Example { tokens, label }
        })
        .collect();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut rest = examples;
    let test = rest.split_off(n_train + n_val);
    let validation = rest.split_off(n_train);
    Dataset::new(vocab, seq_len, classes, rest, validation, test)
}

/// Token band owning `token`, or `None` for the leftover ids when `V` is not
/// a multiple of `C`.
pub fn band_of(token: u32, vocab: usize, classes: usize) -> Option<usize> {
    let band = vocab / classes;
    let b = token as usize / band;
    (b < classes).then_some(b)
}

/// One device's indices into each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DeviceShard {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub alpha: f64,
    /// Per-class device shares that produced the shards.
    pub shares: Vec<Vec<f64>>,
    pub devices: Vec<DeviceShard>,
}

impl Partition {
    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    /// Mean over devices of KL(device train labels ‖ pooled train labels).
    pub fn mean_label_kl(&self, dataset: &Dataset) -> f64 {
        let all: Vec<usize> = (0..dataset.split(Split::Train).len()).collect();
        let global = normalize(&dataset.label_counts(Split::Train, &all));
        let total: f64 = self
            .devices
            .iter()
            .map(|d| kl_divergence(&normalize(&dataset.label_counts(Split::Train, &d.train)), &global))
            .sum();
        total / self.devices.len() as f64
    }
}

fn normalize(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// `KL(p ‖ q)`, with `0·ln 0 = 0`. Infinite when `p` has mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum()
}

/// Splits `total` by `shares` with largest-remainder rounding (ties to the
/// lower index). The result sums to `total` exactly.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

const MAX_ATTEMPTS: usize = 100;

/// Label-skewed split of every data split across devices. For each class the
/// device shares come from `Dir(α)`; the same shares split the validation and
/// test examples of that class. Shares are redrawn (up to 100 times) until
/// every device holds at least one training example; after that, empty
/// devices take one example each from the largest shard.
pub fn dirichlet_partition(dataset: &Dataset, num_devices: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::input(format!("alpha must be > 0, got {alpha}")));
    }
    if num_devices == 0 {
        return Err(Error::input("num_devices must be >= 1"));
    }
    let n_train = dataset.split(Split::Train).len();
    if num_devices > n_train {
        return Err(Error::input(format!(
            "{num_devices} devices cannot each hold one of {n_train} training examples"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::input(format!("alpha {alpha}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = |split: Split| -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); dataset.classes()];
        for (i, ex) in dataset.split(split).iter().enumerate() {
            out[ex.label].push(i);
        }
        out
    };
    let classes = [by_class(Split::Train), by_class(Split::Validation), by_class(Split::Test)];

    let mut best = None;
    for _ in 0..MAX_ATTEMPTS {
        let shares: Vec<Vec<f64>> = (0..dataset.classes())
            .map(|_| {
                loop {
                    let draw: Vec<f64> = (0..num_devices).map(|_| gamma.sample(&mut rng)).collect();
                    let sum: f64 = draw.iter().sum();
                    if sum > 0.0 {
                        break draw.into_iter().map(|g| g / sum).collect();
                    }
                }
            })
            .collect();
        let mut shuffled = classes.clone();
        for split in &mut shuffled {
            for idx in split.iter_mut() {
                idx.shuffle(&mut rng);
            }
        }
        let mut devices = vec![DeviceShard::default(); num_devices];
        for (s, split) in shuffled.iter().enumerate() {
            for (c, idx) in split.iter().enumerate() {
                let counts = largest_remainder(idx.len(), &shares[c]);
                let mut start = 0;
                for (d, &n) in counts.iter().enumerate() {
                    let target = match s {
                        0 => &mut devices[d].train,
                        1 => &mut devices[d].validation,
                        _ => &mut devices[d].test,
                    };
                    target.extend_from_slice(&idx[start..start + n]);
                    start += n;
                }
            }
        }
        let ok = devices.iter().all(|d| !d.train.is_empty());
        best = Some((shares, devices));
        if ok {
            break;
        }
    }
    let (shares, mut devices) = best.expect("at least one attempt");
    if devices.iter().any(|d| d.train.is_empty()) {
        warn!("dirichlet partition left empty devices after {MAX_ATTEMPTS} draws; moving single examples");
        for d in 0..num_devices {
            if devices[d].train.is_empty() {
                let donor = (0..num_devices)
                    .max_by_key(|&j| (devices[j].train.len(), std::cmp::Reverse(j)))
                    .expect("devices");
                let moved = devices[donor].train.pop().expect("donor has > 1 example");
                devices[d].train.push(moved);
            }
        }
    }
    for d in &mut devices {
        d.train.sort_unstable();
        d.validation.sort_unstable();
        d.test.sort_unstable();
    }
    Ok(Partition { alpha, shares, devices })
}
