//! Personalized transformer-layer sharing.
//!
//! Each device scores its layers by the mean gradient norm over the batches
//! in which the layer was active, keeps the `k` most important layers local
//! and uploads the rest. The server averages each layer only over the devices
//! that shared it. Layer indices are 0-based.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stld::LayerMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTracker {
    sums: Vec<f64>,
    counts: Vec<u64>,
    batches: u64,
}

impl ImportanceTracker {
    pub fn new(layers: usize) -> Self {
        Self {
            sums: vec![0.0; layers],
            counts: vec![0; layers],
            batches: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.sums.len()
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    /// Adds `g·(1−d)` to layer `l`'s sum and `1−d` to its count.
    pub fn accumulate(&mut self, l: usize, g: f64, dropped: bool) -> Result<()> {
        if l >= self.sums.len() {
            return Err(Error::input(format!("layer {l} out of range for {} layers", self.sums.len())));
        }
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::input(format!("gradient norm must be finite and >= 0, got {g}")));
        }
        if !dropped {
            self.sums[l] += g;
            self.counts[l] += 1;
        }
        Ok(())
    }

    /// Records one batch: `norms[l]` is the gradient norm of layer `l`
    /// (ignored where the mask dropped the layer).
    pub fn record_batch(&mut self, norms: &[f64], mask: &LayerMask) -> Result<()> {
        if norms.len() != self.sums.len() || mask.len() != self.sums.len() {
            return Err(Error::input(format!(
                "batch has {} norms and {} mask entries for {} layers",
                norms.len(),
                mask.len(),
                self.sums.len()
            )));
        }
        for (l, &g) in norms.iter().enumerate() {
            self.accumulate(l, g, mask.is_dropped(l))?;
        }
        self.batches += 1;
        Ok(())
    }

    /// `I_l = sum_l / count_l`; `None` for a layer that was never active.
    pub fn importance(&self) -> Vec<Option<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.batches = 0;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareSet {
    pub device: usize,
    /// Uploaded layers, ascending.
    pub shared: Vec<usize>,
    /// Retained layers, ascending.
    pub personalized: Vec<usize>,
}

impl ShareSet {
    /// Every layer shared.
    pub fn all_shared(device: usize, layers: usize) -> Self {
        Self {
            device,
            shared: (0..layers).collect(),
            personalized: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.personalized.len()
    }

    pub fn is_shared(&self, l: usize) -> bool {
        self.shared.binary_search(&l).is_ok()
    }
}

/// Keeps the `k` highest-importance layers personalized (ties to the lower
/// index; never-active layers rank below every scored layer) and shares the
/// rest.
pub fn select_shared(device: usize, importance: &[Option<f64>], k: usize) -> Result<ShareSet> {
    let layers = importance.len();
    if k > layers {
        return Err(Error::input(format!("k = {k} exceeds {layers} layers")));
    }
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &b| match (importance[a], importance[b]) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    let mut personalized = order[..k].to_vec();
    let mut shared = order[k..].to_vec();
    personalized.sort_unstable();
    shared.sort_unstable();
    Ok(ShareSet {
        device,
        shared,
        personalized,
    })
}

/// PEFT deltas a device uploads, keyed by layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub device: usize,
    pub layers: BTreeMap<usize, Vec<f64>>,
}

impl LayerUpdate {
    /// Keeps only the shared layers of `all` (one delta per layer).
    pub fn from_share_set(share: &ShareSet, all: &[Vec<f64>]) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for &l in &share.shared {
            let delta = all
                .get(l)
                .ok_or_else(|| Error::input(format!("no delta for shared layer {l}")))?;
            layers.insert(l, delta.clone());
        }
        Ok(Self {
            device: share.device,
            layers,
        })
    }

    /// Uploaded parameter count.
    pub fn elements(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }
}

/// For each layer, the unweighted mean of `global + delta` over the devices
/// that shared it, accumulated as a running mean in update order. Layers
/// nobody shared are returned untouched.
pub fn aggregate_heterogeneous(updates: &[LayerUpdate], global: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    aggregate_weighted(updates, &vec![1.0; updates.len()], global)
}

/// Like [`aggregate_heterogeneous`] with per-device weights (for example,
/// shard sizes), normalized over the sharers of each layer.
pub fn aggregate_weighted(updates: &[LayerUpdate], weights: &[f64], global: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if weights.len() != updates.len() {
        return Err(Error::input(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::input(format!("aggregation weight must be > 0, got {w}")));
    }
    for u in updates {
        for (&l, delta) in &u.layers {
            let g = global.get(l).ok_or_else(|| {
                Error::input(format!("device {} shares layer {l} beyond {} layers", u.device, global.len()))
            })?;
            if delta.len() != g.len() {
                return Err(Error::input(format!(
                    "device {} layer {l}: delta has {} values, layer has {}",
                    u.device,
                    delta.len(),
                    g.len()
                )));
            }
        }
    }
    let mut out = global.to_vec();
    for (l, slot) in out.iter_mut().enumerate() {
        let g = &global[l];
        let mut total = 0.0;
        for (u, &w) in updates.iter().zip(weights) {
            let Some(delta) = u.layers.get(&l) else { continue };
            // running mean: exact when every sharer submits the same values
            let first = total == 0.0;
            total += w;
            for ((m, &gi), &di) in slot.iter_mut().zip(g).zip(delta) {
                let x = gi + di;
                *m = if first { x } else { *m + (x - *m) / (total / w) };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accumulate_examples() {
        let mut t = ImportanceTracker::new(2);
        t.accumulate(0, 7.0, true).unwrap();
        assert_eq!(t.sums()[0], 0.0);
        assert_eq!(t.counts()[0], 0);
        for (g, d) in [(1.0, false), (2.0, true), (3.0, false)] {
            t.accumulate(1, g, d).unwrap();
        }
        assert_eq!(t.sums()[1], 4.0);
        assert_eq!(t.counts()[1], 2);
        assert_eq!(t.importance(), vec![None, Some(2.0)]);
        assert!(t.accumulate(0, -1.0, false).is_err());
        assert!(t.accumulate(2, 1.0, false).is_err());
    }

    #[test]
    fn record_batch_counts_batches() {
        let mut t = ImportanceTracker::new(3);
        t.record_batch(&[1.0, 1.0, 1.0], &LayerMask::new(vec![false, true, false])).unwrap();
        t.record_batch(&[3.0, 5.0, 1.0], &LayerMask::all_active(3)).unwrap();
        assert_eq!(t.batches(), 2);
        assert_eq!(t.importance(), vec![Some(2.0), Some(5.0), Some(1.0)]);
        assert!(t.counts().iter().all(|&c| c <= t.batches()));
        t.reset();
        assert_eq!(t.importance(), vec![None; 3]);
    }

    #[test]
    fn constant_norms_give_equal_scores() {
        let mut t = ImportanceTracker::new(4);
        t.record_batch(&[0.5; 4], &LayerMask::new(vec![true, false, false, true])).unwrap();
        t.record_batch(&[0.5; 4], &LayerMask::new(vec![false, false, true, true])).unwrap();
        let i = t.importance();
        assert_eq!(&i[..3], &[Some(0.5); 3]);
        assert_eq!(i[3], None);
    }

    #[test]
    fn selection_examples() {
        let i = [Some(5.0), Some(1.0), Some(3.0), Some(2.0)];
        let s = select_shared(0, &i, 2).unwrap();
        assert_eq!(s.personalized, vec![0, 2]);
        assert_eq!(s.shared, vec![1, 3]);
        assert_eq!(select_shared(0, &i, 0).unwrap().shared, vec![0, 1, 2, 3]);
        assert!(select_shared(0, &i, 4).unwrap().shared.is_empty());
        assert!(select_shared(0, &i, 5).is_err());
    }

    #[test]
    fn never_active_layers_rank_last() {
        let i = [None, Some(0.0), Some(1e-9), None];
        let s = select_shared(3, &i, 2).unwrap();
        assert_eq!(s.personalized, vec![1, 2]);
        // ties go to the lower index
        let s = select_shared(3, &[Some(1.0), Some(1.0), Some(1.0)], 1).unwrap();
        assert_eq!(s.personalized, vec![0]);
    }

    #[test]
    fn two_device_personalized_layer() {
        // device 0 keeps the middle layer; device 1 shares all three
        let global = vec![vec![0.0, 0.0], vec![10.0, 10.0], vec![1.0, -1.0]];
        let d0 = LayerUpdate {
            device: 0,
            layers: BTreeMap::from([(0, vec![2.0, 4.0]), (2, vec![1.0, 1.0])]),
        };
        let d1 = LayerUpdate {
            device: 1,
            layers: BTreeMap::from([(0, vec![4.0, 0.0]), (1, vec![-3.0, 5.0]), (2, vec![3.0, 1.0])]),
        };
        let out = aggregate_heterogeneous(&[d0, d1], &global).unwrap();
        assert_eq!(out[0], vec![3.0, 2.0]);
        assert_eq!(out[1], vec![7.0, 15.0]);
        assert_eq!(out[2], vec![3.0, 0.0]);
    }

    #[test]
    fn single_device_and_unshared_layers() {
        let global = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let u = LayerUpdate {
            device: 0,
            layers: BTreeMap::from([(0, vec![0.5, -0.5])]),
        };
        let out = aggregate_heterogeneous(&[u], &global).unwrap();
        assert_eq!(out[0], vec![0.1 + 0.5, 0.2 - 0.5]);
        assert_eq!(out[1].iter().map(|x| x.to_bits()).collect::<Vec<_>>(), global[1].iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let global = vec![vec![0.0; 3]];
        let bad = LayerUpdate {
            device: 0,
            layers: BTreeMap::from([(0, vec![0.0; 2])]),
        };
        assert!(aggregate_heterogeneous(&[bad], &global).is_err());
        let oob = LayerUpdate {
            device: 0,
            layers: BTreeMap::from([(1, vec![0.0; 3])]),
        };
        assert!(aggregate_heterogeneous(&[oob], &global).is_err());
    }

    #[test]
    fn weighted_mean() {
        let global = vec![vec![0.0]];
        let a = LayerUpdate {
            device: 0,
            layers: BTreeMap::from([(0, vec![1.0])]),
        };
        let b = LayerUpdate {
            device: 1,
            layers: BTreeMap::from([(0, vec![4.0])]),
        };
        let out = aggregate_weighted(&[a, b], &[2.0, 1.0], &global).unwrap();
        assert_eq!(out[0], vec![2.0]);
    }

    #[test]
    fn from_share_set_filters() {
        let all = vec![vec![1.0], vec![2.0], vec![3.0]];
        let share = select_shared(4, &[Some(0.1), Some(9.0), Some(0.2)], 1).unwrap();
        let u = LayerUpdate::from_share_set(&share, &all).unwrap();
        assert_eq!(u.layers.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(u.elements(), 2);
    }

    proptest! {
        #[test]
        fn share_set_partitions_layers(scores in proptest::collection::vec(proptest::option::of(0.0f64..10.0), 1..10), k in 0usize..10) {
            let k = k.min(scores.len());
            let s = select_shared(0, &scores, k).unwrap();
            prop_assert_eq!(s.k(), k);
            let mut all: Vec<usize> = s.shared.iter().chain(&s.personalized).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
        }

        #[test]
        fn identical_inputs_are_fixed_points(vals in proptest::collection::vec(-5.0f64..5.0, 4), n in 1usize..8) {
            let global = vec![vals.clone()];
            let updates: Vec<LayerUpdate> = (0..n)
                .map(|d| LayerUpdate { device: d, layers: BTreeMap::from([(0, vec![0.0; 4])]) })
                .collect();
            let out = aggregate_heterogeneous(&updates, &global).unwrap();
            prop_assert_eq!(&out[0], &vals);
        }
    }
}
