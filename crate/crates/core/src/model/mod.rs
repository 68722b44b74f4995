//! Toy pre-norm transformer classifier with frozen base layers and one
//! trainable bottleneck adapter per layer.
//!
//! A layer with `d_l = 0` computes `B_l(H) + A_l(B_l(H))` where `B_l` is the
//! frozen block and `A_l(x) = relu(x·D_l + b_D)·U_l + b_U` is the adapter. A
//! layer with `d_l = 1` is the identity and records nothing on the tape.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stld::LayerMask;
use crate::tensor::{
    grad_check_piecewise, BackwardFault, GradCheckOptions, GradCheckReport, Gradients, ParamId, Tape,
    Tensor, Var,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub peft_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 32,
            heads: 2,
            ffn: 64,
            vocab: 64,
            seq_len: 16,
            classes: 4,
            peft_width: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("model.layers must be >= 1".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.peft_width == 0 || self.peft_width > self.hidden {
            return fail(format!(
                "model.peft_width must be in [1, hidden={}], got {}",
                self.hidden, self.peft_width
            ));
        }
        for (name, v) in [
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be >= 1"));
            }
        }
        Ok(())
    }

    /// Frozen parameters in one transformer block.
    pub fn base_layer_params(&self) -> usize {
        let (h, f) = (self.hidden, self.ffn);
        4 * h * h + 4 * h + 2 * h * f + f + h + 4 * h
    }

    /// Trainable adapter parameters in one layer.
    pub fn peft_layer_params(&self) -> usize {
        let (h, r) = (self.hidden, self.peft_width);
        2 * h * r + r + h
    }

    pub fn head_params(&self) -> usize {
        self.hidden * self.classes + self.classes
    }

    /// Embedding tables, all blocks, and the final norm.
    pub fn base_params(&self) -> usize {
        (self.vocab + self.seq_len) * self.hidden
            + self.layers * self.base_layer_params()
            + 2 * self.hidden
    }

    pub fn total_params(&self) -> usize {
        self.base_params() + self.layers * self.peft_layer_params() + self.head_params()
    }

    /// Analytic forward+backward flops of one fine-tuning step.
    ///
    /// Per active layer the forward pass costs `2·params·b·s` plus the
    /// attention score/mix term `4·b·s²·h`; the backward pass costs one
    /// more forward through frozen paths and two through trainable ones.
    pub fn count_flops(&self, mask: &LayerMask, batch: usize, seq: usize) -> Result<FlopCount> {
        if mask.len() != self.layers {
            return Err(Error::input(format!(
                "mask has {} entries for {} layers",
                mask.len(),
                self.layers
            )));
        }
        let (b, s, h) = (batch as u64, seq as u64, self.hidden as u64);
        let fwd_base = 2 * self.base_layer_params() as u64 * b * s + 4 * b * s * s * h;
        let fwd_peft = 2 * self.peft_layer_params() as u64 * b * s;
        let per_layer = 2 * fwd_base + 3 * fwd_peft;
        let head = 2 * self.head_params() as u64 * b;
        Ok(FlopCount {
            layers: per_layer * mask.active_count() as u64,
            constant: b * s * h + 3 * head,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Work inside transformer layers; scales with the active count.
    pub layers: u64,
    /// Embedding and classifier head; independent of the mask.
    pub constant: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.layers + self.constant
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: Self) {
        self.layers += rhs.layers;
        self.constant += rhs.constant;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Block(usize),
    FinalNorm,
    Adapter(usize),
    Head,
}

impl ParamGroup {
    pub fn is_base(self) -> bool {
        matches!(
            self,
            ParamGroup::Embedding | ParamGroup::Block(_) | ParamGroup::FinalNorm
        )
    }
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Fine-tuning: adapters and head only, base frozen.
    Adapters,
    /// Central pretraining: everything.
    Full,
}

impl TrainScope {
    fn trains(self, group: ParamGroup) -> bool {
        match self {
            TrainScope::Full => true,
            TrainScope::Adapters => !group.is_base(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct AdapterIds {
    down: ParamId,
    down_bias: ParamId,
    up: ParamId,
    up_bias: ParamId,
}

impl AdapterIds {
    fn all(&self) -> [ParamId; 4] {
        [self.down, self.down_bias, self.up, self.up_bias]
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    final_gamma: ParamId,
    final_beta: ParamId,
    adapters: Vec<AdapterIds>,
    head_w: ParamId,
    head_b: ParamId,
}

/// A classification batch of `b` sequences, all of the model's `seq_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Saved state of one `forward_stld` call.
pub struct ActivationCache {
    tape: Tape,
    loss: Var,
    logits: Var,
    hidden: Vec<Var>,
    mask: LayerMask,
    layers: Vec<Option<usize>>,
    batch: usize,
}

impl ActivationCache {
    /// Cached element count of layer `l`; `None` when the layer was dropped.
    pub fn layer_elements(&self, layer: usize) -> Option<usize> {
        self.layers[layer]
    }

    /// Elements cached across all active layers.
    pub fn layer_total(&self) -> usize {
        self.layers.iter().flatten().sum()
    }

    /// `H_l` for `l` in `0..=L`; `H_0` is the embedding output.
    pub fn hidden_state(&self, l: usize) -> &Tensor {
        self.tape.value(self.hidden[l])
    }

    pub fn mask(&self) -> &LayerMask {
        &self.mask
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Sign pattern of every relu input in the pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.tape.relu_pattern()
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.tape.inject_fault(fault);
    }
}

pub struct ForwardPass {
    pub loss: f64,
    pub cache: ActivationCache,
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.params.push(Param { name, group, tensor });
        ParamId(self.params.len() - 1)
    }
}

impl TransformerStack {
    /// Seeded random initialization. Adapter up-projections start at zero,
    /// so a fresh adapter is the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], fan_in: usize| {
            let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(&mut rng)).collect())
                .expect("shape matches")
        };
        let (h, f, r, c) = (config.hidden, config.ffn, config.peft_width, config.classes);
        let mut b = Builder { params: Vec::new() };
        let tok = b.add("tok_embed".into(), ParamGroup::Embedding, init(&[config.vocab, h], 1));
        let pos = b.add("pos_embed".into(), ParamGroup::Embedding, init(&[config.seq_len, h], 4));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let g = ParamGroup::Block(l);
            let name = |s: &str| format!("layer{l}.{s}");
            let ones = Tensor::filled(&[h], 1.0);
            let zeros = Tensor::zeros(&[h]);
            blocks.push(BlockIds {
                ln1_gamma: b.add(name("ln1_gamma"), g, ones.clone()),
                ln1_beta: b.add(name("ln1_beta"), g, zeros.clone()),
                wq: b.add(name("wq"), g, init(&[h, h], h)),
                bq: b.add(name("bq"), g, zeros.clone()),
                wk: b.add(name("wk"), g, init(&[h, h], h)),
                bk: b.add(name("bk"), g, zeros.clone()),
                wv: b.add(name("wv"), g, init(&[h, h], h)),
                bv: b.add(name("bv"), g, zeros.clone()),
                wo: b.add(name("wo"), g, init(&[h, h], 4 * h)),
                bo: b.add(name("bo"), g, zeros.clone()),
                ln2_gamma: b.add(name("ln2_gamma"), g, ones),
                ln2_beta: b.add(name("ln2_beta"), g, zeros.clone()),
                w1: b.add(name("w1"), g, init(&[h, f], h)),
                b1: b.add(name("b1"), g, Tensor::zeros(&[f])),
                w2: b.add(name("w2"), g, init(&[f, h], 4 * f)),
                b2: b.add(name("b2"), g, zeros),
            });
        }
        let final_gamma = b.add("final_gamma".into(), ParamGroup::FinalNorm, Tensor::filled(&[h], 1.0));
        let final_beta = b.add("final_beta".into(), ParamGroup::FinalNorm, Tensor::zeros(&[h]));
        let mut adapters = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let g = ParamGroup::Adapter(l);
            adapters.push(AdapterIds {
                down: b.add(format!("layer{l}.adapter_down"), g, init(&[h, r], h)),
                down_bias: b.add(format!("layer{l}.adapter_down_bias"), g, Tensor::zeros(&[r])),
                up: b.add(format!("layer{l}.adapter_up"), g, Tensor::zeros(&[r, h])),
                up_bias: b.add(format!("layer{l}.adapter_up_bias"), g, Tensor::zeros(&[h])),
            });
        }
        let head_w = b.add("head_weight".into(), ParamGroup::Head, init(&[h, c], h));
        let head_b = b.add("head_bias".into(), ParamGroup::Head, Tensor::zeros(&[c]));
        Ok(Self {
            config,
            params: b.params,
            layout: Layout {
                tok,
                pos,
                blocks,
                final_gamma,
                final_beta,
                adapters,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn base_param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group.is_base())
            .map(|(i, _)| ParamId(i))
    }

    pub fn adapter_ids(&self, layer: usize) -> [ParamId; 4] {
        self.layout.adapters[layer].all()
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.layout.head_w, self.layout.head_b]
    }

    /// Adapters of every layer followed by the head, in layout order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.config.layers)
            .flat_map(|l| self.adapter_ids(l))
            .collect();
        ids.extend(self.head_ids());
        ids
    }

    pub fn count_params(&self, pred: impl Fn(ParamGroup) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.group))
            .map(|p| p.tensor.len())
            .sum()
    }

    fn flat(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|id| self.params[id.0].tensor.data().iter().copied())
            .collect()
    }

    fn set_flat(&mut self, ids: &[ParamId], values: &[f64]) -> Result<()> {
        let need: usize = ids.iter().map(|id| self.params[id.0].tensor.len()).sum();
        if need != values.len() {
            return Err(Error::shape(
                "set_flat",
                format!("expected {need} values, got {}", values.len()),
            ));
        }
        let mut off = 0;
        for id in ids {
            let t = self.params[id.0].tensor.data_mut();
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// Adapter parameters of one layer as a flat vector.
    pub fn adapter_flat(&self, layer: usize) -> Vec<f64> {
        self.flat(&self.adapter_ids(layer))
    }

    pub fn set_adapter_flat(&mut self, layer: usize, values: &[f64]) -> Result<()> {
        let ids = self.adapter_ids(layer);
        self.set_flat(&ids, values)
    }

    pub fn head_flat(&self) -> Vec<f64> {
        self.flat(&self.head_ids())
    }

    pub fn set_head_flat(&mut self, values: &[f64]) -> Result<()> {
        let ids = self.head_ids();
        self.set_flat(&ids, values)
    }

    /// Zeroes the classifier head.
    pub fn reset_head(&mut self) {
        for id in self.head_ids() {
            self.params[id.0].tensor.data_mut().fill(0.0);
        }
    }

    /// Bitwise comparison of all frozen parameters.
    pub fn base_equals(&self, other: &TransformerStack) -> bool {
        self.config == other.config
            && self
                .base_param_ids()
                .all(|id| bits(&self.params[id.0].tensor) == bits(&other.params[id.0].tensor))
    }

    /// A stack made of a subset of this stack's layers (0-based, in the
    /// given order) with identical weights.
    pub fn restack(&self, keep: &[usize]) -> Result<TransformerStack> {
        if keep.is_empty() || keep.iter().any(|&l| l >= self.config.layers) {
            return Err(Error::input(format!("invalid layer subset {keep:?}")));
        }
        let config = ModelConfig {
            layers: keep.len(),
            ..self.config.clone()
        };
        let mut out = TransformerStack::new(config, 0)?;
        for p in &mut out.params {
            let source = match p.group {
                ParamGroup::Block(l) | ParamGroup::Adapter(l) => {
                    let prefix = format!("layer{l}.");
                    let rest = p.name.strip_prefix(&prefix).expect("layer prefix");
                    format!("layer{}.{rest}", keep[l])
                }
                _ => p.name.clone(),
            };
            let id = self.param_id(&source).expect("same architecture");
            p.tensor = self.params[id.0].tensor.clone();
        }
        Ok(out)
    }

    fn leaf(&self, tape: &mut Tape, id: ParamId, scope: TrainScope) -> Var {
        let p = &self.params[id.0];
        if scope.trains(p.group) {
            tape.param(id, p.tensor.clone())
        } else {
            tape.constant(p.tensor.clone())
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (s, v) = (self.config.seq_len, self.config.vocab);
        if batch.labels.is_empty() || batch.tokens.len() != batch.labels.len() * s {
            return Err(Error::shape(
                "batch",
                format!(
                    "{} tokens for {} sequences of length {s}",
                    batch.tokens.len(),
                    batch.labels.len()
                ),
            ));
        }
        if let Some(bad) = batch.tokens.iter().find(|&&t| t >= v) {
            return Err(Error::input(format!("token {bad} >= vocab {v}")));
        }
        if let Some(bad) = batch.labels.iter().find(|&&c| c >= self.config.classes) {
            return Err(Error::input(format!("label {bad} >= classes {}", self.config.classes)));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, batch: &Batch, scope: TrainScope) -> Result<Var> {
        let s = self.config.seq_len;
        let tok = self.leaf(tape, self.layout.tok, scope);
        let pos = self.leaf(tape, self.layout.pos, scope);
        let x = tape.gather(tok, &batch.tokens)?;
        let positions: Vec<usize> = (0..batch.tokens.len()).map(|i| i % s).collect();
        let p = tape.gather(pos, &positions)?;
        tape.add(x, p)
    }

    /// Pre-norm block: `H' = H + MHA(LN(H))`, `out = H' + FFN(LN(H'))`.
    fn block(&self, tape: &mut Tape, l: usize, x: Var, batch: usize, scope: TrainScope) -> Result<Var> {
        let ids = &self.layout.blocks[l];
        let mut p = |id| self.leaf(tape, id, scope);
        let (g1, b1n) = (p(ids.ln1_gamma), p(ids.ln1_beta));
        let (wq, bq, wk, bk) = (p(ids.wq), p(ids.bq), p(ids.wk), p(ids.bk));
        let (wv, bv, wo, bo) = (p(ids.wv), p(ids.bv), p(ids.wo), p(ids.bo));
        let (g2, b2n) = (p(ids.ln2_gamma), p(ids.ln2_beta));
        let (w1, b1, w2, b2) = (p(ids.w1), p(ids.b1), p(ids.w2), p(ids.b2));

        let a = tape.layer_norm(x, g1, b1n, LAYER_NORM_EPS)?;
        let q = tape.matmul(a, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(a, wk)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(a, wv)?;
        let v = tape.add_bias(v, bv)?;
        let att = tape.attention(q, k, v, batch, self.config.seq_len, self.config.heads)?;
        let o = tape.matmul(att, wo)?;
        let o = tape.add_bias(o, bo)?;
        let mid = tape.add(x, o)?;

        let c = tape.layer_norm(mid, g2, b2n, LAYER_NORM_EPS)?;
        let f = tape.matmul(c, w1)?;
        let f = tape.add_bias(f, b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_bias(f, b2)?;
        tape.add(mid, f)
    }

    fn adapter(&self, tape: &mut Tape, l: usize, x: Var, scope: TrainScope) -> Result<Var> {
        let ids = &self.layout.adapters[l];
        let down = self.leaf(tape, ids.down, scope);
        let down_b = self.leaf(tape, ids.down_bias, scope);
        let up = self.leaf(tape, ids.up, scope);
        let up_b = self.leaf(tape, ids.up_bias, scope);
        let d = tape.matmul(x, down)?;
        let d = tape.add_bias(d, down_b)?;
        let d = tape.relu(d);
        let u = tape.matmul(d, up)?;
        let u = tape.add_bias(u, up_b)?;
        tape.add(x, u)
    }

    /// Applies frozen block `l` to hidden states of shape `[b, s, h]`.
    pub fn block_forward(&self, l: usize, hidden: &Tensor) -> Result<Tensor> {
        let (s, h) = (self.config.seq_len, self.config.hidden);
        if l >= self.config.layers {
            return Err(Error::input(format!("layer {l} out of range")));
        }
        let shape = hidden.shape().to_vec();
        if shape.len() != 3 || shape[1] != s || shape[2] != h {
            return Err(Error::shape("block_forward", format!("{shape:?}, expected [b, {s}, {h}]")));
        }
        let mut tape = Tape::new();
        let x = tape.constant(hidden.clone().reshape(vec![shape[0] * s, h])?);
        let y = self.block(&mut tape, l, x, shape[0], TrainScope::Adapters)?;
        tape.value(y).clone().reshape(shape)
    }

    /// Forward pass under a layer mask, keeping what the backward pass needs.
    pub fn forward_stld(&self, batch: &Batch, mask: &LayerMask, scope: TrainScope) -> Result<ForwardPass> {
        if mask.len() != self.config.layers {
            return Err(Error::input(format!(
                "mask has {} entries for {} layers",
                mask.len(),
                self.config.layers
            )));
        }
        self.check_batch(batch)?;
        let b = batch.size();
        let mut tape = Tape::new();
        let mut x = self.embed(&mut tape, batch, scope)?;
        let mut hidden = vec![x];
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            if mask.is_dropped(l) {
                layers.push(None);
            } else {
                let start = tape.len();
                let out = self.block(&mut tape, l, x, b, scope)?;
                x = self.adapter(&mut tape, l, out, scope)?;
                layers.push(Some(tape.activation_elements(start..tape.len())));
            }
            hidden.push(x);
        }
        let fg = self.leaf(&mut tape, self.layout.final_gamma, scope);
        let fb = self.leaf(&mut tape, self.layout.final_beta, scope);
        let hw = self.leaf(&mut tape, self.layout.head_w, scope);
        let hb = self.leaf(&mut tape, self.layout.head_b, scope);
        let y = tape.layer_norm(x, fg, fb, LAYER_NORM_EPS)?;
        let pooled = tape.mean_pool(y, b)?;
        let logits = tape.matmul(pooled, hw)?;
        let logits = tape.add_bias(logits, hb)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        let loss_value = tape.value(loss).data()[0];
        Ok(ForwardPass {
            loss: loss_value,
            cache: ActivationCache {
                tape,
                loss,
                logits,
                hidden,
                mask: mask.clone(),
                layers,
                batch: b,
            },
        })
    }

    /// Gradients of the loss recorded in `cache`. In adapter scope the
    /// result holds every adapter parameter (exact zeros for dropped
    /// layers) and the head; frozen parameters never appear.
    pub fn backward_stld(&self, cache: &ActivationCache, mask: &LayerMask) -> Result<Gradients> {
        if cache.mask != *mask {
            return Err(Error::state("mask differs from the one used in forward_stld"));
        }
        let mut grads = cache.tape.backward(cache.loss)?;
        for id in self.trainable_ids() {
            if !grads.contains(id) {
                grads.insert(id, Tensor::zeros(self.params[id.0].tensor.shape()));
            }
        }
        Ok(grads)
    }

    /// Logits with every layer active and nothing retained for backward.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let pass = self.forward_stld(batch, &LayerMask::all_active(self.config.layers), TrainScope::Adapters)?;
        Ok(pass.cache.logits().clone())
    }

    /// Number of correct argmax predictions.
    pub fn correct(&self, batch: &Batch) -> Result<usize> {
        let logits = self.logits(batch)?;
        let c = self.config.classes;
        Ok(logits
            .data()
            .chunks(c)
            .zip(&batch.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count())
    }

    /// Full-depth accuracy, no layer dropout and no output rescaling.
    pub fn eval_forward(&self, batch: &Batch) -> Result<f64> {
        Ok(self.correct(batch)? as f64 / batch.size() as f64)
    }

    /// Flat parameter vector for `scope` in layout order.
    pub fn scope_ids(&self, scope: TrainScope) -> Vec<ParamId> {
        match scope {
            TrainScope::Adapters => self.trainable_ids(),
            TrainScope::Full => (0..self.params.len()).map(ParamId).collect(),
        }
    }

    /// Checks tape gradients of the batch loss against central differences
    /// over the parameters `scope` trains. Coordinates whose difference
    /// interval flips an adapter relu are replaced by others (see
    /// [`grad_check_piecewise`]).
    pub fn grad_check(
        &self,
        batch: &Batch,
        mask: &LayerMask,
        scope: TrainScope,
        opts: &GradCheckOptions,
        fault: Option<BackwardFault>,
    ) -> Result<GradCheckReport> {
        let ids = self.scope_ids(scope);
        let theta = self.flat(&ids);
        let mut probe = self.clone();
        let mut value = |t: &[f64]| -> Result<(f64, Vec<bool>)> {
            probe.set_flat(&ids, t)?;
            let pass = probe.forward_stld(batch, mask, scope)?;
            Ok((pass.loss, pass.cache.relu_pattern()))
        };
        let mut grad_probe = self.clone();
        let gradient = |t: &[f64]| -> Result<Vec<f64>> {
            grad_probe.set_flat(&ids, t)?;
            let mut pass = grad_probe.forward_stld(batch, mask, scope)?;
            if let Some(f) = fault {
                pass.cache.inject_fault(f);
            }
            let grads = grad_probe.backward_stld(&pass.cache, mask)?;
            Ok(ids
                .iter()
                .flat_map(|id| match grads.get(*id) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; grad_probe.params[id.0].tensor.len()],
                })
                .collect())
        };
        grad_check_piecewise(&theta, &mut value, gradient, opts)
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
