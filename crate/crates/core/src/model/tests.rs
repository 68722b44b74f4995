use super::*;
use rand::Rng;

fn random_batch(config: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        tokens: (0..b * config.seq_len).map(|_| rng.random_range(0..config.vocab)).collect(),
        labels: (0..b).map(|_| rng.random_range(0..config.classes)).collect(),
    }
}

/// Gives every adapter nonzero weights so adapter paths carry gradient.
fn perturb_adapters(stack: &mut TransformerStack, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in stack.trainable_ids() {
        for x in stack.param_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn tensor(p: &TransformerStack, name: &str) -> Vec<f64> {
    p.param(p.param_id(name).unwrap()).tensor.data().to_vec()
}

// Straight-line reference: plain nested loops, no tape, no gemm.
mod oracle {
    pub fn matmul(x: &[f64], rows: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += x[r * k + t] * w[t * n + j];
                }
                out[r * n + j] = acc;
            }
        }
        out
    }

    pub fn add_bias(x: &mut [f64], b: &[f64]) {
        for row in x.chunks_mut(b.len()) {
            for (a, c) in row.iter_mut().zip(b) {
                *a += c;
            }
        }
    }

    pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let h = g.len();
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(h).enumerate() {
            let mean: f64 = row.iter().sum::<f64>() / h as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            for j in 0..h {
                out[r * h + j] = (row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j];
            }
        }
        out
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn attention(q: &[f64], k: &[f64], v: &[f64], b: usize, s: usize, h: usize, heads: usize) -> Vec<f64> {
        let dh = h / heads;
        let mut out = vec![0.0; b * s * h];
        for bi in 0..b {
            for hd in 0..heads {
                for i in 0..s {
                    let mut scores = vec![0.0; s];
                    for j in 0..s {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[(bi * s + i) * h + hd * dh + c] * k[(bi * s + j) * h + hd * dh + c];
                        }
                        scores[j] = dot / (dh as f64).sqrt();
                    }
                    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..s {
                        let p = (scores[j] - max).exp() / z;
                        for c in 0..dh {
                            out[(bi * s + i) * h + hd * dh + c] += p * v[(bi * s + j) * h + hd * dh + c];
                        }
                    }
                }
            }
        }
        out
    }
}

fn oracle_block(p: &TransformerStack, l: usize, x: &[f64], b: usize) -> Vec<f64> {
    let c = p.config();
    let (s, h, f) = (c.seq_len, c.hidden, c.ffn);
    let n = |s: &str| tensor(p, &format!("layer{l}.{s}"));
    let rows = b * s;
    let a = oracle::layer_norm(x, &n("ln1_gamma"), &n("ln1_beta"));
    let mut q = oracle::matmul(&a, rows, h, &n("wq"), h);
    oracle::add_bias(&mut q, &n("bq"));
    let mut k = oracle::matmul(&a, rows, h, &n("wk"), h);
    oracle::add_bias(&mut k, &n("bk"));
    let mut v = oracle::matmul(&a, rows, h, &n("wv"), h);
    oracle::add_bias(&mut v, &n("bv"));
    let att = oracle::attention(&q, &k, &v, b, s, h, c.heads);
    let mut o = oracle::matmul(&att, rows, h, &n("wo"), h);
    oracle::add_bias(&mut o, &n("bo"));
    let mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let cn = oracle::layer_norm(&mid, &n("ln2_gamma"), &n("ln2_beta"));
    let mut f1 = oracle::matmul(&cn, rows, h, &n("w1"), f);
    oracle::add_bias(&mut f1, &n("b1"));
    let f1: Vec<f64> = f1.into_iter().map(oracle::gelu).collect();
    let mut f2 = oracle::matmul(&f1, rows, f, &n("w2"), h);
    oracle::add_bias(&mut f2, &n("b2"));
    mid.iter().zip(&f2).map(|(a, b)| a + b).collect()
}

fn oracle_adapter(p: &TransformerStack, l: usize, x: &[f64], rows: usize) -> Vec<f64> {
    let c = p.config();
    let n = |s: &str| tensor(p, &format!("layer{l}.{s}"));
    let mut d = oracle::matmul(x, rows, c.hidden, &n("adapter_down"), c.peft_width);
    oracle::add_bias(&mut d, &n("adapter_down_bias"));
    let d: Vec<f64> = d.into_iter().map(|v| v.max(0.0)).collect();
    let mut u = oracle::matmul(&d, rows, c.peft_width, &n("adapter_up"), c.hidden);
    oracle::add_bias(&mut u, &n("adapter_up_bias"));
    x.iter().zip(&u).map(|(a, b)| a + b).collect()
}

/// Loss of a full-depth forward computed without any mask machinery.
fn oracle_loss(p: &TransformerStack, batch: &Batch) -> f64 {
    let c = p.config();
    let (s, h, b) = (c.seq_len, c.hidden, batch.size());
    let tok = tensor(p, "tok_embed");
    let pos = tensor(p, "pos_embed");
    let mut x = vec![0.0; b * s * h];
    for (i, &t) in batch.tokens.iter().enumerate() {
        for j in 0..h {
            x[i * h + j] = tok[t * h + j] + pos[(i % s) * h + j];
        }
    }
    for l in 0..c.layers {
        let y = oracle_block(p, l, &x, b);
        x = oracle_adapter(p, l, &y, b * s);
    }
    let y = oracle::layer_norm(&x, &tensor(p, "final_gamma"), &tensor(p, "final_beta"));
    let mut pooled = vec![0.0; b * h];
    for bi in 0..b {
        for i in 0..s {
            for j in 0..h {
                pooled[bi * h + j] += y[(bi * s + i) * h + j] / s as f64;
            }
        }
    }
    let mut logits = oracle::matmul(&pooled, b, h, &tensor(p, "head_weight"), c.classes);
    oracle::add_bias(&mut logits, &tensor(p, "head_bias"));
    let mut loss = 0.0;
    for (row, &label) in logits.chunks(c.classes).zip(&batch.labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        loss -= (row[label].exp() / z).ln();
    }
    loss / b as f64
}

#[test]
fn default_config_is_valid_and_peft_is_small() {
    let c = ModelConfig::default();
    c.validate().unwrap();
    let stack = TransformerStack::new(c.clone(), 1).unwrap();
    let base = stack.count_params(ParamGroup::is_base);
    let peft = stack.count_params(|g| matches!(g, ParamGroup::Adapter(_)));
    assert_eq!(base, c.base_params());
    assert_eq!(peft, c.layers * c.peft_layer_params());
    assert_eq!(stack.count_params(|_| true), c.total_params());
    assert!((peft as f64) < 0.05 * base as f64, "{peft} vs {base}");
}

#[test]
fn config_validation() {
    let bad = |f: fn(&mut ModelConfig)| {
        let mut c = ModelConfig::default();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.heads = 3));
    assert!(bad(|c| c.layers = 0));
    assert!(bad(|c| c.peft_width = 0));
    assert!(bad(|c| c.peft_width = 33));
}

#[test]
fn block_forward_matches_straight_line_oracle() {
    let config = ModelConfig {
        layers: 1,
        ..Default::default()
    };
    let stack = TransformerStack::new(config.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = 3;
    let x: Vec<f64> = (0..b * config.seq_len * config.hidden)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let input = Tensor::new(vec![b, config.seq_len, config.hidden], x.clone()).unwrap();
    let out = stack.block_forward(0, &input).unwrap();
    assert_eq!(out.shape(), input.shape());
    let expected = oracle_block(&stack, 0, &x, b);
    for (a, e) in out.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn zero_weights_pass_residual_through() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 5).unwrap();
    for name in ["wo", "bo", "w2", "b2"] {
        let id = stack.param_id(&format!("layer2.{name}")).unwrap();
        stack.param_mut(id).data_mut().fill(0.0);
    }
    let c = stack.config().clone();
    let input = Tensor::filled(&[2, c.seq_len, c.hidden], 0.37);
    assert_eq!(stack.block_forward(2, &input).unwrap(), input);
    assert!(stack.block_forward(6, &input).is_err());
    assert!(stack.block_forward(0, &Tensor::zeros(&[2, 3, 4])).is_err());
}

#[test]
fn all_dropped_stack_returns_embedding() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 6).unwrap();
    perturb_adapters(&mut stack, 1, 0.3);
    let batch = random_batch(stack.config(), 4, 7);
    let mask = LayerMask::all_dropped(6);
    let pass = stack.forward_stld(&batch, &mask, TrainScope::Adapters).unwrap();
    let embed = pass.cache.hidden_state(0);
    for l in 1..=6 {
        assert_eq!(bits(pass.cache.hidden_state(l)), bits(embed));
    }
    assert_eq!(pass.cache.layer_total(), 0);
}

#[test]
fn all_active_mask_matches_unmasked_oracle() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 8).unwrap();
    perturb_adapters(&mut stack, 2, 0.3);
    let batch = random_batch(stack.config(), 3, 9);
    let pass = stack
        .forward_stld(&batch, &LayerMask::all_active(6), TrainScope::Adapters)
        .unwrap();
    let expected = oracle_loss(&stack, &batch);
    assert!((pass.loss - expected).abs() < 1e-12, "{} vs {expected}", pass.loss);
    // evaluation path is the same computation
    assert_eq!(bits(&stack.logits(&batch).unwrap()), bits(pass.cache.logits()));
}

#[test]
fn dropping_a_layer_equals_restacked_model() {
    let config = ModelConfig {
        layers: 3,
        ..Default::default()
    };
    let mut stack = TransformerStack::new(config, 10).unwrap();
    perturb_adapters(&mut stack, 3, 0.3);
    let batch = random_batch(stack.config(), 4, 11);
    let masked = stack
        .forward_stld(&batch, &LayerMask::new(vec![false, true, false]), TrainScope::Adapters)
        .unwrap();
    let reduced = stack.restack(&[0, 2]).unwrap();
    let full = reduced
        .forward_stld(&batch, &LayerMask::all_active(2), TrainScope::Adapters)
        .unwrap();
    assert_eq!(masked.loss.to_bits(), full.loss.to_bits());
    assert_eq!(bits(masked.cache.logits()), bits(full.cache.logits()));
}

#[test]
fn mask_length_checked() {
    let stack = TransformerStack::new(ModelConfig::default(), 1).unwrap();
    let batch = random_batch(stack.config(), 2, 1);
    assert!(matches!(
        stack.forward_stld(&batch, &LayerMask::all_active(5), TrainScope::Adapters),
        Err(Error::Input(_))
    ));
}

#[test]
fn backward_respects_mask_and_frozen_base() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 12).unwrap();
    perturb_adapters(&mut stack, 4, 0.3);
    let batch = random_batch(stack.config(), 4, 13);
    let mask = LayerMask::new(vec![false, true, false, true, true, false]);
    let pass = stack.forward_stld(&batch, &mask, TrainScope::Adapters).unwrap();
    let grads = stack.backward_stld(&pass.cache, &mask).unwrap();
    for id in stack.base_param_ids() {
        assert!(grads.get(id).is_none());
    }
    for l in 0..6 {
        let norm = grads.norm_over(&stack.adapter_ids(l));
        assert!(stack.adapter_ids(l).iter().all(|id| grads.contains(*id)));
        if mask.is_dropped(l) {
            assert_eq!(norm, 0.0);
        } else {
            assert!(norm > 0.0);
        }
    }
    let other = LayerMask::all_active(6);
    assert!(matches!(stack.backward_stld(&pass.cache, &other), Err(Error::State(_))));
}

#[test]
fn all_dropped_only_head_gradients() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 14).unwrap();
    perturb_adapters(&mut stack, 5, 0.3);
    let batch = random_batch(stack.config(), 4, 15);
    let mask = LayerMask::all_dropped(6);
    let pass = stack.forward_stld(&batch, &mask, TrainScope::Adapters).unwrap();
    let grads = stack.backward_stld(&pass.cache, &mask).unwrap();
    for (id, g) in grads.iter() {
        let nonzero = g.data().iter().any(|x| *x != 0.0);
        assert_eq!(nonzero, stack.param(id).group == ParamGroup::Head, "{}", stack.param(id).name);
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 16).unwrap();
    perturb_adapters(&mut stack, 6, 0.5);
    let batch = random_batch(stack.config(), 2, 17);
    let mask = LayerMask::new(vec![false, false, true, false, true, false]);
    let report = stack
        .grad_check(&batch, &mask, TrainScope::Adapters, &GradCheckOptions::default(), None)
        .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn base_gradients_match_finite_differences() {
    // pretraining trains every parameter, so the whole tape must be exact
    let config = ModelConfig {
        layers: 2,
        ..Default::default()
    };
    let mut stack = TransformerStack::new(config, 18).unwrap();
    perturb_adapters(&mut stack, 7, 0.5);
    let batch = random_batch(stack.config(), 2, 19);
    let report = stack
        .grad_check(
            &batch,
            &LayerMask::all_active(2),
            TrainScope::Full,
            &GradCheckOptions::default(),
            None,
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn injected_fault_fails_grad_check() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 16).unwrap();
    perturb_adapters(&mut stack, 6, 0.5);
    let batch = random_batch(stack.config(), 2, 17);
    let report = stack
        .grad_check(
            &batch,
            &LayerMask::all_active(6),
            TrainScope::Adapters,
            &GradCheckOptions::default(),
            Some(BackwardFault::FlipMatMulSign),
        )
        .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

#[test]
fn cache_size_is_proportional_to_active_layers() {
    let stack = TransformerStack::new(ModelConfig::default(), 20).unwrap();
    let batch = random_batch(stack.config(), 3, 21);
    let full = stack
        .forward_stld(&batch, &LayerMask::all_active(6), TrainScope::Adapters)
        .unwrap();
    let per_layer = full.cache.layer_elements(0).unwrap();
    assert!(per_layer > 0);
    assert!((0..6).all(|l| full.cache.layer_elements(l) == Some(per_layer)));
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let mask = LayerMask::new((0..6).map(|_| rng.random_bool(0.5)).collect());
        let pass = stack.forward_stld(&batch, &mask, TrainScope::Adapters).unwrap();
        assert_eq!(pass.cache.layer_total(), per_layer * mask.active_count());
        for l in 0..6 {
            assert_eq!(pass.cache.layer_elements(l).is_none(), mask.is_dropped(l));
        }
    }
}

#[test]
fn flop_counts() {
    let c = ModelConfig::default();
    let none = c.count_flops(&LayerMask::all_dropped(6), 16, 16).unwrap();
    assert_eq!(none.layers, 0);
    assert!(none.constant > 0);
    let full = c.count_flops(&LayerMask::all_active(6), 16, 16).unwrap();
    let half = c
        .count_flops(&LayerMask::new(vec![true, false, true, false, true, false]), 16, 16)
        .unwrap();
    assert_eq!(full.layers, 2 * half.layers);
    assert_eq!(full.constant, half.constant);
    // dropping more layers never adds work
    let mut dropped = vec![false; 6];
    let mut prev = full.total();
    for l in [3, 0, 5, 1, 4, 2] {
        dropped[l] = true;
        let now = c.count_flops(&LayerMask::new(dropped.clone()), 16, 16).unwrap().total();
        assert!(now <= prev);
        prev = now;
    }
    assert!(c.count_flops(&LayerMask::all_active(5), 16, 16).is_err());
}

#[test]
fn eval_accuracy_in_unit_interval() {
    let stack = TransformerStack::new(ModelConfig::default(), 23).unwrap();
    let batch = random_batch(stack.config(), 20, 24);
    let acc = stack.eval_forward(&batch).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 25).unwrap();
    perturb_adapters(&mut stack, 8, 0.1);
    let mut buf = Vec::new();
    stack.write_checkpoint(&mut buf).unwrap();
    let back = TransformerStack::read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.config(), stack.config());
    for (a, b) in back.params().iter().zip(stack.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }
    let mut again = Vec::new();
    back.write_checkpoint(&mut again).unwrap();
    assert_eq!(buf, again);
    buf[0] = b'X';
    assert!(TransformerStack::read_checkpoint(buf.as_slice()).is_err());
}

#[test]
fn flat_adapter_accessors() {
    let mut stack = TransformerStack::new(ModelConfig::default(), 26).unwrap();
    let n = stack.config().peft_layer_params();
    let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
    stack.set_adapter_flat(3, &v).unwrap();
    assert_eq!(stack.adapter_flat(3), v);
    assert!(stack.set_adapter_flat(3, &v[1..]).is_err());
    stack.reset_head();
    assert!(stack.head_flat().iter().all(|x| *x == 0.0));
}
