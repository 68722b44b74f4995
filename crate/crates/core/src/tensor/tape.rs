use std::collections::BTreeMap;
use std::ops::Range;

use super::{
    check_labels, gelu, gelu_grad, gemm, layer_norm_kernel, softmax_ce_kernel, LayerNormSaved,
    Tensor,
};
use crate::error::{Error, Result};

/// Identifies a parameter tensor across forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberate backward-pass bugs, used to prove the gradient checker can
/// catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Negate the left-operand gradient of every matmul.
    FlipMatMulSign,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        groups: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Accumulated parameter gradients keyed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match self.map.get_mut(&id) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(id, grad);
            }
        }
    }

    /// L2 norm over the union of the given parameters; absent entries count as zero.
    pub fn norm_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.map.get(id))
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Records primitive operations in execution order; [`Tape::backward`]
/// replays them in exact reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Elements held by non-leaf nodes in `range`, including the buffers
    /// they saved for the backward pass.
    pub fn activation_elements(&self, range: Range<usize>) -> usize {
        self.nodes[range]
            .iter()
            .map(|n| {
                let saved = match &n.op {
                    Op::Leaf => return 0,
                    Op::LayerNorm { saved, .. } => saved.xhat.len() + saved.rstd.len(),
                    Op::Attention { probs, .. } => probs.len(),
                    Op::CrossEntropy { probs, .. } => probs.len(),
                    _ => 0,
                };
                n.value.len() + saved
            })
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable parameter whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (a, b) in row.iter_mut().zip(vb.data()) {
                *a += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Which relu inputs are positive, over every relu on the tape in
    /// order. Two points with equal patterns lie in the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::input(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let h = vx.cols();
        if vg.len() != h || vb.len() != h {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let (y, saved) = layer_norm_kernel(vx.data(), h, vg.data(), vb.data(), eps);
        let out = Tensor::new(vx.shape().to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are (batch·seq)×h, heads split along h.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let h = vq.cols();
        if vq.shape() != vk.shape()
            || vq.shape() != vv.shape()
            || vq.rows() != batch * seq
            || heads == 0
            || h % heads != 0
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} batch {batch} seq {seq} heads {heads}",
                    vq.shape(),
                    vk.shape(),
                    vv.shape()
                ),
            ));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * h];
        for bi in 0..batch {
            for hi in 0..heads {
                let p = &mut probs[(bi * heads + hi) * seq * seq..][..seq * seq];
                let col0 = hi * dh;
                for i in 0..seq {
                    let qi = &qd[(bi * seq + i) * h + col0..][..dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(bi * seq + j) * h + col0..][..dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                    let oi = &mut out[(bi * seq + i) * h + col0..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vd[(bi * seq + j) * h + col0..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vq.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Row gather: output row i is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, width) = (vt.rows(), vt.cols());
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!("gather index {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * width..(i + 1) * width]);
        }
        let out = Tensor::new(vec![ids.len(), width], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Averages consecutive row groups: (groups·n)×h -> groups×h.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, h) = (vx.rows(), vx.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape(
                "mean_pool",
                format!("{rows} rows into {groups} groups"),
            ));
        }
        let per = rows / groups;
        let inv = 1.0 / per as f64;
        let mut data = vec![0.0; groups * h];
        for g in 0..groups {
            let acc = &mut data[g * h..(g + 1) * h];
            for r in 0..per {
                let row = &vx.data()[(g * per + r) * h..][..h];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        let out = Tensor::new(vec![groups, h], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanPool { x, groups }, rg))
    }

    /// Mean softmax cross-entropy; the result is a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", vl.shape(), labels.len()),
            ));
        }
        let classes = vl.cols();
        check_labels(labels, classes)?;
        let (loss, probs) = softmax_ce_kernel(vl.data(), classes, labels);
        let out = Tensor::new(vec![1], vec![loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar node. Only parameters registered
    /// through [`Tape::param`] appear in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        out.accumulate(id, Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        // dA = dC · Bᵀ
                        gemm(m, n, k, &g, (n as isize, 1), vb.data(), (1, n as isize), &mut da, false);
                        if self.fault == Some(BackwardFault::FlipMatMulSign) {
                            da.iter_mut().for_each(|x| *x = -*x);
                        }
                        add_into(&mut grads[a.0], da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        // dB = Aᵀ · dC
                        gemm(k, m, n, va.data(), (1, k as isize), &g, (n as isize, 1), &mut db, false);
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                    if self.requires_grad(*a) {
                        add_into(&mut grads[a.0], g);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.requires_grad(*bias) {
                        let n = self.value(*bias).len();
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        add_into(&mut grads[bias.0], db);
                    }
                    if self.requires_grad(*x) {
                        add_into(&mut grads[x.0], g);
                    }
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(vx)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x).data();
                    let dx = g.iter().zip(vx).map(|(d, &v)| d * gelu_grad(v)).collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let vg = self.value(*gamma).data();
                    let h = vg.len();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0; h];
                        let mut db = vec![0.0; h];
                        for (grow, xrow) in g.chunks(h).zip(saved.xhat.chunks(h)) {
                            for j in 0..h {
                                dg[j] += grow[j] * xrow[j];
                                db[j] += grow[j];
                            }
                        }
                        if self.requires_grad(*gamma) {
                            add_into(&mut grads[gamma.0], dg);
                        }
                        if self.requires_grad(*beta) {
                            add_into(&mut grads[beta.0], db);
                        }
                    }
                    if self.requires_grad(*x) {
                        let inv_h = 1.0 / h as f64;
                        let mut dx = vec![0.0; g.len()];
                        for (r, (grow, xrow)) in g.chunks(h).zip(saved.xhat.chunks(h)).enumerate() {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..h {
                                let dxh = grow[j] * vg[j];
                                sum_d += dxh;
                                sum_dx += dxh * xrow[j];
                            }
                            let rs = saved.rstd[r];
                            for j in 0..h {
                                let dxh = grow[j] * vg[j];
                                dx[r * h + j] = rs * (dxh - inv_h * sum_d - xrow[j] * inv_h * sum_dx);
                            }
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let h = self.value(*q).cols();
                    let dh = h / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; g.len()];
                    let mut dk = vec![0.0; g.len()];
                    let mut dv = vec![0.0; g.len()];
                    let mut dp = vec![0.0; seq];
                    for bi in 0..batch {
                        for hi in 0..heads {
                            let p = &probs[(bi * heads + hi) * seq * seq..][..seq * seq];
                            let col0 = hi * dh;
                            let at = |row: usize| (bi * seq + row) * h + col0;
                            for i in 0..seq {
                                let go = &g[at(i)..][..dh];
                                let prow = &p[i * seq..(i + 1) * seq];
                                let mut dot = 0.0;
                                for j in 0..seq {
                                    let vj = &vd[at(j)..][..dh];
                                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot += prow[j] * dp[j];
                                    let dvj = &mut dv[at(j)..][..dh];
                                    for (d, x) in dvj.iter_mut().zip(go) {
                                        *d += prow[j] * x;
                                    }
                                }
                                for j in 0..seq {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        dq[at(i) + c] += ds * kd[at(j) + c];
                                        dk[at(j) + c] += ds * qd[at(i) + c];
                                    }
                                }
                            }
                        }
                    }
                    if self.requires_grad(*q) {
                        add_into(&mut grads[q.0], dq);
                    }
                    if self.requires_grad(*k) {
                        add_into(&mut grads[k.0], dk);
                    }
                    if self.requires_grad(*v) {
                        add_into(&mut grads[v.0], dv);
                    }
                }
                Op::Gather { table, ids } => {
                    let vt = self.value(*table);
                    let width = vt.cols();
                    let mut dt = vec![0.0; vt.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, v) in dt[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..]) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[table.0], dt);
                }
                Op::MeanPool { x, groups } => {
                    let vx = self.value(*x);
                    let h = vx.cols();
                    let per = vx.rows() / groups;
                    let inv = 1.0 / per as f64;
                    let mut dx = vec![0.0; vx.len()];
                    for (r, row) in dx.chunks_mut(h).enumerate() {
                        let src = &g[(r / per) * h..][..h];
                        for (d, s) in row.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = self.value(*logits).cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        dl[r * classes + label] -= 1.0;
                    }
                    dl.iter_mut().for_each(|d| *d *= scale);
                    add_into(&mut grads[logits.0], dl);
                }
            }
        }
        Ok(out)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&grad) {
                *a += b;
            }
        }
        None => *slot = Some(grad),
    }
}
