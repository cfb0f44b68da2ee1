//! Reverse-mode autodiff over eager f64 tensors.
//!
//! A `Graph` is a tape: each op computes its value at insertion time and
//! records what it needs for the backward pass. Creation order is a valid
//! topological order, so `backward` walks node ids in reverse. Everything is
//! single-threaded with fixed loop order, which makes forward values and
//! gradients bitwise reproducible.
//!
//! The op set is exactly what the siamese models and losses need: dense
//! affine ops, 2-D convolution, pooling, batch norm (batch-stat and
//! running-stat modes), relu, detach (stop gradient), the negative-cosine
//! batch mean, and a canonical K-way mean.

use crate::error::{Error, Result};
use crate::tensor::{canonical_mean, pairwise_sum, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn raw(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Detach,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// `[b, m] x [m, n] -> [b, n]`
    MatMul { x: NodeId, w: NodeId },
    /// `[b, n] + [n]` broadcast over rows
    AddRowBias { x: NodeId, b: NodeId },
    /// `[b, ic, h, w] * [oc, ic, kh, kw] -> [b, oc, oh, ow]`
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    /// `[b, c, h, w] + [c]` broadcast over batch and space
    AddChanBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    AvgPool2 { x: NodeId },
    MaxPool2 { x: NodeId },
    GlobalAvgPool { x: NodeId },
    /// Normalizes with the batch statistics saved in `aux`.
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Normalizes with fixed (running) statistics carried by the op.
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    /// Scalar: mean over rows of -<a_i, b_i> / (|a_i||b_i|).
    NegCosMean { a: NodeId, b: NodeId },
    /// Elementwise mean across k same-shape inputs, canonically ordered so the
    /// value is bitwise invariant under input permutation.
    MeanViews { xs: Vec<NodeId> },
}

enum Aux {
    None,
    /// Per-channel batch mean and population variance.
    BatchStats { mean: Vec<f64>, var: Vec<f64> },
    /// Flat argmax index per pooled output element.
    MaxIdx(Vec<u32>),
    /// Per-row (|a|, |b|, <a,b>).
    RowDots(Vec<(f64, f64, f64)>),
}

struct Node {
    op: Op,
    value: Tensor,
    aux: Aux,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Channel/space split used by batch norm: `[b, c, h, w]` normalizes per c
/// over b*h*w, `[b, d]` normalizes per d over b.
fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::Input(format!("batch norm expects 2-D or 4-D input, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Batch statistics recorded by a `batch_norm_train` node, for running
    /// stat updates by the trainer.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].aux {
            Aux::BatchStats { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Aux, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, aux, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, Aux::None, requires_grad)
    }

    /// Stop gradient: value passes through, no gradient ever flows back.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.push(Op::Detach, value, Aux::None, false)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Input(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += *v;
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Add { a, b }, out, Aux::None, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let mut out = self.nodes[a.0].value.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= *v;
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Sub { a, b }, out, Aux::None, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Scale { x, c }, out, Aux::None, rg)
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Input(format!("matmul: incompatible shapes {xs:?} x {ws:?}")));
        }
        let (b, m, n) = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(&[b, n]);
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let ov = out.data_mut();
            for bi in 0..b {
                let orow = &mut ov[bi * n..(bi + 1) * n];
                for mi in 0..m {
                    let a = xv[bi * m + mi];
                    let wrow = &wv[mi * n..(mi + 1) * n];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += a * *wv;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        Ok(self.push(Op::MatMul { x, w }, out, Aux::None, rg))
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.nodes[x.0].value.shape(), self.nodes[b.0].value.shape());
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Input(format!("add_row_bias: shapes {xs:?} + {bs:?}")));
        }
        let n = xs[1];
        let mut out = self.nodes[x.0].value.clone();
        {
            let bv = self.nodes[b.0].value.data();
            for row in out.data_mut().chunks_mut(n) {
                for (o, v) in row.iter_mut().zip(bv) {
                    *o += *v;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::AddRowBias { x, b }, out, Aux::None, rg))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ws) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Input(format!("conv2d: incompatible shapes {xs:?} * {ws:?}")));
        }
        let (b, ic, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Input(format!("conv2d: kernel {kh}x{kw} larger than padded input")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, oc, oh, ow]);
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let ov = out.data_mut();
            for bi in 0..b {
                for oci in 0..oc {
                    let oplane = &mut ov[(bi * oc + oci) * oh * ow..(bi * oc + oci + 1) * oh * ow];
                    for ici in 0..ic {
                        let xplane = &xv[(bi * ic + ici) * h * wd..(bi * ic + ici + 1) * h * wd];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wgt = wv[((oci * ic + ici) * kh + ky) * kw + kx];
                                conv_axpy(oplane, xplane, wgt, ky, kx, pad, stride, h, wd, oh, ow);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, out, Aux::None, rg))
    }

    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.nodes[x.0].value.shape(), self.nodes[b.0].value.shape());
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Input(format!("add_chan_bias: shapes {xs:?} + {bs:?}")));
        }
        let (c, s) = (xs[1], xs[2] * xs[3]);
        let mut out = self.nodes[x.0].value.clone();
        {
            let bv = self.nodes[b.0].value.data();
            for (ci, plane) in out.data_mut().chunks_mut(s).enumerate() {
                let add = bv[ci % c];
                for o in plane {
                    *o += add;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::AddChanBias { x, b }, out, Aux::None, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Relu { x }, out, Aux::None, rg)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape();
        if xs.len() != 4 {
            return Err(Error::Input(format!("avg_pool2 expects 4-D input, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Input(format!("avg_pool2: input {h}x{w} too small")));
        }
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        {
            let xv = self.nodes[x.0].value.data();
            let ov = out.data_mut();
            for p in 0..b * c {
                let xp = &xv[p * h * w..(p + 1) * h * w];
                let op = &mut ov[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = 2 * oy * w + 2 * ox;
                        op[oy * ow + ox] =
                            (xp[base] + xp[base + 1] + xp[base + w] + xp[base + w + 1]) * 0.25;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::AvgPool2 { x }, out, Aux::None, rg))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape();
        if xs.len() != 4 {
            return Err(Error::Input(format!("max_pool2 expects 4-D input, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Input(format!("max_pool2: input {h}x{w} too small")));
        }
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut idx = vec![0u32; b * c * oh * ow];
        {
            let xv = self.nodes[x.0].value.data();
            let ov = out.data_mut();
            for p in 0..b * c {
                let xp = &xv[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = 2 * oy * w + 2 * ox;
                        let cand = [base, base + 1, base + w, base + w + 1];
                        let mut best = cand[0];
                        for &cc in &cand[1..] {
                            if xp[cc] > xp[best] {
                                best = cc;
                            }
                        }
                        let o = p * oh * ow + oy * ow + ox;
                        ov[o] = xp[best];
                        idx[o] = best as u32;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MaxPool2 { x }, out, Aux::MaxIdx(idx), rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape();
        if xs.len() != 4 {
            return Err(Error::Input(format!("global_avg_pool expects 4-D input, got {xs:?}")));
        }
        let (b, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = Tensor::zeros(&[b, c]);
        {
            let xv = self.nodes[x.0].value.data();
            let ov = out.data_mut();
            for p in 0..b * c {
                let mut acc = 0.0;
                for v in &xv[p * s..(p + 1) * s] {
                    acc += *v;
                }
                ov[p] = acc / s as f64;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::GlobalAvgPool { x }, out, Aux::None, rg))
    }

    /// Batch norm using this batch's statistics (training mode). The computed
    /// per-channel mean/variance are kept on the node for running-stat
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (b, c, s) = bn_dims(&xs)?;
        self.check_bn_params(c, gamma, beta)?;
        let n = b * s;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xv = self.nodes[x.0].value.data();
            for ci in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ci) * s;
                    for v in &xv[off..off + s] {
                        acc += *v;
                    }
                }
                let m = acc / n as f64;
                let mut vacc = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ci) * s;
                    for v in &xv[off..off + s] {
                        let d = *v - m;
                        vacc += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = vacc / n as f64;
            }
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps);
        let rg =
            self.nodes[x.0].requires_grad || self.nodes[gamma.0].requires_grad || self.nodes[beta.0].requires_grad;
        Ok(self.push(Op::BatchNormTrain { x, gamma, beta, eps }, out, Aux::BatchStats { mean, var }, rg))
    }

    /// Batch norm with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (_, c, _) = bn_dims(&xs)?;
        self.check_bn_params(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Input(format!(
                "batch_norm_eval: {c} channels, got {} means / {} vars",
                mean.len(),
                var.len()
            )));
        }
        let out = self.bn_apply(x, gamma, beta, mean, var, eps);
        let rg =
            self.nodes[x.0].requires_grad || self.nodes[gamma.0].requires_grad || self.nodes[beta.0].requires_grad;
        Ok(self.push(
            Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), var: var.to_vec(), eps },
            out,
            Aux::None,
            rg,
        ))
    }

    fn check_bn_params(&self, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.nodes[id.0].value.shape();
            if s != [c] {
                return Err(Error::Input(format!("batch norm {name}: expected [{c}], got {s:?}")));
            }
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Tensor {
        let xs = self.nodes[x.0].value.shape();
        let (b, c, s) = bn_dims(xs).expect("validated");
        let mut out = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let ov = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let ivar = 1.0 / (var[ci] + eps).sqrt();
                let (g, m, a) = (gv[ci], mean[ci], bv[ci]);
                let off = (bi * c + ci) * s;
                for o in &mut ov[off..off + s] {
                    *o = (*o - m) * ivar * g + a;
                }
            }
        }
        out
    }

    /// Mean over rows of the negative cosine similarity between paired rows
    /// of `a` and `b`. Errors on (near-)zero-norm rows instead of clamping:
    /// a zero feature is a bug or a collapse, not something to hide.
    pub fn neg_cos_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "neg_cos_mean")?;
        let shape = self.nodes[a.0].value.shape();
        if shape.len() != 2 {
            return Err(Error::Input(format!("neg_cos_mean expects 2-D features, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        let mut dots = Vec::with_capacity(rows);
        let mut terms = Vec::with_capacity(rows);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for r in 0..rows {
                let ar = &av[r * d..(r + 1) * d];
                let br = &bv[r * d..(r + 1) * d];
                let (mut na, mut nb, mut dot) = (0.0, 0.0, 0.0);
                for i in 0..d {
                    na += ar[i] * ar[i];
                    nb += br[i] * br[i];
                    dot += ar[i] * br[i];
                }
                let (na, nb) = (na.sqrt(), nb.sqrt());
                if na <= 1e-150 || nb <= 1e-150 {
                    return Err(Error::Degenerate(format!(
                        "zero-norm feature row {r} in cosine distance (|a|={na:.3e}, |b|={nb:.3e})"
                    )));
                }
                dots.push((na, nb, dot));
                // Rounding can push |dot|/(na·nb) a ulp past 1 for
                // near-parallel rows; the operator's range is [-1, 1] by
                // contract. Backward keeps the unclamped formula (the true
                // gradient vanishes where the clamp can bind).
                terms.push((-dot / (na * nb)).clamp(-1.0, 1.0));
            }
        }
        let value = Tensor::from_vec(&[1], vec![pairwise_sum(&terms) / rows as f64])?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::NegCosMean { a, b }, value, Aux::RowDots(dots), rg))
    }

    /// Elementwise mean across same-shape inputs. Per coordinate the k
    /// operands are summed in canonical order, so the result is bitwise
    /// invariant under permutation of `xs`.
    pub fn mean_views(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Input("mean_views: empty input list".into()));
        }
        let shape = self.nodes[xs[0].0].value.shape().to_vec();
        for &x in &xs[1..] {
            if self.nodes[x.0].value.shape() != shape {
                return Err(Error::Input(format!(
                    "mean_views: shape mismatch {:?} vs {:?}",
                    shape,
                    self.nodes[x.0].value.shape()
                )));
            }
        }
        let numel: usize = shape.iter().product();
        let k = xs.len();
        let mut out = Tensor::zeros(&shape);
        {
            let ov = out.data_mut();
            let mut lane = vec![0.0; k];
            for i in 0..numel {
                for (j, &x) in xs.iter().enumerate() {
                    lane[j] = self.nodes[x.0].value.data()[i];
                }
                ov[i] = canonical_mean(&lane);
            }
        }
        let rg = xs.iter().any(|&x| self.nodes[x.0].requires_grad);
        Ok(self.push(Op::MeanViews { xs: xs.to_vec() }, out, Aux::None, rg))
    }

    /// Reverse pass from a scalar node. Returns one optional gradient per
    /// node id; nodes that do not require grad (or do not influence the
    /// loss) have `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Input("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(&[1], vec![1.0])?);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked");
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, contrib: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                let mut gb = g.clone();
                for v in gb.data_mut() {
                    *v = -*v;
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Scale { x, c } => {
                let mut gx = g.clone();
                for v in gx.data_mut() {
                    *v *= *c;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul { x, w } => self.backprop_matmul(*x, *w, g, grads),
            Op::AddRowBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[b.0].requires_grad {
                    let n = self.nodes[b.0].value.numel();
                    let mut gb = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => self.backprop_conv(*x, *w, *stride, *pad, g, grads),
            Op::AddChanBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[b.0].requires_grad {
                    let xs = node.value.shape();
                    let (c, s) = (xs[1], xs[2] * xs[3]);
                    let mut gb = Tensor::zeros(&[c]);
                    for (ci, plane) in g.data().chunks(s).enumerate() {
                        let mut acc = 0.0;
                        for v in plane {
                            acc += *v;
                        }
                        gb.data_mut()[ci % c] += acc;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu { x } => {
                let mut gx = g.clone();
                for (v, xin) in gx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    if *xin <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool2 { x } => {
                let xs = self.nodes[x.0].value.shape();
                let (h, w) = (xs[2], xs[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let mut gx = Tensor::zeros(xs);
                {
                    let gxv = gx.data_mut();
                    for p in 0..xs[0] * xs[1] {
                        let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        let xo = p * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let q = gp[oy * ow + ox] * 0.25;
                                let base = xo + 2 * oy * w + 2 * ox;
                                gxv[base] += q;
                                gxv[base + 1] += q;
                                gxv[base + w] += q;
                                gxv[base + w + 1] += q;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MaxPool2 { x } => {
                let xs = self.nodes[x.0].value.shape();
                let (h, w) = (xs[2], xs[3]);
                let Aux::MaxIdx(idx) = &node.aux else { unreachable!() };
                let os = node.value.shape();
                let per = os[2] * os[3];
                let mut gx = Tensor::zeros(xs);
                {
                    let gxv = gx.data_mut();
                    for (o, gv) in g.data().iter().enumerate() {
                        let p = o / per;
                        gxv[p * h * w + idx[o] as usize] += *gv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.nodes[x.0].value.shape();
                let s = xs[2] * xs[3];
                let mut gx = Tensor::zeros(xs);
                {
                    let gxv = gx.data_mut();
                    for (p, gv) in g.data().iter().enumerate() {
                        let q = *gv / s as f64;
                        for o in &mut gxv[p * s..(p + 1) * s] {
                            *o = q;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BatchNormTrain { x, gamma, beta, eps } => {
                let Aux::BatchStats { mean, var } = &node.aux else { unreachable!() };
                self.backprop_bn_train(*x, *gamma, *beta, mean, var, *eps, g, grads);
            }
            Op::BatchNormEval { x, gamma, beta, mean, var, eps } => {
                self.backprop_bn_eval(*x, *gamma, *beta, mean, var, *eps, g, grads);
            }
            Op::NegCosMean { a, b } => {
                let Aux::RowDots(dots) = &node.aux else { unreachable!() };
                self.backprop_neg_cos(*a, *b, dots, g, grads);
            }
            Op::MeanViews { xs } => {
                let k = xs.len() as f64;
                for &x in xs {
                    if self.nodes[x.0].requires_grad {
                        let mut gx = g.clone();
                        for v in gx.data_mut() {
                            *v /= k;
                        }
                        self.accumulate(grads, x, gx);
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, x: NodeId, w: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        let (b, m, n) = (xs[0], xs[1], ws[1]);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let gv = g.data();
        if self.nodes[x.0].requires_grad {
            let mut gx = Tensor::zeros(&[b, m]);
            {
                let gxv = gx.data_mut();
                for bi in 0..b {
                    let grow = &gv[bi * n..(bi + 1) * n];
                    for mi in 0..m {
                        let wrow = &wv[mi * n..(mi + 1) * n];
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += grow[i] * wrow[i];
                        }
                        gxv[bi * m + mi] = acc;
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = Tensor::zeros(&[m, n]);
            {
                let gwv = gw.data_mut();
                for bi in 0..b {
                    let grow = &gv[bi * n..(bi + 1) * n];
                    for mi in 0..m {
                        let a = xv[bi * m + mi];
                        let wrow = &mut gwv[mi * n..(mi + 1) * n];
                        for i in 0..n {
                            wrow[i] += a * grow[i];
                        }
                    }
                }
            }
            self.accumulate(grads, w, gw);
        }
    }

    fn backprop_conv(
        &self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        let (b, ic, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let gv = g.data();

        if self.nodes[x.0].requires_grad {
            let mut gx = Tensor::zeros(xs);
            {
                let gxv = gx.data_mut();
                for bi in 0..b {
                    for oci in 0..oc {
                        let gplane = &gv[(bi * oc + oci) * oh * ow..(bi * oc + oci + 1) * oh * ow];
                        for ici in 0..ic {
                            let xplane =
                                &mut gxv[(bi * ic + ici) * h * wd..(bi * ic + ici + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wgt = wv[((oci * ic + ici) * kh + ky) * kw + kx];
                                    conv_scatter(
                                        xplane, gplane, wgt, ky, kx, pad, stride, h, wd, oh, ow,
                                    );
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = Tensor::zeros(ws);
            {
                let gwv = gw.data_mut();
                for oci in 0..oc {
                    for ici in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for bi in 0..b {
                                    let gplane = &gv[(bi * oc + oci) * oh * ow
                                        ..(bi * oc + oci + 1) * oh * ow];
                                    let xplane = &xv[(bi * ic + ici) * h * wd
                                        ..(bi * ic + ici + 1) * h * wd];
                                    acc += conv_dot(
                                        gplane, xplane, ky, kx, pad, stride, h, wd, oh, ow,
                                    );
                                }
                                gwv[((oci * ic + ici) * kh + ky) * kw + kx] = acc;
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, w, gw);
        }
    }

    fn backprop_bn_train(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.nodes[x.0].value.shape();
        let (b, c, s) = bn_dims(xs).expect("validated");
        let n = (b * s) as f64;
        let xv = self.nodes[x.0].value.data();
        let gv = g.data();
        let gmv = self.nodes[gamma.0].value.data();

        // per-channel reductions: sum g and sum g*xhat
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for ci in 0..c {
            let ivar = 1.0 / (var[ci] + eps).sqrt();
            let m = mean[ci];
            let (mut sg, mut sgx) = (0.0, 0.0);
            for bi in 0..b {
                let off = (bi * c + ci) * s;
                for i in 0..s {
                    let gh = gv[off + i];
                    sg += gh;
                    sgx += gh * (xv[off + i] - m) * ivar;
                }
            }
            sum_g[ci] = sg;
            sum_gx[ci] = sgx;
        }
        if self.nodes[gamma.0].requires_grad {
            self.accumulate(grads, gamma, Tensor::from_vec(&[c], sum_gx.clone()).expect("shape"));
        }
        if self.nodes[beta.0].requires_grad {
            self.accumulate(grads, beta, Tensor::from_vec(&[c], sum_g.clone()).expect("shape"));
        }
        if self.nodes[x.0].requires_grad {
            let mut gx = Tensor::zeros(xs);
            {
                let gxv = gx.data_mut();
                for ci in 0..c {
                    let ivar = 1.0 / (var[ci] + eps).sqrt();
                    let m = mean[ci];
                    let scale = gmv[ci] * ivar / n;
                    for bi in 0..b {
                        let off = (bi * c + ci) * s;
                        for i in 0..s {
                            let xhat = (xv[off + i] - m) * ivar;
                            gxv[off + i] =
                                scale * (n * gv[off + i] - sum_g[ci] - xhat * sum_gx[ci]);
                        }
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_bn_eval(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.nodes[x.0].value.shape();
        let (b, c, s) = bn_dims(xs).expect("validated");
        let xv = self.nodes[x.0].value.data();
        let gv = g.data();
        let gmv = self.nodes[gamma.0].value.data();
        if self.nodes[x.0].requires_grad {
            let mut gx = Tensor::zeros(xs);
            {
                let gxv = gx.data_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        let k = gmv[ci] / (var[ci] + eps).sqrt();
                        let off = (bi * c + ci) * s;
                        for i in 0..s {
                            gxv[off + i] = gv[off + i] * k;
                        }
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
        if self.nodes[gamma.0].requires_grad || self.nodes[beta.0].requires_grad {
            let mut ggam = vec![0.0; c];
            let mut gbet = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let ivar = 1.0 / (var[ci] + eps).sqrt();
                    let off = (bi * c + ci) * s;
                    for i in 0..s {
                        ggam[ci] += gv[off + i] * (xv[off + i] - mean[ci]) * ivar;
                        gbet[ci] += gv[off + i];
                    }
                }
            }
            if self.nodes[gamma.0].requires_grad {
                self.accumulate(grads, gamma, Tensor::from_vec(&[c], ggam).expect("shape"));
            }
            if self.nodes[beta.0].requires_grad {
                self.accumulate(grads, beta, Tensor::from_vec(&[c], gbet).expect("shape"));
            }
        }
    }

    fn backprop_neg_cos(
        &self,
        a: NodeId,
        b: NodeId,
        dots: &[(f64, f64, f64)],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let shape = self.nodes[a.0].value.shape();
        let (rows, d) = (shape[0], shape[1]);
        let scale = g.data()[0] / rows as f64;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        for (side, other, target, is_a) in [(av, bv, a, true), (bv, av, b, false)] {
            if !self.nodes[target.0].requires_grad {
                continue;
            }
            let mut gt = Tensor::zeros(shape);
            {
                let gv = gt.data_mut();
                for r in 0..rows {
                    let (na, nb, dot) = dots[r];
                    let (ns, no) = if is_a { (na, nb) } else { (nb, na) };
                    let inv = 1.0 / (ns * no);
                    let coef = dot / (ns * ns);
                    for i in 0..d {
                        gv[r * d + i] = scale
                            * (-other[r * d + i] + coef * side[r * d + i])
                            * inv;
                    }
                }
            }
            self.accumulate(grads, target, gt);
        }
    }
}

/// out[oy, ox] += w * x[oy*s+ky-p, ox*s+kx-p] over the valid ox range.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_axpy(
    out: &mut [f64],
    x: &[f64],
    w: f64,
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let (lo, hi) = valid_ox_range(kx, pad, stride, wd, ow);
        if lo >= hi {
            continue;
        }
        let xrow = &x[iy as usize * wd..(iy as usize + 1) * wd];
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let base = (lo as isize + kx as isize - pad as isize) as usize;
            for (o, xv) in orow[lo..hi].iter_mut().zip(&xrow[base..base + (hi - lo)]) {
                *o += w * *xv;
            }
        } else {
            for ox in lo..hi {
                let ix = (ox * stride + kx) as isize - pad as isize;
                orow[ox] += w * xrow[ix as usize];
            }
        }
    }
}

/// gx[iy, ix] += w * g[oy, ox] — transpose of `conv_axpy`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_scatter(
    gx: &mut [f64],
    g: &[f64],
    w: f64,
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let (lo, hi) = valid_ox_range(kx, pad, stride, wd, ow);
        if lo >= hi {
            continue;
        }
        let xrow = &mut gx[iy as usize * wd..(iy as usize + 1) * wd];
        let grow = &g[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let base = (lo as isize + kx as isize - pad as isize) as usize;
            for (xv, gv) in xrow[base..base + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                *xv += w * *gv;
            }
        } else {
            for ox in lo..hi {
                let ix = (ox * stride + kx) as isize - pad as isize;
                xrow[ix as usize] += w * grow[ox];
            }
        }
    }
}

/// sum over valid (oy, ox) of g[oy, ox] * x[iy, ix].
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_dot(
    g: &[f64],
    x: &[f64],
    ky: usize,
    kx: usize,
    pad: usize,
    stride: usize,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
) -> f64 {
    let mut acc = 0.0;
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let (lo, hi) = valid_ox_range(kx, pad, stride, wd, ow);
        if lo >= hi {
            continue;
        }
        let xrow = &x[iy as usize * wd..(iy as usize + 1) * wd];
        let grow = &g[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let base = (lo as isize + kx as isize - pad as isize) as usize;
            for (gv, xv) in grow[lo..hi].iter().zip(&xrow[base..base + (hi - lo)]) {
                acc += *gv * *xv;
            }
        } else {
            for ox in lo..hi {
                let ix = (ox * stride + kx) as isize - pad as isize;
                acc += grow[ox] * xrow[ix as usize];
            }
        }
    }
    acc
}

/// Output-column range where ix = ox*stride + kx - pad lands in [0, wd).
#[inline]
fn valid_ox_range(kx: usize, pad: usize, stride: usize, wd: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox*stride + kx - pad <= wd - 1
    let max_num = wd as isize - 1 - kx as isize + pad as isize;
    if max_num < 0 {
        return (0, 0);
    }
    let hi = (max_num as usize / stride + 1).min(ow);
    (lo.min(ow), hi)
}
