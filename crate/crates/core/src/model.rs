//! Siamese model: convolutional encoder + projection MLP (together `f`),
//! prediction MLP (`g`), stop-gradient, and the cosine distance `D`.
//!
//! Parameters live in one flat `theta` vector with a stable segment table so
//! optimizers and the variance probe can address every coordinate by index.
//! Forward passes run on a [`Graph`] through a [`ModelSession`], which binds
//! each parameter segment to a leaf node once per graph; repeated encodes in
//! the same session share those leaves, so gradients accumulate across views
//! exactly as a weight-shared siamese network requires.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{standard_normal, StreamKey};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    TinyConv,
    SmallResnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub backbone: Backbone,
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel width of the first stage; later stages double it.
    pub base_channels: usize,
    /// Probe-scale models disable batch norm so they stay meaningful at
    /// batch size 1.
    pub batch_norm: bool,
    /// Replaces the stride-2 stem with a stride-1 stem and removes the first
    /// pooling stage.
    pub small_input_stem: bool,
    pub projector_layers: usize,
    pub projector_hidden_dim: usize,
    pub projector_out_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::TinyConv,
            image_size: 16,
            in_channels: 3,
            base_channels: 4,
            batch_norm: true,
            small_input_stem: true,
            projector_layers: 2,
            projector_hidden_dim: 128,
            projector_out_dim: 64,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.projector_layers == 2 || self.projector_layers == 3) {
            return Err(Error::Config(format!(
                "projector_layers must be 2 or 3, got {}",
                self.projector_layers
            )));
        }
        if !(self.projector_hidden_dim >= self.projector_out_dim && self.projector_out_dim >= 8) {
            return Err(Error::Config(format!(
                "need projector_hidden_dim >= projector_out_dim >= 8, got {} / {}",
                self.projector_hidden_dim, self.projector_out_dim
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        Ok(())
    }

    /// Width of the backbone output (pre-projector feature).
    pub fn backbone_dim(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSpec {
    pub hidden_dim: usize,
    /// Must equal the encoder's projector_out_dim.
    pub in_out_dim: usize,
}

impl Default for PredictorSpec {
    // hidden width 32 rather than the in_out/4 bottleneck: a predicted row
    // is exactly zero iff every hidden relu is dead, which is a hard
    // Degenerate error (never clamped), so the width keeps that event at
    // ~2^-hidden per row over multi-million-row runs.
    fn default() -> Self {
        Self { hidden_dim: 32, in_out_dim: 64 }
    }
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Running statistics for one batch-norm layer. Not part of theta: these are
/// updated by the trainer from batch statistics, not by gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Step {
    Conv { w: usize, bias: Option<usize>, stride: usize, pad: usize },
    Linear { w: usize, bias: Option<usize> },
    Bn { gamma: usize, beta: usize, buf: usize },
    Relu,
    MaxPool2,
    AvgPool2,
    GlobalPool,
    /// Remember the current activation as the skip source.
    PushSkip,
    /// Add the remembered activation back in, optionally through a 1x1
    /// projection (with its own norm) when shape changes.
    ApplySkip { proj: Option<SkipProj> },
}

#[derive(Debug, Clone)]
struct SkipProj {
    w: usize,
    stride: usize,
    bias: Option<usize>,
    bn: Option<(usize, usize, usize)>, // gamma, beta, buf
}

#[derive(Debug, Clone)]
struct PlanStep {
    step: Step,
    label: String,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    enc: EncoderSpec,
    pred: PredictorSpec,
    theta: Vec<f64>,
    segments: Vec<Segment>,
    /// theta[..encoder_dim] is θ_f, the rest is θ_g.
    encoder_dim: usize,
    buffers: Vec<BnBuffer>,
    encoder_plan: Vec<PlanStep>,
    predictor_plan: Vec<PlanStep>,
}

/// Accumulates segments, buffers and plan steps while walking an
/// architecture. Walking is deterministic, so segment order (and therefore
/// the flat theta layout) is a pure function of the specs.
struct Planner {
    segments: Vec<Segment>,
    buffers: Vec<BnBuffer>,
    next_offset: usize,
    batch_norm: bool,
}

impl Planner {
    fn new(batch_norm: bool) -> Self {
        Self { segments: Vec::new(), buffers: Vec::new(), next_offset: 0, batch_norm }
    }

    fn segment(&mut self, name: String, shape: &[usize]) -> usize {
        let seg = Segment { name, shape: shape.to_vec(), offset: self.next_offset };
        self.next_offset += seg.len();
        self.segments.push(seg);
        self.segments.len() - 1
    }

    fn bn(&mut self, plan: &mut Vec<PlanStep>, name: &str, c: usize) {
        let gamma = self.segment(format!("{name}.bn.gamma"), &[c]);
        let beta = self.segment(format!("{name}.bn.beta"), &[c]);
        self.buffers.push(BnBuffer {
            name: format!("{name}.bn"),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        let buf = self.buffers.len() - 1;
        plan.push(PlanStep { step: Step::Bn { gamma, beta, buf }, label: format!("{name}.bn") });
    }

    /// conv + optional bn + relu; returns output channel count
    fn conv_bn_relu(
        &mut self,
        plan: &mut Vec<PlanStep>,
        name: &str,
        ic: usize,
        oc: usize,
        stride: usize,
        relu: bool,
    ) {
        let w = self.segment(format!("{name}.conv.w"), &[oc, ic, 3, 3]);
        let bias = if self.batch_norm {
            None
        } else {
            Some(self.segment(format!("{name}.conv.b"), &[oc]))
        };
        plan.push(PlanStep {
            step: Step::Conv { w, bias, stride, pad: 1 },
            label: format!("{name}.conv"),
        });
        if self.batch_norm {
            self.bn(plan, name, oc);
        }
        if relu {
            plan.push(PlanStep { step: Step::Relu, label: format!("{name}.relu") });
        }
    }

    fn linear(
        &mut self,
        plan: &mut Vec<PlanStep>,
        name: &str,
        din: usize,
        dout: usize,
        norm: bool,
        relu: bool,
    ) {
        let w = self.segment(format!("{name}.w"), &[din, dout]);
        let bias = if norm && self.batch_norm {
            None
        } else {
            Some(self.segment(format!("{name}.b"), &[dout]))
        };
        plan.push(PlanStep { step: Step::Linear { w, bias }, label: name.to_string() });
        if norm && self.batch_norm {
            self.bn(plan, name, dout);
        }
        if relu {
            plan.push(PlanStep { step: Step::Relu, label: format!("{name}.relu") });
        }
    }
}

pub fn build_model(enc: &EncoderSpec, pred: &PredictorSpec, seed: u64) -> Result<ModelParams> {
    enc.validate()?;
    if pred.in_out_dim != enc.projector_out_dim {
        return Err(Error::Config(format!(
            "projector_out_dim {} != predictor in_out_dim {}",
            enc.projector_out_dim, pred.in_out_dim
        )));
    }
    if pred.hidden_dim == 0 {
        return Err(Error::Config("predictor hidden_dim must be positive".into()));
    }

    let mut p = Planner::new(enc.batch_norm);
    let mut encoder_plan = Vec::new();
    let c = enc.base_channels;
    let mut size = enc.image_size;

    let shrink = |size: &mut usize, by: usize, what: &str| -> Result<()> {
        if *size / by == 0 {
            return Err(Error::Config(format!("feature map vanishes at {what} (size {size})")));
        }
        *size /= by;
        Ok(())
    };

    // stem
    let stem_stride = if enc.small_input_stem { 1 } else { 2 };
    p.conv_bn_relu(&mut encoder_plan, "backbone.stem", enc.in_channels, c, stem_stride, true);
    if !enc.small_input_stem {
        size = size.div_ceil(2); // stride-2 conv with pad 1 on even sizes halves
        encoder_plan.push(PlanStep { step: Step::MaxPool2, label: "backbone.stem.pool".into() });
        shrink(&mut size, 2, "backbone.stem.pool")?;
    }

    match enc.backbone {
        Backbone::TinyConv => {
            p.conv_bn_relu(&mut encoder_plan, "backbone.stage1", c, 2 * c, 1, true);
            encoder_plan
                .push(PlanStep { step: Step::AvgPool2, label: "backbone.stage1.pool".into() });
            shrink(&mut size, 2, "backbone.stage1.pool")?;
            p.conv_bn_relu(&mut encoder_plan, "backbone.stage2", 2 * c, 4 * c, 1, true);
            encoder_plan
                .push(PlanStep { step: Step::AvgPool2, label: "backbone.stage2.pool".into() });
            shrink(&mut size, 2, "backbone.stage2.pool")?;
        }
        Backbone::SmallResnet => {
            residual_block(&mut p, &mut encoder_plan, "backbone.block1", c, c, 1)?;
            residual_block(&mut p, &mut encoder_plan, "backbone.block2", c, 2 * c, 2)?;
            shrink(&mut size, 2, "backbone.block2")?;
            residual_block(&mut p, &mut encoder_plan, "backbone.block3", 2 * c, 4 * c, 2)?;
            shrink(&mut size, 2, "backbone.block3")?;
        }
    }
    let _ = size;
    encoder_plan.push(PlanStep { step: Step::GlobalPool, label: "backbone.gap".into() });

    // projection MLP: hidden layers normalized + relu, output layer
    // normalized without relu
    let bdim = enc.backbone_dim();
    let (h, d) = (enc.projector_hidden_dim, enc.projector_out_dim);
    p.linear(&mut encoder_plan, "projector.l1", bdim, h, true, true);
    if enc.projector_layers == 3 {
        p.linear(&mut encoder_plan, "projector.l2", h, h, true, true);
    }
    p.linear(&mut encoder_plan, "projector.out", h, d, true, false);

    let encoder_dim = p.next_offset;

    // prediction MLP: bottleneck hidden with norm + relu, bare linear output
    let mut predictor_plan = Vec::new();
    p.linear(&mut predictor_plan, "predictor.l1", pred.in_out_dim, pred.hidden_dim, true, true);
    p.linear(&mut predictor_plan, "predictor.out", pred.hidden_dim, pred.in_out_dim, false, false);

    // initialize theta segment by segment, each from its own named stream so
    // values do not depend on neighboring segments
    let total: usize = p.next_offset;
    let mut theta = vec![0.0; total];
    let init_key = StreamKey::root(seed).tag("init");
    for seg in &p.segments {
        let vals = &mut theta[seg.offset..seg.offset + seg.len()];
        if seg.name.ends_with(".w") {
            // He initialization: fan_in = product of all but the output dim
            let fan_in: usize = match seg.shape.len() {
                2 => seg.shape[0],
                4 => seg.shape[1] * seg.shape[2] * seg.shape[3],
                _ => unreachable!("weights are 2-D or 4-D"),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = init_key.tag(&seg.name).rng();
            for v in vals.iter_mut() {
                *v = std * standard_normal(&mut rng);
            }
        } else if seg.name.ends_with(".gamma") {
            vals.fill(1.0);
        }
        // biases and beta stay zero
    }

    Ok(ModelParams {
        enc: enc.clone(),
        pred: pred.clone(),
        theta,
        segments: p.segments,
        encoder_dim,
        buffers: p.buffers,
        encoder_plan,
        predictor_plan,
    })
}

fn residual_block(
    p: &mut Planner,
    plan: &mut Vec<PlanStep>,
    name: &str,
    ic: usize,
    oc: usize,
    stride: usize,
) -> Result<()> {
    plan.push(PlanStep { step: Step::PushSkip, label: format!("{name}.skip") });
    p.conv_bn_relu(plan, &format!("{name}.a"), ic, oc, stride, true);
    p.conv_bn_relu(plan, &format!("{name}.b"), oc, oc, 1, false);
    let proj = if ic != oc || stride != 1 {
        let w = p.segment(format!("{name}.proj.w"), &[oc, ic, 1, 1]);
        let bias = if p.batch_norm { None } else { Some(p.segment(format!("{name}.proj.b"), &[oc])) };
        let bn = if p.batch_norm {
            let gamma = p.segment(format!("{name}.proj.bn.gamma"), &[oc]);
            let beta = p.segment(format!("{name}.proj.bn.beta"), &[oc]);
            p.buffers.push(BnBuffer {
                name: format!("{name}.proj.bn"),
                mean: vec![0.0; oc],
                var: vec![1.0; oc],
            });
            Some((gamma, beta, p.buffers.len() - 1))
        } else {
            None
        };
        Some(SkipProj { w, stride, bias, bn })
    } else {
        None
    };
    plan.push(PlanStep { step: Step::ApplySkip { proj }, label: format!("{name}.add") });
    plan.push(PlanStep { step: Step::Relu, label: format!("{name}.relu") });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A feature matrix [B x d] living in a graph.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBatch {
    pub node: NodeId,
    pub grad_enabled: bool,
}

impl FeatureBatch {
    pub fn values<'g>(&self, g: &'g Graph) -> &'g Tensor {
        g.value(self.node)
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.node).shape()[1]
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.node).shape()[0]
    }
}

/// Stop gradient φ: same values, no gradient path.
pub fn stop_gradient(g: &mut Graph, f: &FeatureBatch) -> FeatureBatch {
    FeatureBatch { node: g.detach(f.node), grad_enabled: false }
}

/// Mean over the batch of the negative cosine similarity between paired
/// rows. Scalar in [-1, 1].
pub fn cosine_distance(g: &mut Graph, a: &FeatureBatch, b: &FeatureBatch) -> Result<f64> {
    let node = cosine_distance_node(g, a, b)?;
    Ok(g.value(node).scalar())
}

/// Graph-node form for building losses on top of D.
pub fn cosine_distance_node(g: &mut Graph, a: &FeatureBatch, b: &FeatureBatch) -> Result<NodeId> {
    g.neg_cos_mean(a.node, b.node)
}

#[derive(Debug, Clone, Copy)]
pub struct EncodeOutput {
    /// Projector output f_k, [B x projector_out_dim].
    pub projected: FeatureBatch,
    /// Pre-projector backbone feature, [B x backbone_dim]; linear and KNN
    /// evaluation read representations here.
    pub backbone: FeatureBatch,
}

/// Binds a model's parameter segments to graph leaves. One session per
/// graph; all encodes/predicts through it share parameter nodes, which is
/// what makes the siamese branches weight-tied.
pub struct ModelSession<'m> {
    pub model: &'m ModelParams,
    mode: Mode,
    seg_nodes: Vec<Option<NodeId>>,
    /// (buffer index, bn node) pairs recorded in Train mode, for running
    /// statistics updates after the step commits.
    pub bn_updates: Vec<(usize, NodeId)>,
}

impl<'m> ModelSession<'m> {
    pub fn new(model: &'m ModelParams, mode: Mode) -> Self {
        Self { model, mode, seg_nodes: vec![None; model.segments.len()], bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn seg_node(&mut self, g: &mut Graph, idx: usize) -> NodeId {
        if let Some(id) = self.seg_nodes[idx] {
            return id;
        }
        let seg = &self.model.segments[idx];
        let t = Tensor::from_vec(&seg.shape, self.model.theta[seg.offset..seg.offset + seg.len()].to_vec())
            .expect("segment table is consistent");
        let id = g.leaf(t, self.mode == Mode::Train);
        self.seg_nodes[idx] = Some(id);
        id
    }

    fn run_plan(&mut self, g: &mut Graph, plan: Plan, input: NodeId) -> Result<NodeId> {
        let len = match plan {
            Plan::Encoder => self.model.encoder_plan.len(),
            Plan::Predictor => self.model.predictor_plan.len(),
        };
        self.run_plan_range(g, plan, input, 0, len)
    }

    fn batch_norm(
        &mut self,
        g: &mut Graph,
        cur: NodeId,
        gamma: usize,
        beta: usize,
        buf: usize,
    ) -> Result<NodeId> {
        let gn = self.seg_node(g, gamma);
        let bn = self.seg_node(g, beta);
        match self.mode {
            Mode::Train => {
                let node = g.batch_norm_train(cur, gn, bn, BN_EPS)?;
                self.bn_updates.push((buf, node));
                Ok(node)
            }
            Mode::Eval => {
                let b = &self.model.buffers[buf];
                let (mean, var) = (b.mean.clone(), b.var.clone());
                g.batch_norm_eval(cur, gn, bn, &mean, &var, BN_EPS)
            }
        }
    }

    fn apply_step(
        &mut self,
        g: &mut Graph,
        ps: &PlanStep,
        cur: NodeId,
        skip: &mut Option<NodeId>,
    ) -> Result<NodeId> {
        match &ps.step {
            Step::Conv { w, bias, stride, pad } => {
                let wn = self.seg_node(g, *w);
                let mut h = g.conv2d(cur, wn, *stride, *pad)?;
                if let Some(b) = bias {
                    let bn = self.seg_node(g, *b);
                    h = g.add_chan_bias(h, bn)?;
                }
                Ok(h)
            }
            Step::Linear { w, bias } => {
                let wn = self.seg_node(g, *w);
                let mut h = g.matmul(cur, wn)?;
                if let Some(b) = bias {
                    let bn = self.seg_node(g, *b);
                    h = g.add_row_bias(h, bn)?;
                }
                Ok(h)
            }
            Step::Bn { gamma, beta, buf } => self.batch_norm(g, cur, *gamma, *beta, *buf),
            Step::Relu => Ok(g.relu(cur)),
            Step::MaxPool2 => g.max_pool2(cur),
            Step::AvgPool2 => g.avg_pool2(cur),
            Step::GlobalPool => g.global_avg_pool(cur),
            Step::PushSkip => {
                *skip = Some(cur);
                Ok(cur)
            }
            Step::ApplySkip { proj } => {
                let s = skip.take().expect("plan places PushSkip before ApplySkip");
                let branch = match proj {
                    None => s,
                    Some(pr) => {
                        let wn = self.seg_node(g, pr.w);
                        let mut h = g.conv2d(s, wn, pr.stride, 0)?;
                        if let Some(b) = pr.bias {
                            let bn = self.seg_node(g, b);
                            h = g.add_chan_bias(h, bn)?;
                        }
                        if let Some((gamma, beta, buf)) = pr.bn {
                            h = self.batch_norm(g, h, gamma, beta, buf)?;
                        }
                        h
                    }
                };
                g.add(cur, branch)
            }
        }
    }

    /// Encode one view tensor [B x C x H x W] into projected features.
    pub fn encode(&mut self, g: &mut Graph, images: &Tensor) -> Result<EncodeOutput> {
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != self.model.enc.in_channels
            || shape[2] != self.model.enc.image_size
            || shape[3] != self.model.enc.image_size
        {
            return Err(Error::Input(format!(
                "encode expects [B x {} x {s} x {s}], got {shape:?}",
                self.model.enc.in_channels,
                s = self.model.enc.image_size
            )));
        }
        if !images.is_finite() {
            return Err(Error::Input("non-finite input image".into()));
        }
        let x = g.leaf(images.clone(), false);

        // split the plan at the projector boundary to expose the backbone
        // feature: GlobalPool is the last backbone step
        let gap_pos = self
            .model
            .encoder_plan
            .iter()
            .position(|ps| matches!(ps.step, Step::GlobalPool))
            .expect("encoder plan always pools");
        let full = self.run_plan_range(g, Plan::Encoder, x, 0, gap_pos + 1)?;
        let backbone = full;
        let projected =
            self.run_plan_range(g, Plan::Encoder, backbone, gap_pos + 1, self.model.encoder_plan.len())?;
        let grad = self.mode == Mode::Train;
        Ok(EncodeOutput {
            projected: FeatureBatch { node: projected, grad_enabled: grad },
            backbone: FeatureBatch { node: backbone, grad_enabled: grad },
        })
    }

    fn run_plan_range(
        &mut self,
        g: &mut Graph,
        plan: Plan,
        input: NodeId,
        from: usize,
        to: usize,
    ) -> Result<NodeId> {
        // delegate to run_plan on a sliced copy
        let steps = match plan {
            Plan::Encoder => self.model.encoder_plan[from..to].to_vec(),
            Plan::Predictor => self.model.predictor_plan[from..to].to_vec(),
        };
        let mut cur = input;
        let mut skip: Option<NodeId> = None;
        for ps in &steps {
            cur = self.apply_step(g, ps, cur, &mut skip)?;
            if !g.value(cur).is_finite() {
                return Err(Error::Numerical(format!("non-finite activation after {}", ps.label)));
            }
        }
        Ok(cur)
    }

    /// Encode each view in order. Views share this session's parameter
    /// leaves.
    pub fn encode_views(&mut self, g: &mut Graph, views: &[Tensor]) -> Result<Vec<EncodeOutput>> {
        if views.is_empty() {
            return Err(Error::Input("encode_views: need at least one view".into()));
        }
        views.iter().map(|v| self.encode(g, v)).collect()
    }

    /// Prediction MLP g(.).
    pub fn predict(&mut self, g: &mut Graph, f: &FeatureBatch) -> Result<FeatureBatch> {
        let shape = f.values(g).shape();
        if shape.len() != 2 || shape[1] != self.model.pred.in_out_dim {
            return Err(Error::Config(format!(
                "predict expects [B x {}], got {shape:?}",
                self.model.pred.in_out_dim
            )));
        }
        let out = self.run_plan(g, Plan::Predictor, f.node)?;
        Ok(FeatureBatch { node: out, grad_enabled: self.mode == Mode::Train })
    }

    /// Gather backward() results into a flat gradient aligned with theta.
    /// Segments that received no gradient (e.g. everything behind a
    /// stop-gradient) contribute exact zeros.
    pub fn theta_grad(&self, grads: &[Option<Tensor>]) -> Tensor {
        let mut flat = Tensor::zeros(&[self.model.total_dim()]);
        for (idx, seg) in self.model.segments.iter().enumerate() {
            let Some(node) = self.seg_nodes[idx] else { continue };
            let Some(gt) = grads.get(node.raw()).and_then(|o| o.as_ref()) else { continue };
            flat.data_mut()[seg.offset..seg.offset + seg.len()].copy_from_slice(gt.data());
        }
        flat
    }
}

#[derive(Clone, Copy)]
enum Plan {
    Encoder,
    Predictor,
}

impl ModelParams {
    pub fn encoder_spec(&self) -> &EncoderSpec {
        &self.enc
    }

    pub fn predictor_spec(&self) -> &PredictorSpec {
        &self.pred
    }

    pub fn total_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.theta.len() {
            return Err(Error::Input(format!(
                "theta length {} != {}",
                values.len(),
                self.theta.len()
            )));
        }
        self.theta.copy_from_slice(values);
        Ok(())
    }

    /// θ_f: encoder (backbone + projector) slice of theta.
    pub fn encoder_params(&self) -> &[f64] {
        &self.theta[..self.encoder_dim]
    }

    /// θ_g: predictor slice of theta.
    pub fn predictor_params(&self) -> &[f64] {
        &self.theta[self.encoder_dim..]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffer] {
        &mut self.buffers
    }

    /// Index of the segment a flat coordinate belongs to.
    pub fn segment_of(&self, coord: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| coord >= s.offset && coord < s.offset + s.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;

    fn small_enc() -> EncoderSpec {
        EncoderSpec {
            backbone: Backbone::TinyConv,
            image_size: 8,
            in_channels: 3,
            base_channels: 2,
            batch_norm: true,
            small_input_stem: true,
            projector_layers: 2,
            projector_hidden_dim: 8,
            projector_out_dim: 8,
        }
    }

    fn small_pred() -> PredictorSpec {
        PredictorSpec { hidden_dim: 4, in_out_dim: 8 }
    }

    fn image_batch(b: usize, spec: &EncoderSpec, seed: u64) -> Tensor {
        let key = StreamKey::root(seed).tag("test-images");
        let n = b * spec.in_channels * spec.image_size * spec.image_size;
        let mut rng = key.rng();
        let data: Vec<f64> = (0..n).map(|_| 0.5 + 0.2 * standard_normal(&mut rng)).collect();
        Tensor::from_vec(&[b, spec.in_channels, spec.image_size, spec.image_size], data).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let enc = small_enc();
        let pred = small_pred();
        let m1 = build_model(&enc, &pred, 7).unwrap();
        let m2 = build_model(&enc, &pred, 7).unwrap();
        assert_eq!(m1.theta(), m2.theta());
        let m3 = build_model(&enc, &pred, 8).unwrap();
        assert_ne!(m1.theta(), m3.theta());
        assert_eq!(m1.total_dim(), m1.encoder_params().len() + m1.predictor_params().len());
    }

    #[test]
    fn projector_predictor_dim_mismatch_is_config_error() {
        let enc = small_enc();
        let pred = PredictorSpec { hidden_dim: 4, in_out_dim: 16 };
        match build_model(&enc, &pred, 7) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_projector_layers_rejected() {
        let mut enc = small_enc();
        enc.projector_layers = 4;
        assert!(matches!(build_model(&enc, &small_pred(), 1), Err(Error::Config(_))));
        let mut enc = small_enc();
        enc.projector_hidden_dim = 4; // < out_dim
        assert!(matches!(build_model(&enc, &small_pred(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = build_model(&small_enc(), &small_pred(), 3).unwrap();
        let views: Vec<Tensor> = (0..2).map(|i| image_batch(4, m.encoder_spec(), 10 + i)).collect();
        let mut g = Graph::new();
        let mut sess = ModelSession::new(&m, Mode::Train);
        let outs = sess.encode_views(&mut g, &views).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.projected.values(&g).shape(), &[4, 8]);
            assert_eq!(o.backbone.values(&g).shape(), &[4, 8]);
            assert!(o.projected.grad_enabled);
        }
        // identical views give bitwise-identical features
        let same = vec![views[0].clone(), views[0].clone()];
        let mut g2 = Graph::new();
        let mut sess2 = ModelSession::new(&m, Mode::Train);
        let outs2 = sess2.encode_views(&mut g2, &same).unwrap();
        assert_eq!(
            outs2[0].projected.values(&g2).data(),
            outs2[1].projected.values(&g2).data()
        );
    }

    #[test]
    fn predict_zero_weights_give_zero_output() {
        let mut m = build_model(&small_enc(), &small_pred(), 3).unwrap();
        let enc_dim = m.encoder_params().len();
        let total = m.total_dim();
        m.theta_mut()[enc_dim..total].fill(0.0);
        let mut g = Graph::new();
        let mut sess = ModelSession::new(&m, Mode::Eval);
        let f = FeatureBatch {
            node: g.leaf(image_like(4, 8, 5), false),
            grad_enabled: false,
        };
        let out = sess.predict(&mut g, &f).unwrap();
        assert_eq!(out.values(&g).shape(), &[4, 8]);
        assert!(out.values(&g).data().iter().all(|v| *v == 0.0));
    }

    fn image_like(b: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = StreamKey::root(seed).tag("feat").rng();
        let data: Vec<f64> = (0..b * d).map(|_| standard_normal(&mut rng)).collect();
        Tensor::from_vec(&[b, d], data).unwrap()
    }

    #[test]
    fn eval_mode_uses_buffers_and_records_nothing() {
        let m = build_model(&small_enc(), &small_pred(), 3).unwrap();
        let img = image_batch(4, m.encoder_spec(), 11);
        let mut g = Graph::new();
        let mut sess = ModelSession::new(&m, Mode::Eval);
        sess.encode(&mut g, &img).unwrap();
        assert!(sess.bn_updates.is_empty());

        let mut g2 = Graph::new();
        let mut sess2 = ModelSession::new(&m, Mode::Train);
        sess2.encode(&mut g2, &img).unwrap();
        assert!(!sess2.bn_updates.is_empty());
    }

    #[test]
    fn non_finite_activation_identifies_layer() {
        let mut m = build_model(&small_enc(), &small_pred(), 3).unwrap();
        m.theta_mut()[0] = f64::NAN;
        let img = image_batch(2, m.encoder_spec(), 12);
        let mut g = Graph::new();
        let mut sess = ModelSession::new(&m, Mode::Train);
        match sess.encode(&mut g, &img) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("backbone.stem"), "{msg}"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    // Full-model gradient check: D(g(f(x1)), phi(f(x2))) against central
    // finite differences over every theta coordinate, batch-norm in train
    // mode included. The phi branch defines the target as a constant at the
    // base point, so the finite-difference oracle must hold those target
    // values frozen while theta varies — that frozen-target function is the
    // one whose true derivative backprop-through-stop-gradient computes.
    #[test]
    fn full_model_gradcheck() {
        for backbone in [Backbone::TinyConv, Backbone::SmallResnet] {
            let small = backbone == Backbone::TinyConv;
            let enc = EncoderSpec {
                backbone,
                small_input_stem: small,
                image_size: if small { 8 } else { 16 },
                ..small_enc()
            };
            let pred = small_pred();
            let m0 = build_model(&enc, &pred, 21).unwrap();
            let x1 = image_batch(3, &enc, 31);
            let x2 = image_batch(3, &enc, 32);

            // analytic gradient at the base point; also captures the frozen
            // teacher values
            let mut g = Graph::new();
            let mut sess = ModelSession::new(&m0, Mode::Train);
            let o1 = sess.encode(&mut g, &x1).unwrap();
            let o2 = sess.encode(&mut g, &x2).unwrap();
            let g1 = sess.predict(&mut g, &o1.projected).unwrap();
            let phi = stop_gradient(&mut g, &o2.projected);
            let target = phi.values(&g).clone();
            let loss = cosine_distance_node(&mut g, &g1, &phi).unwrap();
            let grads = g.backward(loss).unwrap();
            let analytic = sess.theta_grad(&grads);

            let eval = |theta: &[f64]| -> Result<f64> {
                let mut m = m0.clone();
                m.set_theta(theta)?;
                let mut g = Graph::new();
                let mut sess = ModelSession::new(&m, Mode::Train);
                let o1 = sess.encode(&mut g, &x1)?;
                let g1 = sess.predict(&mut g, &o1.projected)?;
                let t = FeatureBatch { node: g.leaf(target.clone(), false), grad_enabled: false };
                let loss = cosine_distance_node(&mut g, &g1, &t)?;
                Ok(g.value(loss).scalar())
            };
            let err = GradCheck::default()
                .check(m0.theta(), analytic.data(), eval)
                .unwrap();
            assert!(err < 1e-4, "{backbone:?}: max rel err {err}");
        }
    }

    // Stop-gradient nullity: with the student side constant, every theta
    // gradient is exactly zero even though the loss value genuinely depends
    // on theta.
    #[test]
    fn stop_gradient_nullity_with_value_dependence() {
        let m = build_model(&small_enc(), &small_pred(), 5).unwrap();
        let x = image_batch(3, m.encoder_spec(), 40);
        let c = image_like(3, 8, 41);

        let eval = |theta: &[f64]| -> Result<f64> {
            let mut mm = m.clone();
            mm.set_theta(theta)?;
            let mut g = Graph::new();
            let mut sess = ModelSession::new(&mm, Mode::Train);
            let o = sess.encode(&mut g, &x)?;
            let phi = stop_gradient(&mut g, &o.projected);
            let cb = FeatureBatch { node: g.leaf(c.clone(), false), grad_enabled: false };
            let loss = cosine_distance_node(&mut g, &cb, &phi)?;
            Ok(g.value(loss).scalar())
        };

        let mut g = Graph::new();
        let mut sess = ModelSession::new(&m, Mode::Train);
        let o = sess.encode(&mut g, &x).unwrap();
        let phi = stop_gradient(&mut g, &o.projected);
        let cb = FeatureBatch { node: g.leaf(c.clone(), false), grad_enabled: false };
        let loss = cosine_distance_node(&mut g, &cb, &phi).unwrap();
        let base = g.value(loss).scalar();
        let grads = g.backward(loss).unwrap();
        let flat = sess.theta_grad(&grads);
        assert!(flat.data().iter().all(|v| v.to_bits() == 0), "gradient leaked through phi");

        // the value must still depend on theta: a finite-difference probe on
        // an encoder weight moves the loss...
        let mut theta = m.theta().to_vec();
        theta[0] += 1e-3;
        let moved = eval(&theta).unwrap();
        assert!((moved - base).abs() > 1e-12, "loss has no theta dependence; test is vacuous");

        // ...while stepping along the (zero) gradient direction cannot move
        // it at all: theta - lr * 0 re-evaluates bitwise identically.
        let stepped: Vec<f64> = m
            .theta()
            .iter()
            .zip(flat.data())
            .map(|(t, gr)| t - 1e-5 * gr)
            .collect();
        let after = eval(&stepped).unwrap();
        assert_eq!(after.to_bits(), base.to_bits());
    }

    #[test]
    fn predictor_params_are_theta_suffix() {
        let m = build_model(&small_enc(), &small_pred(), 9).unwrap();
        let names: Vec<&str> = m.segments().iter().map(|s| s.name.as_str()).collect();
        let first_pred = names.iter().position(|n| n.starts_with("predictor")).unwrap();
        assert!(names[..first_pred].iter().all(|n| !n.starts_with("predictor")));
        assert!(names[first_pred..].iter().all(|n| n.starts_with("predictor")));
        assert_eq!(m.encoder_params().len(), m.segments()[first_pred].offset);
    }
}
