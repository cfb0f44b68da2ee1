//! Training objectives.
//!
//! Three methods over K augmented views:
//! - `simsiam`: the symmetric two-view loss ½{D(g1, φ(f2)) + D(g2, φ(f1))}.
//! - `simsiam_kaug`: (1/K) Σ_k D(g_k, φ(f_{N(k)})) with neighbor pairing
//!   N(k); requires even K.
//! - `ensiam`: (1/K) Σ_k D(g_k, φ(f̄)) where f̄ is the per-coordinate mean of
//!   the K projected features, stop-gradient-wrapped.
//!
//! All view reductions and the ensemble mean sum their operands in canonical
//! order (sorted, fixed pairwise tree), so totals and f̄ are bitwise
//! invariant under view permutation, not merely equal to tolerance.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{
    cosine_distance_node, stop_gradient, FeatureBatch, Mode, ModelParams, ModelSession,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simsiam,
    SimsiamKaug,
    Ensiam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Simsiam => "simsiam",
            Method::SimsiamKaug => "simsiam_kaug",
            Method::Ensiam => "ensiam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simsiam" => Ok(Method::Simsiam),
            "simsiam_kaug" => Ok(Method::SimsiamKaug),
            "ensiam" => Ok(Method::Ensiam),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub per_view_terms: Vec<f64>,
    pub method: Method,
    /// Scalar node for backward().
    pub node: NodeId,
}

/// N(k) = 2⌈k/2⌉ − 1 + (k mod 2): the other member of view k's pair.
/// 1-based; an involution with N(1)=2, N(2)=1, N(3)=4, ...
pub fn neighbor_index(k: usize) -> Result<usize> {
    if k < 1 {
        return Err(Error::Input(format!("neighbor_index: k must be >= 1, got {k}")));
    }
    Ok(2 * k.div_ceil(2) - 1 + (k % 2))
}

fn check_aligned(gs: &[FeatureBatch], fs: &[FeatureBatch]) -> Result<()> {
    if gs.is_empty() {
        return Err(Error::Input("loss needs at least one view".into()));
    }
    if gs.len() != fs.len() {
        return Err(Error::Input(format!(
            "view count mismatch: {} predictions vs {} projections",
            gs.len(),
            fs.len()
        )));
    }
    Ok(())
}

/// Shared K-aug core: per-view terms D(g_k, φ(f_{N(k)})), canonical mean.
/// `simsiam_loss` routes through this with K=2, which is what makes the
/// K=2 ↔ Eq.(1) equality bitwise rather than approximate.
fn kaug_core(
    g: &mut Graph,
    gs: &[FeatureBatch],
    fs: &[FeatureBatch],
    method: Method,
) -> Result<LossOutput> {
    check_aligned(gs, fs)?;
    let k = gs.len();
    if k % 2 != 0 {
        return Err(Error::Input(format!("neighbor-paired loss requires even K, got {k}")));
    }
    let phis: Vec<FeatureBatch> = fs.iter().map(|f| stop_gradient(g, f)).collect();
    let mut terms = Vec::with_capacity(k);
    for i in 1..=k {
        let n = neighbor_index(i)?;
        terms.push(cosine_distance_node(g, &gs[i - 1], &phis[n - 1])?);
    }
    finish(g, terms, method)
}

fn finish(g: &mut Graph, terms: Vec<NodeId>, method: Method) -> Result<LossOutput> {
    let node = g.mean_views(&terms)?;
    Ok(LossOutput {
        total: g.value(node).scalar(),
        per_view_terms: terms.iter().map(|t| g.value(*t).scalar()).collect(),
        method,
        node,
    })
}

/// Symmetric two-view loss, Eq-1 form.
pub fn simsiam_loss(
    g: &mut Graph,
    g1: &FeatureBatch,
    g2: &FeatureBatch,
    f1: &FeatureBatch,
    f2: &FeatureBatch,
) -> Result<LossOutput> {
    kaug_core(g, &[*g1, *g2], &[*f1, *f2], Method::Simsiam)
}

/// Neighbor-paired K-view loss; K must be even.
pub fn simsiam_kaug_loss(
    g: &mut Graph,
    gs: &[FeatureBatch],
    fs: &[FeatureBatch],
) -> Result<LossOutput> {
    kaug_core(g, gs, fs, Method::SimsiamKaug)
}

/// Per-coordinate mean of the projected features across views, detached.
/// Bitwise invariant under view permutation.
pub fn ensemble_target(g: &mut Graph, fs: &[FeatureBatch]) -> Result<FeatureBatch> {
    if fs.is_empty() {
        return Err(Error::Input("ensemble_target: empty view list".into()));
    }
    let nodes: Vec<NodeId> = fs.iter().map(|f| f.node).collect();
    let mean = g.mean_views(&nodes)?;
    Ok(FeatureBatch { node: g.detach(mean), grad_enabled: false })
}

/// Averaged-target loss: every student branch is pulled toward the same f̄.
/// Odd K is allowed.
pub fn ensiam_loss(g: &mut Graph, gs: &[FeatureBatch], fs: &[FeatureBatch]) -> Result<LossOutput> {
    check_aligned(gs, fs)?;
    let fbar = ensemble_target(g, fs)?;
    let mut terms = Vec::with_capacity(gs.len());
    for gk in gs {
        terms.push(cosine_distance_node(g, gk, &fbar)?);
    }
    finish(g, terms, Method::Ensiam)
}

/// Dispatch on method name. simsiam requires exactly two views.
pub fn loss_by_method(
    g: &mut Graph,
    method: Method,
    gs: &[FeatureBatch],
    fs: &[FeatureBatch],
) -> Result<LossOutput> {
    match method {
        Method::Simsiam => {
            if gs.len() != 2 || fs.len() != 2 {
                return Err(Error::Input(format!(
                    "simsiam takes exactly 2 views, got {}",
                    gs.len()
                )));
            }
            simsiam_loss(g, &gs[0], &gs[1], &fs[0], &fs[1])
        }
        Method::SimsiamKaug => simsiam_kaug_loss(g, gs, fs),
        Method::Ensiam => ensiam_loss(g, gs, fs),
    }
}

/// One full forward + backward of a training loss on a view set.
pub struct LossForward {
    pub output: LossOutput,
    /// Flat ∇θ, aligned with `ModelParams::theta`.
    pub grad: Tensor,
    /// Batch statistics harvested from train-mode batch norm, as
    /// (buffer index, mean, var); the trainer decides when to fold them
    /// into the running buffers.
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// Projected feature values per view, for collapse monitoring.
    pub features: Vec<Tensor>,
}

/// Encode all views, predict, build the requested loss, and backpropagate
/// to a flat theta gradient.
pub fn forward_backward(
    model: &ModelParams,
    views: &[Tensor],
    method: Method,
    mode: Mode,
) -> Result<LossForward> {
    let mut g = Graph::new();
    let mut sess = ModelSession::new(model, mode);
    let outs = sess.encode_views(&mut g, views)?;
    let fs: Vec<FeatureBatch> = outs.iter().map(|o| o.projected).collect();
    let mut gs = Vec::with_capacity(fs.len());
    for f in &fs {
        gs.push(sess.predict(&mut g, f)?);
    }
    let output = loss_by_method(&mut g, method, &gs, &fs)?;
    let grads = g.backward(output.node)?;
    let grad = sess.theta_grad(&grads);
    let bn_stats = sess
        .bn_updates
        .iter()
        .map(|(buf, node)| {
            let (m, v) = g.batch_stats(*node).expect("train-mode bn node");
            (*buf, m.to_vec(), v.to_vec())
        })
        .collect();
    let features = fs.iter().map(|f| f.values(&g).clone()).collect();
    Ok(LossForward { output, grad, bn_stats, features })
}

/// Target values captured at a fixed theta, for finite-difference oracles.
/// Backprop through stop-gradient differentiates the function "loss with
/// the φ-side values held constant"; an FD check must therefore freeze
/// these targets while theta varies.
pub struct FrozenTargets {
    /// One target matrix per view term (K entries; the ensiam target is the
    /// same f̄ repeated).
    pub targets: Vec<Tensor>,
}

/// Capture the φ-side target values of `method` at the model's current
/// theta.
pub fn capture_targets(model: &ModelParams, views: &[Tensor], method: Method) -> Result<FrozenTargets> {
    let mut g = Graph::new();
    let mut sess = ModelSession::new(model, Mode::Train);
    let outs = sess.encode_views(&mut g, views)?;
    let fs: Vec<FeatureBatch> = outs.iter().map(|o| o.projected).collect();
    let k = fs.len();
    let targets = match method {
        Method::Simsiam | Method::SimsiamKaug => {
            if k % 2 != 0 {
                return Err(Error::Input(format!("even K required, got {k}")));
            }
            (1..=k)
                .map(|i| Ok(fs[neighbor_index(i)? - 1].values(&g).clone()))
                .collect::<Result<Vec<_>>>()?
        }
        Method::Ensiam => {
            let fbar = ensemble_target(&mut g, &fs)?;
            vec![fbar.values(&g).clone(); k]
        }
    };
    Ok(FrozenTargets { targets })
}

/// Loss value at `theta` with φ-side targets frozen: the scalar function
/// whose true gradient the analytic backward pass computes.
pub fn frozen_target_loss(
    model: &ModelParams,
    theta: &[f64],
    views: &[Tensor],
    frozen: &FrozenTargets,
) -> Result<f64> {
    let mut m = model.clone();
    m.set_theta(theta)?;
    let mut g = Graph::new();
    let mut sess = ModelSession::new(&m, Mode::Train);
    let outs = sess.encode_views(&mut g, views)?;
    let mut terms = Vec::with_capacity(outs.len());
    for (o, t) in outs.iter().zip(&frozen.targets) {
        let gk = sess.predict(&mut g, &o.projected)?;
        let tb = FeatureBatch { node: g.leaf(t.clone(), false), grad_enabled: false };
        terms.push(cosine_distance_node(&mut g, &gk, &tb)?);
    }
    let total = g.mean_views(&terms)?;
    Ok(g.value(total).scalar())
}
