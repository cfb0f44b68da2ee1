//! Monte Carlo probe for the gradient-variance comparison between the
//! neighbor-paired and ensemble-target losses.
//!
//! The measured object is Γ(a, b) = ∇θ D(a, stopgrad(b)) at fixed θ, with
//! the transform draw (or an injected feature noise) as the only random
//! element. Covariances over the full parameter vector are summarized by
//! their trace: the semidefinite ordering claimed for the two methods
//! implies the same ordering of traces, which is what the probe tests.
//!
//! Probing requires a model without batch norm: gradients are only
//! tracked in train mode, and train-mode batch statistics would make the
//! single-image forward depend on batch composition (and degenerate at
//! batch size 1). The probe rejects batch-norm models up front.

use crate::augment::{generate_views, AugmentationConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{forward_backward, Method};
use crate::model::{FeatureBatch, Mode, ModelParams, ModelSession};
use crate::rng::{standard_normal, StreamKey};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct GradientSample {
    pub vector: Vec<f64>,
    pub method: Method,
    pub draw_id: u64,
}

impl GradientSample {
    fn new(vector: Vec<f64>, method: Method, draw_id: u64) -> Result<Self> {
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient coordinate {i} in draw {draw_id}"
            )));
        }
        Ok(GradientSample { vector, method, draw_id })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    pub empirical: f64,
    pub term_base: f64,
    pub term_noise: f64,
    pub noise_scale: f64,
    /// |empirical - (term_base + term_noise)| / empirical; NaN when the
    /// empirical trace is 0 (fully deterministic draw).
    pub relative_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageTraces {
    pub kaug_trace: f64,
    pub ensiam_trace: f64,
    pub margin: f64,
    /// One-sided lower bootstrap bound on the margin at the report's
    /// ci_level; margin_ci_lower > 0 means kaug's variance is larger with
    /// that confidence.
    pub margin_ci_lower: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub method_traces: Vec<(Method, f64)>,
    pub decomposition: Option<Decomposition>,
    pub per_image: Vec<ImageTraces>,
    /// Mean over images of (kaug trace - ensiam trace).
    pub inequality_margin: f64,
    pub n_draws: usize,
    pub ci_level: f64,
    pub skipped: usize,
}

fn unsqueeze_image(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("probe expects a single [C,H,W] image, got {s:?}")));
    }
    Tensor::from_vec(&[1, s[0], s[1], s[2]], x.data().to_vec())
}

fn reject_batch_norm(params: &ModelParams) -> Result<()> {
    if params.encoder_spec().batch_norm {
        return Err(Error::Input(
            "variance probing needs batch_norm = false: single-image batch statistics \
             are degenerate and running-stat inference tracks no gradients"
                .into(),
        ));
    }
    Ok(())
}

fn gamma_for_views(params: &ModelParams, views: &[Tensor], method: Method) -> Result<Vec<f64>> {
    let fw = forward_backward(params, views, method, Mode::Train)?;
    Ok(fw.grad.data().to_vec())
}

/// Draw `n_draws` gradient vectors for one source image, each from a fresh
/// transform sample, at fixed parameters. Draws whose features degenerate
/// (zero-norm rows) are skipped and counted; more than 10% skipped is an
/// error.
pub fn sample_gradients(
    params: &ModelParams,
    image: &Tensor,
    method: Method,
    k: usize,
    n_draws: usize,
    cfg: &AugmentationConfig,
    stream: &StreamKey,
) -> Result<(Vec<GradientSample>, usize)> {
    if n_draws < 2 {
        return Err(Error::Input(format!("need n_draws >= 2, got {n_draws}")));
    }
    reject_batch_norm(params)?;
    let batch = unsqueeze_image(image)?;
    let mut samples = Vec::with_capacity(n_draws);
    let mut skipped = 0usize;
    for draw in 0..n_draws as u64 {
        let vb = generate_views(&batch, &[0], k, cfg, &stream.index(draw))?;
        match gamma_for_views(params, &vb.views, method) {
            Ok(v) => samples.push(GradientSample::new(v, method, draw)?),
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped * 10 > n_draws {
        return Err(Error::Degenerate(format!(
            "{skipped} of {n_draws} draws degenerated; parameters are collapsed or pathological"
        )));
    }
    Ok((samples, skipped))
}

/// Trace of the empirical covariance: sum over coordinates of the unbiased
/// sample variance. Identical vectors give exactly 0.
pub fn covariance_trace(samples: &[GradientSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Input(format!("covariance needs >= 2 samples, got {}", samples.len())));
    }
    let dim = samples[0].vector.len();
    if let Some(s) = samples.iter().find(|s| s.vector.len() != dim) {
        return Err(Error::Input(format!(
            "sample dimension mismatch: draw {} has {} coordinates, expected {dim}",
            s.draw_id,
            s.vector.len()
        )));
    }
    Ok(trace_of(&samples.iter().map(|s| s.vector.as_slice()).collect::<Vec<_>>()))
}

/// Two-pass unbiased variance sum, each coordinate shifted by its first
/// sample so identical inputs cancel exactly.
fn trace_of(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    let dim = rows[0].len();
    let mut trace = 0.0;
    for j in 0..dim {
        let shift = rows[0][j];
        let mut mean = 0.0;
        for r in rows {
            mean += r[j] - shift;
        }
        mean /= n as f64;
        let mut acc = 0.0;
        for r in rows {
            let d = (r[j] - shift) - mean;
            acc += d * d;
        }
        trace += acc / (n as f64 - 1.0);
    }
    trace
}

/// Γ with controlled feature noise: encode the fixed image, add σ·eps_a to
/// the projected feature on the student side, predict, and match against
/// the constant target vector `b`.
fn gamma_feature_noise(
    params: &ModelParams,
    image_batch: &Tensor,
    eps_a: &[f64],
    sigma: f64,
    b: &Tensor,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut sess = ModelSession::new(params, Mode::Train);
    let out = sess.encode(&mut g, image_batch)?;
    let d = out.projected.dim(&g);
    let noise = Tensor::from_vec(&[1, d], eps_a.iter().map(|e| sigma * e).collect())?;
    let noise_node = g.leaf(noise, false);
    let fa_node = g.add(out.projected.node, noise_node)?;
    let fa = FeatureBatch { node: fa_node, grad_enabled: true };
    let pred = sess.predict(&mut g, &fa)?;
    let target = g.leaf(b.clone(), false);
    let loss = g.neg_cos_mean(pred.node, target)?;
    let grads = g.backward(loss)?;
    Ok(sess.theta_grad(&grads).data().to_vec())
}

/// Verify the two-term variance decomposition on a model small enough to
/// finite-difference: empirical trace(Var[Γ(a,b)]) against
/// trace(Var[Γ(a, b̄)]) + σ²·E[‖∂Γ/∂b‖²_F], with b = f0 + σ·eps_b so that
/// Var[b] = σ²I exactly and b̄ = f0 is known rather than estimated.
/// The same eps_a stream drives the empirical and base passes (common
/// random numbers), leaving the Taylor remainder as the dominant gap.
pub fn taylor_decomposition_check(
    params: &ModelParams,
    image: &Tensor,
    noise_scale: f64,
    n_draws: usize,
    jacobian_draws: usize,
    stream: &StreamKey,
) -> Result<VarianceReport> {
    if n_draws < 2 {
        return Err(Error::Input(format!("need n_draws >= 2, got {n_draws}")));
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Error::Input(format!("noise scale must be >= 0, got {noise_scale}")));
    }
    if jacobian_draws == 0 {
        return Err(Error::Input("need jacobian_draws >= 1".into()));
    }
    reject_batch_norm(params)?;
    let batch = unsqueeze_image(image)?;

    // clean projected feature of the fixed image: the analytic mean of b
    let f0: Tensor = {
        let mut g = Graph::new();
        let mut sess = ModelSession::new(params, Mode::Eval);
        let out = sess.encode(&mut g, &batch)?;
        out.projected.values(&g).clone()
    };
    let d = f0.shape()[1];

    let draw_noise = |key: &StreamKey, n: usize| -> Vec<f64> {
        let mut rng = key.rng();
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    };

    let a_stream = stream.tag("a-noise");
    let b_stream = stream.tag("b-noise");

    let mut empirical_rows: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
    let mut base_rows: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
    for i in 0..n_draws as u64 {
        let eps_a = draw_noise(&a_stream.index(i), d);
        let eps_b = draw_noise(&b_stream.index(i), d);
        let b_vals: Vec<f64> =
            f0.data().iter().zip(&eps_b).map(|(f, e)| f + noise_scale * e).collect();
        let b = Tensor::from_vec(&[1, d], b_vals)?;
        empirical_rows.push(gamma_feature_noise(params, &batch, &eps_a, noise_scale, &b)?);
        base_rows.push(gamma_feature_noise(params, &batch, &eps_a, noise_scale, &f0)?);
    }
    let empirical = trace_of(&empirical_rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
    let term_base = trace_of(&base_rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());

    // E over a of the squared Frobenius norm of J = dΓ/db at (a, b̄),
    // central differences over the d target coordinates
    let h = 1e-5;
    let mut frob_sum = 0.0;
    for i in 0..jacobian_draws as u64 {
        let eps_a = draw_noise(&a_stream.index(i), d);
        for j in 0..d {
            let mut plus = f0.data().to_vec();
            plus[j] += h;
            let mut minus = f0.data().to_vec();
            minus[j] -= h;
            let gp = gamma_feature_noise(params, &batch, &eps_a, noise_scale, &Tensor::from_vec(&[1, d], plus)?)?;
            let gm = gamma_feature_noise(params, &batch, &eps_a, noise_scale, &Tensor::from_vec(&[1, d], minus)?)?;
            for (p, m) in gp.iter().zip(&gm) {
                let col = (p - m) / (2.0 * h);
                if !col.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite Jacobian entry at target coordinate {j}, draw {i}"
                    )));
                }
                frob_sum += col * col;
            }
        }
    }
    let term_noise = noise_scale * noise_scale * frob_sum / jacobian_draws as f64;

    let sum = term_base + term_noise;
    let relative_gap = if empirical == 0.0 { f64::NAN } else { (empirical - sum).abs() / empirical };
    Ok(VarianceReport {
        method_traces: vec![],
        decomposition: Some(Decomposition {
            empirical,
            term_base,
            term_noise,
            noise_scale,
            relative_gap,
        }),
        per_image: vec![],
        inequality_margin: 0.0,
        n_draws,
        ci_level: 0.0,
        skipped: 0,
    })
}

/// Estimate both methods' gradient-variance traces per image and bootstrap
/// a one-sided confidence bound on the trace difference. Each draw's view
/// set is shared between the methods, so the bootstrap can pair draws.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    params: &ModelParams,
    images: &[Tensor],
    k: usize,
    n_draws: usize,
    cfg: &AugmentationConfig,
    stream: &StreamKey,
    ci_level: f64,
) -> Result<VarianceReport> {
    if images.is_empty() {
        return Err(Error::Input("compare_methods needs at least one image".into()));
    }
    if n_draws < 2 {
        return Err(Error::Input(format!("need n_draws >= 2, got {n_draws}")));
    }
    if !(0.5..1.0).contains(&ci_level) {
        return Err(Error::Input(format!("ci_level must be in [0.5, 1), got {ci_level}")));
    }
    reject_batch_norm(params)?;
    const BOOTSTRAP_REPS: usize = 200;
    let mut per_image = Vec::with_capacity(images.len());
    let mut skipped_total = 0usize;
    for (xi, image) in images.iter().enumerate() {
        let batch = unsqueeze_image(image)?;
        let img_stream = stream.tag("image").index(xi as u64);
        let mut kaug_rows: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
        let mut ens_rows: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
        let mut skipped = 0usize;
        for draw in 0..n_draws as u64 {
            let vb = generate_views(&batch, &[0], k, cfg, &img_stream.index(draw))?;
            let ka = gamma_for_views(params, &vb.views, Method::SimsiamKaug);
            let en = gamma_for_views(params, &vb.views, Method::Ensiam);
            match (ka, en) {
                (Ok(a), Ok(b)) => {
                    kaug_rows.push(a);
                    ens_rows.push(b);
                }
                (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => skipped += 1,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        if skipped * 10 > n_draws {
            return Err(Error::Degenerate(format!(
                "image {xi}: {skipped} of {n_draws} draws degenerated"
            )));
        }
        skipped_total += skipped;
        let n = kaug_rows.len();
        let kaug_refs: Vec<&[f64]> = kaug_rows.iter().map(|r| r.as_slice()).collect();
        let ens_refs: Vec<&[f64]> = ens_rows.iter().map(|r| r.as_slice()).collect();
        let kaug_trace = trace_of(&kaug_refs);
        let ensiam_trace = trace_of(&ens_refs);
        let margin = kaug_trace - ensiam_trace;

        // paired bootstrap over draws
        let mut boot = Vec::with_capacity(BOOTSTRAP_REPS);
        let mut rng = img_stream.tag("bootstrap").rng();
        for _ in 0..BOOTSTRAP_REPS {
            let idx: Vec<usize> =
                (0..n).map(|_| (rng.random::<f64>() * n as f64).floor() as usize % n).collect();
            let ka: Vec<&[f64]> = idx.iter().map(|&i| kaug_refs[i]).collect();
            let en: Vec<&[f64]> = idx.iter().map(|&i| ens_refs[i]).collect();
            boot.push(trace_of(&ka) - trace_of(&en));
        }
        boot.sort_by(f64::total_cmp);
        let q = ((1.0 - ci_level) * BOOTSTRAP_REPS as f64).floor() as usize;
        let margin_ci_lower = boot[q.min(BOOTSTRAP_REPS - 1)];
        per_image.push(ImageTraces { kaug_trace, ensiam_trace, margin, margin_ci_lower });
    }

    let mean = |f: fn(&ImageTraces) -> f64, v: &[ImageTraces]| -> f64 {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    };
    let report = VarianceReport {
        method_traces: vec![
            (Method::SimsiamKaug, mean(|t| t.kaug_trace, &per_image)),
            (Method::Ensiam, mean(|t| t.ensiam_trace, &per_image)),
        ],
        inequality_margin: mean(|t| t.margin, &per_image),
        per_image,
        decomposition: None,
        n_draws,
        ci_level,
        skipped: skipped_total,
    };
    Ok(report)
}
