//! Pretraining loop: SGD with momentum and L2 weight decay, linear LR
//! batch scaling, per-step cosine annealing with linear warmup, loss
//! dispatch, batch-norm running-stat folding, and JSONL metrics.

use crate::augment::{generate_views, preset, AugmentationConfig};
use crate::checkpoint::{save_checkpoint, CheckpointHandle};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::eval::collapse_metric;
use crate::losses::{forward_backward, Method};
use crate::model::{build_model, EncoderSpec, Mode, ModelParams, PredictorSpec};
use crate::rng::{shuffled_indices, StreamKey};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Running-stat momentum for batch norm: running <- 0.9*running + 0.1*batch.
const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_EVERY_EPOCHS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Augmentation preset name, resolved via `augment::preset`.
    pub augmentation: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ensiam,
            k: 4,
            batch_size: 64,
            epochs: 50,
            base_lr: 0.10,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            augmentation: "default".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        match self.method {
            Method::Simsiam if self.k != 2 => {
                return Err(Error::Input(format!("simsiam uses exactly 2 views, got K={}", self.k)))
            }
            Method::SimsiamKaug if self.k < 2 || self.k % 2 != 0 => {
                return Err(Error::Input(format!(
                    "simsiam_kaug needs even K >= 2 for neighbor pairing, got K={}",
                    self.k
                )))
            }
            Method::Ensiam if self.k < 2 => {
                return Err(Error::Input(format!("ensiam needs K >= 2, got K={}", self.k)))
            }
            _ => {}
        }
        preset(&self.augmentation)?;
        Ok(())
    }
}

/// One structured metrics record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_terms: Vec<f64>,
    /// Collapse diagnostic over this step's projected features (all K views).
    pub feature_std: f64,
}

/// Complete optimizer state. All stochastic draws are derived positionally
/// from `seed` (epoch, instance id, view index), so seed plus the step
/// counters is the entire RNG state: restoring these fields resumes the
/// exact trajectory.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    /// SGD momentum buffer, aligned with `params.theta()`.
    pub velocity: Vec<f64>,
    pub global_step: usize,
    pub epoch: usize,
    /// ceil(N / batch_size); fixes the schedule geometry.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64, steps_per_epoch: usize) -> Self {
        let dim = params.total_dim();
        TrainState {
            params,
            velocity: vec![0.0; dim],
            global_step: 0,
            epoch: 0,
            steps_per_epoch,
            seed,
        }
    }
}

/// Linear learning-rate scaling: base_lr * batch_size / 256.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Schedule value at `step`: linear ramp 0 -> peak over `warmup_steps`,
/// then cosine decay to ~0 over the remaining steps. Peak is attained
/// exactly at step == warmup_steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    debug_assert!(step < total_steps && warmup_steps < total_steps);
    if step < warmup_steps {
        peak_lr * step as f64 / warmup_steps as f64
    } else {
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Batch index order for one epoch, shared by the training loop and the
/// resume tests so both walk identical batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = shuffled_indices(n, &StreamKey::root(seed).tag("shuffle").index(epoch as u64));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One SGD step: sample K views, forward/backward, update
/// v <- mu*v + (grad + wd*theta), theta <- theta - lr*v. Parameters and
/// buffers are mutated only after the loss and gradient pass finite checks.
pub fn train_step(
    state: &mut TrainState,
    images: &Tensor,
    source_ids: &[u64],
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
) -> Result<StepMetrics> {
    let total_steps = cfg.epochs * state.steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * state.steps_per_epoch;
    if state.global_step >= total_steps {
        return Err(Error::Input(format!(
            "step {} is past the schedule end ({total_steps} steps)",
            state.global_step
        )));
    }
    let lr = lr_at(state.global_step, total_steps, warmup_steps, scaled_lr(cfg.base_lr, cfg.batch_size));
    let epoch = state.global_step / state.steps_per_epoch;

    let view_stream = StreamKey::root(state.seed).tag("epoch").index(epoch as u64).tag("augment");
    let vb = generate_views(images, source_ids, cfg.k, aug, &view_stream)?;
    let fw = forward_backward(&state.params, &vb.views, cfg.method, Mode::Train)?;

    if !fw.output.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", fw.output.total)));
    }
    if let Some(i) = fw.grad.data().iter().position(|v| !v.is_finite()) {
        let seg = state.params.segment_of(i).map(|s| s.name.clone()).unwrap_or_default();
        return Err(Error::Numerical(format!("non-finite gradient at {seg}[{i}]")));
    }

    let grad = fw.grad.data();
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    {
        let theta = state.params.theta();
        for (i, v) in state.velocity.iter_mut().enumerate() {
            *v = mu * *v + (grad[i] + wd * theta[i]);
        }
    }
    let velocity = &state.velocity;
    let theta = state.params.theta_mut();
    for (t, v) in theta.iter_mut().zip(velocity) {
        *t -= lr * *v;
    }
    for (buf, mean, var) in &fw.bn_stats {
        let b = &mut state.params.buffers_mut()[*buf];
        for (r, m) in b.mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in b.var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    let feature_std = step_feature_std(&fw.features)?;
    let metrics = StepMetrics {
        step: state.global_step,
        epoch,
        lr,
        loss_total: fw.output.total,
        loss_terms: fw.output.per_view_terms.clone(),
        feature_std,
    };
    state.global_step += 1;
    state.epoch = state.global_step / state.steps_per_epoch;
    Ok(metrics)
}

/// Collapse metric over the step's K view-feature batches stacked row-wise.
/// Fully collapsed features (a zero-norm row) report 0.0 rather than erroring:
/// that is the condition the metric exists to flag.
fn step_feature_std(features: &[Tensor]) -> Result<f64> {
    let d = features[0].shape()[1];
    let mut rows = Vec::new();
    for f in features {
        rows.extend_from_slice(f.data());
    }
    let stacked = Tensor::from_vec(&[rows.len() / d, d], rows)?;
    match collapse_metric(&stacked) {
        Ok(v) => Ok(v),
        Err(Error::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub handle: CheckpointHandle,
    pub metrics_path: PathBuf,
    pub state: TrainState,
    /// Metrics of the last optimizer step.
    pub last: StepMetrics,
}

/// Full pretraining run: builds the model from the specs, walks
/// epochs x ceil(N/B) steps with per-epoch reshuffling, appends one JSONL
/// record per step plus an epoch summary, and writes periodic and final
/// checkpoints under `out_dir`.
pub fn pretrain(
    cfg: &TrainConfig,
    enc: &EncoderSpec,
    pred: &PredictorSpec,
    dataset: &ImageDataset,
    out_dir: &Path,
    config_digest: &str,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let aug = preset(&cfg.augmentation)?;
    if dataset.is_empty() {
        return Err(Error::Input("pretrain needs a nonempty dataset".into()));
    }
    fs::create_dir_all(out_dir)?;
    let params = build_model(enc, pred, cfg.seed)?;
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut state = TrainState::new(params, cfg.seed, steps_per_epoch);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?,
    );

    let mut last: Option<StepMetrics> = None;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let images = dataset.batch(&chunk)?;
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let step = state.global_step;
            let m = train_step(&mut state, &images, &ids, cfg, &aug)
                .map_err(|e| e.context(&format!("step {step}")))?;
            writeln!(log, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
            loss_sum += m.loss_total;
            batches += 1;
            last = Some(m);
        }
        let summary = serde_json::json!({
            "epoch": epoch,
            "loss_mean": loss_sum / batches as f64,
            "feature_std": last.as_ref().map(|m| m.feature_std),
        });
        writeln!(log, "{summary}")?;
        log.flush()?;
        let end_of_run = epoch + 1 == cfg.epochs;
        if !end_of_run && (epoch + 1) % CHECKPOINT_EVERY_EPOCHS == 0 {
            save_checkpoint(&state, config_digest, &out_dir.join(format!("ckpt-epoch-{:04}.bin", epoch + 1)))?;
        }
    }
    let handle = save_checkpoint(&state, config_digest, &out_dir.join("ckpt-final.bin"))?;
    Ok(PretrainOutcome {
        handle,
        metrics_path,
        state,
        last: last.expect("at least one step ran"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backbone;
    use proptest::prelude::*;

    fn tiny_spec() -> (EncoderSpec, PredictorSpec) {
        (
            EncoderSpec {
                backbone: Backbone::TinyConv,
                image_size: 16,
                in_channels: 3,
                base_channels: 2,
                batch_norm: true,
                small_input_stem: true,
                projector_layers: 2,
                projector_hidden_dim: 8,
                projector_out_dim: 8,
            },
            // hidden width 8 keeps the all-dead-relu row (which would make
            // the predicted feature exactly zero under zero-init biases and
            // trip the degenerate-input check) off these fixed seeds
            PredictorSpec { hidden_dim: 8, in_out_dim: 8 },
        )
    }

    fn tiny_state(seed: u64, steps_per_epoch: usize) -> TrainState {
        let (enc, pred) = tiny_spec();
        TrainState::new(build_model(&enc, &pred, seed).unwrap(), seed, steps_per_epoch)
    }

    fn random_batch(b: usize, seed: u64) -> (Tensor, Vec<u64>) {
        let mut rng = StreamKey::root(seed).tag("imgs").rng();
        use rand::Rng;
        let v: Vec<f64> = (0..b * 3 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        (Tensor::from_vec(&[b, 3, 16, 16], v).unwrap(), (0..b as u64).collect())
    }

    fn cfg(method: Method, k: usize) -> TrainConfig {
        TrainConfig {
            method,
            k,
            batch_size: 4,
            epochs: 4,
            warmup_epochs: 1,
            augmentation: "default".into(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn scaled_lr_follows_linear_rule() {
        assert_eq!(scaled_lr(0.10, 256), 0.10);
        assert_eq!(scaled_lr(0.10, 64), 0.025);
        assert_eq!(scaled_lr(0.10, 512), 0.20);
    }

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 0.5), 0.0);
        assert_eq!(lr_at(10, 100, 10, 0.5), 0.5);
        // cosine endpoint: within the last-step bound of 0
        let last = lr_at(99, 100, 10, 0.5);
        let bound = 0.5 * (1.0 - (std::f64::consts::PI * (1.0 - 1.0 / 90.0)).cos()) / 2.0;
        assert!(last > 0.0 && last <= bound, "{last} vs {bound}");
        // no warmup: starts at peak
        assert_eq!(lr_at(0, 100, 0, 0.5), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lr_schedule_shape(total in 2usize..200, frac in 0.0f64..0.9, peak in 0.01f64..2.0) {
            let warmup = ((total as f64) * frac) as usize;
            let vals: Vec<f64> = (0..total).map(|s| lr_at(s, total, warmup, peak)).collect();
            // nondecreasing through warmup, nonincreasing after, max exactly peak
            for s in 1..=warmup.min(total - 1) {
                prop_assert!(vals[s] >= vals[s - 1]);
            }
            for s in warmup + 1..total {
                prop_assert!(vals[s] <= vals[s - 1]);
            }
            let max = vals.iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(max, peak);
        }
    }

    #[test]
    fn config_validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate()
        };
        assert!(matches!(bad(|c| c.base_lr = 0.0), Err(Error::Config(_))));
        assert!(matches!(bad(|c| c.momentum = 1.0), Err(Error::Config(_))));
        assert!(matches!(bad(|c| c.momentum = -0.1), Err(Error::Config(_))));
        assert!(matches!(bad(|c| c.weight_decay = -1e-4), Err(Error::Config(_))));
        assert!(matches!(bad(|c| c.warmup_epochs = 50), Err(Error::Config(_))));
        assert!(matches!(bad(|c| c.augmentation = "nope".into()), Err(Error::Config(_))));
        assert!(matches!(
            bad(|c| {
                c.method = Method::SimsiamKaug;
                c.k = 3;
            }),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            bad(|c| {
                c.method = Method::Simsiam;
                c.k = 4;
            }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_lr_step_leaves_theta_bitwise_unchanged() {
        // warmup >= 1 epoch makes step 0 run at lr exactly 0
        let c = cfg(Method::Ensiam, 2);
        let mut state = tiny_state(3, 2);
        let before = state.params.theta().to_vec();
        let (images, ids) = random_batch(4, 9);
        let aug = preset("default").unwrap();
        let m = train_step(&mut state, &images, &ids, &c, &aug).unwrap();
        assert_eq!(m.lr, 0.0);
        assert!(m.loss_total.is_finite());
        assert_eq!(m.loss_terms.len(), 2);
        for (a, b) in before.iter().zip(state.params.theta()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(state.global_step, 1);
    }

    #[test]
    fn steps_are_deterministic_from_state() {
        let c = cfg(Method::SimsiamKaug, 4);
        let (images, ids) = random_batch(4, 10);
        let aug = preset("default").unwrap();
        let mut a = tiny_state(6, 2);
        let mut b = a.clone();
        let ma = train_step(&mut a, &images, &ids, &c, &aug).unwrap();
        let mb = train_step(&mut b, &images, &ids, &c, &aug).unwrap();
        assert_eq!(ma.loss_total.to_bits(), mb.loss_total.to_bits());
        for (x, y) in a.params.theta().iter().zip(b.params.theta()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.velocity.iter().zip(&b.velocity) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn small_lr_step_decreases_loss_on_same_views() {
        for (method, k) in [(Method::Simsiam, 2), (Method::SimsiamKaug, 4), (Method::Ensiam, 3)] {
            let mut c = cfg(method, k);
            c.warmup_epochs = 0;
            c.weight_decay = 0.0;
            // peak lr = base * 4/256 = 1e-4
            c.base_lr = 1e-4 * 256.0 / 4.0;
            let mut state = tiny_state(11, 2);
            let (images, ids) = random_batch(4, 12);
            let aug = preset("default").unwrap();

            let view_stream = StreamKey::root(state.seed).tag("epoch").index(0).tag("augment");
            let views = generate_views(&images, &ids, k, &aug, &view_stream).unwrap().views;
            let before = forward_backward(&state.params, &views, method, Mode::Train).unwrap();
            let m = train_step(&mut state, &images, &ids, &c, &aug).unwrap();
            assert_eq!(m.loss_total.to_bits(), before.output.total.to_bits());
            let after = forward_backward(&state.params, &views, method, Mode::Train).unwrap();
            assert!(
                after.output.total < before.output.total,
                "{method}: {} -> {}",
                before.output.total,
                after.output.total
            );
        }
    }

    #[test]
    fn ensiam_and_kaug_use_equal_forward_passes_at_equal_k() {
        let (images, ids) = random_batch(4, 13);
        let aug = preset("default").unwrap();
        let k = 4;
        let stream = StreamKey::root(1).tag("epoch").index(0).tag("augment");
        let views = generate_views(&images, &ids, k, &aug, &stream).unwrap().views;
        let model = tiny_state(1, 1).params;
        for method in [Method::SimsiamKaug, Method::Ensiam] {
            let fw = forward_backward(&model, &views, method, Mode::Train).unwrap();
            // one encoder pass and one predictor pass per view
            assert_eq!(fw.features.len(), k);
            assert_eq!(fw.output.per_view_terms.len(), k);
        }
    }

    #[test]
    fn bn_running_stats_move_during_training() {
        let c = cfg(Method::Ensiam, 2);
        let mut state = tiny_state(21, 2);
        let before: Vec<Vec<f64>> =
            state.params.buffers().iter().map(|b| b.mean.clone()).collect();
        let (images, ids) = random_batch(4, 22);
        let aug = preset("default").unwrap();
        train_step(&mut state, &images, &ids, &c, &aug).unwrap();
        let moved = state
            .params
            .buffers()
            .iter()
            .zip(&before)
            .any(|(b, old)| b.mean.iter().zip(old).any(|(x, y)| x != y));
        assert!(moved, "no batch-norm buffer changed");
    }

    #[test]
    fn pretrain_bookkeeping_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = crate::data::synthetic_dataset(2, 20, 16, 5).unwrap();
        assert_eq!(train.len(), 32);
        let c = TrainConfig {
            method: Method::Ensiam,
            k: 2,
            batch_size: 8,
            epochs: 1,
            warmup_epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (enc, pred) = tiny_spec();
        let out = pretrain(&c, &enc, &pred, &train, dir.path(), "digest-x").unwrap();
        assert_eq!(out.state.global_step, 4);
        assert!(out.handle.path.exists());
        assert_eq!(out.handle.config_digest, "digest-x");
        let log = std::fs::read_to_string(&out.metrics_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        // 4 step records + 1 epoch summary
        assert_eq!(lines.len(), 5);
        let first: StepMetrics = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.step, 0);
        assert_eq!(first.loss_terms.len(), 2);
        assert!(first.feature_std > 0.0);
        let summary: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
        assert!(summary["loss_mean"].is_f64());
    }

    #[test]
    fn pretrain_rejects_odd_k_neighbor_pairing_before_any_step() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = crate::data::synthetic_dataset(2, 10, 16, 6).unwrap();
        let c = TrainConfig {
            method: Method::SimsiamKaug,
            k: 3,
            epochs: 2,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let (enc, pred) = tiny_spec();
        let err = pretrain(&c, &enc, &pred, &train, dir.path(), "d").unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(!dir.path().join("metrics.jsonl").exists());
    }

    #[test]
    fn schedule_exhaustion_is_an_error() {
        let c = TrainConfig { epochs: 1, warmup_epochs: 0, k: 2, batch_size: 4, ..cfg(Method::Ensiam, 2) };
        let mut state = tiny_state(7, 1);
        let (images, ids) = random_batch(4, 7);
        let aug = preset("default").unwrap();
        train_step(&mut state, &images, &ids, &c, &aug).unwrap();
        let err = train_step(&mut state, &images, &ids, &c, &aug).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
