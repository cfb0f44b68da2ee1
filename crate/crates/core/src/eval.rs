//! Representation quality probes: linear evaluation on frozen backbone
//! features, weighted KNN, and a collapse diagnostic.
//!
//! Evaluation is read-only over model parameters. Test-time inputs are
//! used as-is (images already match the model size, so the center-crop
//! protocol is the identity).

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Mode, ModelParams, ModelSession};
use crate::rng::{shuffled_indices, StreamKey};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Linear,
    Knn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: Protocol,
    pub top1_accuracy: f64,
    pub n_test: usize,
    pub config_digest: String,
}

const FEATURE_CHUNK: usize = 128;

/// Backbone (pre-projector) features of every image, eval-mode batch norm.
pub fn extract_backbone_features(model: &ModelParams, ds: &ImageDataset) -> Result<Tensor> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Input("cannot extract features of an empty dataset".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut start = 0;
    while start < n {
        let end = (start + FEATURE_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = ds.batch(&idx)?;
        let mut g = Graph::new();
        let mut sess = ModelSession::new(model, Mode::Eval);
        let out = sess.encode(&mut g, &batch)?;
        let feats = out.backbone.values(&g);
        dim = feats.shape()[1];
        rows.extend_from_slice(feats.data());
        start = end;
    }
    Tensor::from_vec(&[n, dim], rows)
}

fn labels_of(ds: &ImageDataset, which: &str) -> Result<Vec<u32>> {
    ds.labels
        .clone()
        .ok_or_else(|| Error::Input(format!("{which} dataset has no labels")))
}

fn check_label_sets(train: &[u32], test: &[u32]) -> Result<usize> {
    let set = |l: &[u32]| -> Vec<bool> {
        let max = l.iter().copied().max().unwrap_or(0) as usize;
        let mut s = vec![false; max + 1];
        for &x in l {
            s[x as usize] = true;
        }
        s
    };
    let (a, b) = (set(train), set(test));
    if a != b {
        return Err(Error::Input(format!(
            "label sets differ between splits (train max {}, test max {})",
            a.len() - 1,
            b.len() - 1
        )));
    }
    Ok(a.len())
}

/// Multinomial-logistic probe on fixed features: SGD with momentum 0.9 and
/// a cosine schedule, no weight decay, zero-initialized head. Returns
/// top-1 accuracy on the test features.
#[allow(clippy::too_many_arguments)]
pub fn train_linear_probe(
    train_x: &Tensor,
    train_y: &[u32],
    test_x: &Tensor,
    test_y: &[u32],
    n_classes: usize,
    epochs: usize,
    base_lr: f64,
    seed: u64,
) -> Result<f64> {
    let (n, d) = dims2(train_x, "train features")?;
    let (nt, dt) = dims2(test_x, "test features")?;
    if d != dt {
        return Err(Error::Input(format!("feature dims differ: train {d}, test {dt}")));
    }
    if train_y.len() != n || test_y.len() != nt {
        return Err(Error::Input("label count does not match feature rows".into()));
    }
    if n_classes < 2 || epochs == 0 || base_lr <= 0.0 {
        return Err(Error::Config(format!(
            "probe needs n_classes >= 2, epochs >= 1, base_lr > 0 (got {n_classes}, {epochs}, {base_lr})"
        )));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&l| l as usize >= n_classes) {
        return Err(Error::Input(format!("label {bad} outside 0..{n_classes}")));
    }

    let mut w = vec![0.0; d * n_classes];
    let mut b = vec![0.0; n_classes];
    let mut vw = vec![0.0; d * n_classes];
    let mut vb = vec![0.0; n_classes];
    let momentum = 0.9;
    let batch = FEATURE_CHUNK.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch) as f64;
    let shuffle_key = StreamKey::root(seed).tag("probe-shuffle");

    let mut step = 0usize;
    for epoch in 0..epochs {
        let order = shuffled_indices(n, &shuffle_key.index(epoch as u64));
        for chunk in order.chunks(batch) {
            let lr = 0.5 * base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            step += 1;
            let bs = chunk.len();
            let mut gw = vec![0.0; d * n_classes];
            let mut gb = vec![0.0; n_classes];
            for &i in chunk {
                let x = &train_x.data()[i * d..(i + 1) * d];
                let mut p = logits(x, &w, &b, d, n_classes);
                softmax_in_place(&mut p);
                p[train_y[i] as usize] -= 1.0;
                for (j, &xj) in x.iter().enumerate() {
                    for (c, &pc) in p.iter().enumerate() {
                        gw[j * n_classes + c] += xj * pc;
                    }
                }
                for (c, &pc) in p.iter().enumerate() {
                    gb[c] += pc;
                }
            }
            let inv = 1.0 / bs as f64;
            for (vi, gi) in vw.iter_mut().zip(&gw) {
                *vi = momentum * *vi + gi * inv;
            }
            for (vi, gi) in vb.iter_mut().zip(&gb) {
                *vi = momentum * *vi + gi * inv;
            }
            for (wi, vi) in w.iter_mut().zip(&vw) {
                *wi -= lr * *vi;
            }
            for (bi, vi) in b.iter_mut().zip(&vb) {
                *bi -= lr * *vi;
            }
        }
    }

    let mut correct = 0usize;
    for i in 0..nt {
        let x = &test_x.data()[i * d..(i + 1) * d];
        let z = logits(x, &w, &b, d, n_classes);
        if argmax(&z) == test_y[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / nt as f64)
}

/// Train a linear classifier on frozen backbone features and report test
/// accuracy. Encoder parameters are never touched.
#[allow(clippy::too_many_arguments)]
pub fn linear_eval(
    model: &ModelParams,
    train: &ImageDataset,
    test: &ImageDataset,
    epochs: usize,
    base_lr: f64,
    seed: u64,
    config_digest: &str,
) -> Result<EvalResult> {
    let train_y = labels_of(train, "train")?;
    let test_y = labels_of(test, "test")?;
    let n_classes = check_label_sets(&train_y, &test_y)?;
    let train_x = extract_backbone_features(model, train)?;
    let test_x = extract_backbone_features(model, test)?;
    let acc = train_linear_probe(&train_x, &train_y, &test_x, &test_y, n_classes, epochs, base_lr, seed)?;
    Ok(EvalResult {
        protocol: Protocol::Linear,
        top1_accuracy: acc,
        n_test: test.len(),
        config_digest: config_digest.to_string(),
    })
}

/// Weighted KNN on L2-normalized features: cosine similarity, softmax
/// temperature weights, top-1 accuracy.
pub fn knn_eval(
    model: &ModelParams,
    train: &ImageDataset,
    test: &ImageDataset,
    k: usize,
    temperature: f64,
    config_digest: &str,
) -> Result<EvalResult> {
    let train_y = labels_of(train, "train")?;
    let test_y = labels_of(test, "test")?;
    let n_classes = check_label_sets(&train_y, &test_y)?;
    let train_x = extract_backbone_features(model, train)?;
    let test_x = extract_backbone_features(model, test)?;
    let acc = knn_accuracy(&train_x, &train_y, &test_x, &test_y, n_classes, k, temperature)?;
    Ok(EvalResult {
        protocol: Protocol::Knn,
        top1_accuracy: acc,
        n_test: test.len(),
        config_digest: config_digest.to_string(),
    })
}

/// Monitoring default: k = min(200, N/10), at least 1.
pub fn default_knn_k(n_train: usize) -> usize {
    (n_train / 10).clamp(1, 200)
}

/// KNN classification accuracy on raw feature matrices.
pub fn knn_accuracy(
    train_x: &Tensor,
    train_y: &[u32],
    test_x: &Tensor,
    test_y: &[u32],
    n_classes: usize,
    k: usize,
    temperature: f64,
) -> Result<f64> {
    let (n, d) = dims2(train_x, "train features")?;
    let (nt, dt) = dims2(test_x, "test features")?;
    if d != dt {
        return Err(Error::Input(format!("feature dims differ: train {d}, test {dt}")));
    }
    if k < 1 || k > n {
        return Err(Error::Input(format!("k = {k} outside 1..={n} (train set size)")));
    }
    if temperature <= 0.0 {
        return Err(Error::Input(format!("temperature {temperature} must be positive")));
    }
    let tr = normalize_rows(train_x)?;
    let te = normalize_rows(test_x)?;

    let mut correct = 0usize;
    for i in 0..nt {
        let q = &te[i * d..(i + 1) * d];
        let mut sims: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let row = &tr[j * d..(j + 1) * d];
                (row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), j)
            })
            .collect();
        // descending similarity, ascending index on ties
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut scores = vec![0.0; n_classes];
        for &(sim, j) in sims.iter().take(k) {
            scores[train_y[j] as usize] += (sim / temperature).exp();
        }
        if argmax(&scores) == test_y[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / nt as f64)
}

/// Collapse diagnostic: root-mean-square per-coordinate standard deviation
/// (n-1 divisor) of L2-normalized rows. Near 1/sqrt(d) for a healthy
/// isotropic representation; 0 when all rows coincide. The RMS form makes
/// the value invariant under orthogonal rotation of the feature space.
pub fn collapse_metric(features: &Tensor) -> Result<f64> {
    let (n, d) = dims2(features, "features")?;
    if n < 2 {
        return Err(Error::Input(format!("collapse metric needs >= 2 rows, got {n}")));
    }
    let rows = normalize_rows(features)?;
    // columns are shifted by their first entry before the two-pass
    // variance so a column of identical values gives exactly zero
    let mut var_sum = 0.0;
    for j in 0..d {
        let shift = rows[j];
        let mut mean = 0.0;
        for i in 0..n {
            mean += rows[i * d + j] - shift;
        }
        mean /= n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let dv = (rows[i * d + j] - shift) - mean;
            acc += dv * dv;
        }
        var_sum += acc / (n as f64 - 1.0);
    }
    Ok((var_sum / d as f64).sqrt())
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Input(format!("{what} must be 2-D, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn normalize_rows(t: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = dims2(t, "features")?;
    let mut out = t.data().to_vec();
    for i in 0..n {
        let row = &mut out[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-150 {
            return Err(Error::Degenerate(format!("zero-norm feature row {i}")));
        }
        for v in row {
            *v /= norm;
        }
    }
    Ok(out)
}

fn logits(x: &[f64], w: &[f64], b: &[f64], d: usize, c: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for (j, &xj) in x.iter().enumerate().take(d) {
        let wrow = &w[j * c..(j + 1) * c];
        for (zc, &wc) in z.iter_mut().zip(wrow) {
            *zc += xj * wc;
        }
    }
    z
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}
