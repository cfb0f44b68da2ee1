//! Datasets: a procedural synthetic corpus for desk-scale runs and
//! ingestion of the standard CIFAR-10 binary layout.
//!
//! Synthetic images encode class identity in (shape, hue band) while
//! position, scale, rotation, background texture, and pixel noise vary
//! freely within a class. Everything is a pure function of the seed;
//! datasets are regenerated, never stored.

use crate::augment::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::tensor::Tensor;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug)]
pub struct ImageDataset {
    /// Packed [N, C, H, W].
    pub images: Tensor,
    pub labels: Option<Vec<u32>>,
    pub split: Split,
    pub provenance: String,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (channels, height, width)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.dims();
        let plane = c * h * w;
        Tensor::from_vec(&[c, h, w], self.images.data()[i * plane..(i + 1) * plane].to_vec())
            .expect("slice of a valid dataset")
    }

    /// Gather rows into a [B, C, H, W] batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let (c, h, w) = self.dims();
        let plane = c * h * w;
        let mut out = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("batch index {i} out of range (N={})", self.len())));
            }
            out.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        Tensor::from_vec(&[indices.len(), c, h, w], out)
    }

    pub fn class_count(&self) -> Option<u32> {
        self.labels.as_ref().map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// SHA-256 of the image's raw little-endian f64 bytes.
    pub fn content_digest(&self, i: usize) -> [u8; 32] {
        let (c, h, w) = self.dims();
        let plane = c * h * w;
        let mut hasher = Sha256::new();
        for v in &self.images.data()[i * plane..(i + 1) * plane] {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }

    fn validate_labels(&self) -> Result<()> {
        let Some(labels) = &self.labels else { return Ok(()) };
        if labels.len() != self.len() {
            return Err(Error::Integrity(format!(
                "{} labels for {} images",
                labels.len(),
                self.len()
            )));
        }
        let Some(&max) = labels.iter().max() else { return Ok(()) };
        let mut seen = vec![false; max as usize + 1];
        for &l in labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Integrity(format!(
                "class ids not contiguous: {missing} absent below max {max}"
            )));
        }
        Ok(())
    }
}

const SHAPES: usize = 5;

/// Procedural dataset: class = (shape, hue band), 80/20 split per class.
/// Identical seeds give bitwise-identical datasets.
pub fn synthetic_dataset(
    n_classes: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n_classes < 2 {
        return Err(Error::Input(format!("synthetic dataset needs >= 2 classes, got {n_classes}")));
    }
    if image_size < 16 {
        return Err(Error::Input(format!("synthetic image size {image_size} below minimum 16")));
    }
    if n_per_class < 5 {
        return Err(Error::Input(format!(
            "need >= 5 images per class for an 80/20 split, got {n_per_class}"
        )));
    }
    let hue_bands = n_classes.div_ceil(SHAPES);
    let key = StreamKey::root(seed).tag("synthetic");
    let plane = 3 * image_size * image_size;
    let train_per = n_per_class * 4 / 5;
    let test_per = n_per_class - train_per;

    let mut train_px = Vec::with_capacity(n_classes * train_per * plane);
    let mut test_px = Vec::with_capacity(n_classes * test_per * plane);
    let mut train_labels = Vec::with_capacity(n_classes * train_per);
    let mut test_labels = Vec::with_capacity(n_classes * test_per);

    for class in 0..n_classes {
        let shape = class % SHAPES;
        let band = class / SHAPES;
        let hue_center = (band as f64 + 0.5) / hue_bands as f64;
        let hue_width = 0.6 / hue_bands as f64;
        let class_key = key.index(class as u64);
        for idx in 0..n_per_class {
            let img = render(
                shape,
                hue_center,
                hue_width,
                image_size,
                &class_key.index(idx as u64),
            );
            if idx < train_per {
                train_px.extend_from_slice(&img);
                train_labels.push(class as u32);
            } else {
                test_px.extend_from_slice(&img);
                test_labels.push(class as u32);
            }
        }
    }

    let provenance = format!(
        "synthetic(n_classes={n_classes}, n_per_class={n_per_class}, size={image_size}, seed={seed}, range=[0,1])"
    );
    let train = ImageDataset {
        images: Tensor::from_vec(&[n_classes * train_per, 3, image_size, image_size], train_px)?,
        labels: Some(train_labels),
        split: Split::Train,
        provenance: provenance.clone(),
    };
    let test = ImageDataset {
        images: Tensor::from_vec(&[n_classes * test_per, 3, image_size, image_size], test_px)?,
        labels: Some(test_labels),
        split: Split::Test,
        provenance,
    };
    train.validate_labels()?;
    test.validate_labels()?;
    Ok((train, test))
}

fn render(shape: usize, hue_center: f64, hue_width: f64, size: usize, stream: &StreamKey) -> Vec<f64> {
    let mut rng = stream.rng();
    let mut u = || rng.random::<f64>();

    // nuisance factors
    let cx = 0.5 + (u() - 0.5) * 0.34;
    let cy = 0.5 + (u() - 0.5) * 0.34;
    let radius = 0.16 + u() * 0.14;
    let angle = (u() - 0.5) * std::f64::consts::FRAC_PI_4;
    let hue = (hue_center + (u() - 0.5) * hue_width).rem_euclid(1.0);
    let sat = 0.7 + u() * 0.25;
    let val = 0.65 + u() * 0.3;
    let (fg_r, fg_g, fg_b) = hsv_to_rgb(hue, sat, val);

    // background: dim gradient plus an oriented sinusoid, desaturated so
    // hue stays informative about the class
    let bg_level = 0.25 + u() * 0.3;
    let bg_tilt = (u() - 0.5) * 0.3;
    let tex_theta = u() * std::f64::consts::PI;
    let tex_freq = 2.0 + u() * 6.0;
    let tex_phase = u() * std::f64::consts::TAU;
    let tex_amp = 0.05 + u() * 0.10;
    let noise_sigma = 0.02;

    let (sin_a, cos_a) = angle.sin_cos();
    let (sin_t, cos_t) = tex_theta.sin_cos();
    let n = size as f64;
    let mut out = vec![0.0; 3 * size * size];
    let mut noise_rng = stream.tag("noise").rng();
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / n;
            let py = (y as f64 + 0.5) / n;
            // rotate into the shape frame
            let dx0 = px - cx;
            let dy0 = py - cy;
            let dx = cos_a * dx0 + sin_a * dy0;
            let dy = -sin_a * dx0 + cos_a * dy0;
            let sd = signed_distance(shape, dx, dy, radius);
            let alpha = (0.5 - sd * n / 1.5).clamp(0.0, 1.0);

            let tex = (tex_freq * (px * cos_t + py * sin_t) * std::f64::consts::TAU + tex_phase).sin();
            let base = bg_level + bg_tilt * (px + py - 1.0) + tex_amp * tex;
            for (ci, fg) in [fg_r, fg_g, fg_b].into_iter().enumerate() {
                let bg = base * (1.0 + 0.06 * ci as f64);
                let noise = noise_sigma * crate::rng::standard_normal(&mut noise_rng);
                let v = bg * (1.0 - alpha) + fg * alpha + noise;
                out[ci * size * size + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Signed distance to the class shape, negative inside.
fn signed_distance(shape: usize, dx: f64, dy: f64, r: f64) -> f64 {
    match shape {
        // circle
        0 => (dx * dx + dy * dy).sqrt() - r,
        // square
        1 => dx.abs().max(dy.abs()) - r,
        // equilateral triangle
        2 => {
            let k = 3.0f64.sqrt();
            let mut x = dx.abs() - r;
            let mut y = dy + r / k;
            if x + k * y > 0.0 {
                let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
                x = nx;
                y = ny;
            }
            x -= x.clamp(-2.0 * r, 0.0);
            -(x * x + y * y).sqrt() * y.signum()
        }
        // plus sign
        3 => {
            let w = r / 3.0;
            let bar_h = (dx.abs() - r).max(dy.abs() - w);
            let bar_v = (dx.abs() - w).max(dy.abs() - r);
            bar_h.min(bar_v)
        }
        // ring
        4 => ((dx * dx + dy * dy).sqrt() - r).abs() - r * 0.33,
        _ => unreachable!("shape index {shape}"),
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Load a named dataset from its standard published binary layout.
/// Currently `cifar10` (the `cifar-10-batches-bin` directory).
pub fn load_image_dataset(root: &Path, name: &str) -> Result<(ImageDataset, ImageDataset)> {
    match name {
        "cifar10" => load_cifar10(root),
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

fn load_cifar10(root: &Path) -> Result<(ImageDataset, ImageDataset)> {
    let dir = root.join("cifar-10-batches-bin");
    let train_files: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test_files = [dir.join("test_batch.bin")];

    let mut stats = ChannelStats::default();
    let (train_px, train_labels) = read_cifar_files(&train_files, &mut stats)?;
    let (test_px, test_labels) = read_cifar_files(&test_files, &mut ChannelStats::default())?;

    let n_train = train_labels.len();
    let n_test = test_labels.len();
    let provenance = format!(
        "cifar10(root={}, range=[0,1], train_mean={:?}, train_std={:?})",
        dir.display(),
        stats.mean(),
        stats.std(),
    );
    let train = ImageDataset {
        images: Tensor::from_vec(&[n_train, 3, CIFAR_SIDE, CIFAR_SIDE], train_px)?,
        labels: Some(train_labels),
        split: Split::Train,
        provenance: provenance.clone(),
    };
    let test = ImageDataset {
        images: Tensor::from_vec(&[n_test, 3, CIFAR_SIDE, CIFAR_SIDE], test_px)?,
        labels: Some(test_labels),
        split: Split::Test,
        provenance,
    };
    train.validate_labels()?;
    test.validate_labels()?;
    Ok((train, test))
}

#[derive(Default)]
struct ChannelStats {
    sum: [f64; 3],
    sumsq: [f64; 3],
    count: u64,
}

impl ChannelStats {
    fn push(&mut self, channel: usize, v: f64) {
        self.sum[channel] += v;
        self.sumsq[channel] += v * v;
        self.count += 1;
    }

    fn mean(&self) -> [f64; 3] {
        let n = (self.count / 3).max(1) as f64;
        [self.sum[0] / n, self.sum[1] / n, self.sum[2] / n]
    }

    fn std(&self) -> [f64; 3] {
        let n = (self.count / 3).max(1) as f64;
        let m = self.mean();
        [
            (self.sumsq[0] / n - m[0] * m[0]).max(0.0).sqrt(),
            (self.sumsq[1] / n - m[1] * m[1]).max(0.0).sqrt(),
            (self.sumsq[2] / n - m[2] * m[2]).max(0.0).sqrt(),
        ]
    }
}

fn read_cifar_files(files: &[std::path::PathBuf], stats: &mut ChannelStats) -> Result<(Vec<f64>, Vec<u32>)> {
    let plane = 3 * CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Ingestion(format!("cannot read {}: {e}", path.display()))
        })?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Integrity(format!(
                "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Integrity(format!(
                    "{}: label byte {label} outside 0..=9",
                    path.display()
                )));
            }
            labels.push(label as u32);
            for (i, &b) in rec[1..].iter().enumerate() {
                let v = b as f64 / 255.0;
                stats.push(i / (CIFAR_SIDE * CIFAR_SIDE), v);
                pixels.push(v);
            }
        }
        debug_assert_eq!(pixels.len(), labels.len() * plane);
    }
    Ok((pixels, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn synthetic_bookkeeping() {
        let (train, test) = synthetic_dataset(10, 50, 16, 0).unwrap();
        assert_eq!(train.len(), 400);
        assert_eq!(test.len(), 100);
        assert_eq!(train.images.shape(), &[400, 3, 16, 16]);
        assert_eq!(train.class_count(), Some(10));
        assert_eq!(test.class_count(), Some(10));
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);

        // exact class balance in both splits
        for ds in [&train, &test] {
            let labels = ds.labels.as_ref().unwrap();
            let mut counts = vec![0usize; 10];
            for &l in labels {
                counts[l as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c == counts[0]), "unbalanced: {counts:?}");
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let (a_train, a_test) = synthetic_dataset(4, 10, 16, 3).unwrap();
        let (b_train, b_test) = synthetic_dataset(4, 10, 16, 3).unwrap();
        assert_eq!(a_train.labels, b_train.labels);
        for (x, y) in a_train.images.data().iter().zip(b_train.images.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a_test.images.data().iter().zip(b_test.images.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let (c_train, _) = synthetic_dataset(4, 10, 16, 4).unwrap();
        assert!(a_train.images.data().iter().zip(c_train.images.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn synthetic_pixels_in_range() {
        let (train, _) = synthetic_dataset(10, 6, 16, 1).unwrap();
        for &v in train.images.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn splits_are_disjoint_by_content_hash() {
        let (train, test) = synthetic_dataset(6, 20, 16, 5).unwrap();
        let train_hashes: HashSet<[u8; 32]> =
            (0..train.len()).map(|i| train.content_digest(i)).collect();
        assert_eq!(train_hashes.len(), train.len(), "duplicate train images");
        for i in 0..test.len() {
            assert!(!train_hashes.contains(&test.content_digest(i)), "test image {i} in train");
        }
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(matches!(synthetic_dataset(1, 10, 16, 0), Err(Error::Input(_))));
        assert!(matches!(synthetic_dataset(10, 10, 8, 0), Err(Error::Input(_))));
        assert!(matches!(synthetic_dataset(10, 2, 16, 0), Err(Error::Input(_))));
    }

    fn write_fake_cifar(dir: &Path, records_per_file: usize) {
        let d = dir.join("cifar-10-batches-bin");
        std::fs::create_dir_all(&d).unwrap();
        let mut names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
        names.push("test_batch.bin".into());
        for (fi, name) in names.iter().enumerate() {
            let mut bytes = Vec::with_capacity(records_per_file * CIFAR_RECORD);
            for r in 0..records_per_file {
                bytes.push((r % 10) as u8);
                for i in 0..3072usize {
                    bytes.push(((i * 7 + r * 13 + fi) % 256) as u8);
                }
            }
            std::fs::write(d.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn cifar_layout_parses_and_reloads_identically() {
        let tmp = tempfile::tempdir().unwrap();
        write_fake_cifar(tmp.path(), 4);
        let (train, test) = load_image_dataset(tmp.path(), "cifar10").unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 4);
        assert_eq!(train.images.shape(), &[20, 3, 32, 32]);
        assert!(train.provenance.contains("train_mean"));
        for &v in train.images.data() {
            assert!((0.0..=1.0).contains(&v));
        }
        let (train2, _) = load_image_dataset(tmp.path(), "cifar10").unwrap();
        for (x, y) in train.images.data().iter().zip(train2.images.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn cifar_missing_and_corrupt_files() {
        let tmp = tempfile::tempdir().unwrap();
        match load_image_dataset(tmp.path(), "cifar10") {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("data_batch_1.bin"), "{msg}"),
            other => panic!("expected ingestion error, got {other:?}"),
        }

        write_fake_cifar(tmp.path(), 2);
        let truncated = tmp.path().join("cifar-10-batches-bin/data_batch_3.bin");
        let mut bytes = std::fs::read(&truncated).unwrap();
        bytes.truncate(CIFAR_RECORD + 17);
        std::fs::write(&truncated, bytes).unwrap();
        match load_image_dataset(tmp.path(), "cifar10") {
            Err(Error::Integrity(msg)) => assert!(msg.contains("data_batch_3.bin"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }

        write_fake_cifar(tmp.path(), 2);
        let bad_label = tmp.path().join("cifar-10-batches-bin/test_batch.bin");
        let mut bytes = std::fs::read(&bad_label).unwrap();
        bytes[0] = 11;
        std::fs::write(&bad_label, bytes).unwrap();
        match load_image_dataset(tmp.path(), "cifar10") {
            Err(Error::Integrity(msg)) => assert!(msg.contains("label"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }

        assert!(matches!(load_image_dataset(tmp.path(), "svhn"), Err(Error::Config(_))));
    }

    #[test]
    fn batch_gathers_rows() {
        let (train, _) = synthetic_dataset(3, 10, 16, 7).unwrap();
        let b = train.batch(&[3, 0, 5]).unwrap();
        assert_eq!(b.shape(), &[3, 3, 16, 16]);
        let plane = 3 * 16 * 16;
        for (x, y) in b.data()[..plane].iter().zip(train.image(3).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(matches!(train.batch(&[999]), Err(Error::Input(_))));
    }
}
