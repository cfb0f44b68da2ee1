//! Experiment configuration: one TOML file fully determines a run.
//!
//! Parsing materializes every default, so the in-memory record has no
//! implicit state. The digest is computed over the materialized record
//! (canonical JSON, sorted keys), which makes it independent of key order
//! in the source file. `output_dir` is excluded from the digest: it says
//! where artifacts go, not what the experiment is.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_image_dataset, synthetic_dataset, ImageDataset};
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::model::{EncoderSpec, PredictorSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSelector {
    /// Procedural shapes-and-hues dataset, regenerated from the run seed.
    Synthetic,
    /// CIFAR-10 binary batches under `dataset_root`.
    Cifar10,
}

/// Evaluation settings shared by the linear-probe and KNN protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Neighbor count; `None` scales with the training-set size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knn_k: Option<usize>,
    pub knn_temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { probe_epochs: 30, probe_lr: 0.3, knn_k: None, knn_temperature: 0.1 }
    }
}

/// Unified run record: optimizer recipe, model, dataset, eval settings,
/// output location. A parsed config always validates before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Augmentation preset name.
    pub augmentation: String,
    pub seed: u64,

    pub dataset: DatasetSelector,
    /// Required for on-disk datasets, ignored for synthetic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_root: Option<PathBuf>,
    /// Synthetic generator knobs.
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,

    pub encoder: EncoderSpec,
    pub predictor: PredictorSpec,
    pub eval: EvalConfig,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            method: t.method,
            k: t.k,
            batch_size: t.batch_size,
            epochs: t.epochs,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
            augmentation: t.augmentation,
            seed: t.seed,
            dataset: DatasetSelector::Synthetic,
            dataset_root: None,
            classes: 10,
            per_class: 500,
            image_size: 16,
            encoder: EncoderSpec::default(),
            predictor: PredictorSpec::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// The optimizer-facing slice of this record.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            k: self.k,
            batch_size: self.batch_size,
            epochs: self.epochs,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            augmentation: self.augmentation.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.encoder.validate()?;
        if self.predictor.in_out_dim != self.encoder.projector_out_dim {
            return Err(Error::Config(format!(
                "predictor.in_out_dim {} must equal encoder.projector_out_dim {}",
                self.predictor.in_out_dim, self.encoder.projector_out_dim
            )));
        }
        if self.predictor.hidden_dim == 0 {
            return Err(Error::Config("predictor.hidden_dim must be >= 1".into()));
        }
        if self.encoder.in_channels != 3 {
            return Err(Error::Config(format!(
                "encoder.in_channels must be 3 for image datasets, got {}",
                self.encoder.in_channels
            )));
        }
        match self.dataset {
            DatasetSelector::Synthetic => {
                if self.encoder.image_size != self.image_size {
                    return Err(Error::Config(format!(
                        "encoder.image_size {} does not match image_size {}",
                        self.encoder.image_size, self.image_size
                    )));
                }
                // Generator minimums are re-checked at build time; failing
                // here keeps the key path in the message.
                if self.classes < 2 {
                    return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
                }
                if self.per_class < 5 {
                    return Err(Error::Config(format!(
                        "per_class must be >= 5, got {}",
                        self.per_class
                    )));
                }
                if self.image_size < 16 {
                    return Err(Error::Config(format!(
                        "image_size must be >= 16, got {}",
                        self.image_size
                    )));
                }
            }
            DatasetSelector::Cifar10 => {
                if self.dataset_root.is_none() {
                    return Err(Error::Config(
                        "dataset_root is required when dataset = \"cifar10\"".into(),
                    ));
                }
                if self.encoder.image_size != 32 {
                    return Err(Error::Config(format!(
                        "encoder.image_size must be 32 for cifar10, got {}",
                        self.encoder.image_size
                    )));
                }
            }
        }
        if self.eval.probe_epochs == 0 {
            return Err(Error::Config("eval.probe_epochs must be >= 1".into()));
        }
        if !(self.eval.probe_lr.is_finite() && self.eval.probe_lr > 0.0) {
            return Err(Error::Config(format!(
                "eval.probe_lr must be positive, got {}",
                self.eval.probe_lr
            )));
        }
        if self.eval.knn_k == Some(0) {
            return Err(Error::Config("eval.knn_k must be >= 1".into()));
        }
        if !(self.eval.knn_temperature.is_finite() && self.eval.knn_temperature > 0.0) {
            return Err(Error::Config(format!(
                "eval.knn_temperature must be positive, got {}",
                self.eval.knn_temperature
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Content hash of the materialized record, minus `output_dir`.
    /// Canonical JSON (sorted keys) makes it independent of source key order.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config serializes to an object")
            .remove("output_dir");
        let mut h = Sha256::new();
        h.update(value.to_string().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in h.finalize() {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// Materialized TOML, suitable for archiving next to run artifacts.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn load_data(&self) -> Result<(ImageDataset, ImageDataset)> {
        match self.dataset {
            DatasetSelector::Synthetic => {
                synthetic_dataset(self.classes, self.per_class, self.image_size, self.seed)
            }
            DatasetSelector::Cifar10 => {
                let root = self.dataset_root.as_deref().ok_or_else(|| {
                    Error::Config("dataset_root is required when dataset = \"cifar10\"".into())
                })?;
                load_image_dataset(root, "cifar10")
            }
        }
    }
}

/// Parse and validate a config from TOML text. Unknown keys and type
/// mismatches surface the offending key path in the error.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
        .map_err(|e| e.context(&format!("config {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_materializes_defaults() {
        let cfg = parse_config_str("method = \"ensiam\"\ndataset = \"synthetic\"\n").unwrap();
        assert_eq!(cfg.method, Method::Ensiam);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.augmentation, "default");
        assert_eq!(cfg.encoder, EncoderSpec::default());
        assert_eq!(cfg.predictor, PredictorSpec::default());
        assert_eq!(cfg.eval, EvalConfig::default());
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn kaug_odd_k_rejected() {
        let err = parse_config_str("method = \"simsiam_kaug\"\nk = 3\ndataset = \"synthetic\"\n")
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
        assert!(err.to_string().contains("even"), "{err}");
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = parse_config_str("augmentaton = \"default\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("augmentaton"), "{err}");

        let err = parse_config_str("[encoder]\nbase_chanels = 4\n").unwrap_err();
        assert!(err.to_string().contains("base_chanels"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = parse_config_str("epochs = \"fifty\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn unknown_method_lists_variants() {
        let err = parse_config_str("method = \"simclr\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ensiam"), "{msg}");
    }

    #[test]
    fn digest_stable_under_key_reordering() {
        let a = parse_config_str("method = \"ensiam\"\nseed = 7\nbatch_size = 32\nepochs = 20\nwarmup_epochs = 2\n").unwrap();
        let b = parse_config_str("batch_size = 32\nwarmup_epochs = 2\nepochs = 20\nseed = 7\nmethod = \"ensiam\"\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);

        let c = parse_config_str("method = \"ensiam\"\nseed = 8\nbatch_size = 32\nepochs = 20\nwarmup_epochs = 2\n").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn digest_ignores_output_location() {
        let a = parse_config_str("output_dir = \"runs-a\"\n").unwrap();
        let b = parse_config_str("output_dir = \"runs-b\"\n").unwrap();
        assert_ne!(a.output_dir, b.output_dir);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn toml_round_trip_preserves_record_and_digest() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.knn_k = Some(17);
        cfg.seed = 123;
        let text = cfg.to_toml_string().unwrap();
        let back = parse_config_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn cifar_needs_root_and_matching_encoder() {
        let err = parse_config_str("dataset = \"cifar10\"\n").unwrap_err();
        assert!(err.to_string().contains("dataset_root"), "{err}");

        let err = parse_config_str("dataset = \"cifar10\"\ndataset_root = \"/data\"\n").unwrap_err();
        assert!(err.to_string().contains("image_size"), "{err}");

        parse_config_str(
            "dataset = \"cifar10\"\ndataset_root = \"/data\"\n[encoder]\nimage_size = 32\n",
        )
        .unwrap();
    }

    #[test]
    fn encoder_dataset_size_mismatch_rejected() {
        let err = parse_config_str("image_size = 20\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("image_size") && msg.contains("20"), "{msg}");
    }

    #[test]
    fn missing_file_is_io() {
        let err = parse_config(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{err}");
    }
}
