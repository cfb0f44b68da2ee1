//! Experiment driver. Every subcommand parses one TOML config, applies the
//! command-line overrides, and reads or writes artifacts under a run
//! directory keyed by the config digest, so distinct experiments never
//! collide and reruns of the same config land in the same place.

mod plot;

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plot::{line_plot, Series};
use siamlab::augment::preset;
use siamlab::checkpoint::load_checkpoint;
use siamlab::config::{parse_config, ExperimentConfig};
use siamlab::error::{Error, Result};
use siamlab::eval::{default_knn_k, knn_eval, linear_eval, EvalResult};
use siamlab::losses::Method;
use siamlab::model::build_model;
use siamlab::rng::StreamKey;
use siamlab::trainer::pretrain;
use siamlab::variance_probe::compare_methods;

#[derive(Parser)]
#[command(name = "siamlab", version, about = "Desk-scale siamese pretraining lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain an encoder; writes metrics and checkpoints to the run dir.
    Pretrain(RunArgs),
    /// Linear-probe a checkpoint and append the result to results.jsonl.
    LinearEval(EvalArgs),
    /// KNN-classify from a checkpoint and append the result to results.jsonl.
    KnnEval(EvalArgs),
    /// Compare per-parameter gradient covariance traces across methods.
    VarianceProbe(ProbeArgs),
    /// Plot one metric across runs, one curve per run directory.
    Plot(PlotArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    /// Views per image (--K also accepted).
    #[arg(long, alias = "K")]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Defaults to <run dir>/ckpt-final.bin.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated pair to compare; the probe is a paired test.
    #[arg(long, default_value = "simsiam_kaug,ensiam")]
    methods: String,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
}

#[derive(Args)]
struct PlotArgs {
    /// linear_accuracy / knn_accuracy (results.jsonl), loss_total / lr /
    /// feature_std (per step), or loss_mean (per epoch).
    #[arg(long)]
    metric: String,
    /// Run directories to draw, one curve each.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Defaults to plot-<metric>.svg in the working directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::LinearEval(a) => cmd_eval(a, EvalKind::Linear),
        Cmd::KnnEval(a) => cmd_eval(a, EvalKind::Knn),
        Cmd::VarianceProbe(a) => cmd_probe(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(ref m) = ov.method {
        cfg.method = Method::parse(m)?;
    }
    if let Some(k) = ov.k {
        cfg.k = k;
    }
    if let Some(b) = ov.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = ov.epochs {
        cfg.epochs = e;
    }
    if let Some(ref d) = ov.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.digest()[..12])
}

/// Exclusive marker for a run directory. Concurrent runs with different
/// digests land in different directories; this guards the same-digest case.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Io(std::io::Error::new(
                ErrorKind::AlreadyExists,
                format!(
                    "run directory {} is in use; remove {} if no run is active",
                    dir.display(),
                    path.display()
                ),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Snapshot the fully materialized config next to the artifacts it produced.
fn write_config_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

fn cmd_pretrain(a: RunArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let digest = cfg.digest();
    let dir = run_dir(&cfg);
    let _lock = DirLock::acquire(&dir)?;
    write_config_snapshot(&cfg, &dir)?;
    let (train, _) = cfg.load_data()?;
    println!("run {} -> {}", &digest[..12], dir.display());
    let out = pretrain(&cfg.train_config(), &cfg.encoder, &cfg.predictor, &train, &dir, &digest)?;
    println!(
        "done: {} steps, last loss {:.6}, feature_std {:.6}",
        out.state.global_step, out.last.loss_total, out.last.feature_std
    );
    println!("checkpoint {}", out.handle.path.display());
    Ok(())
}

enum EvalKind {
    Linear,
    Knn,
}

fn cmd_eval(a: EvalArgs, kind: EvalKind) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let digest = cfg.digest();
    let dir = run_dir(&cfg);
    let _lock = DirLock::acquire(&dir)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| dir.join("ckpt-final.bin"));
    let (state, _) = load_checkpoint(&ckpt, Some(&digest))?;
    let (train, test) = cfg.load_data()?;
    let res = match kind {
        EvalKind::Linear => linear_eval(
            &state.params,
            &train,
            &test,
            cfg.eval.probe_epochs,
            cfg.eval.probe_lr,
            cfg.seed,
            &digest,
        )?,
        EvalKind::Knn => {
            let k = cfg.eval.knn_k.unwrap_or_else(|| default_knn_k(train.len()));
            knn_eval(&state.params, &train, &test, k, cfg.eval.knn_temperature, &digest)?
        }
    };
    let out = append_result(&dir, &res)?;
    println!(
        "{:?} top1 {:.4} on {} test images",
        res.protocol, res.top1_accuracy, res.n_test
    );
    println!("results -> {}", out.display());
    Ok(())
}

fn append_result(dir: &Path, res: &EvalResult) -> Result<PathBuf> {
    let path = dir.join("results.jsonl");
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    let line = serde_json::to_string(res)
        .map_err(|e| Error::Integrity(format!("serialize eval result: {e}")))?;
    writeln!(f, "{line}")?;
    Ok(path)
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let mut methods: Vec<Method> = Vec::new();
    for part in a.methods.split(',') {
        methods.push(Method::parse(part.trim())?);
    }
    methods.sort_by_key(|m| m.name());
    if methods != [Method::Ensiam, Method::SimsiamKaug] {
        return Err(Error::Input(format!(
            "the probe is a paired comparison of simsiam_kaug and ensiam; got --methods {}",
            a.methods
        )));
    }

    let digest = cfg.digest();
    let dir = run_dir(&cfg);
    let _lock = DirLock::acquire(&dir)?;
    write_config_snapshot(&cfg, &dir)?;

    let model = build_model(&cfg.encoder, &cfg.predictor, cfg.seed)?;
    let (train, _) = cfg.load_data()?;
    if train.len() < a.images {
        return Err(Error::Input(format!(
            "probe wants {} images but the training set has {}",
            a.images,
            train.len()
        )));
    }
    // Stride across the set so the sample spans classes (the generator
    // orders images class-major).
    let images: Vec<_> =
        (0..a.images).map(|i| train.image(i * (train.len() / a.images))).collect();

    let aug = preset(&cfg.augmentation)?;
    let stream = StreamKey::root(cfg.seed).tag("variance-probe");
    let report = compare_methods(&model, &images, cfg.k, a.draws, &aug, &stream, a.ci_level)?;

    let report_path = dir.join("variance_report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Integrity(format!("serialize report: {e}")))?;
    fs::write(&report_path, json)?;

    let series = vec![
        Series {
            label: "simsiam_kaug".into(),
            points: report
                .per_image
                .iter()
                .enumerate()
                .map(|(i, t)| (i as f64, t.kaug_trace))
                .collect(),
        },
        Series {
            label: "ensiam".into(),
            points: report
                .per_image
                .iter()
                .enumerate()
                .map(|(i, t)| (i as f64, t.ensiam_trace))
                .collect(),
        },
    ];
    let svg_path = dir.join("variance_traces.svg");
    fs::write(
        &svg_path,
        line_plot(
            &format!("gradient covariance trace, K={}, {} draws", cfg.k, a.draws),
            "image",
            "tr cov",
            &series,
        ),
    )?;

    for (m, t) in &report.method_traces {
        println!("{} mean trace {:.6e}", m.name(), t);
    }
    println!(
        "margin {:.6e} (one-sided {:.0}% lower bounds per image), {} degenerate draws skipped",
        report.inequality_margin,
        report.ci_level * 100.0,
        report.skipped
    );
    println!("report {} / plot {}", report_path.display(), svg_path.display());
    println!("run {} -> {}", &digest[..12], dir.display());
    Ok(())
}

fn jsonl_values(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            Error::Integrity(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Pull one metric out of a run directory as (x, y) points.
fn metric_series(dir: &Path, metric: &str) -> Result<Vec<(f64, f64)>> {
    // Step records and epoch summaries share metrics.jsonl; records missing
    // the requested key are skipped, which is what separates the two.
    let (file, proto) = match metric {
        "linear_accuracy" => ("results.jsonl", Some("linear")),
        "knn_accuracy" => ("results.jsonl", Some("knn")),
        "loss_total" | "lr" | "feature_std" | "loss_mean" => ("metrics.jsonl", None),
        other => {
            return Err(Error::Input(format!(
                "unknown metric '{other}'; see `siamlab plot --help` for the list"
            )))
        }
    };
    let records = jsonl_values(&dir.join(file))?;
    let mut points = Vec::new();
    for rec in &records {
        if let Some(p) = proto {
            if rec.get("protocol").and_then(|v| v.as_str()) != Some(p) {
                continue;
            }
            let y = rec.get("top1_accuracy").and_then(|v| v.as_f64());
            if let Some(y) = y {
                points.push((points.len() as f64, y));
            }
            continue;
        }
        let x_key = if metric == "loss_mean" { "epoch" } else { "step" };
        if let (Some(x), Some(y)) = (
            rec.get(x_key).and_then(|v| v.as_f64()),
            rec.get(metric).and_then(|v| v.as_f64()),
        ) {
            points.push((x, y));
        }
    }
    if points.is_empty() {
        return Err(Error::Input(format!(
            "{} has no '{metric}' records",
            dir.join(file).display()
        )));
    }
    Ok(points)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let mut series = Vec::new();
    for dir in &a.runs {
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        series.push(Series { label, points: metric_series(dir, &a.metric)? });
    }
    let x_label = match a.metric.as_str() {
        "linear_accuracy" | "knn_accuracy" => "eval #",
        "loss_mean" => "epoch",
        _ => "step",
    };
    let out = a.output.unwrap_or_else(|| PathBuf::from(format!("plot-{}.svg", a.metric)));
    fs::write(&out, line_plot(&a.metric, x_label, &a.metric, &series))?;
    println!("plot -> {}", out.display());
    Ok(())
}
