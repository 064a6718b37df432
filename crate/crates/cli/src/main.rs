//! `convbench`: validate workspace sequences, train and evaluate models,
//! export activation maps, generate synthetic data and run the service.
//!
//! stdout carries exactly one JSON document per invocation; progress goes to
//! stderr. Exit codes: 0 success, 2 validation failure, 3 data error,
//! 4 training failure.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use convbench::activations::{export, extract};
use convbench::checkpoint;
use convbench::config::{Mode, RunConfig};
use convbench::dataset::{self, generate_synthetic, load_directory, write_directory, Dataset};
use convbench::evaluation::{evaluate_production, EvalError};
use convbench::modelspec::{canonicalize_with, infer_shapes, parse_sequence_text, SpecError, WorkspaceSequence};
use convbench::rng;
use convbench::training::{train_fast, Progress, TrainError};
use convbench_service::AppState;
use serde_json::{json, Value};

const DEFAULT_CONFIG: &str = "app.config";

#[derive(Parser)]
#[command(name = "convbench", version, about = "ConvNet workbench driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a sequence such as "conv,pool,dense" against the workspace rules.
    Validate {
        sequence: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a sequence in fast mode or evaluate it in production mode.
    Train {
        sequence: String,
        #[arg(long, default_value = "fast")]
        mode: Mode,
        /// A class-per-directory PNG tree, or `synth` for generated data.
        #[arg(long)]
        data: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the trained model here (fast mode only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seed of the generated data when `--data synth`.
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
    },
    /// Export the feature maps of one image through a trained checkpoint.
    Activations {
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Last spatial layer to export.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic class-per-directory PNG dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the JSON-over-HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Dataset directory; generated data is used when omitted.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sessions are restored from and saved to this file.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
}

/// A failure reported as `{"error": kind, "message": ...}` with an exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    extra: Option<(&'static str, Value)>,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self::new(2, "validation", message)
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new(3, "data", message)
    }

    fn training(message: impl Into<String>) -> Self {
        Self::new(4, "training", message)
    }

    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
            extra: None,
        }
    }
}

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        let mut f = Failure::validation(e.to_string());
        if let SpecError::Invalid(v) = &e {
            f.extra = Some(("violations", json!(v)));
        }
        f
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(_) => Failure::data(e.to_string()),
            other => Failure::training(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Data(_) | EvalError::ClassTooSmall { .. } | EvalError::MissingClasses(_) => {
                Failure::data(e.to_string())
            }
            other => Failure::training(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(doc) => {
            println!("{doc}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let mut body = json!({ "error": f.kind, "message": f.message });
            if let Some((k, v)) = f.extra {
                body[k] = v;
            }
            println!("{body}");
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<String, Failure> {
    match command {
        Command::Validate { sequence, config } => validate(&sequence, config.as_deref()),
        Command::Train {
            sequence,
            mode,
            data,
            seed,
            config,
            checkpoint,
            synth_seed,
        } => train(&sequence, mode, &data, seed, config.as_deref(), checkpoint.as_deref(), synth_seed),
        Command::Activations {
            checkpoint,
            image,
            layer,
            out,
        } => activations(&checkpoint, &image, layer.as_deref(), &out),
        Command::Synth {
            classes,
            per_class,
            out,
            height,
            width,
            seed,
        } => synth(classes, per_class, height, width, seed, &out),
        Command::Serve {
            port,
            host,
            data_dir,
            config,
            snapshot,
        } => serve(&host, port, data_dir.as_deref(), config.as_deref(), snapshot),
    }
}

/// `--config`, else `./app.config` if present, else defaults.
fn load_config(flag: Option<&Path>) -> Result<RunConfig, Failure> {
    let path = match flag {
        Some(p) => Some(p.to_path_buf()),
        None => Some(PathBuf::from(DEFAULT_CONFIG)).filter(|p| p.is_file()),
    };
    match path {
        Some(p) => {
            log::info!("config: {}", p.display());
            RunConfig::load(&p).map_err(|e| Failure::validation(format!("config: {e}")))
        }
        None => Ok(RunConfig::default()),
    }
}

fn parse_sequence(text: &str) -> Result<WorkspaceSequence, Failure> {
    Ok(WorkspaceSequence::try_from(parse_sequence_text(text)?)?)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("reports serialize")
}

fn validate(text: &str, config: Option<&Path>) -> Result<String, Failure> {
    let cfg = load_config(config)?;
    let seq = parse_sequence(text)?;
    let model = canonicalize_with(&seq, cfg.dataset.num_classes, cfg.hyper());
    let trace = infer_shapes(&model, cfg.input_shape());
    Ok(to_json(&json!({
        "valid": true,
        "sequence": seq,
        "canonical": model.describe(),
        "trace": trace,
    })))
}

fn dataset_for(cfg: &RunConfig, data: &str, per_class: usize, synth_seed: u64) -> Result<Dataset, Failure> {
    let ds = if data == "synth" {
        let d = &cfg.dataset;
        log::info!(
            "generating {} synthetic images per class at {}x{}",
            per_class,
            d.image_height,
            d.image_width
        );
        generate_synthetic(d.num_classes, per_class, d.image_height, d.image_width, synth_seed)
            .and_then(|ds| ds.with_class_names(d.class_names.clone()))
    } else {
        load_directory(Path::new(data), cfg)
    };
    ds.map_err(|e| Failure::data(e.to_string()))
}

fn synth_per_class(cfg: &RunConfig, mode: Mode) -> usize {
    let d = &cfg.dataset;
    let total = match mode {
        Mode::Fast => d.fast_subset,
        Mode::Production => d.production_train + d.production_eval,
    };
    total.div_ceil(d.num_classes)
}

fn log_progress(p: Progress) {
    match p {
        Progress::Epoch { context, record } => {
            let prefix = match (context.repeat, context.fold) {
                (Some(r), Some(f)) => format!("repeat {r} fold {f} "),
                _ => String::new(),
            };
            log::info!(
                "{prefix}epoch {}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
                record.epoch,
                record.train_loss,
                record.val_loss,
                record.val_acc
            );
        }
        Progress::Evaluating => log::info!("evaluating"),
    }
}

fn train(
    text: &str,
    mode: Mode,
    data: &str,
    seed: Option<u64>,
    config: Option<&Path>,
    checkpoint_path: Option<&Path>,
    synth_seed: u64,
) -> Result<String, Failure> {
    let mut cfg = load_config(config)?;
    cfg.training.mode = mode;
    let seq = parse_sequence(text)?;
    if checkpoint_path.is_some() && mode == Mode::Production {
        return Err(Failure::validation("--checkpoint is only available in fast mode"));
    }
    let seed = seed.or(cfg.training.seed).unwrap_or_else(rng::fresh_seed);
    let ds = dataset_for(&cfg, data, synth_per_class(&cfg, mode), synth_seed)?;
    let model = canonicalize_with(&seq, ds.num_classes(), cfg.hyper());
    log::info!("model {} seed {seed}", model.describe());
    match mode {
        Mode::Fast => {
            let out = train_fast(&model, &ds, &cfg, seed, &log_progress)?;
            log::info!("test accuracy {:.4}", out.report.accuracy);
            if let Some(path) = checkpoint_path {
                checkpoint::save(&out.trained, cfg.fingerprint(), path).map_err(|e| Failure::data(e.to_string()))?;
                log::info!("checkpoint written to {}", path.display());
            }
            Ok(to_json(&out.report))
        }
        Mode::Production => {
            let report = evaluate_production(&model, &ds, &cfg, seed, &log_progress)?;
            log::info!(
                "median AUC {:.4}, 95% CI [{:.4}, {:.4}]",
                report.median_auc,
                report.ci95.0,
                report.ci95.1
            );
            Ok(to_json(&report))
        }
    }
}

fn activations(ckpt: &Path, image: &Path, layer: Option<&str>, out: &Path) -> Result<String, Failure> {
    let (model, _) = checkpoint::load(ckpt).map_err(|e| Failure::data(e.to_string()))?;
    let img = dataset::decode_png(image).map_err(|e| Failure::data(e.to_string()))?;
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let set = extract(&model, &img, &id, None, layer).map_err(|e| match e {
        convbench::activations::ActivationError::Dimension { .. } => Failure::data(e.to_string()),
        other => Failure::validation(other.to_string()),
    })?;
    let manifest = export(&set, out).map_err(|e| Failure::data(e.to_string()))?;
    Ok(to_json(&manifest))
}

fn synth(classes: usize, per_class: usize, h: usize, w: usize, seed: u64, out: &Path) -> Result<String, Failure> {
    let ds = generate_synthetic(classes, per_class, h, w, seed).map_err(|e| Failure::validation(e.to_string()))?;
    let files = write_directory(&ds, out).map_err(|e| Failure::data(e.to_string()))?;
    Ok(to_json(&json!({
        "out": out,
        "classes": ds.class_names(),
        "per_class": per_class,
        "height": h,
        "width": w,
        "files": files.len(),
    })))
}

fn serve(
    host: &str,
    port: u16,
    data_dir: Option<&Path>,
    config: Option<&Path>,
    snapshot: Option<PathBuf>,
) -> Result<String, Failure> {
    let cfg = load_config(config)?;
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::validation(format!("address {host}:{port}: {e}")))?;
    let ds = match data_dir {
        Some(dir) => dataset_for(&cfg, &dir.to_string_lossy(), 0, 0)?,
        None => {
            let per_class = synth_per_class(&cfg, Mode::Fast).max(synth_per_class(&cfg, Mode::Production));
            dataset_for(&cfg, "synth", per_class, 0)?
        }
    };
    let state = AppState::new(cfg, ds, snapshot).map_err(|e| Failure::data(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(1, "io", e.to_string()))?;
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    let bound = runtime
        .block_on(convbench_service::serve(state, addr, shutdown))
        .map_err(|e| Failure::new(1, "io", e.to_string()))?;
    Ok(to_json(&json!({ "stopped": bound })))
}
