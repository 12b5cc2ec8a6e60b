//! `sefc` command-line runner.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data or
//! file-format error, 4 training divergence, 5 gradient mismatch.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use sefc::checkpoint::{load_checkpoint, save_checkpoint};
use sefc::config::{Precision, Preset, RunConfig};
use sefc::diagnostics::{model_gradient_check, GradcheckConfig};
use sefc::model::Model;
use sefc::numerics::OpKind;
use sefc::runs::{self, ABLATION_CONFIGS};
use sefc::{Error, Scalar};

#[derive(Parser)]
#[command(
    name = "sefc",
    version,
    about = "Semantic-enhanced forecasting on a frozen transformer backbone"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, report and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// CSV series; a synthetic sinusoid is used when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a checkpoint out over the test split and score each horizon.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `config.resolved` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        /// Defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the baseline, +TSCC and +TSCC+adapter configurations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full model on a tiny configuration.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt the backward rule of this operation (for example `tanh`).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Write GA, GC, correlation and prototype matrices of one test batch.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Lib(Error),
    Gradient(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Gradient(_) => 5,
            Failure::Lib(e) => match e {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Format(_) | Error::Io { .. } => 3,
                Error::Divergence { .. } => 4,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Gradient(m) => m.clone(),
        }
    }
}

type Outcome = Result<Value, Failure>;

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = flag
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set run.out_dir".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<(), Error> {
    write(path, &serde_json::to_string_pretty(v).expect("json value serializes"))
}

fn to_json<S: serde::Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Outcome {
    let frame = runs::load_frame::<T>(cfg, data)?;
    let trained = runs::train(cfg, &frame)?;
    write(&out.join("config.resolved"), &cfg.resolved())?;
    save_checkpoint(&trained.model, out.join("checkpoint.selm"))?;
    let report = json!({
        "train": to_json(&trained.report),
        "fingerprint": trained.report.fingerprint(),
        "partition": to_json(&trained.model.partition()?),
    });
    write_json(&out.join("report.json"), &report)?;
    Ok(json!({
        "best_epoch": trained.report.best_epoch,
        "best_val_loss": trained.report.best_val_loss,
        "initial_train_loss": trained.report.initial_train_loss,
        "final_train_loss": trained.report.final_train_loss,
        "steps": trained.report.steps,
        "fingerprint": trained.report.fingerprint(),
        "out": out,
    }))
}

fn evaluation_config(checkpoint: &Path, config: Option<&Path>) -> Result<RunConfig, Error> {
    let beside = checkpoint.parent().map(|p| p.join("config.resolved"));
    match (config, beside) {
        (Some(p), _) => load_config(p),
        (None, Some(p)) if p.exists() => load_config(&p),
        _ => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn cmd_evaluate<T: Scalar>(
    cfg: &mut RunConfig,
    model: Model<T>,
    data: Option<&Path>,
    horizons: Option<Vec<usize>>,
    out: &Path,
) -> Outcome {
    cfg.model = model.config.clone();
    if let Some(h) = horizons {
        if h.is_empty() || h.contains(&0) {
            return Err(Error::Config("--horizons must list values of at least 1".into()).into());
        }
        cfg.eval.horizons = h;
    }
    let frame = runs::load_frame::<T>(cfg, data)?;
    let ev = runs::evaluate(&model, cfg, &frame, &cfg.eval.horizons)?;
    write(&out.join("metrics.csv"), &ev.metrics_csv())?;
    write(&out.join("forecasts.csv"), &ev.forecasts_csv())?;
    let path = out.join("report.json");
    let mut report = std::fs::read_to_string(&path)
        .ok()
        .and_then(|s| serde_json::from_str::<Value>(&s).ok())
        .filter(Value::is_object)
        .unwrap_or_else(|| json!({}));
    report["evaluation"] = to_json(&ev);
    write_json(&path, &report)?;
    Ok(to_json(&ev))
}

fn cmd_ablate<T: Scalar>(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Outcome {
    let frame = runs::load_frame::<T>(cfg, data)?;
    let report = runs::ablate(cfg, &frame)?;
    write(&out.join("config.resolved"), &cfg.resolved())?;
    write(&out.join("ablation.csv"), &report.table())?;
    write_json(&out.join("report.json"), &json!({ "ablation": to_json(&report) }))?;
    Ok(json!({
        "configs": ABLATION_CONFIGS,
        "rows": to_json(&report.rows),
        "batch_fingerprints": report.batch_fingerprints,
        "batch_parity": report.batch_parity,
    }))
}

/// Largest shapes accepted by `gradcheck`.
const GRADCHECK_CAPS: [(&str, usize); 4] = [
    ("segments", 8),
    ("segment_len", 16),
    ("width", 32),
    ("backbone_width", 32),
];

fn cmd_gradcheck(config: Option<&Path>, fault: Option<String>) -> Outcome {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => {
            let mut c = RunConfig::with_preset(Preset::Tiny);
            c.seed = 1;
            c.apply_env()?;
            c
        }
    };
    let m = &cfg.model;
    for ((name, cap), value) in GRADCHECK_CAPS
        .iter()
        .zip([m.segments(), m.segment_len, m.width, m.backbone.width])
    {
        if value > *cap {
            return Err(Error::Config(format!("gradcheck needs a tiny config: {name} = {value} exceeds {cap}")).into());
        }
    }
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
        })?),
    };
    let started = Instant::now();
    let outcome = model_gradient_check(&GradcheckConfig {
        model: cfg.model.clone(),
        seed: cfg.seed,
        fault,
        ..GradcheckConfig::default()
    })?;
    let summary = json!({
        "pass": outcome.pass(),
        "max_rel_err": outcome.report.max_rel_err,
        "worst_param": outcome.report.worst_param,
        "parameters": outcome.parameters,
        "coordinates": outcome.coordinates,
        "failing_ops": outcome.failing_ops,
        "seconds": started.elapsed().as_secs_f64(),
    });
    emit(&summary.to_string());
    if outcome.pass() {
        Ok(Value::Null)
    } else {
        Err(Failure::Gradient(format!(
            "gradient mismatch: max relative error {:.3e} in parameter `{}`; failing ops: [{}]",
            outcome.report.max_rel_err,
            outcome.report.worst_param,
            outcome.failing_ops.join(", ")
        )))
    }
}

fn cmd_export<T: Scalar>(cfg: &mut RunConfig, model: Model<T>, data: Option<&Path>, out: &Path) -> Outcome {
    cfg.model = model.config.clone();
    let frame = runs::load_frame::<T>(cfg, data)?;
    let written = runs::export_embeddings(&model, cfg, &frame, out)?;
    Ok(to_json(&written))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, &cfg)?;
            match cfg.precision {
                Precision::Double => cmd_train::<f64>(&cfg, data.as_deref(), &out),
                Precision::Single => cmd_train::<f32>(&cfg, data.as_deref(), &out),
            }
        }
        Command::Evaluate {
            checkpoint,
            config,
            data,
            horizons,
            out,
        } => {
            let mut cfg = evaluation_config(&checkpoint, config.as_deref())?;
            let out = out_dir(out.or_else(|| checkpoint.parent().map(Path::to_path_buf)), &cfg)?;
            match cfg.precision {
                Precision::Double => {
                    let model = load_checkpoint::<f64>(&checkpoint)?;
                    cmd_evaluate(&mut cfg, model, data.as_deref(), horizons, &out)
                }
                Precision::Single => {
                    let model = load_checkpoint::<f32>(&checkpoint)?;
                    cmd_evaluate(&mut cfg, model, data.as_deref(), horizons, &out)
                }
            }
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(&config)?;
            let out = out_dir(out, &cfg)?;
            match cfg.precision {
                Precision::Double => cmd_ablate::<f64>(&cfg, data.as_deref(), &out),
                Precision::Single => cmd_ablate::<f32>(&cfg, data.as_deref(), &out),
            }
        }
        Command::Gradcheck { config, inject_fault } => cmd_gradcheck(config.as_deref(), inject_fault),
        Command::ExportEmbeddings {
            checkpoint,
            config,
            data,
            out,
        } => {
            let mut cfg = evaluation_config(&checkpoint, config.as_deref())?;
            match cfg.precision {
                Precision::Double => {
                    let model = load_checkpoint::<f64>(&checkpoint)?;
                    cmd_export(&mut cfg, model, data.as_deref(), &out)
                }
                Precision::Single => {
                    let model = load_checkpoint::<f32>(&checkpoint)?;
                    cmd_export(&mut cfg, model, data.as_deref(), &out)
                }
            }
        }
    }
}

/// Writes a line to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            emit(&serde_json::to_string_pretty(&v).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
