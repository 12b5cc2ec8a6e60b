//! End-to-end runs: data preparation, training, evaluation, ablation and
//! embedding export.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{load_series, make_windows, synthetic_sinusoid, SeriesFrame, Window, WindowSpec};
use crate::embedding::write_matrix;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_series, mse, MetricReport, ScoredSeries};
use crate::model::Model;
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::training::{fit, TrainReport};

/// Reads `path`, or generates the configured synthetic sinusoid seeded by the run seed.
pub fn load_frame<T: Scalar>(cfg: &RunConfig, path: Option<&Path>) -> Result<SeriesFrame<T>> {
    match path {
        Some(p) => load_series(p),
        None => Ok(synthetic_sinusoid(&crate::data::SinusoidSpec {
            seed: cfg.seed,
            ..cfg.data.synthetic
        })),
    }
}

/// Step ranges of the chronological splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl SplitBounds {
    pub fn new(cfg: &RunConfig, len: usize) -> Self {
        let train_end = (len as f64 * cfg.data.train_fraction).floor() as usize;
        let val_end = train_end + (len as f64 * cfg.data.val_fraction).floor() as usize;
        Self {
            train_end,
            val_end,
            len,
        }
    }
}

/// Windows of one split; validation and test contexts may reach back into
/// the preceding split, targets never do.
fn split_windows<T: Scalar>(
    frame: &SeriesFrame<T>,
    cfg: &RunConfig,
    start: usize,
    end: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window<T>>> {
    let l = cfg.model.context_len;
    let from = start.saturating_sub(l);
    if end < from + l + horizon {
        return Err(Error::Data(format!(
            "split [{start}, {end}) is too short for context {l} and horizon {horizon}"
        )));
    }
    let rows = frame.rows(from, end - from)?;
    let spec = WindowSpec {
        context_len: l,
        horizon,
        stride,
    };
    make_windows(&rows, spec, cfg.data.channel_independent, T::lit(cfg.model.norm_eps))
}

#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub bounds: SplitBounds,
    pub train: Vec<Window<T>>,
    pub val: Vec<Window<T>>,
}

pub fn prepare<T: Scalar>(cfg: &RunConfig, frame: &SeriesFrame<T>) -> Result<Prepared<T>> {
    let bounds = SplitBounds::new(cfg, frame.len());
    let tau = cfg.model.horizon;
    let train = split_windows(frame, cfg, 0, bounds.train_end, tau, cfg.data.stride)?;
    let val = split_windows(frame, cfg, bounds.train_end, bounds.val_end, tau, cfg.data.stride)?;
    Ok(Prepared { bounds, train, val })
}

pub struct Trained<T> {
    pub model: Model<T>,
    pub report: TrainReport,
}

/// Builds the configured model and trains it on the train/validation splits.
pub fn train<T: Scalar>(cfg: &RunConfig, frame: &SeriesFrame<T>) -> Result<Trained<T>> {
    cfg.validate()?;
    let prepared = prepare(cfg, frame)?;
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    let report = fit(&mut model, &prepared.train, &prepared.val, &cfg.train_config())?;
    Ok(Trained { model, report })
}

/// One forecast value, as written to `forecasts.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastRow {
    pub horizon: usize,
    /// Absolute index of the first forecast step.
    pub origin: usize,
    pub channel: usize,
    pub t: usize,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    /// Last-value persistence MSE per horizon, same windows.
    pub persistence_mse: Vec<f64>,
    /// Forecast-step model calls per window for each horizon.
    pub calls_per_window: Vec<usize>,
    #[serde(skip)]
    pub forecasts: Vec<ForecastRow>,
}

impl Evaluation {
    pub const FORECAST_HEADER: &'static str = "horizon,origin,channel,t,y_true,y_pred";

    pub fn forecasts_csv(&self) -> String {
        let mut out = String::from(Self::FORECAST_HEADER);
        out.push('\n');
        for r in &self.forecasts {
            out.push_str(&format!(
                "{},{},{},{},{:?},{:?}\n",
                r.horizon, r.origin, r.channel, r.t, r.y_true, r.y_pred
            ));
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(MetricReport::CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Forecasts every test window in parallel chunks; the result order does
/// not depend on the worker count.
fn forecast_windows<T: Scalar>(
    model: &Model<T>,
    windows: &[Window<T>],
    horizon: usize,
    batch: usize,
    workers: usize,
) -> Result<Vec<Vec<T>>> {
    let batches: Vec<&[Window<T>]> = windows.chunks(batch.max(1)).collect();
    let per_worker = batches.len().div_ceil(workers.max(1)).max(1);
    let results: Vec<Result<Vec<Vec<T>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batches
            .chunks(per_worker)
            .map(|group| {
                scope.spawn(move || -> Result<Vec<Vec<T>>> {
                    let mut out = Vec::new();
                    for b in group {
                        let ctx: Vec<Vec<T>> = b.iter().map(|w| w.context.clone()).collect();
                        out.extend(model.forecast(&ctx, horizon)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("forecast worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(windows.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Rolls the model out to each horizon over the test split and scores it.
/// Each window's context is the in-sample history for Naïve2; the MASE scale
/// comes from the channel's training split.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    cfg: &RunConfig,
    frame: &SeriesFrame<T>,
    horizons: &[usize],
) -> Result<Evaluation> {
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::Config("every evaluation horizon must be at least 1".into()));
    }
    let bounds = SplitBounds::new(cfg, frame.len());
    let train_cols: Vec<Vec<f64>> = (0..frame.channels())
        .map(|c| frame.column(c)[..bounds.train_end].iter().map(|v| v.as_f64()).collect())
        .collect();
    let tau = model.config.horizon;
    let mut eval = Evaluation {
        reports: Vec::new(),
        persistence_mse: Vec::new(),
        calls_per_window: Vec::new(),
        forecasts: Vec::new(),
    };
    for &h in horizons {
        let mut windows = split_windows(frame, cfg, bounds.val_end, bounds.len, h, cfg.eval.stride)?;
        if let Some(cap) = cfg.eval.max_windows {
            windows.truncate(cap.max(1));
        }
        let preds = forecast_windows(model, &windows, h, cfg.eval.batch_size, cfg.workers)?;
        let as64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = windows
            .iter()
            .zip(&preds)
            .map(|(w, p)| (as64(&w.context), as64(&w.target), as64(p)))
            .collect();
        let scored: Vec<ScoredSeries<'_>> = windows
            .iter()
            .zip(&rows)
            .map(|(w, (ctx, y, p))| ScoredSeries {
                insample: ctx,
                scale_history: Some(&train_cols[w.channel]),
                actual: y,
                forecast: p,
            })
            .collect();
        eval.reports.push(evaluate_series(
            &cfg.eval.dataset,
            h,
            cfg.eval.seasonal_period,
            &scored,
        )?);
        let mut persistence = 0.0;
        for (w, (ctx, y, p)) in windows.iter().zip(&rows) {
            persistence += mse(y, &vec![*ctx.last().expect("non-empty context"); h])?;
            let origin = w.start + cfg.model.context_len;
            for (i, (a, b)) in y.iter().zip(p).enumerate() {
                eval.forecasts.push(ForecastRow {
                    horizon: h,
                    origin,
                    channel: w.channel,
                    t: origin + i,
                    y_true: *a,
                    y_pred: *b,
                });
            }
        }
        eval.persistence_mse.push(persistence / windows.len() as f64);
        eval.calls_per_window.push(h.div_ceil(tau));
    }
    Ok(eval)
}

/// Configuration names of the ablation, in table order.
pub const ABLATION_CONFIGS: [&str; 3] = ["baseline", "+tscc", "+tscc+adapter"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Fingerprint of the consumed mini-batch sequence per configuration.
    pub batch_fingerprints: Vec<String>,
    pub batch_parity: bool,
    pub train_reports: Vec<TrainReport>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = String::from("config,horizon,mse,mae\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:?},{:?}\n", r.config, r.horizon, r.mse, r.mae));
        }
        out
    }
}

/// The three ablation configurations derived from `cfg`.
pub fn ablation_configs(cfg: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    ABLATION_CONFIGS
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut c = cfg.clone();
            c.model.tscc.enabled = i >= 1;
            c.model.adapter.enabled = i >= 2;
            (name, c)
        })
        .collect()
}

/// Trains and evaluates the three configurations on the same data and seed.
pub fn ablate<T: Scalar>(cfg: &RunConfig, frame: &SeriesFrame<T>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut fingerprints = Vec::new();
    let mut reports = Vec::new();
    for (name, c) in ablation_configs(cfg) {
        let trained = train(&c, frame)?;
        let ev = evaluate(&trained.model, &c, frame, &c.eval.horizons)?;
        for r in &ev.reports {
            rows.push(AblationRow {
                config: name.to_string(),
                horizon: r.horizon,
                mse: r.mse,
                mae: r.mae,
            });
        }
        fingerprints.push(trained.report.batch_fingerprint());
        reports.push(trained.report);
    }
    Ok(AblationReport {
        batch_parity: fingerprints.windows(2).all(|w| w[0] == w[1]),
        rows,
        batch_fingerprints: fingerprints,
        train_reports: reports,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExportedMatrix {
    pub name: String,
    pub path: PathBuf,
    pub rows: usize,
    pub cols: usize,
}

/// Writes `GA`, `GC`, the correlation map `M` and the prototypes `l₂` for the
/// first test batch as matrix files, flattening `[B, N, ·]` to `[B·N, ·]`.
pub fn export_embeddings<T: Scalar>(
    model: &Model<T>,
    cfg: &RunConfig,
    frame: &SeriesFrame<T>,
    out: &Path,
) -> Result<Vec<ExportedMatrix>> {
    if !model.config.tscc.enabled {
        return Err(Error::Config("embedding export needs tscc.enabled = true".into()));
    }
    let bounds = SplitBounds::new(cfg, frame.len());
    let mut windows = split_windows(
        frame,
        cfg,
        bounds.val_end,
        bounds.len,
        model.config.horizon,
        cfg.eval.stride,
    )?;
    windows.truncate(cfg.eval.batch_size.max(1));
    let refs: Vec<&Window<T>> = windows.iter().collect();
    let batch = crate::data::WindowBatch::from_windows(&refs)?;
    let mut g = Graph::new();
    let o = model.forward(&mut g, &batch.context, None)?;
    let missing = || Error::invalid("export", "enhancement outputs missing");
    let vars: [(&str, Var); 4] = [
        ("ga", o.tscc.anomaly.as_ref().ok_or_else(missing)?.output),
        ("gc", o.tscc.clean.as_ref().ok_or_else(missing)?.output),
        ("correlation", o.tscc.correlation.ok_or_else(missing)?),
        ("prototypes", o.prototypes),
    ];
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (name, v) in vars {
        let t = g.value(v);
        let cols = *t.shape().last().expect("rank >= 2");
        let m: Tensor<T> = t.clone().reshape(vec![t.len() / cols, cols])?;
        let path = out.join(format!("{name}.selm"));
        write_matrix(&path, &m)?;
        written.push(ExportedMatrix {
            name: name.to_string(),
            path,
            rows: m.shape()[0],
            cols,
        });
    }
    Ok(written)
}
