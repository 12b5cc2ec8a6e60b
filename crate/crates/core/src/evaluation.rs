//! Point-forecast metrics and the baselines they are measured against.

use serde::Serialize;

use crate::error::{Error, Result};

/// Sampling frequency with its conventional seasonal period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
}

impl Frequency {
    pub fn seasonal_period(self) -> usize {
        match self {
            Frequency::Yearly | Frequency::Weekly | Frequency::Daily => 1,
            Frequency::Quarterly => 4,
            Frequency::Monthly => 12,
            Frequency::Hourly => 24,
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "yearly" => Frequency::Yearly,
            "quarterly" => Frequency::Quarterly,
            "monthly" => Frequency::Monthly,
            "weekly" => Frequency::Weekly,
            "daily" => Frequency::Daily,
            "hourly" => Frequency::Hourly,
            _ => return None,
        })
    }
}

fn paired(op: &str, y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Metric(format!("{op}: empty input")));
    }
    if y.len() != yhat.len() {
        return Err(Error::Metric(format!(
            "{op}: {} targets but {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    paired("mse", y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    paired("mae", y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error, in percent.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    paired("mape", y, yhat)?;
    let mut total = 0.0;
    for (i, (a, b)) in y.iter().zip(yhat).enumerate() {
        if *a == 0.0 {
            return Err(Error::Metric(format!("mape: zero target at point {i}")));
        }
        total += ((a - b) / a).abs();
    }
    Ok(100.0 * total / y.len() as f64)
}

/// Symmetric MAPE in percent, bounded by 200.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    paired("smape", y, yhat)?;
    let mut total = 0.0;
    for (i, (a, b)) in y.iter().zip(yhat).enumerate() {
        let denom = a.abs() + b.abs();
        if denom == 0.0 {
            return Err(Error::Metric(format!("smape: zero denominator at point {i}")));
        }
        total += (a - b).abs() / denom;
    }
    Ok(200.0 * total / y.len() as f64)
}

/// Mean absolute `m`-step seasonal difference of the in-sample series.
pub fn mase_scale(insample: &[f64], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Metric("mase: seasonal period must be at least 1".into()));
    }
    if insample.len() <= m {
        return Err(Error::Metric(format!(
            "mase: in-sample length {} must exceed the seasonal period {m}",
            insample.len()
        )));
    }
    let diffs = insample.len() - m;
    let scale = (m..insample.len())
        .map(|t| (insample[t] - insample[t - m]).abs())
        .sum::<f64>()
        / diffs as f64;
    if scale == 0.0 {
        return Err(Error::Metric(
            "mase: in-sample seasonal differences are all zero".into(),
        ));
    }
    Ok(scale)
}

pub fn mase(y: &[f64], yhat: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    paired("mase", y, yhat)?;
    Ok(mae(y, yhat)? / mase_scale(insample, m)?)
}

/// `½·(sMAPE/sMAPE₀ + MASE/MASE₀)` relative to a baseline.
pub fn owa(smape: f64, mase: f64, smape_baseline: f64, mase_baseline: f64) -> Result<f64> {
    if !(smape_baseline > 0.0) || !(mase_baseline > 0.0) {
        return Err(Error::Metric(format!(
            "owa: baseline values must be positive (smape {smape_baseline}, mase {mase_baseline})"
        )));
    }
    Ok(0.5 * (smape / smape_baseline + mase / mase_baseline))
}

/// Repeats the last observed value.
pub fn persistence_forecast(insample: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *insample
        .last()
        .ok_or_else(|| Error::Metric("persistence: empty history".into()))?;
    Ok(vec![last; horizon])
}

/// Repeats the value `m` steps back.
pub fn seasonal_naive_forecast(insample: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    if m == 0 || insample.len() < m {
        return Err(Error::Metric(format!(
            "seasonal naive: need at least {m} points, have {}",
            insample.len()
        )));
    }
    let tail = &insample[insample.len() - m..];
    Ok((0..horizon).map(|h| tail[h % m]).collect())
}

/// Sample autocorrelation at `lag`.
pub fn acf(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 || lag >= n {
        return 0.0;
    }
    let num: f64 = (lag..n).map(|t| (x[t] - mean) * (x[t - lag] - mean)).sum();
    num / denom
}

/// 90% two-sided autocorrelation test at lag `m`; needs at least `3m` points.
pub fn seasonality_test(x: &[f64], m: usize) -> bool {
    if m <= 1 || x.len() < 3 * m {
        return false;
    }
    let s: f64 = (1..m).map(|k| acf(x, k).powi(2)).sum();
    let limit = 1.645 * ((1.0 + 2.0 * s) / x.len() as f64).sqrt();
    acf(x, m).abs() > limit
}

/// Centered moving average of order `m` (a `2×m` average when `m` is even).
/// Entries without a full window are `None`.
pub fn centered_moving_average(x: &[f64], m: usize) -> Vec<Option<f64>> {
    let n = x.len();
    let mut out = vec![None; n];
    if m == 0 || n < m + (m + 1) % 2 {
        return out;
    }
    if m % 2 == 1 {
        let half = m / 2;
        for t in half..n - half {
            out[t] = Some(x[t - half..=t + half].iter().sum::<f64>() / m as f64);
        }
    } else {
        let half = m / 2;
        for t in half..n - half {
            let inner: f64 = x[t + 1 - half..t + half].iter().sum();
            out[t] = Some((0.5 * x[t - half] + inner + 0.5 * x[t + half]) / m as f64);
        }
    }
    out
}

/// Multiplicative seasonal indices with mean 1, indexed by `t mod m`.
/// All ones when the seasonality test fails or `m ≤ 1`.
pub fn seasonal_indices(x: &[f64], m: usize) -> Vec<f64> {
    if !seasonality_test(x, m) {
        return vec![1.0; m.max(1)];
    }
    let ma = centered_moving_average(x, m);
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for (t, avg) in ma.iter().enumerate() {
        if let Some(a) = avg {
            if *a != 0.0 {
                sums[t % m] += x[t] / a;
                counts[t % m] += 1;
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return vec![1.0; m];
    }
    let mut si: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let norm = si.iter().sum::<f64>() / m as f64;
    if !(norm.is_finite() && norm != 0.0) {
        return vec![1.0; m];
    }
    si.iter_mut().for_each(|v| *v /= norm);
    si
}

/// Seasonally adjusted naïve forecast.
pub fn naive2_forecast(insample: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    let m = m.max(1);
    if insample.len() < m.max(2) {
        return Err(Error::Metric(format!(
            "naive2: need at least {} points, have {}",
            m.max(2),
            insample.len()
        )));
    }
    let si = seasonal_indices(insample, m);
    let n = insample.len();
    let last = insample[n - 1] / si[(n - 1) % m];
    Ok((0..horizon).map(|h| last * si[(n + h) % m]).collect())
}

/// Metrics for one dataset and horizon, averaged over series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub dataset: String,
    pub horizon: usize,
    pub seasonal_period: usize,
    pub series: usize,
    pub mse: f64,
    pub mae: f64,
    /// `None` when some target is zero.
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "dataset,horizon,seasonal_period,series,mse,mae,mape,smape,mase,owa";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.horizon,
            self.seasonal_period,
            self.series,
            self.mse,
            self.mae,
            opt(self.mape),
            opt(self.smape),
            opt(self.mase),
            opt(self.owa)
        )
    }
}

/// One forecast series with the history it was made from.
#[derive(Clone, Debug)]
pub struct ScoredSeries<'a> {
    pub insample: &'a [f64],
    /// History for the MASE scale; `insample` when `None`.
    pub scale_history: Option<&'a [f64]>,
    pub actual: &'a [f64],
    pub forecast: &'a [f64],
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() || values.iter().any(Option::is_none) {
        return None;
    }
    Some(values.iter().flatten().sum::<f64>() / values.len() as f64)
}

/// Scores every series and averages per-series metrics. sMAPE and MASE of
/// the model and of the Naïve2 baseline are averaged before forming OWA.
pub fn evaluate_series(dataset: &str, horizon: usize, m: usize, series: &[ScoredSeries<'_>]) -> Result<MetricReport> {
    if series.is_empty() {
        return Err(Error::Metric("no series to evaluate".into()));
    }
    let n = series.len() as f64;
    let (mut mse_sum, mut mae_sum) = (0.0, 0.0);
    let mut mapes = Vec::new();
    let mut smapes = Vec::new();
    let mut mases = Vec::new();
    let mut smapes_n2 = Vec::new();
    let mut mases_n2 = Vec::new();
    for s in series {
        mse_sum += mse(s.actual, s.forecast)?;
        mae_sum += mae(s.actual, s.forecast)?;
        mapes.push(mape(s.actual, s.forecast).ok());
        smapes.push(smape(s.actual, s.forecast).ok());
        let scale = mase_scale(s.scale_history.unwrap_or(s.insample), m.max(1)).ok();
        mases.push(scale.map(|sc| mae(s.actual, s.forecast).unwrap_or(f64::NAN) / sc));
        let n2 = naive2_forecast(s.insample, m, s.actual.len()).ok();
        smapes_n2.push(n2.as_ref().and_then(|f| smape(s.actual, f).ok()));
        mases_n2.push(match (&n2, scale) {
            (Some(f), Some(sc)) => mae(s.actual, f).ok().map(|v| v / sc),
            _ => None,
        });
    }
    let smape_v = mean_of(&smapes);
    let mase_v = mean_of(&mases);
    let owa_v = match (smape_v, mase_v, mean_of(&smapes_n2), mean_of(&mases_n2)) {
        (Some(s), Some(m), Some(s0), Some(m0)) => owa(s, m, s0, m0).ok(),
        _ => None,
    };
    Ok(MetricReport {
        dataset: dataset.to_string(),
        horizon,
        seasonal_period: m,
        series: series.len(),
        mse: mse_sum / n,
        mae: mae_sum / n,
        mape: mean_of(&mapes),
        smape: smape_v,
        mase: mase_v,
        owa: owa_v,
    })
}
