//! Series ingestion, chronological splits, window extraction, instance
//! normalization and non-overlapping segmentation.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::scalar::Scalar;

/// A uniformly sampled multivariate series, `values` laid out `[time × channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame<T> {
    values: Vec<T>,
    channel_names: Vec<String>,
    /// Absolute index of the first row in the source series.
    origin: usize,
}

impl<T: Scalar> SeriesFrame<T> {
    pub fn new(values: Vec<T>, channel_names: Vec<String>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 || values.len() % c != 0 {
            return Err(Error::Data(format!("{} values do not fill {c} channels", values.len())));
        }
        Ok(Self {
            values,
            channel_names,
            origin: 0,
        })
    }

    /// Builds a frame from per-channel columns of equal length.
    pub fn from_columns(columns: &[Vec<T>], names: Vec<String>) -> Result<Self> {
        let len = columns.first().map_or(0, Vec::len);
        if columns.len() != names.len() || columns.iter().any(|c| c.len() != len) {
            return Err(Error::Data("ragged columns".into()));
        }
        let mut values = Vec::with_capacity(len * columns.len());
        for t in 0..len {
            values.extend(columns.iter().map(|c| c[t]));
        }
        Self::new(values, names)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channel_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn value(&self, t: usize, channel: usize) -> T {
        self.values[t * self.channels() + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<T> {
        (0..self.len()).map(|t| self.value(t, channel)).collect()
    }

    /// Rows `[start, start + len)` as a new frame, keeping absolute indexing.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Data(format!(
                "rows {start}..{} exceed extent {}",
                start + len,
                self.len()
            )));
        }
        let c = self.channels();
        Ok(Self {
            values: self.values[start * c..(start + len) * c].to_vec(),
            channel_names: self.channel_names.clone(),
            origin: self.origin + start,
        })
    }
}

fn detect_delimiter(header: &str) -> u8 {
    [b',', b';', b'\t']
        .into_iter()
        .max_by_key(|&d| header.bytes().filter(|&b| b == d).count())
        .unwrap_or(b',')
}

fn looks_like_timestamp(name: &str) -> bool {
    let n = name.trim().to_ascii_lowercase();
    ["date", "time", "timestamp", "datetime", "ds", "ts", "t"]
        .iter()
        .any(|k| n == *k || n.contains("date") || n.contains("time"))
}

/// Reads a delimiter-separated file with a header row. The delimiter is
/// auto-detected among comma, semicolon and tab. A leading timestamp column
/// (recognized by its header or by a non-numeric first cell) is skipped.
pub fn load_series<T: Scalar>(path: impl AsRef<Path>) -> Result<SeriesFrame<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_series(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses the text form accepted by [`load_series`].
pub fn parse_series<T: Scalar>(text: &str) -> Result<SeriesFrame<T>> {
    let header_line = text.lines().next().ok_or_else(|| Error::Data("empty file".into()))?;
    let delimiter = detect_delimiter(header_line);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("malformed row: {e}")))?;
    if records.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 data rows, found {}",
            records.len()
        )));
    }
    let skip_first = headers.len() > 1
        && (looks_like_timestamp(&headers[0]) || records[0].get(0).is_some_and(|c| c.parse::<f64>().is_err()));
    let first = usize::from(skip_first);
    let names = headers[first..].to_vec();
    let mut values = Vec::with_capacity(records.len() * names.len());
    for (row, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {row} has {} cells, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        for (col, cell) in rec.iter().enumerate().skip(first) {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "non-numeric cell {cell:?} at row {row}, column {col} ({})",
                    headers[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite cell {cell:?} at row {row}, column {col} ({})",
                    headers[col]
                )));
            }
            values.push(T::lit(v));
        }
    }
    SeriesFrame::new(values, names)
}

/// Writes a frame as comma-separated text with an integer time column.
pub fn write_series<T: Scalar>(frame: &SeriesFrame<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("t");
    for n in frame.channel_names() {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for t in 0..frame.len() {
        out.push_str(&(frame.origin() + t).to_string());
        for c in 0..frame.channels() {
            out.push(',');
            out.push_str(&format!("{}", frame.value(t, c).as_f64()));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Chronological split sizes, in time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Contiguous train / validation / test partitions, in that order.
#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: SeriesFrame<T>,
    pub val: SeriesFrame<T>,
    pub test: SeriesFrame<T>,
}

pub fn split_series<T: Scalar>(frame: &SeriesFrame<T>, counts: SplitCounts) -> Result<Splits<T>> {
    let total = counts.train + counts.val + counts.test;
    if total > frame.len() {
        return Err(Error::Data(format!(
            "split counts sum to {total}, series has {} steps",
            frame.len()
        )));
    }
    Ok(Splits {
        train: frame.rows(0, counts.train)?,
        val: frame.rows(counts.train, counts.val)?,
        test: frame.rows(counts.train + counts.val, counts.test)?,
    })
}

/// Context length, native horizon and stride of a window stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub context_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self, segment_len: usize) -> Result<()> {
        if self.context_len == 0 || self.horizon == 0 || self.stride == 0 || segment_len == 0 {
            return Err(Error::Data(format!(
                "context, horizon, stride and segment length must be positive: {self:?}, P={segment_len}"
            )));
        }
        if self.context_len % segment_len != 0 {
            return Err(Error::Data(format!(
                "context length {} is not divisible by segment length {segment_len}",
                self.context_len
            )));
        }
        Ok(())
    }

    /// Number of windows an extent of `extent` steps yields.
    pub fn count(&self, extent: usize) -> usize {
        let need = self.context_len + self.horizon;
        if extent < need {
            0
        } else {
            (extent - need) / self.stride + 1
        }
    }
}

/// Per-window normalization statistics, computed from the context only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: T,
    /// Standard deviation plus the regularizing eps; always positive.
    pub scale: T,
}

impl<T: Scalar> NormStats<T> {
    pub fn from_context(context: &[T], eps: T) -> Self {
        let n = T::from_usize(context.len().max(1)).unwrap();
        let mean = context.iter().copied().sum::<T>() / n;
        let var = context.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        Self {
            mean,
            scale: var.sqrt() + eps,
        }
    }

    pub fn normalize(&self, values: &[T]) -> Vec<T> {
        values.iter().map(|&v| (v - self.mean) / self.scale).collect()
    }

    pub fn denormalize(&self, values: &[T]) -> Vec<T> {
        values.iter().map(|&v| v * self.scale + self.mean).collect()
    }
}

/// Normalizes a context window with its own statistics.
pub fn instance_normalize<T: Scalar>(window: &[T], eps: T) -> Result<(Vec<T>, NormStats<T>)> {
    if eps <= T::zero() {
        return Err(Error::invalid("instance_normalize", "eps must be positive"));
    }
    let stats = NormStats::from_context(window, eps);
    Ok((stats.normalize(window), stats))
}

pub fn denormalize<T: Scalar>(pred: &[T], stats: &NormStats<T>) -> Vec<T> {
    stats.denormalize(pred)
}

/// One univariate training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    pub channel: usize,
    /// Absolute index of the first context step.
    pub start: usize,
    pub context: Vec<T>,
    pub target: Vec<T>,
    pub stats: NormStats<T>,
}

/// Extracts every `(context, target)` window of `frame`. With
/// `channel_independent` each channel yields its own univariate windows;
/// otherwise the frame must have a single channel. Output is ordered by
/// `(channel, start)`.
pub fn make_windows<T: Scalar>(
    frame: &SeriesFrame<T>,
    spec: WindowSpec,
    channel_independent: bool,
    eps: T,
) -> Result<Vec<Window<T>>> {
    if spec.context_len == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Data(format!("invalid window spec {spec:?}")));
    }
    if !channel_independent && frame.channels() != 1 {
        return Err(Error::Data(format!(
            "joint windows over {} channels are not supported; enable channel independence",
            frame.channels()
        )));
    }
    let need = spec.context_len + spec.horizon;
    if need > frame.len() {
        return Err(Error::Data(format!(
            "context {} + horizon {} exceeds split extent {}",
            spec.context_len,
            spec.horizon,
            frame.len()
        )));
    }
    let count = spec.count(frame.len());
    let mut out = Vec::with_capacity(count * frame.channels());
    for channel in 0..frame.channels() {
        let series = frame.column(channel);
        for w in 0..count {
            let s = w * spec.stride;
            let context = series[s..s + spec.context_len].to_vec();
            let target = series[s + spec.context_len..s + need].to_vec();
            let stats = NormStats::from_context(&context, eps);
            out.push(Window {
                channel,
                start: frame.origin() + s,
                context,
                target,
                stats,
            });
        }
    }
    Ok(out)
}

/// Windowed series cut into `N` non-overlapping segments of length `P`: `[B × N × P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedBatch<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> SegmentedBatch<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn segments(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn segment_len(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Reassembles the `[B × L]` windows.
    pub fn flatten(&self) -> Tensor<T> {
        let (b, n, p) = (self.batch(), self.segments(), self.segment_len());
        self.tensor.clone().reshape([b, n * p]).expect("same element count")
    }
}

/// Cuts `[B × L]` windows into `[B × L/P × P]`; element `(b, n, p)` is `window(b, n·P + p)`.
pub fn segment<T: Scalar>(windows: &Tensor<T>, segment_len: usize) -> Result<SegmentedBatch<T>> {
    if windows.rank() != 2 {
        return Err(Error::invalid("segment", "windows must be [B × L]"));
    }
    let (b, l) = (windows.shape()[0], windows.shape()[1]);
    if segment_len == 0 || l % segment_len != 0 {
        return Err(Error::invalid(
            "segment",
            format!("context length {l} is not divisible by segment length {segment_len}"),
        ));
    }
    // Row-major [B, L] and [B, N, P] share one layout.
    Ok(SegmentedBatch {
        tensor: windows.clone().reshape([b, l / segment_len, segment_len])?,
    })
}

/// A mini-batch of normalized windows.
#[derive(Clone, Debug)]
pub struct WindowBatch<T> {
    /// `[B × L]`, each row normalized by its own context statistics.
    pub context: Tensor<T>,
    /// `[B × τ]`, normalized with the matching context statistics.
    pub target: Tensor<T>,
    pub stats: Vec<NormStats<T>>,
    /// `(channel, start)` of each row.
    pub keys: Vec<(usize, usize)>,
}

impl<T: Scalar> WindowBatch<T> {
    pub fn from_windows(windows: &[&Window<T>]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (l, h) = (first.context.len(), first.target.len());
        let mut ctx = Vec::with_capacity(windows.len() * l);
        let mut tgt = Vec::with_capacity(windows.len() * h);
        for w in windows {
            if w.context.len() != l || w.target.len() != h {
                return Err(Error::Data("windows of unequal length in one batch".into()));
            }
            ctx.extend(w.stats.normalize(&w.context));
            tgt.extend(w.stats.normalize(&w.target));
        }
        Ok(Self {
            context: Tensor::new([windows.len(), l], ctx)?,
            target: Tensor::new([windows.len(), h], tgt)?,
            stats: windows.iter().map(|w| w.stats).collect(),
            keys: windows.iter().map(|w| (w.channel, w.start)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// SHA-256 over the keys and exact values of the batch.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &(c, s) in &self.keys {
            h.update((c as u64).to_le_bytes());
            h.update((s as u64).to_le_bytes());
        }
        for v in self.context.data().iter().chain(self.target.data()) {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
        crate::numerics::hex(&h.finalize())
    }
}

/// Parameters of the synthetic sinusoid generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidSpec {
    pub len: usize,
    pub period: f64,
    pub noise_std: f64,
    /// Probability that a step carries an additive spike.
    pub spike_rate: f64,
    pub spike_magnitude: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        Self {
            len: 2000,
            period: 24.0,
            noise_std: 0.05,
            spike_rate: 0.01,
            spike_magnitude: 3.0,
            channels: 1,
            seed: 0,
        }
    }
}

/// `sin(2πt/period + φ_c) + noise`, with sparse spikes of random sign.
pub fn synthetic_sinusoid<T: Scalar>(spec: &SinusoidSpec) -> SeriesFrame<T> {
    let mut rng = RngState::new(spec.seed);
    let mut columns = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        let phase = c as f64 * 0.7;
        let col = (0..spec.len)
            .map(|t| {
                let base = (2.0 * std::f64::consts::PI * t as f64 / spec.period + phase).sin();
                let noise = spec.noise_std * rng.normal::<f64>();
                let spike = if rng.uniform::<f64>(0.0, 1.0) < spec.spike_rate {
                    let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                    sign * spec.spike_magnitude
                } else {
                    0.0
                };
                T::lit(base + noise + spike)
            })
            .collect();
        columns.push(col);
    }
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    SeriesFrame::from_columns(&columns, names).expect("equal-length columns")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(len: usize, channels: usize) -> SeriesFrame<f64> {
        let cols: Vec<Vec<f64>> = (0..channels)
            .map(|c| (0..len).map(|t| (t * 10 + c) as f64).collect())
            .collect();
        SeriesFrame::from_columns(&cols, (0..channels).map(|c| format!("c{c}")).collect()).unwrap()
    }

    #[test]
    fn parses_three_rows_two_channels() {
        let f: SeriesFrame<f64> = parse_series("date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n2020-01-03,5,6\n").unwrap();
        assert_eq!((f.len(), f.channels()), (3, 2));
        assert_eq!(f.column(1), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn detects_semicolon_and_tab() {
        let f: SeriesFrame<f64> = parse_series("a;b\n1;2\n3;4\n").unwrap();
        assert_eq!(f.channels(), 2);
        let f: SeriesFrame<f64> = parse_series("ts\ta\n2020\t1\n2021\t3\n").unwrap();
        assert_eq!(f.channels(), 1);
        assert_eq!(f.column(0), vec![1.0, 3.0]);
    }

    #[test]
    fn non_numeric_cell_names_location() {
        let err = parse_series::<f64>("date,a,b\nx,1,2\ny,oops,4\n")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("oops") && err.contains("row 1") && err.contains("column 1"),
            "{err}"
        );
    }

    #[test]
    fn too_few_rows() {
        assert!(parse_series::<f64>("a,b\n1,2\n").is_err());
    }

    #[test]
    fn split_identity_and_overflow() {
        let f = frame(10, 1);
        let s = split_series(
            &f,
            SplitCounts {
                train: 10,
                val: 0,
                test: 0,
            },
        )
        .unwrap();
        assert_eq!(s.train, f);
        assert!(s.val.is_empty() && s.test.is_empty());
        assert!(split_series(
            &f,
            SplitCounts {
                train: 8,
                val: 2,
                test: 1
            }
        )
        .is_err());
    }

    #[test]
    fn window_count_small_case() {
        let f = frame(10, 1);
        let spec = WindowSpec {
            context_len: 4,
            horizon: 2,
            stride: 2,
        };
        let w = make_windows(&f, spec, true, 1e-5).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].context, vec![20.0, 30.0, 40.0, 50.0]);
        assert_eq!(w[1].target, vec![60.0, 70.0]);
        let two = make_windows(&frame(10, 2), spec, true, 1e-5).unwrap();
        assert_eq!(two.len(), 6);
        assert!(make_windows(&frame(10, 2), spec, false, 1e-5).is_err());
    }

    #[test]
    fn stride_equal_to_extent() {
        let f = frame(10, 1);
        let ok = WindowSpec {
            context_len: 6,
            horizon: 4,
            stride: 10,
        };
        assert_eq!(make_windows(&f, ok, true, 1e-5).unwrap().len(), 1);
        let too_long = WindowSpec {
            context_len: 8,
            horizon: 4,
            stride: 10,
        };
        assert!(make_windows(&f, too_long, true, 1e-5).is_err());
    }

    #[test]
    fn segment_shapes() {
        let w = Tensor::<f64>::zeros([2, 672]);
        let s = segment(&w, 96).unwrap();
        assert_eq!(s.tensor().shape(), &[2, 7, 96]);
        let one = segment(&w, 672).unwrap();
        assert_eq!(one.segments(), 1);
        assert!(segment(&w, 100).is_err());
    }

    #[test]
    fn constant_window_normalizes_to_zero() {
        let (n, stats) = instance_normalize(&[4.0f64; 8], 1e-5).unwrap();
        assert!(n.iter().all(|&v| v == 0.0));
        assert_eq!(denormalize(&n, &stats), vec![4.0; 8]);
        assert!(instance_normalize(&[1.0f64, 2.0], 0.0).is_err());
    }

    #[test]
    fn stats_ignore_target() {
        let f = frame(40, 1);
        let spec = WindowSpec {
            context_len: 8,
            horizon: 4,
            stride: 1,
        };
        let mut altered = f.column(0);
        // perturb every target region of the first window heavily
        for v in altered.iter_mut().skip(8).take(4) {
            *v *= 1000.0;
        }
        let g = SeriesFrame::from_columns(&[altered], vec!["c0".into()]).unwrap();
        let a = make_windows(&f, spec, true, 1e-5).unwrap();
        let b = make_windows(&g, spec, true, 1e-5).unwrap();
        assert_eq!(a[0].stats, b[0].stats);
        assert_ne!(a[0].target, b[0].target);
    }
}
