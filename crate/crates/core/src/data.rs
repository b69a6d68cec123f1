//! Dataset loading, normalization, windowing and synthetic-series generation.
//!
//! On-disk contract: values are UTF-8 CSV with one column per channel and an
//! optional header row (auto-detected by a non-numeric first row); labels are
//! a separate single-column CSV of 0/1 with no header.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stddev floor applied during z-score normalization.
pub const EPS_STD: f64 = 1e-8;

/// A length-L, M-channel real-valued series with optional per-timestep labels.
#[derive(Clone, Debug)]
pub struct LabeledSeries {
    /// (L, M) value matrix.
    pub values: Tensor<f64>,
    /// Per-timestep binary labels (1 = anomalous), length L when present.
    pub labels: Option<Vec<u8>>,
    pub name: String,
}

impl LabeledSeries {
    pub fn new(values: Tensor<f64>, labels: Option<Vec<u8>>, name: impl Into<String>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "series values must be (L, M), got {:?}",
                values.shape()
            )));
        }
        let (l, m) = (values.shape()[0], values.shape()[1]);
        if l == 0 || m == 0 {
            return Err(Error::Size(format!("series must have L >= 1 and M >= 1, got L={l} M={m}")));
        }
        if !values.all_finite() {
            return Err(Error::Data("series contains NaN or infinite values".into()));
        }
        if let Some(lab) = &labels {
            if lab.len() != l {
                return Err(Error::Schema(format!(
                    "label length {} does not match series length {l}",
                    lab.len()
                )));
            }
            if let Some(bad) = lab.iter().find(|&&v| v > 1) {
                return Err(Error::Schema(format!("labels must be 0/1, found {bad}")));
            }
        }
        Ok(Self { values, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Per-channel normalization statistics, computed on a training split and
/// reused on test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// A batch of contiguous windows cut from one series.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// (B, W, M).
    pub windows: Tensor<f64>,
    pub start_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn count(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }
}

/// Load a values CSV (and optional labels CSV) into a [`LabeledSeries`].
pub fn load_csv_dataset(values_path: &Path, labels_path: Option<&Path>) -> Result<LabeledSeries> {
    let raw = std::fs::read_to_string(values_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(raw.as_bytes());

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("values row {}: {e}", i + 1)))?;
        let cells: Vec<&str> = record.iter().collect();
        if let Some(w) = width {
            if cells.len() != w {
                return Err(Error::Parse(format!(
                    "ragged row {}: expected {w} columns, got {}",
                    i + 1,
                    cells.len()
                )));
            }
        }
        let mut parsed = Vec::with_capacity(cells.len());
        let mut all_numeric = true;
        for cell in &cells {
            match cell.parse::<f64>() {
                Ok(v) => parsed.push(v),
                Err(_) => {
                    all_numeric = false;
                    break;
                }
            }
        }
        if !all_numeric {
            if i == 0 {
                // Header row; establishes the column count.
                width = Some(cells.len());
                continue;
            }
            return Err(Error::Parse(format!("non-numeric cell in row {}", i + 1)));
        }
        if let Some(bad) = parsed.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {bad} in row {}", i + 1)));
        }
        width = Some(cells.len());
        rows.push(parsed);
    }
    if rows.is_empty() {
        return Err(Error::Parse("values file contains no data rows".into()));
    }

    let m = rows[0].len();
    let l = rows.len();
    let mut data = Vec::with_capacity(l * m);
    for row in &rows {
        data.extend_from_slice(row);
    }
    let values = Tensor::new(&[l, m], data);

    let labels = match labels_path {
        None => None,
        Some(p) => Some(load_labels_csv(p, l)?),
    };

    let name = values_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".to_string());
    LabeledSeries::new(values, labels, name)
}

fn load_labels_csv(path: &Path, expected_len: usize) -> Result<Vec<u8>> {
    let raw = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<i64>() {
            Ok(0) => labels.push(0),
            Ok(1) => labels.push(1),
            Ok(other) => {
                return Err(Error::Parse(format!("label row {}: expected 0/1, got {other}", i + 1)))
            }
            Err(_) => {
                return Err(Error::Parse(format!("label row {}: non-integer '{cell}'", i + 1)))
            }
        }
    }
    if labels.len() != expected_len {
        return Err(Error::Schema(format!(
            "labels file has {} rows but values have {expected_len}",
            labels.len()
        )));
    }
    Ok(labels)
}

/// Write a series back to the on-disk contract (values CSV without header,
/// labels CSV alongside when present).
pub fn save_series_csv(
    series: &LabeledSeries,
    values_path: &Path,
    labels_path: Option<&Path>,
) -> Result<()> {
    let (l, m) = (series.len(), series.channels());
    let mut out = String::new();
    for t in 0..l {
        for c in 0..m {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", series.values.at(&[t, c])));
        }
        out.push('\n');
    }
    std::fs::write(values_path, out)?;
    if let (Some(path), Some(labels)) = (labels_path, &series.labels) {
        let mut out = String::new();
        for &v in labels {
            out.push_str(&format!("{v}\n"));
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}

/// Z-score each channel. When `stats` is omitted they are computed from this
/// series (training-split convention); pass the returned stats to normalize
/// test splits with training statistics.
pub fn zscore_normalize(
    series: &LabeledSeries,
    stats: Option<&NormStats>,
) -> Result<(LabeledSeries, NormStats)> {
    let (l, m) = (series.len(), series.channels());
    let stats = match stats {
        Some(s) => {
            if s.channels() != m {
                return Err(Error::Schema(format!(
                    "stats have {} channels, series has {m}",
                    s.channels()
                )));
            }
            s.clone()
        }
        None => compute_norm_stats(series),
    };

    let mut values = series.values.clone();
    for t in 0..l {
        for c in 0..m {
            let denom = stats.stddev[c].max(EPS_STD);
            *values.at_mut(&[t, c]) = (values.at(&[t, c]) - stats.mean[c]) / denom;
        }
    }
    let normalized = LabeledSeries::new(values, series.labels.clone(), series.name.clone())?;
    Ok((normalized, stats))
}

/// Invert [`zscore_normalize`] with the stats that produced it.
pub fn denormalize(series: &LabeledSeries, stats: &NormStats) -> Result<LabeledSeries> {
    let (l, m) = (series.len(), series.channels());
    if stats.channels() != m {
        return Err(Error::Schema(format!(
            "stats have {} channels, series has {m}",
            stats.channels()
        )));
    }
    let mut values = series.values.clone();
    for t in 0..l {
        for c in 0..m {
            let denom = stats.stddev[c].max(EPS_STD);
            *values.at_mut(&[t, c]) = values.at(&[t, c]) * denom + stats.mean[c];
        }
    }
    LabeledSeries::new(values, series.labels.clone(), series.name.clone())
}

/// Per-channel mean and population stddev.
pub fn compute_norm_stats(series: &LabeledSeries) -> NormStats {
    let (l, m) = (series.len(), series.channels());
    let mut mean = vec![0.0; m];
    for t in 0..l {
        for c in 0..m {
            mean[c] += series.values.at(&[t, c]);
        }
    }
    for v in &mut mean {
        *v /= l as f64;
    }
    let mut var = vec![0.0; m];
    for t in 0..l {
        for c in 0..m {
            let d = series.values.at(&[t, c]) - mean[c];
            var[c] += d * d;
        }
    }
    let stddev = var.iter().map(|v| (v / l as f64).sqrt()).collect();
    NormStats { mean, stddev }
}

/// Cut windows of length `w` at starts 0, stride, 2*stride, ... while
/// start + w <= L. Count equals floor((L-w)/stride) + 1.
pub fn make_windows(series: &LabeledSeries, w: usize, window_stride: usize) -> Result<WindowBatch> {
    let (l, m) = (series.len(), series.channels());
    if w == 0 {
        return Err(Error::Size("window length must be >= 1".into()));
    }
    if w > l {
        return Err(Error::Size(format!("window length {w} exceeds series length {l}")));
    }
    if window_stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    let count = (l - w) / window_stride + 1;
    let mut data = Vec::with_capacity(count * w * m);
    let mut starts = Vec::with_capacity(count);
    for b in 0..count {
        let start = b * window_stride;
        starts.push(start);
        for t in 0..w {
            for c in 0..m {
                data.push(series.values.at(&[start + t, c]));
            }
        }
    }
    Ok(WindowBatch { windows: Tensor::new(&[count, w, m], data), start_indices: starts })
}

/// One additive sinusoid of the synthetic base signal.
#[derive(Clone, Debug)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
}

/// A point spike (width >= 1) of `magnitude_sigmas` times the per-channel
/// base-signal stddev, added to every channel over [at, at+width).
#[derive(Clone, Debug)]
pub struct SpikeSpec {
    pub at: usize,
    pub width: usize,
    pub magnitude_sigmas: f64,
}

/// A sustained level shift over [start, start+duration).
#[derive(Clone, Debug)]
pub struct ShiftSpec {
    pub start: usize,
    pub duration: usize,
    pub magnitude_sigmas: f64,
}

/// Parameters of the synthetic labeled-series generator.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    pub sinusoids: Vec<Sinusoid>,
    pub noise_std: f64,
    pub spikes: Vec<SpikeSpec>,
    pub level_shifts: Vec<ShiftSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 1000,
            channels: 3,
            sinusoids: vec![
                Sinusoid { period: 50.0, amplitude: 1.0 },
                Sinusoid { period: 23.0, amplitude: 0.5 },
            ],
            noise_std: 0.1,
            spikes: Vec::new(),
            level_shifts: Vec::new(),
        }
    }
}

impl SynthSpec {
    fn injections(&self) -> Vec<(usize, usize)> {
        let mut spans: Vec<(usize, usize)> = self
            .spikes
            .iter()
            .map(|s| (s.at, s.at + s.width))
            .chain(self.level_shifts.iter().map(|s| (s.start, s.start + s.duration)))
            .collect();
        spans.sort_unstable();
        spans
    }

    /// Fraction of timesteps covered by injections.
    pub fn anomaly_ratio(&self) -> f64 {
        let total: usize = self
            .spikes
            .iter()
            .map(|s| s.width)
            .chain(self.level_shifts.iter().map(|s| s.duration))
            .sum();
        total as f64 / self.length as f64
    }

    fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels == 0 {
            return Err(Error::GeneratorSpec("length and channels must be >= 1".into()));
        }
        for s in &self.spikes {
            if s.width == 0 {
                return Err(Error::GeneratorSpec("spike width must be >= 1".into()));
            }
        }
        for s in &self.level_shifts {
            if s.duration == 0 {
                return Err(Error::GeneratorSpec("shift duration must be >= 1".into()));
            }
        }
        let spans = self.injections();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::GeneratorSpec(format!(
                    "injection windows overlap: [{}, {}) and [{}, {})",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                )));
            }
        }
        if let Some(&(_, end)) = spans.last() {
            if end > self.length {
                return Err(Error::GeneratorSpec(format!(
                    "injection window ends at {end}, beyond series length {}",
                    self.length
                )));
            }
        }
        if self.anomaly_ratio() >= 1.0 {
            return Err(Error::GeneratorSpec("anomaly ratio must be < 1".into()));
        }
        Ok(())
    }
}

/// Generate a labeled series from `spec`, deterministically for a fixed seed.
/// Labels are 1 exactly on injected timesteps.
pub fn synth_anomaly_series(spec: &SynthSpec, seed: u64) -> Result<LabeledSeries> {
    spec.validate()?;
    let (l, m) = (spec.length, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per (channel, sinusoid) phases, then the noise field, in a fixed order.
    let mut phases = vec![0.0f64; m * spec.sinusoids.len()];
    for p in &mut phases {
        *p = rng.gen::<f64>() * std::f64::consts::TAU;
    }

    let mut values = Tensor::<f64>::zeros(&[l, m]);
    for t in 0..l {
        for c in 0..m {
            let mut v = 0.0;
            for (si, sin) in spec.sinusoids.iter().enumerate() {
                let phase = phases[c * spec.sinusoids.len() + si];
                v += sin.amplitude * (std::f64::consts::TAU * t as f64 / sin.period + phase).sin();
            }
            *values.at_mut(&[t, c]) = v;
        }
    }
    for t in 0..l {
        for c in 0..m {
            // Box-Muller from two uniforms keeps the draw order channel-major
            // per timestep and the output deterministic.
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *values.at_mut(&[t, c]) += spec.noise_std * z;
        }
    }

    // Injection magnitudes are expressed in units of the clean base stddev.
    let base = LabeledSeries::new(values.clone(), None, "base")?;
    let sigma = compute_norm_stats(&base).stddev;

    let mut labels = vec![0u8; l];
    for s in &spec.spikes {
        for t in s.at..s.at + s.width {
            for c in 0..m {
                *values.at_mut(&[t, c]) += s.magnitude_sigmas * sigma[c];
            }
            labels[t] = 1;
        }
    }
    for s in &spec.level_shifts {
        for t in s.start..s.start + s.duration {
            for c in 0..m {
                *values.at_mut(&[t, c]) += s.magnitude_sigmas * sigma[c];
            }
            labels[t] = 1;
        }
    }

    LabeledSeries::new(values, Some(labels), "synthetic")
}
