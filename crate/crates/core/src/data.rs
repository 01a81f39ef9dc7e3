//! Series loading, standardization, chronological splitting and windowing.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `T×d` multivariate series with pass-through timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    timestamps: Vec<String>,
    channel_names: Vec<String>,
    /// Row-major `T×d`.
    values: Vec<f64>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<String>, channel_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let d = channel_names.len();
        if d == 0 {
            return Err(Error::Data("series has no channels".into()));
        }
        if values.len() != timestamps.len() * d {
            return Err(Error::Data(format!(
                "{} values do not form {} rows of {d} channels",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, channel {}",
                i / d,
                i % d
            )));
        }
        Ok(Self {
            timestamps,
            channel_names,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels() + channel]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.channels();
        &self.values[t * d..(t + 1) * d]
    }
}

/// Parses `timestamp,<channel>...` CSV with a header row.
pub fn read_csv<R: Read>(reader: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable header: {e}")))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Data("empty file: a header row is required".into()));
    }
    if header.len() < 2 {
        return Err(Error::Data("header has no channel columns after the timestamp".into()));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let d = channel_names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // 1-based, counting the header as row 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if record.len() != d + 1 {
            return Err(Error::Data(format!(
                "row {row}: expected {} columns, found {}",
                d + 1,
                record.len()
            )));
        }
        timestamps.push(record[0].to_owned());
        for (c, cell) in record.iter().skip(1).enumerate() {
            let col = c + 2;
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| {
                if cell.is_empty() {
                    Error::Data(format!(
                        "row {row}, column {col} (`{}`): missing value",
                        channel_names[c]
                    ))
                } else {
                    Error::Data(format!(
                        "row {row}, column {col} (`{}`): `{cell}` is not a number",
                        channel_names[c]
                    ))
                }
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {row}, column {col} (`{}`): non-finite value",
                    channel_names[c]
                )));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("file has a header but no data rows".into()));
    }
    RawSeries::new(timestamps, channel_names, values)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_csv<W: Write>(series: &RawSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    let mut header = vec!["timestamp".to_owned()];
    header.extend(series.channel_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..series.len() {
        let mut record = vec![series.timestamps[t].clone()];
        record.extend(series.row(t).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(series, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const ETT: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("split", format!("ratios {self} must be nonnegative")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("ratios {self} must sum to 1")));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::ETT
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

/// Accepts `a:b:c` in any units, e.g. `6:2:2` or `0.7:0.1:0.2`.
impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config("split", format!("`{s}` is not of the form a:b:c")))?;
        if parts.len() != 3 {
            return Err(Error::config("split", format!("`{s}` is not of the form a:b:c")));
        }
        let total: f64 = parts.iter().sum();
        if total <= 0.0 || parts.iter().any(|p| *p < 0.0) {
            return Err(Error::config(
                "split",
                format!("`{s}` needs nonnegative parts with a positive sum"),
            ));
        }
        let r = SplitRatios {
            train: parts[0] / total,
            val: parts[1] / total,
            test: parts[2] / total,
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous chronological split of `0..len`: train and validation take
/// `⌊r·len⌋` steps, test takes the remainder. Every split must hold at least
/// `min_len` steps.
pub fn split_chronological(len: usize, ratios: SplitRatios, min_len: usize) -> Result<Splits> {
    ratios.validate()?;
    // the epsilon keeps exact decimal products such as 0.7·100 from flooring to 69
    let floor = |r: f64| ((r * len as f64) + 1e-9).floor() as usize;
    let n_train = floor(ratios.train).min(len);
    let n_val = floor(ratios.val).min(len - n_train);
    let splits = Splits {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..len,
    };
    for (name, r) in [
        ("train", &splits.train),
        ("validation", &splits.val),
        ("test", &splits.test),
    ] {
        if r.len() < min_len {
            return Err(Error::config(
                "split",
                format!(
                    "{name} split of {len} steps has {} steps, fewer than look-back + horizon = {min_len}",
                    r.len()
                ),
            ));
        }
    }
    Ok(splits)
}

/// Per-channel z-score fitted on one range of a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    /// Population statistics over `range`. Channels with zero spread get a
    /// unit scale so they map to zero rather than dividing by zero.
    pub fn fit(series: &RawSeries, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > series.len() {
            return Err(Error::Data(format!(
                "cannot fit scaler on rows {range:?} of {}",
                series.len()
            )));
        }
        let d = series.channels();
        let count = range.len() as f64;
        let mut mean = vec![0.0; d];
        for t in range.clone() {
            for (m, v) in mean.iter_mut().zip(series.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for t in range {
            for ((s, v), m) in var.iter_mut().zip(series.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Row-major `T×d` values → standardized values.
    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        let d = self.channels();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect()
    }

    pub fn inverse(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    pub fn inverse_all(&self, values: &[f64]) -> Vec<f64> {
        let d = self.channels();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.inverse(v, i % d))
            .collect()
    }
}

/// One supervised pair: `x` covers `origin−l..origin`, `y` covers
/// `origin..origin+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowedSample {
    pub origin: usize,
}

impl WindowedSample {
    pub fn x_range(&self, lookback: usize) -> Range<usize> {
        self.origin - lookback..self.origin
    }

    pub fn y_range(&self, horizon: usize) -> Range<usize> {
        self.origin..self.origin + horizon
    }
}

/// All windows lying inside `range` at the given stride; empty (with a
/// warning) when the range is too short.
pub fn window(range: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Vec<WindowedSample> {
    let stride = stride.max(1);
    if range.len() < lookback + horizon {
        log::warn!(
            "range {range:?} holds {} steps, fewer than look-back {lookback} + horizon {horizon}; no windows",
            range.len()
        );
        return Vec::new();
    }
    (range.start + lookback..=range.end - horizon)
        .step_by(stride)
        .map(|origin| WindowedSample { origin })
        .collect()
}

/// Windows whose forecast starts inside `split`, with look-back allowed to
/// reach into the preceding data.
pub fn split_windows(split: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Vec<WindowedSample> {
    let start = split.start.saturating_sub(lookback);
    window(start..split.end, lookback, horizon, stride)
        .into_iter()
        .filter(|s| s.origin >= split.start)
        .collect()
}

/// Windows over a shared standardized matrix, assembled into `[B, l, d]` /
/// `[B, h, d]` batches.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    values: Rc<[f64]>,
    channels: usize,
    lookback: usize,
    horizon: usize,
    samples: Vec<WindowedSample>,
}

impl WindowDataset {
    pub fn new(
        values: Rc<[f64]>,
        channels: usize,
        lookback: usize,
        horizon: usize,
        samples: Vec<WindowedSample>,
    ) -> Result<Self> {
        let rows = values.len() / channels.max(1);
        if let Some(bad) = samples
            .iter()
            .find(|s| s.origin < lookback || s.origin + horizon > rows)
        {
            return Err(Error::Contract(format!(
                "window at origin {} does not fit {rows} rows with look-back {lookback} and horizon {horizon}",
                bad.origin
            )));
        }
        Ok(Self {
            values,
            channels,
            lookback,
            horizon,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[WindowedSample] {
        &self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn block(&self, rows: Range<usize>) -> &[f64] {
        &self.values[rows.start * self.channels..rows.end * self.channels]
    }

    /// Stacks the samples at `indices` (positions into this dataset).
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (l, h, d) = (self.lookback, self.horizon, self.channels);
        let mut xs = Vec::with_capacity(indices.len() * l * d);
        let mut ys = Vec::with_capacity(indices.len() * h * d);
        for &i in indices {
            let s = self.samples[i];
            xs.extend_from_slice(self.block(s.x_range(l)));
            ys.extend_from_slice(self.block(s.y_range(h)));
        }
        let b = indices.len();
        (
            Tensor::new(&[b, l, d], xs).expect("window batch"),
            Tensor::new(&[b, h, d], ys).expect("window batch"),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "sine")]
    Sine,
    #[serde(rename = "sine+trend")]
    SineTrend,
    #[serde(rename = "sine+noise")]
    SineNoise,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::Sine, SynthKind::SineTrend, SynthKind::SineNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Sine => "sine",
            SynthKind::SineTrend => "sine+trend",
            SynthKind::SineNoise => "sine+noise",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "+");
        SynthKind::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| {
            Error::config(
                "kind",
                format!("unknown value `{s}`, expected one of sine, sine+trend, sine+noise"),
            )
        })
    }
}

/// Generator settings. Per-channel lists are cycled when shorter than the
/// channel count, so a single entry applies to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub channels: usize,
    pub amplitudes: Vec<f64>,
    pub periods: Vec<f64>,
    /// Phase offsets in radians.
    pub phases: Vec<f64>,
    /// Trend per step; only used by `sine+trend`.
    pub slopes: Vec<f64>,
    /// Noise standard deviation; only used by `sine+noise`.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sine,
            length: 5000,
            channels: 3,
            amplitudes: vec![1.0, 2.0, 0.5],
            periods: vec![48.0],
            phases: vec![0.0],
            slopes: vec![1e-3],
            sigma: 0.1,
            seed: 0,
        }
    }
}

fn cycled(list: &[f64], c: usize, field: &str) -> Result<f64> {
    if list.is_empty() {
        return Err(Error::config(field, "needs at least one value"));
    }
    Ok(list[c % list.len()])
}

/// Channel `c` at step `t`: `A_c·sin(2πt/P_c + φ_c) + slope_c·t + σ·ε`.
pub fn synthesize(spec: &SynthSpec) -> Result<RawSeries> {
    if spec.length == 0 {
        return Err(Error::config("length", "must be at least 1"));
    }
    if spec.channels == 0 {
        return Err(Error::config("channels", "must be at least 1"));
    }
    if let Some(p) = spec.periods.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::config("periods", format!("period {p} must be positive")));
    }
    if !(spec.sigma.is_finite() && spec.sigma >= 0.0) {
        return Err(Error::config("sigma", "must be nonnegative"));
    }
    let d = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut channel_params = Vec::with_capacity(d);
    for c in 0..d {
        let slope = if spec.kind == SynthKind::SineTrend {
            cycled(&spec.slopes, c, "slopes")?
        } else {
            0.0
        };
        channel_params.push((
            cycled(&spec.amplitudes, c, "amplitudes")?,
            cycled(&spec.periods, c, "periods")?,
            cycled(&spec.phases, c, "phases")?,
            slope,
        ));
    }
    let sigma = if spec.kind == SynthKind::SineNoise {
        spec.sigma
    } else {
        0.0
    };
    let mut values = Vec::with_capacity(spec.length * d);
    for t in 0..spec.length {
        for &(a, p, phase, slope) in &channel_params {
            let tf = t as f64;
            let mut v = a * (std::f64::consts::TAU * tf / p + phase).sin() + slope * tf;
            if sigma > 0.0 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                v += sigma * eps;
            }
            values.push(v);
        }
    }
    let timestamps = (0..spec.length).map(|t| t.to_string()).collect();
    let names = (0..d).map(|c| format!("ch{c}")).collect();
    RawSeries::new(timestamps, names, values)
}
