//! End-to-end runs: configuration, data preparation, training, evaluation,
//! forecasting and single-axis ablation sweeps, with their on-disk outputs.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, split_chronological, split_windows, window, RawSeries, SplitRatios, Splits, StandardScaler, WindowDataset,
};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ModelConfig, ParamReport, Petformer};
use crate::tensor::Tensor;
use crate::train::{evaluate, evaluate_repeat_last, train, EpochRecord, Metrics, TrainConfig, TrainOutcome};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const FORECAST_DIR: &str = "forecasts";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file: timestamp column first, header row required.
    pub path: Option<PathBuf>,
    pub split: SplitRatios,
    /// Step between consecutive training windows (evaluation always uses 1).
    pub window_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            split: SplitRatios::ETT,
            window_stride: 1,
        }
    }
}

/// Everything a run needs. Every field has a default; the merged result is
/// echoed to `config.json` and reproduces the run when fed back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/latest"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.split.validate()?;
        if self.data.window_stride == 0 {
            return Err(Error::config("window_stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Sets one sweepable field from its textual value.
    pub fn set(&mut self, axis: AblationAxis, value: &str) -> Result<()> {
        let int = |field: &str| -> Result<usize> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(field, format!("`{value}` is not a non-negative integer")))
        };
        match axis {
            AblationAxis::AttentionMode => self.model.attention_mode = value.parse()?,
            AblationAxis::ChannelMode => self.model.channel_mode = value.parse()?,
            AblationAxis::HeadMode => self.model.head_mode = value.parse()?,
            AblationAxis::PatchLen => self.model.patch_len = int("patch_len")?,
            AblationAxis::Lookback => self.model.lookback = int("lookback")?,
            AblationAxis::Loss => self.train.loss = value.parse()?,
            AblationAxis::Revin => {
                self.model.revin = match value.trim().to_ascii_lowercase().as_str() {
                    "true" | "on" | "1" | "yes" => true,
                    "false" | "off" | "0" | "no" => false,
                    _ => return Err(Error::config("revin", format!("`{value}` is not one of true, false"))),
                }
            }
        }
        Ok(())
    }
}

/// Fields an ablation may sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    AttentionMode,
    ChannelMode,
    HeadMode,
    #[serde(rename = "w")]
    PatchLen,
    #[serde(rename = "l")]
    Lookback,
    #[serde(rename = "loss_kind")]
    Loss,
    Revin,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::AttentionMode,
        AblationAxis::ChannelMode,
        AblationAxis::HeadMode,
        AblationAxis::PatchLen,
        AblationAxis::Lookback,
        AblationAxis::Loss,
        AblationAxis::Revin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::AttentionMode => "attention_mode",
            AblationAxis::ChannelMode => "channel_mode",
            AblationAxis::HeadMode => "head_mode",
            AblationAxis::PatchLen => "w",
            AblationAxis::Lookback => "l",
            AblationAxis::Loss => "loss_kind",
            AblationAxis::Revin => "revin",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "patch_len" => "w",
            "lookback" => "l",
            "loss" => "loss_kind",
            other => other,
        };
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == alias)
            .ok_or_else(|| {
                let valid: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::config(
                    "axis",
                    format!("unknown axis `{s}`, expected one of {}", valid.join(", ")),
                )
            })
    }
}

/// Standardized series with its splits and window sets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub splits: Splits,
    pub scaler: StandardScaler,
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
}

pub fn prepare(series: &RawSeries, model: &ModelConfig, data: &DataConfig) -> Result<PreparedData> {
    if series.channels() != model.channels {
        return Err(Error::Data(format!(
            "model expects {} channels but the data has {}",
            model.channels,
            series.channels()
        )));
    }
    let (l, h, d) = (model.lookback, model.horizon, model.channels);
    let splits = split_chronological(series.len(), data.split, l + h)?;
    let scaler = StandardScaler::fit(series, splits.train.clone())?;
    let values: Rc<[f64]> = scaler.transform(series.values()).into();
    let make = |samples| WindowDataset::new(values.clone(), d, l, h, samples);
    Ok(PreparedData {
        train: make(window(splits.train.clone(), l, h, data.window_stride))?,
        val: make(split_windows(splits.val.clone(), l, h, 1))?,
        test: make(split_windows(splits.test.clone(), l, h, 1))?,
        splits,
        scaler,
    })
}

#[derive(Debug)]
pub struct FitResult {
    pub model: Petformer,
    pub outcome: TrainOutcome,
    pub test: Metrics,
    pub baseline: Metrics,
    pub train_seconds: f64,
}

/// Trains and tests in memory. A diverged run still returns, holding the
/// last good parameters and the divergence in `outcome.diverged`.
pub fn fit(cfg: &RunConfig, series: &RawSeries) -> Result<FitResult> {
    cfg.validate()?;
    let prepared = prepare(series, &cfg.model, &cfg.data)?;
    let mut model = Petformer::new(cfg.model.clone(), cfg.train.seed)?;
    let start = Instant::now();
    let outcome = train(&mut model, &prepared.train, &prepared.val, &cfg.train)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let test = evaluate(&model, &prepared.test, cfg.train.batch_size)?;
    let baseline = evaluate_repeat_last(&prepared.test, cfg.train.batch_size)?;
    Ok(FitResult {
        model,
        outcome,
        test,
        baseline,
        train_seconds,
    })
}

fn load_data(cfg: &RunConfig) -> Result<RawSeries> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::config("data.path", "no data file given"))?;
    load_csv(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Loads the data and settles the channel count from it; the returned
/// config is the effective one.
pub fn resolve(cfg: &RunConfig) -> Result<(RunConfig, RawSeries)> {
    let series = load_data(cfg)?;
    let mut effective = cfg.clone();
    if effective.model.channels != series.channels() {
        log::info!(
            "using {} channels from the data instead of the configured {}",
            series.channels(),
            effective.model.channels
        );
        effective.model.channels = series.channels();
    }
    effective.validate()?;
    // split sizes are a config property; check them before any compute
    split_chronological(
        series.len(),
        effective.data.split,
        effective.model.lookback + effective.model.horizon,
    )?;
    Ok((effective, series))
}

#[derive(Debug)]
pub struct TrainReport {
    pub config: RunConfig,
    pub fit: FitResult,
}

/// Full training run writing `config.json`, `history.jsonl`, `checkpoint.bin`
/// and `metrics.json` into the output directory. Divergence is reported as
/// an error after the last good checkpoint and the history are written.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    let (effective, series) = resolve(cfg)?;
    let dir = effective.output_dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join(CONFIG_FILE), (effective.to_json() + "\n").as_bytes())?;
    let fit = fit(&effective, &series)?;
    write_file(&dir.join(HISTORY_FILE), history_jsonl(&fit.outcome.history).as_bytes())?;
    save_checkpoint(&fit.model, dir.join(CHECKPOINT_FILE))?;
    if let Some(err) = &fit.outcome.diverged {
        return Err(match err {
            Error::Diverged { epoch, reason } => Error::Diverged {
                epoch: *epoch,
                reason: reason.clone(),
            },
            other => Error::Contract(other.to_string()),
        });
    }
    write_json(&dir.join(METRICS_FILE), &fit.test)?;
    Ok(TrainReport { config: effective, fit })
}

/// A trained model with the data and preprocessing it was trained under.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: Petformer,
    pub series: RawSeries,
    pub prepared: PreparedData,
}

/// Loads a checkpoint, the run configuration next to it (if any) and the
/// data, checking that their shapes agree.
pub fn load_run(checkpoint: &Path, data: Option<&Path>) -> Result<LoadedRun> {
    let model = crate::model::load_checkpoint(checkpoint)?;
    let config_path = checkpoint.with_file_name(CONFIG_FILE);
    let mut config = if config_path.exists() {
        RunConfig::load(&config_path)?
    } else {
        RunConfig::default()
    };
    config.model = model.config().clone();
    if let Some(path) = data {
        config.data.path = Some(path.to_path_buf());
    }
    let series = load_data(&config)?;
    if series.channels() != model.config().channels {
        return Err(Error::Data(format!(
            "dimension mismatch: the checkpoint expects d = {} channels, the data has d = {}",
            model.config().channels,
            series.channels()
        )));
    }
    let prepared = prepare(&series, &config.model, &config.data)?;
    Ok(LoadedRun {
        config,
        model,
        series,
        prepared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub baseline: Metrics,
}

/// Test-split metrics of a trained model, written to `out_dir/metrics.json`.
pub fn run_eval(run: &LoadedRun, out_dir: &Path) -> Result<EvalReport> {
    let batch = run.config.train.batch_size;
    let metrics = evaluate(&run.model, &run.prepared.test, batch)?;
    let baseline = evaluate_repeat_last(&run.prepared.test, batch)?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(METRICS_FILE), &metrics)?;
    Ok(EvalReport { metrics, baseline })
}

/// Forecast for the window whose horizon starts at `origin`, in raw units,
/// written as `forecasts/origin_<origin>.csv` with columns
/// `index,timestamp,channel,truth,prediction`.
pub fn run_forecast(run: &LoadedRun, origin: usize, out_dir: &Path) -> Result<PathBuf> {
    let (l, h, d) = (
        run.model.config().lookback,
        run.model.config().horizon,
        run.series.channels(),
    );
    let t = run.series.len();
    if origin < l || origin + h > t {
        return Err(Error::config(
            "origin",
            format!(
                "{origin} is out of range; valid origins are {l}..={}",
                t.saturating_sub(h)
            ),
        ));
    }
    let scaler = &run.prepared.scaler;
    let history: Vec<f64> = run.series.values()[(origin - l) * d..origin * d].to_vec();
    let x = Tensor::new(&[1, l, d], scaler.transform(&history))?;
    let pred = scaler.inverse_all(run.model.predict(&x)?.data());

    let dir = out_dir.join(FORECAST_DIR);
    create_dir(&dir)?;
    let path = dir.join(format!("origin_{origin}.csv"));
    let mut out = String::from("index,timestamp,channel,truth,prediction\n");
    for step in 0..h {
        let idx = origin + step;
        for c in 0..d {
            out.push_str(&format!(
                "{idx},{},{},{},{}\n",
                csv_field(&run.series.timestamps()[idx]),
                csv_field(&run.series.channel_names()[c]),
                run.series.value(idx, c),
                pred[step * d + c]
            ));
        }
    }
    write_file(&path, out.as_bytes())?;
    Ok(path)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub head_params: Option<usize>,
    pub total_params: Option<usize>,
    pub train_seconds: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    fn failed(axis: AblationAxis, value: &str, err: Error) -> Self {
        Self {
            axis,
            value: value.to_owned(),
            mse: None,
            mae: None,
            head_params: None,
            total_params: None,
            train_seconds: None,
            error: Some(err.to_string()),
        }
    }
}

/// One training run per value with everything else fixed; a failing run is
/// recorded in its row and the sweep continues.
pub fn ablate(base: &RunConfig, series: &RawSeries, axis: AblationAxis, values: &[String]) -> Vec<AblationRow> {
    values
        .iter()
        .map(|value| {
            let run = || -> Result<AblationRow> {
                let mut cfg = base.clone();
                cfg.set(axis, value)?;
                let fit = fit(&cfg, series)?;
                if let Some(err) = fit.outcome.diverged {
                    return Err(err);
                }
                let params = fit.model.count_parameters();
                Ok(AblationRow {
                    axis,
                    value: value.clone(),
                    mse: Some(fit.test.mse),
                    mae: Some(fit.test.mae),
                    head_params: Some(params.head),
                    total_params: Some(params.total),
                    train_seconds: Some(fit.train_seconds),
                    error: None,
                })
            };
            run().unwrap_or_else(|e| {
                log::warn!("{axis}={value} failed: {e}");
                AblationRow::failed(axis, value, e)
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    w.write_record([
        "axis",
        "value",
        "mse",
        "mae",
        "head_params",
        "total_params",
        "train_seconds",
        "error",
    ])
    .map_err(err)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.axis.to_string(),
            r.value.clone(),
            opt(r.mse.map(|v| v.to_string())),
            opt(r.mae.map(|v| v.to_string())),
            opt(r.head_params.map(|v| v.to_string())),
            opt(r.total_params.map(|v| v.to_string())),
            opt(r.train_seconds.map(|v| format!("{v:.3}"))),
            opt(r.error.clone()),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs the sweep and writes `ablation.csv` into the output directory.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<(Vec<AblationRow>, PathBuf)> {
    if values.is_empty() {
        return Err(Error::config("values", "an ablation needs at least one value"));
    }
    let (effective, series) = resolve(base)?;
    let rows = ablate(&effective, &series, axis, values);
    create_dir(&effective.output_dir)?;
    let path = effective.output_dir.join(ABLATION_FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(ablation_csv(&rows)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok((rows, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamSummary {
    #[serde(flatten)]
    pub report: ParamReport,
    pub head_fraction: f64,
}

/// Parameter accounting for a configuration, without data or training.
pub fn count_params(model: &ModelConfig) -> Result<ParamSummary> {
    let report = Petformer::new(model.clone(), 0)?.count_parameters();
    Ok(ParamSummary {
        report,
        head_fraction: report.head_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_csv, synthesize, SynthSpec};
    use crate::mask::AttentionMode;
    use crate::model::{ChannelMode, HeadMode};

    fn small(dir: &Path) -> RunConfig {
        let data = dir.join("sine.csv");
        save_csv(
            &synthesize(&SynthSpec {
                length: 300,
                ..SynthSpec::default()
            })
            .unwrap(),
            &data,
        )
        .unwrap();
        RunConfig {
            data: DataConfig {
                path: Some(data),
                window_stride: 2,
                ..DataConfig::default()
            },
            model: ModelConfig {
                lookback: 24,
                horizon: 12,
                channels: 1,
                patch_len: 6,
                d_model: 8,
                layers: 1,
                heads: 2,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            output_dir: dir.join("out"),
        }
    }

    #[test]
    fn config_json_roundtrip_and_unknown_fields() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"model": {"d_model": 16}}"#).unwrap();
        assert_eq!(partial.model.d_model, 16);
        assert_eq!(partial.model.heads, 8);
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        let err = RunConfig::from_json(r#"{"model": {"attention_mode": "bogus"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("fa") && err.contains("offh"), "{err}");
    }

    #[test]
    fn axis_values_apply() {
        let mut cfg = RunConfig::default();
        cfg.set(AblationAxis::AttentionMode, "offh").unwrap();
        cfg.set(AblationAxis::PatchLen, "24").unwrap();
        cfg.set(AblationAxis::Revin, "off").unwrap();
        cfg.set(AblationAxis::ChannelMode, "sa").unwrap();
        cfg.set(AblationAxis::HeadMode, "feature").unwrap();
        assert_eq!(cfg.model.attention_mode, AttentionMode::Offh);
        assert_eq!(cfg.model.patch_len, 24);
        assert!(!cfg.model.revin);
        assert_eq!(cfg.model.channel_mode, ChannelMode::Sa);
        assert_eq!(cfg.model.head_mode, HeadMode::Feature);
        assert!(cfg.set(AblationAxis::Loss, "huber").is_err());
        assert_eq!("patch-len".parse::<AblationAxis>().unwrap(), AblationAxis::PatchLen);
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn train_writes_outputs_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let report = run_train(&cfg).unwrap();
        assert_eq!(report.config.model.channels, 3);
        let out = &cfg.output_dir;
        let read = |name: &str| fs::read(out.join(name)).unwrap();
        let (history, metrics) = (read(HISTORY_FILE), read(METRICS_FILE));
        assert_eq!(
            String::from_utf8(history.clone()).unwrap().lines().count(),
            report.fit.outcome.history.len()
        );

        // the echoed config reproduces the run
        let echoed = RunConfig::load(out.join(CONFIG_FILE)).unwrap();
        assert_eq!(echoed, report.config);
        run_train(&echoed).unwrap();
        assert_eq!(read(HISTORY_FILE), history);
        assert_eq!(read(METRICS_FILE), metrics);

        let run = load_run(&out.join(CHECKPOINT_FILE), None).unwrap();
        let eval = run_eval(&run, &dir.path().join("eval")).unwrap();
        assert_eq!(eval.metrics, report.fit.test);
        assert!(eval.baseline.mse > 0.0);
    }

    #[test]
    fn forecast_rows_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        run_train(&cfg).unwrap();
        let run = load_run(&cfg.output_dir.join(CHECKPOINT_FILE), None).unwrap();
        let path = run_forecast(&run, 100, &cfg.output_dir).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,timestamp,channel,truth,prediction");
        assert_eq!(lines.len(), 1 + 12 * 3);
        for line in &lines[1..] {
            let f: Vec<&str> = line.split(',').collect();
            let idx: usize = f[0].parse().unwrap();
            let c: usize = f[2].trim_start_matches("ch").parse().unwrap();
            assert_eq!(f[3].parse::<f64>().unwrap(), run.series.value(idx, c));
        }
        let other = run_forecast(&run, 101, &cfg.output_dir).unwrap();
        assert_ne!(path, other);
        let err = run_forecast(&run, 10, &cfg.output_dir).unwrap_err().to_string();
        assert!(err.contains("24..=288"), "{err}");
    }

    #[test]
    fn mismatched_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        run_train(&cfg).unwrap();
        let two = dir.path().join("two.csv");
        save_csv(
            &synthesize(&SynthSpec {
                length: 300,
                channels: 2,
                ..SynthSpec::default()
            })
            .unwrap(),
            &two,
        )
        .unwrap();
        let err = load_run(&cfg.output_dir.join(CHECKPOINT_FILE), Some(&two))
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("d = 3") && err.contains("d = 2"), "{err}");
    }

    #[test]
    fn ablation_records_failures_in_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let values: Vec<String> = ["fa", "bogus", "offh"].iter().map(|s| s.to_string()).collect();
        let (rows, path) = run_ablation(&cfg, AblationAxis::AttentionMode, &values).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].error.is_none() && rows[2].error.is_none());
        assert!(rows[1].error.as_deref().unwrap().contains("nifa"));
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("axis,value,mse,mae,head_params,total_params,train_seconds,error"));
    }

    #[test]
    fn missing_data_path_is_config_error() {
        let cfg = RunConfig::default();
        assert!(matches!(run_train(&cfg), Err(Error::Config { ref field, .. }) if field == "data.path"));
    }

    #[test]
    fn parameter_summary() {
        let s = count_params(&ModelConfig {
            d_model: 128,
            layers: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(s.report.head, 6192);
        assert!(s.head_fraction < 0.05);
        let json = serde_json::to_value(s).unwrap();
        assert_eq!(json["head"], 6192);
    }
}
