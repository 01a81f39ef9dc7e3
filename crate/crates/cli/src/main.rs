use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use petformer::data::{save_csv, synthesize, SplitRatios, SynthKind, SynthSpec};
use petformer::experiment::{self, AblationAxis, RunConfig};
use petformer::mask::AttentionMode;
use petformer::model::{ChannelMode, HeadMode};
use petformer::train::LossKind;
use petformer::Error;

#[derive(Parser)]
#[command(name = "petformer", version, args_override_self = true)]
#[command(about = "Long-horizon time-series forecasting with placeholder tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic series as CSV
    Synth(SynthArgs),
    /// Train a model and write config, history, checkpoint and metrics
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Validate the config and data, then stop before training
        #[arg(long)]
        dry_run: bool,
    },
    /// Test-split metrics of a trained model
    Eval(CheckpointArgs),
    /// Forecast one window and write it as tidy CSV
    Forecast {
        #[command(flatten)]
        checkpoint: CheckpointArgs,
        /// Index of the first forecast step
        #[arg(long)]
        origin: usize,
    },
    /// Sweep one field, training one model per value
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// attention_mode, channel_mode, head_mode, w, l, loss_kind or revin
        #[arg(long, value_parser = parse::<AblationAxis>)]
        axis: AblationAxis,
        /// Comma-separated values for the axis
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Per-component parameter counts for a configuration
    CountParams(RunArgs),
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "sine", value_parser = parse::<SynthKind>)]
    kind: SynthKind,
    /// Number of time steps
    #[arg(long = "length", visible_alias = "T", value_parser = positive)]
    length: Option<usize>,
    /// Number of channels
    #[arg(long = "channels", visible_alias = "d", value_parser = positive)]
    channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    amplitudes: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    periods: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    phases: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    slopes: Option<Vec<f64>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short, default_value = "synth.csv")]
    output: PathBuf,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        let d = SynthSpec::default();
        SynthSpec {
            kind: self.kind,
            length: self.length.unwrap_or(d.length),
            channels: self.channels.unwrap_or(d.channels),
            amplitudes: self.amplitudes.clone().unwrap_or(d.amplitudes),
            periods: self.periods.clone().unwrap_or(d.periods),
            phases: self.phases.clone().unwrap_or(d.phases),
            slopes: self.slopes.clone().unwrap_or(d.slopes),
            sigma: self.sigma.unwrap_or(d.sigma),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

/// Run configuration flags; each one overrides the JSON config when given.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags take precedence over its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train:val:test ratios, e.g. 6:2:2
    #[arg(long, value_parser = parse::<SplitRatios>)]
    split: Option<SplitRatios>,
    #[arg(long)]
    window_stride: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,

    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    ff_factor: Option<f64>,
    #[arg(long, value_parser = parse::<AttentionMode>)]
    attention_mode: Option<AttentionMode>,
    #[arg(long, value_parser = parse::<ChannelMode>)]
    channel_mode: Option<ChannelMode>,
    #[arg(long, value_parser = parse::<HeadMode>)]
    head_mode: Option<HeadMode>,
    #[arg(long)]
    revin: Option<bool>,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse::<LossKind>)]
    loss: Option<LossKind>,
}

macro_rules! apply {
    ($flags:expr, $target:expr, $($field:ident),+) => {
        $(if let Some(v) = $flags.$field.clone() { $target.$field = v; })+
    };
}

impl RunArgs {
    fn resolve(&self) -> petformer::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.data {
            cfg.data.path = Some(path.clone());
        }
        if let Some(stride) = self.stride {
            cfg.model.stride = Some(stride);
        }
        apply!(self, cfg.data, split, window_stride);
        apply!(self, cfg, output_dir);
        apply!(
            self,
            cfg.model,
            lookback,
            horizon,
            channels,
            patch_len,
            d_model,
            layers,
            heads,
            dropout,
            ff_factor,
            attention_mode,
            channel_mode,
            head_mode,
            revin
        );
        apply!(self, cfg.train, epochs, batch_size, learning_rate, patience, seed, loss);
        Ok(cfg)
    }
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data file; defaults to the one recorded next to the checkpoint
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to the checkpoint's directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl CheckpointArgs {
    fn out_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| self.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 4,
        _ => 1,
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn run(command: Command) -> petformer::Result<()> {
    match command {
        Command::Synth(args) => {
            let series = synthesize(&args.spec())?;
            save_csv(&series, &args.output)?;
            println!(
                "wrote {} rows x {} channels to {}",
                series.len(),
                series.channels(),
                args.output.display()
            );
        }
        Command::Train { run, dry_run } => {
            let cfg = run.resolve()?;
            if dry_run {
                let (effective, _) = experiment::resolve(&cfg)?;
                println!("{}", effective.to_json());
                return Ok(());
            }
            let report = experiment::run_train(&cfg)?;
            let outcome = &report.fit.outcome;
            println!(
                "best epoch {} (val mse {:.6}){}",
                outcome.best_epoch,
                outcome.best_val_loss,
                if outcome.stopped_early { ", stopped early" } else { "" }
            );
            println!("test {}", json(&report.fit.test));
            println!("repeat-last baseline {}", json(&report.fit.baseline));
            println!("outputs in {}", report.config.output_dir.display());
        }
        Command::Eval(args) => {
            let loaded = experiment::load_run(&args.checkpoint, args.data.as_deref())?;
            let report = experiment::run_eval(&loaded, &args.out_dir())?;
            println!("{}", json(&report.metrics));
            println!("repeat-last baseline {}", json(&report.baseline));
        }
        Command::Forecast { checkpoint, origin } => {
            let loaded = experiment::load_run(&checkpoint.checkpoint, checkpoint.data.as_deref())?;
            let path = experiment::run_forecast(&loaded, origin, &checkpoint.out_dir())?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { run, axis, values } => {
            let (rows, path) = experiment::run_ablation(&run.resolve()?, axis, &values)?;
            print!("{}", experiment::ablation_csv(&rows)?);
            println!("wrote {}", path.display());
        }
        Command::CountParams(run) => {
            let cfg = run.resolve()?;
            println!("{}", json(&experiment::count_params(&cfg.model)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
