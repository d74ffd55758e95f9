//! The `grainmoe` command line: `plan`, `train` and `analyze`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    analyze_run, write_ep_load, write_logit_ranks, MetricsWriter, DEFAULT_SMOOTHING_WINDOW, EP_LOAD_FILE,
    LOGIT_RANKS_FILE, METRICS_FILE,
};
use crate::configplan::{preset, ArchSpec, PlanReport, PRESET_NAMES};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Precision, Real};
use crate::training::{
    default_ep_size, desk_preset, DataConfig, SynthData, TrainHyperparams, TrainOutcome, Trainer, DESK_PRESET_NAMES,
};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for usage and validation errors.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "grainmoe", version, about = "Fine-grained MoE planning, training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOPs accounting for model presets or an architecture JSON.
    Plan(PlanArgs),
    /// Train a desk-scale model on synthetic data.
    Train(TrainArgs),
    /// Re-derive load and gate exports from a run, optionally against a baseline.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Preset name; repeatable. All presets are listed when neither this nor --config is given.
    #[arg(long)]
    pub preset: Vec<String>,
    /// Architecture spec JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the full report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Desk preset name (toy-g1, toy-g8, toy-2x-g1, toy-2x-g8).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Run config JSON, such as a `config.json` written by an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory; required unless the config names one.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of expert-parallel groups used for load fractions.
    #[arg(long)]
    pub ep_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory containing `metrics.csv`.
    #[arg(long)]
    pub run: PathBuf,
    /// Baseline run directory for training-step savings.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Centered moving-average window over validation points.
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    pub window: usize,
}

/// Everything that determines a training run. The copy written to
/// `config.json` reproduces the run when passed back with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub hp: TrainHyperparams,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub ep_size: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        let p = desk_preset(name)?;
        Ok(RunConfig {
            preset: Some(p.name),
            data: Some(DataConfig::for_model(&p.model, p.hp.seed)),
            ep_size: Some(default_ep_size(p.model.moe().n_experts())),
            seed: p.hp.seed,
            model: p.model,
            hp: p.hp,
            out: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }

    /// Applies overrides and makes every seed and default explicit.
    pub fn resolve(mut self, seed: Option<u64>, steps: Option<usize>, ep_size: Option<usize>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(s) = steps {
            self.hp.steps = s;
        }
        if ep_size.is_some() {
            self.ep_size = ep_size;
        }
        if out.is_some() {
            self.out = out;
        }
        self.hp.seed = self.seed;
        let mut data = self.data.take().unwrap_or_else(|| DataConfig::for_model(&self.model, self.seed));
        data.seed = self.seed;
        self.data = Some(data);
        self.ep_size = Some(self.ep_size.unwrap_or_else(|| default_ep_size(self.model.moe().n_experts())));
        self.hp.validate()?;
        if self.out.is_none() {
            return Err(Error::InvalidConfig("no output directory: pass --out".into()));
        }
        Ok(self)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Usage errors print to stderr; `--help` and `--version`
/// print to stdout.
pub fn main_with_args<I, S>(args: I, stdout: &mut impl Write, stderr: &mut impl Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_INVALID
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Maps an error to [`EXIT_INVALID`] or [`EXIT_RUNTIME`].
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::UnknownPreset(_)
        | Error::KExceedsExperts { .. }
        | Error::NotDivisible(..)
        | Error::Json(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Plan(a) => plan(a, out),
        Command::Train(a) => train(a, out).map(|_| ()),
        Command::Analyze(a) => analyze(a, out),
    }
}

pub fn plan(args: &PlanArgs, out: &mut impl Write) -> Result<()> {
    let mut specs = Vec::new();
    for name in &args.preset {
        specs.push(preset(name)?);
    }
    if let Some(path) = &args.config {
        let spec: ArchSpec = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        specs.push(spec);
    }
    if specs.is_empty() {
        specs = PRESET_NAMES.iter().map(|n| preset(n)).collect::<Result<_>>()?;
    }
    let report = PlanReport::new(specs);
    if args.json {
        serde_json::to_writer_pretty(&mut *out, &report)?;
        writeln!(out)?;
    } else {
        write!(out, "{}", report.to_text())?;
    }
    Ok(())
}

/// Resolves the run config, trains, and writes `metrics.csv`,
/// `ep_load.csv`, `logit_ranks.json`, `checkpoint.bin` and `config.json`
/// into the output directory.
pub fn train(args: &TrainArgs, out: &mut impl Write) -> Result<RunConfig> {
    let base = match (&args.preset, &args.config) {
        (Some(p), None) => RunConfig::from_preset(p)?,
        (None, Some(c)) => RunConfig::load(c)?,
        (None, None) => {
            return Err(Error::InvalidConfig(format!(
                "train needs --preset ({}) or --config",
                DESK_PRESET_NAMES.join(", ")
            )))
        }
        (Some(_), Some(_)) => return Err(Error::InvalidConfig("--preset and --config are exclusive".into())),
    };
    let cfg = base.resolve(args.seed, args.steps, args.ep_size, args.out.clone())?;
    match Precision::from_env()? {
        Precision::F32 => run_training::<f32>(&cfg, out)?,
        Precision::F64 => run_training::<f64>(&cfg, out)?,
    }
    Ok(cfg)
}

fn run_training<T: Real>(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let dir = cfg.out.as_deref().ok_or_else(|| Error::InvalidConfig("no output directory".into()))?;
    let ep = cfg.ep_size.unwrap_or_else(|| default_ep_size(cfg.model.moe().n_experts()));
    let data_cfg = cfg.data.clone().unwrap_or_else(|| DataConfig::for_model(&cfg.model, cfg.seed));
    let data = SynthData::new(data_cfg)?;
    let trainer = Trainer::<T>::new(&cfg.model, &cfg.hp, data, ep)?;
    fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join(CONFIG_FILE))?);
    serde_json::to_writer_pretty(&mut f, cfg)?;
    f.write_all(b"\n")?;
    f.flush()?;

    let mut writer = MetricsWriter::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?), ep)?;
    let result = trainer.run(|r| writer.write(r));
    writer.flush()?;
    let outcome: TrainOutcome<T> = result?;
    write_ep_load(&dir.join(EP_LOAD_FILE), &outcome.records)?;
    write_logit_ranks(&dir.join(LOGIT_RANKS_FILE), &outcome.snapshots)?;
    outcome.params.save(&dir.join(CHECKPOINT_FILE))?;

    let last_val = outcome.records.iter().rev().find_map(|r| r.val_loss);
    writeln!(
        out,
        "trained {} steps ({}), final validation loss {}, outputs in {}",
        outcome.records.len(),
        T::NAME,
        last_val.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
        dir.display()
    )?;
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs, out: &mut impl Write) -> Result<()> {
    let res = analyze_run(&args.run, args.baseline.as_deref(), args.window)?;
    writeln!(out, "wrote {}", res.ep_load.display())?;
    if let Some(p) = &res.logit_ranks {
        writeln!(out, "wrote {}", p.display())?;
    }
    if let Some((p, s)) = &res.savings {
        writeln!(
            out,
            "savings {:.1}% (target loss {:.4} reached at step {:.1}); wrote {}",
            s.savings_pct,
            s.target_loss,
            s.crossing_step,
            p.display()
        )?;
    }
    Ok(())
}
