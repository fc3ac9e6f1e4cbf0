//! Command-line front end for the `splitlab` experiment harness.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splitlab::harness::{
    self, DefenseKind, ExperimentConfig, OutputFormat, PaperProfile, ResultRow,
};
use splitlab::nn::FcNetwork;
use splitlab::protocol::Transcript;

/// Label inference attacks and defenses for two-party split learning.
#[derive(Parser, Debug)]
#[command(name = "splitlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in defaults to start from: desk, boston, california or power-plant.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// CSV path, or `synth` for generated data.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Defense name: none, label-noise, gradient-noise, gradient-compression, rle, mle.
    #[arg(long, global = true)]
    defense: Option<String>,
    /// Config override as KEY=VALUE. Bare keys refer to the defense section.
    #[arg(long = "param", global = true, value_name = "KEY=VALUE")]
    params: Vec<String>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Base seed for training, splitting and the attack.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or directory for `train`. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "csv")]
    format: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the split model and save the transcript and checkpoints.
    Train {
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Attack a transcript saved by `train`.
    Attack {
        /// Directory written by `train`.
        #[arg(long)]
        from: PathBuf,
    },
    /// Train, attack and evaluate end to end.
    Experiment,
    /// Run one experiment per value of a defense parameter.
    SweepDefense {
        /// Parameter to vary: scale, keep_rate, sigma or dims.
        #[arg(long, default_value = "scale")]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare RLE and MLE across extension widths.
    SweepDims {
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
    },
    /// Mean-value-prediction baseline.
    BaselineMp,
    /// Print the effective config as TOML.
    ShowConfig,
}

const CONFIG_FILE: &str = "config.toml";
const TRANSCRIPT_FILE: &str = "transcript.bin";
const BOTTOM_FILE: &str = "bottom.json";
const TOP_FILE: &str = "top.json";
const RUN_FILE: &str = "run.txt";

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(name) = &self.defense {
            let kind: DefenseKind = name.parse()?;
            out.push(("defense.kind".to_string(), format!("{:?}", kind.as_str())));
        }
        for p in &self.params {
            let Some((k, v)) = p.split_once('=') else {
                bail!("--param expects KEY=VALUE, got {p:?}");
            };
            let k = k.trim();
            let key = if k.contains('.') || k == "repeats" || k == "timing" {
                k.to_string()
            } else {
                format!("defense.{k}")
            };
            out.push((key, v.trim().to_string()));
        }
        if let Some(r) = self.repeats {
            out.push(("repeats".into(), r.to_string()));
        }
        if let Some(s) = self.seed {
            out.push(("training.seed".into(), s.to_string()));
        }
        Ok(out)
    }

    fn base(&self) -> Result<ExperimentConfig> {
        if self.profile == "desk" {
            return Ok(ExperimentConfig::desk());
        }
        let profile: PaperProfile = self.profile.parse()?;
        let Some(path) = self.dataset.as_deref().filter(|d| *d != "synth") else {
            bail!("profile {} needs --dataset PATH", self.profile);
        };
        Ok(ExperimentConfig::paper(profile, path))
    }

    fn resolve_on(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            ),
            None => None,
        };
        let config = ExperimentConfig::layered_on(
            base,
            file.as_deref(),
            self.dataset.as_deref(),
            &self.overrides()?,
        )?;
        config.validate()?;
        Ok(config)
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        self.resolve_on(&self.base()?)
    }

    fn format(&self) -> Result<OutputFormat> {
        Ok(self.format.parse()?)
    }

    fn write(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => {
                std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
            }
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let common = &cli.common;
    let format = common.format()?;
    match &cli.command {
        Command::Train { run } => train(common, *run),
        Command::Attack { from } => attack(common, from, format),
        Command::Experiment => {
            let result = harness::run_experiment(&common.resolve()?)?;
            common.write(&harness::format_results(&[result], format)?)
        }
        Command::SweepDefense { key, values } => {
            let config = common.resolve()?;
            let results = harness::sweep_defense(&config, config.defense.kind, key, values)?;
            common.write(&harness::format_results(&results, format)?)
        }
        Command::SweepDims { dims } => {
            let results = harness::sweep_extension_dims(&common.resolve()?, dims)?;
            common.write(&harness::format_results(&results, format)?)
        }
        Command::BaselineMp => baseline(common, format),
        Command::ShowConfig => common.write(&common.resolve()?.to_toml_string()?),
    }
}

fn train(common: &Common, run: usize) -> Result<()> {
    let Some(dir) = &common.out else {
        bail!("train needs --out DIR");
    };
    let config = common.resolve()?;
    let data = harness::prepare_data(&config)?;
    let (session, transcript) = harness::train_run(&config, &data, run)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml_string()?)?;
    std::fs::write(dir.join(RUN_FILE), format!("{run}\n"))?;
    transcript.save(dir.join(TRANSCRIPT_FILE))?;
    session.bottom.save_json(dir.join(BOTTOM_FILE))?;
    session.top.save_json(dir.join(TOP_FILE))?;
    eprintln!(
        "saved {} transcript batches and checkpoints to {}",
        transcript.len(),
        dir.display()
    );
    Ok(())
}

fn attack(common: &Common, from: &Path, format: OutputFormat) -> Result<()> {
    let saved = std::fs::read_to_string(from.join(CONFIG_FILE))
        .with_context(|| format!("reading {}", from.join(CONFIG_FILE).display()))?;
    let run: usize = std::fs::read_to_string(from.join(RUN_FILE))?
        .trim()
        .parse()?;
    let config = common.resolve_on(&ExperimentConfig::from_toml_str(&saved)?)?;
    let data = harness::prepare_data(&config)?;
    let transcript = Transcript::load(from.join(TRANSCRIPT_FILE))?;
    let bottom = FcNetwork::load_json(from.join(BOTTOM_FILE))?;
    let result = harness::attack_run(&config, &data, run, &transcript, &bottom)?;
    let defense = config
        .defense
        .resolve(config.model.cut_dim, config.training.seed)?;
    let row = |split: &str, m: splitlab::metrics::MetricPair| ResultRow {
        dataset: data.train.name.clone(),
        defense: defense.name().into(),
        params: defense.params_string(),
        split: split.into(),
        task: "attack".into(),
        mae: m.mae,
        mse: m.mse,
        seed: config.run_seed(run),
        runtime_ms: 0,
    };
    let rows = [row("train", result.train), row("test", result.test)];
    common.write(&harness::format_rows(&rows, format)?)
}

fn baseline(common: &Common, format: OutputFormat) -> Result<()> {
    let config = common.resolve()?;
    let (train, test) = harness::baseline_mp(&config)?;
    let row = |split: &str, m: splitlab::metrics::MetricPair| ResultRow {
        dataset: config.dataset.name(),
        defense: "none".into(),
        params: String::new(),
        split: split.into(),
        task: "mp".into(),
        mae: m.mae,
        mse: m.mse,
        seed: config.training.seed,
        runtime_ms: 0,
    };
    let rows = [row("train", train), row("test", test)];
    common.write(&harness::format_rows(&rows, format)?)
}
