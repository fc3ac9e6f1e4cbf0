//! End-to-end experiments: load data, train the split model under a
//! defense, attack the transcript, evaluate, repeat and emit result tables.
//!
//! Configuration is layered. Built-in defaults are overridden by a TOML
//! file, which is overridden by `key=value` pairs (dotted paths such as
//! `attack.epochs=10`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackResult};
use crate::autograd::Activation;
use crate::data::{self, Dataset, LabelColumn, LeakedSet, SynthSpec};
use crate::defense::{self, DefenseConfig, NoiseDistribution, SufficiencyReport};
use crate::error::{Error, Result};
use crate::metrics::{self, Criterion, MetricPair, Ranked};
use crate::nn::{AdamConfig, FcNetwork, Role};
use crate::protocol::{SplitSession, Transcript};
use crate::rng;

/// XORed into a run's training seed to get its attack seed.
pub const ATTACK_SEED_MASK: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synth {
        #[serde(default = "default_synth_n")]
        n: usize,
        #[serde(default = "default_synth_d")]
        d: usize,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        #[serde(default = "default_sin_weight")]
        sin_weight: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        /// Column index or header name; the last column when absent.
        #[serde(default)]
        label: Option<LabelColumn>,
        #[serde(default = "default_true")]
        header: bool,
    },
}

fn default_synth_n() -> usize {
    2000
}
fn default_synth_d() -> usize {
    8
}
fn default_noise_std() -> f64 {
    0.1
}
fn default_sin_weight() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth {
            n: default_synth_n(),
            d: default_synth_d(),
            noise_std: default_noise_std(),
            sin_weight: default_sin_weight(),
            seed: 0,
        }
    }
}

impl DatasetSource {
    pub fn csv(path: impl Into<PathBuf>) -> Self {
        DatasetSource::Csv {
            path: path.into(),
            label: None,
            header: true,
        }
    }

    /// Short name used in result tables.
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Synth { .. } => "synth".into(),
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synth {
                n,
                d,
                noise_std,
                sin_weight,
                seed,
            } => SynthSpec {
                n: *n,
                d: *d,
                noise_std: *noise_std,
                sin_weight: *sin_weight,
                seed: *seed,
            }
            .generate(),
            DatasetSource::Csv {
                path,
                label,
                header,
            } => {
                let mut ds = data::load_csv(path, &label.clone().unwrap_or_default(), *header)?;
                ds.name = self.name();
                Ok(ds)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub bottom_hidden: Vec<usize>,
    /// Width `D_E` of the cut layer.
    pub cut_dim: usize,
    pub top_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bottom_hidden: vec![16],
            cut_dim: 8,
            top_hidden: Vec::new(),
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn bottom_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.bottom_hidden);
        dims.push(self.cut_dim);
        dims
    }

    pub fn top_dims(&self, outputs: usize) -> Vec<usize> {
        let mut dims = vec![self.cut_dim];
        dims.extend(&self.top_hidden);
        dims.push(outputs);
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base seed. Run `i` trains with `seed + i`.
    pub seed: u64,
    /// Fraction of rows used for training.
    pub split_ratio: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.01,
            epochs: 40,
            batch_size: 128,
            seed: 1,
            split_ratio: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    LabelNoise,
    GradientNoise,
    GradientCompression,
    Rle,
    Mle,
}

impl DefenseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::LabelNoise => "label_noise",
            DefenseKind::GradientNoise => "gradient_noise",
            DefenseKind::GradientCompression => "gradient_compression",
            DefenseKind::Rle => "rle",
            DefenseKind::Mle => "mle",
        }
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "none" => DefenseKind::None,
            "label_noise" | "dp" => DefenseKind::LabelNoise,
            "gradient_noise" => DefenseKind::GradientNoise,
            "gradient_compression" | "gc" => DefenseKind::GradientCompression,
            "rle" => DefenseKind::Rle,
            "mle" => DefenseKind::Mle,
            other => return Err(Error::InvalidArgument(format!("unknown defense {other:?}"))),
        })
    }
}

/// User-facing defense settings. Unlike [`DefenseConfig`] the extension
/// width and secret column may be left open: `dims` then defaults to the
/// cut width and `secret_column` to a value derived from the base seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub distribution: NoiseDistribution,
    pub scale: f64,
    pub keep_rate: f64,
    pub dims: Option<usize>,
    pub secret_column: Option<usize>,
    pub sigma: f64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        DefenseSpec {
            kind: DefenseKind::None,
            distribution: NoiseDistribution::Laplace,
            scale: 0.0,
            keep_rate: 1.0,
            dims: None,
            secret_column: None,
            sigma: 1.0,
        }
    }
}

impl DefenseSpec {
    pub fn of(kind: DefenseKind) -> Self {
        DefenseSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn resolve(&self, cut_dim: usize, seed: u64) -> Result<DefenseConfig> {
        let dims = self.dims.unwrap_or(cut_dim);
        let secret_column = match self.secret_column {
            Some(t) => t,
            None if dims == 0 => 0,
            None => (rng::derive(seed, &[rng::stream::SECRET_COLUMN]) % dims as u64) as usize,
        };
        let config = match self.kind {
            DefenseKind::None => DefenseConfig::None,
            DefenseKind::LabelNoise => DefenseConfig::LabelNoise {
                distribution: self.distribution,
                scale: self.scale,
            },
            DefenseKind::GradientNoise => DefenseConfig::GradientNoise {
                distribution: self.distribution,
                scale: self.scale,
            },
            DefenseKind::GradientCompression => DefenseConfig::GradientCompression {
                keep_rate: self.keep_rate,
            },
            DefenseKind::Rle => DefenseConfig::Rle {
                dims,
                secret_column,
                sigma: self.sigma,
            },
            DefenseKind::Mle => DefenseConfig::Mle {
                dims,
                secret_column,
                sigma: self.sigma,
            },
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub leak_fraction: f64,
    pub steps_per_batch: usize,
    pub transcript_epochs: usize,
    /// Surrogate hidden widths; mirrors the top model when absent.
    pub surrogate_hidden: Option<Vec<usize>>,
    /// Whether the attacker knows the label-extension width. When it does
    /// the surrogate has `D` outputs, otherwise one.
    pub knows_extension_dims: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let a = AttackConfig::default();
        AttackSettings {
            alpha: a.alpha,
            learning_rate: a.optimizer.learning_rate,
            epochs: 25,
            leak_fraction: 0.01,
            steps_per_batch: a.steps_per_batch,
            transcript_epochs: a.transcript_epochs,
            surrogate_hidden: None,
            knows_extension_dims: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub defense: DefenseSpec,
    pub attack: AttackSettings,
    pub repeats: usize,
    /// Record wall-clock time per run. Off by default so that result
    /// files are byte-identical across invocations.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            defense: DefenseSpec::default(),
            attack: AttackSettings::default(),
            repeats: 3,
            timing: false,
        }
    }
}

/// Published benchmark settings for the three tabular datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaperProfile {
    Boston,
    California,
    PowerPlant,
}

impl std::str::FromStr for PaperProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "boston" => PaperProfile::Boston,
            "california" => PaperProfile::California,
            "power_plant" | "powerplant" => PaperProfile::PowerPlant,
            other => return Err(Error::InvalidArgument(format!("unknown profile {other:?}"))),
        })
    }
}

impl ExperimentConfig {
    /// Synthetic desk-scale profile, the same as [`Default`].
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-length profile for a real dataset CSV.
    pub fn paper(profile: PaperProfile, csv: impl Into<PathBuf>) -> Self {
        let (bottom_hidden, top_hidden, batch_size) = match profile {
            PaperProfile::Boston => (vec![16], vec![], 16),
            PaperProfile::California | PaperProfile::PowerPlant => (vec![16, 16], vec![16], 128),
        };
        ExperimentConfig {
            dataset: DatasetSource::csv(csv),
            model: ModelConfig {
                bottom_hidden,
                top_hidden,
                ..Default::default()
            },
            training: TrainingConfig {
                epochs: 100,
                batch_size,
                ..Default::default()
            },
            attack: AttackSettings {
                epochs: 50,
                ..Default::default()
            },
            repeats: 10,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Builds a config from an optional TOML document plus `key=value`
    /// overrides. Keys are dotted paths; values are parsed as TOML and fall
    /// back to plain strings.
    pub fn layered(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        Self::layered_on(&Self::default(), file, None, overrides)
    }

    /// Like [`layered`](Self::layered) but starting from `base` instead of
    /// the defaults. `dataset` is `"synth"` or a CSV path and replaces the
    /// dataset source of the lower layers.
    pub fn layered_on(
        base: &Self,
        file: Option<&str>,
        dataset: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut root = toml::Table::try_from(base).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(text) = file {
            merge(&mut root, text.parse::<toml::Table>()?);
        }
        match dataset {
            Some("synth") => {
                let keep = matches!(root.get("dataset").and_then(|d| d.get("kind")), Some(k) if k.as_str() == Some("synth"));
                if !keep {
                    let mut t = toml::Table::new();
                    t.insert("kind".into(), "synth".into());
                    root.insert("dataset".into(), toml::Value::Table(t));
                }
            }
            Some(path) => {
                let mut t = toml::Table::new();
                t.insert("kind".into(), "csv".into());
                t.insert("path".into(), path.into());
                if let Some(old) = root.get("dataset").and_then(|d| d.as_table()) {
                    if old.get("kind").and_then(|k| k.as_str()) == Some("csv") {
                        for key in ["label", "header"] {
                            if let Some(v) = old.get(key) {
                                t.insert(key.into(), v.clone());
                            }
                        }
                    }
                }
                root.insert("dataset".into(), toml::Value::Table(t));
            }
            None => {}
        }
        for (key, value) in overrides {
            let value = parse_value(value);
            if key == "dataset.kind"
                && root.get("dataset").and_then(|d| d.get("kind")) != Some(&value)
            {
                root.insert("dataset".into(), toml::Value::Table(toml::Table::new()));
            }
            set_path(&mut root, key, value)?;
        }
        let config: ExperimentConfig = toml::Value::Table(root).try_into()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        if !(self.training.split_ratio > 0.0 && self.training.split_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split ratio must lie in (0, 1), got {}",
                self.training.split_ratio
            )));
        }
        if self.attack.epochs == 0 {
            return Err(Error::InvalidArgument(
                "attack needs at least one epoch".into(),
            ));
        }
        self.defense
            .resolve(self.model.cut_dim, self.training.seed)?;
        Ok(())
    }

    /// Training seed of run `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.training.seed.wrapping_add(run as u64)
    }

    fn attack_config(&self, defense: &DefenseConfig, seed: u64) -> AttackConfig {
        let outputs = if self.attack.knows_extension_dims {
            defense.top_output_dim()
        } else {
            1
        };
        AttackConfig {
            alpha: self.attack.alpha,
            optimizer: AdamConfig::with_lr(self.attack.learning_rate),
            epochs: self.attack.epochs,
            seed: seed ^ ATTACK_SEED_MASK,
            surrogate_hidden: self
                .attack
                .surrogate_hidden
                .clone()
                .unwrap_or_else(|| self.model.top_hidden.clone()),
            hidden_activation: self.model.activation,
            surrogate_outputs: outputs,
            transcript_epochs: self.attack.transcript_epochs,
            steps_per_batch: self.attack.steps_per_batch,
        }
    }
}

/// Recursively overlays `top` onto `base`. Tables merge key by key except
/// the dataset table, which is replaced when its kind changes.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => {
                let kind_changed = t.get("kind").is_some() && t.get("kind") != b.get("kind");
                if kind_changed && key == "dataset" {
                    *b = t;
                } else {
                    merge(b, t);
                }
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("bad config key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("{key:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// The prepared data shared by every run of one experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub leaked: LeakedSet,
}

/// Splits, standardizes and samples the leaked set with the base seed, so
/// all repeats see the same data.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let raw = config.dataset.load()?;
    let seed = config.training.seed;
    let (train, test) = data::split_standardize(&raw, config.training.split_ratio, seed)?;
    let leaked = data::sample_leaked(&train, config.attack.leak_fraction, seed)?;
    Ok(PreparedData {
        train,
        test,
        leaked,
    })
}

/// Outcome of one train-attack-evaluate cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub original_train: MetricPair,
    pub original_test: MetricPair,
    pub attack_train: MetricPair,
    pub attack_test: MetricPair,
    pub label_column: usize,
    pub runtime_ms: u64,
}

impl Ranked for RunResult {
    /// The original task is ranked on test error, the attack on the
    /// inferred training labels.
    fn criterion_mae(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::OriginalMae => self.original_test.mae,
            Criterion::AttackMae => self.attack_train.mae,
        }
    }
}

/// Everything a single run produces, including trained models.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub session: SplitSession,
    pub transcript: Transcript,
    pub attack: AttackResult,
    pub result: RunResult,
}

/// Trains the split model with the seeds of run `run`.
pub fn train_run(
    config: &ExperimentConfig,
    data: &PreparedData,
    run: usize,
) -> Result<(SplitSession, Transcript)> {
    let mut session = build_session(config, data, run)?;
    let transcript = session.train_split(&data.train)?.transcript;
    Ok((session, transcript))
}

/// The untrained session of run `run`.
pub fn build_session(
    config: &ExperimentConfig,
    data: &PreparedData,
    run: usize,
) -> Result<SplitSession> {
    let seed = config.run_seed(run);
    let defense = config
        .defense
        .resolve(config.model.cut_dim, config.training.seed)?;
    let bottom = FcNetwork::build(
        &config.model.bottom_dims(data.train.dim()),
        config.model.activation,
        Role::Bottom,
        rng::derive(seed, &[rng::stream::BOTTOM_INIT]),
    )?;
    let top = FcNetwork::build(
        &config.model.top_dims(defense.top_output_dim()),
        config.model.activation,
        Role::Top,
        rng::derive(seed, &[rng::stream::TOP_INIT]),
    )?;
    SplitSession::new(
        bottom,
        top,
        defense,
        AdamConfig::with_lr(config.training.learning_rate),
        config.training.batch_size,
        config.training.epochs,
        seed,
    )
}

/// Attacks a transcript with the seeds of run `run`.
pub fn attack_run(
    config: &ExperimentConfig,
    data: &PreparedData,
    run: usize,
    transcript: &Transcript,
    bottom: &FcNetwork,
) -> Result<AttackResult> {
    let defense = config
        .defense
        .resolve(config.model.cut_dim, config.training.seed)?;
    run_attack(
        transcript,
        bottom,
        &data.train,
        &data.test,
        &data.leaked,
        &config.attack_config(&defense, config.run_seed(run)),
    )
}

/// Trains, attacks and evaluates once with the seeds of run `run`.
pub fn run_once(
    config: &ExperimentConfig,
    data: &PreparedData,
    run: usize,
) -> Result<RunArtifacts> {
    let started = Instant::now();
    let (session, transcript) = train_run(config, data, run)?;
    let original_train =
        metrics::evaluate(&session.predict(&data.train.features)?, &data.train.labels)?;
    let original_test =
        metrics::evaluate(&session.predict(&data.test.features)?, &data.test.labels)?;
    let attack = attack_run(config, data, run, &transcript, &session.bottom)?;
    let runtime_ms = if config.timing {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    let result = RunResult {
        run,
        seed: config.run_seed(run),
        original_train,
        original_test,
        attack_train: attack.train,
        attack_test: attack.test,
        label_column: attack.label_column,
        runtime_ms,
    };
    Ok(RunArtifacts {
        session,
        transcript,
        attack,
        result,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub defense: DefenseConfig,
    pub config: ExperimentConfig,
    pub mp_train: MetricPair,
    pub mp_test: MetricPair,
    pub runs: Vec<RunResult>,
    /// Run with the lowest original-task test MAE.
    pub best_original: usize,
    /// Run with the lowest attack MAE, the attacker's best.
    pub best_attack: usize,
    /// Run with the highest attack MAE, the defender's best.
    pub worst_attack: usize,
    /// Counting argument for the extension defenses.
    pub sufficiency: Option<SufficiencyReport>,
}

impl ExperimentResult {
    pub fn original(&self) -> &RunResult {
        &self.runs[self.best_original]
    }

    pub fn attack(&self) -> &RunResult {
        &self.runs[self.best_attack]
    }

    pub fn attack_worst(&self) -> &RunResult {
        &self.runs[self.worst_attack]
    }
}

/// Runs all repeats (in parallel) and selects the best per task.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_experiment_on(config, &data)
}

/// [`run_experiment`] on already prepared data.
pub fn run_experiment_on(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<ExperimentResult> {
    config.validate()?;
    let runs = (0..config.repeats)
        .into_par_iter()
        .map(|run| {
            run_once(config, data, run)
                .map(|a| a.result)
                .map_err(|e| Error::Run {
                    run,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let defense = config
        .defense
        .resolve(config.model.cut_dim, config.training.seed)?;
    let sufficiency = match defense.extension() {
        Some((dims, _)) => Some(defense::sufficiency_check(
            dims as u64,
            config.model.cut_dim as u64,
            data.train.len() as u64,
        )?),
        None => None,
    };
    Ok(ExperimentResult {
        dataset: data.train.name.clone(),
        defense,
        config: config.clone(),
        mp_train: metrics::mean_value_baseline(&data.train.labels, &data.train.labels)?,
        mp_test: metrics::mean_value_baseline(&data.train.labels, &data.test.labels)?,
        best_original: metrics::best_index(&runs, Criterion::OriginalMae)?,
        best_attack: metrics::best_index(&runs, Criterion::AttackMae)?,
        worst_attack: metrics::worst_index(&runs, Criterion::AttackMae)?,
        runs,
        sufficiency,
    })
}

/// One experiment per value of the defense parameter `key`.
pub fn sweep_defense(
    config: &ExperimentConfig,
    kind: DefenseKind,
    key: &str,
    values: &[f64],
) -> Result<Vec<ExperimentResult>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let data = prepare_data(config)?;
    values
        .par_iter()
        .map(|&v| {
            let mut cfg = config.clone();
            cfg.defense = DefenseSpec {
                kind,
                ..config.defense.clone()
            };
            match key {
                "scale" => cfg.defense.scale = v,
                "keep_rate" => cfg.defense.keep_rate = v,
                "sigma" => cfg.defense.sigma = v,
                "dims" => cfg.defense.dims = Some(as_count(v)?),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "cannot sweep defense parameter {other:?}"
                    )))
                }
            }
            run_experiment_on(&cfg, &data)
        })
        .collect()
}

fn as_count(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::InvalidArgument(format!("{v} is not a count")))
    }
}

/// RLE and MLE at each extension width; results alternate RLE, MLE.
pub fn sweep_extension_dims(
    config: &ExperimentConfig,
    dims: &[usize],
) -> Result<Vec<ExperimentResult>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidArgument(
            "extension widths must be >= 1".into(),
        ));
    }
    let data = prepare_data(config)?;
    let grid: Vec<(usize, DefenseKind)> = dims
        .iter()
        .flat_map(|&d| [(d, DefenseKind::Rle), (d, DefenseKind::Mle)])
        .collect();
    grid.par_iter()
        .map(|&(d, kind)| {
            let mut cfg = config.clone();
            cfg.defense = DefenseSpec {
                kind,
                dims: Some(d),
                secret_column: config.defense.secret_column.filter(|&t| t < d),
                ..config.defense.clone()
            };
            run_experiment_on(&cfg, &data)
        })
        .collect()
}

/// Mean-value-prediction baseline on the configured split.
pub fn baseline_mp(config: &ExperimentConfig) -> Result<(MetricPair, MetricPair)> {
    let data = prepare_data(config)?;
    Ok((
        metrics::mean_value_baseline(&data.train.labels, &data.train.labels)?,
        metrics::mean_value_baseline(&data.train.labels, &data.test.labels)?,
    ))
}

/// One line of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub defense: String,
    pub params: String,
    pub split: String,
    pub task: String,
    pub mae: f64,
    pub mse: f64,
    pub seed: u64,
    pub runtime_ms: u64,
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "dataset",
    "defense",
    "params",
    "split",
    "task",
    "mae",
    "mse",
    "seed",
    "runtime_ms",
];

/// Table rows for one experiment: `train`/`test` crossed with the tasks
/// `original`, `attack` (attacker's best run), `attack_worst` and `mp`.
pub fn result_rows(result: &ExperimentResult) -> Vec<ResultRow> {
    let row = |split: &str, task: &str, m: MetricPair, seed: u64, runtime_ms: u64| ResultRow {
        dataset: result.dataset.clone(),
        defense: result.defense.name().into(),
        params: result.defense.params_string(),
        split: split.into(),
        task: task.into(),
        mae: m.mae,
        mse: m.mse,
        seed,
        runtime_ms,
    };
    let (o, a, w) = (result.original(), result.attack(), result.attack_worst());
    let base = result.config.training.seed;
    vec![
        row("train", "original", o.original_train, o.seed, o.runtime_ms),
        row("train", "attack", a.attack_train, a.seed, a.runtime_ms),
        row(
            "train",
            "attack_worst",
            w.attack_train,
            w.seed,
            w.runtime_ms,
        ),
        row("train", "mp", result.mp_train, base, 0),
        row("test", "original", o.original_test, o.seed, o.runtime_ms),
        row("test", "attack", a.attack_test, a.seed, a.runtime_ms),
        row("test", "attack_worst", w.attack_test, w.seed, w.runtime_ms),
        row("test", "mp", result.mp_test, base, 0),
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

pub fn format_results(results: &[ExperimentResult], format: OutputFormat) -> Result<String> {
    let rows: Vec<ResultRow> = results.iter().flat_map(result_rows).collect();
    format_rows(&rows, format)
}

pub fn format_rows(rows: &[ResultRow], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            w.write_record(RESULT_COLUMNS)?;
            for r in rows {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
        }
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows)?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn parse_rows(text: &str, format: OutputFormat) -> Result<Vec<ResultRow>> {
    match format {
        OutputFormat::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .map(|r| r.map_err(Error::from))
            .collect(),
        OutputFormat::Json => Ok(serde_json::from_str(text)?),
    }
}

/// Writes the result table to `path`.
pub fn emit_results(
    results: &[ExperimentResult],
    format: OutputFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, format_results(results, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synth {
                n: 200,
                d: 4,
                noise_std: 0.1,
                sin_weight: 1.0,
                seed: 2,
            },
            model: ModelConfig {
                bottom_hidden: vec![6],
                cut_dim: 4,
                ..Default::default()
            },
            training: TrainingConfig {
                epochs: 3,
                batch_size: 32,
                ..Default::default()
            },
            attack: AttackSettings {
                epochs: 2,
                steps_per_batch: 2,
                leak_fraction: 0.05,
                ..Default::default()
            },
            repeats: 2,
            ..Default::default()
        }
    }

    #[test]
    fn layering_precedence() {
        let file = "repeats = 5\n[training]\nepochs = 7\nseed = 3\n[defense]\nkind = \"rle\"\n";
        let c = ExperimentConfig::layered(Some(file), &[]).unwrap();
        assert_eq!((c.repeats, c.training.epochs, c.training.seed), (5, 7, 3));
        assert_eq!(c.training.batch_size, 128);
        assert_eq!(c.defense.kind, DefenseKind::Rle);

        let overrides = vec![
            ("training.epochs".to_string(), "9".to_string()),
            ("defense.kind".to_string(), "mle".to_string()),
            ("dataset.kind".to_string(), "csv".to_string()),
            ("dataset.path".to_string(), "data/x.csv".to_string()),
        ];
        let c = ExperimentConfig::layered(Some(file), &overrides).unwrap();
        assert_eq!((c.repeats, c.training.epochs), (5, 9));
        assert_eq!(c.defense.kind, DefenseKind::Mle);
        assert_eq!(c.dataset, DatasetSource::csv("data/x.csv"));

        assert_eq!(
            ExperimentConfig::layered(None, &[]).unwrap(),
            ExperimentConfig::default()
        );
        assert!(ExperimentConfig::layered(Some("bogus = 1"), &[]).is_err());
        let bad = vec![("training.epochs.x".to_string(), "1".to_string())];
        assert!(ExperimentConfig::layered(None, &bad).is_err());
    }

    #[test]
    fn profile_base_and_dataset_override() {
        let base = ExperimentConfig::paper(PaperProfile::Boston, "boston.csv");
        let file = "[dataset]\nkind = \"csv\"\npath = \"b.csv\"\nlabel = \"MEDV\"\n";
        let c = ExperimentConfig::layered_on(&base, Some(file), None, &[]).unwrap();
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.training.epochs, 100);
        let moved =
            ExperimentConfig::layered_on(&base, Some(file), Some("other.csv"), &[]).unwrap();
        assert_eq!(
            moved.dataset,
            DatasetSource::Csv {
                path: "other.csv".into(),
                label: Some(LabelColumn::Name("MEDV".into())),
                header: true,
            }
        );
        let synth = ExperimentConfig::layered_on(&base, Some(file), Some("synth"), &[]).unwrap();
        assert_eq!(synth.dataset, DatasetSource::default());
        let from_synth =
            ExperimentConfig::layered_on(&ExperimentConfig::default(), Some(file), None, &[])
                .unwrap();
        assert_eq!(from_synth.dataset.name(), "b");
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::paper(PaperProfile::California, "cal.csv");
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.model.bottom_dims(8), vec![8, 16, 16, 8]);
        assert_eq!(c.model.top_dims(1), vec![8, 16, 1]);
    }

    #[test]
    fn secret_column_is_seed_derived_and_in_range() {
        let spec = DefenseSpec::of(DefenseKind::Rle);
        let a = spec.resolve(8, 1).unwrap();
        assert_eq!(a, spec.resolve(8, 1).unwrap());
        let (d, t) = a.extension().unwrap();
        assert_eq!(d, 8);
        assert!(t < 8);
        let fixed = DefenseSpec {
            secret_column: Some(9),
            ..spec
        };
        assert!(fixed.resolve(8, 1).is_err());
    }

    #[test]
    fn repeat_results_are_stable_across_repeat_counts() {
        let mut c = tiny();
        c.repeats = 1;
        let one = run_experiment(&c).unwrap();
        c.repeats = 3;
        let three = run_experiment(&c).unwrap();
        assert_eq!(three.runs.len(), 3);
        assert!(three.runs.contains(&one.runs[0]));
        assert_eq!(three.runs[1].seed, c.training.seed + 1);
    }

    #[test]
    fn zero_noise_and_full_keep_rate_match_no_defense() {
        let c = tiny();
        let none = run_experiment(&c).unwrap();
        let noise = sweep_defense(&c, DefenseKind::LabelNoise, "scale", &[0.0]).unwrap();
        assert_eq!(noise[0].runs, none.runs);
        let gc = sweep_defense(&c, DefenseKind::GradientCompression, "keep_rate", &[1.0]).unwrap();
        assert_eq!(gc[0].runs, none.runs);
        assert!(sweep_defense(&c, DefenseKind::LabelNoise, "scale", &[]).is_err());
        assert!(sweep_defense(&c, DefenseKind::LabelNoise, "bogus", &[1.0]).is_err());
    }

    #[test]
    fn dims_sweep_alternates_variants_and_checks_counts() {
        let c = tiny();
        let out = sweep_extension_dims(&c, &[1, 4]).unwrap();
        let names: Vec<_> = out.iter().map(|r| r.defense.name()).collect();
        assert_eq!(names, ["rle", "mle", "rle", "mle"]);
        let at_cut = out[2].sufficiency.unwrap();
        assert!(at_cut.underdetermined);
        assert!(sweep_extension_dims(&c, &[0]).is_err());
    }

    #[test]
    fn emitted_tables_round_trip() {
        let result = run_experiment(&tiny()).unwrap();
        for format in [OutputFormat::Csv, OutputFormat::Json] {
            let text = format_results(std::slice::from_ref(&result), format).unwrap();
            let rows = parse_rows(&text, format).unwrap();
            assert_eq!(rows, result_rows(&result));
            assert_eq!(rows.len(), 8);
            for r in &rows {
                assert!(r.mae * r.mae <= r.mse + 1e-12);
            }
        }
        assert_eq!(
            format_rows(&[], OutputFormat::Csv).unwrap(),
            RESULT_COLUMNS.join(",") + "\n"
        );
    }
}
