//! Command implementations behind the `vital` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vital::dam::DamMode;
use vital::fingerprint::{
    read_dataset, write_dataset, ApReadings, FingerprintDataset, FingerprintError,
    FingerprintRecord,
};
use vital::io::{atomic_write, sha256_hex};
use vital::synthgen::{generate, profile_manifest, GenConfig, SynthError};
use vital::train_eval::{
    ablate_dam, evaluate, held_out_split, sweep, sweep_csv, train, ModelBundle, SweepGrid,
    TrainConfig, TrainError,
};
use vital::vit::checkpoint::{decode, encode, CheckpointError};
use vital::vit::ModelSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    BadConfig,
    MissingFile,
    FormatError,
    TrainingDivergence,
    Io,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::BadConfig => "bad-config",
            Category::MissingFile => "missing-file",
            Category::FormatError => "format-error",
            Category::TrainingDivergence => "training-divergence",
            Category::Io => "io-error",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Io => 1,
            Category::BadConfig => 3,
            Category::MissingFile => 4,
            Category::FormatError => 5,
            Category::TrainingDivergence => 6,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    fn new(category: Category, message: impl std::fmt::Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }

    /// `error: <category>: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg: String = self
            .message
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect();
        format!("error: {}: {}", self.category.label(), msg)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let category = match e.category() {
            "bad-config" => Category::BadConfig,
            "training-divergence" => Category::TrainingDivergence,
            _ => Category::FormatError,
        };
        CliError::new(category, e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::new(Category::BadConfig, e)
    }
}

impl From<FingerprintError> for CliError {
    fn from(e: FingerprintError) -> Self {
        CliError::new(Category::FormatError, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::new(Category::FormatError, format!("{} ({})", e, e.category()))
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "vital",
    version,
    about = "RSSI fingerprint localization with a vision transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-device fingerprint dataset (CSV).
    Gen(GenArgs),
    /// Train models on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval(EvalArgs),
    /// Train and evaluate over a hyperparameter grid; writes CSV.
    Sweep(SweepArgs),
    /// Paired runs with and without augmentation; writes JSON.
    Ablate(AblateArgs),
    /// Predict the reference point of a single fingerprint.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Train,
    Eval,
}

impl From<ModeArg> for DamMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Train => DamMode::Train,
            ModeArg::Eval => DamMode::Eval,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// DAM mode used while training.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; a `.csv` extension selects the flat CSV layout.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON fingerprint: `{"building_id": 0, "readings": {"<ap>": [dBm, ...]}}`.
    #[arg(long)]
    pub data: PathBuf,
    /// Writes the prediction here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Which records of a dataset a command works on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Selection {
    /// Keep only these devices; all when absent.
    pub devices: Option<Vec<String>>,
    /// Stratified split ratio; no split when absent.
    pub train_ratio: Option<f64>,
    pub split_seed: u64,
    /// Side of the split to use; commands pick a sensible default.
    pub part: Option<Part>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    All,
    Train,
    Test,
}

impl Selection {
    fn apply(&self, data: &FingerprintDataset, default_part: Part) -> Result<FingerprintDataset> {
        let data = match &self.devices {
            Some(d) => data.filter(|r| d.contains(&r.device_id)),
            None => data.clone(),
        };
        let selected = match (self.part.unwrap_or(default_part), self.train_ratio) {
            (Part::All, _) => data,
            (_, None) if self.part.is_none() => data,
            (_, None) => {
                return Err(CliError::new(
                    Category::BadConfig,
                    "data.part needs data.train_ratio",
                ))
            }
            (part, Some(r)) => {
                let (tr, te) = data.split(r, self.split_seed)?;
                if part == Part::Train {
                    tr
                } else {
                    te
                }
            }
        };
        if selected.is_empty() {
            return Err(CliError::new(
                Category::BadConfig,
                "selection matches no records",
            ));
        }
        Ok(selected)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: Selection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub data: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRunConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub grid: SweepGrid,
    #[serde(default)]
    pub devices: Option<Vec<String>>,
    #[serde(default = "default_ratio")]
    pub train_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Train on these devices; all others are held out when given.
    pub base_devices: Option<Vec<String>>,
    pub train_ratio: Option<f64>,
}

fn default_ratio() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerprintInput {
    pub building_id: u32,
    #[serde(default)]
    pub device_id: Option<String>,
    /// Samples per AP; every list must have the same length.
    pub readings: BTreeMap<String, Vec<f64>>,
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::new(
            Category::MissingFile,
            format!("{}: not found", path.display()),
        ),
        _ => CliError::new(Category::Io, format!("{}: {e}", path.display())),
    })
}

fn parse_config<T: DeserializeOwned + Default>(
    path: Option<&Path>,
    inputs: &mut Inputs,
) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => parse_json(p, inputs, Category::BadConfig),
    }
}

fn parse_json<T: DeserializeOwned>(
    path: &Path,
    inputs: &mut Inputs,
    category: Category,
) -> Result<T> {
    let bytes = inputs.read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::new(category, format!("{}: {e}", path.display())))
}

/// Input files read during a run, with their hashes.
#[derive(Default)]
struct Inputs(Vec<(String, String)>);

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_input(path)?;
        self.0
            .push((path.display().to_string(), sha256_hex(&bytes)));
        Ok(bytes)
    }

    fn dataset(&mut self, path: &Path) -> Result<FingerprintDataset> {
        let bytes = self.read(path)?;
        Ok(read_dataset(bytes.as_slice())?)
    }

    fn bundle(&mut self, path: &Path) -> Result<ModelBundle> {
        let bytes = self.read(path)?;
        Ok(ModelBundle::from_checkpoint(decode(&bytes)?)?)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes)
        .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn profiles_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".profiles.json");
    PathBuf::from(s)
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

struct Run {
    command: &'static str,
    started: Instant,
    inputs: Inputs,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: Inputs::default(),
            outputs: Vec::new(),
        }
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write(path, bytes)?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    /// Records what produced the primary artifact at `out`.
    fn finish(self, out: &Path, seed: Option<u64>, config: Value, extra: Value) -> Result<()> {
        let inputs: Vec<Value> = self
            .inputs
            .0
            .iter()
            .map(|(p, h)| json!({ "path": p, "sha256": h }))
            .collect();
        let manifest = json!({
            "command": self.command,
            "version": VERSION,
            "seed": seed,
            "config": config,
            "inputs": inputs,
            "outputs": self.outputs,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
            "details": extra,
        });
        write(&manifest_path(out), &pretty(&manifest))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::new(Category::BadConfig, e))?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut run = Run::new("gen");
    let mut config: GenConfig = parse_config(a.config.as_deref(), &mut run.inputs)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let generated = generate(&config)?;
    let mut csv = Vec::new();
    write_dataset(&generated.dataset, &mut csv)?;
    run.output(&a.out, &csv)?;
    run.output(
        &profiles_path(&a.out),
        &pretty(&profile_manifest(&config, &generated)),
    )?;
    let details = json!({ "records": generated.dataset.len() });
    run.finish(&a.out, Some(config.seed), to_value(&config), details)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train");
    let mut config: TrainRunConfig = parse_config(a.config.as_deref(), &mut run.inputs)?;
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(m) = a.mode {
        config.train.dam.mode = m.into();
    }
    let data = run.inputs.dataset(&a.data)?;
    let data = config.data.apply(&data, Part::Train)?;
    let out = train(&data, &config.model, &config.train)?;
    let bytes = encode(&out.bundle.to_checkpoint()?)?;
    run.output(&a.out, &bytes)?;
    let details = json!({ "records": data.len(), "history": out.history });
    run.finish(&a.out, Some(config.train.seed), to_value(&config), details)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval");
    let config: EvalRunConfig = parse_config(a.config.as_deref(), &mut run.inputs)?;
    let bundle = run.inputs.bundle(&a.model)?;
    let data = run.inputs.dataset(&a.data)?;
    let data = config.data.apply(&data, Part::Test)?;
    let report = evaluate(&bundle, &data)?;
    let is_csv = a
        .out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let body = if is_csv {
        report.to_csv()
    } else {
        report.to_json()
    };
    run.output(&a.out, body.as_bytes())?;
    let details = json!({ "records": data.len() });
    run.finish(
        &a.out,
        Some(bundle.train_config.seed),
        to_value(&config),
        details,
    )
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut run = Run::new("sweep");
    let mut config: SweepRunConfig = parse_json(&a.config, &mut run.inputs, Category::BadConfig)?;
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(m) = a.mode {
        config.train.dam.mode = m.into();
    }
    let data = run.inputs.dataset(&a.data)?;
    let data = match &config.devices {
        Some(d) => data.filter(|r| d.contains(&r.device_id)),
        None => data,
    };
    let (tr, te) = data.split(config.train_ratio, config.train.seed)?;
    let rows = sweep(&tr, &te, &config.grid, &config.model, &config.train, a.jobs)?;
    run.output(&a.out, sweep_csv(&rows).as_bytes())?;
    let details = json!({ "points": rows.len(), "jobs": a.jobs });
    run.finish(&a.out, Some(config.train.seed), to_value(&config), details)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut run = Run::new("ablate");
    let mut config: AblateRunConfig = parse_config(a.config.as_deref(), &mut run.inputs)?;
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    let data = run.inputs.dataset(&a.data)?;
    let ratio = config.train_ratio.unwrap_or(default_ratio());
    let (tr, te) = match &config.base_devices {
        Some(base) => {
            let ext: Vec<String> = data
                .devices()
                .into_iter()
                .filter(|d| !base.contains(d))
                .collect();
            let split = held_out_split(&data, base, &ext, ratio, config.train.seed)?;
            (split.train, split.extended)
        }
        None => data.split(ratio, config.train.seed)?,
    };
    let ablation = ablate_dam(&tr, &te, &config.model, &config.train)?;
    run.output(&a.out, &pretty(&ablation))?;
    run.finish(
        &a.out,
        Some(config.train.seed),
        to_value(&config),
        Value::Null,
    )
}

fn fingerprint_record(input: FingerprintInput) -> Result<FingerprintRecord> {
    let n = input.readings.values().next().map_or(0, Vec::len);
    if n == 0 || input.readings.values().any(|v| v.len() != n) {
        return Err(CliError::new(
            Category::FormatError,
            "every AP needs the same, non-zero number of samples",
        ));
    }
    Ok(FingerprintRecord {
        building_id: input.building_id,
        rp_id: 0,
        device_id: input.device_id.unwrap_or_default(),
        sample_ids: (0..n as u32).collect(),
        readings: input
            .readings
            .into_iter()
            .map(|(ap, samples)| ApReadings {
                ap: ap.as_str().into(),
                samples,
            })
            .collect(),
    })
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut run = Run::new("predict");
    let bundle = run.inputs.bundle(&a.model)?;
    let input: FingerprintInput = parse_json(&a.data, &mut run.inputs, Category::FormatError)?;
    let record = fingerprint_record(input)?;
    let started = Instant::now();
    let rp = bundle.predict(&record.reduce()?)?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;
    let body = pretty(&json!({
        "building_id": rp.building_id,
        "rp_id": rp.rp_id,
        "x": rp.x,
        "y": rp.y,
    }));
    match &a.out {
        Some(out) => {
            run.output(out, &body)?;
            run.finish(out, None, Value::Null, json!({ "latency_ms": latency_ms }))
        }
        None => {
            print!("{}", String::from_utf8_lossy(&body));
            Ok(())
        }
    }
}
