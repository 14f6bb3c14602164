//! `bindlogic`: build datasets, train, attribute, score and attack from the
//! command line. Every artifact gets a `<artifact>.manifest.json`.

mod config;
mod manifest;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bindlogic::attack::{search, AttackConfig, AttackError, Guidance};
use bindlogic::attribution::{
    attribute_dataset, heatmap, read_attributions, write_attributions, AttributionError, AttributionRecord, IgConfig,
    PathRule,
};
use bindlogic::dataset::{build_dataset, read_dataset, write_dataset, BuildConfig, Dataset, DatasetError, Split};
use bindlogic::logic::{default_logics, ground_truth, parse_logic, parse_logic_file, LogicExpr, DEFAULT_LABELING_CAP};
use bindlogic::metrics::{attribution_auc_dataset, AttributionAucReport, AucInput, MetricsError};
use bindlogic::molgraph::{parse_smiles, read_library, LibraryError};
use bindlogic::nnet::{
    example_tensor, forward, load_checkpoint, save_checkpoint, train_traced, BatchScheme, NnetError, TrainConfig,
};
use bindlogic::smarts::default_fragments;
use bindlogic::synth::{generate, library_text, SynthConfig, SynthError};
use bindlogic::ModelParamsF64;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "bindlogic", version, about = "Binding-logic audit pipeline")]
struct Cli {
    /// Flat `key = value` file; keys are long flag names, command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic SMILES library.
    #[command(args_override_self = true)]
    SynthLibrary(SynthArgs),
    /// Sample a negation-balanced dataset for one logic.
    #[command(args_override_self = true)]
    BuildDataset(BuildArgs),
    /// Train the network on the train split.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Model ROC AUC on one split.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Integrated Gradients for every molecule of one split.
    #[command(args_override_self = true)]
    Attribute(AttributeArgs),
    /// Score attributions against the logic's ground truth.
    #[command(args_override_self = true)]
    AttributionAuc(AucArgs),
    /// Search for logic-preserving edits that flip the prediction.
    #[command(args_override_self = true)]
    Attack(AttackArgs),
    /// build-dataset, train, evaluate, attribute and attribution-auc in one directory.
    #[command(args_override_self = true)]
    Pipeline(PipelineArgs),
    /// Summarize pipeline directories, one row per logic.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthLibrary(_) => "synth-library",
            Command::BuildDataset(_) => "build-dataset",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Attribute(_) => "attribute",
            Command::AttributionAuc(_) => "attribution-auc",
            Command::Attack(_) => "attack",
            Command::Pipeline(_) => "pipeline",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inclusion probability of each functional group.
    #[arg(long, default_value_t = 0.3)]
    p: f64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct LogicArgs {
    /// Logic file (`ID<TAB>LOGIC`); the shipped logics when omitted.
    #[arg(long, value_name = "FILE")]
    logics: Option<PathBuf>,
    #[arg(long, value_name = "ID")]
    logic_id: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct DatasetOpts {
    #[arg(long, default_value_t = 150)]
    per_stratum: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take every molecule of an undersized stratum instead of failing.
    #[arg(long)]
    allow_short: bool,
    /// Skip malformed library lines instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BuildArgs {
    #[arg(long, value_name = "FILE")]
    library: PathBuf,
    #[command(flatten)]
    logic: LogicArgs,
    #[command(flatten)]
    opts: DatasetOpts,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainOpts {
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 99)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value = "three_way", value_name = "three_way|four_way")]
    scheme: String,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    message_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    label_smoothing: f64,
}

impl TrainOpts {
    fn to_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let scheme: BatchScheme = self.scheme.parse().map_err(CliError::Usage)?;
        Ok(TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed,
            scheme,
            hidden: self.hidden,
            message_steps: self.message_steps,
            label_smoothing: self.label_smoothing,
            ..TrainConfig::default()
        })
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    opts: TrainOpts,
    /// Checkpoint path.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EvaluateArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    #[arg(long, default_value = "heldout", value_name = "train|heldout")]
    split: String,
    /// JSON output; printed to stdout when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct IgOpts {
    /// Integrated Gradients path steps.
    #[arg(long, default_value_t = 90)]
    ig_steps: usize,
    #[arg(long, default_value = "right_riemann", value_name = "right_riemann|midpoint")]
    rule: String,
}

impl IgOpts {
    fn to_config(&self) -> Result<IgConfig, CliError> {
        let rule: PathRule = self.rule.parse().map_err(CliError::Usage)?;
        Ok(IgConfig {
            steps: self.ig_steps,
            rule,
        })
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct AttributeArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    #[arg(long, default_value = "heldout", value_name = "train|heldout")]
    split: String,
    #[command(flatten)]
    ig: IgOpts,
    /// Also write one heatmap JSON per molecule into this directory.
    #[arg(long, value_name = "DIR")]
    heatmaps: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct AucArgs {
    #[arg(long, value_name = "FILE")]
    attributions: PathBuf,
    /// Dataset whose metadata names the logic; only its molecules are scored.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    #[arg(long, value_name = "FILE")]
    logics: Option<PathBuf>,
    /// Required when the dataset has no metadata sidecar.
    #[arg(long, value_name = "ID")]
    logic_id: Option<String>,
    #[arg(long, default_value_t = DEFAULT_LABELING_CAP)]
    labeling_cap: usize,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct AttackArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    #[arg(long, value_name = "FILE")]
    logics: Option<PathBuf>,
    #[arg(long, value_name = "ID")]
    logic_id: Option<String>,
    /// Reuse these attributions instead of recomputing them.
    #[arg(long, value_name = "FILE")]
    attributions: Option<PathBuf>,
    #[arg(long, default_value = "heldout", value_name = "train|heldout")]
    split: String,
    #[arg(long, default_value_t = 3)]
    max_edits: usize,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    result_cap: usize,
    /// Keep the initial attributions for every beam state.
    #[arg(long)]
    no_reattribute: bool,
    /// Rank moves uniformly at random with this seed instead of by attribution.
    #[arg(long, value_name = "SEED")]
    random_guidance: Option<u64>,
    #[command(flatten)]
    ig: IgOpts,
    /// Findings JSONL.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PipelineArgs {
    #[arg(long, value_name = "FILE")]
    library: PathBuf,
    #[command(flatten)]
    logic: LogicArgs,
    #[command(flatten)]
    dataset: DatasetOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    ig: IgOpts,
    /// Also run the attack search on the heldout split.
    #[arg(long)]
    attack: bool,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ReportArgs {
    /// A pipeline directory or a directory of pipeline directories.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::ZeroPerStratum => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NnetError> for CliError {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            NnetError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::NonFiniteGradient { .. }
            | AttributionError::DegenerateSum { .. }
            | AttributionError::AllFailed(_) => CliError::Numeric(e.to_string()),
            AttributionError::ZeroSteps => CliError::Usage(e.to_string()),
            AttributionError::Model(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NonFinite => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Model(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LibraryError> for CliError {
    fn from(e: LibraryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn resolve_logic(logics: Option<&Path>, id: &str) -> Result<LogicExpr, CliError> {
    let all = match logics {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_error(path))?;
            parse_logic_file(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => default_logics(),
    };
    all.into_iter()
        .find(|l| l.id == id)
        .map(|l| l.expr.with_fragment_names(&default_fragments()))
        .ok_or_else(|| CliError::Usage(format!("logic id `{id}` not found")))
}

/// The dataset's own logic when it has metadata, else the `--logic-id` lookup.
fn dataset_logic(dataset: &Dataset, logics: Option<&Path>, id: Option<&str>) -> Result<LogicExpr, CliError> {
    match (&dataset.meta, id) {
        (_, Some(id)) => resolve_logic(logics, id),
        (Some(meta), None) => parse_logic(&meta.logic).map_err(|e| CliError::Data(format!("dataset metadata logic: {e}"))),
        (None, None) => Err(CliError::Usage("--logic-id is required for a dataset without metadata".into())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_error(path))
}

fn synth_library(args: &SynthArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.seed = Some(args.seed);
    let mols = generate(&SynthConfig::standard(args.n, args.seed, args.p))?;
    fs::write(&args.out, library_text(&mols)).map_err(io_error(&args.out))?;
    m.output(&args.out);
    Ok(())
}

fn build(library: &Path, logic: &LogicArgs, opts: &DatasetOpts, out: &Path, m: &mut RunManifest) -> Result<Dataset, CliError> {
    m.seed = Some(opts.seed);
    m.input(library);
    if let Some(p) = &logic.logics {
        m.input(p);
    }
    let expr = resolve_logic(logic.logics.as_deref(), &logic.logic_id)?;
    let lib = read_library(library, opts.lenient)?;
    if !lib.skipped.is_empty() {
        log::warn!("skipped {} malformed library lines", lib.skipped.len());
    }
    let cfg = BuildConfig {
        per_stratum: opts.per_stratum,
        seed: opts.seed,
        allow_short: opts.allow_short,
    };
    let dataset = build_dataset(&lib.molecules, &logic.logic_id, &expr, &cfg)?;
    write_dataset(out, &dataset)?;
    m.output(out);
    m.output(&bindlogic::dataset::meta_path(out));
    log::info!("wrote {} examples to {}", dataset.examples.len(), out.display());
    Ok(dataset)
}

fn train(dataset_path: &Path, opts: &TrainOpts, seed: u64, out: &Path, m: &mut RunManifest) -> Result<ModelParamsF64, CliError> {
    m.seed = Some(seed);
    m.input(dataset_path);
    let dataset = read_dataset(dataset_path)?;
    let cfg = opts.to_config(seed)?;
    let (params, trace) = train_traced::<f64>(&dataset, &cfg)?;
    save_checkpoint(&params, out)?;
    m.output(out);
    if let Some(last) = trace.last() {
        m.summary.insert("final_loss".into(), serde_json::json!(last));
    }
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    label: bool,
    prediction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub model_auc: f64,
    pub n_examples: usize,
    pub n_positive: usize,
    predictions: Vec<PredictionRow>,
}

fn evaluate(ckpt: &Path, dataset_path: &Path, split: Split, m: &mut RunManifest) -> Result<Evaluation, CliError> {
    m.input(ckpt);
    m.input(dataset_path);
    let params = load_checkpoint::<f64>(ckpt)?;
    let dataset = read_dataset(dataset_path)?;
    let examples: Vec<_> = dataset.split(split).collect();
    let predictions = examples
        .par_iter()
        .map(|e| {
            let x = example_tensor::<f64>(&e.id, &e.smiles)?;
            Ok(PredictionRow {
                id: e.id.clone(),
                label: e.label,
                prediction: forward(&params, &x)?.probability,
            })
        })
        .collect::<Result<Vec<_>, NnetError>>()?;
    let scores: Vec<f64> = predictions.iter().map(|p| p.prediction).collect();
    let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
    let model_auc = bindlogic::metrics::roc_auc(&scores, &labels)
        .map_err(|e| CliError::Data(format!("split {split}: {e}")))?;
    m.summary.insert("model_auc".into(), serde_json::json!(model_auc));
    Ok(Evaluation {
        split,
        model_auc,
        n_examples: predictions.len(),
        n_positive: labels.iter().filter(|&&l| l).count(),
        predictions,
    })
}

fn attribute(
    ckpt: &Path,
    dataset_path: &Path,
    split: Split,
    ig: &IgOpts,
    heatmaps: Option<&Path>,
    out: &Path,
    m: &mut RunManifest,
) -> Result<Vec<AttributionRecord>, CliError> {
    m.input(ckpt);
    m.input(dataset_path);
    let params = load_checkpoint::<f64>(ckpt)?;
    let dataset = read_dataset(dataset_path)?;
    let records = attribute_dataset(&params, &dataset, split, &ig.to_config()?)?;
    write_attributions(out, &records)?;
    m.output(out);
    let excluded = records.iter().filter(|r| r.exclusion.is_some()).count();
    m.summary.insert("n_molecules".into(), serde_json::json!(records.len()));
    m.summary.insert("n_excluded".into(), serde_json::json!(excluded));
    if let Some(dir) = heatmaps {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        for r in records.iter().filter(|r| r.exclusion.is_none()) {
            let mol = parse_smiles(&r.smiles, &r.id).map_err(|e| CliError::Data(format!("{}: {e}", r.id)))?;
            let path = dir.join(format!("{}.heatmap.json", r.id));
            write_json(&path, &heatmap(&mol, r))?;
        }
    }
    Ok(records)
}

fn attribution_auc(
    attributions: &Path,
    dataset_path: &Path,
    logics: Option<&Path>,
    logic_id: Option<&str>,
    cap: usize,
    m: &mut RunManifest,
) -> Result<AttributionAucReport, CliError> {
    m.input(attributions);
    m.input(dataset_path);
    let dataset = read_dataset(dataset_path)?;
    let expr = dataset_logic(&dataset, logics, logic_id)?;
    let ids: HashSet<&str> = dataset.examples.iter().map(|e| e.id.as_str()).collect();
    let records: Vec<AttributionRecord> = read_attributions(attributions)?
        .into_iter()
        .filter(|r| ids.contains(r.id.as_str()))
        .collect();
    let truths: Vec<Result<_, String>> = records
        .par_iter()
        .map(|r| {
            let mol = parse_smiles(&r.smiles, &r.id).map_err(|e| e.to_string())?;
            ground_truth(&expr, &mol, cap).map_err(|e| e.to_string())
        })
        .collect();
    let inputs: Vec<AucInput<'_, f64>> = records
        .iter()
        .zip(&truths)
        .map(|(r, gt)| AucInput {
            id: &r.id,
            scores: r.scores(),
            ground_truth: gt.as_ref().map_err(|e| e.clone()),
        })
        .collect();
    let report = attribution_auc_dataset(&inputs)?;
    m.summary.insert("dataset_mean".into(), serde_json::json!(report.dataset_mean));
    m.summary.insert("n_excluded".into(), serde_json::json!(report.n_excluded));
    Ok(report)
}

fn attack(args: &AttackArgs, m: &mut RunManifest) -> Result<(), CliError> {
    m.input(&args.ckpt);
    m.input(&args.dataset);
    let params = load_checkpoint::<f64>(&args.ckpt)?;
    let dataset = read_dataset(&args.dataset)?;
    let expr = dataset_logic(&dataset, args.logics.as_deref(), args.logic_id.as_deref())?;
    let split = parse_split(&args.split)?;
    let ig = args.ig.to_config()?;
    let records = match &args.attributions {
        Some(path) => {
            m.input(path);
            read_attributions(path)?
        }
        None => attribute_dataset(&params, &dataset, split, &ig)?,
    };
    let by_id: BTreeMap<&str, &AttributionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let guidance = match args.random_guidance {
        Some(seed) => {
            m.seed = Some(seed);
            Guidance::Random { seed }
        }
        None => Guidance::Attribution,
    };
    let cfg = AttackConfig {
        max_edits: args.max_edits,
        beam: args.beam,
        result_cap: args.result_cap,
        reattribute: !args.no_reattribute,
        ig,
        guidance,
        ..AttackConfig::default()
    };
    let targets: Vec<_> = dataset
        .split(split)
        .filter_map(|e| by_id.get(e.id.as_str()).filter(|r| r.exclusion.is_none()).map(|r| (e, *r)))
        .collect();
    let outcomes: Vec<_> = targets
        .par_iter()
        .map(|(e, r)| {
            let mol = parse_smiles(&e.smiles, &e.id).map_err(|err| CliError::Data(format!("{}: {err}", e.id)))?;
            match search(&params, &mol, &expr, &r.aggregated, &cfg) {
                Ok(o) => Ok(Some(o)),
                Err(AttackError::NotCorrectlyClassified { .. }) => Ok(None),
                Err(err) => Err(CliError::from(err)),
            }
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let attacked = outcomes.iter().flatten().count();
    let expansions: usize = outcomes.iter().flatten().map(|o| o.expansions).sum();
    let findings: Vec<_> = outcomes.into_iter().flatten().flat_map(|o| o.findings).collect();
    let mut text = String::new();
    for f in &findings {
        text.push_str(&serde_json::to_string(f).expect("findings serialize"));
        text.push('\n');
    }
    fs::write(&args.out, text).map_err(io_error(&args.out))?;
    m.output(&args.out);
    m.summary.insert("molecules_attacked".into(), serde_json::json!(attacked));
    m.summary.insert("expansions".into(), serde_json::json!(expansions));
    m.summary.insert("findings".into(), serde_json::json!(findings.len()));
    log::info!("{} findings from {attacked} molecules", findings.len());
    Ok(())
}

/// File names inside a pipeline directory.
pub mod layout {
    pub const DATASET: &str = "dataset.jsonl";
    pub const DATASET_META: &str = "dataset.jsonl.meta.json";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const EVALUATION: &str = "evaluation.json";
    pub const ATTRIBUTIONS: &str = "attributions.jsonl";
    pub const AUC_REPORT: &str = "attribution_auc.json";
    pub const FINDINGS: &str = "findings.jsonl";
    pub const MANIFEST: &str = "manifest.json";
}

fn pipeline(args: &PipelineArgs, top: &mut RunManifest) -> Result<(), CliError> {
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    top.seed = Some(args.dataset.seed);
    let dataset_path = dir.join(layout::DATASET);
    let ckpt = dir.join(layout::CHECKPOINT);
    let attributions = dir.join(layout::ATTRIBUTIONS);

    let mut step = top.child("build-dataset");
    build(&args.library, &args.logic, &args.dataset, &dataset_path, &mut step)?;
    top.absorb(step.finish(&dataset_path)?);

    let mut step = top.child("train");
    train(&dataset_path, &args.train, args.dataset.seed, &ckpt, &mut step)?;
    top.absorb(step.finish(&ckpt)?);

    let eval_path = dir.join(layout::EVALUATION);
    let mut step = top.child("evaluate");
    let evaluation = evaluate(&ckpt, &dataset_path, Split::Heldout, &mut step)?;
    write_json(&eval_path, &evaluation)?;
    step.output(&eval_path);
    top.absorb(step.finish(&eval_path)?);

    let mut step = top.child("attribute");
    attribute(&ckpt, &dataset_path, Split::Heldout, &args.ig, None, &attributions, &mut step)?;
    top.absorb(step.finish(&attributions)?);

    let auc_path = dir.join(layout::AUC_REPORT);
    let mut step = top.child("attribution-auc");
    let report = attribution_auc(&attributions, &dataset_path, None, None, DEFAULT_LABELING_CAP, &mut step)?;
    write_json(&auc_path, &report)?;
    step.output(&auc_path);
    top.absorb(step.finish(&auc_path)?);

    if args.attack {
        let findings = dir.join(layout::FINDINGS);
        let attack_args = AttackArgs {
            ckpt: ckpt.clone(),
            dataset: dataset_path.clone(),
            logics: None,
            logic_id: None,
            attributions: Some(attributions.clone()),
            split: "heldout".into(),
            max_edits: 3,
            beam: 8,
            result_cap: 20,
            no_reattribute: false,
            random_guidance: None,
            ig: args.ig.clone(),
            out: findings.clone(),
        };
        let mut step = top.child("attack");
        attack(&attack_args, &mut step)?;
        top.absorb(step.finish(&findings)?);
    }
    println!(
        "logic {}: model AUC {:.4}, attribution-AUC {}, excluded {}",
        args.logic.logic_id,
        evaluation.model_auc,
        report.dataset_mean.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report.n_excluded
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = serde_json::to_value(command_args(&cli.command)).expect("arguments serialize");
    let mut m = RunManifest::new(cli.command.name(), config, rayon::current_num_threads());
    let artifact: Option<PathBuf> = match &cli.command {
        Command::SynthLibrary(a) => {
            synth_library(a, &mut m)?;
            Some(a.out.clone())
        }
        Command::BuildDataset(a) => {
            build(&a.library, &a.logic, &a.opts, &a.out, &mut m)?;
            Some(a.out.clone())
        }
        Command::Train(a) => {
            train(&a.dataset, &a.opts, a.seed, &a.out, &mut m)?;
            Some(a.out.clone())
        }
        Command::Evaluate(a) => {
            let ev = evaluate(&a.ckpt, &a.dataset, parse_split(&a.split)?, &mut m)?;
            match &a.out {
                Some(out) => {
                    write_json(out, &ev)?;
                    m.output(out);
                }
                None => println!("{}", serde_json::to_string_pretty(&ev).expect("evaluation serializes")),
            }
            eprintln!("{} model AUC {:.4} over {} examples", ev.split, ev.model_auc, ev.n_examples);
            a.out.clone()
        }
        Command::Attribute(a) => {
            attribute(&a.ckpt, &a.dataset, parse_split(&a.split)?, &a.ig, a.heatmaps.as_deref(), &a.out, &mut m)?;
            Some(a.out.clone())
        }
        Command::AttributionAuc(a) => {
            let report = attribution_auc(
                &a.attributions,
                &a.dataset,
                a.logics.as_deref(),
                a.logic_id.as_deref(),
                a.labeling_cap,
                &mut m,
            )?;
            match &a.out {
                Some(out) => {
                    write_json(out, &report)?;
                    m.output(out);
                }
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
            a.out.clone()
        }
        Command::Attack(a) => {
            attack(a, &mut m)?;
            Some(a.out.clone())
        }
        Command::Pipeline(a) => {
            pipeline(a, &mut m)?;
            Some(a.out_dir.join(layout::MANIFEST))
        }
        Command::Report(a) => {
            let rows = report::collect(&a.out_dir)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
            } else {
                print!("{}", report::table(&rows));
            }
            None
        }
    };
    if let Some(path) = artifact {
        if matches!(cli.command, Command::Pipeline(_)) {
            m.write_to(&path)?;
        } else {
            m.finish(&path)?;
        }
    }
    Ok(())
}

fn command_args(c: &Command) -> serde_json::Value {
    let v = match c {
        Command::SynthLibrary(a) => serde_json::to_value(a),
        Command::BuildDataset(a) => serde_json::to_value(a),
        Command::Train(a) => serde_json::to_value(a),
        Command::Evaluate(a) => serde_json::to_value(a),
        Command::Attribute(a) => serde_json::to_value(a),
        Command::AttributionAuc(a) => serde_json::to_value(a),
        Command::Attack(a) => serde_json::to_value(a),
        Command::Pipeline(a) => serde_json::to_value(a),
        Command::Report(a) => serde_json::to_value(a),
    };
    v.expect("arguments serialize")
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let argv = match config::merge_config(&raw) {
        Ok(argv) => argv,
        Err(msg) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", config::usage());
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is configured once");
    }
    let started = Instant::now();
    let result = run(&cli);
    log::info!("{} finished in {:.2?}", cli.command.name(), started.elapsed());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("\n{}", config::usage());
            }
            ExitCode::from(e.exit_code())
        }
    }
}
