//! Command-line front end: `stats`, `prune`, `apply` and `report`.
//!
//! Every failure maps to a fixed exit code (see [`exit`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::graph::{apply_plan_shapes, reduction_report, GraphError, ModelGraph, ReductionReport};
use crate::plan::{PlanIoError, PruningPlan};
use crate::select::{run_pruning, DfsMode, Grouping, PruneConfig, SelectError};
use crate::stats::{compute_layer_stats, stats_report, stats_report_json, FeatureStats, StatsError, DEFAULT_TOPK};
use crate::surgery::{apply_plan_weights, verify_bundle, SurgeryError, WeightBundle};
use crate::tensorio::{atomic_write, load_activations, ActivationSet, Manifest, TensorIoError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Bad command line (emitted by clap).
    pub const USAGE: i32 = 2;
    pub const MISSING_FILE: i32 = 3;
    /// Unparseable NPY, JSON or graph schema.
    pub const MALFORMED_INPUT: i32 = 4;
    /// Tensor, manifest or graph shapes disagree.
    pub const SHAPE_MISMATCH: i32 = 5;
    /// Statistics undefined for the given activations.
    pub const STATS: i32 = 6;
    /// Invalid configuration, empty threshold pool, missing activations or
    /// residual group conflicts.
    pub const SELECTION: i32 = 7;
    /// Weight bundle inconsistent with graph or plan.
    pub const WEIGHTS: i32 = 8;
    /// Could not write outputs.
    pub const IO_FAILURE: i32 = 9;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Plan(#[from] PlanIoError),
    #[error("cannot read config {}: {source}", path.display())]
    ConfigIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {}: {source}", path.display())]
    ConfigJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn tensor_code(e: &TensorIoError) -> i32 {
    match e {
        TensorIoError::MissingFile(_) => exit::MISSING_FILE,
        TensorIoError::Io { .. } => exit::IO_FAILURE,
        TensorIoError::MalformedHeader(_)
        | TensorIoError::UnsupportedDtype(_)
        | TensorIoError::TruncatedData { .. }
        | TensorIoError::TrailingData(_)
        | TensorIoError::Json { .. } => exit::MALFORMED_INPUT,
        TensorIoError::InvalidShape { .. } | TensorIoError::ShapeMismatch(_) | TensorIoError::Manifest(_) => {
            exit::SHAPE_MISMATCH
        }
    }
}

fn graph_code(e: &GraphError) -> i32 {
    match e {
        GraphError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
        GraphError::Io { .. } => exit::IO_FAILURE,
        GraphError::Schema(_) => exit::MALFORMED_INPUT,
        GraphError::ChannelMismatch { .. } | GraphError::CycleDetected(_) | GraphError::PlanMismatch(_) => {
            exit::SHAPE_MISMATCH
        }
        GraphError::GroupInconsistency(_) | GraphError::DanglingLayer(_) => exit::SELECTION,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tensor(e) => tensor_code(e),
            CliError::Graph(e) => graph_code(e),
            CliError::Stats(_) => exit::STATS,
            CliError::Select(SelectError::Stats(_)) => exit::STATS,
            CliError::Select(SelectError::ActivationShape(_)) => exit::SHAPE_MISMATCH,
            CliError::Select(_) => exit::SELECTION,
            CliError::Surgery(SurgeryError::Tensor(e)) => tensor_code(e),
            CliError::Surgery(SurgeryError::Plan(e)) => graph_code(e),
            CliError::Surgery(SurgeryError::Manifest { .. }) => exit::MALFORMED_INPUT,
            CliError::Surgery(_) => exit::WEIGHTS,
            CliError::Plan(PlanIoError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                exit::MISSING_FILE
            }
            CliError::Plan(PlanIoError::Io { .. }) => exit::IO_FAILURE,
            CliError::Plan(_) => exit::MALFORMED_INPUT,
            CliError::ConfigIo { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
            CliError::ConfigIo { .. } => exit::IO_FAILURE,
            CliError::ConfigJson { .. } => exit::MALFORMED_INPUT,
            CliError::Write { .. } => exit::IO_FAILURE,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "featprune",
    version,
    about = "Diversity- and similarity-aware CNN filter pruning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-channel M-std / M-corr / Top-k-corr report.
    Stats(StatsArgs),
    /// Select channels and write plan.json, the pruned graph and a reduction report.
    Prune(PruneArgs),
    /// Slice a weight bundle according to a plan.
    Apply(ApplyArgs),
    /// Parameter/FLOPs reduction of a plan against a graph.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DfsModeArg {
    Mean,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupingArg {
    Global,
    Residual,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the manifest's `model_graph`.
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    pub topk: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DfsModeArg::Percentile)]
    pub dfs_mode: DfsModeArg,
    #[arg(long, default_value_t = 40.0)]
    pub dfs_percentile: f64,
    #[arg(long, default_value_t = 0.85)]
    pub nu: f64,
    #[arg(long, value_enum, default_value_t = GroupingArg::Global)]
    pub grouping: GroupingArg,
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    pub topk: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// JSON file of selection settings; replaces the individual selection flags.
    #[arg(long = "config", conflicts_with_all = ["dfs_mode", "dfs_percentile", "nu", "grouping", "topk"])]
    pub config_file: Option<PathBuf>,
}

impl PruneArgs {
    pub fn config(&self) -> Result<PruneConfig> {
        if let Some(path) = &self.config_file {
            let text = fs::read_to_string(path).map_err(|source| CliError::ConfigIo {
                path: path.clone(),
                source,
            })?;
            return serde_json::from_str(&text).map_err(|source| CliError::ConfigJson {
                path: path.clone(),
                source,
            });
        }
        Ok(PruneConfig {
            dfs_mode: match self.dfs_mode {
                DfsModeArg::Mean => DfsMode::Mean,
                DfsModeArg::Percentile => DfsMode::Percentile,
            },
            dfs_percentile: self.dfs_percentile,
            nu: self.nu,
            grouping: match self.grouping {
                GroupingArg::Global => Grouping::Global,
                GroupingArg::Residual => Grouping::ResidualTwoGroup,
            },
            topk_k: self.topk,
        })
    }
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// weights_manifest.json or the directory holding it.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

pub const STATS_CSV: &str = "stats.csv";
pub const STATS_JSON: &str = "stats.json";
pub const PLAN_JSON: &str = "plan.json";
pub const PRUNED_GRAPH_JSON: &str = "pruned_graph.json";
pub const REPORT_STEM: &str = "reduction_report";

fn write_output(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    atomic_write(&path, text.as_bytes()).map_err(|source| CliError::Write {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Loads the manifest, the graph it refers to (or `--graph`) and all
/// activations, validating the manifest against the graph.
pub fn load_inputs(input: &InputArgs) -> Result<(ModelGraph, BTreeMap<String, ActivationSet>)> {
    let manifest = Manifest::from_path(&input.manifest)?;
    let graph_path = input.graph.clone().unwrap_or_else(|| manifest.model_graph_path());
    let graph = ModelGraph::from_path(&graph_path)?;
    manifest.validate_against(&graph)?;
    let acts = load_activations(&manifest)?;
    Ok((graph, acts))
}

pub fn cmd_stats(args: &StatsArgs) -> Result<PathBuf> {
    let (graph, acts) = load_inputs(&args.input)?;
    // Report in graph order, not manifest order.
    let ordered: Vec<&ActivationSet> = graph.layers().iter().filter_map(|l| acts.get(&l.id)).collect();
    let stats = ordered
        .iter()
        .map(|a| compute_layer_stats(a, args.topk))
        .collect::<Result<Vec<FeatureStats>, _>>()?;
    match args.format {
        Format::Csv => write_output(&args.out, STATS_CSV, &stats_report(&stats)?),
        Format::Json => {
            let doc = stats_report_json(&stats)?;
            let text = serde_json::to_string_pretty(&doc).expect("stats serialize") + "\n";
            write_output(&args.out, STATS_JSON, &text)
        }
    }
}

fn write_report(dir: &Path, report: &ReductionReport, format: Format) -> Result<PathBuf> {
    match format {
        Format::Csv => write_output(dir, &format!("{REPORT_STEM}.csv"), &report.to_csv()),
        Format::Json => {
            let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
            write_output(dir, &format!("{REPORT_STEM}.json"), &text)
        }
    }
}

pub struct PruneOutput {
    pub plan: PruningPlan,
    pub report: ReductionReport,
}

pub fn cmd_prune(args: &PruneArgs) -> Result<PruneOutput> {
    let config = args.config()?;
    config.validate()?;
    let (graph, acts) = load_inputs(&args.input)?;
    let plan = run_pruning(&graph, &acts, &config)?;
    let pruned = apply_plan_shapes(&graph, &plan)?;
    let report = reduction_report(&graph, &pruned);
    write_output(&args.out, PLAN_JSON, &(plan.to_json_pretty() + "\n"))?;
    write_output(&args.out, PRUNED_GRAPH_JSON, &(pruned.to_json_pretty() + "\n"))?;
    write_report(&args.out, &report, args.format)?;
    Ok(PruneOutput { plan, report })
}

pub fn cmd_apply(args: &ApplyArgs) -> Result<WeightBundle> {
    let graph = ModelGraph::from_path(&args.graph)?;
    let plan = PruningPlan::from_path(&args.plan)?;
    let bundle = WeightBundle::load(&args.weights)?;
    let pruned_graph = apply_plan_shapes(&graph, &plan)?;
    let pruned = apply_plan_weights(&bundle, &graph, &plan)?;
    let problems = verify_bundle(&pruned, &pruned_graph);
    if !problems.is_empty() {
        return Err(SurgeryError::ShapeMismatch(problems).into());
    }
    pruned.save(&args.out)?;
    Ok(pruned)
}

pub fn cmd_report(args: &ReportArgs) -> Result<ReductionReport> {
    let graph = ModelGraph::from_path(&args.graph)?;
    let plan = PruningPlan::from_path(&args.plan)?;
    let pruned = apply_plan_shapes(&graph, &plan)?;
    let report = reduction_report(&graph, &pruned);
    write_report(&args.out, &report, args.format)?;
    Ok(report)
}

/// Runs one parsed command line, printing a short summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(a) => {
            let path = cmd_stats(a)?;
            println!("wrote {}", path.display());
        }
        Command::Prune(a) => {
            let out = cmd_prune(a)?;
            let beta: Vec<String> = out.plan.beta.iter().map(|b| format!("{b:.6}")).collect();
            println!("beta = [{}], nu = {}", beta.join(", "), out.plan.config.nu);
            println!("{}", out.report);
            println!("wrote {}", a.out.join(PLAN_JSON).display());
        }
        Command::Apply(a) => {
            let bundle = cmd_apply(a)?;
            println!("wrote {} layer entries to {}", bundle.entries.len(), a.out.display());
        }
        Command::Report(a) => {
            println!("{}", cmd_report(a)?);
        }
    }
    Ok(())
}
