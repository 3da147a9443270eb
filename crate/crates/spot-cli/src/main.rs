use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use spot_core::analysis::{
    correlation_report, export_clustered_heatmap, export_heatmap, oracle_search, read_heatmap,
    relative_error_reduction, rer_matrix, BASELINE,
};
use spot_core::experiment::{
    library_config, points_from_csv, points_to_csv, read_target_embedding, MixtureCheckpoint,
    CONFIG_FILE, TASK_SIMILARITY_FILE,
};
use spot_core::retrieval::rank_library;
use spot_core::{
    open_library, write_checkpoint, Experiment, ExperimentConfig, ExperimentError, Matrix,
    SimilarityMetric, TransferMethod, TransferTable,
};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;

/// Soft prompt transfer experiments on a toy frozen model.
#[derive(Debug, Parser)]
#[command(name = "spot", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default toy experiment config as JSON.
    DefaultConfig,
    /// Tune prompts on every source task and seed; write checkpoints and the manifest.
    TrainSource(TrainSourceArgs),
    /// Rebuild the manifest keys at embed_step and write target embeddings.
    Embed(EmbedArgs),
    /// Print library sources ranked by similarity to a target embedding as TSV.
    Rank(RankArgs),
    /// Initialize a target run from retrieved prompts and tune it.
    Transfer(TransferArgs),
    /// Transfer every library prompt to every target and write results tables.
    Sweep(SweepArgs),
    /// Brute-force best source per target.
    Oracle(TableArgs),
    /// RER matrix, clustered similarity heatmap and per-target Pearson reports.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Avg,
    PerToken,
}

impl From<MetricArg> for SimilarityMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Avg => SimilarityMetric::AvgTokens,
            MetricArg::PerToken => SimilarityMetric::PerToken,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    BestOfTopK,
    WeightedAverage,
    Mixture,
}

impl From<MethodArg> for TransferMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::BestOfTopK => TransferMethod::BestOfTopK,
            MethodArg::WeightedAverage => TransferMethod::WeightedAverage,
            MethodArg::Mixture => TransferMethod::Mixture,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CheckpointArg {
    Final,
    Best,
}

impl From<CheckpointArg> for MixtureCheckpoint {
    fn from(c: CheckpointArg) -> Self {
        match c {
            CheckpointArg::Final => MixtureCheckpoint::Final,
            CheckpointArg::Best => MixtureCheckpoint::Best,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FixtureArg {
    Paper,
}

/// Overrides applied on top of the JSON config.
#[derive(Debug, Args)]
struct Overrides {
    /// Run seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u32>>,
    /// Similarity metric.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    source_steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    target_steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    checkpoint_every: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    embed_step: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Seed of the frozen toy model.
    #[arg(long)]
    model_seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), ExperimentError> {
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = self.metric {
            cfg.metric = m.into();
        }
        let s = &mut cfg.schedule;
        s.source_steps = self.source_steps.unwrap_or(s.source_steps);
        s.target_steps = self.target_steps.unwrap_or(s.target_steps);
        s.checkpoint_every = self.checkpoint_every.unwrap_or(s.checkpoint_every);
        s.embed_step = self.embed_step.unwrap_or(s.embed_step);
        s.learning_rate = self.learning_rate.unwrap_or(s.learning_rate);
        cfg.model.seed = self.model_seed.unwrap_or(cfg.model.seed);
        cfg.validate()
    }
}

/// Overrides that keep a trained library valid.
#[derive(Debug, Args)]
struct TargetOverrides {
    /// Similarity metric used for retrieval.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    target_steps: Option<u64>,
}

impl TargetOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), ExperimentError> {
        if let Some(m) = self.metric {
            cfg.metric = m.into();
        }
        cfg.schedule.target_steps = self.target_steps.unwrap_or(cfg.schedule.target_steps);
        cfg.validate()
    }
}

#[derive(Debug, Args)]
struct TrainSourceArgs {
    /// Experiment config (JSON); the default toy setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Library directory to create.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    library: PathBuf,
    /// Checkpoint step used as the task embedding; the config's when omitted.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    embed_step: Option<u64>,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    library: PathBuf,
    /// Prompt checkpoint taken at the library's embed_step.
    #[arg(long)]
    target_embedding: PathBuf,
    /// Similarity metric; the library config's when omitted.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    library: PathBuf,
    /// Task to tune, defined in the library's config.
    #[arg(long)]
    target: String,
    #[arg(long, value_enum, default_value = "best-of-top-k")]
    method: MethodArg,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Seed of the target runs.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    /// Mixture checkpoint that initializes the target run.
    #[arg(long, value_enum, default_value = "final")]
    mixture_checkpoint: CheckpointArg,
    /// Where to write the tuned prompt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TargetOverrides,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    library: PathBuf,
    /// Targets to sweep, comma separated; every configured target when omitted.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Output directory for results.csv and points.csv; the library when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TargetOverrides,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("table").required(true).args(["results", "fixture"])))]
struct TableArgs {
    /// Transfer results CSV (source,target,mean,std,runs).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Use an embedded results table instead.
    #[arg(long, value_enum)]
    fixture: Option<FixtureArg>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    table: TableArgs,
    /// Per-prompt similarity/score points (target,source,seed,similarity,score).
    #[arg(long)]
    points: Option<PathBuf>,
    /// Square task-similarity heatmap CSV to cluster.
    #[arg(long)]
    similarity: Option<PathBuf>,
    /// Directory for rer.csv and the clustered heatmap.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config problems, including references to undefined tasks, exit with
/// the config status.
fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<ExperimentError>(),
            Some(ExperimentError::Config(_) | ExperimentError::UnknownTask(_))
        )
    })
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy_default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn library_experiment(dir: &Path, overrides: Option<&TargetOverrides>) -> Result<Experiment> {
    let mut cfg = library_config(dir)?;
    if let Some(o) = overrides {
        o.apply(&mut cfg)?;
    }
    Ok(Experiment::new(cfg)?)
}

fn load_table(args: &TableArgs) -> Result<TransferTable> {
    match (&args.results, args.fixture) {
        (_, Some(FixtureArg::Paper)) => Ok(TransferTable::paper_fixture()),
        (Some(p), None) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TransferTable::from_csv_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        (None, None) => unreachable!("clap requires one of --results and --fixture"),
    }
}

fn train_source(args: &TrainSourceArgs) -> Result<String> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let exp = Experiment::new(cfg)?;
    let runs = exp.train_sources()?;
    let lib = exp.write_library(&runs, &args.out)?;
    Ok(format!(
        "library {} with {} entries (embed_step {})\n",
        args.out.display(),
        lib.len(),
        lib.embed_step
    ))
}

fn embed(args: &EmbedArgs) -> Result<String> {
    let exp = library_experiment(&args.library, None)?;
    let lib = exp.embed(&args.library, args.embed_step)?;
    Ok(format!(
        "{} embeddings at step {}; similarity heatmap {}\n",
        lib.len(),
        lib.embed_step,
        args.library.join(TASK_SIMILARITY_FILE).display()
    ))
}

fn rank(args: &RankArgs) -> Result<String> {
    let lib = open_library(&args.library)?;
    let metric = match args.metric {
        Some(m) => m.into(),
        None if args.library.join(CONFIG_FILE).is_file() => {
            library_config(&args.library)?.metric
        }
        None => SimilarityMetric::default(),
    };
    let target = read_target_embedding(&args.target_embedding, &lib)?;
    let mut out = String::from("rank\ttask\tseed\tsimilarity\n");
    for r in rank_library(&target, &lib, metric)? {
        writeln!(out, "{}\t{}\t{}\t{}", r.rank, r.entry.task_name, r.entry.run_seed, r.similarity)?;
    }
    Ok(out)
}

fn transfer(args: &TransferArgs) -> Result<String> {
    let exp = library_experiment(&args.library, Some(&args.overrides))?;
    let lib = open_library(&args.library)?;
    let target = exp.task(&args.target)?;
    let method: TransferMethod = args.method.into();
    let k = args.k as usize;
    let outcome = exp.transfer(&lib, &target, method, k, args.seed, args.mixture_checkpoint.into())?;
    let path = args.out.clone().unwrap_or_else(|| {
        args.library
            .join("transfers")
            .join(format!("{}-{method}-k{k}-seed{}.spot", args.target, args.seed))
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_checkpoint(&outcome.prompt, &path, true)?;

    let mut out = String::new();
    for r in &outcome.retrieved {
        writeln!(out, "retrieved\t{}\t{}\t{}\t{}", r.rank, r.entry.task_name, r.entry.run_seed, r.similarity)?;
    }
    if !outcome.mixture_tasks.is_empty() {
        writeln!(out, "mixture\t{}", outcome.mixture_tasks.join(","))?;
    }
    for c in &outcome.candidates {
        writeln!(out, "candidate\t{}\t{}\t{}", c.label, c.score, c.best_step)?;
    }
    writeln!(out, "score\t{}", outcome.score())?;
    writeln!(out, "prompt\t{}", path.display())?;
    Ok(out)
}

fn sweep(args: &SweepArgs) -> Result<String> {
    let exp = library_experiment(&args.library, Some(&args.overrides))?;
    let lib = open_library(&args.library)?;
    let targets = match &args.targets {
        Some(t) => t.clone(),
        None => exp.config.target_tasks.iter().map(|t| t.name.clone()).collect(),
    };
    if targets.is_empty() {
        return Err(ExperimentError::Config("no targets to sweep".into()).into());
    }
    for t in &targets {
        exp.task_spec(t)?;
    }
    let report = exp.sweep(&lib, &targets)?;
    let dir = args.out.clone().unwrap_or_else(|| args.library.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let results = dir.join("results.csv");
    let points = dir.join("points.csv");
    std::fs::write(&results, report.table.to_csv_string()).with_context(|| format!("writing {}", results.display()))?;
    std::fs::write(&points, points_to_csv(&report.points)?).with_context(|| format!("writing {}", points.display()))?;
    Ok(format!(
        "{} targets x {} sources\nresults\t{}\npoints\t{}\n",
        report.table.targets.len(),
        report.table.sources.len() - 1,
        results.display(),
        points.display()
    ))
}

fn oracle_text(table: &TransferTable) -> Result<String> {
    let report = oracle_search(table);
    let mut out = String::from("target\tsource\tscore\tbaseline\n");
    let base = table.baseline_scores();
    for (c, b) in report.choices.iter().zip(base) {
        writeln!(out, "{}\t{}\t{:.2}\t{:.2}", c.target, c.source, c.score, b)?;
    }
    writeln!(out, "oracle average\t{:.2}", report.average)?;
    writeln!(out, "baseline average\t{:.2}", report.baseline_average)?;
    Ok(out)
}

fn oracle(args: &TableArgs) -> Result<String> {
    oracle_text(&load_table(args)?)
}

fn analyze(args: &AnalyzeArgs) -> Result<String> {
    let table = load_table(&args.table)?;
    let mut out = oracle_text(&table)?;
    let rer = rer_matrix(&table)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("rer.csv");
        export_heatmap(&rer, &path)?;
        writeln!(out, "rer matrix\t{}", path.display())?;
    } else {
        out.push_str("relative error reduction (%)\n");
        out.push_str(&rer.to_csv_string()?);
    }

    if let Some(sim_path) = &args.similarity {
        let sim = read_heatmap(sim_path)?;
        if sim.row_ids != sim.col_ids {
            bail!("{}: row and column ids differ", sim_path.display());
        }
        let n = sim.row_ids.len();
        let m = Matrix::from_vec(n, n, sim.values.concat())?;
        let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
        let path = dir.join("similarity_clustered.csv");
        let tree = export_clustered_heatmap(&sim.row_ids, &m, &path)?;
        let order: Vec<&str> = tree.leaf_order.iter().map(|&i| sim.row_ids[i].as_str()).collect();
        writeln!(out, "clustered order\t{}", order.join(","))?;
        writeln!(out, "clustered heatmap\t{}", path.display())?;
    }

    if let Some(points_path) = &args.points {
        let text = std::fs::read_to_string(points_path)
            .with_context(|| format!("reading {}", points_path.display()))?;
        let points = points_from_csv(&text)?;
        let mut by_target: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for p in &points {
            let base = table
                .score(BASELINE, &p.target)
                .with_context(|| format!("no baseline for target '{}'", p.target))?;
            by_target
                .entry(&p.target)
                .or_default()
                .push((p.similarity, relative_error_reduction(base, p.score)?));
        }
        out.push_str("target\tpoints\tr\tp\n");
        for (target, pts) in by_target {
            let n = pts.len();
            match correlation_report(target, pts) {
                Ok(rep) => writeln!(out, "{}\t{n}\t{:.4}\t{:.4e}", rep.target, rep.r, rep.p_value)?,
                Err(e) => writeln!(out, "{target}\t{n}\tundefined ({e})")?,
            }
        }
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::DefaultConfig => {
            Ok(serde_json::to_string_pretty(&ExperimentConfig::toy_default())? + "\n")
        }
        Command::TrainSource(a) => train_source(a),
        Command::Embed(a) => embed(a),
        Command::Rank(a) => rank(a),
        Command::Transfer(a) => transfer(a),
        Command::Sweep(a) => sweep(a),
        Command::Oracle(a) => oracle(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("spot: error: {msg}");
            ExitCode::from(code)
        }
    }
}
