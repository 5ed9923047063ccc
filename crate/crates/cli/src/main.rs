//! `damflow`: ingest basin data, stratify by degree of regulation, train and
//! evaluate LSTM ensembles, run experiment plans and emit report tables.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use damflow::data::{ingest_dataset, write_dataset, Dataset, DateRange};
use damflow::experiments::{
    build_plan, default_test_window, default_train_window, evaluate_basins, pub_plans, run_experiment,
    train_ensemble, write_metrics_csv, ExperimentPlan, RunOptions,
};
use damflow::io::{fmt_f64, write_csv, write_json};
use damflow::reservoir::{stratify, DorCategory, ExclusionReason, Stratification};
use damflow::synthetic::generate_suite;
use damflow::trainer::{EnsembleModel, EpochSize, TrainingConfig};

#[derive(Parser, Debug)]
#[command(name = "damflow", version, about = "LSTM streamflow modeling for basins with reservoirs")]
struct Cli {
    /// Data root holding basins.csv, forcing/, flow/ and dams/.
    #[arg(long, global = true, env = "DAMFLOW_DATA", default_value = "data")]
    data: PathBuf,

    /// Output root for every artifact.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Random seed. Replaces the training seed list for train and experiment
    /// run, the master seed for synthgen and the split seed for transfer plans.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for training and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    workers: u32,

    /// Log more; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the data root and write ingest_report.json.
    Ingest,
    /// Classify basins by degree of regulation and write stratification.csv.
    Stratify,
    /// Train an ensemble on a basin set and write model.json.
    Train(TrainCmd),
    /// Evaluate a trained ensemble and write a metrics table.
    Evaluate(EvaluateCmd),
    /// Build or run experiment plans.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Generate a synthetic dataset in the ingest layout.
    Synthgen(SynthgenCmd),
    /// Write CDF, boxplot and per-basin tables for a run directory.
    Report(ReportCmd),
}

#[derive(Args, Debug, Clone, Default)]
struct TrainingArgs {
    /// JSON training configuration used as the base for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sequences per minibatch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training sequence length in days.
    #[arg(long)]
    seq_len: Option<usize>,
    /// LSTM hidden units.
    #[arg(long)]
    hidden_size: Option<usize>,
    /// Width of the input transform; defaults to the raw input width.
    #[arg(long)]
    input_size: Option<usize>,
    /// Dropout rate in [0, 1).
    #[arg(long)]
    dropout: Option<f64>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Minibatch draws per epoch: `hydrographs`, `windows` or a count.
    #[arg(long, value_parser = parse_epoch_size)]
    epoch_size: Option<EpochSize>,
    /// Days fed before an evaluation window and discarded.
    #[arg(long)]
    warmup_days: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct BasinArgs {
    /// Basin composition: Z, S, L, ZS, ZL, SL or CONUS.
    #[arg(long, conflicts_with = "basins")]
    composition: Option<String>,
    /// Comma-separated gauge ids.
    #[arg(long, value_delimiter = ',')]
    basins: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    set: BasinArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Output directory name under --out; defaults to train-<composition>.
    #[arg(long)]
    name: Option<String>,
    /// First training day, YYYY-MM-DD.
    #[arg(long)]
    train_start: Option<NaiveDate>,
    /// Last training day, YYYY-MM-DD.
    #[arg(long)]
    train_end: Option<NaiveDate>,
    /// Save a checkpoint every K epochs as well as the last one.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    /// Ensemble written by train or experiment run.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    set: BasinArgs,
    /// First evaluation day, YYYY-MM-DD.
    #[arg(long)]
    test_start: Option<NaiveDate>,
    /// Last evaluation day, YYYY-MM-DD.
    #[arg(long)]
    test_end: Option<NaiveDate>,
    /// Days fed before the evaluation window and discarded.
    #[arg(long, default_value_t = 365)]
    warmup_days: usize,
    /// Metrics table path; defaults to <out>/metrics.csv.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ExperimentCmd {
    /// Run a plan file; artifacts go to <out>/<plan name>/.
    Run {
        /// Plan JSON file.
        plan: PathBuf,
    },
    /// Write plan files to <out>/plans/.
    Build(BuildCmd),
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("kind").required(true).args(["composition", "transfer"]))]
struct BuildCmd {
    /// Composition plan training on Z, S, L, ZS, ZL, SL or CONUS.
    #[arg(long)]
    composition: Option<String>,
    /// Ungauged-basin transfer sub-experiment 1 to 4.
    #[arg(long = "pub", value_parser = clap::value_parser!(u8).range(1..=4))]
    transfer: Option<u8>,
    /// Plan name for a composition plan; defaults to the composition.
    #[arg(long)]
    name: Option<String>,
    /// File of reference gauge ids, one per line, for sub-experiment 4.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// First training day, YYYY-MM-DD.
    #[arg(long)]
    train_start: Option<NaiveDate>,
    /// Last training day, YYYY-MM-DD.
    #[arg(long)]
    train_end: Option<NaiveDate>,
    /// First evaluation day, YYYY-MM-DD.
    #[arg(long)]
    test_start: Option<NaiveDate>,
    /// Last evaluation day, YYYY-MM-DD.
    #[arg(long)]
    test_end: Option<NaiveDate>,
    /// Save a checkpoint every K epochs as well as the last one.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args, Debug)]
struct SynthgenCmd {
    /// Basins per dor regime.
    #[arg(long, default_value_t = 8)]
    per_regime: usize,
    /// Days per basin, starting 1990-01-01.
    #[arg(long, default_value_t = 3652)]
    days: usize,
    /// Destination directory; defaults to the data root.
    #[arg(long)]
    dest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportCmd {
    /// Directory holding metrics.csv or metrics_<set>.csv files.
    run: PathBuf,
    /// Stratification table; defaults to <out>/stratification.csv.
    #[arg(long)]
    stratification: Option<PathBuf>,
}

fn parse_epoch_size(s: &str) -> Result<EpochSize, String> {
    match s {
        "hydrographs" => Ok(EpochSize::Hydrographs),
        "windows" => Ok(EpochSize::Windows),
        n => n
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(EpochSize::Fixed)
            .ok_or_else(|| format!("expected hydrographs, windows or a positive count, got {n:?}")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Run(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Run(e) => e,
        }
    }
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn run(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
    fn run(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Run(e.into()))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}

/// The error chain joined with `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Ingest => cmd_ingest(cli),
        Command::Stratify => cmd_stratify(cli),
        Command::Train(c) => cmd_train(cli, c),
        Command::Evaluate(c) => cmd_evaluate(cli, c),
        Command::Experiment(ExperimentCmd::Run { plan }) => cmd_experiment_run(cli, plan),
        Command::Experiment(ExperimentCmd::Build(c)) => cmd_experiment_build(cli, c),
        Command::Synthgen(c) => cmd_synthgen(cli, c),
        Command::Report(c) => report::run(c.run.as_path(), &strat_path(cli, c.stratification.as_deref())),
    }
}

/// Ingests the data root; rejected basins are logged and left out.
fn load(cli: &Cli) -> Result<Dataset, Failure> {
    let (ds, report) = ingest_dataset(&cli.data)
        .with_context(|| format!("cannot ingest data root {}", cli.data.display()))
        .data()?;
    for issue in &report.issues {
        log::warn!("rejected: {issue}");
    }
    if ds.is_empty() {
        return Err(Failure::Data(anyhow!("no usable basins under {}", cli.data.display())));
    }
    log::info!("{} basins loaded, {} rejected", ds.len(), report.rejected.len());
    Ok(ds)
}

fn window(start: Option<NaiveDate>, end: Option<NaiveDate>, default: DateRange) -> Result<DateRange, Failure> {
    DateRange::new(start.unwrap_or(default.start), end.unwrap_or(default.end)).usage()
}

fn training_config(args: &TrainingArgs, seed: Option<u64>) -> Result<TrainingConfig, Failure> {
    let mut c: TrainingConfig = match &args.config {
        Some(p) => damflow::io::read_json(p)
            .with_context(|| format!("cannot read training config {}", p.display()))
            .usage()?,
        None => TrainingConfig::default(),
    };
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.seq_len {
        c.seq_len = v;
    }
    if let Some(v) = args.hidden_size {
        c.hidden_size = v;
    }
    if args.input_size.is_some() {
        c.input_size = args.input_size;
    }
    if let Some(v) = args.dropout {
        c.dropout_p = v;
    }
    if let Some(v) = &args.seeds {
        c.seeds = v.clone();
    }
    if let Some(v) = args.epoch_size {
        c.epoch_size = v;
    }
    if let Some(v) = args.warmup_days {
        c.warmup_days = v;
    }
    if let Some(s) = seed {
        c.seeds = vec![s];
    }
    if c.seeds.is_empty() {
        return Err(Failure::Usage(anyhow!("at least one training seed is required")));
    }
    c.validate().usage()?;
    Ok(c)
}

/// Gauge ids named by `set`, or every basin when it names none.
fn resolve_set(set: &BasinArgs, ds: &Dataset, strat: &Stratification) -> Result<(String, Vec<String>), Failure> {
    if let Some(ids) = &set.basins {
        ds.select(ids).data()?;
        return Ok(("basins".into(), ids.clone()));
    }
    match &set.composition {
        Some(c) => {
            let plan = build_plan(c, strat, c, TrainingConfig::default()).usage()?;
            Ok((c.to_ascii_lowercase(), plan.train.ids))
        }
        None => Ok(("all".into(), ds.gauge_ids())),
    }
}

fn strat_path(cli: &Cli, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join("stratification.csv"))
}

fn cmd_ingest(cli: &Cli) -> Outcome {
    let (ds, report) = ingest_dataset(&cli.data)
        .with_context(|| format!("cannot ingest data root {}", cli.data.display()))
        .data()?;
    write_json(cli.out.join("ingest_report.json"), &report).data()?;
    println!("{} basins accepted, {} rejected", ds.len(), report.rejected.len());
    for issue in &report.issues {
        println!("  {issue}");
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::Data(anyhow!("{} ingest errors", report.issues.len())))
    }
}

fn exclusion_key(r: ExclusionReason) -> &'static str {
    match r {
        ExclusionReason::NoDams => "no_dams",
        ExclusionReason::DatasetMismatch => "dataset_mismatch",
        ExclusionReason::DebrisOrNavigation => "debris_or_navigation",
    }
}

fn cmd_stratify(cli: &Cli) -> Outcome {
    let ds = load(cli)?;
    let strat = stratify(&ds);
    let mut rows: Vec<[String; 6]> = strat
        .basins
        .iter()
        .map(|b| {
            [
                b.gauge_id.clone(),
                fmt_f64(b.dor.dor),
                b.dor.category.as_str().to_string(),
                b.purposes.code(),
                b.diversion.present.to_string(),
                b.excluded_reason().map(exclusion_key).unwrap_or("").to_string(),
            ]
        })
        .collect();
    for (id, reason) in &strat.unclassified {
        log::warn!("basin {id} not classified: {reason}");
        rows.push([id.clone(), "nan".into(), "unclassified".into(), String::new(), String::new(), "dor_undefined".into()]);
    }
    rows.sort();
    let path = cli.out.join("stratification.csv");
    write_csv(
        &path,
        &["gauge_id", "dor", "category", "major_purposes", "diversion", "excluded_reason"],
        rows,
    )
    .data()?;
    println!(
        "zero {} small {} large {} unclassified {} -> {}",
        strat.zero.len(),
        strat.small.len(),
        strat.large.len(),
        strat.unclassified.len(),
        path.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, c: &TrainCmd) -> Outcome {
    let config = training_config(&c.training, cli.seed)?;
    let train_window = window(c.train_start, c.train_end, default_train_window())?;
    let ds = load(cli)?;
    let strat = stratify(&ds);
    let (label, ids) = resolve_set(&c.set, &ds, &strat)?;
    let name = c.name.clone().unwrap_or_else(|| format!("train-{label}"));
    let basins = ds.select(&ids).data()?;
    let dir = cli.out.join(&name);
    let run = train_ensemble(&basins, train_window, &config, &dir, c.checkpoint_every, cli.workers as usize).run()?;
    if !run.failures.is_empty() {
        let msg: Vec<String> = run.failures.iter().map(|(s, e)| format!("seed {s}: {e}")).collect();
        return Err(Failure::Run(anyhow!("training failed: {}", msg.join("; "))));
    }
    let path = dir.join("model.json");
    run.model().save(&path).run()?;
    println!("{} members on {} basins -> {}", run.members.len(), ids.len(), path.display());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, c: &EvaluateCmd) -> Outcome {
    let test_window = window(c.test_start, c.test_end, default_test_window())?;
    if !c.model.exists() {
        return Err(Failure::Data(anyhow!("missing model file {}", c.model.display())));
    }
    let model = EnsembleModel::load(&c.model)
        .with_context(|| format!("cannot read model {}", c.model.display()))
        .data()?;
    let ds = load(cli)?;
    let strat = stratify(&ds);
    let (_, ids) = resolve_set(&c.set, &ds, &strat)?;
    let basins = ds.select(&ids).data()?;
    let rows = evaluate_basins(&model, &basins, &test_window, c.warmup_days).run()?;
    let path = c.output.clone().unwrap_or_else(|| cli.out.join("metrics.csv"));
    write_metrics_csv(&path, &rows).data()?;
    println!("{} basins -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_experiment_run(cli: &Cli, plan_path: &Path) -> Outcome {
    if !plan_path.exists() {
        return Err(Failure::Data(anyhow!("missing plan file {}", plan_path.display())));
    }
    let mut plan = ExperimentPlan::load(plan_path)
        .with_context(|| format!("cannot read plan {}", plan_path.display()))
        .usage()?;
    if let Some(s) = cli.seed {
        plan.training.seeds = vec![s];
    }
    plan.validate().usage()?;
    let ds = load(cli)?;
    let strat = stratify(&ds);
    let opts = RunOptions {
        out_root: cli.out.clone(),
        workers: cli.workers as usize,
    };
    let result = run_experiment(&plan, &ds, &strat, &opts).run()?;
    for (set, s) in &result.summaries {
        let median = s["nse"].median.map(fmt_f64).unwrap_or_else(|| "nan".into());
        println!("{set}: {} basins, median nse {median}", result.metrics[set].len());
    }
    println!("-> {}", result.dir.display());
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read id list {}", path.display()))
        .data()?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn cmd_experiment_build(cli: &Cli, c: &BuildCmd) -> Outcome {
    let training = training_config(&c.training, None)?;
    let train_window = window(c.train_start, c.train_end, default_train_window())?;
    let test_window = window(c.test_start, c.test_end, default_test_window())?;
    let ds = load(cli)?;
    let strat = stratify(&ds);
    let mut plans = Vec::new();
    if let Some(comp) = &c.composition {
        let name = c.name.clone().unwrap_or_else(|| comp.to_ascii_lowercase());
        plans.push(build_plan(&name, &strat, comp, training).usage()?);
    } else if let Some(sub) = c.transfer {
        let reference = c.reference.as_deref().map(read_ids).transpose()?;
        let (splits, built) = pub_plans(sub, &strat, reference.as_deref(), cli.seed.unwrap_or(0), training).usage()?;
        write_json(cli.out.join("plans").join(format!("pub{sub}-splits.json")), &splits).data()?;
        plans = built;
    }
    for mut plan in plans {
        plan.train_window = train_window;
        plan.test_window = test_window;
        plan.checkpoint_every = c.checkpoint_every;
        plan.validate().usage()?;
        let path = cli.out.join("plans").join(format!("{}.json", plan.name));
        plan.save(&path).data()?;
        let tests: BTreeMap<&String, usize> = plan.tests.iter().map(|(k, v)| (k, v.resolve(&strat).len())).collect();
        println!("{} train {} tests {:?} -> {}", plan.name, plan.train.resolve(&strat).len(), tests, path.display());
    }
    Ok(())
}

fn cmd_synthgen(cli: &Cli, c: &SynthgenCmd) -> Outcome {
    let ds = generate_suite(c.per_regime, c.days, cli.seed.unwrap_or(42)).usage()?;
    let dest = c.dest.clone().unwrap_or_else(|| cli.data.clone());
    write_dataset(&dest, &ds).data()?;
    let strat = stratify(&ds);
    println!(
        "{} basins (zero {} small {} large {}) -> {}",
        ds.len(),
        strat.group(DorCategory::Zero).len(),
        strat.group(DorCategory::Small).len(),
        strat.group(DorCategory::Large).len(),
        dest.display()
    );
    Ok(())
}
