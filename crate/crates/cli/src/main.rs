//! `fedsim` — partition datasets, run federated training, and report
//! milestone tables from the resulting metrics.
//!
//! Exit codes are a stable contract: 0 on success, 1 for runtime or IO
//! failures (including mid-run training errors, reported with their round
//! index), 2 for usage and configuration errors.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedsim_core::config::{DataSource, RunConfig};
use fedsim_core::datasets::{
    load_idx, partition_from_spec, synth_classification, PartitionManifest, PartitionSpec,
};
use fedsim_core::orchestrator::{
    csv_row, final_accuracy, milestone_round, prepare, run_training, RunOptions, CSV_HEADER,
    FINAL_ACCURACY_WINDOW, MILESTONE_WINDOW,
};
use fedsim_core::selftest::{self, SelftestOptions};

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Federated-learning simulator: deterministic client partitioning, \
             training rounds, and milestone reporting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a dataset across clients and write the partition manifest.
    Partition(PartitionArgs),
    /// Execute a training run from a config file, streaming metrics as CSV.
    Run(RunArgs),
    /// Summarise metrics CSVs: rounds-to-milestone and final accuracy.
    Report(ReportArgs),
    /// Run the embedded numerical verification suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct PartitionArgs {
    /// Dataset description JSON: {"kind":"synth",...} or {"kind":"idx",...}.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Number of clients.
    #[arg(long)]
    k: usize,
    /// Partitioning scheme.
    #[arg(long, value_enum)]
    scheme: Scheme,
    /// Distinct labels per client (label-skew scheme only).
    #[arg(long, value_name = "N")]
    classes_per_client: Option<usize>,
    /// Partitioning seed.
    #[arg(long)]
    seed: u64,
    /// Where to write the partition manifest JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Iid,
    LabelSkew,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Where to write the metrics CSV (the run manifest lands beside it).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Client-update worker threads.
    #[arg(long, default_value_t = 1, value_name = "N")]
    threads: usize,
    /// Record real wall-clock times in the wall_ms column. Off by default so
    /// that identical configs produce byte-identical CSVs.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more metrics CSVs produced by `fedsim run`.
    #[arg(long, value_name = "FILE", num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Comma-separated accuracy milestones.
    #[arg(long, default_value = "0.70,0.80,0.90", value_name = "LIST")]
    milestones: String,
}

#[derive(Args)]
struct SelftestArgs {
    /// Offset added to every UGA client-gradient component (negative control
    /// for the suite itself; a healthy build must fail once this is sizable).
    #[arg(long, hide = true, default_value_t = 0.0, value_name = "EPS")]
    perturb_gradient: f64,
}

// ── failure plumbing ─────────────────────────────────────────────────────────

enum Failure {
    /// Bad flags or configuration — exit 2.
    Usage(anyhow::Error),
    /// Runtime or IO trouble — exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    fn report(&self) -> ExitCode {
        match self {
            Failure::Usage(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
            Failure::Runtime(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

trait FailAs<T> {
    fn or_usage(self) -> Result<T, Failure>;
    fn or_runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> FailAs<T> for Result<T, E> {
    fn or_usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn or_runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition(args) => cmd_partition(args),
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Selftest(args) => cmd_selftest(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.report(),
    }
}

// ── partition ────────────────────────────────────────────────────────────────

fn cmd_partition(args: PartitionArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.dataset)
        .with_context(|| format!("reading dataset spec {}", args.dataset.display()))
        .or_usage()?;
    let source: DataSource = serde_json::from_str(&text)
        .with_context(|| format!("parsing dataset spec {}", args.dataset.display()))
        .or_usage()?;
    let data = match &source {
        DataSource::Synth { spec } => synth_classification(spec).or_usage()?,
        DataSource::Idx { train_images, train_labels, .. } => {
            load_idx(Path::new(train_images), Path::new(train_labels)).or_usage()?
        }
    };

    let spec = match (args.scheme, args.classes_per_client) {
        (Scheme::Iid, None) => PartitionSpec::Iid { k: args.k },
        (Scheme::Iid, Some(_)) => {
            return Err(Failure::Usage(anyhow!(
                "--classes-per-client only applies to the label-skew scheme"
            )))
        }
        (Scheme::LabelSkew, Some(classes_per_client)) => {
            PartitionSpec::LabelSkew { k: args.k, classes_per_client }
        }
        (Scheme::LabelSkew, None) => {
            return Err(Failure::Usage(anyhow!(
                "the label-skew scheme requires --classes-per-client"
            )))
        }
    };

    let partition = partition_from_spec(&data, &spec, args.seed).or_usage()?;
    let manifest = PartitionManifest::new(args.seed, spec, &partition);
    let json = manifest.to_json().or_runtime()?;
    fs::write(&args.out, json)
        .with_context(|| format!("writing {}", args.out.display()))
        .or_runtime()?;

    for (id, client) in partition.clients().iter().enumerate() {
        println!("client {id:>4}  {:>7}", client.len());
    }
    println!(
        "{} clients, {} examples -> {}",
        partition.num_clients(),
        partition.total_examples(),
        args.out.display()
    );
    Ok(())
}

// ── run ──────────────────────────────────────────────────────────────────────

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    if args.threads == 0 {
        return Err(Failure::Usage(anyhow!("--threads must be >= 1")));
    }
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))
        .or_usage()?;
    let config = RunConfig::from_json(&text)
        .with_context(|| format!("in config {}", args.config.display()))
        .or_usage()?;
    let prepared = prepare(&config).or_usage()?;

    // Manifest goes out before training starts so a long run is identifiable
    // (and reproducible) while still in flight.
    let manifest_path = args.out.with_extension("manifest.json");
    let manifest = prepared.run_manifest().or_runtime()?;
    fs::write(&manifest_path, manifest)
        .with_context(|| format!("writing {}", manifest_path.display()))
        .or_runtime()?;

    let mut file = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .or_runtime()?;
    writeln!(file, "{CSV_HEADER}").or_runtime()?;

    let options = RunOptions { threads: args.threads, record_timing: args.timing };
    let mut rows = 0usize;
    run_training(&prepared, &options, |record| {
        if let Some(row) = csv_row(record, config.algorithm) {
            writeln!(file, "{row}")?;
            file.flush()?; // stream rows so partial runs stay inspectable
            rows += 1;
        }
        Ok(())
    })
    .or_runtime()?;

    println!(
        "wrote {rows} eval rows to {} (manifest {})",
        args.out.display(),
        manifest_path.display()
    );
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────────────

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let mut milestones = Vec::new();
    for token in args.milestones.split(',') {
        let value: f64 = token
            .trim()
            .parse()
            .with_context(|| format!("bad milestone {token:?}"))
            .or_usage()?;
        if !(value > 0.0 && value <= 1.0) {
            return Err(Failure::Usage(anyhow!("milestone {value} outside (0, 1]")));
        }
        milestones.push(value);
    }

    let mut tables = Vec::new();
    for path in &args.metrics {
        tables.push((path, read_eval_series(path)?));
    }

    let name_width = args
        .metrics
        .iter()
        .map(|p| p.display().to_string().len())
        .max()
        .unwrap_or(3)
        .max(3);
    print!("{:<name_width$}", "run");
    for m in &milestones {
        print!("  {:>8}", format!("to {m:.2}"));
    }
    println!("  {:>8}", "final");

    for (path, series) in &tables {
        print!("{:<name_width$}", path.display().to_string());
        for m in &milestones {
            match milestone_round(series, *m, MILESTONE_WINDOW) {
                Some(round) => print!("  {round:>8}"),
                None => print!("  {:>8}", "—"),
            }
        }
        match final_accuracy(series, FINAL_ACCURACY_WINDOW) {
            Some(acc) => println!("  {acc:>8.4}"),
            None => println!("  {:>8}", "—"),
        }
    }
    Ok(())
}

/// Parses the (round, accuracy) series out of a metrics CSV, reporting the
/// offending line number on malformed input.
fn read_eval_series(path: &Path) -> Result<Vec<(usize, f64)>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .or_runtime()?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Failure::Runtime(anyhow!(
                "{}: line 1: unexpected header {header:?}",
                path.display()
            )))
        }
        None => return Err(Failure::Runtime(anyhow!("{}: empty file", path.display()))),
    }

    let mut series = Vec::new();
    for (index, line) in lines {
        let lineno = index + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Failure::Runtime(anyhow!(
                "{}: line {lineno}: expected 7 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let round: usize = fields[0].parse().map_err(|_| {
            Failure::Runtime(anyhow!(
                "{}: line {lineno}: bad round {:?}",
                path.display(),
                fields[0]
            ))
        })?;
        let accuracy: f64 = fields[2].parse().map_err(|_| {
            Failure::Runtime(anyhow!(
                "{}: line {lineno}: bad accuracy {:?}",
                path.display(),
                fields[2]
            ))
        })?;
        series.push((round, accuracy));
    }
    Ok(series)
}

// ── selftest ─────────────────────────────────────────────────────────────────

fn cmd_selftest(args: SelftestArgs) -> Result<(), Failure> {
    let options = SelftestOptions { gradient_perturbation: args.perturb_gradient };
    let outcomes = selftest::run(&options);
    let mut failures = 0;
    for outcome in &outcomes {
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("check {:<22} {verdict}  {}", outcome.name, outcome.detail);
        if !outcome.passed {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{failures} of {} checks failed", outcomes.len())))
    }
}
