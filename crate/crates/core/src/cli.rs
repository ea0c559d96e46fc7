//! Command-line front end: `run`, `compare`, `validate`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::simulate_with;
use crate::metrics::{compare, summarize, ComparisonReport, MetricsCollector, MetricsReport, TraceWriter};
use crate::placement::{place_cloud, place_edgeward, validate_placement, Placement, PlacementReport};
use crate::scenario::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fogsim", version, about = "Discrete-event simulator for stream queries on fog topologies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Cloud,
    Edgeward,
}

impl Policy {
    pub fn place(self, scenario: &Scenario) -> Result<Placement, crate::placement::PlacementError> {
        match self {
            Policy::Cloud => place_cloud(&scenario.app, &scenario.topology),
            Policy::Edgeward => place_edgeward(&scenario.app, &scenario.topology),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Cloud => "cloud",
            Policy::Edgeward => "edgeward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one policy and write reports to the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        policy: Policy,
        /// Overrides the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every log record to trace.csv.
        #[arg(long)]
        trace: bool,
        /// Format of the summary printed to stdout.
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run both policies for each seed and compare them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; `a-b` denotes an inclusive range.
        #[arg(long, conflicts_with = "seed")]
        seeds: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Worker threads for concurrent runs; 0 uses one per core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Check the config and both derived placements.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `1,2,5-7` into `[1, 2, 5, 6, 7]`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("invalid seed '{s}'"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty seed range '{part}'"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(num(part)?),
        }
    }
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

pub fn load(config: &Path) -> Result<Scenario, CliError> {
    Scenario::load(config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))
}

/// Everything one simulation produced, already written under `dir`.
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub placement: PlacementReport,
}

/// Places, simulates and writes metrics.json, metrics.csv, placement.json,
/// delay_series.csv and optionally trace.csv into `dir`.
pub fn execute(scenario: &Scenario, policy: Policy, dir: &Path, trace: bool) -> Result<RunOutput, CliError> {
    let placement = policy.place(scenario).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut collector = MetricsCollector::new(scenario);
    let summary = if trace {
        let path = dir.join("trace.csv");
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut writer = TraceWriter::new(BufWriter::new(file), scenario, &placement);
        let summary = simulate_with(scenario, &placement, (&mut collector, &mut writer));
        writer.finish().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        summary
    } else {
        simulate_with(scenario, &placement, &mut collector)
    }
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let metrics = collector.report(scenario, &placement, &summary);
    let placement = PlacementReport::new(&placement, &scenario.app, &scenario.topology);

    let write = |name: &str, body: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))
    };
    write("metrics.json", metrics.to_json().as_bytes())?;
    write("metrics.csv", metrics.to_csv().as_bytes())?;
    let mut pj = serde_json::to_string_pretty(&placement).expect("placement serializes");
    pj.push('\n');
    write("placement.json", pj.as_bytes())?;
    let path = dir.join("delay_series.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    collector
        .write_delay_series(BufWriter::new(file))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(RunOutput { metrics, placement })
}

/// Runs both policies for every seed on a pool of `jobs` threads and writes
/// `seed_<s>/<policy>/…`, `seed_<s>/comparison.json` and `summary.json`.
pub fn compare_seeds(
    scenario: &Scenario,
    seeds: &[u64],
    out: &Path,
    trace: bool,
    jobs: usize,
) -> Result<Vec<ComparisonReport>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    let tasks: Vec<(u64, Policy)> = seeds.iter().flat_map(|&s| [(s, Policy::Edgeward), (s, Policy::Cloud)]).collect();
    let results: Vec<Result<MetricsReport, CliError>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(seed, policy)| {
                let dir = out.join(format!("seed_{seed}")).join(policy.name());
                execute(&scenario.with_seed(seed), policy, &dir, trace).map(|r| r.metrics)
            })
            .collect()
    });
    let mut comparisons = Vec::with_capacity(seeds.len());
    let mut results = results.into_iter();
    for &seed in seeds {
        let fog = results.next().expect("one result per task")?;
        let cloud = results.next().expect("one result per task")?;
        let c = compare(&fog, &cloud).map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = out.join(format!("seed_{seed}")).join("comparison.json");
        let mut body = serde_json::to_string_pretty(&c).expect("comparison serializes");
        body.push('\n');
        fs::write(&path, body).map_err(io_err(&path))?;
        comparisons.push(c);
    }
    let path = out.join("summary.json");
    let mut body = serde_json::to_string_pretty(&summarize(&comparisons)).expect("summary serializes");
    body.push('\n');
    fs::write(&path, body).map_err(io_err(&path))?;
    Ok(comparisons)
}

fn validate(scenario: &Scenario) -> Result<String, CliError> {
    let mut problems = Vec::new();
    for policy in [Policy::Cloud, Policy::Edgeward] {
        match policy.place(scenario) {
            Ok(p) => {
                for v in validate_placement(&p, &scenario.app, &scenario.topology) {
                    problems.push(format!("{}: {v}", policy.name()));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", policy.name())),
        }
    }
    if problems.is_empty() {
        Ok(format!(
            "ok: {} devices, {} operators, {} sensors; both placements valid",
            scenario.topology.len(),
            scenario.app.len(),
            scenario.sensors.len()
        ))
    } else {
        Err(CliError::Config(problems.join("\n")))
    }
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run { config, policy, seed, out, trace, format } => {
            let mut scenario = load(&config)?;
            if let Some(seed) = seed {
                scenario = scenario.with_seed(seed);
            }
            let r = execute(&scenario, policy, &out, trace)?;
            Ok(match format {
                Format::Json => r.metrics.to_json(),
                Format::Csv => r.metrics.to_csv(),
            })
        }
        Command::Compare { config, seeds, seed, out, trace, format, jobs } => {
            let scenario = load(&config)?;
            let seeds = match seeds {
                Some(list) => parse_seeds(&list).map_err(CliError::Config)?,
                None => vec![seed.unwrap_or(scenario.settings.seed)],
            };
            let comparisons = compare_seeds(&scenario, &seeds, &out, trace, jobs)?;
            Ok(match format {
                Format::Json => {
                    let mut s = serde_json::to_string_pretty(&summarize(&comparisons)).expect("summary serializes");
                    s.push('\n');
                    s
                }
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    let ratio = |r: Option<f64>| r.map(crate::fixed::format6).unwrap_or_default();
                    w.write_record(["seed", "delay_ratio", "cloud_tuple_ratio", "fog_delay_ms", "cloud_delay_ms"])
                        .expect("in-memory write");
                    for c in &comparisons {
                        w.write_record([
                            c.seed.to_string(),
                            ratio(c.delay_ratio),
                            ratio(c.cloud_tuple_ratio),
                            crate::fixed::format6(c.fog.avg_tuple_delay_ms),
                            crate::fixed::format6(c.cloud.avg_tuple_delay_ms),
                        ])
                        .expect("in-memory write");
                    }
                    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
                }
            })
        }
        Command::Validate { config } => validate(&load(&config)?).map(|s| s + "\n"),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(stdout) => {
            print!("{stdout}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
