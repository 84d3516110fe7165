use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use ucb_topics::harness::{effects_from_table, write_effects_csv, EffectSeries};
use ucb_topics::io::{fmt_sig9, read_log, write_log};
use ucb_topics::metrics::write_buckets_csv;
use ucb_topics::{
    compute_metrics, load_config, run_experiment, ExperimentConfig, GroupAssignment, LogBounds, MetricsOptions, MetricsReport, PhasePlan,
};

const LOG_FILE: &str = "impressions.jsonl";
const METRICS_FILE: &str = "metrics.csv";
const EFFECTS_FILE: &str = "effects.csv";
const BUCKETS_FILE: &str = "buckets.csv";
const CONFIG_FILE: &str = "config.toml";
const MANIFEST_FILE: &str = "manifest.json";

/// Config fields accepted by `sweep --param`.
const SWEEPABLE: [&str; 5] = ["gamma", "shrinkage_lambda", "prior_strength", "availability_fraction", "imputation_epsilon"];

#[derive(Parser)]
#[command(name = "ucb-topics", version, about = "UCB topic exploration simulator with a two-phase A/B protocol")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its log, metrics, effects and manifest.
    Simulate {
        /// TOML config; defaults are used for missing keys or a missing flag.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics, effects and buckets from an existing log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of experiments over one config field and several seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of: gamma, shrinkage_lambda, prior_strength, availability_fraction, imputation_epsilon.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate the metrics.csv of every run under the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Bad invocation that clap cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

#[derive(Serialize)]
struct RunManifest {
    seed: u64,
    config: ExperimentConfig,
    versions: BTreeMap<&'static str, &'static str>,
    outputs: Vec<&'static str>,
    wall_clock_seconds: f64,
}

fn load(config: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_report(dir: &Path, report: &MetricsReport, effects: &[EffectSeries], plan: &PhasePlan) -> anyhow::Result<()> {
    report.table.write_csv(create(dir, METRICS_FILE)?)?;
    write_effects_csv(effects, plan, create(dir, EFFECTS_FILE)?)?;
    write_buckets_csv(&report.buckets, create(dir, BUCKETS_FILE)?)?;
    Ok(())
}

/// Runs one experiment into `dir`; returns its manifest and effects.
fn simulate_into(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<(RunManifest, Vec<EffectSeries>)> {
    let start = Instant::now();
    let run = run_experiment(cfg, cfg.seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_log(create(dir, LOG_FILE)?, &run.log)?;
    write_report(dir, &run.report, &run.effects, &run.plan)?;
    let mut f = create(dir, CONFIG_FILE)?;
    f.write_all(cfg.to_toml_string().as_bytes())?;
    f.flush()?;

    let manifest = RunManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        versions: BTreeMap::from([("ucb-topics", ucb_topics::VERSION), ("ucb-topics-cli", env!("CARGO_PKG_VERSION"))]),
        outputs: vec![LOG_FILE, METRICS_FILE, EFFECTS_FILE, BUCKETS_FILE, CONFIG_FILE, MANIFEST_FILE],
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let mut f = create(dir, MANIFEST_FILE)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok((manifest, run.effects))
}

fn cmd_simulate(config: Option<&Path>, seed: Option<u64>, out: &Path, quiet: bool) -> anyhow::Result<()> {
    let cfg = load(config, seed)?;
    let (manifest, _) = simulate_into(&cfg, out)?;
    if !quiet {
        eprintln!("seed {}: wrote {} files to {} in {:.1} s", cfg.seed, manifest.outputs.len(), out.display(), manifest.wall_clock_seconds);
    }
    Ok(())
}

fn cmd_metrics(log: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path, quiet: bool) -> anyhow::Result<()> {
    let cfg = load(config, seed)?;
    cfg.validate()?;
    let f = File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let records = read_log(BufReader::new(f), LogBounds { topics: cfg.topics, users: cfg.users })
        .with_context(|| format!("reading {}", log.display()))?;
    let sizes = GroupAssignment::assign(cfg.users, cfg.group_fractions, cfg.seed)?.sizes();
    let report = compute_metrics(&records, &cfg, cfg.seed, sizes, MetricsOptions::default())?;
    let effects = effects_from_table(&report.table);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_report(out, &report, &effects, &PhasePlan::from_config(&cfg))?;
    if !quiet {
        eprintln!("{} impressions: wrote metrics to {}", records.len(), out.display());
    }
    Ok(())
}

fn set_param(cfg: &mut ExperimentConfig, param: &str, value: f64) {
    match param {
        "gamma" => cfg.gamma = value,
        "shrinkage_lambda" => cfg.shrinkage_lambda = value,
        "prior_strength" => cfg.prior_strength = value,
        "availability_fraction" => cfg.availability_fraction = value,
        "imputation_epsilon" => cfg.imputation_epsilon = value,
        _ => unreachable!("checked against SWEEPABLE"),
    }
}

fn phase_means(values: &[Option<f64>], plan: &PhasePlan) -> [Option<f64>; 2] {
    let p1 = plan.phase1_days as usize;
    let mean = |xs: &[Option<f64>]| {
        let v: Vec<f64> = xs.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    [mean(&values[..p1.min(values.len())]), mean(&values[p1.min(values.len())..])]
}

fn cmd_sweep(config: Option<&Path>, param: &str, values: &[f64], seeds: &[u64], out: &Path, quiet: bool) -> anyhow::Result<()> {
    if !SWEEPABLE.contains(&param) {
        return Err(UsageError(format!("cannot sweep `{param}`; sweepable fields: {}", SWEEPABLE.join(", "))).into());
    }
    let base = load(config, None)?;
    let mut grid = Vec::new();
    for &value in values {
        let mut cfg = base.clone();
        set_param(&mut cfg, param, value);
        cfg.validate()?;
        for &seed in seeds {
            grid.push((value, ExperimentConfig { seed, ..cfg.clone() }));
        }
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = csv::Writer::from_writer(create(out, "sweep.csv")?);
    w.write_record(["param", "value", "seed", "metric", "phase", "value"])?;
    for (value, cfg) in &grid {
        let dir = out.join(format!("{param}={value}")).join(format!("seed={}", cfg.seed));
        let (_, effects) = simulate_into(cfg, &dir)?;
        let plan = PhasePlan::from_config(cfg);
        for e in &effects {
            for (phase, mean) in phase_means(&e.values, &plan).into_iter().enumerate() {
                let mean = mean.map(fmt_sig9).unwrap_or_default();
                w.write_record([param, &value.to_string(), &cfg.seed.to_string(), e.metric.name(), &(phase + 1).to_string(), &mean])?;
            }
        }
        if !quiet {
            eprintln!("{param} = {value}, seed {}: done", cfg.seed);
        }
    }
    w.flush()?;
    Ok(())
}

/// Run directories (those holding a metrics.csv) under `dir`, sorted.
fn find_runs(dir: &Path, runs: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if dir.join(METRICS_FILE).is_file() {
        runs.push(dir.to_owned());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    children.sort();
    for child in children.into_iter().filter(|p| p.is_dir()) {
        find_runs(&child, runs)?;
    }
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for dir in dirs {
        find_runs(dir, &mut runs)?;
    }
    if runs.is_empty() {
        bail!("no {METRICS_FILE} found under {}", dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["run", "day", "group", "phase", "metric", "value"])?;
    for run in &runs {
        let name = run.display().to_string();
        let mut rdr = csv::Reader::from_path(run.join(METRICS_FILE))?;
        for row in rdr.records() {
            let row = row?;
            w.write_record(std::iter::once(name.as_str()).chain(row.iter()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ucb_topics::Error>().is_some_and(ucb_topics::Error::is_usage)
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let q = cli.quiet;
    let result = match &cli.command {
        Command::Simulate { config, seed, out } => cmd_simulate(config.as_deref(), *seed, out, q),
        Command::Metrics { log, config, seed, out } => cmd_metrics(log, config.as_deref(), *seed, out, q),
        Command::Sweep { config, param, values, seeds, out } => cmd_sweep(config.as_deref(), param, values, seeds, out, q),
        Command::Report { dirs, out } => cmd_report(dirs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
