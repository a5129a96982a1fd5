//! Command-line frontend.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::harness::{self, run_suite, ResultSet, TimingConfig};
use crate::microbench::{self, BenchConfig, Clock, MonotonicClock, StepClock};
use crate::model::{bound_estimate, MachineSpec, OutputConvention, Precision};
use crate::report::{self, Band};
use crate::workloads::resolve_suite;

#[derive(Debug, Parser)]
#[command(name = "cachebound", version, about = "Cache-bound performance analysis for CPU operators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure peak MAC throughput and per-level memory bandwidth; write a machine spec
    Probe(ProbeArgs),
    /// Time operators over a workload suite; write a result set
    Bench(BenchArgs),
    /// Classify results against the cache-bound model; write the roofline CSV
    Analyze(AnalyzeArgs),
    /// Print MAC counts and model bounds for a suite without running anything
    Model(ModelArgs),
    /// Write the reference result set and machine spec for regression runs
    Fixtures(FixturesArgs),
}

#[derive(Debug, Args)]
pub struct Workers {
    /// Worker threads [default: available parallelism]
    #[arg(long, env = "CACHEBOUND_WORKERS")]
    pub workers: Option<usize>,
}

impl Workers {
    fn get(&self) -> Result<usize> {
        match self.workers {
            Some(0) => Err(Error::invalid("--workers must be at least 1")),
            Some(n) => Ok(n),
            None => Ok(microbench::default_workers()),
        }
    }
}

fn clock(step_ns: Option<u64>) -> Arc<dyn Clock> {
    match step_ns {
        Some(ns) => Arc::new(StepClock::new(Duration::from_nanos(ns))),
        None => Arc::new(MonotonicClock::default()),
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Output path for the machine spec JSON
    #[arg(long, short)]
    pub output: PathBuf,
    /// Machine spec whose declared parameters and levels are kept; bandwidths and peak are re-measured
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[command(flatten)]
    pub workers: Workers,
    /// Timed repetitions per benchmark (at least 3)
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Bytes each worker moves per bandwidth repetition
    #[arg(long, default_value_t = 1 << 30)]
    pub pass_bytes: u64,
    /// MACs per peak-benchmark repetition, summed over workers
    #[arg(long, default_value_t = 20_000_000_000)]
    pub peak_macs: u64,
    /// Replace the timer with a fake clock that advances this many nanoseconds per read
    #[arg(long)]
    pub step_clock_ns: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Workload suite: `resnet18`, `gemm:<n>[,<n>...]`, or a suite file
    #[arg(long)]
    pub suite: String,
    /// Comma-separated precisions: f32, i8, bs<a>x<w>u, bs<a>x<w>b
    #[arg(long, default_value = "f32")]
    pub precision: String,
    /// Machine spec recorded with the results [default: host description]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output path for the result set JSON
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub workers: Workers,
    /// Untimed warmup runs per measurement
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Minimum timed runs per measurement (at least 3)
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Keep adding runs until this many seconds have been timed
    #[arg(long, default_value_t = 0.2)]
    pub min_time: f64,
    /// Replace the timer with a fake clock that advances this many nanoseconds per read
    #[arg(long)]
    pub step_clock_ns: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Machine spec JSON
    #[arg(long)]
    pub spec: PathBuf,
    /// Result set JSON
    #[arg(long)]
    pub results: PathBuf,
    /// Roofline CSV output path [default: print CSV to stdout]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Plain-text report output path [default: print report to stdout when --output is given]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Consistency band as `low,high` on measured/bound
    #[arg(long, default_value = "0.5,2.0")]
    pub band: String,
    /// Precision used as the speedup baseline
    #[arg(long, default_value = "f32")]
    pub baseline: String,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Workload suite: `resnet18`, `gemm:<n>[,<n>...]`, or a suite file
    #[arg(long)]
    pub suite: String,
    /// Output-size convention for convolution MACs: paper or standard
    #[arg(long, default_value = "standard")]
    pub convention: String,
    /// Machine spec JSON; when given, bound times are printed too
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated precisions for bound times: f32, i8, bs<a>x<w>u, bs<a>x<w>b
    #[arg(long, default_value = "f32")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    /// Reference machine: a53 or a72
    #[arg(long, default_value = "a53")]
    pub machine: String,
    /// Output path for the fixture result set JSON
    #[arg(long, short)]
    pub output: PathBuf,
    /// Also write the matching machine spec JSON here
    #[arg(long)]
    pub spec_output: Option<PathBuf>,
}

/// Parse a comma-separated precision list.
pub fn parse_precisions(list: &str) -> Result<Vec<Precision>> {
    let mut out: Vec<Precision> = Vec::new();
    for item in list.split(',').map(str::trim) {
        if item.is_empty() {
            return Err(Error::invalid(format!("empty entry in precision list `{list}`")));
        }
        let p: Precision = item.parse()?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn distinct_paths(paths: &[&Path]) -> Result<()> {
    for (i, a) in paths.iter().enumerate() {
        for b in &paths[i + 1..] {
            if a == b {
                return Err(Error::invalid(format!(
                    "path {} is given for two different roles",
                    a.display()
                )));
            }
        }
    }
    Ok(())
}

fn probe(args: &ProbeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if let Some(t) = &args.template {
        distinct_paths(&[t, &args.output])?;
    }
    let template = match &args.template {
        Some(p) => harness::load_spec(p)?,
        None => microbench::host_template(),
    };
    let cfg = BenchConfig {
        workers: args.workers.get()?,
        repetitions: args.reps,
        per_pass_bytes: args.pass_bytes,
        macs_total: args.peak_macs,
        clock: clock(args.step_clock_ns),
    };
    let spec = microbench::probe_machine(&cfg, &template)?;
    harness::save_spec(&spec, &args.output)?;
    let _ = writeln!(out, "{}", summarize_spec(&spec));
    for w in &spec.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    Ok(())
}

fn summarize_spec(spec: &MachineSpec) -> String {
    let mut s = format!("{}:", spec.name);
    if let Some(p) = spec.measured_peak {
        s += &format!(" peak {:.2} GFLOP/s", p / 1e9);
    }
    for l in &spec.memory_levels {
        s += &format!(
            "; {} read {:.0} MiB/s write {:.0} MiB/s",
            l.label,
            l.read_bw / crate::model::MIB,
            l.write_bw / crate::model::MIB
        );
    }
    s
}

fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(s) = &args.spec {
        distinct_paths(&[s, &args.output])?;
    }
    if !(args.min_time.is_finite() && args.min_time >= 0.0) {
        return Err(Error::invalid("--min-time must be a non-negative number"));
    }
    let suite = resolve_suite(&args.suite)?;
    let precisions = parse_precisions(&args.precision)?;
    let machine = match &args.spec {
        Some(p) => harness::load_spec(p)?,
        None => microbench::host_template(),
    };
    let cfg = TimingConfig {
        warmup: args.warmup,
        reps: args.reps,
        workers: args.workers.get()?,
        min_total_time: args.min_time,
        clock: clock(args.step_clock_ns),
        ..TimingConfig::default()
    };
    let set = run_suite(&suite, &precisions, &cfg, machine)?;
    harness::save_results(&set, &args.output)?;
    for m in &set.measurements {
        let _ = writeln!(
            out,
            "{} {} {}: median {:.6} s, {:.3} GFLOP/s",
            m.workload_label,
            m.precision,
            m.kernel_id,
            m.stats.median,
            m.derived_performance / 1e9
        );
    }
    for s in &set.skipped {
        let _ = writeln!(out, "{} {}: skipped ({})", s.workload_label, s.precision, s.reason);
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let mut paths: Vec<&Path> = vec![&args.spec, &args.results];
    paths.extend(args.output.as_deref());
    paths.extend(args.report.as_deref());
    distinct_paths(&paths)?;
    let band: Band = args.band.parse()?;
    let baseline: Precision = args.baseline.parse()?;
    let spec = harness::load_spec(&args.spec)?;
    let results: ResultSet = harness::load_results(&args.results)?;
    let csv = report::roofline_csv(&results, &spec, band)?;
    let text = report::render_text(&results, &spec, band, baseline)?;
    match &args.output {
        Some(p) => std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        None => {
            let _ = out.write_all(csv.as_bytes());
        }
    }
    match &args.report {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None if args.output.is_some() => {
            let _ = out.write_all(text.as_bytes());
        }
        None => {}
    }
    Ok(())
}

fn model(args: &ModelArgs, out: &mut dyn Write) -> Result<()> {
    let suite = resolve_suite(&args.suite)?;
    let convention: OutputConvention = args.convention.parse()?;
    let precisions = parse_precisions(&args.precision)?;
    let spec = args.spec.as_ref().map(harness::load_spec).transpose()?;
    let _ = writeln!(out, "suite {} ({} convention)", suite.name(), convention);
    for item in suite.items() {
        let macs = item.shape.macs(convention)?;
        let _ = writeln!(out, "{} {} macs={}", item.label, item.shape.kind(), macs);
        if let Some(spec) = &spec {
            for p in &precisions {
                let est = bound_estimate(macs, p, spec)?;
                let bounds: Vec<String> = est
                    .bounds()
                    .map(|(l, t)| format!("{l}={t:.6}s"))
                    .collect();
                let _ = writeln!(
                    out,
                    "  {p}: {} limiting={}",
                    bounds.join(" "),
                    est.limiting_label
                );
            }
        }
    }
    Ok(())
}

fn write_fixtures(args: &FixturesArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(s) = &args.spec_output {
        distinct_paths(&[s, &args.output])?;
    }
    let (spec, results) = fixtures::by_name(&args.machine).ok_or_else(|| {
        Error::invalid(format!("unknown fixture machine `{}` (expected a53 or a72)", args.machine))
    })?;
    harness::save_results(&results, &args.output)?;
    if let Some(p) = &args.spec_output {
        harness::save_spec(&spec, p)?;
    }
    let _ = writeln!(
        out,
        "wrote {} fixture rows for {}",
        results.measurements.len(),
        spec.name
    );
    Ok(())
}

/// Run the CLI on `args` (including the program name). Returns the exit code:
/// 0 on success, 1 for invalid input, 2 for failures while running.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Probe(a) => probe(a, out, err),
        Command::Bench(a) => bench(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Model(a) => model(a, out),
        Command::Fixtures(a) => write_fixtures(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
