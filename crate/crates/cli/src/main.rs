//! `rating-sde` command-line pipeline.
//!
//! Exit codes: 0 success, 1 numerical or invariant failure, 2 unreadable or
//! malformed input, 3 invalid arguments.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use rating_sde::aalen_johansen::{estimate_grid, GridOptions};
use rating_sde::calibration::{calibrate, Bounds, CalibrationConfig, CalibrationResult};
use rating_sde::demo::{demo_history, DemoConfig};
use rating_sde::moments::{MomentSet, ObjectiveConfig};
use rating_sde::plots::{entry_panels, write_beta_curve_csv, write_histogram_csv, write_trajectory_csv};
use rating_sde::rating_data::{parse_history, parse_matrix_series, MatrixSeries, RatingScale};
use rating_sde::sde::{simulate_traced, Family, SimulationGrid, TraceOptions};
use rating_sde::synth::{bootstrap_series, combination_count, summarize_targets, BootstrapOptions, Pool};
use rating_sde::validator::report;
use rating_sde::{BasisIndex, Error};

mod config;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::File { .. } => 2,
            CliError::Usage(_) => 3,
            CliError::Core(e) => match e {
                Error::Io(_)
                | Error::Json(_)
                | Error::MalformedRow { .. }
                | Error::UnknownRating { .. }
                | Error::NonMonotoneDates { .. }
                | Error::RatingAfterDefault { .. }
                | Error::RowSum { .. }
                | Error::NegativeEntry { .. } => 2,
                Error::InvalidArgument(_)
                | Error::InvalidScale(_)
                | Error::Shape(_)
                | Error::IndexOutOfRange(_)
                | Error::MissingReference
                | Error::PeriodTooShort { .. } => 3,
                _ => 1,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "rating-sde", version, about = "Rating transition matrix estimation, simulation and calibration")]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Simulation time step in years, e.g. `1/360`.
    #[arg(long, global = true, default_value = "1/360", value_parser = parse_step)]
    step: u32,
    /// TOML file of `flag = value` defaults; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Aalen-Johansen matrices for every window of each span.
    Estimate(EstimateArgs),
    /// Bootstrap multi-time target series from per-span pools.
    Bootstrap(BootstrapArgs),
    /// Fit CIR or gEM parameters to target moments.
    Calibrate(CalibrateArgs),
    /// Simulate matrix paths from fitted parameters.
    Simulate(SimulateArgs),
    /// Property percentages of a matrix series.
    Validate(ValidateArgs),
    /// Histogram, beta-fit and property tables of a matrix series.
    Report(ReportArgs),
    /// Write a synthetic rating history.
    DemoHistory(DemoArgs),
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// CSV with columns entity_id,date,rating.
    #[arg(long)]
    history: PathBuf,
    /// Rating labels, best first and default last.
    #[arg(long, value_delimiter = ',', default_value = "A,B,C,D")]
    labels: Vec<String>,
    /// Start of the first window; defaults to the first event date.
    #[arg(long)]
    start: Option<NaiveDate>,
    /// Last observed day; defaults to the last event date.
    #[arg(long)]
    end: Option<NaiveDate>,
    /// Window lengths in months.
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,12")]
    spans: Vec<u32>,
    /// Start a window every month instead of tiling.
    #[arg(long)]
    rolling: bool,
    /// Output directory, or a `.json` path whose stem prefixes the per-span files.
    #[arg(long, visible_alias = "out-dir")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    /// Single-time series files, one per span, shortest first.
    #[arg(long, value_delimiter = ',', required = true)]
    pools: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Keep only samples whose diagonals do not increase over time.
    #[arg(long)]
    filter_irs: bool,
    #[arg(long, default_value_t = rating_sde::synth::DEFAULT_RETRY_CAP)]
    retry_cap: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the target moments here.
    #[arg(long)]
    moments_out: Option<PathBuf>,
    /// Highest moment order written with `--moments-out`.
    #[arg(long, default_value_t = 4)]
    moments: usize,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Target as a matrix series or a moment file.
    #[arg(long, visible_alias = "target")]
    targets: PathBuf,
    #[arg(long)]
    family: Family,
    /// Highest matched moment order.
    #[arg(long, default_value_t = 4)]
    moments: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,10,1,1")]
    weights: Vec<f64>,
    /// Objective times in years; `a/b` fractions are accepted.
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = parse_time)]
    times: Vec<f64>,
    /// Model trajectories per objective evaluation.
    #[arg(long = "M-model", visible_alias = "m-model", default_value_t = 1000)]
    m_model: usize,
    #[arg(long, default_value_t = rating_sde::calibration::DEFAULT_STARTS)]
    starts: usize,
    #[arg(long, default_value_t = rating_sde::calibration::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Upper bound for every parameter; 1 for CIR and 2 for gEM by default.
    #[arg(long)]
    upper: Option<f64>,
    /// Starting parameters from an earlier result file.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda2: f64,
    /// Series whose first sample is the penalty reference.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Calibration result or parameter file.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1/12,3/12,6/12,1", value_parser = parse_time)]
    times: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    /// Rating labels; generic numbers when omitted and the dimension is not 4.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
    /// Also write traced trajectories of one entry as CSV.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Entry of the trajectory file, 1-based `from-to`.
    #[arg(long, default_value = "1-4")]
    entry: String,
    #[arg(long, default_value_t = 20)]
    trace_paths: usize,
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
    /// Also write entry histograms with beta fits as CSV.
    #[arg(long)]
    histograms: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    series: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    bins: usize,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    entities: usize,
    #[arg(long)]
    start: Option<NaiveDate>,
    #[arg(long)]
    end: Option<NaiveDate>,
}

fn parse_time(s: &str) -> std::result::Result<f64, String> {
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(format!("{s}: time must be positive"))
    }
}

fn parse_step(s: &str) -> std::result::Result<u32, String> {
    let dt = parse_time(s)?;
    let per_year = (1.0 / dt).round();
    if per_year < 1.0 || ((1.0 / dt) - per_year).abs() > 1e-6 * per_year || per_year > u32::MAX as f64 {
        return Err(format!("{s}: step must be 1/n years for a positive integer n"));
    }
    Ok(per_year as u32)
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|source| CliError::File {
            path: path.to_path_buf(),
            source,
        })
}

fn read_series(path: &Path) -> CliResult<MatrixSeries> {
    Ok(parse_matrix_series(open(path)?)?)
}

fn scale_for(labels: Option<Vec<String>>, dim: usize) -> CliResult<RatingScale> {
    let scale = match labels {
        Some(l) => RatingScale::new(l)?,
        None if dim == 4 => RatingScale::abcd(),
        None => RatingScale::new((1..=dim).map(|i| i.to_string()))?,
    };
    if scale.dim() != dim {
        return Err(CliError::Usage(format!("{} labels given for dimension {dim}", scale.dim())));
    }
    Ok(scale)
}

fn run_estimate(a: EstimateArgs) -> CliResult<()> {
    let history = parse_history(open(&a.history)?, RatingScale::new(a.labels)?)?;
    let start = match a.start.or_else(|| history.first_date()) {
        Some(s) => s,
        None => return Err(CliError::Usage(format!("{}: history is empty", a.history.display()))),
    };
    let options = GridOptions {
        start,
        end: a.end,
        spans: a.spans,
        disjoint: !a.rolling,
    };
    let pools = estimate_grid(&history, &options)?;
    let is_file = a.out.extension().is_some_and(|e| e == "json");
    for pool in &pools {
        let path = if is_file {
            let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            a.out.with_file_name(format!("{stem}_{:02}m.json", pool.span_months))
        } else {
            a.out.join(format!("span_{:02}m.json", pool.span_months))
        };
        let mut w = create(&path)?;
        pool.to_series(&history).write_json(&mut w)?;
        w.flush().map_err(|source| CliError::File { path: path.clone(), source })?;
        println!("{:>3} months: {:>4} windows -> {}", pool.span_months, pool.len(), path.display());
    }
    Ok(())
}

fn run_bootstrap(a: BootstrapArgs, seed: u64) -> CliResult<()> {
    let series = a.pools.iter().map(|p| read_series(p)).collect::<CliResult<Vec<_>>>()?;
    let scale = series[0].scale.clone();
    if series.iter().any(|s| s.scale != scale) {
        return Err(CliError::Usage("pool files use different rating labels".into()));
    }
    let pools = series.iter().map(Pool::from_series).collect::<Result<Vec<_>, _>>()?;
    let options = BootstrapOptions {
        samples: a.samples,
        seed,
        filter_irs: a.filter_irs,
        retry_cap: a.retry_cap,
    };
    let out = bootstrap_series(&pools, &scale, &options)?;
    let mut w = create(&a.out)?;
    out.write_json(&mut w)?;
    w.flush().map_err(|source| CliError::File { path: a.out.clone(), source })?;
    println!(
        "{} samples at {} times from {} combinations -> {}",
        out.sample_count(),
        out.times.len(),
        combination_count(&pools),
        a.out.display()
    );
    if let Some(path) = a.moments_out {
        let m = summarize_targets(&out, a.moments)?;
        let mut w = create(&path)?;
        m.write_json(&mut w)?;
        w.flush().map_err(|source| CliError::File { path: path.clone(), source })?;
        println!("moments up to order {} -> {}", a.moments, path.display());
    }
    Ok(())
}

/// A matrix series is summarized; anything else must be a moment file.
fn read_target(path: &Path, order: usize) -> CliResult<MomentSet> {
    let text = read_text(path)?;
    match parse_matrix_series(text.as_bytes()) {
        Ok(series) => Ok(summarize_targets(&series, order)?),
        Err(series_err) => MomentSet::read_json(text.as_bytes()).map_err(|_| CliError::Core(series_err)),
    }
}

fn run_calibrate(a: CalibrateArgs, seed: u64, step: u32) -> CliResult<()> {
    if a.moments >= 2 && a.m_model < 2 {
        return Err(CliError::Usage(format!(
            "variance needs M >= 2 model trajectories, got --M-model {}",
            a.m_model
        )));
    }
    let target = read_target(&a.targets, a.moments)?;
    let dim = target.dim();
    let reference = match &a.reference {
        Some(p) => {
            let s = read_series(p)?;
            let first = s
                .samples
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Usage(format!("{}: reference series is empty", p.display())))?;
            Some(first)
        }
        None => None,
    };
    let objective = ObjectiveConfig {
        order: a.moments,
        weights: a.weights,
        times: a.times,
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        reference,
    };
    let mut cfg = CalibrationConfig::new(a.family, dim);
    cfg.objective = objective;
    cfg.model_paths = a.m_model;
    cfg.steps_per_year = step;
    cfg.seed = seed;
    cfg.starts = a.starts;
    cfg.max_iter = a.max_iter;
    if let Some(u) = a.upper {
        cfg.bounds = Some(Bounds::uniform(3 * rating_sde::lie::coord_count(dim), 0.0, u));
    }
    if let Some(p) = &a.init {
        let params = CalibrationResult::params_from_json(&read_text(p)?)?;
        if params.family() != a.family || params.dim() != dim {
            return Err(CliError::Usage(format!(
                "{}: initial parameters do not match family {} and dimension {dim}",
                p.display(),
                a.family
            )));
        }
        cfg.init = Some(params.to_vector());
    }
    let result = calibrate(&target, &cfg)?;
    write_text(&a.out, &(result.to_json()? + "\n"))?;
    let table = result.params.format_table();
    let table_path = if a.out.extension().is_some_and(|e| e == "txt") {
        a.out.with_extension("table.txt")
    } else {
        a.out.with_extension("txt")
    };
    write_text(&table_path, &table)?;
    print!("{table}");
    println!(
        "objective {:.6e} (start {:.6e}), {} iterations, {:?}",
        result.objective, result.initial_objective, result.iterations, result.status
    );
    Ok(())
}

fn parse_entry(s: &str, dim: usize) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("entry {s:?} must look like 1-4"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let from: usize = a.trim().parse().map_err(|_| bad())?;
    let to: usize = b.trim().parse().map_err(|_| bad())?;
    if from == 0 || to == 0 {
        return Err(bad());
    }
    if from > dim || to > dim {
        return Err(CliError::Usage(format!("entry {s} outside {dim}x{dim}")));
    }
    Ok((from - 1, to - 1))
}

fn run_simulate(a: SimulateArgs, seed: u64, step: u32) -> CliResult<()> {
    let params = CalibrationResult::params_from_json(&read_text(&a.params)?)?;
    let scale = scale_for(a.labels, params.dim())?;
    let grid = SimulationGrid::new(step, &a.times, a.paths, seed)?;
    let entry = match &a.trajectories {
        Some(_) => Some(parse_entry(&a.entry, params.dim())?),
        None => None,
    };
    let trace = a.trajectories.as_ref().map(|_| TraceOptions {
        every: a.trace_every.max(1),
        paths: a.trace_paths.min(a.paths),
    });
    let ens = simulate_traced(&params, &grid, trace)?;
    let series = ens.to_series(&scale)?;
    let mut w = create(&a.out)?;
    series.write_json(&mut w)?;
    w.flush().map_err(|source| CliError::File { path: a.out.clone(), source })?;
    println!("{} {} paths at {} times -> {}", params.family(), a.paths, series.times.len(), a.out.display());
    if let (Some(path), Some((from, to)), Some(t)) = (&a.trajectories, entry, &ens.trace) {
        let mut w = create(path)?;
        write_trajectory_csv(&grid, t, from, to, &mut w)?;
        w.flush().map_err(|source| CliError::File { path: path.clone(), source })?;
        println!("trajectories of {}-{} -> {}", from + 1, to + 1, path.display());
    }
    if let Some(path) = &a.histograms {
        let panels = entry_panels(&series, a.bins)?;
        let mut w = create(path)?;
        write_histogram_csv(&panels, &mut w)?;
        w.flush().map_err(|source| CliError::File { path: path.clone(), source })?;
        println!("histograms -> {}", path.display());
    }
    Ok(())
}

fn run_validate(a: ValidateArgs) -> CliResult<()> {
    let series = read_series(&a.series)?;
    let table = report(&series.samples, &series.times);
    print!("{}", table.to_text());
    if let Some(path) = a.csv {
        let mut w = create(&path)?;
        table.write_csv(&mut w)?;
    }
    Ok(())
}

fn run_report(a: ReportArgs) -> CliResult<()> {
    let series = read_series(&a.series)?;
    let panels = entry_panels(&series, a.bins)?;
    let hist = a.out_dir.join("histograms.csv");
    write_histogram_csv(&panels, create(&hist)?)?;
    let curves = a.out_dir.join("beta_curves.csv");
    write_beta_curve_csv(&panels, create(&curves)?)?;
    let props = a.out_dir.join("properties.csv");
    let table = report(&series.samples, &series.times);
    table.write_csv(create(&props)?)?;
    write_text(&a.out_dir.join("properties.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    let labels: Vec<String> = BasisIndex::all(series.scale.dim()).map(|b| b.label()).collect();
    println!("{} entries ({}) -> {}", labels.len(), labels.join(" "), a.out_dir.display());
    Ok(())
}

fn run_demo(a: DemoArgs, seed: u64) -> CliResult<()> {
    let mut cfg = DemoConfig::abcd(seed);
    cfg.initial_entities = a.entities;
    if let Some(s) = a.start {
        cfg.start = s;
    }
    if let Some(e) = a.end {
        cfg.end = e;
    }
    let history = demo_history(&RatingScale::abcd(), &cfg)?;
    let mut w = create(&a.out)?;
    history.write_csv(&mut w)?;
    w.flush().map_err(|source| CliError::File { path: a.out.clone(), source })?;
    println!(
        "{} entities, {} events -> {}",
        history.entity_count(),
        history.event_count(),
        a.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if cli.step == 0 {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    match cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Bootstrap(a) => run_bootstrap(a, cli.seed),
        Command::Calibrate(a) => run_calibrate(a, cli.seed, cli.step),
        Command::Simulate(a) => run_simulate(a, cli.seed, cli.step),
        Command::Validate(a) => run_validate(a),
        Command::Report(a) => run_report(a),
        Command::DemoHistory(a) => run_demo(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let args = match config::merged_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
