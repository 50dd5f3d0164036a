//! `rocband`: ROC confidence bands from CSV data, and simulation studies.
//!
//! Exit codes: 0 success, 1 invalid input, 2 statistically degenerate
//! output (a band built from an empty score pool, or too many failed
//! replications). Outputs are written in the degenerate case too.

mod manifest;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformal_roc::data::load_csv;
use conformal_roc::kernel::KernelConfig;
use conformal_roc::model::ModelSpec;
use conformal_roc::multilabel::{
    band_multilabel, band_multilabel_noniid, bands_all_classes, weighted_average_bands, AverageWeights,
};
use conformal_roc::noniid::{band_noniid, Center, NeighborhoodConfig};
use conformal_roc::roc::{band_iid, BandResult, BandSettings, LambdaGrid};
use conformal_roc::sim::{
    run_coverage_experiment, run_sample_size_sweep, write_sweep_csv, StudyConfig, DEFAULT_SWEEP_SIZES,
};
use conformal_roc::Error;
use serde::de::DeserializeOwned;

use crate::manifest::RunManifest;

/// Minimum fraction of successful replications for a clean exit.
const MIN_SUCCESS_RATE: f64 = 0.9;

#[derive(Debug, Parser)]
#[command(name = "rocband", version, about = "Conformal confidence bands for ROC curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute a TPR/FPR confidence band for a test set.
    Band(BandArgs),
    /// Run a simulation study and report interval coverage.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct BandArgs {
    /// Observed (training + calibration) data, CSV.
    #[arg(long)]
    obs: PathBuf,
    /// Test data, CSV with the same feature columns.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    alpha: f64,
    /// Seed of the train/calibration split.
    #[arg(long)]
    seed: u64,
    /// Model spec JSON, e.g. {"features":[0,1,2]}.
    #[arg(long)]
    model: PathBuf,
    /// Kernel config JSON, e.g. {"bandwidth":"silverman"}. Default: Silverman.
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Use neighbourhood-localized intervals for shifted test data.
    #[arg(long, requires = "neighborhood")]
    noniid: bool,
    /// Neighbourhood config JSON (with --noniid).
    #[arg(long)]
    neighborhood: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Target class for multi-class data (one-vs-rest).
    #[arg(long, conflicts_with = "average_weights")]
    label: Option<u32>,
    /// Average one-vs-rest bands over all classes (needs --grid uniform:K).
    #[arg(long, value_parser = parse_from_str::<AverageWeights>)]
    average_weights: Option<AverageWeights>,
    /// Threshold grid: uniform:K, jumps or both.
    #[arg(long, default_value = "both", value_parser = parse_from_str::<LambdaGrid>)]
    grid: LambdaGrid,
    /// Draw a fresh split for every test point.
    #[arg(long)]
    resplit_per_point: bool,
    /// Centre of localized intervals: p_hat or pi_tilde (overrides the
    /// neighbourhood config).
    #[arg(long, value_parser = parse_from_str::<Center>)]
    center: Option<Center>,
    /// Name of the label column.
    #[arg(long, default_value = "y")]
    label_column: String,
    /// Fraction of observed data used for training.
    #[arg(long, default_value_t = conformal_roc::data::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Study config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; output does not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Repeat the study at each observed-sample size, e.g. 100,200,500.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    sizes: Vec<usize>,
    /// Sweep the default sample sizes (100,200,500,1000,2000).
    #[arg(long, conflicts_with = "sizes")]
    sweep: bool,
}

fn parse_from_str<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr<Err = Error>,
{
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a command: a message and an exit code.
struct Failure(String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(e.to_string())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure(format!("invalid {what} {}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))
}

fn write_band_outputs(dir: &Path, result: &BandResult) -> Result<(), Failure> {
    result.band.write_csv(create(dir, "band.csv")?)?;
    result.write_intervals_csv(create(dir, "intervals.csv")?)?;
    Ok(())
}

fn cmd_band(args: &BandArgs, argv: &[String]) -> Result<bool, Failure> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure("alpha must be in (0,1)".into()));
    }
    let obs = load_csv(&args.obs, &args.label_column)?;
    let test = load_csv(&args.test, &args.label_column)?;
    let spec: ModelSpec = read_json(&args.model, "model spec")?;
    let kernel: KernelConfig = match &args.kernel {
        Some(p) => read_json(p, "kernel config")?,
        None => KernelConfig::default(),
    };
    let ncfg: Option<NeighborhoodConfig> = match (&args.neighborhood, args.noniid) {
        (Some(p), true) => {
            let mut n: NeighborhoodConfig = read_json(p, "neighborhood config")?;
            if let Some(c) = args.center {
                n.center = c;
            }
            Some(n)
        }
        (Some(_), false) => {
            log::warn!("--neighborhood ignored without --noniid");
            None
        }
        _ => None,
    };
    let settings = BandSettings {
        alpha: args.alpha,
        split_seed: args.seed,
        train_fraction: args.train_fraction,
        grid: args.grid.clone(),
        resplit_per_point: args.resplit_per_point,
    };

    let mut inputs: Vec<&Path> = vec![&args.obs, &args.test, &args.model];
    inputs.extend(args.kernel.as_deref());
    inputs.extend(args.neighborhood.as_deref());

    fs::create_dir_all(&args.out)?;
    let degenerate = if let Some(weights) = args.average_weights {
        if !settings.grid.is_uniform() {
            return Err(Failure("--average-weights needs --grid uniform:K".into()));
        }
        let per_class = bands_all_classes(&obs, &test, &spec, &kernel, ncfg.as_ref(), &settings)?;
        let labels: Vec<u32> = per_class.iter().map(|(l, _)| *l).collect();
        let bands: Vec<_> = per_class.iter().map(|(_, r)| r.band.clone()).collect();
        let avg = weighted_average_bands(&bands, &weights.weights(&test, &labels))?;
        avg.write_csv(create(&args.out, "band.csv")?)?;
        let mut w = create(&args.out, "intervals.csv")?;
        write_target_intervals(&mut w, &per_class)?;
        for (l, r) in &per_class {
            r.band.write_csv(create(&args.out, &format!("band_class_{l}.csv"))?)?;
        }
        per_class.iter().flat_map(|(_, r)| &r.warnings).map(|w| eprintln!("warning: {w}")).count() > 0
    } else {
        let result = match (args.label, &ncfg) {
            (None, None) => band_iid(&obs, &test, &spec, &kernel, &settings)?,
            (None, Some(n)) => band_noniid(&obs, &test, &spec, &kernel, n, &settings)?,
            (Some(l), None) => band_multilabel(&obs, &test, l, &spec, &kernel, &settings)?,
            (Some(l), Some(n)) => band_multilabel_noniid(&obs, &test, l, &spec, &kernel, n, &settings)?,
        };
        write_band_outputs(&args.out, &result)?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        result.is_degenerate()
    };

    RunManifest::new("band", argv, &inputs, args.seed)?.write(&args.out.join("manifest.json"))?;
    Ok(!degenerate)
}

/// Intervals of every one-vs-rest problem, with the target class appended.
fn write_target_intervals(
    w: &mut BufWriter<File>,
    per_class: &[(u32, BandResult)],
) -> Result<(), Failure> {
    use std::io::Write;
    writeln!(w, "test_index,label,p_hat,lo,up,alpha,target")?;
    for (l, r) in per_class {
        for iv in &r.intervals {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                iv.test_index, iv.label, iv.p_hat, iv.lo, iv.up, iv.alpha, l
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, argv: &[String]) -> Result<bool, Failure> {
    let cfg: StudyConfig = read_json(&args.config, "study config")?;
    cfg.validate()?;
    if args.jobs == 0 {
        return Err(Failure("--jobs must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Failure(e.to_string()))?;
    let sizes: Vec<usize> = if args.sweep { DEFAULT_SWEEP_SIZES.to_vec() } else { args.sizes.clone() };
    if !sizes.is_empty() {
        let sweep = pool.install(|| run_sample_size_sweep(&cfg, &sizes))?;
        fs::create_dir_all(&args.out)?;
        let reports: Vec<_> = sweep.iter().map(|(_, r)| r).collect();
        serde_json::to_writer_pretty(create(&args.out, "sweep.json")?, &reports).map_err(|e| Failure(e.to_string()))?;
        write_sweep_csv(&sweep, create(&args.out, "sweep.csv")?)?;
        RunManifest::new("simulate", argv, &[args.config.as_path()], cfg.base_seed)?
            .write(&args.out.join("manifest.json"))?;
        for (n, r) in &sweep {
            print!("n_obs = {n}\n{}", r.summary_table());
        }
        return Ok(sweep.iter().all(|(_, r)| r.success_rate() >= MIN_SUCCESS_RATE));
    }
    let report = pool.install(|| run_coverage_experiment(&cfg))?;

    fs::create_dir_all(&args.out)?;
    report.write_json(create(&args.out, "coverage.json")?)?;
    report.write_csv(create(&args.out, "coverage.csv")?)?;
    RunManifest::new("simulate", argv, &[args.config.as_path()], cfg.base_seed)?
        .write(&args.out.join("manifest.json"))?;
    print!("{}", report.summary_table());
    Ok(report.success_rate() >= MIN_SUCCESS_RATE)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let outcome = match &cli.command {
        Command::Band(a) => cmd_band(a, &argv),
        Command::Simulate(a) => cmd_simulate(a, &argv),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
