//! Command-line front end: build channel knowledge maps, run simulations,
//! check the leakage-surrogate error bounds and time the beamformer update.
//!
//! Every subcommand writes plain data files into `--out`. Floats in CSV files
//! carry 17 significant digits so they round-trip exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use sduscb::beamforming::{time_user_updates, BfConfig};
use sduscb::metrics::theorem1_mc;
use sduscb::scenario::{BfMode, ScenarioConfig};
use sduscb::simulator::{build_ckms, calibrate_noise, ckm_file_name, EpochTrace, Simulator};

#[derive(Debug, Parser)]
#[command(name = "sduscb", version, about = "Sensing-assisted multi-cell scheduling and beamforming simulator")]
struct Cli {
    /// Worker threads (default: all logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the channel knowledge map of every BS.
    BuildCkm(ScenarioArgs),
    /// Run the epoch loop and write traces.
    Simulate(SimulateArgs),
    /// Monte Carlo check of the leakage-surrogate rate error bounds.
    VerifyTheorem1(TheoremArgs),
    /// Time the per-user beamformer update with and without Woodbury updates.
    BenchBf(BenchArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Beamformer: sd-uscb, zero-leakage or slinr.
    #[arg(long)]
    baseline: Option<BfMode>,
    /// Override the sensing variance threshold.
    #[arg(long)]
    sensing_threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct TheoremArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Users scheduled in the other cells.
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Own-cell schedule sizes.
    #[arg(long = "s", value_delimiter = ',', default_values_t = vec![2usize, 5, 10])]
    s: Vec<usize>,
    /// Beam power.
    #[arg(long, default_value_t = 1.0)]
    power: f64,
    /// Noise power.
    #[arg(long, default_value_t = 1.0)]
    sigma_c2: f64,
    /// Monte Carlo draws per configuration.
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scenario file whose solver settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Antenna counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64])]
    n_tx: Vec<usize>,
    /// Scheduled users per instance.
    #[arg(long, default_value_t = 4)]
    users: usize,
    /// Sweeps over the users per timing batch.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    match cli.command {
        Command::BuildCkm(args) => build_ckm(&args),
        Command::Simulate(args) => simulate(&args),
        Command::VerifyTheorem1(args) => verify_theorem1(&args),
        Command::BenchBf(args) => bench_bf(&args),
    }
}

/// Load a scenario and apply the seed override. A relative map directory is
/// resolved against the scenario file's directory.
fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&args.config).with_context(|| format!("config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cfg.ckm.dir.as_mut() {
        if dir.is_relative() {
            if let Some(base) = args.config.parent() {
                *dir = base.join(&*dir);
            }
        }
    }
    Ok(cfg)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("output directory {}", out.display()))
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MapEntry {
    bs: usize,
    file: Option<String>,
    cells: usize,
    mean_rel_residual: Option<f64>,
    max_rel_residual: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BuildSummary {
    seed: u64,
    sigma_c2: f64,
    maps: Vec<MapEntry>,
}

fn build_ckm(args: &ScenarioArgs) -> Result<()> {
    let cfg = load_scenario(args)?;
    create_out(&args.out)?;
    let sigma_c2 = calibrate_noise(&cfg)?;
    let built = build_ckms(&cfg, sigma_c2)?;
    let mut maps = Vec::with_capacity(built.len());
    for (m, entry) in built.into_iter().enumerate() {
        match entry {
            Some((ckm, report)) => {
                let name = ckm_file_name(m);
                ckm.save(&args.out.join(&name))?;
                info!("wrote {name}");
                maps.push(MapEntry {
                    bs: m,
                    file: Some(name),
                    cells: report.cells,
                    mean_rel_residual: Some(report.mean_rel_residual),
                    max_rel_residual: Some(report.max_rel_residual),
                });
            }
            None => maps.push(MapEntry {
                bs: m,
                file: None,
                cells: 0,
                mean_rel_residual: None,
                max_rel_residual: None,
            }),
        }
    }
    write_json(
        &args.out.join("build_report.json"),
        &BuildSummary {
            seed: cfg.seed,
            sigma_c2,
            maps,
        },
    )
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_scenario(&args.scenario)?;
    if let Some(mode) = args.baseline {
        cfg.mode = mode;
    }
    if let Some(c) = args.sensing_threshold {
        cfg.sensing.threshold = c;
    }
    cfg.validate()?;
    let out = &args.scenario.out;
    create_out(out)?;
    let mut sim = Simulator::new(cfg)?;
    let summary = sim.run()?;
    write_trace(&out.join("trace.csv"), sim.traces())?;
    let mut w = csv::Writer::from_path(out.join("pfr_curve.csv"))?;
    w.write_record(["epoch", "pfr"])?;
    for t in sim.traces() {
        w.write_record([t.epoch.to_string(), fmt_f64(t.pfr)])?;
    }
    w.flush()?;
    write_json(&out.join("summary.json"), &summary)
}

/// One row per user and epoch.
fn write_trace(path: &Path, traces: &[EpochTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "cell",
        "user",
        "scheduled",
        "sinr",
        "signal",
        "intra_interference",
        "inter_interference",
        "rate",
        "avg_rate",
        "location_error_m",
        "pfr",
        "bytes_locations",
        "bytes_full_csi",
    ])?;
    for t in traces {
        for u in &t.users {
            w.write_record([
                t.epoch.to_string(),
                u.cell.to_string(),
                u.user.to_string(),
                u8::from(u.scheduled).to_string(),
                fmt_f64(u.sinr),
                fmt_f64(u.signal),
                fmt_f64(u.intra_interference),
                fmt_f64(u.inter_interference),
                fmt_f64(u.rate),
                fmt_f64(u.avg_rate),
                u.location_error.map(fmt_f64).unwrap_or_default(),
                fmt_f64(t.pfr),
                t.bytes_locations.to_string(),
                t.bytes_full_csi.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn verify_theorem1(args: &TheoremArgs) -> Result<()> {
    if args.s.is_empty() {
        bail!("at least one schedule size is required");
    }
    create_out(&args.out)?;
    let reports = args
        .s
        .iter()
        .map(|&s| theorem1_mc(args.m, s, args.power, args.sigma_c2, args.draws, args.seed).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    write_json(&args.out.join("theorem1.json"), &reports)
}

fn bench_bf(args: &BenchArgs) -> Result<()> {
    let solver = match &args.config {
        Some(path) => ScenarioConfig::load(path).with_context(|| format!("config {}", path.display()))?.solver,
        None => BfConfig::default(),
    };
    if args.n_tx.is_empty() {
        bail!("at least one antenna count is required");
    }
    create_out(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("timing.csv"))?;
    w.write_record([
        "n_tx",
        "n_users",
        "reps",
        "woodbury_secs",
        "direct_secs",
        "max_rel_diff",
    ])?;
    for &n in &args.n_tx {
        let t = time_user_updates(n, args.users, args.reps, args.seed, &solver)?;
        info!("n_tx {n}: woodbury {:.3e} s, direct {:.3e} s", t.woodbury_secs, t.direct_secs);
        w.write_record([
            t.n_tx.to_string(),
            t.n_users.to_string(),
            t.reps.to_string(),
            fmt_f64(t.woodbury_secs),
            fmt_f64(t.direct_secs),
            fmt_f64(t.max_rel_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}
