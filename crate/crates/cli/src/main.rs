//! `enkf`: prep, calc, update and stats stages over parameter files, plus
//! the twin-experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use enkf_core::calc::{self, CalcOptions, SingleObs, SinglePos};
use enkf_core::geo::Grid;
use enkf_core::io::{self, ObsStatus};
use enkf_core::obsprep::{self, PrepOptions};
use enkf_core::prm::{describe_format, DaConfig, Mode};
use enkf_core::twin::{run_twin, Scenario, TwinConfig};
use enkf_core::update::{self, UpdateOptions};

#[derive(Parser)]
#[command(name = "enkf", version, about = "Ensemble data assimilation: prep, calc, update")]
struct Cli {
    /// Worker threads for calc and update (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Read, locate and superob observations.
    Prep(PrepArgs),
    /// Compute ensemble transforms, statistics and point logs.
    Calc(CalcArgs),
    /// Apply transforms to the ensemble (or background) fields.
    Update(UpdateArgs),
    /// Forecast observation statistics only (same as calc --forecast-stats-only).
    Stats(StatsArgs),
    /// Run a twin experiment and print per-cycle metrics as CSV.
    Twin(TwinArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Main parameter file.
    #[arg(required_unless_present = "describe_prm_format")]
    prm: Option<PathBuf>,
    /// Describe the format of a parameter file and exit.
    #[arg(long, num_args = 0..=1, default_missing_value = "main", value_name = "main|model|grid|obstypes|obsdata")]
    describe_prm_format: Option<String>,
    /// Print the composition of this superobservation and exit.
    #[arg(long, value_name = "SOB")]
    describe_superob: Option<usize>,
    /// Increase the error of a superobservation with large subgrid variability.
    #[arg(long)]
    consider_subgrid_variability: bool,
    /// Put all observations into observations-orig.csv (default: within the model domain only).
    #[arg(long)]
    log_all_obs: bool,
    #[arg(long)]
    no_superobing: bool,
}

#[derive(Args)]
struct CalcArgs {
    /// Main parameter file.
    #[arg(required_unless_present = "describe_prm_format")]
    prm: Option<PathBuf>,
    /// Describe the format of a parameter file and exit.
    #[arg(long, num_args = 0..=1, default_missing_value = "main", value_name = "main|model|grid|obstypes")]
    describe_prm_format: Option<String>,
    /// Calculate and print forecast observation stats only.
    #[arg(long)]
    forecast_stats_only: bool,
    /// Proceed even if there are no observations.
    #[arg(long)]
    ignore_no_obs: bool,
    /// Update ensemble anomalies only.
    #[arg(long)]
    no_mean_update: bool,
    /// Skip the transforms for the whole grid and the observation stats.
    #[arg(long)]
    point_logs_only: bool,
    /// Calculate and print biases for each batch of observations.
    #[arg(long)]
    print_batch_stats: bool,
    /// Assimilate a single observation given by its innovation.
    #[arg(long, num_args = 6, value_names = ["LON", "LAT", "DEPTH", "TYPE", "INN", "STD"], conflicts_with = "single_observation_ijk")]
    single_observation_xyz: Option<Vec<String>>,
    /// Assimilate a single observation given by its innovation.
    #[arg(long, num_args = 6, value_names = ["FI", "FJ", "FK", "TYPE", "INN", "STD"])]
    single_observation_ijk: Option<Vec<String>>,
    /// Use RMSD instead of MAD in the observation stats.
    #[arg(long)]
    use_rmsd_for_obsstats: bool,
    /// Assimilate observations from this file instead of observations.csv.
    #[arg(long, value_name = "FILE")]
    use_these_obs: Option<PathBuf>,
}

#[derive(Args)]
struct UpdateArgs {
    /// Main parameter file.
    #[arg(required_unless_present = "describe_prm_format")]
    prm: Option<PathBuf>,
    /// Calculate the ensemble spread and write spread files.
    #[arg(long)]
    calculate_spread: bool,
    /// Describe the format of a parameter file and exit.
    #[arg(long, num_args = 0..=1, default_missing_value = "main", value_name = "main|model|grid")]
    describe_prm_format: Option<String>,
    /// Accepted for compatibility; has no effect.
    #[arg(long)]
    direct_write: bool,
    /// Write analyses next to the forecast files as `_an` (or `_inc`) files.
    #[arg(long)]
    joint_output: bool,
    /// Accepted for compatibility; has no effect.
    #[arg(long)]
    leave_tiles: bool,
    /// Do not write analysis fields.
    #[arg(long)]
    no_fields_write: bool,
    /// Output the analysis increment instead of the analysis.
    #[arg(long)]
    output_increment: bool,
    /// Write the applied inflation multiples.
    #[arg(long)]
    write_inflation: bool,
    /// Seed for the forgetting model (RANDOMISE).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Main parameter file.
    prm: PathBuf,
    #[arg(long)]
    use_rmsd_for_obsstats: bool,
    #[arg(long, value_name = "FILE")]
    use_these_obs: Option<PathBuf>,
}

#[derive(Args)]
struct TwinArgs {
    /// lorenz96, linadv-oracle or enoi-lorenz96.
    scenario: String,
    /// Number of cycles (default: the scenario's).
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the metrics CSV here instead of standard output.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn load(prm: &Path) -> Result<(DaConfig, Grid)> {
    let workdir = std::env::current_dir().context("current directory")?;
    let cfg = DaConfig::load(prm, &workdir).with_context(|| format!("loading {}", prm.display()))?;
    let grid = Grid::load(&cfg.grid, &workdir).context("loading the grid")?;
    Ok((cfg, grid))
}

fn describe(kind: &str) -> Result<()> {
    match describe_format(kind) {
        Some(s) => {
            print!("{s}");
            Ok(())
        }
        None => bail!("unknown parameter file kind \"{kind}\""),
    }
}

fn cmd_prep(a: PrepArgs) -> Result<()> {
    if let Some(k) = &a.describe_prm_format {
        return describe(k);
    }
    let prm = a.prm.expect("required by clap");
    let (cfg, grid) = load(&prm)?;
    let opts = PrepOptions {
        consider_subgrid: a.consider_subgrid_variability,
        no_superobing: a.no_superobing,
    };
    let r = obsprep::prep(&cfg, &grid, opts)?;
    if let Some(id) = a.describe_superob {
        print!("{}", obsprep::describe_superob(&r.superobs, &r.orig, id)?);
        return Ok(());
    }
    let count = |s: ObsStatus| r.orig.iter().filter(|o| o.status == s).count();
    println!(
        "  {} observations read: {} good, {} bad, {} outside",
        r.orig.len(),
        count(ObsStatus::Good),
        count(ObsStatus::Bad),
        count(ObsStatus::Outside)
    );
    let orig: Vec<_> = r.orig.iter().filter(|o| a.log_all_obs || o.status != ObsStatus::Outside).cloned().collect();
    io::write_obs(&cfg.workdir.join(calc::OBS_ORIG_FILE), &orig)?;
    io::write_obs(&cfg.workdir.join(calc::OBS_FILE), &r.superobs.obs)?;
    println!("  {} superobservations written to {}", r.superobs.obs.len(), calc::OBS_FILE);
    Ok(())
}

fn single_obs(v: &[String], xyz: bool) -> Result<SingleObs> {
    let num = |i: usize| -> Result<f64> { v[i].parse().with_context(|| format!("bad number \"{}\"", v[i])) };
    let (a, b, c) = (num(0)?, num(1)?, num(2)?);
    let pos = if xyz {
        SinglePos::Xyz { lon: a, lat: b, depth: c }
    } else {
        SinglePos::Ijk { fi: a, fj: b, fk: c }
    };
    Ok(SingleObs {
        pos,
        obstype: v[3].clone(),
        innovation: num(4)?,
        std: num(5)?,
    })
}

fn cmd_calc(a: CalcArgs) -> Result<()> {
    if let Some(k) = &a.describe_prm_format {
        return describe(k);
    }
    let prm = a.prm.expect("required by clap");
    let (cfg, grid) = load(&prm)?;
    let single_obs = match (&a.single_observation_xyz, &a.single_observation_ijk) {
        (Some(v), _) => Some(single_obs(v, true)?),
        (_, Some(v)) => Some(single_obs(v, false)?),
        _ => None,
    };
    let opts = CalcOptions {
        forecast_stats_only: a.forecast_stats_only,
        ignore_no_obs: a.ignore_no_obs,
        no_mean_update: a.no_mean_update,
        point_logs_only: a.point_logs_only,
        print_batch_stats: a.print_batch_stats,
        single_obs,
        use_rmsd: a.use_rmsd_for_obsstats,
        use_these_obs: a.use_these_obs,
    };
    let run = calc::calc(&cfg, &grid, &opts)?;
    print!("{}", run.log);
    Ok(())
}

fn cmd_update(a: UpdateArgs) -> Result<()> {
    if let Some(k) = &a.describe_prm_format {
        return describe(k);
    }
    if a.direct_write || a.leave_tiles {
        log::info!("--direct-write and --leave-tiles have no effect: fields are written whole");
    }
    let prm = a.prm.expect("required by clap");
    let (cfg, grid) = load(&prm)?;
    let file = if cfg.main.mode == Mode::Enkf { calc::X5_FILE } else { calc::W_FILE };
    let tf = io::read_transforms(&cfg.workdir.join(file), &grid, cfg.main.stride, cfg.obstypes.len())
        .with_context(|| format!("reading {file}; run calc first"))?;
    let opts = UpdateOptions {
        calculate_spread: a.calculate_spread,
        joint_output: a.joint_output,
        no_fields_write: a.no_fields_write,
        output_increment: a.output_increment,
        write_inflation: a.write_inflation,
        seed: a.seed,
    };
    let r = update::update(&cfg, &grid, &tf, opts)?;
    for p in &r.written {
        println!("  wrote {}", p.display());
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let (cfg, grid) = load(&a.prm)?;
    let opts = CalcOptions {
        forecast_stats_only: true,
        use_rmsd: a.use_rmsd_for_obsstats,
        use_these_obs: a.use_these_obs,
        ..CalcOptions::default()
    };
    print!("{}", calc::calc(&cfg, &grid, &opts)?.log);
    Ok(())
}

fn cmd_twin(a: TwinArgs) -> Result<()> {
    let Some(s) = Scenario::parse(&a.scenario) else {
        bail!("unknown scenario \"{}\" (lorenz96, linadv-oracle, enoi-lorenz96)", a.scenario);
    };
    let mut tc = TwinConfig::new(s);
    if let Some(c) = a.cycles {
        tc.cycles = c;
    }
    if let Some(seed) = a.seed {
        tc.seed = seed;
    }
    let r = run_twin(&tc)?;
    let csv = r.to_csv();
    match &a.output {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    let last = r.metrics.len();
    eprintln!(
        "{}: {} cycles, mean analysis RMSE {:.4}, mean spread {:.4}",
        s.name(),
        last,
        r.time_mean(1, last, |c| c.rmse_a),
        r.time_mean(1, last, |c| c.spread_a)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prep(a) => cmd_prep(a),
        Cmd::Calc(a) => cmd_calc(a),
        Cmd::Update(a) => cmd_update(a),
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::Twin(a) => cmd_twin(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
