use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccmppi::harness::experiment::make_scenario;
use ccmppi::harness::report::aggregate;
use ccmppi::harness::{benchmark_suite, run_experiment, train_models, write_results, write_ticks, ExperimentConfig, PlannerKind};
use ccmppi::uncertainty::{chi2_quantile_2dof, normal_cdf, normal_quantile};
use ccmppi::{Error, Result};

#[derive(Parser)]
#[command(name = "ccmppi", version, about = "Chance-constrained MPPI with GP residual dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the parallel rollouts (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// gp, unicycle or edd5 (overrides the config).
    #[arg(long, value_parser = parse_planner)]
    planner: Option<PlannerKind>,
    /// Result CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a per-tick trajectory CSV next to the results.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training data, fit the GP ensemble and EDD5, and save them.
    Train {
        #[command(flatten)]
        common: Common,
        /// GP model file; EDD5 parameters go to `<out>.edd5.csv`.
        #[arg(long, default_value = "models.gp")]
        out: PathBuf,
    },
    /// One path-tracking run.
    Track(RunArgs),
    /// One obstacle-avoidance run.
    Avoid(RunArgs),
    /// The full planner x scenario x seed suite.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Result CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the quantile self-test.
    Quantiles,
}

fn parse_planner(s: &str) -> std::result::Result<PlannerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} workers: {e}")))?;
    }
    Ok(cfg)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn ticks_path(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".ticks.csv");
            PathBuf::from(s)
        }
        None => PathBuf::from("ticks.csv"),
    }
}

fn single_run(args: &RunArgs, kind: &str) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = args.planner {
        cfg.planner = p;
    }
    let hash = cfg.hash_hex()?;
    let models = train_models(&cfg)?;
    let scenario = make_scenario(&cfg, kind, cfg.seed)?;
    let out = run_experiment(&cfg, &models, cfg.planner, &scenario, cfg.seed)?;
    let runs = [out.metrics];
    write_results(open_out(args.out.as_deref())?, &hash, &runs, &aggregate(&runs))?;
    if args.plot_data {
        let file = BufWriter::new(File::create(ticks_path(args.out.as_deref()))?);
        write_ticks(file, &hash, &out.ticks)?;
    }
    let l = runs[0].latency;
    eprintln!(
        "{} {} seed {}: success={} ticks={} latency median {:.2} ms, p95 {:.2} ms",
        runs[0].planner, kind, cfg.seed, runs[0].success, runs[0].ticks, l.median_ms, l.p95_ms
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let models = train_models(&cfg)?;
            models.gp.save(&out)?;
            let mut edd5_path = out.as_os_str().to_owned();
            edd5_path.push(".edd5.csv");
            let mut w = csv::Writer::from_path(PathBuf::from(edd5_path))?;
            w.write_record(["terrain", "alpha_l", "alpha_r", "x_icr", "y_icr_l", "y_icr_r"])?;
            for (t, p) in cfg.terrains.iter().zip(&models.edd5) {
                w.write_record([
                    t.name.clone(),
                    p.alpha_l.to_string(),
                    p.alpha_r.to_string(),
                    p.x_icr.to_string(),
                    p.y_icr_l.to_string(),
                    p.y_icr_r.to_string(),
                ])?;
            }
            w.flush()?;
            for (j, k) in models.gp.model().kernels().iter().enumerate() {
                eprintln!("output {j}: {k:?}");
            }
            Ok(())
        }
        Command::Track(args) => single_run(&args, "tracking"),
        Command::Avoid(args) => single_run(&args, "avoidance"),
        Command::Bench { common, out } => {
            let cfg = load_config(&common)?;
            let hash = cfg.hash_hex()?;
            let models = train_models(&cfg)?;
            let (runs, aggregates) = benchmark_suite(&cfg, &models)?;
            write_results(open_out(out.as_deref())?, &hash, &runs, &aggregates)
        }
        Command::Quantiles => {
            println!("{:>8} {:>22} {:>22} {:>12}", "p", "chi2_2(p)", "normal_quantile(p)", "cdf error");
            for p in [0.6, 0.8, 0.9, 0.95, 0.975, 0.99, 0.999] {
                let z = normal_quantile(p)?;
                println!(
                    "{p:>8} {:>22.15} {:>22.15} {:>12.3e}",
                    chi2_quantile_2dof(p)?,
                    z,
                    (normal_cdf(z) - p).abs()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
