use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdenet::cli::{self, NetworkKind, RunConfig, OUTPUT_ROOT_ENV};
use sdenet::kernels::KernelKind;
use sdenet::metrics::Scorer;
use sdenet::Result;

/// Bayesian inference of sparse linear continuous-time networks.
#[derive(Parser)]
#[command(name = "sdenet", version)]
struct Cli {
    /// TOML configuration file with [simulate], [infer], [eval] and [benchmark] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $SDENET_OUTPUT_ROOT or ./sdenet-out].
    #[arg(long, short, global = true, env = OUTPUT_ROOT_ENV)]
    output: Option<PathBuf>,
    /// Worker threads for chains and replicates [default: all cores].
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
    /// More log output (repeat for debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a network and simulate a dataset (dataset.csv + dataset.json).
    Simulate(SimulateArgs),
    /// Sample the posterior for a dataset (summary.json, y_mean.csv, checkpoints).
    Infer(InferArgs),
    /// Score a summary against a dataset sidecar (metrics.json, metrics.csv).
    Eval(EvalArgs),
    /// Run a Monte Carlo benchmark suite (report.json, report.csv, report.md).
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Network kind: random | ring [default: random].
    #[arg(long)]
    network: Option<NetworkKind>,
    /// Total nodes of a random network [default: 8].
    #[arg(long)]
    nodes: Option<usize>,
    /// Measured nodes [default: 6].
    #[arg(long)]
    measured: Option<usize>,
    /// Hidden nodes of a ring network [default: 0].
    #[arg(long)]
    hidden: Option<usize>,
    /// Density of A for random networks [default: 0.2].
    #[arg(long)]
    density: Option<f64>,
    /// Number of measurements [default: 100].
    #[arg(long)]
    measurements: Option<usize>,
    /// Measurement spacing [default: 1].
    #[arg(long)]
    spacing: Option<f64>,
    /// Signal-to-noise ratio in dB [default: 10].
    #[arg(long)]
    snr_db: Option<f64>,
    /// Measurement noise variance [default: 0.001].
    #[arg(long)]
    lambda_meas: Option<f64>,
    /// Seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    /// Dataset CSV (time, z1…zp, u1…).
    #[arg(long)]
    data: PathBuf,
    /// Fine intervals per measurement interval [default: 3].
    #[arg(long)]
    refinement: Option<usize>,
    /// Independent chains [default: 1].
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain [default: 5000].
    #[arg(long)]
    k_max: Option<usize>,
    /// Sampler seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Kernel: tc | dc | ss [default: tc].
    #[arg(long)]
    kernel: Option<KernelKind>,
    /// Trajectory step in (0,1] [default: 0.2].
    #[arg(long)]
    eps_traj: Option<f64>,
    /// Checkpoint interval in iterations, 0 for only at the end [default: 0].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Regress on the recorded input columns [default: inputs treated as noise].
    #[arg(long)]
    known_inputs: bool,
    /// Continue from the checkpoints in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop (after checkpointing) once this iteration is reached.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// summary.json from `infer`.
    #[arg(long)]
    summary: PathBuf,
    /// dataset.json sidecar with the true network.
    #[arg(long)]
    truth: PathBuf,
    /// Count self-links in the metrics [default: excluded].
    #[arg(long)]
    include_diagonal: bool,
    /// Link ranking: link_probability | impulse_norm [default: link_probability].
    #[arg(long)]
    scorer: Option<String>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Built-in suite: ring-desk | random-desk [default: random-desk, or the [benchmark] config section].
    #[arg(long)]
    suite: Option<String>,
    /// Replicates [default: 10].
    #[arg(long)]
    replicates: Option<usize>,
    /// Replicate i uses seed base_seed + i [default: 1].
    #[arg(long)]
    base_seed: Option<u64>,
    /// Iterations per chain [default: 5000].
    #[arg(long)]
    k_max: Option<usize>,
    /// Regress on the recorded inputs [default: inputs treated as noise].
    #[arg(long)]
    known_inputs: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cli
        .output
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(cli::default_output_root);
    if let Some(jobs) = cli.jobs {
        // Ignore the error when a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    match cli.command {
        Command::Simulate(a) => {
            let mut s = config.simulate;
            set(&mut s.network, a.network);
            set(&mut s.nodes, a.nodes);
            set(&mut s.measured, a.measured);
            set(&mut s.hidden, a.hidden);
            set(&mut s.density, a.density);
            set(&mut s.measurements, a.measurements);
            set(&mut s.spacing, a.spacing);
            set(&mut s.snr_db, a.snr_db);
            set(&mut s.lambda_meas, a.lambda_meas);
            set(&mut s.seed, a.seed);
            cli::cmd_simulate(&s, &out)?;
            log::info!("dataset written to {}", out.display());
        }
        Command::Infer(a) => {
            let mut c = config.infer;
            set(&mut c.refinement, a.refinement);
            set(&mut c.chains, a.chains);
            set(&mut c.sampler.k_max, a.k_max);
            set(&mut c.sampler.seed, a.seed);
            set(&mut c.sampler.eps_traj, a.eps_traj);
            set(&mut c.checkpoint_every, a.checkpoint_every);
            c.model.known_inputs |= a.known_inputs;
            if let Some(k) = a.kernel {
                c.model.kernel.kind = k;
            }
            let s = cli::cmd_infer(&a.data, &c, &out, a.resume, a.stop_after)?;
            log::info!(
                "{} samples, {} retained; trajectory acceptance {:?}",
                s.samples,
                s.retained,
                s.diagnostics.trajectory_rate
            );
        }
        Command::Eval(a) => {
            let mut e = config.eval;
            e.include_diagonal |= a.include_diagonal;
            if let Some(s) = a.scorer {
                e.scorer = match s.as_str() {
                    "link_probability" => Scorer::LinkProbability,
                    "impulse_norm" => Scorer::ImpulseNorm,
                    other => {
                        return Err(sdenet::Error::Config(format!(
                            "unknown scorer `{other}` (expected link_probability|impulse_norm)"
                        )))
                    }
                };
            }
            let m = cli::cmd_eval(&a.summary, &a.truth, &e, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Benchmark(a) => {
            let mut b = match (a.suite, config.benchmark) {
                (Some(name), _) => cli::suite(&name)?,
                (None, Some(b)) => b,
                (None, None) => cli::suite("random-desk")?,
            };
            set(&mut b.replicates, a.replicates);
            set(&mut b.base_seed, a.base_seed);
            set(&mut b.infer.sampler.k_max, a.k_max);
            b.infer.model.known_inputs |= a.known_inputs;
            let jobs = cli.jobs.unwrap_or_else(rayon::current_num_threads);
            let report = cli::cmd_benchmark(&b, jobs, &out)?;
            print!("{}", report.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
