//! Configuration and the four pipeline commands behind the `sdenet` binary:
//! `simulate`, `infer`, `eval` and `benchmark`.
//!
//! Every command is a pure function of its inputs, configuration and seed.
//! Wall-clock information only appears in the `run.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, DatasetSidecar, TimeSeriesData};
use crate::error::{Error, Result};
use crate::grid::{build_grid, build_grid_with_step, FineGrid};
use crate::metrics::{evaluate, MetricsReport, Scorer};
use crate::posterior::ModelConfig;
use crate::results::{summarize_chains, PosteriorSummary};
use crate::sampler::{Checkpoint, Sampler, SamplerConfig};
use crate::simulator::{
    generate_random_network, generate_ring_network_with_hidden, simulate_sde, SimulationSettings, SystemMatrices,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SDENET_OUTPUT_ROOT";

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_JSON: &str = "dataset.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TRAJECTORY_CSV: &str = "y_mean.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    #[default]
    Random,
    Ring,
}

impl std::str::FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "ring" => Ok(Self::Ring),
            other => Err(Error::Config(format!("unknown network kind `{other}` (expected random|ring)"))),
        }
    }
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Ring => "ring",
        }
    }
}

/// Network generation and simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub network: NetworkKind,
    /// Total nodes (random networks).
    pub nodes: usize,
    /// Measured nodes.
    pub measured: usize,
    /// Hidden nodes (ring networks).
    pub hidden: usize,
    /// Fraction of nonzero entries of `A` (random networks).
    pub density: f64,
    /// Number of measurements `M`.
    pub measurements: usize,
    /// Spacing between measurements.
    pub spacing: f64,
    pub snr_db: f64,
    pub lambda_meas: f64,
    pub seed: u64,
    pub dt_internal: Option<f64>,
    pub max_tries: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            network: NetworkKind::Random,
            nodes: 8,
            measured: 6,
            hidden: 0,
            density: 0.2,
            measurements: 100,
            spacing: 1.0,
            snr_db: 10.0,
            lambda_meas: 1e-3,
            seed: 0,
            dt_internal: None,
            max_tries: 100_000,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.measurements < 2 {
            return Err(Error::Config("need at least two measurements".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {}", self.spacing)));
        }
        if !(self.lambda_meas >= 0.0) {
            return Err(Error::Config("lambda_meas must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.measurements).map(|i| i as f64 * self.spacing).collect()
    }
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Fine intervals per measurement interval.
    pub refinement: usize,
    /// Explicit fine step; measurement times are snapped onto it.
    pub grid_step: Option<f64>,
    pub chains: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            refinement: 3,
            grid_step: None,
            chains: 1,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refinement == 0 {
            return Err(Error::Config("refinement factor must be ≥ 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be ≥ 1".into()));
        }
        self.model.validate()?;
        self.sampler.validate()
    }

    pub fn grid(&self, times: &[f64]) -> Result<FineGrid> {
        match self.grid_step {
            Some(dt) => build_grid_with_step(times, dt),
            None => build_grid(times, self.refinement),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub include_diagonal: bool,
    pub scorer: Scorer,
}

/// Monte Carlo benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    pub replicates: usize,
    /// Replicate `i` uses seed `base_seed + i`.
    pub base_seed: u64,
    pub simulate: SimulateConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        suite("random-desk").expect("built-in suite")
    }
}

/// Built-in desk-scale suites: `ring-desk` and `random-desk`.
pub fn suite(name: &str) -> Result<BenchmarkConfig> {
    let infer = InferConfig::default();
    let simulate = match name {
        "ring-desk" => SimulateConfig {
            network: NetworkKind::Ring,
            nodes: 7,
            measured: 5,
            hidden: 2,
            ..SimulateConfig::default()
        },
        "random-desk" => SimulateConfig::default(),
        other => return Err(Error::Config(format!("unknown suite `{other}` (expected ring-desk|random-desk)"))),
    };
    Ok(BenchmarkConfig {
        name: name.to_string(),
        replicates: 10,
        base_seed: 1,
        simulate,
        infer,
        eval: EvalConfig::default(),
    })
}

/// Everything a configuration file may set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output: Option<PathBuf>,
    pub simulate: SimulateConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub benchmark: Option<BenchmarkConfig>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Output root from the environment, falling back to `./sdenet-out`.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("sdenet-out"), PathBuf::from)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    timestamp: u64,
}

/// Writes `run.json`, the only file carrying wall-clock information.
pub fn write_manifest(dir: &Path, command: &str) -> Result<()> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(
        &dir.join("run.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            timestamp,
        },
    )
}

/// Generates a network and simulates one dataset in memory.
pub fn generate_dataset(cfg: &SimulateConfig) -> Result<(TimeSeriesData, DatasetSidecar, SystemMatrices)> {
    cfg.validate()?;
    let sys = match cfg.network {
        NetworkKind::Random => generate_random_network(cfg.nodes, cfg.measured, cfg.density, cfg.seed, cfg.max_tries)?,
        NetworkKind::Ring => generate_ring_network_with_hidden(cfg.measured, cfg.hidden, cfg.seed)?,
    };
    let settings = SimulationSettings {
        snr_db: cfg.snr_db,
        lambda_meas: cfg.lambda_meas,
        dt_internal: cfg.dt_internal,
        seed: cfg.seed,
        ..SimulationSettings::default()
    };
    let out = simulate_sde(&sys, &cfg.times(), &settings)?;
    let data = TimeSeriesData::new(out.times, out.z, out.u)?;
    let sidecar = DatasetSidecar::from_system(
        cfg.network.name(),
        &sys,
        cfg.seed,
        cfg.snr_db,
        cfg.lambda_meas,
        settings.input_variance,
        out.noise_variance,
    );
    Ok((data, sidecar, sys))
}

/// `simulate`: writes `dataset.csv` and `dataset.json` into `out`.
pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path) -> Result<()> {
    let (data, sidecar, _) = generate_dataset(cfg)?;
    ensure_dir(out)?;
    data.write_csv(&out.join(DATASET_CSV))?;
    sidecar.write(&out.join(DATASET_JSON))?;
    write_manifest(out, "simulate")
}

fn checkpoint_path(out: &Path, chain: usize) -> PathBuf {
    out.join(format!("checkpoint-{chain}.json"))
}

/// Runs every chain (in parallel) and summarizes them.
///
/// With `out`, checkpoints are written there; with `resume`, chains continue
/// from the checkpoints found in `out`.
pub fn run_inference(
    data: &TimeSeriesData,
    cfg: &InferConfig,
    out: Option<&Path>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<PosteriorSummary> {
    cfg.validate()?;
    let grid = cfg.grid(&data.times)?;
    let chains: Vec<_> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| -> Result<_> {
            let mut sampler = if resume {
                let dir = out.ok_or_else(|| Error::Argument("resuming needs an output directory".into()))?;
                let mut ck = Checkpoint::read(&checkpoint_path(dir, c))?;
                ck.config.k_max = ck.config.k_max.max(cfg.sampler.k_max);
                Sampler::from_checkpoint(data, &grid, ck)?
            } else {
                let sc = SamplerConfig {
                    chain: c as u64,
                    ..cfg.sampler.clone()
                };
                let s = Sampler::new(data, &grid, cfg.model.clone(), sc)?;
                match out {
                    Some(dir) => s.with_spill_file(dir.join(format!("samples-{c}.jsonl"))),
                    None => s,
                }
            };
            let target = stop_after.unwrap_or(usize::MAX).min(cfg.sampler.k_max.max(sampler.iteration()));
            let every = if cfg.checkpoint_every == 0 { usize::MAX } else { cfg.checkpoint_every };
            while sampler.iteration() < target {
                let next = (sampler.iteration() / every).saturating_add(1).saturating_mul(every).min(target);
                sampler.run_until(next)?;
                if let Some(dir) = out {
                    if next < target {
                        sampler.checkpoint().write(&checkpoint_path(dir, c))?;
                    }
                }
            }
            if let Some(dir) = out {
                sampler.checkpoint().write(&checkpoint_path(dir, c))?;
            }
            Ok(sampler.finish())
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_chains(&chains)
}

/// `infer`: reads a dataset CSV and writes `summary.json`, `y_mean.csv` and
/// per-chain checkpoints into `out`.
pub fn cmd_infer(dataset: &Path, cfg: &InferConfig, out: &Path, resume: bool, stop_after: Option<usize>) -> Result<PosteriorSummary> {
    let data = TimeSeriesData::read_csv(dataset)?;
    ensure_dir(out)?;
    let summary = run_inference(&data, cfg, Some(out), resume, stop_after)?;
    summary.write_json(&out.join(SUMMARY_JSON))?;
    if summary.y_mean.is_some() {
        summary.write_y_mean_csv(&out.join(TRAJECTORY_CSV))?;
    }
    write_json(&out.join("config.json"), cfg)?;
    write_manifest(out, "infer")?;
    Ok(summary)
}

fn write_metrics_csv(path: &Path, rows: &[(String, &MetricsReport)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["name", "tpr", "prec", "auroc", "auprec", "tp", "fp", "fn", "tn", "diagonal_excluded"])
        .map_err(err)?;
    let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
    for (name, m) in rows {
        w.write_record([
            name.clone(),
            f(m.tpr),
            f(m.prec),
            f(m.auroc),
            f(m.auprec),
            m.counts.tp.to_string(),
            m.counts.fp.to_string(),
            m.counts.fn_.to_string(),
            m.counts.tn.to_string(),
            m.diagonal_excluded.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `eval`: scores `summary.json` against the truth in a dataset sidecar.
pub fn cmd_eval(summary: &Path, truth: &Path, cfg: &EvalConfig, out: &Path) -> Result<MetricsReport> {
    if !truth.exists() {
        return Err(Error::Data(format!("truth file {} does not exist", truth.display())));
    }
    let summary = PosteriorSummary::read_json(summary)?;
    let sidecar = DatasetSidecar::read(truth)?;
    let report = evaluate(&summary, &sidecar.truth, !cfg.include_diagonal, cfg.scorer)?;
    log::info!(
        "metrics computed with the diagonal {}",
        if report.diagonal_excluded { "excluded" } else { "included" }
    );
    ensure_dir(out)?;
    write_json(&out.join(METRICS_JSON), &report)?;
    write_metrics_csv(&out.join(METRICS_CSV), &[("sde".to_string(), &report)])?;
    write_manifest(out, "eval")?;
    Ok(report)
}

/// Outcome of one benchmark replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    /// Networks redrawn because their truth had no positive or no negative links.
    pub redraws: usize,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Mean of each metric over the replicates where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub mean: Option<f64>,
    pub defined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub name: String,
    pub replicates: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub measurements: usize,
    pub snr_db: f64,
    pub tpr: AggregateMetric,
    pub prec: AggregateMetric,
    pub auroc: AggregateMetric,
    pub auprec: AggregateMetric,
    pub diagonal_excluded: bool,
    pub results: Vec<ReplicateResult>,
}

impl BenchmarkReport {
    /// Table with one row per configuration and PREC/TPR, AUPREC/AUROC
    /// columns (in percent).
    pub fn render_table(&self) -> String {
        let pct = |m: &AggregateMetric| m.mean.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        format!(
            "| {name} (M = {m}, {snr} dB, {ok}/{n} replicates) | PREC | TPR | AUPREC | AUROC |\n\
             |---|---|---|---|---|\n\
             | SDE | {prec} | {tpr} | {auprec} | {auroc} |\n",
            name = self.name,
            m = self.measurements,
            snr = self.snr_db,
            ok = self.succeeded,
            n = self.replicates,
            prec = pct(&self.prec),
            tpr = pct(&self.tpr),
            auprec = pct(&self.auprec),
            auroc = pct(&self.auroc),
        )
    }
}

fn has_both_classes(truth: &[Vec<bool>], exclude_diagonal: bool) -> bool {
    let vals: Vec<bool> = truth
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().filter(move |(j, _)| !(exclude_diagonal && *j == r)).map(|(_, &v)| v))
        .collect();
    vals.iter().any(|&v| v) && vals.iter().any(|&v| !v)
}

/// Offset applied to a replicate seed when its network must be redrawn.
const REDRAW_STRIDE: u64 = 1_000_003;
const MAX_REDRAWS: usize = 100;

/// Simulates, infers and evaluates replicate `index`. Returns the dataset
/// and summary alongside the result so callers may persist them.
pub fn run_replicate(
    cfg: &BenchmarkConfig,
    index: usize,
) -> (ReplicateResult, Option<(TimeSeriesData, DatasetSidecar, PosteriorSummary)>) {
    let seed = cfg.base_seed + index as u64;
    let exclude = !cfg.eval.include_diagonal;
    let attempt = || -> Result<(usize, TimeSeriesData, DatasetSidecar)> {
        for redraw in 0..=MAX_REDRAWS {
            let sim = SimulateConfig {
                seed: seed + redraw as u64 * REDRAW_STRIDE,
                ..cfg.simulate.clone()
            };
            let (data, sidecar, _) = generate_dataset(&sim)?;
            if has_both_classes(&sidecar.truth, exclude) {
                return Ok((redraw, data, sidecar));
            }
        }
        Err(Error::Generation {
            attempts: MAX_REDRAWS + 1,
            reason: "every drawn network had a degenerate truth".into(),
        })
    };
    let outcome = attempt().and_then(|(redraws, data, sidecar)| {
        let infer = InferConfig {
            sampler: SamplerConfig {
                seed,
                ..cfg.infer.sampler.clone()
            },
            ..cfg.infer.clone()
        };
        let summary = run_inference(&data, &infer, None, false, None)?;
        let metrics = evaluate(&summary, &sidecar.truth, exclude, cfg.eval.scorer)?;
        Ok((redraws, metrics, data, sidecar, summary))
    });
    match outcome {
        Ok((redraws, metrics, data, sidecar, summary)) => (
            ReplicateResult {
                index,
                seed,
                redraws,
                metrics: Some(metrics),
                error: None,
            },
            Some((data, sidecar, summary)),
        ),
        Err(e) => (
            ReplicateResult {
                index,
                seed,
                redraws: 0,
                metrics: None,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

fn aggregate(results: &[ReplicateResult], pick: impl Fn(&MetricsReport) -> Option<f64>) -> AggregateMetric {
    let vals: Vec<f64> = results.iter().filter_map(|r| r.metrics.as_ref().and_then(&pick)).collect();
    AggregateMetric {
        mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
        defined: vals.len(),
    }
}

/// Runs every replicate on a pool of `jobs` threads and aggregates.
pub fn run_benchmark(cfg: &BenchmarkConfig, jobs: usize, out: Option<&Path>) -> Result<BenchmarkReport> {
    cfg.simulate.validate()?;
    cfg.infer.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<_> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|i| {
                let (res, artifacts) = run_replicate(cfg, i);
                if let Some(dir) = out {
                    if let Err(e) = persist_replicate(dir, &res, artifacts.as_ref()) {
                        log::warn!("replicate {i}: could not write outputs: {e}");
                    }
                }
                match &res.error {
                    Some(msg) => log::warn!("replicate {i} failed: {msg}"),
                    None => log::info!("replicate {i} done"),
                }
                res
            })
            .collect()
    });
    let results: Vec<ReplicateResult> = outputs;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    Ok(BenchmarkReport {
        name: cfg.name.clone(),
        replicates: cfg.replicates,
        succeeded: cfg.replicates - failed,
        failed,
        measurements: cfg.simulate.measurements,
        snr_db: cfg.simulate.snr_db,
        tpr: aggregate(&results, |m| m.tpr),
        prec: aggregate(&results, |m| m.prec),
        auroc: aggregate(&results, |m| m.auroc),
        auprec: aggregate(&results, |m| m.auprec),
        diagonal_excluded: !cfg.eval.include_diagonal,
        results,
    })
}

fn persist_replicate(
    dir: &Path,
    res: &ReplicateResult,
    artifacts: Option<&(TimeSeriesData, DatasetSidecar, PosteriorSummary)>,
) -> Result<()> {
    let rdir = dir.join(format!("replicate-{:03}", res.index));
    ensure_dir(&rdir)?;
    if let Some((data, sidecar, summary)) = artifacts {
        data.write_csv(&rdir.join(DATASET_CSV))?;
        sidecar.write(&rdir.join(DATASET_JSON))?;
        summary.write_json(&rdir.join(SUMMARY_JSON))?;
    }
    write_json(&rdir.join("result.json"), res)
}

/// `benchmark`: writes per-replicate directories plus `report.json`,
/// `report.csv` and `report.md` into `out`.
pub fn cmd_benchmark(cfg: &BenchmarkConfig, jobs: usize, out: &Path) -> Result<BenchmarkReport> {
    ensure_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let report = run_benchmark(cfg, jobs, Some(out))?;
    write_json(&out.join("report.json"), &report)?;
    let rows: Vec<(String, &MetricsReport)> = report
        .results
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| (format!("replicate-{:03}", r.index), m)))
        .collect();
    write_metrics_csv(&out.join("report.csv"), &rows)?;
    fs::write(out.join("report.md"), report.render_table()).map_err(|e| Error::io(out.join("report.md"), e))?;
    write_manifest(out, "benchmark")?;
    Ok(report)
}

/// Reads a dataset sidecar's truth adjacency.
pub fn read_truth(path: &Path) -> Result<Vec<Vec<bool>>> {
    let sidecar: DatasetSidecar = read_json(path)?;
    Ok(sidecar.truth)
}
