//! Metropolis-within-partially-collapsed-Gibbs sampler over refined
//! trajectories, topology, kernel hyperparameters, impulse responses and noise
//! variances.
//!
//! One iteration runs, in order:
//! 1. a joint trajectory move (pCN on measurement rows, pCN Brownian bridges
//!    in between) targeting the marginal with `w` integrated out;
//! 2. per node, a switch move (probability `P_S`) or an update move;
//! 3. per node, Gibbs draws of `w_r` and `σ_r`;
//! 4. a Gibbs draw of `λ`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesData;
use crate::dsf::{assemble_trajectory, build_regression_with_inputs, interpolate_inputs, RegressionData};
use crate::error::{Error, Result};
use crate::grid::FineGrid;
use crate::kernels::{KernelSpec, LinkPrior};
use crate::posterior::{
    acceptance_probability, sample_lambda_conditional, sample_sigma_conditional, ModelConfig, NodeEvidence,
};
use crate::sparse::PseudoGrid;

/// How refined trajectories are proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryProposal {
    /// Autoregressive proposal around the Gaussian reference (measurements
    /// and Brownian bridges).
    #[default]
    Pcn,
    /// Plain Gaussian random walk with step `ε·√(σΔT)` (interior) and `ε·√λ`
    /// (measurement rows). Kept for comparison.
    RandomWalk,
}

/// What a switch move proposes besides toggling the indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    /// Toggle the indicator and propose fresh `γ` and `β`.
    #[default]
    Full,
    /// Toggle the indicator only; `γ` and `β` stay fixed and update moves are
    /// skipped.
    IndicatorOnly,
}

/// Which conditional updates run each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerBlocks {
    pub trajectories: bool,
    pub topology: bool,
    pub weights: bool,
    pub sigma: bool,
    pub lambda: bool,
}

impl Default for SamplerBlocks {
    fn default() -> Self {
        Self {
            trajectories: true,
            topology: true,
            weights: true,
            sigma: true,
            lambda: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of iterations after the initial state.
    pub k_max: usize,
    /// Trajectory step `ε ∈ (0, 1]`.
    pub eps_traj: f64,
    /// Random-walk scale for `γ`.
    pub eps_gamma: f64,
    /// Window width for `β` update proposals.
    pub eps_beta: f64,
    /// Probability of a switch move (update moves get the rest).
    pub p_switch: f64,
    pub seed: u64,
    /// Chain index; selects independent RNG streams for the same seed.
    pub chain: u64,
    /// Keep every `thin`-th iteration.
    pub thin: usize,
    /// Keep self-links on; switch moves then pick among off-diagonal links.
    pub pin_diagonal: bool,
    /// Burn-in scaling of `eps_traj` toward 25% acceptance.
    pub adapt: bool,
    pub proposal: TrajectoryProposal,
    pub switch_mode: SwitchMode,
    pub blocks: SamplerBlocks,
    /// Store the refined trajectory with every sample.
    pub store_trajectories: bool,
    /// In-memory budget for stored samples before spilling to disk.
    pub memory_cap_mb: usize,
    /// Run the per-node moves on the rayon pool.
    pub parallel_nodes: bool,
    /// Call the progress hook every this many iterations (0 disables).
    pub progress_every: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_max: 5000,
            eps_traj: 0.2,
            eps_gamma: 0.3,
            eps_beta: 0.1,
            p_switch: 0.6,
            seed: 0,
            chain: 0,
            thin: 1,
            pin_diagonal: false,
            adapt: false,
            proposal: TrajectoryProposal::Pcn,
            switch_mode: SwitchMode::Full,
            blocks: SamplerBlocks::default(),
            store_trajectories: true,
            memory_cap_mb: 1024,
            parallel_nodes: false,
            progress_every: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_traj > 0.0 && self.eps_traj <= 1.0) {
            return Err(Error::Config(format!("eps_traj must lie in (0,1], got {}", self.eps_traj)));
        }
        if !(self.eps_gamma > 0.0 && self.eps_gamma.is_finite()) {
            return Err(Error::Config(format!("eps_gamma must be positive, got {}", self.eps_gamma)));
        }
        if !(self.eps_beta > 0.0 && self.eps_beta <= 1.0) {
            return Err(Error::Config(format!("eps_beta must lie in (0,1], got {}", self.eps_beta)));
        }
        if !(0.0..=1.0).contains(&self.p_switch) {
            return Err(Error::Config(format!("p_switch must lie in [0,1], got {}", self.p_switch)));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One state of the chain. `y` holds the refined trajectory on every grid
/// point; `y_t1`/`y_t2` split it into measurement and interior rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub y: DMatrix<f64>,
    /// `links[r][j]` describes the link `j → r`.
    pub links: Vec<Vec<LinkPrior>>,
    /// Stacked impulse responses of each node (`p·l`, zero on inactive blocks).
    pub w: Vec<DVector<f64>>,
    pub sigma: Vec<f64>,
    pub lambda: f64,
}

impl ChainState {
    pub fn nodes(&self) -> usize {
        self.y.ncols()
    }

    pub fn y_t1(&self, grid: &FineGrid) -> DMatrix<f64> {
        select_rows(&self.y, &grid.measurement_index)
    }

    pub fn y_t2(&self, grid: &FineGrid) -> DMatrix<f64> {
        select_rows(&self.y, &grid.interior_indices())
    }

    pub fn topology(&self) -> Vec<Vec<bool>> {
        self.links.iter().map(|row| row.iter().map(|l| l.active).collect()).collect()
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Proposal and acceptance counts per move type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MoveCounters {
    pub trajectory_proposed: u64,
    pub trajectory_accepted: u64,
    pub switch_proposed: u64,
    pub switch_accepted: u64,
    pub update_proposed: u64,
    pub update_accepted: u64,
}

fn rate(a: u64, p: u64) -> Option<f64> {
    (p > 0).then(|| a as f64 / p as f64)
}

impl MoveCounters {
    pub fn trajectory_rate(&self) -> Option<f64> {
        rate(self.trajectory_accepted, self.trajectory_proposed)
    }

    pub fn switch_rate(&self) -> Option<f64> {
        rate(self.switch_accepted, self.switch_proposed)
    }

    pub fn update_rate(&self) -> Option<f64> {
        rate(self.update_accepted, self.update_proposed)
    }

    fn add(&mut self, o: &MoveCounters) {
        self.trajectory_proposed += o.trajectory_proposed;
        self.trajectory_accepted += o.trajectory_accepted;
        self.switch_proposed += o.switch_proposed;
        self.switch_accepted += o.switch_accepted;
        self.update_proposed += o.update_proposed;
        self.update_accepted += o.update_accepted;
    }
}

/// Snapshot passed to the progress hook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub iteration: usize,
    pub k_max: usize,
    pub counters: MoveCounters,
    pub eps_traj: f64,
}

/// One stored iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub iteration: usize,
    pub links: Vec<Vec<LinkPrior>>,
    pub w: Vec<DVector<f64>>,
    pub sigma: Vec<f64>,
    pub lambda: f64,
    pub y: Option<DMatrix<f64>>,
}

impl SampleRecord {
    pub fn topology(&self) -> Vec<Vec<bool>> {
        self.links.iter().map(|row| row.iter().map(|l| l.active).collect()).collect()
    }
}

/// Samples spilled to a JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpillFile {
    pub path: PathBuf,
    pub count: usize,
}

/// Stored chain output: spilled records (oldest) followed by in-memory ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSamples {
    pub p: usize,
    /// Known-input blocks following the `p` node blocks of every row.
    #[serde(default)]
    pub inputs: usize,
    pub lags: usize,
    pub dt: f64,
    pub grid_times: Vec<f64>,
    pub records: Vec<SampleRecord>,
    pub spill: Option<SpillFile>,
    pub counters: MoveCounters,
    pub eps_traj: f64,
}

impl ChainSamples {
    pub fn len(&self) -> usize {
        self.records.len() + self.spill.as_ref().map_or(0, |s| s.count)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored record in iteration order.
    pub fn iter(&self) -> Result<impl Iterator<Item = Result<SampleRecord>> + '_> {
        let spilled: Box<dyn Iterator<Item = Result<SampleRecord>>> = match &self.spill {
            Some(s) => {
                let path = s.path.clone();
                let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
                Box::new(BufReader::new(file).lines().take(s.count).map(move |line| {
                    let line = line.map_err(|e| Error::io(&path, e))?;
                    Ok(serde_json::from_str(&line)?)
                }))
            }
            None => Box::new(std::iter::empty()),
        };
        Ok(spilled.chain(self.records.iter().cloned().map(Ok)))
    }

    fn push(&mut self, rec: SampleRecord, cap_bytes: usize, spill_path: Option<&Path>) -> Result<()> {
        self.records.push(rec);
        let per = record_bytes(&self.records[0]);
        if self.records.len() * per > cap_bytes {
            match spill_path {
                Some(path) => self.spill_all(path)?,
                None => {
                    if self.records.len() * per <= cap_bytes + per {
                        log::warn!("sample memory cap exceeded and no spill file configured; keeping samples in memory");
                    }
                }
            }
        }
        Ok(())
    }

    fn spill_all(&mut self, path: &Path) -> Result<()> {
        let count = self.spill.as_ref().map_or(0, |s| s.count);
        let file = OpenOptions::new()
            .create(true)
            .append(count > 0)
            .write(true)
            .truncate(count == 0)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let added = self.records.len();
        for rec in self.records.drain(..) {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        self.spill = Some(SpillFile {
            path: path.to_path_buf(),
            count: count + added,
        });
        Ok(())
    }
}

/// Drops spill-file lines written after a checkpoint was taken.
fn truncate_spill(spill: &SpillFile) -> Result<()> {
    let path = &spill.path;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .take(spill.count)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    if lines.len() != spill.count {
        return Err(Error::Data(format!("spill file {} holds fewer samples than recorded", path.display())));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn record_bytes(rec: &SampleRecord) -> usize {
    let links: usize = rec.links.iter().map(|r| r.len()).sum();
    let w: usize = rec.w.iter().map(|v| v.len()).sum();
    let y = rec.y.as_ref().map_or(0, |y| y.len());
    8 * (links * 4 + w + rec.sigma.len() + 1 + y) + 64
}

/// RNG streams: one for chain-level moves, one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRngs {
    pub chain: ChaCha8Rng,
    pub nodes: Vec<ChaCha8Rng>,
}

impl ChainRngs {
    pub fn new(seed: u64, chain: u64, p: usize) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((chain << 32) | s);
            rng
        };
        Self {
            chain: stream(0),
            nodes: (0..p as u64).map(|r| stream(r + 1)).collect(),
        }
    }
}

/// Everything needed to resume a chain bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub config: SamplerConfig,
    pub iteration: usize,
    pub state: ChainState,
    pub rngs: ChainRngs,
    pub samples: ChainSamples,
    pub window: MoveCounters,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::data::read_json(path)
    }
}

/// Covariance of a unit-variance random walk of `n` steps pinned at both ends,
/// over its `n − 1` interior points: `[C]_{pq} = p(n − q)/n` for `p ≤ q`.
pub fn bridge_covariance(n: usize) -> DMatrix<f64> {
    let m = n.saturating_sub(1);
    DMatrix::from_fn(m, m, |i, j| {
        let (a, b) = ((i.min(j) + 1) as f64, (i.max(j) + 1) as f64);
        a * (n as f64 - b) / n as f64
    })
}

/// Linear interpolation between segment endpoints at the `n − 1` interior points.
pub fn bridge_mean(start: f64, end: f64, n: usize) -> impl Iterator<Item = f64> {
    (1..n).map(move |i| start + (end - start) * i as f64 / n as f64)
}

/// Draws the interior of a Brownian bridge with per-step variance `var`.
fn sample_bridge(n: usize, var: f64, rng: &mut impl Rng, out: &mut Vec<f64>) {
    out.clear();
    let sd = var.sqrt();
    let mut walk = 0.0;
    for _ in 0..n {
        walk += sd * rng.sample::<f64, _>(StandardNormal);
        out.push(walk);
    }
    let last = walk;
    out.pop();
    for (i, v) in out.iter_mut().enumerate() {
        *v -= last * (i + 1) as f64 / n as f64;
    }
}

/// Proposes a new refined trajectory.
///
/// With `Pcn`, measurement rows move as `Z + √(1−ε²)(Y − Z) + ε·N(0, λ)` and
/// every segment interior as `m^p + √(1−ε²)(Y − m^k) + ε·bridge(σ_rΔT)`.
#[allow(clippy::too_many_arguments)]
pub fn propose_trajectories(
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    grid: &FineGrid,
    lambda: f64,
    sigma: &[f64],
    eps: f64,
    kind: TrajectoryProposal,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    let p = y.ncols();
    let mut out = y.clone();
    match kind {
        TrajectoryProposal::Pcn => {
            let keep = (1.0 - eps * eps).max(0.0).sqrt();
            let sd = eps * lambda.sqrt();
            for (q, &k) in grid.measurement_index.iter().enumerate() {
                for r in 0..p {
                    let zq = z[(q, r)];
                    out[(k, r)] = zq + keep * (y[(k, r)] - zq) + sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut bridge = Vec::new();
            for q in 0..grid.segments() {
                let (k0, k1) = (grid.measurement_index[q], grid.measurement_index[q + 1]);
                let n = k1 - k0;
                if n < 2 {
                    continue;
                }
                for r in 0..p {
                    sample_bridge(n, sigma[r] * grid.dt, rng, &mut bridge);
                    let cur = bridge_mean(y[(k0, r)], y[(k1, r)], n);
                    let new = bridge_mean(out[(k0, r)], out[(k1, r)], n);
                    for (i, (mk, mp)) in cur.zip(new).enumerate() {
                        let idx = k0 + 1 + i;
                        out[(idx, r)] = mp + keep * (y[(idx, r)] - mk) + eps * bridge[i];
                    }
                }
            }
        }
        TrajectoryProposal::RandomWalk => {
            let sd_meas = eps * lambda.sqrt();
            for i in 0..y.nrows() {
                let meas = grid.is_measurement(i);
                for r in 0..p {
                    let sd = if meas { sd_meas } else { eps * (sigma[r] * grid.dt).sqrt() };
                    out[(i, r)] += sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    out
}

/// Collapsed evaluation of one refined trajectory under fixed links and noise.
#[derive(Debug, Clone)]
pub struct TrajectoryEval {
    pub reg: RegressionData,
    pub evidences: Vec<NodeEvidence>,
    /// Log density relative to the pCN reference measure.
    pub pcn_weight: f64,
    /// Full unnormalized log density of the trajectory.
    pub log_target: f64,
}

/// Shared inputs for evaluating nodes.
#[derive(Debug, Clone)]
pub struct ModelContext<'a> {
    pub grid: &'a FineGrid,
    pub z: &'a DMatrix<f64>,
    /// Known inputs on the fine grid.
    pub u: Option<&'a DMatrix<f64>>,
    pub model: &'a ModelConfig,
    pub lags: usize,
    pub pseudo: &'a PseudoGrid,
}

impl ModelContext<'_> {
    pub fn spec(&self) -> KernelSpec {
        self.model.kernel
    }

    pub fn regression(&self, y: &DMatrix<f64>) -> Result<RegressionData> {
        build_regression_with_inputs(y, self.u, self.grid, self.model.filter, self.lags)
    }

    pub fn evidence(&self, r: usize, row: &[LinkPrior], reg: &RegressionData, sigma: f64) -> Result<NodeEvidence> {
        NodeEvidence::build(r, row, self.model.kernel, reg, self.pseudo, sigma)
    }

    /// Evaluates the collapsed target of a trajectory.
    pub fn evaluate(
        &self,
        y: &DMatrix<f64>,
        links: &[Vec<LinkPrior>],
        sigma: &[f64],
        lambda: f64,
    ) -> Result<TrajectoryEval> {
        let reg = self.regression(y)?;
        let evidences = (0..y.ncols())
            .map(|r| self.evidence(r, &links[r], &reg, sigma[r]))
            .collect::<Result<Vec<_>>>()?;
        let mut pcn_weight = 0.0;
        let mut log_target = 0.0;
        for (r, ev) in evidences.iter().enumerate() {
            let sdt = sigma[r] * self.grid.dt;
            let mut q_t1 = 0.0;
            for q in 0..self.grid.segments() {
                let (k0, k1) = (self.grid.measurement_index[q], self.grid.measurement_index[q + 1]);
                let d = y[(k1, r)] - y[(k0, r)];
                q_t1 += d * d / self.grid.segment_lengths[q] as f64;
            }
            pcn_weight += ev.link_term() - q_t1 / (2.0 * sdt);
            log_target += ev.link_term() - reg.dy_norm2[r] / (2.0 * sdt);
        }
        let mut meas = 0.0;
        for (q, &k) in self.grid.measurement_index.iter().enumerate() {
            for r in 0..y.ncols() {
                let d = self.z[(q, r)] - y[(k, r)];
                meas += d * d;
            }
        }
        log_target -= meas / (2.0 * lambda);
        Ok(TrajectoryEval {
            reg,
            evidences,
            pcn_weight,
            log_target,
        })
    }
}

/// Log acceptance ratio of a trajectory proposal. For pCN the reference
/// Gaussian factors cancel and only the residual weight remains.
pub fn trajectory_log_ratio(current: &TrajectoryEval, proposal: &TrajectoryEval, kind: TrajectoryProposal) -> f64 {
    match kind {
        TrajectoryProposal::Pcn => proposal.pcn_weight - current.pcn_weight,
        TrajectoryProposal::RandomWalk => proposal.log_target - current.log_target,
    }
}

/// Support `[lo, hi]` of the windowed uniform proposal around `center`.
pub fn window_support(center: f64, eps: f64) -> (f64, f64) {
    if center <= eps / 2.0 {
        (0.0, eps)
    } else if center >= 1.0 - eps / 2.0 {
        (1.0 - eps, 1.0)
    } else {
        (center - eps / 2.0, center + eps / 2.0)
    }
}

/// Draws from the windowed uniform proposal.
pub fn sample_window(center: f64, eps: f64, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = window_support(center, eps);
    lo + (hi - lo) * rng.sample::<f64, _>(Open01)
}

/// Log ratio of a switch move that toggles link `(r, j)`.
///
/// `prior_k`/`prior_p` are the link's current and proposed hyperparameters.
pub fn switch_log_ratio(
    current: &NodeEvidence,
    proposal: &NodeEvidence,
    prior_k: &LinkPrior,
    prior_p: &LinkPrior,
    model: &ModelConfig,
) -> f64 {
    let odds = (model.p_s / (1.0 - model.p_s)).ln();
    let topo = match (prior_k.active, prior_p.active) {
        (false, true) => odds,
        (true, false) => -odds,
        _ => 0.0,
    };
    proposal.link_term() - current.link_term() + topo - model.a1 * (prior_p.gamma.abs() - prior_k.gamma.abs())
}

/// Log ratio of an update move; `−∞` when the reverse β proposal is impossible.
pub fn update_log_ratio(
    current: &NodeEvidence,
    proposal: &NodeEvidence,
    row_k: &[LinkPrior],
    row_p: &[LinkPrior],
    model: &ModelConfig,
    eps_beta: f64,
) -> f64 {
    let mut log_r = proposal.link_term() - current.link_term();
    let m = model.kernel.kind.shape_len();
    for (k, p) in row_k.iter().zip(row_p) {
        if !k.active {
            continue;
        }
        log_r -= model.a1 * (p.gamma.abs() - k.gamma.abs());
        for c in 0..m {
            let (lo, hi) = window_support(p.beta[c], eps_beta);
            if k.beta[c] < lo || k.beta[c] > hi {
                return f64::NEG_INFINITY;
            }
            let (lo, hi) = window_support(k.beta[c], eps_beta);
            if p.beta[c] < lo || p.beta[c] > hi || !(p.beta[c] > 0.0 && p.beta[c] < 1.0) {
                return f64::NEG_INFINITY;
            }
        }
    }
    log_r
}

#[derive(Debug, Default)]
struct NodeOutcome {
    counters: MoveCounters,
}

struct NodeJob<'s> {
    r: usize,
    row: &'s mut Vec<LinkPrior>,
    w: &'s mut DVector<f64>,
    sigma: &'s mut f64,
    rng: &'s mut ChaCha8Rng,
    evidence: NodeEvidence,
}

fn node_step(ctx: &ModelContext<'_>, cfg: &SamplerConfig, reg: &RegressionData, job: NodeJob<'_>) -> Result<NodeOutcome> {
    let NodeJob {
        r,
        row,
        w,
        sigma,
        rng,
        mut evidence,
    } = job;
    let mut out = NodeOutcome::default();
    let p = row.len();
    let model = ctx.model;
    if cfg.blocks.topology {
        let u: f64 = rng.random();
        if u <= cfg.p_switch {
            let j = if cfg.pin_diagonal && p > 1 {
                let j = rng.random_range(0..p - 1);
                if j >= r {
                    j + 1
                } else {
                    j
                }
            } else {
                rng.random_range(0..p)
            };
            let mut proposal = row.clone();
            let link = &mut proposal[j];
            link.active = !link.active;
            if cfg.switch_mode == SwitchMode::Full {
                link.gamma += cfg.eps_gamma * rng.sample::<f64, _>(StandardNormal);
                for c in 0..model.kernel.kind.shape_len() {
                    link.beta[c] = rng.sample::<f64, _>(Open01);
                }
            }
            let ev_p = ctx.evidence(r, &proposal, reg, *sigma)?;
            let log_r = switch_log_ratio(&evidence, &ev_p, &row[j], &proposal[j], model);
            out.counters.switch_proposed += 1;
            if rng.random::<f64>() < acceptance_probability(log_r) {
                out.counters.switch_accepted += 1;
                *row = proposal;
                evidence = ev_p;
            }
        } else if cfg.switch_mode == SwitchMode::Full {
            out.counters.update_proposed += 1;
            if row.iter().any(|l| l.active) {
                let mut proposal = row.clone();
                for link in proposal.iter_mut().filter(|l| l.active) {
                    link.gamma += cfg.eps_gamma * rng.sample::<f64, _>(StandardNormal);
                    for c in 0..model.kernel.kind.shape_len() {
                        link.beta[c] = sample_window(link.beta[c], cfg.eps_beta, rng);
                    }
                }
                let ev_p = ctx.evidence(r, &proposal, reg, *sigma)?;
                let log_r = update_log_ratio(&evidence, &ev_p, row, &proposal, model, cfg.eps_beta);
                if rng.random::<f64>() < acceptance_probability(log_r) {
                    out.counters.update_accepted += 1;
                    *row = proposal;
                    evidence = ev_p;
                }
            } else {
                out.counters.update_accepted += 1;
            }
        }
    }
    if cfg.blocks.weights {
        *w = evidence.sample_w(reg, rng);
    } else {
        // Keep inactive blocks at zero when the topology moved.
        for (j, link) in row.iter().enumerate() {
            if !link.active {
                w.rows_mut(reg.block(j).start, reg.lags).fill(0.0);
            }
        }
    }
    if cfg.blocks.sigma {
        *sigma = sample_sigma_conditional(r, w, reg, model, rng)?;
    }
    Ok(out)
}

/// Fine-grid input path when the model regresses on known inputs.
fn fine_inputs(data: &TimeSeriesData, grid: &FineGrid, model: &ModelConfig) -> Result<Option<DMatrix<f64>>> {
    if !model.known_inputs {
        return Ok(None);
    }
    let u = data
        .u
        .as_ref()
        .ok_or_else(|| Error::Config("known_inputs is set but the dataset has no input columns".into()))?;
    interpolate_inputs(u, grid).map(Some)
}

/// Driver for one chain.
pub struct Sampler<'a> {
    data: &'a TimeSeriesData,
    grid: &'a FineGrid,
    model: ModelConfig,
    config: SamplerConfig,
    lags: usize,
    pseudo: PseudoGrid,
    inputs: Option<DMatrix<f64>>,
    state: ChainState,
    rngs: ChainRngs,
    iteration: usize,
    samples: ChainSamples,
    window: MoveCounters,
    spill_path: Option<PathBuf>,
    hook: Option<Box<dyn FnMut(&Progress) + Send + 'a>>,
}

impl<'a> Sampler<'a> {
    /// Initializes the chain: `Y_T1 = Z`, linear interpolation in between,
    /// self-links on, off-diagonal links Bernoulli(`p_s`), `γ = 1`, `β = 0.5`,
    /// `σ_r` and `λ` from the variance of first differences of `Z`, and `w`
    /// drawn from its conditional.
    pub fn new(data: &'a TimeSeriesData, grid: &'a FineGrid, model: ModelConfig, config: SamplerConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        data.validate()?;
        check_grid(data, grid)?;
        let p = data.nodes();
        let lags = model.resolve_lags(grid)?;
        let pseudo = model.resolve_pseudo(lags)?;
        let inputs = fine_inputs(data, grid, &model)?;
        let sources = p + inputs.as_ref().map_or(0, |u| u.ncols());
        let mut rngs = ChainRngs::new(config.seed, config.chain, p);

        let y_t2 = DMatrix::from_fn(grid.interior_indices().len(), p, |_, _| 0.0);
        let mut y = assemble_trajectory(&data.z, &y_t2, grid)?;
        for q in 0..grid.segments() {
            let (k0, k1) = (grid.measurement_index[q], grid.measurement_index[q + 1]);
            for r in 0..p {
                for (i, v) in bridge_mean(y[(k0, r)], y[(k1, r)], k1 - k0).enumerate() {
                    y[(k0 + 1 + i, r)] = v;
                }
            }
        }

        let mut links = vec![vec![LinkPrior::new(false, 1.0, [0.5, 0.5]); sources]; p];
        for (r, row) in links.iter_mut().enumerate() {
            for (j, link) in row.iter_mut().enumerate() {
                link.active = r == j || rng_bernoulli(&mut rngs.chain, model.p_s);
            }
        }
        let diff_var = |col: Option<usize>| {
            let mut vals = Vec::new();
            for r in 0..p {
                if col.is_some_and(|c| c != r) {
                    continue;
                }
                vals.extend(data.z.column(r).as_slice().windows(2).map(|w| w[1] - w[0]));
            }
            variance(&vals).max(1e-6)
        };
        let sigma: Vec<f64> = (0..p).map(|r| diff_var(Some(r))).collect();
        let lambda = diff_var(None);

        let mut sampler = Self {
            data,
            grid,
            model,
            config,
            lags,
            pseudo,
            inputs,
            state: ChainState {
                y,
                links,
                w: vec![DVector::zeros(sources * lags); p],
                sigma,
                lambda,
            },
            rngs,
            iteration: 0,
            samples: ChainSamples {
                p,
                inputs: sources - p,
                lags,
                dt: grid.dt,
                grid_times: grid.times.clone(),
                records: Vec::new(),
                spill: None,
                counters: MoveCounters::default(),
                eps_traj: 0.0,
            },
            window: MoveCounters::default(),
            spill_path: None,
            hook: None,
        };
        sampler.samples.eps_traj = sampler.config.eps_traj;
        let reg = sampler.context().regression(&sampler.state.y)?;
        for r in 0..p {
            let ev = sampler.context().evidence(r, &sampler.state.links[r], &reg, sampler.state.sigma[r])?;
            sampler.state.w[r] = ev.sample_w(&reg, &mut sampler.rngs.nodes[r]);
        }
        sampler.record()?;
        Ok(sampler)
    }

    /// Restores a chain from a checkpoint.
    pub fn from_checkpoint(data: &'a TimeSeriesData, grid: &'a FineGrid, ck: Checkpoint) -> Result<Self> {
        check_grid(data, grid)?;
        let lags = ck.model.resolve_lags(grid)?;
        if lags != ck.samples.lags || ck.state.nodes() != data.nodes() {
            return Err(Error::Data("checkpoint does not match the dataset and grid".into()));
        }
        let pseudo = ck.model.resolve_pseudo(lags)?;
        let inputs = fine_inputs(data, grid, &ck.model)?;
        let sources = data.nodes() + inputs.as_ref().map_or(0, |u| u.ncols());
        if ck.state.links.iter().any(|row| row.len() != sources) {
            return Err(Error::Data("checkpoint does not match the model's input configuration".into()));
        }
        if let Some(spill) = &ck.samples.spill {
            truncate_spill(spill)?;
        }
        let spill_path = ck.samples.spill.as_ref().map(|s| s.path.clone());
        Ok(Self {
            data,
            grid,
            model: ck.model,
            config: ck.config,
            lags,
            pseudo,
            inputs,
            state: ck.state,
            rngs: ck.rngs,
            iteration: ck.iteration,
            samples: ck.samples,
            window: ck.window,
            spill_path,
            hook: None,
        })
    }

    /// Spills stored samples to `path` once the memory cap is reached.
    pub fn with_spill_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.spill_path = Some(path.into());
        self
    }

    pub fn with_progress(mut self, hook: impl FnMut(&Progress) + Send + 'a) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn counters(&self) -> MoveCounters {
        self.samples.counters
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn pseudo(&self) -> &PseudoGrid {
        &self.pseudo
    }

    /// Overrides the current state (for tests and warm starts).
    pub fn set_state(&mut self, state: ChainState) -> Result<()> {
        if state.y.shape() != self.state.y.shape() || state.links.len() != self.state.links.len() {
            return Err(Error::Dimension("replacement state has the wrong shape".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            iteration: self.iteration,
            state: self.state.clone(),
            rngs: self.rngs.clone(),
            samples: self.samples.clone(),
            window: self.window,
        }
    }

    pub fn context(&self) -> ModelContext<'_> {
        ModelContext {
            grid: self.grid,
            z: &self.data.z,
            u: self.inputs.as_ref(),
            model: &self.model,
            lags: self.lags,
            pseudo: &self.pseudo,
        }
    }

    /// Runs until `k_max` iterations have been completed.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.k_max)
    }

    /// Runs until `iteration == target` (capped at `k_max`).
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let target = target.min(self.config.k_max);
        while self.iteration < target {
            self.step().map_err(|e| Error::Sampler {
                iteration: self.iteration + 1,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    /// Consumes the sampler and returns the stored samples.
    pub fn finish(self) -> ChainSamples {
        self.samples
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<()> {
        let p = self.state.nodes();
        let ctx = ModelContext {
            grid: self.grid,
            z: &self.data.z,
            u: self.inputs.as_ref(),
            model: &self.model,
            lags: self.lags,
            pseudo: &self.pseudo,
        };
        let mut counters = MoveCounters::default();

        let current = ctx.evaluate(&self.state.y, &self.state.links, &self.state.sigma, self.state.lambda)?;
        let accepted = if self.config.blocks.trajectories {
            let y_p = propose_trajectories(
                &self.state.y,
                &self.data.z,
                self.grid,
                self.state.lambda,
                &self.state.sigma,
                self.config.eps_traj,
                self.config.proposal,
                &mut self.rngs.chain,
            );
            counters.trajectory_proposed += 1;
            let u: f64 = self.rngs.chain.random();
            match ctx.evaluate(&y_p, &self.state.links, &self.state.sigma, self.state.lambda) {
                Ok(proposal) => {
                    let log_r = trajectory_log_ratio(&current, &proposal, self.config.proposal);
                    if u < acceptance_probability(log_r) {
                        counters.trajectory_accepted += 1;
                        self.state.y = y_p;
                        proposal
                    } else {
                        current
                    }
                }
                Err(Error::Numeric(msg)) => {
                    log::debug!("trajectory proposal rejected: {msg}");
                    current
                }
                Err(e) => return Err(e),
            }
        } else {
            current
        };

        let TrajectoryEval { reg, evidences, .. } = accepted;
        let cfg = &self.config;
        let jobs: Vec<NodeJob<'_>> = self
            .state
            .links
            .iter_mut()
            .zip(self.state.w.iter_mut())
            .zip(self.state.sigma.iter_mut())
            .zip(self.rngs.nodes.iter_mut())
            .zip(evidences)
            .enumerate()
            .map(|(r, ((((row, w), sigma), rng), evidence))| NodeJob {
                r,
                row,
                w,
                sigma,
                rng,
                evidence,
            })
            .collect();
        let outcomes: Vec<Result<NodeOutcome>> = if cfg.parallel_nodes && p > 1 {
            jobs.into_par_iter().map(|job| node_step(&ctx, cfg, &reg, job)).collect()
        } else {
            jobs.into_iter().map(|job| node_step(&ctx, cfg, &reg, job)).collect()
        };
        for o in outcomes {
            counters.add(&o?.counters);
        }

        if self.config.blocks.lambda {
            let y_t1 = self.state.y_t1(self.grid);
            self.state.lambda = sample_lambda_conditional(&self.data.z, &y_t1, &self.model, &mut self.rngs.chain)?;
        }

        self.iteration += 1;
        self.samples.counters.add(&counters);
        self.window.add(&counters);
        self.adapt();
        if self.iteration % self.config.thin == 0 {
            self.record()?;
        }
        if self.config.progress_every > 0 && self.iteration % self.config.progress_every == 0 {
            let progress = Progress {
                iteration: self.iteration,
                k_max: self.config.k_max,
                counters: self.samples.counters,
                eps_traj: self.config.eps_traj,
            };
            if let Some(hook) = self.hook.as_mut() {
                hook(&progress);
            }
        }
        Ok(())
    }

    fn adapt(&mut self) {
        const WINDOW: usize = 50;
        if !self.config.adapt || self.iteration > self.config.k_max / 2 || self.iteration % WINDOW != 0 {
            return;
        }
        if let Some(rate) = self.window.trajectory_rate() {
            let eps = &mut self.config.eps_traj;
            *eps = if rate > 0.25 { *eps * 1.05 } else { *eps / 1.05 };
            *eps = eps.clamp(1e-4, 1.0);
            self.samples.eps_traj = *eps;
        }
        self.window = MoveCounters::default();
    }

    fn record(&mut self) -> Result<()> {
        let rec = SampleRecord {
            iteration: self.iteration,
            links: self.state.links.clone(),
            w: self.state.w.clone(),
            sigma: self.state.sigma.clone(),
            lambda: self.state.lambda,
            y: self.config.store_trajectories.then(|| self.state.y.clone()),
        };
        let cap = self.config.memory_cap_mb.saturating_mul(1 << 20);
        self.samples.push(rec, cap, self.spill_path.as_deref())
    }
}

fn rng_bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn check_grid(data: &TimeSeriesData, grid: &FineGrid) -> Result<()> {
    if grid.measurements() != data.len() {
        return Err(Error::Data(format!(
            "grid has {} measurement instants, dataset has {}",
            grid.measurements(),
            data.len()
        )));
    }
    for (q, &k) in grid.measurement_index.iter().enumerate() {
        let t = data.times[q];
        if (grid.times[k] - t).abs() > 1e-9 * t.abs().max(1.0) + grid.snap_distance {
            return Err(Error::Data(format!("grid point {k} ({}) does not match time {t}", grid.times[k])));
        }
    }
    Ok(())
}

/// Runs one chain from its initial state to `k_max`.
pub fn run_chain(
    data: &TimeSeriesData,
    grid: &FineGrid,
    model: &ModelConfig,
    config: &SamplerConfig,
) -> Result<ChainSamples> {
    let mut s = Sampler::new(data, grid, model.clone(), config.clone())?;
    s.run()?;
    Ok(s.finish())
}
