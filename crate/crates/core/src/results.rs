//! Posterior summaries from stored samples: the first half of every chain is
//! discarded, the rest averaged.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{ChainSamples, MoveCounters, SampleRecord};

/// Acceptance rates of each move type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub trajectory_rate: Option<f64>,
    pub switch_rate: Option<f64>,
    pub update_rate: Option<f64>,
    pub eps_traj: f64,
}

impl Diagnostics {
    fn from_counters(c: &MoveCounters, eps_traj: f64) -> Self {
        Self {
            trajectory_rate: c.trajectory_rate(),
            switch_rate: c.switch_rate(),
            update_rate: c.update_rate(),
            eps_traj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub p: usize,
    /// Known-input blocks regressed on (zero when inputs are unmodeled).
    #[serde(default)]
    pub inputs: usize,
    pub lags: usize,
    pub dt: f64,
    pub chains: usize,
    pub samples: usize,
    pub retained: usize,
    /// `link_prob[r][j]`: posterior probability of the link `j → r`.
    pub link_prob: Vec<Vec<f64>>,
    /// `input_link_prob[r][i]`: posterior probability that input `i` drives node `r`.
    #[serde(default)]
    pub input_link_prob: Vec<Vec<f64>>,
    /// Most frequent full topology among retained samples.
    pub s_map: Vec<Vec<bool>>,
    /// Empirical probability of `s_map`.
    pub s_map_frequency: f64,
    /// Per-link `link_prob > 0.5`.
    pub s_threshold: Vec<Vec<bool>>,
    /// Mean stacked impulse response of each node (`(p + inputs)·l`).
    pub w_mean: Vec<Vec<f64>>,
    /// Posterior means of `γ` and `β` over samples where the link is active;
    /// input links follow the node links in each row.
    pub gamma_mean: Vec<Vec<Option<f64>>>,
    pub beta_mean: Vec<Vec<Option<[f64; 2]>>>,
    pub sigma_mean: Vec<f64>,
    pub lambda_mean: f64,
    pub grid_times: Vec<f64>,
    /// Mean refined trajectory, one row per grid point.
    pub y_mean: Option<Vec<Vec<f64>>>,
    pub diagnostics: Diagnostics,
}

impl PosteriorSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        crate::data::read_json(path)
    }

    /// Writes the mean trajectory as CSV (time, y1…yp).
    pub fn write_y_mean_csv(&self, path: &Path) -> Result<()> {
        let y = self
            .y_mean
            .as_ref()
            .ok_or_else(|| Error::Argument("no trajectories were stored".into()))?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["time".to_string()];
        header.extend((1..=self.p).map(|j| format!("y{j}")));
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(err)?;
        for (t, row) in self.grid_times.iter().zip(y) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct Accumulator {
    p: usize,
    n: usize,
    link_count: Vec<Vec<usize>>,
    gamma_sum: Vec<Vec<f64>>,
    beta_sum: Vec<Vec<[f64; 2]>>,
    w_sum: Vec<Vec<f64>>,
    sigma_sum: Vec<f64>,
    lambda_sum: f64,
    y_sum: Option<DMatrix<f64>>,
    y_missing: bool,
    topologies: HashMap<Vec<bool>, (usize, usize)>,
}

impl Accumulator {
    fn new(p: usize, sources: usize, lags: usize) -> Self {
        Self {
            p,
            link_count: vec![vec![0; sources]; p],
            gamma_sum: vec![vec![0.0; sources]; p],
            beta_sum: vec![vec![[0.0; 2]; sources]; p],
            w_sum: vec![vec![0.0; sources * lags]; p],
            sigma_sum: vec![0.0; p],
            ..Default::default()
        }
    }

    fn add(&mut self, rec: &SampleRecord) {
        let order = self.n;
        self.n += 1;
        let mut key = Vec::new();
        for (r, row) in rec.links.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                if j < self.p {
                    key.push(l.active);
                }
                if l.active {
                    self.link_count[r][j] += 1;
                    self.gamma_sum[r][j] += l.gamma;
                    self.beta_sum[r][j][0] += l.beta[0];
                    self.beta_sum[r][j][1] += l.beta[1];
                }
            }
            for (acc, v) in self.w_sum[r].iter_mut().zip(rec.w[r].iter()) {
                *acc += v;
            }
            self.sigma_sum[r] += rec.sigma[r];
        }
        self.lambda_sum += rec.lambda;
        match (&rec.y, &mut self.y_sum) {
            (Some(y), Some(acc)) => *acc += y,
            (Some(y), None) if !self.y_missing => self.y_sum = Some(y.clone()),
            _ => {
                self.y_missing = true;
                self.y_sum = None;
            }
        }
        self.topologies.entry(key).or_insert((0, order)).0 += 1;
    }
}

/// Summarizes one chain.
pub fn summarize(samples: &ChainSamples) -> Result<PosteriorSummary> {
    summarize_chains(std::slice::from_ref(samples))
}

/// Summarizes several chains of the same model, discarding the first half of
/// each before pooling.
pub fn summarize_chains(chains: &[ChainSamples]) -> Result<PosteriorSummary> {
    let first = chains.first().ok_or_else(|| Error::Argument("no chains to summarize".into()))?;
    let (p, inputs, lags) = (first.p, first.inputs, first.lags);
    if chains.iter().any(|c| c.p != p || c.inputs != inputs || c.lags != lags) {
        return Err(Error::Argument("chains disagree on node count or truncation".into()));
    }
    let sources = p + inputs;
    let mut acc = Accumulator::new(p, sources, lags);
    let mut total = 0;
    let mut counters = MoveCounters::default();
    for chain in chains {
        let len = chain.len();
        total += len;
        for rec in chain.iter()?.skip(len / 2) {
            acc.add(&rec?);
        }
        counters.trajectory_proposed += chain.counters.trajectory_proposed;
        counters.trajectory_accepted += chain.counters.trajectory_accepted;
        counters.switch_proposed += chain.counters.switch_proposed;
        counters.switch_accepted += chain.counters.switch_accepted;
        counters.update_proposed += chain.counters.update_proposed;
        counters.update_accepted += chain.counters.update_accepted;
    }
    if acc.n == 0 {
        return Err(Error::Argument("no samples left after discarding burn-in".into()));
    }
    let n = acc.n as f64;
    let (link_prob, input_link_prob): (Vec<Vec<f64>>, Vec<Vec<f64>>) = acc
        .link_count
        .iter()
        .map(|row| {
            let probs: Vec<f64> = row.iter().map(|&c| c as f64 / n).collect();
            (probs[..p].to_vec(), probs[p..].to_vec())
        })
        .unzip();
    let (map_key, &(map_count, _)) = acc
        .topologies
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .expect("at least one retained sample");
    let s_map = map_key.chunks(p).map(|c| c.to_vec()).collect();
    let cond_mean = |r: usize, j: usize| -> Option<usize> { (acc.link_count[r][j] > 0).then_some(acc.link_count[r][j]) };
    let gamma_mean = (0..p)
        .map(|r| (0..sources).map(|j| cond_mean(r, j).map(|c| acc.gamma_sum[r][j] / c as f64)).collect())
        .collect();
    let beta_mean = (0..p)
        .map(|r| {
            (0..sources)
                .map(|j| cond_mean(r, j).map(|c| [acc.beta_sum[r][j][0] / c as f64, acc.beta_sum[r][j][1] / c as f64]))
                .collect()
        })
        .collect();
    let y_mean = acc.y_sum.as_ref().map(|y| {
        let m = y / n;
        m.row_iter().map(|row| row.iter().copied().collect()).collect()
    });
    Ok(PosteriorSummary {
        p,
        inputs,
        lags,
        dt: first.dt,
        chains: chains.len(),
        samples: total,
        retained: acc.n,
        s_threshold: link_prob.iter().map(|row| row.iter().map(|&v| v > 0.5).collect()).collect(),
        link_prob,
        input_link_prob,
        s_map,
        s_map_frequency: map_count as f64 / n,
        w_mean: acc.w_sum.iter().map(|w| w.iter().map(|v| v / n).collect()).collect(),
        gamma_mean,
        beta_mean,
        sigma_mean: acc.sigma_sum.iter().map(|v| v / n).collect(),
        lambda_mean: acc.lambda_sum / n,
        grid_times: first.grid_times.clone(),
        y_mean,
        diagnostics: Diagnostics::from_counters(&counters, first.eps_traj),
    })
}
