//! Fine-grid bookkeeping: the refined time axis `T ⊇ T₁` with a uniform step,
//! the index of every measurement instant, and the segment lengths between
//! consecutive measurements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REL_TOL: f64 = 1e-9;
const MAX_SUBDIVISION: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrid {
    /// Uniform step ΔT.
    pub dt: f64,
    /// All grid times `t₀ … t_N`; measurement instants hold the exact `T₁` values.
    pub times: Vec<f64>,
    /// Global index `k_q` of every measurement.
    pub measurement_index: Vec<usize>,
    /// `N_q = k_{q+1} − k_q` for every inter-measurement segment.
    pub segment_lengths: Vec<usize>,
    /// Largest distance any measurement time was moved to land on the grid.
    pub snap_distance: f64,
}

impl FineGrid {
    /// Number of fine intervals `N`.
    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Number of measurements `M`.
    pub fn measurements(&self) -> usize {
        self.measurement_index.len()
    }

    /// Number of segments (`M − 1`).
    pub fn segments(&self) -> usize {
        self.segment_lengths.len()
    }

    /// Global indices of the interior points of segment `q`.
    pub fn segment_interior(&self, q: usize) -> std::ops::Range<usize> {
        self.measurement_index[q] + 1..self.measurement_index[q + 1]
    }

    /// Global indices of the points in `T₂ = T \ T₁`, in time order.
    pub fn interior_indices(&self) -> Vec<usize> {
        (0..self.segments()).flat_map(|q| self.segment_interior(q)).collect()
    }

    /// True when index `i` is a measurement instant.
    pub fn is_measurement(&self, i: usize) -> bool {
        self.measurement_index.binary_search(&i).is_ok()
    }

    /// Refinement factor when every segment has the same length.
    pub fn uniform_refinement(&self) -> Option<usize> {
        let first = *self.segment_lengths.first()?;
        self.segment_lengths.iter().all(|&n| n == first).then_some(first)
    }
}

fn validate_times(t1: &[f64]) -> Result<()> {
    if t1.len() < 2 {
        return Err(Error::Grid(format!("need at least two measurement times, got {}", t1.len())));
    }
    for (q, w) in t1.windows(2).enumerate() {
        if !(w[0].is_finite() && w[1].is_finite()) {
            return Err(Error::Grid(format!("non-finite measurement time near index {q}")));
        }
        if w[1] <= w[0] {
            return Err(Error::Grid(format!(
                "measurement times must be strictly increasing (t[{q}]={} ≥ t[{}]={})",
                w[0],
                q + 1,
                w[1]
            )));
        }
    }
    Ok(())
}

fn near_integer(x: f64) -> Option<usize> {
    let r = x.round();
    ((x - r).abs() <= REL_TOL * x.abs().max(1.0) && r >= 1.0).then_some(r as usize)
}

/// Largest step `h` (of the form `min_spacing / k`) dividing every spacing.
fn common_step(spacings: &[f64]) -> Result<f64> {
    let min = spacings.iter().cloned().fold(f64::INFINITY, f64::min);
    for k in 1..=MAX_SUBDIVISION {
        let h = min / k as f64;
        if spacings.iter().all(|&s| near_integer(s / h).is_some()) {
            return Ok(h);
        }
    }
    let offending: Vec<String> = spacings
        .iter()
        .enumerate()
        .filter(|(_, &s)| near_integer(s / min).is_none())
        .map(|(q, s)| format!("[{q}]={s}"))
        .collect();
    Err(Error::Grid(format!(
        "measurement spacings share no common step; offending intervals {}; \
         choose a step explicitly with `build_grid_with_step`",
        offending.join(", ")
    )))
}

fn assemble(t1: &[f64], dt: f64, counts: Vec<usize>, snap: f64) -> FineGrid {
    let mut times = Vec::with_capacity(counts.iter().sum::<usize>() + 1);
    let mut measurement_index = Vec::with_capacity(t1.len());
    for (q, &n) in counts.iter().enumerate() {
        measurement_index.push(times.len());
        times.push(t1[q]);
        for i in 1..n {
            times.push(t1[q] + i as f64 * dt);
        }
    }
    measurement_index.push(times.len());
    times.push(*t1.last().unwrap());
    FineGrid {
        dt,
        times,
        measurement_index,
        segment_lengths: counts,
        snap_distance: snap,
    }
}

/// Builds the refined grid by inserting `refinement − 1` points per common step.
///
/// Uniform measurement spacing `h` gives `ΔT = h / refinement`. Non-uniform
/// spacings are supported whenever they share a common step.
pub fn build_grid(t1: &[f64], refinement: usize) -> Result<FineGrid> {
    if refinement == 0 {
        return Err(Error::Argument("refinement factor must be ≥ 1".into()));
    }
    validate_times(t1)?;
    let spacings: Vec<f64> = t1.windows(2).map(|w| w[1] - w[0]).collect();
    let base = common_step(&spacings)?;
    let dt = base / refinement as f64;
    let counts = spacings
        .iter()
        .map(|&s| near_integer(s / dt).expect("common step divides every spacing"))
        .collect();
    Ok(assemble(t1, dt, counts, 0.0))
}

/// Builds a grid with an explicit step, snapping measurement times onto the
/// nearest grid point. The largest move is recorded in `snap_distance`.
pub fn build_grid_with_step(t1: &[f64], dt: f64) -> Result<FineGrid> {
    validate_times(t1)?;
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("grid step must be positive, got {dt}")));
    }
    let t0 = t1[0];
    let mut idx = Vec::with_capacity(t1.len());
    let mut snap = 0.0_f64;
    for &t in t1 {
        let k = ((t - t0) / dt).round() as usize;
        snap = snap.max((t0 + k as f64 * dt - t).abs());
        idx.push(k);
    }
    for (q, w) in idx.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Grid(format!(
                "measurements {q} and {} collapse onto the same grid point at step {dt}",
                q + 1
            )));
        }
    }
    let counts: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
    let snapped: Vec<f64> = idx.iter().map(|&k| t0 + k as f64 * dt).collect();
    Ok(assemble(&snapped, dt, counts, snap))
}
