//! Dynamical structure functions of the measured subnetwork and the finite
//! regression built from refined trajectories.
//!
//! With `A` partitioned into measured (1) and hidden (2) blocks,
//!
//! ```text
//! F_y = (1/s)[A₁₁ + A₁₂(sI − A₂₂)⁻¹A₂₁]
//! F_u = (1/s)[A₁₂(sI − A₂₂)⁻¹B₂ + B₁]
//! F_w = (1/s)[A₁₂ + A₁₂(sI − A₂₂)⁻¹A₂₂]K₂ + K₁
//! ```
//!
//! and the zero pattern of `F_y` is the network topology.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FineGrid;
use crate::simulator::SystemMatrices;

pub type CMatrix = DMatrix<Complex<f64>>;

fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex::new(v, 0.0))
}

/// Structural adjacency of the measured nodes: `(r, j)` is true when
/// `A₁₁[r,j] ≠ 0` or `j` reaches `r` through hidden nodes only.
pub fn ground_truth_topology(sys: &SystemMatrices) -> Vec<Vec<bool>> {
    let (n, p) = (sys.n, sys.p);
    let a = &sys.a;
    let hidden = n - p;
    // reach[h][h2]: hidden h2 reachable from hidden h along A₂₂ edges (reflexive).
    let mut reach = vec![vec![false; hidden]; hidden];
    for (h, row) in reach.iter_mut().enumerate() {
        let mut stack = vec![h];
        row[h] = true;
        while let Some(cur) = stack.pop() {
            for nxt in 0..hidden {
                if !row[nxt] && a[(p + nxt, p + cur)] != 0.0 {
                    row[nxt] = true;
                    stack.push(nxt);
                }
            }
        }
    }
    let mut adj = vec![vec![false; p]; p];
    for r in 0..p {
        for j in 0..p {
            if a[(r, j)] != 0.0 {
                adj[r][j] = true;
                continue;
            }
            adj[r][j] = (0..hidden).any(|h| {
                a[(p + h, j)] != 0.0 && (0..hidden).any(|h2| reach[h][h2] && a[(r, p + h2)] != 0.0)
            });
        }
    }
    adj
}

/// `(F_y, F_u, F_w)` evaluated at one complex frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct DsfEval {
    pub s: Complex<f64>,
    pub f_y: CMatrix,
    pub f_u: CMatrix,
    pub f_w: CMatrix,
}

struct Blocks {
    a11: CMatrix,
    a12: CMatrix,
    a21: CMatrix,
    a22: CMatrix,
    b1: CMatrix,
    b2: CMatrix,
    k1: CMatrix,
    k2: CMatrix,
}

fn blocks(sys: &SystemMatrices) -> Blocks {
    let (n, p) = (sys.n, sys.p);
    let h = n - p;
    let a = to_complex(&sys.a);
    let b = to_complex(&sys.b);
    let k = to_complex(&sys.k);
    Blocks {
        a11: a.view((0, 0), (p, p)).into_owned(),
        a12: a.view((0, p), (p, h)).into_owned(),
        a21: a.view((p, 0), (h, p)).into_owned(),
        a22: a.view((p, p), (h, h)).into_owned(),
        b1: b.rows(0, p).into_owned(),
        b2: b.rows(p, h).into_owned(),
        k1: k.rows(0, p).into_owned(),
        k2: k.rows(p, h).into_owned(),
    }
}

fn shifted_inverse(s: Complex<f64>, a: &CMatrix) -> Result<CMatrix> {
    let dim = a.nrows();
    if dim == 0 {
        return Ok(CMatrix::zeros(0, 0));
    }
    let m = CMatrix::identity(dim, dim) * s - a;
    let lu = m.lu();
    // LU succeeds on exactly singular inputs only by luck; guard on the pivots.
    let scale = lu.u().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let min_pivot = lu.u().diagonal().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-14 * scale.max(1e-300)) {
        return Err(Error::Numeric(format!("sI − A₂₂ is singular at s = {s}")));
    }
    lu.try_inverse()
        .ok_or_else(|| Error::Numeric(format!("sI − A₂₂ is singular at s = {s}")))
}

/// Evaluates the three transfer matrices at `s`.
pub fn dsf_transfer_eval(sys: &SystemMatrices, s: Complex<f64>) -> Result<DsfEval> {
    if s.norm() == 0.0 {
        return Err(Error::Argument("transfer matrices are undefined at s = 0".into()));
    }
    let bl = blocks(sys);
    let res = shifted_inverse(s, &bl.a22)?;
    let inv_s = Complex::new(1.0, 0.0) / s;
    let f_y = (&bl.a11 + &bl.a12 * &res * &bl.a21) * inv_s;
    let f_u = (&bl.a12 * &res * &bl.b2 + &bl.b1) * inv_s;
    let f_w = (&bl.a12 + &bl.a12 * &res * &bl.a22) * &bl.k2 * inv_s + &bl.k1;
    Ok(DsfEval { s, f_y, f_u, f_w })
}

/// Input-output maps evaluated directly from the state space:
/// `G_u = C(sI − A)⁻¹B` and `G_w = s·C(sI − A)⁻¹K`.
pub fn io_transfer_eval(sys: &SystemMatrices, s: Complex<f64>) -> Result<(CMatrix, CMatrix)> {
    let res = shifted_inverse(s, &to_complex(&sys.a))
        .map_err(|_| Error::Numeric(format!("sI − A is singular at s = {s}")))?;
    let c = to_complex(&sys.c);
    let g_u = &c * &res * to_complex(&sys.b);
    let g_w = &c * &res * to_complex(&sys.k) * s;
    Ok((g_u, g_w))
}

/// Input-output maps computed from the DSF: `G = (I − F_y)⁻¹[F_u, F_w]`.
pub fn io_from_dsf(eval: &DsfEval) -> Result<(CMatrix, CMatrix)> {
    let p = eval.f_y.nrows();
    let inv = (CMatrix::identity(p, p) - &eval.f_y)
        .try_inverse()
        .ok_or_else(|| Error::Numeric(format!("I − F_y singular at s = {}", eval.s)))?;
    Ok((&inv * &eval.f_u, &inv * &eval.f_w))
}

/// Recovers `(F_y, F_u, F_w)` from `(G_u, G_w)` on a frequency grid, assuming
/// `F_w = K₁` is diagonal: `F_y = I − K₁G_w⁻¹`, `F_u = (I − F_y)G_u`.
pub fn recover_dsf_from_io(
    freqs: &[Complex<f64>],
    g_u: &[CMatrix],
    g_w: &[CMatrix],
    k1: &DMatrix<f64>,
) -> Result<Vec<DsfEval>> {
    if freqs.len() != g_u.len() || freqs.len() != g_w.len() {
        return Err(Error::Dimension("frequency grid and transfer samples differ in length".into()));
    }
    let k1c = to_complex(k1);
    let p = k1.nrows();
    freqs
        .iter()
        .zip(g_u.iter().zip(g_w))
        .map(|(&s, (gu, gw))| {
            let gw_inv = gw
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numeric(format!("G_w singular at s = {s}")))?;
            let f_y = CMatrix::identity(p, p) - &k1c * gw_inv;
            let f_u = (CMatrix::identity(p, p) - &f_y) * gu;
            Ok(DsfEval { s, f_y, f_u, f_w: k1c.clone() })
        })
        .collect()
}

/// The shared regression `ΔY_r ≈ ΔT·Φ·w_r` built from one refined trajectory.
///
/// Rows run from `t_N` down to `t_1`; column block `j` (width `lags`) holds the
/// differenced, filtered, lagged trajectory of node `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionData {
    pub phi: DMatrix<f64>,
    /// Column `r` is `ΔY_r`.
    pub delta_y: DMatrix<f64>,
    /// `Φ'Φ`.
    pub gram: DMatrix<f64>,
    /// `Φ'ΔY` (column `r` for node `r`).
    pub cross: DMatrix<f64>,
    /// `‖ΔY_r‖²`.
    pub dy_norm2: Vec<f64>,
    pub lags: usize,
    pub filter: f64,
    pub dt: f64,
}

impl RegressionData {
    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.delta_y.ncols()
    }

    /// Regressor blocks: the nodes followed by any known inputs.
    pub fn sources(&self) -> usize {
        self.phi.ncols() / self.lags
    }

    /// Column range of node `j`'s lag block.
    pub fn block(&self, j: usize) -> std::ops::Range<usize> {
        j * self.lags..(j + 1) * self.lags
    }
}

/// Default truncation: about eight time units of memory, capped at `N`.
pub fn default_lags(grid: &FineGrid) -> usize {
    ((8.0 / grid.dt).ceil() as usize).clamp(1, grid.intervals())
}

/// `ŷ_j(t_i) = y_j(t_i) + a·ΔT·Σ_{v<i} y_j(t_v)` (left-endpoint rule).
pub fn filtered_trajectory(y: &DMatrix<f64>, a: f64, dt: f64) -> DMatrix<f64> {
    let mut out = y.clone();
    for j in 0..y.ncols() {
        let mut acc = 0.0;
        for i in 0..y.nrows() {
            out[(i, j)] = y[(i, j)] + a * dt * acc;
            acc += y[(i, j)];
        }
    }
    out
}

/// `Φ'Φ` for the lag-block layout, using the shift structure of the columns:
/// entry `((j,k+1),(j',k'+1))` equals `((j,k),(j',k'))` minus the term of the
/// oldest row. Matches `phi.tr_mul(&phi)` up to rounding.
fn lagged_gram(diffs: &DMatrix<f64>, lags: usize) -> DMatrix<f64> {
    let n_int = diffs.nrows() - 1;
    let p = diffs.ncols();
    let mut g = DMatrix::zeros(p * lags, p * lags);
    for j in 0..p {
        for j2 in 0..p {
            // Seed the first row and column of the (j, j2) block directly.
            for k2 in 0..lags {
                let v: f64 = (0..n_int - k2).map(|m| diffs[(m + k2, j)] * diffs[(m, j2)]).sum();
                g[(j * lags, j2 * lags + k2)] = v;
            }
            for k in 1..lags {
                let v: f64 = (0..n_int - k).map(|m| diffs[(m, j)] * diffs[(m + k, j2)]).sum();
                g[(j * lags + k, j2 * lags)] = v;
            }
            for k in 1..lags {
                for k2 in 1..lags {
                    let prev = g[(j * lags + k - 1, j2 * lags + k2 - 1)];
                    // Shifting both lags drops the pair at d index (N−k, N−k2).
                    let dropped = diffs[(n_int - k, j)] * diffs[(n_int - k2, j2)];
                    g[(j * lags + k, j2 * lags + k2)] = prev - dropped;
                }
            }
        }
    }
    g
}

/// Assembles `(Φ, ΔY)` from a trajectory with one row per grid point.
pub fn build_regression(y: &DMatrix<f64>, grid: &FineGrid, a: f64, lags: usize) -> Result<RegressionData> {
    build_regression_with_inputs(y, None, grid, a, lags)
}

/// Like [`build_regression`], with one extra lag block per known input column.
///
/// Input block `i` holds the unfiltered increments `Δu_i/ΔT` at lags
/// `0..l−1`, so its first coefficient carries the direct feedthrough of the
/// input into the node.
pub fn build_regression_with_inputs(
    y: &DMatrix<f64>,
    u: Option<&DMatrix<f64>>,
    grid: &FineGrid,
    a: f64,
    lags: usize,
) -> Result<RegressionData> {
    let n_int = grid.intervals();
    if y.nrows() != n_int + 1 || u.is_some_and(|u| u.nrows() != n_int + 1) {
        return Err(Error::Dimension(format!(
            "trajectory has {} rows, grid has {} points",
            y.nrows(),
            n_int + 1
        )));
    }
    if lags == 0 || lags > n_int {
        return Err(Error::Argument(format!("truncation l={lags} must be in 1..={n_int}")));
    }
    let p = y.ncols();
    let yhat = filtered_trajectory(y, a, grid.dt);
    // d[m] = ŷ(t_m) − ŷ(t_{m−1}), with ŷ(t_{−1}) = 0.
    let q = u.map_or(0, |u| u.ncols());
    // Input column m holds Δu over (t_m, t_{m+1}], so lag k at step i reads index i−1−k like the nodes.
    let diffs = DMatrix::from_fn(n_int + 1, p + q, |m, j| match (j < p, u) {
        (true, _) if m == 0 => yhat[(0, j)],
        (true, _) => yhat[(m, j)] - yhat[(m - 1, j)],
        (false, Some(u)) if m < n_int => (u[(m + 1, j - p)] - u[(m, j - p)]) / grid.dt,
        _ => 0.0,
    });
    let mut phi = DMatrix::zeros(n_int, (p + q) * lags);
    let mut delta_y = DMatrix::zeros(n_int, p);
    for i in 1..=n_int {
        let row = n_int - i;
        for j in 0..p {
            delta_y[(row, j)] = y[(i, j)] - y[(i - 1, j)];
        }
        for j in 0..p + q {
            for k in 0..lags.min(i) {
                phi[(row, j * lags + k)] = diffs[(i - 1 - k, j)];
            }
        }
    }
    let gram = lagged_gram(&diffs, lags);
    let cross = phi.tr_mul(&delta_y);
    let dy_norm2 = delta_y.column_iter().map(|c| c.norm_squared()).collect();
    Ok(RegressionData {
        phi,
        delta_y,
        gram,
        cross,
        dy_norm2,
        lags,
        filter: a,
        dt: grid.dt,
    })
}

/// Linear interpolation of inputs recorded at the measurement instants onto the fine grid.
pub fn interpolate_inputs(u_t1: &DMatrix<f64>, grid: &FineGrid) -> Result<DMatrix<f64>> {
    if u_t1.nrows() != grid.measurements() {
        return Err(Error::Dimension(format!(
            "inputs have {} rows, grid has {} measurements",
            u_t1.nrows(),
            grid.measurements()
        )));
    }
    let mut u = DMatrix::zeros(grid.times.len(), u_t1.ncols());
    for (q, &k) in grid.measurement_index.iter().enumerate() {
        u.row_mut(k).copy_from(&u_t1.row(q));
    }
    for q in 0..grid.segments() {
        let (k0, k1) = (grid.measurement_index[q], grid.measurement_index[q + 1]);
        let n = (k1 - k0) as f64;
        for i in 1..k1 - k0 {
            for c in 0..u.ncols() {
                u[(k0 + i, c)] = u[(k0, c)] + (u[(k1, c)] - u[(k0, c)]) * i as f64 / n;
            }
        }
    }
    Ok(u)
}

/// Stacks measurement-instant rows and interior rows into one grid-ordered trajectory.
pub fn assemble_trajectory(y_t1: &DMatrix<f64>, y_t2: &DMatrix<f64>, grid: &FineGrid) -> Result<DMatrix<f64>> {
    let interior = grid.interior_indices();
    if y_t1.nrows() != grid.measurements() || y_t2.nrows() != interior.len() || y_t1.ncols() != y_t2.ncols() {
        return Err(Error::Dimension("trajectory blocks do not match the grid".into()));
    }
    let mut y = DMatrix::zeros(grid.times.len(), y_t1.ncols());
    for (q, &k) in grid.measurement_index.iter().enumerate() {
        y.row_mut(k).copy_from(&y_t1.row(q));
    }
    for (i, &k) in interior.iter().enumerate() {
        y.row_mut(k).copy_from(&y_t2.row(i));
    }
    Ok(y)
}
