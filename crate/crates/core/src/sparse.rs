//! Sparse likelihood approximation: each impulse response is described by its
//! values at a few pseudo lags, the rest filled in with the Gaussian conditional
//! mean `w^R = K^{RD}(K^{DD})⁻¹w^D`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{add_jitter, kernel_matrix, KernelSpec, LinkPrior};

/// Pseudo-point layout over the lag grid `{1, …, l}` (stored 0-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoGrid {
    pub lags: usize,
    /// Selected lag indices `D`, increasing.
    pub selected: Vec<usize>,
    /// Remaining lag indices `R`, increasing.
    pub rest: Vec<usize>,
}

impl PseudoGrid {
    /// Every lag is a pseudo-point.
    pub fn full(lags: usize) -> Self {
        Self {
            lags,
            selected: (0..lags).collect(),
            rest: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rest.is_empty()
    }
}

/// Default number of pseudo-points for a truncation length.
pub fn default_pseudo_points(lags: usize) -> usize {
    lags.min(30)
}

/// Roughly log-spaced pseudo lags, dense early and sparse late, always
/// containing the first and last lag (when `d ≥ 2`).
pub fn select_pseudo_points(lags: usize, d: usize) -> Result<PseudoGrid> {
    if d == 0 || lags == 0 {
        return Err(Error::Argument("pseudo-point count and lag count must be ≥ 1".into()));
    }
    if d > lags {
        return Err(Error::Argument(format!("cannot pick {d} pseudo-points from {lags} lags")));
    }
    let mut chosen = vec![false; lags];
    if d == 1 {
        chosen[0] = true;
    } else {
        let top = (lags as f64).ln();
        for i in 0..d {
            let v = (top * i as f64 / (d - 1) as f64).exp().round() as usize;
            chosen[v.clamp(1, lags) - 1] = true;
        }
        let mut missing = d - chosen.iter().filter(|&&c| c).count();
        for c in chosen.iter_mut() {
            if missing == 0 {
                break;
            }
            if !*c {
                *c = true;
                missing -= 1;
            }
        }
    }
    let selected = (0..lags).filter(|&i| chosen[i]).collect();
    let rest = (0..lags).filter(|&i| !chosen[i]).collect();
    Ok(PseudoGrid { lags, selected, rest })
}

fn submatrix(k: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| k[(rows[a], cols[b])])
}

/// `D_rj` (`l × d`): identity rows on pseudo lags, `K^{RD}(K^{DD})⁻¹` rows elsewhere.
///
/// Depends on `β` only; the `|γ|` scale cancels.
pub fn build_projection(prior: &LinkPrior, spec: KernelSpec, dt: f64, pseudo: &PseudoGrid) -> Result<DMatrix<f64>> {
    let k = kernel_matrix(spec, prior.shape(spec), pseudo.lags, dt)?;
    projection_from_kernel(&k, pseudo)
}

pub(crate) fn projection_from_kernel(k: &DMatrix<f64>, pseudo: &PseudoGrid) -> Result<DMatrix<f64>> {
    let d = pseudo.len();
    let mut proj = DMatrix::zeros(pseudo.lags, d);
    for (a, &i) in pseudo.selected.iter().enumerate() {
        proj[(i, a)] = 1.0;
    }
    if pseudo.rest.is_empty() {
        return Ok(proj);
    }
    let mut kdd = submatrix(k, &pseudo.selected, &pseudo.selected);
    add_jitter(&mut kdd);
    let chol = kdd
        .cholesky()
        .ok_or_else(|| Error::Numeric("pseudo-point kernel block not positive definite".into()))?;
    // (K^{DD})⁻¹K^{DR}, transposed into rows for R.
    let kdr = submatrix(k, &pseudo.selected, &pseudo.rest);
    let rows = chol.solve(&kdr).transpose();
    for (a, &i) in pseudo.rest.iter().enumerate() {
        proj.row_mut(i).copy_from(&rows.row(a));
    }
    Ok(proj)
}

/// `K^{RR} − K^{RD}(K^{DD})⁻¹K^{DR}` for the unit-scale kernel.
pub fn conditional_covariance(spec: KernelSpec, beta: &[f64], dt: f64, pseudo: &PseudoGrid) -> Result<DMatrix<f64>> {
    let k = kernel_matrix(spec, beta, pseudo.lags, dt)?;
    let kdd = submatrix(&k, &pseudo.selected, &pseudo.selected);
    let kdr = submatrix(&k, &pseudo.selected, &pseudo.rest);
    let krr = submatrix(&k, &pseudo.rest, &pseudo.rest);
    let mut kj = kdd.clone();
    add_jitter(&mut kj);
    let chol = kj
        .cholesky()
        .ok_or_else(|| Error::Numeric("pseudo-point kernel block not positive definite".into()))?;
    Ok(krr - kdr.transpose() * chol.solve(&kdr))
}

/// Lower factor `F` with `F F' = D K^{DD} D'` (unit scale), so that a link's
/// impulse response is `w = √|γ|·F·v` with `v ~ N(0, I_d)`.
pub fn link_factor(prior: &LinkPrior, spec: KernelSpec, dt: f64, pseudo: &PseudoGrid) -> Result<DMatrix<f64>> {
    let k = kernel_matrix(spec, prior.shape(spec), pseudo.lags, dt)?;
    let proj = projection_from_kernel(&k, pseudo)?;
    let mut kdd = submatrix(&k, &pseudo.selected, &pseudo.selected);
    add_jitter(&mut kdd);
    let l = kdd
        .cholesky()
        .ok_or_else(|| Error::Numeric("link kernel not positive definite after jitter".into()))?
        .l();
    Ok(proj * l)
}
