//! Stable impulse-response kernels (TC, DC, SS) and link covariance matrices.
//!
//! All three kernels decay exponentially in the lag, which is what makes the
//! Gaussian-process prior favour stable impulse responses. Lags live on the
//! truncated grid `{ΔT, 2ΔT, …, lΔT}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family used for every link prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Tuned/correlated: `β^max(t,s)`.
    #[default]
    Tc,
    /// Diagonal/correlated: `β₁^((t+s)/2) β₂^|t−s|`.
    Dc,
    /// Second-order stable spline.
    Ss,
}

impl KernelKind {
    /// Number of shape hyperparameters the kernel carries.
    pub fn shape_len(self) -> usize {
        match self {
            KernelKind::Tc | KernelKind::Ss => 1,
            KernelKind::Dc => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Tc => "tc",
            KernelKind::Dc => "dc",
            KernelKind::Ss => "ss",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tc" => Ok(KernelKind::Tc),
            "dc" => Ok(KernelKind::Dc),
            "ss" => Ok(KernelKind::Ss),
            other => Err(Error::Config(format!("unknown kernel kind `{other}` (expected tc|dc|ss)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct KernelSpec {
    pub kind: KernelKind,
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        Self { kind }
    }
}

/// Prior hyperparameters of one candidate link `j → r`.
///
/// `beta` always has room for two components; TC and SS only read the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPrior {
    pub active: bool,
    pub gamma: f64,
    pub beta: [f64; 2],
}

impl LinkPrior {
    pub fn new(active: bool, gamma: f64, beta: [f64; 2]) -> Self {
        Self { active, gamma, beta }
    }

    /// The shape parameters the given kernel actually uses.
    pub fn shape(&self, spec: KernelSpec) -> &[f64] {
        &self.beta[..spec.kind.shape_len()]
    }
}

impl Default for LinkPrior {
    fn default() -> Self {
        Self {
            active: false,
            gamma: 1.0,
            beta: [0.5, 0.5],
        }
    }
}

fn check_shape(spec: KernelSpec, beta: &[f64]) -> Result<()> {
    let need = spec.kind.shape_len();
    if beta.len() < need {
        return Err(Error::Domain(format!(
            "{} kernel needs {need} shape parameter(s), got {}",
            spec.kind.name(),
            beta.len()
        )));
    }
    for &b in &beta[..need] {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::Domain(format!("kernel shape parameter {b} outside (0,1)")));
        }
    }
    Ok(())
}

// Unchecked evaluation; callers validate β once per matrix.
fn eval_raw(kind: KernelKind, t: f64, s: f64, beta: &[f64]) -> f64 {
    let hi = t.max(s);
    match kind {
        KernelKind::Tc => beta[0].powf(hi),
        KernelKind::Dc => beta[0].powf(0.5 * (t + s)) * beta[1].powf((t - s).abs()),
        KernelKind::Ss => {
            let b = beta[0];
            0.5 * b.powf(t + s + hi) - b.powf(3.0 * hi) / 6.0
        }
    }
}

/// Evaluates `k(t, s; β)` for the chosen kernel.
pub fn kernel_eval(spec: KernelSpec, t: f64, s: f64, beta: &[f64]) -> Result<f64> {
    check_shape(spec, beta)?;
    if !(t > 0.0 && s > 0.0) {
        return Err(Error::Domain(format!("kernel times must be positive, got ({t}, {s})")));
    }
    Ok(eval_raw(spec.kind, t, s, beta))
}

/// Unit-scale kernel matrix on lags `{ΔT, …, lΔT}` (no indicator, no γ).
pub fn kernel_matrix(spec: KernelSpec, beta: &[f64], lags: usize, dt: f64) -> Result<DMatrix<f64>> {
    check_shape(spec, beta)?;
    if lags == 0 {
        return Err(Error::Argument("kernel matrix needs at least one lag".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("lag step must be positive, got {dt}")));
    }
    let mut k = DMatrix::zeros(lags, lags);
    for p in 0..lags {
        let tp = (p + 1) as f64 * dt;
        for q in 0..=p {
            let v = eval_raw(spec.kind, tp, (q + 1) as f64 * dt, beta);
            k[(p, q)] = v;
            k[(q, p)] = v;
        }
    }
    Ok(k)
}

/// `[K]_{pq} = s·|γ|·k(pΔT, qΔT; β)` for one link.
pub fn build_link_covariance(
    prior: &LinkPrior,
    spec: KernelSpec,
    lags: usize,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(spec, prior.shape(spec), lags, dt)?;
    if prior.active {
        k *= prior.gamma.abs();
    } else {
        k.fill(0.0);
    }
    Ok(k)
}

/// Relative diagonal jitter added before factorizing kernel matrices.
pub const JITTER: f64 = 1e-10;

/// Adds `JITTER · max diag` to the diagonal in place.
pub fn add_jitter(k: &mut DMatrix<f64>) {
    let max_diag = k.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let eps = JITTER * max_diag;
    for i in 0..k.nrows() {
        k[(i, i)] += eps;
    }
}

/// Lower Cholesky factor of a unit-scale kernel matrix (jittered).
pub fn kernel_cholesky(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut kj = k.clone();
    add_jitter(&mut kj);
    kj.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numeric("kernel matrix not positive definite after jitter".into()))
}

/// Diagonal of the unit-scale kernel, useful for inspecting decay.
pub fn kernel_diagonal(spec: KernelSpec, beta: &[f64], lags: usize, dt: f64) -> Result<DVector<f64>> {
    Ok(kernel_matrix(spec, beta, lags, dt)?.diagonal())
}
