//! Densities of the hierarchical model in log space.
//!
//! For node `r` with active links `J`, every active impulse response is written
//! as `w_rj = √|γ_rj|·F_rj·v_j` with `v ~ N(0, I)`, where `F_rj F_rj'` is the
//! (possibly projected) kernel matrix. With `M = blkdiag(√|γ|F)`,
//! `G = Φ'Φ` and `b = Φ'ΔY_r`, the collapsed marginal only needs the inner matrix
//!
//! ```text
//! B = I + (ΔT/σ_r)·M'G_J M,    c = M'b_J,
//! log p(ΔY_r) = −½[N log(2πσ_rΔT) + log|B|] − ½[‖ΔY_r‖²/(σ_rΔT) − c'B⁻¹c/σ_r²].
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsf::{default_lags, RegressionData};
use crate::error::{Error, Result};
use crate::grid::FineGrid;
use crate::kernels::{KernelSpec, LinkPrior};
use crate::sparse::{default_pseudo_points, link_factor, select_pseudo_points, PseudoGrid};

/// Clamp applied to log acceptance ratios before exponentiating.
pub const LOG_RATIO_CLAMP: f64 = 700.0;

/// Prior and regression settings shared by every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Inverse-Gamma shape for σ_r and λ.
    pub a0: f64,
    /// Inverse-Gamma scale for σ_r and λ.
    pub b0: f64,
    /// Rate of the symmetric exponential prior on γ.
    pub a1: f64,
    /// Prior link probability.
    pub p_s: f64,
    pub kernel: KernelSpec,
    /// Filter constant `a` of `ŷ`.
    pub filter: f64,
    /// Truncation length `l`; `None` uses about eight time units.
    pub lags: Option<usize>,
    /// Pseudo-point count `d`; `None` uses `min(l, 30)`.
    pub pseudo_points: Option<usize>,
    /// Regress on the recorded inputs (interpolated onto the grid) instead of
    /// treating them as part of the process noise.
    pub known_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            a0: 0.001,
            b0: 0.001,
            a1: 1.0,
            p_s: 0.1,
            kernel: KernelSpec::default(),
            filter: 1.0,
            lags: None,
            pseudo_points: None,
            known_inputs: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a0", self.a0), ("b0", self.b0), ("a1", self.a1)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.p_s > 0.0 && self.p_s < 1.0) {
            return Err(Error::Config(format!("p_s must lie in (0,1), got {}", self.p_s)));
        }
        if !self.filter.is_finite() || self.filter < 0.0 {
            return Err(Error::Config(format!("filter constant must be ≥ 0, got {}", self.filter)));
        }
        if self.lags == Some(0) || self.pseudo_points == Some(0) {
            return Err(Error::Config("lags and pseudo_points must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn resolve_lags(&self, grid: &FineGrid) -> Result<usize> {
        match self.lags {
            None => Ok(default_lags(grid)),
            Some(l) if l <= grid.intervals() => Ok(l),
            Some(l) => Err(Error::Config(format!(
                "truncation l={l} exceeds the {} fine intervals",
                grid.intervals()
            ))),
        }
    }

    pub fn resolve_pseudo(&self, lags: usize) -> Result<PseudoGrid> {
        let d = self.pseudo_points.unwrap_or_else(|| default_pseudo_points(lags)).min(lags);
        select_pseudo_points(lags, d)
    }
}

/// Process-noise variances `σ` (one per node) and the measurement variance `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub sigma: Vec<f64>,
    pub lambda: f64,
}

impl NoiseState {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().chain(std::iter::once(&self.lambda)).all(|&v| v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain("noise variances must be positive and finite".into()))
        }
    }
}

/// Inner-matrix factorization of one node's collapsed model.
#[derive(Debug, Clone)]
pub struct NodeEvidence {
    pub node: usize,
    pub sigma: f64,
    /// Active source nodes `J`, increasing.
    pub active: Vec<usize>,
    /// `√|γ_rj|·F_rj` for each active link (`l × d`).
    pub loadings: Vec<DMatrix<f64>>,
    chol: Option<Cholesky<f64, Dyn>>,
    pub c: DVector<f64>,
    pub log_det_b: f64,
    /// `c'B⁻¹c`.
    pub quad: f64,
}

impl NodeEvidence {
    /// Builds the inner system for node `r` given its link row.
    pub fn build(
        r: usize,
        row: &[LinkPrior],
        spec: KernelSpec,
        reg: &RegressionData,
        pseudo: &PseudoGrid,
        sigma: f64,
    ) -> Result<Self> {
        let mut loadings = Vec::new();
        let mut active = Vec::new();
        for (j, prior) in row.iter().enumerate() {
            if prior.active {
                let f = link_factor(prior, spec, reg.dt, pseudo)? * prior.gamma.abs().sqrt();
                loadings.push(f);
                active.push(j);
            }
        }
        Self::from_loadings(r, active, loadings, reg, sigma)
    }

    /// Builds the inner system from precomputed loadings.
    pub fn from_loadings(
        r: usize,
        active: Vec<usize>,
        loadings: Vec<DMatrix<f64>>,
        reg: &RegressionData,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("σ_{r} must be positive, got {sigma}")));
        }
        let widths: Vec<usize> = loadings.iter().map(|m| m.ncols()).collect();
        let dim: usize = widths.iter().sum();
        let offsets: Vec<usize> = widths
            .iter()
            .scan(0, |acc, &w| {
                let o = *acc;
                *acc += w;
                Some(o)
            })
            .collect();
        let mut c = DVector::zeros(dim);
        let mut b = DMatrix::identity(dim, dim);
        let scale = reg.dt / sigma;
        for (a, &ja) in active.iter().enumerate() {
            let ra = reg.block(ja);
            let bj = reg.cross.view((ra.start, r), (reg.lags, 1));
            c.rows_mut(offsets[a], widths[a]).copy_from(&(loadings[a].transpose() * bj));
            for (bi, &jb) in active.iter().enumerate().skip(a) {
                let rb = reg.block(jb);
                let g = reg.gram.view((ra.start, rb.start), (reg.lags, reg.lags));
                let h = loadings[a].transpose() * (g * &loadings[bi]) * scale;
                let mut blk = b.view_mut((offsets[a], offsets[bi]), (widths[a], widths[bi]));
                blk += &h;
                if bi != a {
                    let mut blk = b.view_mut((offsets[bi], offsets[a]), (widths[bi], widths[a]));
                    blk += h.transpose();
                }
            }
        }
        let (chol, log_det_b, quad) = if dim == 0 {
            (None, 0.0, 0.0)
        } else {
            let chol = Cholesky::new(b)
                .ok_or_else(|| Error::Numeric(format!("inner matrix of node {r} is not positive definite")))?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let quad = c.dot(&chol.solve(&c));
            (Some(chol), log_det, quad)
        };
        if !(log_det_b.is_finite() && quad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite collapsed marginal for node {r}")));
        }
        Ok(Self {
            node: r,
            sigma,
            active,
            loadings,
            chol,
            c,
            log_det_b,
            quad,
        })
    }

    /// Dimension of the factorized inner matrix (`d·|J|`).
    pub fn inner_dim(&self) -> usize {
        self.c.len()
    }

    /// The part of the log marginal that depends on the links:
    /// `−½log|B| + c'B⁻¹c/(2σ²)`.
    pub fn link_term(&self) -> f64 {
        -0.5 * self.log_det_b + 0.5 * self.quad / (self.sigma * self.sigma)
    }

    /// Full log marginal `log p(ΔY_r | s_r, β_r, γ_r, σ_r)`.
    pub fn log_marginal(&self, reg: &RegressionData) -> f64 {
        let n = reg.rows() as f64;
        let sdt = self.sigma * reg.dt;
        -0.5 * n * (2.0 * std::f64::consts::PI * sdt).ln() - 0.5 * reg.dy_norm2[self.node] / sdt + self.link_term()
    }

    /// Conditional mean of `w_r`, stacked over all `p` source blocks.
    pub fn posterior_mean(&self, reg: &RegressionData) -> DVector<f64> {
        let mut w = DVector::zeros(reg.phi.ncols());
        if let Some(chol) = &self.chol {
            let v = chol.solve(&self.c) / self.sigma;
            self.scatter(&v, &mut w, reg);
        }
        w
    }

    /// Conditional covariance of `w_r` (dense, `pl × pl`).
    pub fn posterior_covariance(&self, reg: &RegressionData) -> DMatrix<f64> {
        let pl = reg.phi.ncols();
        let mut cov = DMatrix::zeros(pl, pl);
        if let Some(chol) = &self.chol {
            let m = self.stacked_loading(reg);
            let inner = chol.inverse();
            let full = &m * inner * m.transpose();
            let cols = self.active_columns(reg);
            for (a, &ia) in cols.iter().enumerate() {
                for (b, &ib) in cols.iter().enumerate() {
                    cov[(ia, ib)] = full[(a, b)];
                }
            }
        }
        cov
    }

    /// Draws `w_r ~ N(μ_r, Σ_r)`; inactive blocks are exactly zero.
    pub fn sample_w(&self, reg: &RegressionData, rng: &mut impl Rng) -> DVector<f64> {
        let mut w = DVector::zeros(reg.phi.ncols());
        if let Some(chol) = &self.chol {
            let dim = self.inner_dim();
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            // v = B⁻¹c/σ + L'⁻¹z has covariance B⁻¹.
            let mut noise = z;
            chol.l_dirty()
                .tr_solve_lower_triangular_mut(&mut noise);
            let v = chol.solve(&self.c) / self.sigma + noise;
            self.scatter(&v, &mut w, reg);
        }
        w
    }

    fn active_columns(&self, reg: &RegressionData) -> Vec<usize> {
        self.active.iter().flat_map(|&j| reg.block(j)).collect()
    }

    fn stacked_loading(&self, reg: &RegressionData) -> DMatrix<f64> {
        let rows = self.active.len() * reg.lags;
        let mut m = DMatrix::zeros(rows, self.inner_dim());
        let mut col = 0;
        for (a, load) in self.loadings.iter().enumerate() {
            m.view_mut((a * reg.lags, col), (reg.lags, load.ncols())).copy_from(load);
            col += load.ncols();
        }
        m
    }

    fn scatter(&self, v: &DVector<f64>, w: &mut DVector<f64>, reg: &RegressionData) {
        let mut col = 0;
        for (load, &j) in self.loadings.iter().zip(&self.active) {
            let block = load * v.rows(col, load.ncols());
            w.rows_mut(reg.block(j).start, reg.lags).copy_from(&block);
            col += load.ncols();
        }
    }
}

/// `log p(ΔY_r | s_r, β_r, γ_r, σ_r)` with `w_r` integrated out.
pub fn log_collapsed_marginal(
    r: usize,
    row: &[LinkPrior],
    spec: KernelSpec,
    reg: &RegressionData,
    pseudo: &PseudoGrid,
    sigma: f64,
) -> Result<f64> {
    Ok(NodeEvidence::build(r, row, spec, reg, pseudo, sigma)?.log_marginal(reg))
}

/// Draws `w_r` from its Gaussian full conditional.
pub fn sample_w_conditional(
    r: usize,
    row: &[LinkPrior],
    spec: KernelSpec,
    reg: &RegressionData,
    pseudo: &PseudoGrid,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    Ok(NodeEvidence::build(r, row, spec, reg, pseudo, sigma)?.sample_w(reg, rng))
}

/// `X ~ IG(shape, scale)`, drawn as the reciprocal of a Gamma variate.
pub fn sample_inverse_gamma(shape: f64, scale: f64, rng: &mut impl Rng) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| Error::Domain(format!("inverse-gamma({shape}, {scale}): {e}")))?;
    Ok(1.0 / g.sample(rng))
}

/// `‖ΔY_r − ΔT·Φ·w_r‖²`.
pub fn residual_norm2(r: usize, w: &DVector<f64>, reg: &RegressionData) -> f64 {
    let fit = &reg.phi * w * reg.dt;
    (reg.delta_y.column(r) - fit).norm_squared()
}

/// Shape and scale of the σ_r conditional.
pub fn sigma_posterior_params(r: usize, w: &DVector<f64>, reg: &RegressionData, config: &ModelConfig) -> Result<(f64, f64)> {
    let n = reg.rows();
    if n == 0 {
        return Err(Error::Argument("σ conditional needs at least one increment".into()));
    }
    let shape = config.a0 + n as f64 / 2.0;
    let scale = config.b0 + residual_norm2(r, w, reg) / (2.0 * reg.dt);
    Ok((shape, scale))
}

pub fn sample_sigma_conditional(
    r: usize,
    w: &DVector<f64>,
    reg: &RegressionData,
    config: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (shape, scale) = sigma_posterior_params(r, w, reg, config)?;
    sample_inverse_gamma(shape, scale, rng)
}

/// Shape and scale of the λ conditional.
pub fn lambda_posterior_params(z: &DMatrix<f64>, y_t1: &DMatrix<f64>, config: &ModelConfig) -> Result<(f64, f64)> {
    if z.shape() != y_t1.shape() {
        return Err(Error::Dimension(format!(
            "measurements {:?} vs trajectory rows {:?}",
            z.shape(),
            y_t1.shape()
        )));
    }
    if z.is_empty() {
        return Err(Error::Argument("λ conditional needs at least one measurement".into()));
    }
    let shape = config.a0 + z.len() as f64 / 2.0;
    let scale = config.b0 + 0.5 * (z - y_t1).norm_squared();
    Ok((shape, scale))
}

pub fn sample_lambda_conditional(
    z: &DMatrix<f64>,
    y_t1: &DMatrix<f64>,
    config: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (shape, scale) = lambda_posterior_params(z, y_t1, config)?;
    sample_inverse_gamma(shape, scale, rng)
}

/// Unnormalized log prior of the topology and link hyperparameters.
///
/// Every link contributes `−a₁|γ|`, active or not. β outside `(0,1)` gives `−∞`.
pub fn log_prior_hyper(links: &[Vec<LinkPrior>], config: &ModelConfig) -> f64 {
    let mut total = 0.0;
    let mut active = 0usize;
    let mut count = 0usize;
    for prior in links.iter().flatten() {
        count += 1;
        if prior.shape(config.kernel).iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return f64::NEG_INFINITY;
        }
        total -= config.a1 * prior.gamma.abs();
        if prior.active {
            active += 1;
        }
    }
    total + active as f64 * config.p_s.ln() + (count - active) as f64 * (1.0 - config.p_s).ln()
}

/// `min(1, exp(log_r))` with the log ratio clamped to avoid overflow.
pub fn acceptance_probability(log_r: f64) -> f64 {
    if log_r.is_nan() {
        return 0.0;
    }
    log_r.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp().min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsf::build_regression;
    use crate::grid::build_grid;
    use crate::kernels::{kernel_matrix, KernelKind};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TC: KernelSpec = KernelSpec { kind: KernelKind::Tc };

    fn instance(p: usize, m: usize, refinement: usize, lags: usize, seed: u64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let grid = build_grid(&times, refinement).unwrap();
        let mut y = DMatrix::zeros(grid.times.len(), p);
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..grid.times.len() {
                acc = 0.8 * acc + rng.sample::<f64, _>(StandardNormal);
                y[(i, j)] = acc;
            }
        }
        build_regression(&y, &grid, 1.0, lags).unwrap()
    }

    #[test]
    fn all_links_off_reduces_to_white_noise() {
        let reg = instance(2, 6, 2, 3, 1);
        let row = vec![LinkPrior::default(); 2];
        let sigma = 0.7;
        let v = log_collapsed_marginal(0, &row, TC, &reg, &PseudoGrid::full(3), sigma).unwrap();
        let n = reg.rows() as f64;
        let sdt = sigma * reg.dt;
        let expect = -reg.dy_norm2[0] / (2.0 * sdt) - 0.5 * n * (2.0 * std::f64::consts::PI * sdt).ln();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_gamma_is_continuous() {
        let reg = instance(2, 6, 2, 3, 2);
        let off = vec![LinkPrior::default(); 2];
        let on = vec![LinkPrior::new(true, 1e-12, [0.5, 0.5]); 2];
        let a = log_collapsed_marginal(1, &off, TC, &reg, &PseudoGrid::full(3), 0.3).unwrap();
        let b = log_collapsed_marginal(1, &on, TC, &reg, &PseudoGrid::full(3), 0.3).unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn flat_prior_mean_is_least_squares() {
        let reg = instance(1, 12, 2, 2, 3);
        let row = vec![LinkPrior::new(true, 1e9, [0.5, 0.5])];
        let ev = NodeEvidence::build(0, &row, TC, &reg, &PseudoGrid::full(2), 0.5).unwrap();
        let mean = ev.posterior_mean(&reg);
        let x = &reg.phi * reg.dt;
        let ls = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * reg.delta_y.column(0);
        assert!((mean - ls).amax() < 1e-3);
    }

    #[test]
    fn no_data_draws_from_prior() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let grid = build_grid(&times, 1).unwrap();
        let reg = build_regression(&DMatrix::zeros(4, 1), &grid, 1.0, 2).unwrap();
        let row = vec![LinkPrior::new(true, 2.0, [0.6, 0.5])];
        let ev = NodeEvidence::build(0, &row, TC, &reg, &PseudoGrid::full(2), 1.0).unwrap();
        let cov = ev.posterior_covariance(&reg);
        let prior = kernel_matrix(TC, &[0.6], 2, 1.0).unwrap() * 2.0;
        assert!((cov - prior).amax() < 1e-8);
    }

    #[test]
    fn monte_carlo_mean_of_w() {
        let reg = instance(2, 8, 2, 2, 4);
        let row = vec![LinkPrior::new(true, 1.5, [0.5, 0.5]), LinkPrior::new(true, 0.8, [0.3, 0.5])];
        let ev = NodeEvidence::build(0, &row, TC, &reg, &PseudoGrid::full(2), 0.4).unwrap();
        let mu = ev.posterior_mean(&reg);
        let cov = ev.posterior_covariance(&reg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mut sum = DVector::zeros(4);
        for _ in 0..n {
            sum += ev.sample_w(&reg, &mut rng);
        }
        let mean = sum / n as f64;
        for i in 0..4 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - mu[i]).abs() < 3.5 * se, "coordinate {i}");
        }
    }

    #[test]
    fn sigma_zero_residual_and_empty_data() {
        let times = [0.0, 1.0];
        let grid = build_grid(&times, 1).unwrap();
        let reg = build_regression(&DMatrix::from_element(2, 1, 1.0), &grid, 0.0, 1).unwrap();
        // ΔY = 0 and w = 0 leave only the prior scale.
        let w = DVector::zeros(1);
        let cfg = ModelConfig::default();
        let (a, b) = sigma_posterior_params(0, &w, &reg, &cfg).unwrap();
        assert_relative_eq!(a, 0.001 + 0.5);
        assert_relative_eq!(b, 0.001);
    }

    #[test]
    fn lambda_parameters_by_hand() {
        let cfg = ModelConfig::default();
        let z = DMatrix::from_element(1, 1, 3.0);
        let y = DMatrix::from_element(1, 1, 1.0);
        let (a, b) = lambda_posterior_params(&z, &y, &cfg).unwrap();
        assert_relative_eq!(a, 0.501);
        assert_relative_eq!(b, 0.001 + 2.0);
        let (_, b0) = lambda_posterior_params(&z, &z, &cfg).unwrap();
        assert_relative_eq!(b0, 0.001);
    }

    #[test]
    fn inverse_gamma_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (6.0, 2.0);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_inverse_gamma(a, b, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean / (b / (a - 1.0)) - 1.0).abs() < 0.02);
    }

    #[test]
    fn hyperprior_examples() {
        let cfg = ModelConfig::default();
        let mut links = vec![vec![LinkPrior::default(); 2]; 2];
        let base = log_prior_hyper(&links, &cfg);
        assert_relative_eq!(base, 4.0 * 0.9f64.ln() - 4.0);
        links[0][1] = LinkPrior::new(true, 2.0, [0.5, 0.5]);
        let one = log_prior_hyper(&links, &cfg);
        assert_relative_eq!(one - base, -1.0 + (0.1f64 / 0.9).ln(), epsilon = 1e-12);
        links[1][1].beta[0] = 1.0;
        assert_eq!(log_prior_hyper(&links, &cfg), f64::NEG_INFINITY);

        let half = ModelConfig { p_s: 0.5, ..cfg };
        let mut a = vec![vec![LinkPrior::new(false, 0.0, [0.5, 0.5]); 2]; 2];
        let t0 = log_prior_hyper(&a, &half);
        a[1][0].active = true;
        a[1][0].gamma = 0.0;
        assert_relative_eq!(log_prior_hyper(&a, &half), t0);
    }

    #[test]
    fn acceptance_clamps() {
        assert_eq!(acceptance_probability(1e9), 1.0);
        assert_eq!(acceptance_probability(-1e9), (-700f64).exp());
        assert_eq!(acceptance_probability(f64::NAN), 0.0);
    }
}
