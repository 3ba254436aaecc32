//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails. Pass substrings (e.g. `c7`) to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, InverseGamma, Normal};

use sdenet::cli::{self, BenchmarkConfig, NetworkKind};
use sdenet::data::TimeSeriesData;
use sdenet::dsf::{build_regression, RegressionData};
use sdenet::grid::build_grid;
use sdenet::kernels::{add_jitter, kernel_matrix, KernelKind, KernelSpec, LinkPrior};
use sdenet::metrics::ranked_from_pairs;
use sdenet::posterior::{
    log_collapsed_marginal, sample_lambda_conditional, sample_sigma_conditional,
    ModelConfig, NodeEvidence,
};
use sdenet::sampler::{
    bridge_covariance, switch_log_ratio, trajectory_log_ratio, update_log_ratio, ChainState, ModelContext, Sampler,
    SamplerBlocks, SamplerConfig, SwitchMode, TrajectoryProposal,
};
use sdenet::simulator::{
    coarsen_path, generate_random_network, integrate_sde_path, sample_wiener_path, simulate_equivalent_realization,
    OdeScheme,
};
use sdenet::sparse::{select_pseudo_points, PseudoGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// ---------------------------------------------------------------- oracles

/// Unit-scale kernel plus the same relative jitter the model factorizes.
fn jittered_kernel(spec: KernelSpec, beta: &[f64], lags: usize, dt: f64) -> DMatrix<f64> {
    let mut k = kernel_matrix(spec, beta, lags, dt).unwrap();
    add_jitter(&mut k);
    k
}

/// Block-diagonal prior covariance of `w_r` over all sources (inactive blocks zero).
fn prior_covariance(row: &[LinkPrior], spec: KernelSpec, lags: usize, dt: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(row.len() * lags, row.len() * lags);
    for (j, link) in row.iter().enumerate() {
        if link.active {
            let kj = jittered_kernel(spec, link.shape(spec), lags, dt) * link.gamma.abs();
            k.view_mut((j * lags, j * lags), (lags, lags)).copy_from(&kj);
        }
    }
    k
}

fn gaussian_log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance not positive definite");
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = x.dot(&chol.solve(x));
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

/// `log N(ΔY_r; 0, σΔT·I + ΔT²·ΦKΦ')` assembled densely.
fn direct_marginal(r: usize, row: &[LinkPrior], spec: KernelSpec, reg: &RegressionData, sigma: f64) -> f64 {
    let k = prior_covariance(row, spec, reg.lags, reg.dt);
    let n = reg.rows();
    let cov = DMatrix::identity(n, n) * (sigma * reg.dt) + &reg.phi * k * reg.phi.transpose() * (reg.dt * reg.dt);
    gaussian_log_density(&reg.delta_y.column(r).into_owned(), &cov)
}

/// Exact conditional mean and covariance of `w_r` in covariance form.
fn direct_w_moments(
    r: usize,
    row: &[LinkPrior],
    spec: KernelSpec,
    reg: &RegressionData,
    sigma: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let k = prior_covariance(row, spec, reg.lags, reg.dt);
    let n = reg.rows();
    let g = &reg.phi * reg.dt;
    let s = DMatrix::identity(n, n) * (sigma * reg.dt) + &g * &k * g.transpose();
    let s_inv = s.try_inverse().unwrap();
    let kg = &k * g.transpose();
    let mean = &kg * &s_inv * reg.delta_y.column(r);
    let cov = &k - &kg * &s_inv * kg.transpose();
    (mean, cov)
}

/// Kolmogorov statistic of `xs` against `cdf`, with its asymptotic p-value.
fn ks_test(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k * k) as f64 * t * t).exp();
        p += if k % 2 == 1 { term } else { -term };
    }
    p.clamp(0.0, 1.0)
}

fn random_trajectory(rows: usize, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(rows, p);
    for r in 0..p {
        let mut x = normal(rng);
        for i in 0..rows {
            x = 0.8 * x + 0.5 * normal(rng);
            y[(i, r)] = x;
        }
    }
    y
}

fn random_spec(rng: &mut impl Rng) -> KernelSpec {
    KernelSpec::new([KernelKind::Tc, KernelKind::Dc, KernelKind::Ss][rng.random_range(0..3)])
}

fn random_row(p: usize, rng: &mut impl Rng) -> Vec<LinkPrior> {
    (0..p)
        .map(|_| {
            LinkPrior::new(
                rng.random_bool(0.6),
                rng.random_range(0.2..3.0),
                [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)],
            )
        })
        .collect()
}

/// A regression built from a random trajectory with `N ≤ 30` increments.
fn random_regression(rng: &mut impl Rng) -> (RegressionData, usize) {
    let p = rng.random_range(1..=3);
    let m = rng.random_range(3..=8);
    let refinement = rng.random_range(1..=2);
    let mut times = vec![0.0];
    for _ in 1..m {
        times.push(times.last().unwrap() + 0.5 * rng.random_range(1..=3) as f64);
    }
    let grid = build_grid(&times, refinement).unwrap();
    if grid.intervals() > 30 {
        return random_regression(rng);
    }
    let lags = rng.random_range(1..=grid.intervals().min(6));
    let y = random_trajectory(grid.intervals() + 1, p, rng);
    (build_regression(&y, &grid, rng.random_range(0.0..1.5), lags).unwrap(), p)
}

// ---------------------------------------------------------------- criteria

fn c1_equivalent_realization() -> Outcome {
    let mut worst = 0.0_f64;
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=6);
        let p = rng.random_range(1..=n);
        let sys = generate_random_network(n, p, 0.3, seed, 100_000).unwrap();
        let dt = 1e-4;
        let steps = 10_000;
        let wiener = sample_wiener_path(sys.noise_channels(), steps, dt, 1.0, &mut rng);
        let x0 = DVector::from_fn(n, |_, _| normal(&mut rng));
        let input = DMatrix::from_fn(steps + 1, sys.inputs(), |i, j| (i as f64 * dt * (j + 1) as f64).sin());
        let err = |factor: usize| {
            let w = coarsen_path(&wiener, factor);
            let u = coarsen_path(&input, factor);
            let h = dt * factor as f64;
            let sde = integrate_sde_path(&sys, &x0, h, &w, Some(&u)).unwrap();
            let ode = simulate_equivalent_realization(&sys, &x0, h, &w, Some(&u), OdeScheme::Heun).unwrap();
            (sde - ode).amax()
        };
        let (fine, coarse) = (err(1), err(2));
        worst = worst.max(fine);
        worst_ratio = worst_ratio.min(coarse / fine);
    }
    outcome(
        worst < 5e-3 && worst_ratio >= 1.8,
        format!("max sup error {worst:.2e}, min halving ratio {worst_ratio:.3}"),
    )
}

fn c2_kernel_psd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    let mut symmetric = true;
    for _ in 0..1000 {
        let spec = random_spec(&mut rng);
        let beta = [rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)];
        let lags = rng.random_range(1..=60);
        let dt = rng.random_range(0.05..2.0);
        let k = kernel_matrix(spec, &beta[..spec.kind.shape_len()], lags, dt).unwrap();
        symmetric &= k == k.transpose();
        let min = k.clone().symmetric_eigenvalues().min();
        worst = worst.min(min / k.trace());
    }
    outcome(
        symmetric && worst >= -1e-8,
        format!("min eigenvalue/trace {worst:.2e}, symmetric {symmetric}"),
    )
}

fn c3_woodbury_marginal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let (reg, p) = random_regression(&mut rng);
        let spec = random_spec(&mut rng);
        let row = random_row(p, &mut rng);
        let r = rng.random_range(0..p);
        let sigma = rng.random_range(0.05..2.0);
        let fast = log_collapsed_marginal(r, &row, spec, &reg, &PseudoGrid::full(reg.lags), sigma).unwrap();
        worst = worst.max((fast - direct_marginal(r, &row, spec, &reg, sigma)).abs());
    }
    outcome(worst < 1e-8, format!("max |log-density diff| {worst:.2e}"))
}

fn c4_conjugate_conditionals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 10_000;
    let mut passed = 0;
    let mut lowest = 1.0_f64;
    for inst in 0..40 {
        let (reg, p) = loop {
            let (reg, p) = random_regression(&mut rng);
            if reg.rows() >= 4 {
                break (reg, p);
            }
        };
        let spec = random_spec(&mut rng);
        let model = ModelConfig::default();
        let pv = match inst % 3 {
            0 => {
                let mut row = random_row(p, &mut rng);
                row[0].active = true;
                let r = rng.random_range(0..p);
                let sigma = rng.random_range(0.1..1.0);
                let (mean, cov) = direct_w_moments(r, &row, spec, &reg, sigma);
                let a = DVector::from_fn(mean.len(), |i, _| if row[i / reg.lags].active { normal(&mut rng) } else { 0.0 });
                let m = a.dot(&mean);
                let sd = (a.transpose() * &cov * &a)[(0, 0)].max(0.0).sqrt();
                let ev = NodeEvidence::build(r, &row, spec, &reg, &PseudoGrid::full(reg.lags), sigma).unwrap();
                let xs = (0..draws).map(|_| a.dot(&ev.sample_w(&reg, &mut rng))).collect();
                let dist = Normal::new(m, sd).unwrap();
                ks_test(xs, |x| dist.cdf(x))
            }
            1 => {
                let r = rng.random_range(0..p);
                let w = DVector::from_fn(reg.phi.ncols(), |_, _| 0.3 * normal(&mut rng));
                let res = (reg.delta_y.column(r) - &reg.phi * &w * reg.dt).norm_squared();
                let shape = model.a0 + reg.rows() as f64 / 2.0;
                let scale = model.b0 + res / (2.0 * reg.dt);
                let dist = InverseGamma::new(shape, scale).unwrap();
                let xs = (0..draws)
                    .map(|_| sample_sigma_conditional(r, &w, &reg, &model, &mut rng).unwrap())
                    .collect();
                ks_test(xs, |x| dist.cdf(x))
            }
            _ => {
                let m = rng.random_range(2..20);
                let z = DMatrix::from_fn(m, p, |_, _| normal(&mut rng));
                let y = DMatrix::from_fn(m, p, |i, j| z[(i, j)] + 0.1 * normal(&mut rng));
                let shape = model.a0 + (m * p) as f64 / 2.0;
                let scale = model.b0 + 0.5 * (&z - &y).norm_squared();
                let dist = InverseGamma::new(shape, scale).unwrap();
                let xs = (0..draws)
                    .map(|_| sample_lambda_conditional(&z, &y, &model, &mut rng).unwrap())
                    .collect();
                ks_test(xs, |x| dist.cdf(x))
            }
        };
        lowest = lowest.min(pv);
        if pv > 0.001 {
            passed += 1;
        }
    }
    outcome(passed >= 38, format!("{passed}/40 instances with p > 0.001 (lowest {lowest:.2e})"))
}

fn c5_bridge_oracle() -> Outcome {
    let mut worst = 0.0_f64;
    for n in 2..=8usize {
        // Random walk X_1..X_n with Cov(X_i, X_j) = min(i, j); condition on X_n.
        let cov = DMatrix::from_fn(n, n, |i, j| (i.min(j) + 1) as f64);
        let m = n - 1;
        let c11 = cov.view((0, 0), (m, m)).into_owned();
        let c12 = cov.view((0, m), (m, 1)).into_owned();
        let c22 = cov[(m, m)];
        let cond = c11 - &c12 * c12.transpose() / c22;
        worst = worst.max((cond - bridge_covariance(n)).amax());
    }
    outcome(worst < 1e-12, format!("max entry diff {worst:.2e} over N in 2..=8"))
}

fn c6_reciprocity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = ModelConfig::default();
    let mut worst = [0.0_f64; 3];
    let times: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let grid = build_grid(&times, 3).unwrap();
    let p = 2;
    let z = DMatrix::from_fn(times.len(), p, |_, _| normal(&mut rng));
    let pseudo = PseudoGrid::full(4);
    let ctx = ModelContext {
        grid: &grid,
        z: &z,
        u: None,
        model: &model,
        lags: 4,
        pseudo: &pseudo,
    };
    for i in 0..100 {
        let links: Vec<Vec<LinkPrior>> = (0..p).map(|_| random_row(p, &mut rng)).collect();
        let sigma = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let lambda = rng.random_range(0.01..0.5);
        let ya = random_trajectory(grid.intervals() + 1, p, &mut rng);
        let yb = random_trajectory(grid.intervals() + 1, p, &mut rng);
        let ea = ctx.evaluate(&ya, &links, &sigma, lambda).unwrap();
        let eb = ctx.evaluate(&yb, &links, &sigma, lambda).unwrap();
        let kind = if i % 2 == 0 { TrajectoryProposal::Pcn } else { TrajectoryProposal::RandomWalk };
        worst[0] = worst[0].max((trajectory_log_ratio(&ea, &eb, kind) + trajectory_log_ratio(&eb, &ea, kind)).abs());

        let reg = &ea.reg;
        let r = rng.random_range(0..p);
        let row_a = links[r].clone();
        let mut row_b = row_a.clone();
        let j = rng.random_range(0..p);
        row_b[j].active = !row_b[j].active;
        row_b[j].gamma += 0.3 * normal(&mut rng);
        row_b[j].beta = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let ev_a = ctx.evidence(r, &row_a, reg, sigma[r]).unwrap();
        let ev_b = ctx.evidence(r, &row_b, reg, sigma[r]).unwrap();
        let s = switch_log_ratio(&ev_a, &ev_b, &row_a[j], &row_b[j], &model)
            + switch_log_ratio(&ev_b, &ev_a, &row_b[j], &row_a[j], &model);
        worst[1] = worst[1].max(s.abs());

        let eps_beta = 0.1;
        let mut row_c = row_a.clone();
        row_c[0].active = true;
        for link in row_c.iter_mut() {
            link.beta = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        }
        let mut row_d = row_c.clone();
        for link in row_d.iter_mut().filter(|l| l.active) {
            link.gamma += 0.3 * normal(&mut rng);
            for b in link.beta.iter_mut() {
                *b += rng.random_range(-0.45..0.45) * eps_beta;
            }
        }
        let ev_c = ctx.evidence(r, &row_c, reg, sigma[r]).unwrap();
        let ev_d = ctx.evidence(r, &row_d, reg, sigma[r]).unwrap();
        let u = update_log_ratio(&ev_c, &ev_d, &row_c, &row_d, &model, eps_beta)
            + update_log_ratio(&ev_d, &ev_c, &row_d, &row_c, &model, eps_beta);
        worst[2] = if u.is_finite() { worst[2].max(u.abs()) } else { f64::INFINITY };
    }
    outcome(
        worst.iter().all(|&w| w < 1e-10),
        format!(
            "max |log r(a|b) + log r(b|a)|: trajectory {:.1e}, switch {:.1e}, update {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c7_enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 30;
    let times: Vec<f64> = (0..m).map(|i| i as f64).collect();
    let mut z = DMatrix::zeros(m, 2);
    let (mut x0, mut x1) = (0.0, 0.0);
    for i in 0..m {
        let nx0 = 0.5 * x0 + normal(&mut rng);
        let nx1 = 0.5 * x1 + 0.25 * x0 + normal(&mut rng);
        (x0, x1) = (nx0, nx1);
        z[(i, 0)] = x0;
        z[(i, 1)] = x1;
    }
    let data = TimeSeriesData::new(times.clone(), z.clone(), None).unwrap();
    let grid = build_grid(&times, 1).unwrap();
    let model = ModelConfig {
        p_s: 0.5,
        lags: Some(4),
        ..ModelConfig::default()
    };
    let config = SamplerConfig {
        k_max: 200_000,
        p_switch: 1.0,
        switch_mode: SwitchMode::IndicatorOnly,
        blocks: SamplerBlocks {
            trajectories: false,
            topology: true,
            weights: false,
            sigma: false,
            lambda: false,
        },
        store_trajectories: false,
        seed: 77,
        ..SamplerConfig::default()
    };
    let sigma = vec![0.8, 1.1];
    let base = LinkPrior::new(false, 1.0, [0.6, 0.5]);
    let mut sampler = Sampler::new(&data, &grid, model.clone(), config).unwrap();
    let mut state: ChainState = sampler.state().clone();
    state.sigma = sigma.clone();
    state.links = vec![vec![base; 2]; 2];
    state.w = vec![DVector::zeros(8); 2];
    sampler.set_state(state).unwrap();
    sampler.run().unwrap();
    let samples = sampler.finish();

    let mut counts = vec![[0usize; 4]; 2];
    let mut total = 0usize;
    for rec in samples.iter().unwrap().skip(1) {
        let topo = rec.unwrap().topology();
        for r in 0..2 {
            counts[r][topo[r][0] as usize + 2 * topo[r][1] as usize] += 1;
        }
        total += 1;
    }
    let reg = build_regression(&z, &grid, model.filter, 4).unwrap();
    let mut worst = 0.0_f64;
    let mut exact_all = Vec::new();
    for r in 0..2 {
        let logs: Vec<f64> = (0..4)
            .map(|code| {
                let row: Vec<LinkPrior> = (0..2)
                    .map(|j| LinkPrior {
                        active: code >> j & 1 == 1,
                        ..base
                    })
                    .collect();
                direct_marginal(r, &row, model.kernel, &reg, sigma[r])
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        for code in 0..4 {
            let exact = (logs[code] - top).exp() / norm;
            let freq = counts[r][code] as f64 / total as f64;
            worst = worst.max((exact - freq).abs());
            exact_all.push(exact);
        }
    }
    let shown: Vec<String> = exact_all.iter().map(|v| format!("{v:.3}")).collect();
    outcome(
        worst <= 0.03,
        format!("max |freq - exact| {worst:.4} (exact {})", shown.join(" ")),
    )
}

/// `log p(Y)` for the tiny trajectory instance: collapsed link likelihood of
/// the increments plus the measurement term, built without the library's
/// regression code.
struct TinyTarget {
    z: [f64; 2],
    sigma: f64,
    lambda: f64,
    gamma: f64,
    kernel: DMatrix<f64>,
    dt: f64,
    filter: f64,
}

impl TinyTarget {
    fn log_density(&self, y: &[f64; 4]) -> f64 {
        let (dt, lags) = (self.dt, 2);
        let mut d = [0.0; 4];
        let mut acc = 0.0;
        let mut prev = 0.0;
        for i in 0..4 {
            let yhat = y[i] + self.filter * dt * acc;
            acc += y[i];
            d[i] = yhat - prev;
            prev = yhat;
        }
        let mut phi = DMatrix::zeros(3, lags);
        let mut dy = DVector::zeros(3);
        for i in 1..4 {
            dy[i - 1] = y[i] - y[i - 1];
            for k in 0..lags.min(i) {
                phi[(i - 1, k)] = d[i - 1 - k];
            }
        }
        let cov = DMatrix::identity(3, 3) * (self.sigma * dt) + &phi * &self.kernel * phi.transpose() * (dt * dt * self.gamma);
        let meas = (self.z[0] - y[0]).powi(2) + (self.z[1] - y[3]).powi(2);
        gaussian_log_density(&dy, &cov) - meas / (2.0 * self.lambda)
    }
}

fn c8_trajectory_quadrature() -> Outcome {
    let times = vec![0.0, 1.0];
    let zv = [0.3, -0.2];
    let data = TimeSeriesData::new(times.clone(), DMatrix::from_column_slice(2, 1, &zv), None).unwrap();
    let grid = build_grid(&times, 3).unwrap();
    let spec = KernelSpec::new(KernelKind::Tc);
    let model = ModelConfig {
        lags: Some(2),
        kernel: spec,
        ..ModelConfig::default()
    };
    let (sigma, lambda, gamma, beta) = (0.3, 0.05, 1.0, 0.6);
    let target = TinyTarget {
        z: zv,
        sigma,
        lambda,
        gamma,
        kernel: jittered_kernel(spec, &[beta], 2, grid.dt),
        dt: grid.dt,
        filter: model.filter,
    };

    // Midpoint quadrature on a 48⁴ grid; 12 histogram bins of 4 cells each.
    let cells: usize = 48;
    let bins = 12;
    let lo = [zv[0] - 1.2, -2.4, -2.4, zv[1] - 1.2];
    let hi = [zv[0] + 1.2, 2.4, 2.4, zv[1] + 1.2];
    let h: Vec<f64> = (0..4).map(|c| (hi[c] - lo[c]) / cells as f64).collect();
    let at = |c: usize, i: usize| lo[c] + (i as f64 + 0.5) * h[c];
    let mut logs = Vec::with_capacity(cells.pow(4));
    for a in 0..cells {
        for b in 0..cells {
            for c in 0..cells {
                for d in 0..cells {
                    logs.push(target.log_density(&[at(0, a), at(1, b), at(2, c), at(3, d)]));
                }
            }
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exact = vec![vec![0.0; bins]; 4];
    let mut idx = 0;
    for a in 0..cells {
        for b in 0..cells {
            for c in 0..cells {
                for d in 0..cells {
                    let w = (logs[idx] - top).exp();
                    idx += 1;
                    for (coord, i) in [a, b, c, d].into_iter().enumerate() {
                        exact[coord][i * bins / cells] += w;
                    }
                }
            }
        }
    }
    for m in exact.iter_mut() {
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= s);
    }

    let config = SamplerConfig {
        k_max: 200_000,
        eps_traj: 0.5,
        blocks: SamplerBlocks {
            trajectories: true,
            topology: false,
            weights: false,
            sigma: false,
            lambda: false,
        },
        seed: 88,
        ..SamplerConfig::default()
    };
    let mut sampler = Sampler::new(&data, &grid, model, config).unwrap();
    let mut state = sampler.state().clone();
    state.sigma = vec![sigma];
    state.lambda = lambda;
    state.links = vec![vec![LinkPrior::new(true, gamma, [beta, 0.5])]];
    state.w = vec![DVector::zeros(2)];
    sampler.set_state(state).unwrap();
    sampler.run().unwrap();
    let samples = sampler.finish();
    let rate = samples.counters.trajectory_rate().unwrap_or(0.0);

    let burn = 2_000;
    let mut hist = vec![vec![0.0; bins]; 4];
    let mut outside = [0usize; 4];
    let mut n = 0usize;
    for rec in samples.iter().unwrap().skip(burn) {
        let y = rec.unwrap().y.expect("trajectory stored");
        for c in 0..4 {
            let v = y[(c, 0)];
            let bin = ((v - lo[c]) / (hi[c] - lo[c]) * bins as f64).floor();
            if (0.0..bins as f64).contains(&bin) {
                hist[c][bin as usize] += 1.0;
            } else {
                outside[c] += 1;
            }
        }
        n += 1;
    }
    let mut worst = 0.0_f64;
    for c in 0..4 {
        let tv = 0.5
            * (hist[c].iter().zip(&exact[c]).map(|(hc, e)| (hc / n as f64 - e).abs()).sum::<f64>()
                + outside[c] as f64 / n as f64);
        worst = worst.max(tv);
    }
    outcome(
        worst < 0.05,
        format!("max marginal TV {worst:.4} over 4 coordinates (acceptance {rate:.3})"),
    )
}

fn c9_sparse_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_full = 0.0_f64;
    let mut monotone = 0;
    for _ in 0..20 {
        let p = 2;
        let times: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let grid = build_grid(&times, 2).unwrap();
        let lags = rng.random_range(17..=40);
        let y = random_trajectory(grid.intervals() + 1, p, &mut rng);
        let reg = build_regression(&y, &grid, 1.0, lags).unwrap();
        let spec = KernelSpec::new(KernelKind::Tc);
        let mut row = random_row(p, &mut rng);
        row[0].active = true;
        let sigma = rng.random_range(0.2..1.0);
        let exact = direct_marginal(0, &row, spec, &reg, sigma);
        let errs: Vec<f64> = [lags / 8, lags / 4, lags / 2, lags]
            .iter()
            .map(|&d| {
                let pseudo = select_pseudo_points(lags, d).unwrap();
                (log_collapsed_marginal(0, &row, spec, &reg, &pseudo, sigma).unwrap() - exact).abs()
            })
            .collect();
        worst_full = worst_full.max(*errs.last().unwrap());
        if errs.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
            monotone += 1;
        }
    }
    outcome(
        worst_full < 1e-10 && monotone >= 16,
        format!("d=l diff {worst_full:.2e}; monotone in d on {monotone}/20"),
    )
}

fn brute_force_metrics(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut auroc, mut auprec) = (0.0, 0.0);
    let (mut fpr0, mut tpr0) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && !l).count() as f64;
        let (tpr, fpr) = (tp / pos, fp / neg);
        auroc += (fpr - fpr0) * (tpr + tpr0) / 2.0;
        auprec += (tpr - tpr0) * tp / (tp + fp);
        (fpr0, tpr0) = (fpr, tpr);
    }
    (auroc, auprec)
}

fn c10_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0_f64;
    for _ in 0..500 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores force ties.
        let levels = rng.random_range(2..10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let fast = ranked_from_pairs(&scores, &labels).unwrap();
        let (auroc, auprec) = brute_force_metrics(&scores, &labels);
        worst = worst.max((fast.auroc - auroc).abs()).max((fast.auprec - auprec).abs());
    }
    let trials = 10_000;
    let mut total = 0.0;
    for _ in 0..trials {
        let labels: Vec<bool> = (0..30).map(|i| i < 6).collect();
        let scores: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        total += ranked_from_pairs(&scores, &labels).unwrap().auroc;
    }
    let null = total / trials as f64;
    outcome(
        worst < 1e-12 && (0.48..=0.52).contains(&null),
        format!("max diff vs threshold sweep {worst:.1e}; null mean AUROC {null:.4}"),
    )
}

fn desk_benchmark(name: &str) -> BenchmarkConfig {
    let cfg = cli::suite(name).unwrap();
    assert_eq!(cfg.replicates, 10);
    assert_eq!(cfg.simulate.measurements, 100);
    assert_eq!(cfg.simulate.snr_db, 10.0);
    assert_eq!(cfg.infer.refinement, 3);
    assert_eq!(cfg.infer.sampler.k_max, 5000);
    assert_eq!(cfg.infer.model.kernel.kind, KernelKind::Tc);
    cfg
}

fn c11_ring_desk() -> Outcome {
    let cfg = desk_benchmark("ring-desk");
    assert_eq!(cfg.simulate.network, NetworkKind::Ring);
    assert_eq!((cfg.simulate.measured, cfg.simulate.hidden), (5, 2));
    let report = cli::run_benchmark(&cfg, jobs(), None).unwrap();
    let auroc = report.auroc.mean.unwrap_or(0.0);
    let auprec = report.auprec.mean.unwrap_or(0.0);
    outcome(
        report.failed == 0 && auroc >= 0.85 && auprec >= 0.70,
        format!("mean AUROC {auroc:.3}, AUPREC {auprec:.3} over {} replicates", report.succeeded),
    )
}

fn c12_random_desk() -> Outcome {
    let cfg = desk_benchmark("random-desk");
    assert_eq!(cfg.simulate.network, NetworkKind::Random);
    assert_eq!((cfg.simulate.nodes, cfg.simulate.measured, cfg.simulate.density), (8, 6, 0.2));
    let report = cli::run_benchmark(&cfg, jobs(), None).unwrap();
    let auroc = report.auroc.mean.unwrap_or(0.0);
    outcome(
        report.failed == 0 && auroc >= 0.80,
        format!(
            "mean AUROC {auroc:.3} (AUPREC {:.3}) over {} replicates",
            report.auprec.mean.unwrap_or(0.0),
            report.succeeded
        ),
    )
}

/// Mean trajectory acceptance of a trajectory-only chain with the true links
/// and noise levels held fixed.
fn trajectory_acceptance(refinement: usize, proposal: TrajectoryProposal) -> f64 {
    let sim = cli::SimulateConfig {
        network: NetworkKind::Ring,
        measured: 3,
        measurements: 30,
        seed: 13,
        ..cli::SimulateConfig::default()
    };
    let (data, sidecar, _) = cli::generate_dataset(&sim).unwrap();
    let grid = build_grid(&data.times, refinement).unwrap();
    let config = SamplerConfig {
        k_max: 1500,
        eps_traj: 0.2,
        proposal,
        blocks: SamplerBlocks {
            trajectories: true,
            topology: false,
            weights: false,
            sigma: false,
            lambda: false,
        },
        store_trajectories: false,
        seed: 131,
        ..SamplerConfig::default()
    };
    let mut sampler = Sampler::new(&data, &grid, ModelConfig::default(), config).unwrap();
    let mut state = sampler.state().clone();
    let p = data.nodes();
    state.sigma = vec![sidecar.input_variance + sidecar.noise_variance; p];
    state.lambda = sidecar.lambda_meas;
    for (r, row) in state.links.iter_mut().enumerate() {
        for (j, link) in row.iter_mut().enumerate() {
            link.active = sidecar.truth[r][j];
        }
    }
    sampler.set_state(state).unwrap();
    sampler.run().unwrap();
    sampler.counters().trajectory_rate().unwrap_or(0.0)
}

fn c13_pcn_dimension() -> Outcome {
    let pcn = (trajectory_acceptance(2, TrajectoryProposal::Pcn), trajectory_acceptance(8, TrajectoryProposal::Pcn));
    let rw = (
        trajectory_acceptance(2, TrajectoryProposal::RandomWalk),
        trajectory_acceptance(8, TrajectoryProposal::RandomWalk),
    );
    let pcn_change = (pcn.0 / pcn.1).max(pcn.1 / pcn.0);
    let rw_drop = rw.0 / rw.1;
    outcome(
        pcn_change < 2.0 && rw_drop > 5.0,
        format!(
            "pCN {:.3} -> {:.3} (x{pcn_change:.2}); random walk {:.3} -> {:.4} (/{rw_drop:.1})",
            pcn.0, pcn.1, rw.0, rw.1
        ),
    )
}

fn tree_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel == "run.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("timestamp");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    out
}

fn c14_determinism() -> Outcome {
    let mut cfg = cli::suite("random-desk").unwrap();
    cfg.name = "determinism".into();
    cfg.replicates = 3;
    cfg.base_seed = 40;
    cfg.simulate.nodes = 5;
    cfg.simulate.measured = 4;
    cfg.simulate.density = 0.4;
    cfg.simulate.measurements = 25;
    cfg.infer.sampler.k_max = 150;
    cfg.infer.chains = 2;
    let runs: Vec<_> = [1, 2, 1]
        .iter()
        .map(|&jobs| {
            let dir = tempfile::tempdir().unwrap();
            let report = cli::cmd_benchmark(&cfg, jobs, dir.path()).unwrap();
            assert_eq!(report.failed, 0, "{:?}", report.results);
            tree_contents(dir.path())
        })
        .collect();
    let files = runs[0].len();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        same && files == 17,
        format!("{files} files identical across 3 runs (jobs 1, 2, 1): {same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 14] = [
        ("c1 equivalent realization", c1_equivalent_realization),
        ("c2 kernel psd", c2_kernel_psd),
        ("c3 woodbury marginal", c3_woodbury_marginal),
        ("c4 conjugate conditionals", c4_conjugate_conditionals),
        ("c5 brownian bridge", c5_bridge_oracle),
        ("c6 ratio reciprocity", c6_reciprocity),
        ("c7 topology enumeration", c7_enumeration),
        ("c8 trajectory quadrature", c8_trajectory_quadrature),
        ("c9 sparse exactness", c9_sparse_exactness),
        ("c10 metrics oracle", c10_metrics_oracle),
        ("c11 ring desk benchmark", c11_ring_desk),
        ("c12 random desk benchmark", c12_random_desk),
        ("c13 pcn dimension robustness", c13_pcn_dimension),
        ("c14 determinism", c14_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let key = name.split(' ').next().unwrap();
        if !filters.is_empty() && !filters.iter().any(|f| f == key) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1}s]", result.detail, start.elapsed().as_secs_f64());
        if !result.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
