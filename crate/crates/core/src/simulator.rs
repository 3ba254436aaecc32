//! Ground-truth network generation and linear SDE simulation.
//!
//! The simulated model is `dx = (Ax + Bu)dt + K dW`, `y = Cx`, with the first
//! `p` states measured. In the generated datasets the known inputs are
//! independent Wiener excitations entering through `B` with variance `σ_u`,
//! and `K` is scaled so the process noise has variance `σ_e` set by the SNR.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue real parts must stay below this to count as Hurwitz.
pub const HURWITZ_TOL: f64 = -1e-8;

/// Ground-truth linear SDE `(A, B, K, C)` with `p` of `n` states measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub n: usize,
    pub p: usize,
}

impl SystemMatrices {
    /// Builds a system with `C = [I_p, 0]`, checking dimensions.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, k: DMatrix<f64>, p: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A must be square, got {}×{}", n, a.ncols())));
        }
        if p == 0 || p > n {
            return Err(Error::Dimension(format!("measured count p={p} must be in 1..={n}")));
        }
        if b.nrows() != n || k.nrows() != n {
            return Err(Error::Dimension(format!(
                "B ({}×{}) and K ({}×{}) need {n} rows",
                b.nrows(),
                b.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        let mut c = DMatrix::zeros(p, n);
        for i in 0..p {
            c[(i, i)] = 1.0;
        }
        Ok(Self { a, b, k, c, n, p })
    }

    /// Number of known inputs `q`.
    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Number of Wiener noise channels `m`.
    pub fn noise_channels(&self) -> usize {
        self.k.ncols()
    }

    pub fn is_hurwitz(&self) -> bool {
        is_hurwitz(&self.a)
    }

    /// Measured-node adjacency implied by `A` (see [`crate::dsf::ground_truth_topology`]).
    pub fn truth(&self) -> Vec<Vec<bool>> {
        crate::dsf::ground_truth_topology(self)
    }
}

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < HURWITZ_TOL
}

/// `B = [I_p; 0]` and `K = [I_p; 0]`: one input and one noise channel per measured node.
fn measured_channels(n: usize, p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, p);
    for i in 0..p {
        m[(i, i)] = 1.0;
    }
    m
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random sparse Hurwitz network.
///
/// Every node has a negative self-loop `−(0.5 + |N(0,1)|)`; the remaining
/// `round(density·n²) − n` nonzeros are standard normal at uniformly chosen
/// off-diagonal positions. Candidates are redrawn until `A` is Hurwitz.
pub fn generate_random_network(
    n: usize,
    p: usize,
    density: f64,
    seed: u64,
    max_tries: usize,
) -> Result<SystemMatrices> {
    if p == 0 || p > n {
        return Err(Error::Argument(format!("need 0 < p ≤ n, got p={p}, n={n}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Argument(format!("density must be in (0,1], got {density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off_total = n * (n - 1);
    let off_count = ((density * (n * n) as f64).round() as usize)
        .saturating_sub(n)
        .min(off_total);
    for _ in 0..max_tries {
        let a = random_candidate(n, off_count, &mut rng);
        if is_hurwitz(&a) {
            return SystemMatrices::new(a, measured_channels(n, p), measured_channels(n, p), p);
        }
    }
    Err(Error::Generation {
        attempts: max_tries,
        reason: format!("no Hurwitz candidate for n={n}, density={density}"),
    })
}

fn random_candidate(n: usize, off_count: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -(0.5 + normal(rng).abs());
    }
    let positions: Vec<(usize, usize)> = (0..n)
        .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
        .collect();
    for idx in rand::seq::index::sample(rng, positions.len(), off_count) {
        let (r, c) = positions[idx];
        a[(r, c)] = normal(rng);
    }
    a
}

/// Ring of `p` measured nodes `1→2→…→p→1` plus stable self-dynamics.
pub fn generate_ring_network(p: usize, seed: u64) -> Result<SystemMatrices> {
    generate_ring_network_with_hidden(p, 0, seed)
}

/// Ring network whose `hidden` unmeasured nodes each sit on a distinct ring
/// edge `j → j+1`, adding the parallel path `j → h → j+1`. The measured-node
/// topology therefore stays the ring.
pub fn generate_ring_network_with_hidden(p: usize, hidden: usize, seed: u64) -> Result<SystemMatrices> {
    if p < 2 {
        return Err(Error::Argument(format!("a ring needs p ≥ 2 nodes, got {p}")));
    }
    if hidden > p {
        return Err(Error::Argument(format!("at most {p} hidden nodes fit on a {p}-ring")));
    }
    let n = p + hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<usize> = rand::seq::index::sample(&mut rng, p, hidden).into_vec();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -rng.random_range(1.0..2.0);
    }
    let weight = |rng: &mut ChaCha8Rng| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * rng.random_range(0.5..1.5)
    };
    // Off-diagonal magnitudes are redrawn until the whole matrix is Hurwitz.
    loop {
        for j in 0..p {
            a[((j + 1) % p, j)] = weight(&mut rng);
        }
        for (h, &j) in edges.iter().enumerate() {
            a[(p + h, j)] = weight(&mut rng);
            a[((j + 1) % p, p + h)] = weight(&mut rng);
        }
        if is_hurwitz(&a) {
            break;
        }
    }
    SystemMatrices::new(a, measured_channels(n, p), measured_channels(n, p), p)
}

/// Integration scheme for [`simulate_sde`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SdeScheme {
    #[default]
    EulerMaruyama,
    /// Exact Gaussian transition over each internal step (matrix exponential).
    ExactGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub snr_db: f64,
    pub lambda_meas: f64,
    /// Internal step; defaults to the smallest measurement spacing / 100.
    pub dt_internal: Option<f64>,
    pub seed: u64,
    /// Initial state; zero when absent.
    pub x0: Option<Vec<f64>>,
    /// Variance of the input Wiener excitation.
    pub input_variance: f64,
    pub scheme: SdeScheme,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            snr_db: 10.0,
            lambda_meas: 1e-3,
            dt_internal: None,
            seed: 0,
            x0: None,
            input_variance: 1.0,
            scheme: SdeScheme::EulerMaruyama,
        }
    }
}

/// Process-noise variance `σ_e = σ_u · 10^(−SNR/10)`.
pub fn noise_variance_from_snr(input_variance: f64, snr_db: f64) -> f64 {
    input_variance * 10f64.powf(-snr_db / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    /// Measurement times `T₁`.
    pub times: Vec<f64>,
    /// Noisy measurements, `M × p`.
    pub z: DMatrix<f64>,
    /// Input Wiener path recorded at `T₁`, `M × q` (absent when `q = 0`).
    pub u: Option<DMatrix<f64>>,
    /// Internal-grid times.
    pub dense_times: Vec<f64>,
    /// Latent states on the internal grid, `steps × n`.
    pub x_true: DMatrix<f64>,
    pub noise_variance: f64,
}

/// Simulates the SDE on an internal grid containing every `T₁` instant and
/// samples noisy measurements there. The RNG is fully determined by `seed`.
pub fn simulate_sde(sys: &SystemMatrices, t1: &[f64], settings: &SimulationSettings) -> Result<SimulationOutput> {
    if t1.len() < 2 || t1.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("measurement times must be strictly increasing".into()));
    }
    if !sys.is_hurwitz() {
        log::warn!("simulating a non-Hurwitz system (spectral abscissa {:.3e})", spectral_abscissa(&sys.a));
    }
    let min_gap = t1.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let dt_max = settings.dt_internal.unwrap_or(min_gap / 100.0);
    if !(dt_max > 0.0) || dt_max > min_gap / 50.0 * (1.0 + 1e-12) {
        return Err(Error::Argument(format!(
            "internal step {dt_max} must be positive and ≤ min spacing / 50 = {}",
            min_gap / 50.0
        )));
    }
    let (n, q) = (sys.n, sys.inputs());
    let sigma_e = noise_variance_from_snr(settings.input_variance, settings.snr_db);

    // Augmented state [x; U] so the recorded input path and the states share one draw.
    let dim = n + q;
    let mut drift = DMatrix::zeros(dim, dim);
    drift.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    let mut diffusion = DMatrix::zeros(dim, sys.noise_channels() + q);
    diffusion
        .view_mut((0, 0), (n, sys.noise_channels()))
        .copy_from(&(&sys.k * sigma_e.sqrt()));
    let su = settings.input_variance.sqrt();
    diffusion.view_mut((0, sys.noise_channels()), (n, q)).copy_from(&(&sys.b * su));
    for j in 0..q {
        diffusion[(n + j, sys.noise_channels() + j)] = su;
    }

    let mut state = DVector::zeros(dim);
    if let Some(x0) = &settings.x0 {
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has {} entries, system has {n} states", x0.len())));
        }
        state.rows_mut(0, n).copy_from_slice(x0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut dense_times = vec![t1[0]];
    let mut dense_states = vec![state.rows(0, n).into_owned()];
    let mut recorded = vec![state.clone()];
    let channels = diffusion.ncols();
    for w in t1.windows(2) {
        let gap = w[1] - w[0];
        let steps = (gap / dt_max - 1e-9).ceil().max(1.0) as usize;
        let h = gap / steps as f64;
        let stepper = Stepper::new(settings.scheme, &drift, &diffusion, h)?;
        for s in 1..=steps {
            let xi = DVector::from_fn(channels.max(stepper.noise_dim()), |_, _| normal(&mut rng));
            state = stepper.step(&state, &xi);
            dense_times.push(if s == steps { w[1] } else { w[0] + s as f64 * h });
            dense_states.push(state.rows(0, n).into_owned());
        }
        recorded.push(state.clone());
    }

    let m = t1.len();
    let p = sys.p;
    let noise_sd = settings.lambda_meas.max(0.0).sqrt();
    let mut z = DMatrix::zeros(m, p);
    for (qi, st) in recorded.iter().enumerate() {
        let y = &sys.c * st.rows(0, n);
        for r in 0..p {
            let e = if noise_sd > 0.0 { noise_sd * normal(&mut rng) } else { 0.0 };
            z[(qi, r)] = y[r] + e;
        }
    }
    let u = (q > 0).then(|| DMatrix::from_fn(m, q, |i, j| recorded[i][n + j]));
    let x_true = DMatrix::from_fn(dense_states.len(), n, |i, j| dense_states[i][j]);
    Ok(SimulationOutput {
        times: t1.to_vec(),
        z,
        u,
        dense_times,
        x_true,
        noise_variance: sigma_e,
    })
}

enum Stepper {
    Euler { transition: DMatrix<f64>, noise: DMatrix<f64> },
    Exact { transition: DMatrix<f64>, noise_factor: DMatrix<f64> },
}

impl Stepper {
    fn new(scheme: SdeScheme, drift: &DMatrix<f64>, diffusion: &DMatrix<f64>, h: f64) -> Result<Self> {
        let dim = drift.nrows();
        Ok(match scheme {
            SdeScheme::EulerMaruyama => Stepper::Euler {
                transition: drift * h,
                noise: diffusion * h.sqrt(),
            },
            SdeScheme::ExactGaussian => {
                // Van Loan: exp([[−A, GG'], [0, A']]·h) gives e^{Ah} and the step covariance.
                let gg = diffusion * diffusion.transpose();
                let mut block = DMatrix::zeros(2 * dim, 2 * dim);
                block.view_mut((0, 0), (dim, dim)).copy_from(&(-drift * h));
                block.view_mut((0, dim), (dim, dim)).copy_from(&(gg * h));
                block.view_mut((dim, dim), (dim, dim)).copy_from(&(drift.transpose() * h));
                let e = block.exp();
                let transition = e.view((dim, dim), (dim, dim)).transpose();
                let mut cov = &transition * e.view((0, dim), (dim, dim));
                cov = (&cov + cov.transpose()) * 0.5;
                let noise_factor = psd_factor(&cov)?;
                Stepper::Exact { transition, noise_factor }
            }
        })
    }

    fn noise_dim(&self) -> usize {
        match self {
            Stepper::Euler { noise, .. } => noise.ncols(),
            Stepper::Exact { noise_factor, .. } => noise_factor.ncols(),
        }
    }

    fn step(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        match self {
            Stepper::Euler { transition, noise } => {
                x + transition * x + noise * xi.rows(0, noise.ncols())
            }
            Stepper::Exact { transition, noise_factor } => {
                transition * x + noise_factor * xi.rows(0, noise_factor.ncols())
            }
        }
    }
}

/// Square-root factor of a PSD matrix (zero rows/cols allowed).
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = cov.clone().symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (j, &v) in eig.eigenvalues.iter().enumerate() {
        if v < -1e-10 * eig.eigenvalues.amax().max(1e-300) {
            return Err(Error::Numeric(format!("step covariance has negative eigenvalue {v}")));
        }
        let s = v.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok(f)
}

/// Samples a Wiener path with `steps + 1` rows (starting at zero) and `dim` channels.
pub fn sample_wiener_path(dim: usize, steps: usize, dt: f64, variance: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let sd = (variance * dt).sqrt();
    let mut w = DMatrix::zeros(steps + 1, dim);
    for i in 1..=steps {
        for j in 0..dim {
            w[(i, j)] = w[(i - 1, j)] + sd * normal(rng);
        }
    }
    w
}

/// Keeps every `factor`-th row of a path (used to coarsen a shared path).
pub fn coarsen_path(path: &DMatrix<f64>, factor: usize) -> DMatrix<f64> {
    let rows = (path.nrows() - 1) / factor + 1;
    DMatrix::from_fn(rows, path.ncols(), |i, j| path[(i * factor, j)])
}

fn check_path(name: &str, path: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if path.nrows() != rows || path.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{name} path is {}×{}, expected {rows}×{cols}",
            path.nrows(),
            path.ncols()
        )));
    }
    Ok(())
}

/// Euler–Maruyama on `dx = (Ax + Bu)dt + K dW` driven by a given Wiener path
/// (`W` rows at grid times) and deterministic input samples `u`. Returns the
/// output `y = Cx` at every grid time.
pub fn integrate_sde_path(
    sys: &SystemMatrices,
    x0: &DVector<f64>,
    dt: f64,
    wiener: &DMatrix<f64>,
    input: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let steps = wiener.nrows() - 1;
    check_path("wiener", wiener, steps + 1, sys.noise_channels())?;
    if let Some(u) = input {
        check_path("input", u, steps + 1, sys.inputs())?;
    }
    let mut x = x0.clone();
    let mut y = DMatrix::zeros(steps + 1, sys.p);
    y.row_mut(0).copy_from(&(&sys.c * &x).transpose());
    for i in 0..steps {
        let mut drift = &sys.a * &x;
        if let Some(u) = input {
            drift += &sys.b * u.row(i).transpose();
        }
        let dw = (wiener.row(i + 1) - wiener.row(i)).transpose();
        x = &x + drift * dt + &sys.k * dw;
        y.row_mut(i + 1).copy_from(&(&sys.c * &x).transpose());
    }
    Ok(y)
}

/// ODE integrator used for the equivalent realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdeScheme {
    /// Explicit Euler, matching [`integrate_sde_path`] step for step.
    Euler,
    /// Heun's method with the Wiener path linearly interpolated.
    Heun,
}

/// Integrates `ẋ = Ax + Bu + AKW`, `y = Cx + CKW` using the Wiener path itself
/// (not its increments) as a continuous forcing signal.
pub fn simulate_equivalent_realization(
    sys: &SystemMatrices,
    x0: &DVector<f64>,
    dt: f64,
    wiener: &DMatrix<f64>,
    input: Option<&DMatrix<f64>>,
    scheme: OdeScheme,
) -> Result<DMatrix<f64>> {
    let steps = wiener.nrows() - 1;
    check_path("wiener", wiener, steps + 1, sys.noise_channels())?;
    if let Some(u) = input {
        check_path("input", u, steps + 1, sys.inputs())?;
    }
    let ak = &sys.a * &sys.k;
    let ck = &sys.c * &sys.k;
    let rhs = |x: &DVector<f64>, i: usize| {
        let mut f = &sys.a * x + &ak * wiener.row(i).transpose();
        if let Some(u) = input {
            f += &sys.b * u.row(i).transpose();
        }
        f
    };
    let out = |x: &DVector<f64>, i: usize| (&sys.c * x + &ck * wiener.row(i).transpose()).transpose();
    let mut x = x0.clone();
    let mut y = DMatrix::zeros(steps + 1, sys.p);
    y.row_mut(0).copy_from(&out(&x, 0));
    for i in 0..steps {
        x = match scheme {
            OdeScheme::Euler => &x + rhs(&x, i) * dt,
            OdeScheme::Heun => {
                let k1 = rhs(&x, i);
                let pred = &x + &k1 * dt;
                let k2 = rhs(&pred, i + 1);
                &x + (k1 + k2) * (0.5 * dt)
            }
        };
        y.row_mut(i + 1).copy_from(&out(&x, i + 1));
    }
    Ok(y)
}
