//! Compares the collapsed marginal under pseudo-point approximations of
//! growing size with the exact value.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sdenet::dsf::build_regression;
use sdenet::grid::build_grid;
use sdenet::kernels::{KernelKind, KernelSpec, LinkPrior};
use sdenet::posterior::log_collapsed_marginal;
use sdenet::sparse::{select_pseudo_points, PseudoGrid};

fn main() -> sdenet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let times: Vec<f64> = (0..40).map(f64::from).collect();
    let grid = build_grid(&times, 2)?;
    let mut y = DMatrix::zeros(grid.intervals() + 1, 2);
    for i in 1..y.nrows() {
        y[(i, 0)] = 0.9 * y[(i - 1, 0)] + 0.4 * rng.sample::<f64, _>(StandardNormal);
        y[(i, 1)] = 0.8 * y[(i - 1, 1)] + 0.3 * y[(i - 1, 0)] + 0.4 * rng.sample::<f64, _>(StandardNormal);
    }
    let lags = 32;
    let reg = build_regression(&y, &grid, 1.0, lags)?;
    let spec = KernelSpec::new(KernelKind::Tc);
    let row = vec![LinkPrior::new(true, 1.0, [0.8, 0.5]); 2];
    let exact = log_collapsed_marginal(1, &row, spec, &reg, &PseudoGrid::full(lags), 0.2)?;
    println!("exact log marginal {exact:.4}");
    for d in [2, 4, 8, 16, 24, 32] {
        let pseudo = select_pseudo_points(lags, d)?;
        let v = log_collapsed_marginal(1, &row, spec, &reg, &pseudo, 0.2)?;
        println!("d = {d:>2}: {v:.4} (error {:.2e}), pseudo lags {:?}", (v - exact).abs(), pseudo.selected);
    }
    Ok(())
}
