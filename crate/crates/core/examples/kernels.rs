//! Prints TC, DC and SS kernel matrices and checks they are positive semidefinite.

use sdenet::kernels::{kernel_matrix, KernelKind, KernelSpec};

fn main() -> sdenet::Result<()> {
    let (lags, dt) = (6, 0.5);
    for (kind, beta) in [
        (KernelKind::Tc, vec![0.7]),
        (KernelKind::Dc, vec![0.7, 0.4]),
        (KernelKind::Ss, vec![0.7]),
    ] {
        let k = kernel_matrix(KernelSpec::new(kind), &beta, lags, dt)?;
        let eig = k.clone().symmetric_eigenvalues();
        println!("{} β={beta:?}: min eigenvalue {:.3e}, trace {:.4}", kind.name(), eig.min(), k.trace());
        println!("{k:.4}");
    }
    Ok(())
}
