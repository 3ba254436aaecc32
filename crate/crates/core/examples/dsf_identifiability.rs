//! Evaluates the dynamical structure function of a network with a hidden node,
//! then recovers it from the input-output maps alone.

use nalgebra::{Complex, DMatrix};
use sdenet::dsf::{dsf_transfer_eval, ground_truth_topology, io_transfer_eval, recover_dsf_from_io};
use sdenet::simulator::generate_ring_network_with_hidden;

fn main() -> sdenet::Result<()> {
    let sys = generate_ring_network_with_hidden(3, 1, 2)?;
    println!("measured topology {:?}", ground_truth_topology(&sys));
    let freqs: Vec<Complex<f64>> = [0.3, 1.0, 4.0].iter().map(|&w| Complex::new(0.1, w)).collect();
    let (mut g_u, mut g_w) = (Vec::new(), Vec::new());
    for &s in &freqs {
        let (gu, gw) = io_transfer_eval(&sys, s)?;
        g_u.push(gu);
        g_w.push(gw);
    }
    let k1 = DMatrix::from_fn(sys.p, sys.p, |i, j| sys.k[(i, j)]);
    let recovered = recover_dsf_from_io(&freqs, &g_u, &g_w, &k1)?;
    for (s, rec) in freqs.iter().zip(&recovered) {
        let exact = dsf_transfer_eval(&sys, *s)?;
        let err = (&exact.f_y - &rec.f_y).map(|v| v.norm()).max();
        println!("s = {s:.1}: |F_y| =\n{:.3}  recovery error {err:.2e}", exact.f_y.map(|v| v.norm()));
    }
    Ok(())
}
