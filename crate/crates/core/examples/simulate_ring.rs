//! Simulates a 5-node ring with two hidden nodes and prints the first samples.
//!
//! Usage: `cargo run --example simulate_ring [seed]`

use sdenet::cli::{generate_dataset, NetworkKind, SimulateConfig};

fn main() -> sdenet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = SimulateConfig {
        network: NetworkKind::Ring,
        measured: 5,
        hidden: 2,
        measurements: 60,
        seed,
        ..SimulateConfig::default()
    };
    let (data, sidecar, sys) = generate_dataset(&cfg)?;
    println!("A ({}×{}):\n{:.3}", sys.n, sys.n, sys.a);
    println!("measured-node topology:");
    for row in &sidecar.truth {
        println!("  {}", row.iter().map(|&v| if v { '1' } else { '.' }).collect::<String>());
    }
    println!("noise variance {:.4}, measurement variance {}", sidecar.noise_variance, sidecar.lambda_meas);
    for i in 0..5 {
        let row: Vec<String> = data.z.row(i).iter().map(|v| format!("{v:>7.3}")).collect();
        println!("t={:>4.1}  z=[{}]", data.times[i], row.join(" "));
    }
    Ok(())
}
