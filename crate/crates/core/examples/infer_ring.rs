//! Simulates a ring, samples the posterior and prints link probabilities.
//!
//! Usage: `cargo run --release --example infer_ring [k_max]`

use sdenet::cli::{generate_dataset, run_inference, InferConfig, NetworkKind, SimulateConfig};
use sdenet::metrics::{evaluate, Scorer};

fn main() -> sdenet::Result<()> {
    let k_max = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let sim = SimulateConfig {
        network: NetworkKind::Ring,
        measured: 4,
        measurements: 60,
        seed: 9,
        ..SimulateConfig::default()
    };
    let (data, sidecar, _) = generate_dataset(&sim)?;
    let mut cfg = InferConfig::default();
    cfg.sampler.k_max = k_max;
    cfg.sampler.seed = 1;
    let summary = run_inference(&data, &cfg, None, false, None)?;
    println!("link probabilities (row r: links j → r), truth in brackets:");
    for (r, row) in summary.link_prob.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, p)| format!("{p:.2}[{}]", sidecar.truth[r][j] as u8))
            .collect();
        println!("  {r}: {}", cells.join("  "));
    }
    println!("σ mean {:.3?}, λ mean {:.2e}", summary.sigma_mean, summary.lambda_mean);
    println!("{:?}", summary.diagnostics);
    let m = evaluate(&summary, &sidecar.truth, true, Scorer::LinkProbability)?;
    println!("AUROC {:?}, AUPREC {:?}", m.auroc, m.auprec);
    Ok(())
}
