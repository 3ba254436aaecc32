//! Runs a shortened desk benchmark and prints its table.
//!
//! Usage: `cargo run --release --example desk_benchmark [ring-desk|random-desk] [replicates] [k_max]`

use sdenet::cli::{run_benchmark, suite};

fn main() -> sdenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "ring-desk".into());
    let mut cfg = suite(&name)?;
    cfg.replicates = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    cfg.infer.sampler.k_max = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = run_benchmark(&cfg, jobs, None)?;
    print!("{}", report.render_table());
    for r in &report.results {
        match (&r.metrics, &r.error) {
            (Some(m), _) => println!("replicate {} (seed {}): AUROC {:?}", r.index, r.seed, m.auroc),
            (_, Some(e)) => println!("replicate {} failed: {e}", r.index),
            _ => {}
        }
    }
    Ok(())
}
