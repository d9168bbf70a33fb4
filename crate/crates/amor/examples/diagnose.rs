//! Diagnostics: noise sweep over several seeds, top-k sweep, and the KV
//! comparison.
//!
//!     cargo run --release --example diagnose [seed1,seed2,...]

use amor::experiments::{cmd_diagnose, ExperimentContext, DEFAULT_SEED};

fn main() -> amor::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_else(|| (0..5).map(|i| DEFAULT_SEED + i).collect());
    let ctx = ExperimentContext::new("experiments");
    let outcome = cmd_diagnose(&ctx, &seeds)?;
    println!("results: {}", outcome.results_path.display());
    for (key, value) in &outcome.results.aggregates {
        println!("{key}: {value:#}");
    }
    Ok(())
}
