//! Entropy-gap validation: train the backbone alone on Simple Retrieval
//! and compare prediction entropy at retrieval vs local positions.
//!
//!     cargo run --release --example verify_entropy [seed]

use amor::experiments::{cmd_verify_entropy, ExperimentContext, DEFAULT_SEED};

fn main() -> amor::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED);
    let ctx = ExperimentContext::new("experiments");
    let outcome = cmd_verify_entropy(&ctx, seed)?;
    println!("results: {}", outcome.results_path.display());
    let run = &outcome.results.runs[0];
    if let Some(m) = &run.metrics {
        println!(
            "entropy at retrieval positions: {:.3} nats",
            m.entropy_mean_retrieval.unwrap_or(f64::NAN)
        );
        println!(
            "entropy at local positions:     {:.3} nats",
            m.entropy_mean_local.unwrap_or(f64::NAN)
        );
        println!("entropy gap:                    {:.3} nats", m.entropy_gap.unwrap_or(f64::NAN));
    }
    Ok(())
}
