//! Four-model comparison on the NeedleHaystack task (noise 50-150, no
//! impossible queries by default).
//!
//!     cargo run --release --example needlehaystack [seed]

use amor::experiments::{cmd_needlehaystack, ExperimentContext, DEFAULT_SEED};

fn main() -> amor::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED);
    let ctx = ExperimentContext::new("experiments");
    let outcome = cmd_needlehaystack(&ctx, seed)?;
    println!("results: {}", outcome.results_path.display());
    for run in &outcome.results.runs {
        if let Some(m) = &run.metrics {
            println!(
                "{:<16} retrieval {:>8}   gate {:>8}",
                run.name,
                m.retrieval_acc
                    .map(|x| format!("{:.2}%", 100.0 * x))
                    .unwrap_or_else(|| "---".into()),
                m.gate_rate
                    .map(|x| format!("{:.2}%", 100.0 * x))
                    .unwrap_or_else(|| "---".into()),
            );
        } else {
            println!("{:<16} FAILED: {}", run.name, run.error.as_deref().unwrap_or("?"));
        }
    }
    Ok(())
}
