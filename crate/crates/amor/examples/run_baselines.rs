//! Four-model comparison on the Simple Retrieval task.
//!
//!     cargo run --release --example run_baselines [seed]

use amor::experiments::{cmd_run_baselines, ExperimentContext, DEFAULT_SEED};

fn main() -> amor::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED);
    let ctx = ExperimentContext::new("experiments");
    let outcome = cmd_run_baselines(&ctx, seed)?;
    println!("results: {}", outcome.results_path.display());
    println!(
        "{:<16} {:>11} {:>13} {:>10} {:>8}",
        "model", "overall", "retrieval", "gate", "params"
    );
    for run in &outcome.results.runs {
        if let Some(m) = &run.metrics {
            let pct = |v: Option<f64>| {
                v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "---".into())
            };
            println!(
                "{:<16} {:>11} {:>13} {:>10}",
                run.name,
                pct(Some(m.overall_acc)),
                pct(m.retrieval_acc),
                pct(m.gate_rate),
            );
        } else {
            println!("{:<16} FAILED: {}", run.name, run.error.as_deref().unwrap_or("?"));
        }
    }
    Ok(())
}
