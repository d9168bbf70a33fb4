//! Gate-mechanism ablation: {entropy, learned-STE} x target rates
//! {0.1, 0.2} on the Simple Retrieval task.
//!
//!     cargo run --release --example run_ablations [seed]

use amor::experiments::{cmd_run_ablations, ExperimentContext, DEFAULT_SEED};

fn main() -> amor::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED);
    let ctx = ExperimentContext::new("experiments");
    let outcome = cmd_run_ablations(&ctx, seed)?;
    println!("results: {}", outcome.results_path.display());
    for run in &outcome.results.runs {
        if let Some(m) = &run.metrics {
            let pct = |v: Option<f64>| {
                v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "---".into())
            };
            println!(
                "{:<22} retrieval {:>8}  f1 {:>8}  gate {:>8}",
                run.name,
                pct(m.retrieval_acc),
                pct(m.gate_f1),
                pct(m.gate_rate),
            );
        }
    }
    Ok(())
}
