//! Dump generated task samples as JSON lines for external inspection.
//!
//!     cargo run --release --example dump_dataset [simple|needle] [count] [seed]

use amor::tasks::{dump_samples, TaskConfig};

fn main() -> amor::Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "simple".into());
    let count: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let seed: u64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(42);
    let cfg = match which.as_str() {
        "needle" => TaskConfig::needle_haystack(),
        _ => TaskConfig::simple_retrieval(),
    };
    let mut out = std::io::stdout().lock();
    dump_samples(&cfg, seed, count, &mut out)
}
