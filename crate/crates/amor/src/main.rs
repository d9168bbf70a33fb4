//! Experiment runner CLI: thin dispatch over `amor::experiments`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amor::experiments::{
    cmd_compare_kv, cmd_diagnose, cmd_dump_tasks, cmd_needlehaystack, cmd_run_ablations,
    cmd_run_baselines, cmd_verify_entropy, CommandOutcome, ExperimentContext, Overrides,
    DEFAULT_SEED,
};
use amor::tasks::TaskKind;

#[derive(Parser)]
#[command(
    name = "amor",
    about = "Entropy-gated hybrid sequence model: seeded experiment commands",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Master seed for single-seed commands.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Comma-separated seed list (multi-seed commands).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,

    /// Flat `key = value` config file applied over built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for results files.
    #[arg(long, global = true, default_value = "experiments")]
    out_dir: PathBuf,

    /// Override the training epoch count.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Extra `key=value` overrides (repeatable), applied after the config
    /// file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone alone and measure the retrieval-vs-local
    /// entropy gap (plus histogram CSV).
    VerifyEntropy,
    /// Four-model comparison on the Simple Retrieval task.
    RunBaselines,
    /// Four-model comparison on NeedleHaystack.
    Needlehaystack {
        /// Probability that a query asks for a never-stored key.
        #[arg(long)]
        impossible_prob: Option<f64>,
        /// Minimum noise-phase length.
        #[arg(long)]
        noise_min: Option<usize>,
        /// Maximum noise-phase length.
        #[arg(long)]
        noise_max: Option<usize>,
    },
    /// Ghost vs raw-embedding KV under the oracle gate.
    CompareKv,
    /// Noise sweep (multi-seed), top-k sweep, and KV comparison.
    Diagnose,
    /// Gate variants x target rates on the Simple Retrieval task.
    RunAblations,
    /// Write generated samples as JSON lines.
    DumpTasks {
        /// Which task to dump: simple | needle.
        #[arg(long, default_value = "simple")]
        task: String,
        /// Number of samples.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
}

fn build_context(global: &GlobalArgs) -> amor::Result<ExperimentContext> {
    let mut overrides = Overrides::new();
    if let Some(path) = &global.config {
        overrides = Overrides::from_file(path)?;
    }
    let mut flags = Overrides::new();
    for pair in &global.sets {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            amor::AmorError::BadConfigValue {
                key: pair.clone(),
                msg: "expected KEY=VALUE".into(),
            }
        })?;
        flags.set(key.trim(), value.trim())?;
    }
    if let Some(epochs) = global.epochs {
        flags.set("epochs", &epochs.to_string())?;
    }
    Ok(ExperimentContext::new(global.out_dir.clone()).with_overrides(overrides.merged_with(&flags)))
}

fn report(outcome: &CommandOutcome) -> ExitCode {
    println!("results: {}", outcome.results_path.display());
    for run in &outcome.results.runs {
        match (&run.metrics, &run.error) {
            (Some(m), _) => {
                let fmt = |v: Option<f64>| {
                    v.map(|x| format!("{:.2}%", 100.0 * x))
                        .unwrap_or_else(|| "---".into())
                };
                println!(
                    "  {:<24} overall {:>7}  retrieval {:>7}  gate {:>7}  recall {:>7}  f1 {:>7}",
                    run.name,
                    fmt(Some(m.overall_acc)),
                    fmt(m.retrieval_acc),
                    fmt(m.gate_rate),
                    fmt(m.gate_recall),
                    fmt(m.gate_f1),
                );
            }
            (None, Some(err)) => println!("  {:<24} FAILED: {err}", run.name),
            (None, None) => println!("  {:<24} no metrics", run.name),
        }
    }
    for (key, value) in &outcome.results.aggregates {
        println!("  {key}: {value}");
    }
    if outcome.failed() {
        eprintln!("one or more sub-runs failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match build_context(&cli.global) {
        Ok(ctx) => ctx,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::FAILURE;
        }
    };
    let seed = cli.global.seed;

    let outcome = match &cli.command {
        Command::VerifyEntropy => cmd_verify_entropy(&ctx, seed),
        Command::RunBaselines => cmd_run_baselines(&ctx, seed),
        Command::Needlehaystack {
            impossible_prob,
            noise_min,
            noise_max,
        } => {
            let mut ctx = ctx;
            let mut extra = Overrides::new();
            let apply = |extra: &mut Overrides, key: &str, v: Option<String>| -> amor::Result<()> {
                if let Some(v) = v {
                    extra.set(key, &v)?;
                }
                Ok(())
            };
            let setup = (|| -> amor::Result<()> {
                apply(&mut extra, "impossible_prob", impossible_prob.map(|v| v.to_string()))?;
                apply(&mut extra, "noise_min", noise_min.map(|v| v.to_string()))?;
                apply(&mut extra, "noise_max", noise_max.map(|v| v.to_string()))?;
                Ok(())
            })();
            if let Err(err) = setup {
                eprintln!("error: {err}");
                return ExitCode::FAILURE;
            }
            ctx.overrides = ctx.overrides.merged_with(&extra);
            cmd_needlehaystack(&ctx, seed)
        }
        Command::CompareKv => cmd_compare_kv(&ctx, seed),
        Command::Diagnose => {
            let seeds: Vec<u64> = if cli.global.seeds.is_empty() {
                (0..5).map(|i| seed + i).collect()
            } else {
                cli.global.seeds.clone()
            };
            cmd_diagnose(&ctx, &seeds)
        }
        Command::RunAblations => cmd_run_ablations(&ctx, seed),
        Command::DumpTasks { task, count } => {
            let kind = match task.as_str() {
                "simple" => TaskKind::SimpleRetrieval,
                "needle" => TaskKind::NeedleHaystack,
                other => {
                    eprintln!("error: unknown task {other:?} (expected simple | needle)");
                    return ExitCode::FAILURE;
                }
            };
            match cmd_dump_tasks(&ctx, kind, seed, *count) {
                Ok(path) => {
                    println!("wrote {}", path.display());
                    return ExitCode::SUCCESS;
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    return ExitCode::FAILURE;
                }
            }
        }
    };

    match outcome {
        Ok(outcome) => report(&outcome),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
