//! Seeded experiment commands.
//!
//! Each command trains the models it needs from scratch, evaluates them on
//! a held-out set, and writes exactly one results file (plus sibling CSV
//! data) under the output directory. Sub-runs are isolated: one model
//! diverging is recorded in its run entry and the remaining models still
//! execute; the command reports failure at the end.
//!
//! Commands:
//!
//! - `verify-entropy` — backbone-only training on Simple Retrieval,
//!   entropy statistics at retrieval vs local positions, histogram CSV
//! - `run-baselines` — the four-model Simple Retrieval comparison
//! - `needlehaystack` — the four-model hard-retrieval comparison
//! - `compare-kv` — ghost vs raw-embedding KV under the oracle gate
//! - `diagnose` — multi-seed noise sweep, top-k sweep, KV comparison
//! - `run-ablations` — gate variants x target rates on Simple Retrieval

pub mod config;
pub mod results;

pub use config::Overrides;
pub use results::{strip_volatile, validate_schema, ResultsFile, RunResult, RESULTS_SCHEMA};

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::{entropy_histogram, EvalOptions};
use crate::model::{
    AmorModel, GateMode, KvSource, ModelConfig, SequenceModel, SsmOnlyModel, TransformerModel,
};
use crate::rng::derive_seed;
use crate::tasks::{TaskConfig, TaskKind};
use crate::train::{eval_batches, train, GateReport, TrainConfig};

/// Default master seed (used by the CLI when none is given).
pub const DEFAULT_SEED: u64 = 42;

/// Seed branch for parameter initialization (training itself branches
/// data/dropout/eval streams off the same run seed).
const BRANCH_INIT: u64 = 4;

// Per-command training volumes (overridable via `epochs` /
// `batches_per_epoch`). Simple Retrieval trains at the full epoch budget;
// the hard-task sweeps use shorter schedules that still separate the
// conditions.
const SIMPLE_EPOCHS: usize = 30;
const SIMPLE_STEPS: usize = 100;
const VERIFY_EPOCHS: usize = 15;
const NEEDLE_EPOCHS: usize = 20;
const NEEDLE_STEPS: usize = 100;
// The noise sweep separates conditions quickly (short-noise retrieval is
// partly backbone-carried); the top-k and KV comparisons need the
// attention path to break out, which takes longer.
const SWEEP_EPOCHS: usize = 10;
const SWEEP_STEPS: usize = 60;
const TOPK_EPOCHS: usize = 14;
const TOPK_STEPS: usize = 100;

/// Where results go and which overrides apply.
#[derive(Clone, Debug)]
pub struct ExperimentContext {
    pub out_dir: PathBuf,
    pub overrides: Overrides,
}

impl ExperimentContext {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        ExperimentContext {
            out_dir: out_dir.into(),
            overrides: Overrides::new(),
        }
    }

    pub fn with_overrides(mut self, overrides: Overrides) -> Self {
        self.overrides = overrides;
        self
    }
}

/// Outcome of one command invocation.
#[derive(Clone, Debug)]
pub struct CommandOutcome {
    pub results_path: PathBuf,
    pub results: ResultsFile,
}

impl CommandOutcome {
    pub fn failed(&self) -> bool {
        self.results.any_failed()
    }
}

/// Which architecture/variant a sub-run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    SsmOnly,
    FullAttention,
    Amor(GateMode, KvSource),
}

impl ModelSpec {
    pub fn display_name(&self) -> String {
        match self {
            ModelSpec::SsmOnly => "ssm_only".into(),
            ModelSpec::FullAttention => "full_attention".into(),
            ModelSpec::Amor(gate, kv) => {
                let gate = match gate {
                    GateMode::Entropy => "entropy",
                    GateMode::Oracle => "oracle",
                    GateMode::LearnedSte => "learned_ste",
                    GateMode::AlwaysOn => "always_on",
                    GateMode::AlwaysOff => "always_off",
                    GateMode::SoftEntropy => "soft_entropy",
                };
                match kv {
                    KvSource::GhostSsm => format!("amor_{gate}"),
                    KvSource::RawEmbedding => format!("amor_{gate}_raw_kv"),
                }
            }
        }
    }
}

/// Train + evaluate one sub-run; failures are captured, not propagated.
fn run_one(
    name: &str,
    spec: ModelSpec,
    model_cfg: &ModelConfig,
    task: &TaskConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    opts: EvalOptions,
) -> RunResult {
    let mut cfg = model_cfg.clone();
    match spec {
        ModelSpec::Amor(gate, kv) => {
            cfg.gate_mode = gate;
            cfg.kv_source = kv;
        }
        ModelSpec::SsmOnly | ModelSpec::FullAttention => {}
    }
    let init_seed = derive_seed(seed, BRANCH_INIT);

    fn go<M: SequenceModel + GateReport>(
        mut model: M,
        task: &TaskConfig,
        tc: &TrainConfig,
        seed: u64,
        opts: EvalOptions,
    ) -> Result<(crate::metrics::MetricsRecord, Vec<crate::train::EpochRecord>)> {
        let out = train(&mut model, task, tc, seed, opts)?;
        Ok((out.final_metrics, out.history))
    }

    let outcome = (|| -> Result<_> {
        match spec {
            ModelSpec::SsmOnly => go(SsmOnlyModel::new(cfg.clone(), init_seed)?, task, train_cfg, seed, opts),
            ModelSpec::FullAttention => go(
                TransformerModel::new(cfg.clone(), init_seed)?,
                task,
                train_cfg,
                seed,
                opts,
            ),
            ModelSpec::Amor(..) => go(AmorModel::new(cfg.clone(), init_seed)?, task, train_cfg, seed, opts),
        }
    })();

    let model_kind = match spec {
        ModelSpec::SsmOnly => "ssm_only",
        ModelSpec::FullAttention => "transformer",
        ModelSpec::Amor(..) => "amor",
    };
    match outcome {
        Ok((metrics, history)) => RunResult {
            name: name.to_string(),
            seed,
            model_kind: model_kind.to_string(),
            model_config: cfg,
            train_config: train_cfg.clone(),
            task_config: task.clone(),
            metrics: Some(metrics),
            history,
            error: None,
        },
        Err(err) => RunResult {
            name: name.to_string(),
            seed,
            model_kind: model_kind.to_string(),
            model_config: cfg,
            train_config: train_cfg.clone(),
            task_config: task.clone(),
            metrics: None,
            history: vec![],
            error: Some(err.to_string()),
        },
    }
}

/// Resolve (model, train, task) configs for a command from its built-in
/// defaults plus the context's overrides.
fn resolve(
    ctx: &ExperimentContext,
    task: TaskConfig,
    epochs: usize,
    steps: usize,
) -> Result<(ModelConfig, TrainConfig, TaskConfig)> {
    let mut task = task;
    ctx.overrides.apply_task(&mut task)?;
    task.validate()?;

    let mut model = ModelConfig::base(task.vocab_size());
    model.max_seq_len = task.seq_len;
    ctx.overrides.apply_model(&mut model)?;
    model.validate()?;

    let mut train_cfg = TrainConfig {
        epochs,
        batches_per_epoch: steps,
        ..TrainConfig::default()
    };
    ctx.overrides.apply_train(&mut train_cfg)?;
    train_cfg.validate()?;
    Ok((model, train_cfg, task))
}

/// Entropy-gap validation: train the backbone alone on Simple Retrieval,
/// report entropy means at retrieval vs local positions, and emit the
/// histogram CSV behind the entropy-distribution figure.
pub fn cmd_verify_entropy(ctx: &ExperimentContext, seed: u64) -> Result<CommandOutcome> {
    let (model_cfg, train_cfg, task) =
        resolve(ctx, TaskConfig::simple_retrieval(), VERIFY_EPOCHS, SIMPLE_STEPS)?;

    // Train once; reuse the trained model for both the metrics record and
    // the entropy histogram. A training failure is still recorded as a
    // partial results file rather than bubbling up.
    let mut model = SsmOnlyModel::new(model_cfg.clone(), derive_seed(seed, BRANCH_INIT))?;
    let trained = train(&mut model, &task, &train_cfg, seed, EvalOptions::default());
    let (run, hist_csv, hist_means) = match trained {
        Ok(out) => {
            let held_out = eval_batches(&task, &train_cfg, seed)?;
            let hist = entropy_histogram(&model, &held_out, 20)?;
            let mut buf = Vec::new();
            hist.write_csv(&mut buf)?;
            let run = RunResult {
                name: "ssm_only".into(),
                seed,
                model_kind: "ssm_only".into(),
                model_config: model_cfg.clone(),
                train_config: train_cfg.clone(),
                task_config: task.clone(),
                metrics: Some(out.final_metrics),
                history: out.history,
                error: None,
            };
            (
                run,
                Some(String::from_utf8(buf).expect("csv is utf-8")),
                Some(hist.approx_means()),
            )
        }
        Err(err) => {
            let run = RunResult {
                name: "ssm_only".into(),
                seed,
                model_kind: "ssm_only".into(),
                model_config: model_cfg.clone(),
                train_config: train_cfg.clone(),
                task_config: task.clone(),
                metrics: None,
                history: vec![],
                error: Some(err.to_string()),
            };
            (run, None, None)
        }
    };

    let mut results = ResultsFile::new("verify-entropy", vec![seed], vec![run]);
    if let Some((local_mean, retrieval_mean)) = hist_means {
        results.aggregates.insert(
            "histogram_means_normalized".into(),
            serde_json::json!({ "local": local_mean, "retrieval": retrieval_mean }),
        );
    }

    let path = results.write(&ctx.out_dir)?;
    if let Some(csv) = hist_csv {
        let hist_path = path.with_file_name(format!(
            "{}-entropy-hist.csv",
            path.file_stem().unwrap_or_default().to_string_lossy()
        ));
        std::fs::write(hist_path, csv)?;
    }
    Ok(CommandOutcome {
        results_path: path,
        results,
    })
}

/// The Simple Retrieval comparison: backbone only, full attention, and
/// the gated model with oracle and entropy gates.
pub fn cmd_run_baselines(ctx: &ExperimentContext, seed: u64) -> Result<CommandOutcome> {
    let (model_cfg, train_cfg, task) =
        resolve(ctx, TaskConfig::simple_retrieval(), SIMPLE_EPOCHS, SIMPLE_STEPS)?;
    let specs = [
        ModelSpec::SsmOnly,
        ModelSpec::FullAttention,
        ModelSpec::Amor(GateMode::Oracle, KvSource::GhostSsm),
        ModelSpec::Amor(GateMode::Entropy, KvSource::GhostSsm),
    ];
    let runs: Vec<RunResult> = specs
        .iter()
        .map(|&s| {
            run_one(
                &s.display_name(),
                s,
                &model_cfg,
                &task,
                &train_cfg,
                seed,
                EvalOptions::default(),
            )
        })
        .collect();
    let results = ResultsFile::new("run-baselines", vec![seed], runs);
    let path = results.write(&ctx.out_dir)?;
    Ok(CommandOutcome {
        results_path: path,
        results,
    })
}

/// The hard-retrieval comparison on NeedleHaystack. Defaults: noise
/// 50-150, no impossible queries; both can be overridden (`noise_min`,
/// `noise_max`, `impossible_prob`).
pub fn cmd_needlehaystack(ctx: &ExperimentContext, seed: u64) -> Result<CommandOutcome> {
    let (model_cfg, train_cfg, task) =
        resolve(ctx, TaskConfig::needle_haystack(), NEEDLE_EPOCHS, NEEDLE_STEPS)?;
    let specs = [
        ModelSpec::SsmOnly,
        ModelSpec::FullAttention,
        ModelSpec::Amor(GateMode::Entropy, KvSource::GhostSsm),
        ModelSpec::Amor(GateMode::Oracle, KvSource::GhostSsm),
    ];
    let runs: Vec<RunResult> = specs
        .iter()
        .map(|&s| {
            run_one(
                &s.display_name(),
                s,
                &model_cfg,
                &task,
                &train_cfg,
                seed,
                EvalOptions::default(),
            )
        })
        .collect();
    let results = ResultsFile::new("needlehaystack", vec![seed], runs);
    let path = results.write(&ctx.out_dir)?;
    Ok(CommandOutcome {
        results_path: path,
        results,
    })
}

/// Ghost vs raw-embedding KV under the oracle gate, all else identical.
pub fn cmd_compare_kv(ctx: &ExperimentContext, seed: u64) -> Result<CommandOutcome> {
    let (model_cfg, train_cfg, task) =
        resolve(ctx, TaskConfig::needle_haystack(), NEEDLE_EPOCHS, NEEDLE_STEPS)?;
    let specs = [
        ("ghost_kv", ModelSpec::Amor(GateMode::Oracle, KvSource::GhostSsm)),
        (
            "raw_embedding_kv",
            ModelSpec::Amor(GateMode::Oracle, KvSource::RawEmbedding),
        ),
    ];
    let runs: Vec<RunResult> = specs
        .iter()
        .map(|&(name, s)| {
            run_one(name, s, &model_cfg, &task, &train_cfg, seed, EvalOptions::default())
        })
        .collect();
    let results = ResultsFile::new("compare-kv", vec![seed], runs);
    let path = results.write(&ctx.out_dir)?;
    Ok(CommandOutcome {
        results_path: path,
        results,
    })
}

/// Sequence length that comfortably fits the store/noise/query phases for
/// a fixed noise length.
fn phase_fit_seq_len(task: &TaskConfig, noise: usize) -> usize {
    let needed = 3 * task.n_pairs.1 + noise + 3 * task.n_queries.1;
    (needed + 9).div_ceil(16) * 16
}

/// Diagnostics: (a) noise sweep at {10, 50, 100} with the oracle gate and
/// 20% impossible queries, mean +/- std over the given seeds; (b) top-k
/// sweep {3, 8, 16, 32}; (c) ghost vs raw KV.
pub fn cmd_diagnose(ctx: &ExperimentContext, seeds: &[u64]) -> Result<CommandOutcome> {
    if seeds.len() < 2 {
        return Err(crate::error::AmorError::InvalidArgument {
            op: "diagnose",
            msg: "at least 2 seeds required for variance reporting".into(),
        });
    }
    let (model_cfg, train_cfg, base_task) =
        resolve(ctx, TaskConfig::needle_haystack(), SWEEP_EPOCHS, SWEEP_STEPS)?;
    let (_, deep_train_cfg, _) =
        resolve(ctx, TaskConfig::needle_haystack(), TOPK_EPOCHS, TOPK_STEPS)?;
    let mut runs: Vec<RunResult> = Vec::new();
    let mut aggregates = std::collections::BTreeMap::new();

    // (a) noise sweep, oracle gate, 20% impossible queries. Retrieval
    // accuracy includes the impossible positions, matching the horizon
    // replication condition.
    let noise_levels = [10usize, 50, 100];
    let mut sweep_stats = Vec::new();
    for &noise in &noise_levels {
        let mut task = TaskConfig {
            noise_len: (noise, noise),
            impossible_prob: 0.2,
            ..base_task.clone()
        };
        task.seq_len = phase_fit_seq_len(&task, noise);
        task.validate()?;
        let mut cfg = model_cfg.clone();
        cfg.max_seq_len = task.seq_len;
        let mut accs = Vec::new();
        for &seed in seeds {
            let run = run_one(
                &format!("noise{noise}_seed{seed}"),
                ModelSpec::Amor(GateMode::Oracle, KvSource::GhostSsm),
                &cfg,
                &task,
                &train_cfg,
                seed,
                EvalOptions {
                    include_impossible: true,
                },
            );
            if let Some(m) = &run.metrics {
                if let Some(acc) = m.retrieval_acc {
                    accs.push(acc);
                }
            }
            runs.push(run);
        }
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let var = accs
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / accs.len().max(1) as f64;
        sweep_stats.push(serde_json::json!({
            "noise": noise,
            "mean_retrieval_acc": mean,
            "std_retrieval_acc": var.sqrt(),
            "n_seeds": accs.len(),
        }));
    }
    aggregates.insert("noise_sweep".to_string(), serde_json::Value::Array(sweep_stats));

    // (b) top-k sweep on the default task at the first seed.
    let topk_seed = seeds[0];
    let mut topk_stats = Vec::new();
    for k in [3usize, 8, 16, 32] {
        let cfg = ModelConfig {
            top_k: k,
            ..model_cfg.clone()
        };
        let run = run_one(
            &format!("topk{k}"),
            ModelSpec::Amor(GateMode::Oracle, KvSource::GhostSsm),
            &cfg,
            &base_task,
            &deep_train_cfg,
            topk_seed,
            EvalOptions::default(),
        );
        topk_stats.push(serde_json::json!({
            "top_k": k,
            "retrieval_acc": run.metrics.as_ref().and_then(|m| m.retrieval_acc),
        }));
        runs.push(run);
    }
    aggregates.insert("topk_sweep".to_string(), serde_json::Value::Array(topk_stats));

    // (c) ghost vs raw-embedding KV at the first seed.
    for (name, kv) in [
        ("ghost_kv", KvSource::GhostSsm),
        ("raw_embedding_kv", KvSource::RawEmbedding),
    ] {
        runs.push(run_one(
            name,
            ModelSpec::Amor(GateMode::Oracle, kv),
            &model_cfg,
            &base_task,
            &deep_train_cfg,
            topk_seed,
            EvalOptions::default(),
        ));
    }

    let mut results = ResultsFile::new("diagnose", seeds.to_vec(), runs);
    results.aggregates = aggregates;
    let path = results.write(&ctx.out_dir)?;
    Ok(CommandOutcome {
        results_path: path,
        results,
    })
}

/// Gate-mechanism ablation on Simple Retrieval: {entropy, learned-STE}
/// gates crossed with target rates {0.1, 0.2}.
pub fn cmd_run_ablations(ctx: &ExperimentContext, seed: u64) -> Result<CommandOutcome> {
    let (model_cfg, train_cfg, task) =
        resolve(ctx, TaskConfig::simple_retrieval(), SIMPLE_EPOCHS, SIMPLE_STEPS)?;
    let mut runs = Vec::new();
    for (gate, gate_name) in [
        (GateMode::Entropy, "entropy"),
        (GateMode::LearnedSte, "learned_ste"),
    ] {
        for target in [0.1f64, 0.2] {
            let tc = TrainConfig {
                target_rate: target,
                ..train_cfg.clone()
            };
            runs.push(run_one(
                &format!("{gate_name}_target{target}"),
                ModelSpec::Amor(gate, KvSource::GhostSsm),
                &model_cfg,
                &task,
                &tc,
                seed,
                EvalOptions::default(),
            ));
        }
    }
    let results = ResultsFile::new("run-ablations", vec![seed], runs);
    let path = results.write(&ctx.out_dir)?;
    Ok(CommandOutcome {
        results_path: path,
        results,
    })
}

/// Dump task samples as JSON lines (dataset inspection interface).
pub fn cmd_dump_tasks(
    ctx: &ExperimentContext,
    kind: TaskKind,
    seed: u64,
    count: usize,
) -> Result<PathBuf> {
    let base = match kind {
        TaskKind::SimpleRetrieval => TaskConfig::simple_retrieval(),
        TaskKind::NeedleHaystack => TaskConfig::needle_haystack(),
    };
    let mut task = base;
    ctx.overrides.apply_task(&mut task)?;
    task.validate()?;
    let dir = ctx.out_dir.join("datasets");
    std::fs::create_dir_all(&dir)?;
    let name = match kind {
        TaskKind::SimpleRetrieval => "simple_retrieval",
        TaskKind::NeedleHaystack => "needle_haystack",
    };
    let path = dir.join(format!("{name}-seed{seed}-n{count}.jsonl"));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    crate::tasks::dump_samples(&task, seed, count, &mut file)?;
    Ok(path)
}

/// Convenience used by tests and examples: where experiment output lands
/// by default.
pub fn default_out_dir() -> PathBuf {
    Path::new("experiments").to_path_buf()
}
