//! Results files: one JSON document per experiment invocation, validated
//! against the schema shipped in `schemas/results.schema.json`, plus a
//! sibling CSV summary for quick plotting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AmorError, Result};
use crate::metrics::MetricsRecord;
use crate::model::ModelConfig;
use crate::tasks::TaskConfig;
use crate::train::{EpochRecord, TrainConfig};

/// The schema every results file must satisfy.
pub const RESULTS_SCHEMA: &str = include_str!("../../schemas/results.schema.json");

/// One sub-run: a fully resolved configuration plus its outcome. The
/// embedded configs are sufficient to reproduce the run without the
/// original command-line flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub model_kind: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub task_config: TaskConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsRecord>,
    pub history: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Complete payload of one experiment command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsFile {
    pub experiment: String,
    /// RFC 3339 timestamp of the invocation.
    pub timestamp: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub aggregates: BTreeMap<String, Value>,
    pub runs: Vec<RunResult>,
}

impl ResultsFile {
    pub fn new(experiment: &str, seeds: Vec<u64>, runs: Vec<RunResult>) -> Self {
        ResultsFile {
            experiment: experiment.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            seeds,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            aggregates: BTreeMap::new(),
            runs,
        }
    }

    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }

    /// Write `<out_dir>/<experiment>/<stamp>-seed<seed>.json` (validated
    /// against the shipped schema first) plus a sibling summary CSV.
    /// Returns the JSON path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let value = serde_json::to_value(self)?;
        let schema: Value = serde_json::from_str(RESULTS_SCHEMA)?;
        validate_schema(&value, &schema)?;

        let dir = out_dir.join(&self.experiment);
        std::fs::create_dir_all(&dir)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let seed = self.seeds.first().copied().unwrap_or(0);
        let base = format!("{stamp}-seed{seed}");
        let json_path = dir.join(format!("{base}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&value)?)?;

        let csv_path = dir.join(format!("{base}-summary.csv"));
        std::fs::write(&csv_path, self.summary_csv())?;
        Ok(json_path)
    }

    /// Per-run metric table.
    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(
            "name,seed,overall_acc,retrieval_acc,gate_rate,gate_precision,gate_recall,gate_f1,entropy_gap,error\n",
        );
        for run in &self.runs {
            let m = run.metrics.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                run.name,
                run.seed,
                fmt(m.map(|m| m.overall_acc)),
                fmt(m.and_then(|m| m.retrieval_acc)),
                fmt(m.and_then(|m| m.gate_rate)),
                fmt(m.and_then(|m| m.gate_precision)),
                fmt(m.and_then(|m| m.gate_recall)),
                fmt(m.and_then(|m| m.gate_f1)),
                fmt(m.and_then(|m| m.entropy_gap)),
                run.error.as_deref().unwrap_or(""),
            ));
        }
        out
    }
}

/// Remove volatile fields (timestamps, wallclocks) so payloads can be
/// compared across invocations.
pub fn strip_volatile(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("timestamp");
            map.remove("wallclock");
            for v in map.values_mut() {
                strip_volatile(v);
            }
        }
        Value::Array(items) => {
            for v in items {
                strip_volatile(v);
            }
        }
        _ => {}
    }
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "integer" => value.is_i64() || value.is_u64(),
        "number" => value.is_number(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    }
}

/// Structural validator for the subset of JSON Schema the shipped schema
/// uses: `type` (string or union array), `required`, `properties`,
/// `items`.
pub fn validate_schema(value: &Value, schema: &Value) -> Result<()> {
    validate_at(value, schema, "$")
}

fn validate_at(value: &Value, schema: &Value, path: &str) -> Result<()> {
    if let Some(ty) = schema.get("type") {
        let ok = match ty {
            Value::String(s) => type_matches(value, s),
            Value::Array(options) => options
                .iter()
                .filter_map(Value::as_str)
                .any(|s| type_matches(value, s)),
            _ => true,
        };
        if !ok {
            return Err(AmorError::SchemaViolation(format!(
                "{path}: expected type {ty}, got {value}"
            )));
        }
    }
    // Required/properties only constrain actual objects (a nullable
    // object may be null).
    if let Some(obj) = value.as_object() {
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for key in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    return Err(AmorError::SchemaViolation(format!(
                        "{path}: missing required field {key:?}"
                    )));
                }
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (key, subschema) in props {
                if let Some(field) = obj.get(key) {
                    validate_at(field, subschema, &format!("{path}.{key}"))?;
                }
            }
        }
    }
    if let (Some(items), Some(schema_items)) = (value.as_array(), schema.get("items")) {
        for (i, item) in items.iter().enumerate() {
            validate_at(item, schema_items, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}
