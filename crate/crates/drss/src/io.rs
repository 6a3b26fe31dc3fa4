//! CSV ingestion against a declared schema, flat key/value run
//! configuration, and JSON report emission with provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{validate_sample, SampleMode, SemiSupervisedSample};
use crate::error::{Error, Result};
use crate::estimators::{OutcomeSpec, PsSpec};

/// A categorical column with its exhaustive level set; levels are one-hot
/// encoded with the first level dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub name: String,
    pub levels: Vec<String>,
}

/// Column mapping for a CSV dataset. Numeric covariates appear first in the
/// design matrix in their listed order; indicator expansions of categorical
/// covariates are appended after them, again in listed order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSchema {
    pub outcome_col: String,
    pub label_col: String,
    pub covariate_cols: Vec<String>,
    #[serde(default)]
    pub stratum_col: Option<String>,
    #[serde(default)]
    pub categorical_cols: Vec<CategoricalSpec>,
}

impl DataSchema {
    pub fn from_json_file(path: &Path) -> Result<DataSchema> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn categorical(&self, name: &str) -> Option<&CategoricalSpec> {
        self.categorical_cols.iter().find(|c| c.name == name)
    }

    /// Names of the expanded design columns, in matrix order.
    pub fn expanded_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for c in &self.covariate_cols {
            if self.categorical(c).is_none() {
                cols.push(c.clone());
            }
        }
        for c in &self.covariate_cols {
            if let Some(cat) = self.categorical(c) {
                for level in &cat.levels[1..] {
                    cols.push(format!("{}={}", c, level));
                }
            }
        }
        cols
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::ParseError(format!("column '{name}' not found in header")))
}

/// Load a CSV file through a schema into a validated sample. Cells must be
/// complete; an empty outcome is tolerated only on unlabeled rows in
/// missing-data mode.
pub fn load_csv(path: &Path, schema: &DataSchema, mode: SampleMode) -> Result<SemiSupervisedSample> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let outcome_idx = header_index(&headers, &schema.outcome_col)?;
    let label_idx = header_index(&headers, &schema.label_col)?;
    let stratum_idx = match &schema.stratum_col {
        Some(c) => Some(header_index(&headers, c)?),
        None => None,
    };
    struct Col {
        idx: usize,
        kind: ColKind,
    }
    enum ColKind {
        Numeric,
        Categorical { levels: Vec<String> },
    }
    let mut numeric_cols = Vec::new();
    let mut categorical_cols = Vec::new();
    for c in &schema.covariate_cols {
        let idx = header_index(&headers, c)?;
        match schema.categorical(c) {
            None => numeric_cols.push(Col { idx, kind: ColKind::Numeric }),
            Some(cat) => {
                if cat.levels.len() < 2 {
                    return Err(Error::ParseError(format!(
                        "categorical column '{c}' needs at least two levels"
                    )));
                }
                categorical_cols.push(Col {
                    idx,
                    kind: ColKind::Categorical { levels: cat.levels.clone() },
                })
            }
        }
    }
    let p = numeric_cols.len()
        + categorical_cols
            .iter()
            .map(|c| match &c.kind {
                ColKind::Categorical { levels } => levels.len() - 1,
                ColKind::Numeric => 0,
            })
            .sum::<usize>();

    let mut xs: Vec<f64> = Vec::new();
    let mut r: Vec<u8> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut delta: Vec<u8> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let violation = |message: String| Error::SchemaViolation { row: row_idx, message };
        let label_raw = record.get(label_idx).unwrap_or_default().trim();
        let label = match label_raw {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(violation(format!(
                    "label '{other}' is not 0 or 1 in column '{}'",
                    schema.label_col
                )))
            }
        };
        r.push(label);
        let outcome_raw = record.get(outcome_idx).unwrap_or_default().trim();
        let outcome = if outcome_raw.is_empty() || outcome_raw.eq_ignore_ascii_case("na") {
            if mode == SampleMode::MissingData && label == 0 {
                f64::NAN
            } else {
                return Err(violation(format!(
                    "missing outcome in column '{}'",
                    schema.outcome_col
                )));
            }
        } else {
            outcome_raw.parse::<f64>().map_err(|_| {
                violation(format!(
                    "outcome '{outcome_raw}' is not numeric in column '{}'",
                    schema.outcome_col
                ))
            })?
        };
        y.push(outcome);
        for col in &numeric_cols {
            let raw = record.get(col.idx).unwrap_or_default().trim();
            let v = raw.parse::<f64>().map_err(|_| {
                violation(format!("covariate '{raw}' is not numeric"))
            })?;
            xs.push(v);
        }
        for col in &categorical_cols {
            let raw = record.get(col.idx).unwrap_or_default().trim();
            let ColKind::Categorical { levels } = &col.kind else {
                unreachable!()
            };
            let Some(pos) = levels.iter().position(|l| l == raw) else {
                return Err(violation(format!("unknown categorical level '{raw}'")));
            };
            for k in 1..levels.len() {
                xs.push(if pos == k { 1.0 } else { 0.0 });
            }
        }
        if let Some(si) = stratum_idx {
            let raw = record.get(si).unwrap_or_default().trim();
            match raw {
                "0" => delta.push(0),
                "1" => delta.push(1),
                other => {
                    return Err(violation(format!("stratum '{other}' is not 0 or 1")));
                }
            }
        }
    }
    let n = r.len();
    let x = Array2::from_shape_vec((n, p), xs)
        .map_err(|e| Error::ParseError(format!("design assembly failed: {e}")))?;
    validate_sample(x, r, y, stratum_idx.map(|_| delta), mode)
}

/// Keys accepted in a run configuration file.
pub const CONFIG_KEYS: &[&str] = &[
    "mode", "input", "schema", "out", "ps", "m", "m1", "m0", "model", "k", "b", "alpha", "seed",
    "setting", "n", "p", "pi", "reps", "s_m", "s_pi",
];

/// Parse a flat `key = value` configuration file; `#` starts a comment and
/// unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ParseError(format!(
                "config line {}: expected key = value",
                ln + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::ParseError(format!(
                "config line {}: unknown key '{key}'",
                ln + 1
            )));
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

/// Parse a propensity-estimator name.
pub fn parse_ps_spec(name: &str) -> Result<PsSpec> {
    match name {
        "constant" | "mcar" => Ok(PsSpec::Mcar),
        "logistic" | "offset-logistic" => Ok(PsSpec::OffsetLogisticMle),
        "log-lasso" | "offset-lasso" => Ok(PsSpec::OffsetLogisticLasso { lambda: None }),
        "stratified" => Ok(PsSpec::Stratified { highdim: false }),
        "stratified-lasso" => Ok(PsSpec::Stratified { highdim: true }),
        "oracle" => Ok(PsSpec::Oracle),
        other => Err(Error::InvalidSpec(format!(
            "unknown propensity estimator '{other}'"
        ))),
    }
}

/// Parse an outcome-estimator name.
pub fn parse_outcome_spec(name: &str) -> Result<OutcomeSpec> {
    match name {
        "ls" | "LS" => Ok(OutcomeSpec::LeastSquares { degree: 1 }),
        "poly" | "poly2" => Ok(OutcomeSpec::LeastSquares { degree: 2 }),
        "poly3" => Ok(OutcomeSpec::LeastSquares { degree: 3 }),
        "lasso" => Ok(OutcomeSpec::Lasso { degree: 1 }),
        "poly-lasso" => Ok(OutcomeSpec::Lasso { degree: 2 }),
        "rkhs" | "kernel-ridge" => Ok(OutcomeSpec::KernelRidge { bandwidth: None }),
        "oracle" => Ok(OutcomeSpec::Oracle),
        other => Err(Error::InvalidSpec(format!(
            "unknown outcome estimator '{other}'"
        ))),
    }
}

/// Reproducibility stamp carried by every emitted report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// A report payload together with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportEnvelope<T> {
    pub provenance: Provenance,
    pub report: T,
}

/// SHA-256 of the canonical (sorted `key=value` lines) configuration text.
pub fn config_hash(config: &BTreeMap<String, String>) -> String {
    let canonical: String = config
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a report with provenance to pretty JSON (stable field order,
/// byte-identical across runs with equal inputs).
pub fn report_json<T: Serialize>(
    report: &T,
    config: &BTreeMap<String, String>,
    seed: u64,
) -> Result<String> {
    let envelope = ReportEnvelope {
        provenance: Provenance {
            config_hash: config_hash(config),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        report,
    };
    let mut text = serde_json::to_string_pretty(&envelope)?;
    text.push('\n');
    Ok(text)
}
