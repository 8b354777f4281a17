//! On-disk formats: contingency tables, penalties, criteria, plan sets, drug
//! libraries and weight files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evsynth_core::eligibility::{parse_rules, PenaltyRule, PenaltyScore, StructuredCriterion};
use evsynth_core::plan::{validate_plan_set, PlanSchemaError};
use evsynth_core::{ContingencyTable, DrugLibrary, PlanSet, PmaxMode, StudyWeight, WeightVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: plan set failed validation: {source}")]
    Plan { path: PathBuf, source: PlanSchemaError },
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn parse_err(path: &Path, message: impl ToString) -> FormatError {
    FormatError::Parse { path: path.to_path_buf(), message: message.to_string() }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| FormatError::Io { path: parent.to_path_buf(), source })?;
    }
    std::fs::write(path, s).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Deserialize)]
struct TableRow {
    study_id: String,
    events_trt: u64,
    total_trt: u64,
    events_ctl: u64,
    total_ctl: u64,
}

pub const TABLE_COLUMNS: &str = "study_id,events_trt,total_trt,events_ctl,total_ctl";

/// Tables CSV with header `study_id,events_trt,total_trt,events_ctl,total_ctl`.
pub fn parse_tables_csv(raw: &str, path: &Path) -> Result<Vec<ContingencyTable>, FormatError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(raw.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<TableRow>().enumerate() {
        let r = row.map_err(|e| parse_err(path, format!("row {}: {e}", i + 1)))?;
        let t = ContingencyTable::from_arms(&r.study_id, r.events_trt, r.total_trt, r.events_ctl, r.total_ctl)
            .map_err(|e| parse_err(path, format!("row {}: {e}", i + 1)))?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(parse_err(path, "no tables"));
    }
    Ok(out)
}

pub fn read_tables(path: &Path) -> Result<Vec<ContingencyTable>, FormatError> {
    parse_tables_csv(&read_text(path)?, path)
}

/// Comma-separated penalties (`0,2.8,1.8`).
pub fn parse_penalty_list(arg: &str) -> Result<Vec<f64>, FormatError> {
    arg.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| FormatError::Argument(format!("penalty `{}` is not a number", s.trim())))
        })
        .collect()
}

/// Penalty file: a JSON array of scores (`trial_id`, `total`) as written by
/// `penalize`, or an object mapping study id to penalty.
pub fn read_penalties(path: &Path) -> Result<Vec<(String, f64)>, FormatError> {
    let raw: serde_json::Value = read_json(path)?;
    match raw {
        serde_json::Value::Array(_) => {
            let scores: Vec<PenaltyScore> = serde_json::from_value(raw).map_err(|e| parse_err(path, e))?;
            Ok(scores.into_iter().map(|s| (s.trial_id, s.total)).collect())
        }
        serde_json::Value::Object(_) => {
            let map: BTreeMap<String, f64> = serde_json::from_value(raw).map_err(|e| parse_err(path, e))?;
            Ok(map.into_iter().collect())
        }
        _ => Err(parse_err(path, "expected an array of scores or an object of penalties")),
    }
}

/// Puts penalties in table order; every table needs a penalty.
pub fn align_penalties(
    tables: &[ContingencyTable],
    penalties: &[(String, f64)],
) -> Result<Vec<(String, f64)>, FormatError> {
    tables
        .iter()
        .map(|t| {
            penalties
                .iter()
                .find(|(id, _)| *id == t.study_id)
                .map(|(id, p)| (id.clone(), *p))
                .ok_or_else(|| FormatError::Argument(format!("no penalty for study `{}`", t.study_id)))
        })
        .collect()
}

/// Per-trial structured criteria keyed by NCT id.
pub type CriteriaFile = BTreeMap<String, Vec<StructuredCriterion>>;

pub fn read_criteria(path: &Path) -> Result<CriteriaFile, FormatError> {
    read_json(path)
}

pub fn read_rules(path: &Path) -> Result<Vec<PenaltyRule>, FormatError> {
    let raw: serde_json::Value = read_json(path)?;
    parse_rules(&raw).map_err(|e| parse_err(path, e))
}

pub fn read_plan_set(path: &Path) -> Result<PlanSet, FormatError> {
    let raw: serde_json::Value = read_json(path)?;
    validate_plan_set(&raw).map_err(|source| FormatError::Plan { path: path.to_path_buf(), source })
}

pub fn read_drug_library(path: &Path) -> Result<DrugLibrary, FormatError> {
    read_json(path)
}

/// Weights file: a weight vector as written by `weights`, or a list of
/// `{study_id, weight}`.
pub fn read_weights(path: &Path) -> Result<Vec<StudyWeight>, FormatError> {
    let raw: serde_json::Value = read_json(path)?;
    if raw.get("studies").is_some() {
        let v: WeightVector = serde_json::from_value(raw).map_err(|e| parse_err(path, e))?;
        return Ok(StudyWeight::from_vector(&v));
    }
    serde_json::from_value(raw).map_err(|e| parse_err(path, e))
}

/// Reference for the maximum penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PmaxArg {
    Attainable(Option<f64>),
    Observed,
    Explicit(f64),
}

impl std::str::FromStr for PmaxArg {
    type Err = FormatError;

    /// `attainable`, `attainable:<total>`, `observed`, or a number.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FormatError::Argument(format!("invalid pmax `{s}`"));
        let positive = |v: &str| v.trim().parse::<f64>().ok().filter(|x| x.is_finite() && *x > 0.0);
        match s.trim().split_once(':') {
            Some(("attainable", v)) => positive(v).map(|x| PmaxArg::Attainable(Some(x))).ok_or_else(bad),
            Some(_) => Err(bad()),
            None => match s.trim() {
                "attainable" => Ok(PmaxArg::Attainable(None)),
                "observed" => Ok(PmaxArg::Observed),
                v => positive(v).map(PmaxArg::Explicit).ok_or_else(bad),
            },
        }
    }
}

impl PmaxArg {
    pub fn mode(self) -> PmaxMode {
        match self {
            PmaxArg::Observed => PmaxMode::Observed,
            _ => PmaxMode::Attainable,
        }
    }
}
