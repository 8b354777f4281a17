//! Penalty scoring and pooling shared by the CLI and the service, so both
//! emit the same structures.

use evsynth_core::eligibility::{evaluate_penalties, PenaltyRule, PenaltyScore, RuleError};
use evsynth_core::meta::{forest_data, pool_classical_mh, pool_ew_mh, ForestData, MetaError, PoolOptions};
use evsynth_core::{ContingencyTable, PooledEstimate, StudyWeight};
use serde::{Deserialize, Serialize};

use crate::formats::CriteriaFile;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("target trial `{0}` has no structured criteria")]
    UnknownTarget(String),
    #[error("trial `{0}` has no structured criteria")]
    UnknownTrial(String),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

/// Scores every trial in `order` (default: all trials, sorted by id).
pub fn score_trials(
    rules: &[PenaltyRule],
    criteria: &CriteriaFile,
    target: Option<&str>,
    order: Option<&[String]>,
) -> Result<Vec<PenaltyScore>, ScoreError> {
    let target = match target {
        Some(t) => Some(criteria.get(t).ok_or_else(|| ScoreError::UnknownTarget(t.to_string()))?.as_slice()),
        None => None,
    };
    let ids: Vec<String> = match order {
        Some(o) => o.to_vec(),
        None => criteria.keys().cloned().collect(),
    };
    ids.iter()
        .map(|id| {
            let c = criteria.get(id).ok_or_else(|| ScoreError::UnknownTrial(id.clone()))?;
            Ok(evaluate_penalties(id, rules, c, target)?)
        })
        .collect()
}

/// Reorders weights to table order, matching by study id.
pub fn align_weights(tables: &[ContingencyTable], weights: &[StudyWeight]) -> Result<Vec<StudyWeight>, MetaError> {
    if tables.len() != weights.len() {
        return Err(MetaError::LengthMismatch { tables: tables.len(), weights: weights.len() });
    }
    tables
        .iter()
        .map(|t| {
            weights.iter().find(|w| w.study_id == t.study_id).cloned().ok_or_else(|| MetaError::MismatchedIds {
                expected: t.study_id.clone(),
                found: weights.iter().map(|w| w.study_id.clone()).find(|id| !tables.iter().any(|t| &t.study_id == id)).unwrap_or_default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    pub weighted: PooledEstimate,
    pub classical: PooledEstimate,
    pub forest: ForestData,
}

pub fn meta_report(
    tables: &[ContingencyTable],
    weights: &[StudyWeight],
    options: &PoolOptions,
) -> Result<MetaReport, MetaError> {
    let aligned = align_weights(tables, weights)?;
    let weighted = pool_ew_mh(tables, &aligned, options)?;
    let classical = pool_classical_mh(tables, options)?;
    let forest = forest_data(&classical, &weighted)?;
    Ok(MetaReport { weighted, classical, forest })
}
