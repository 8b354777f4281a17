//! Registry dump ingest (public registry v2 study JSON).
//!
//! Path map, relative to each study object:
//!
//! | TrialRecord field    | JSON path |
//! |----------------------|-----------|
//! | `nct_id`             | `protocolSection.identificationModule.nctId` |
//! | `title`              | `protocolSection.identificationModule.briefTitle` (else `officialTitle`) |
//! | `summary`            | `protocolSection.descriptionModule.briefSummary` |
//! | `eligibility_text`   | `protocolSection.eligibilityModule.eligibilityCriteria` |
//! | `conditions`         | `protocolSection.conditionsModule.conditions[]` |
//! | `interventions`      | `protocolSection.armsInterventionsModule.interventions[].{type,name}` |
//! | `study_type`         | `protocolSection.designModule.studyType` |
//! | `allocation`         | `protocolSection.designModule.designInfo.allocation` |
//! | `phases`             | `protocolSection.designModule.phases[]` |
//! | `enrollment`         | `protocolSection.designModule.enrollmentInfo.count` |
//! | `primary_outcomes`   | `protocolSection.outcomesModule.primaryOutcomes[].{measure,description,timeFrame}` |
//! | `secondary_outcomes` | `protocolSection.outcomesModule.secondaryOutcomes[]` (same shape) |
//! | `status`             | `protocolSection.statusModule.overallStatus` |
//! | `has_results`        | `hasResults`, or presence of `resultsSection` |
//! | `adverse_event_text` | `resultsSection.adverseEventsModule.description` |
//! | `publications`       | `protocolSection.referencesModule.references[].citation` |
//!
//! Unknown paths are ignored. The document is either an array of studies or
//! an object with a `studies` array.

use std::collections::BTreeSet;

use evsynth_core::trial::{Intervention, Outcome};
use evsynth_core::{Corpus, TrialRecord};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("malformed registry JSON at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("registry dump must be an array of studies or an object with a `studies` array")]
    NotAStudyList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    /// Position in the input array.
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nct_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub studies: usize,
    pub accepted: usize,
    pub rejected: Vec<RejectedRecord>,
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, b) in text.iter().enumerate() {
        if current == line {
            break;
        }
        if *b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(text.len())
}

fn at<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |cur, key| cur.get(key))
}

fn text(v: &Value, path: &[&str]) -> String {
    match at(v, path) {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Number(n)) => n.to_string(),
        _ => String::new(),
    }
}

fn texts(v: &Value, path: &[&str]) -> Vec<String> {
    match at(v, path) {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        _ => Vec::new(),
    }
}

/// Integer coercion: commas and whitespace are stripped, anything else is absent.
fn enrollment(v: &Value) -> Option<u64> {
    match at(v, &["protocolSection", "designModule", "enrollmentInfo", "count"])? {
        Value::Number(n) => n.as_u64().or_else(|| n.as_f64().filter(|f| *f >= 0.0 && f.fract() == 0.0).map(|f| f as u64)),
        Value::String(s) => {
            let cleaned: String = s.chars().filter(|c| !c.is_whitespace() && *c != ',').collect();
            cleaned.parse().ok()
        }
        _ => None,
    }
}

fn outcomes(v: &Value, key: &str) -> Vec<Outcome> {
    match at(v, &["protocolSection", "outcomesModule", key]) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|o| Outcome {
                measure: text(o, &["measure"]),
                description: text(o, &["description"]),
                time_frame: text(o, &["timeFrame"]),
            })
            .filter(|o| !o.measure.is_empty())
            .collect(),
        _ => Vec::new(),
    }
}

/// Maps one study object. `None` when the identifier is missing.
pub fn map_study(v: &Value) -> Option<TrialRecord> {
    let nct_id = text(v, &["protocolSection", "identificationModule", "nctId"]);
    if nct_id.is_empty() {
        return None;
    }
    let mut title = text(v, &["protocolSection", "identificationModule", "briefTitle"]);
    if title.is_empty() {
        title = text(v, &["protocolSection", "identificationModule", "officialTitle"]);
    }
    let interventions = match at(v, &["protocolSection", "armsInterventionsModule", "interventions"]) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| Intervention { kind: text(i, &["type"]), name: text(i, &["name"]) })
            .filter(|i| !i.name.is_empty())
            .collect(),
        _ => Vec::new(),
    };
    let publications = match at(v, &["protocolSection", "referencesModule", "references"]) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|r| text(r, &["citation"]))
            .filter(|c| !c.is_empty())
            .collect(),
        _ => Vec::new(),
    };
    let has_results = v.get("hasResults").and_then(Value::as_bool).unwrap_or(false)
        || v.get("resultsSection").is_some_and(|r| !r.is_null());
    Some(TrialRecord {
        nct_id,
        title,
        summary: text(v, &["protocolSection", "descriptionModule", "briefSummary"]),
        eligibility_text: text(v, &["protocolSection", "eligibilityModule", "eligibilityCriteria"]),
        conditions: texts(v, &["protocolSection", "conditionsModule", "conditions"]),
        interventions,
        study_type: text(v, &["protocolSection", "designModule", "studyType"]),
        allocation: text(v, &["protocolSection", "designModule", "designInfo", "allocation"]),
        phases: texts(v, &["protocolSection", "designModule", "phases"]),
        primary_outcomes: outcomes(v, "primaryOutcomes"),
        secondary_outcomes: outcomes(v, "secondaryOutcomes"),
        adverse_event_text: text(v, &["resultsSection", "adverseEventsModule", "description"]),
        publications,
        enrollment: enrollment(v),
        status: text(v, &["protocolSection", "statusModule", "overallStatus"]),
        has_results,
    })
}

/// Parses a registry dump. Records without an identifier, and repeats of an
/// identifier already seen, are rejected and listed in the report.
pub fn ingest_registry_dump(
    raw: &[u8],
    source_tag: &str,
    ingested_at: &str,
) -> Result<(Corpus, IngestReport), IngestError> {
    let doc: Value = serde_json::from_slice(raw).map_err(|e| IngestError::Malformed {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let studies = match &doc {
        Value::Array(items) => items,
        Value::Object(m) => match m.get("studies") {
            Some(Value::Array(items)) => items,
            _ => return Err(IngestError::NotAStudyList),
        },
        _ => return Err(IngestError::NotAStudyList),
    };
    let mut report = IngestReport { studies: studies.len(), ..Default::default() };
    let mut seen = BTreeSet::new();
    let mut trials = Vec::new();
    for (index, study) in studies.iter().enumerate() {
        match map_study(study) {
            None => report.rejected.push(RejectedRecord {
                index,
                nct_id: None,
                reason: "missing protocolSection.identificationModule.nctId".into(),
            }),
            Some(t) if !seen.insert(t.nct_id.clone()) => report.rejected.push(RejectedRecord {
                index,
                nct_id: Some(t.nct_id),
                reason: "duplicate identifier; first occurrence kept".into(),
            }),
            Some(t) => trials.push(t),
        }
    }
    report.accepted = trials.len();
    Ok((Corpus::new(trials, source_tag, ingested_at), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn study(id: &str) -> Value {
        json!({"protocolSection": {"identificationModule": {"nctId": id, "briefTitle": format!("Trial {id}")}}})
    }

    #[test]
    fn maps_documented_paths() {
        let doc = json!([{
            "protocolSection": {
                "identificationModule": {"nctId": "NCT03615326", "briefTitle": "Pembrolizumab HER2+ gastric"},
                "statusModule": {"overallStatus": "ACTIVE_NOT_RECRUITING"},
                "descriptionModule": {"briefSummary": "A study."},
                "conditionsModule": {"conditions": ["Gastric Cancer", " "]},
                "designModule": {
                    "studyType": "INTERVENTIONAL",
                    "phases": ["PHASE3"],
                    "designInfo": {"allocation": "RANDOMIZED"},
                    "enrollmentInfo": {"count": 738}
                },
                "armsInterventionsModule": {"interventions": [
                    {"type": "BIOLOGICAL", "name": "Pembrolizumab"}, {"type": "DRUG", "name": "Placebo"}
                ]},
                "outcomesModule": {"primaryOutcomes": [{"measure": "PFS", "timeFrame": "up to 5 years"}]},
                "eligibilityModule": {"eligibilityCriteria": "Inclusion Criteria:\n* HER2 positive"},
                "referencesModule": {"references": [{"citation": "Janjigian YY. Nature 2023."}, {"pmid": "1"}]}
            },
            "hasResults": false
        }]);
        let (corpus, report) = ingest_registry_dump(doc.to_string().as_bytes(), "t", "").unwrap();
        assert_eq!(report.accepted, 1);
        let t = &corpus.trials[0];
        assert_eq!(t.phases, vec!["PHASE3"]);
        assert_eq!(t.enrollment, Some(738));
        assert_eq!(t.conditions, vec!["Gastric Cancer"]);
        assert_eq!(t.interventions[1].kind, "DRUG");
        assert_eq!(t.primary_outcomes[0].time_frame, "up to 5 years");
        assert_eq!(t.publications.len(), 1);
        assert_eq!(t.allocation, "RANDOMIZED");
        assert!(!t.has_results);
    }

    #[test]
    fn sorts_and_rejects() {
        let doc = json!({"studies": [study("NCT02"), study("NCT00"), {"protocolSection": {}}, study("NCT01"), study("NCT00")]});
        let (corpus, report) = ingest_registry_dump(doc.to_string().as_bytes(), "t", "").unwrap();
        assert_eq!(corpus.ids(), vec!["NCT00", "NCT01", "NCT02"]);
        assert_eq!(report.studies, 5);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.rejected[0].index, 2);
        assert_eq!(report.rejected[1].nct_id.as_deref(), Some("NCT00"));
    }

    #[test]
    fn empty_and_malformed() {
        let (c, _) = ingest_registry_dump(b"[]", "t", "").unwrap();
        assert!(c.is_empty());
        let raw = b"[\n  {\"a\": 1,}\n]";
        match ingest_registry_dump(raw, "t", "") {
            Err(IngestError::Malformed { offset, .. }) => assert_eq!(raw[offset], b'}'),
            other => panic!("{other:?}"),
        }
        assert_eq!(ingest_registry_dump(b"{\"x\": 1}", "t", ""), Err(IngestError::NotAStudyList));
    }

    #[test]
    fn enrollment_coercion() {
        let with = |count: Value| {
            let v = json!({"protocolSection": {"identificationModule": {"nctId": "N"},
                "designModule": {"enrollmentInfo": {"count": count}}}});
            map_study(&v).unwrap().enrollment
        };
        assert_eq!(with(json!("1,204 ")), Some(1204));
        assert_eq!(with(json!("about 40")), None);
        assert_eq!(with(json!(12.0)), Some(12));
        assert_eq!(with(json!(-3)), None);
    }
}
