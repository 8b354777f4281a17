//! Trial records, the attendable-field vocabulary and generic pre-filtering.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub measure: String,
    pub description: String,
    pub time_frame: String,
}

/// One registry study.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrialRecord {
    pub nct_id: String,
    pub title: String,
    pub summary: String,
    pub eligibility_text: String,
    pub conditions: Vec<String>,
    pub interventions: Vec<Intervention>,
    pub study_type: String,
    pub allocation: String,
    pub phases: Vec<String>,
    pub primary_outcomes: Vec<Outcome>,
    pub secondary_outcomes: Vec<Outcome>,
    pub adverse_event_text: String,
    pub publications: Vec<String>,
    pub enrollment: Option<u64>,
    pub status: String,
    pub has_results: bool,
}

/// Metadata fields a plan condition may attend to, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Title,
    Summary,
    Eligibility,
    Conditions,
    Interventions,
    StudyType,
    Allocation,
    Phase,
    PrimaryOutcome,
    SecondaryOutcome,
    AdverseEvent,
    Publications,
    Enrollment,
}

impl Field {
    pub const ALL: [Field; 13] = [
        Field::Title,
        Field::Summary,
        Field::Eligibility,
        Field::Conditions,
        Field::Interventions,
        Field::StudyType,
        Field::Allocation,
        Field::Phase,
        Field::PrimaryOutcome,
        Field::SecondaryOutcome,
        Field::AdverseEvent,
        Field::Publications,
        Field::Enrollment,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Field::Title => "Title",
            Field::Summary => "Summary",
            Field::Eligibility => "Eligibility",
            Field::Conditions => "Conditions",
            Field::Interventions => "Interventions",
            Field::StudyType => "Study Type",
            Field::Allocation => "Allocation",
            Field::Phase => "Phase",
            Field::PrimaryOutcome => "Primary Outcome",
            Field::SecondaryOutcome => "Secondary Outcome",
            Field::AdverseEvent => "Adverse Event",
            Field::Publications => "Publications",
            Field::Enrollment => "Enrollment",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Field {
    type Err = String;

    /// Accepts the vocabulary labels case-insensitively, with `_` or `-`
    /// standing in for spaces.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted: String = s
            .trim()
            .chars()
            .map(|c| if c == '_' || c == '-' { ' ' } else { c })
            .collect();
        Field::ALL
            .iter()
            .copied()
            .find(|f| f.label().eq_ignore_ascii_case(&wanted))
            .ok_or_else(|| format!("unknown trial field `{s}`"))
    }
}

impl Serialize for Field {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn render_outcomes(outcomes: &[Outcome]) -> String {
    outcomes
        .iter()
        .map(|o| {
            let mut line = o.measure.clone();
            if !o.description.is_empty() {
                line.push_str(" - ");
                line.push_str(&o.description);
            }
            if !o.time_frame.is_empty() {
                line.push_str(" (time frame: ");
                line.push_str(&o.time_frame);
                line.push(')');
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl TrialRecord {
    /// Text rendering of one field; empty when the record has no value.
    pub fn field_text(&self, field: Field) -> String {
        match field {
            Field::Title => self.title.clone(),
            Field::Summary => self.summary.clone(),
            Field::Eligibility => self.eligibility_text.clone(),
            Field::Conditions => self.conditions.join("; "),
            Field::Interventions => self
                .interventions
                .iter()
                .map(|i| {
                    if i.kind.is_empty() {
                        i.name.clone()
                    } else {
                        format!("{}: {}", i.kind, i.name)
                    }
                })
                .collect::<Vec<_>>()
                .join("; "),
            Field::StudyType => self.study_type.clone(),
            Field::Allocation => self.allocation.clone(),
            Field::Phase => self.phases.join(", "),
            Field::PrimaryOutcome => render_outcomes(&self.primary_outcomes),
            Field::SecondaryOutcome => render_outcomes(&self.secondary_outcomes),
            Field::AdverseEvent => self.adverse_event_text.clone(),
            Field::Publications => self.publications.join("\n"),
            Field::Enrollment => self.enrollment.map(|n| n.to_string()).unwrap_or_default(),
        }
    }

    /// Concatenates the requested fields in vocabulary order, each behind a
    /// `Label: ` header. Fields without content are skipped, so a record with
    /// none of them yields an empty string.
    pub fn attended_text(&self, fields: &[Field]) -> String {
        let mut wanted: Vec<Field> = fields.to_vec();
        wanted.sort();
        wanted.dedup();
        let mut parts = Vec::new();
        for field in wanted {
            let text = self.field_text(field);
            let text = text.trim();
            if !text.is_empty() {
                parts.push(format!("{}: {}", field.label(), text));
            }
        }
        parts.join("\n")
    }
}

/// An ordered set of trials, canonically sorted by `nct_id`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub trials: Vec<TrialRecord>,
    pub source_tag: String,
    pub ingested_at: String,
}

impl Corpus {
    pub fn new(mut trials: Vec<TrialRecord>, source_tag: &str, ingested_at: &str) -> Self {
        trials.sort_by(|a, b| a.nct_id.cmp(&b.nct_id));
        Corpus {
            trials,
            source_tag: source_tag.to_string(),
            ingested_at: ingested_at.to_string(),
        }
    }

    /// A corpus carrying the same provenance tags but different trials.
    pub fn with_trials(&self, trials: Vec<TrialRecord>) -> Self {
        Corpus {
            trials,
            source_tag: self.source_tag.clone(),
            ingested_at: self.ingested_at.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn get(&self, nct_id: &str) -> Option<&TrialRecord> {
        self.trials
            .binary_search_by(|t| t.nct_id.as_str().cmp(nct_id))
            .ok()
            .map(|i| &self.trials[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.nct_id.clone()).collect()
    }
}

/// Why the pre-filter dropped a trial. Declaration order is the order in
/// which sub-rules are checked and reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefilterBucket {
    NotInterventional,
    Status,
    MissingPhase,
    Phase4,
    NoResultsOrPublications,
}

impl PrefilterBucket {
    pub const ORDER: [PrefilterBucket; 5] = [
        PrefilterBucket::NotInterventional,
        PrefilterBucket::Status,
        PrefilterBucket::MissingPhase,
        PrefilterBucket::Phase4,
        PrefilterBucket::NoResultsOrPublications,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PrefilterBucket::NotInterventional => "not-interventional",
            PrefilterBucket::Status => "status",
            PrefilterBucket::MissingPhase => "missing-phase",
            PrefilterBucket::Phase4 => "phase-4",
            PrefilterBucket::NoResultsOrPublications => "no-results-or-publications",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefilterPolicy {
    /// Accepted overall statuses, compared after upper-casing and mapping
    /// spaces to underscores.
    pub allowed_statuses: Vec<String>,
}

impl Default for PrefilterPolicy {
    fn default() -> Self {
        PrefilterPolicy {
            allowed_statuses: alloc::vec!["COMPLETED".into(), "ACTIVE_NOT_RECRUITING".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCount {
    pub bucket: PrefilterBucket,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefilterReport {
    pub input: usize,
    pub retained: usize,
    pub removed: Vec<BucketCount>,
    /// Per dropped trial, the first sub-rule it failed.
    pub dropped: Vec<(String, PrefilterBucket)>,
}

fn normalize_enum(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_uppercase() })
        .collect::<String>()
        .split('_')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

fn is_phase4(phase: &str) -> bool {
    let p = normalize_enum(phase);
    p == "PHASE4" || p == "PHASE_4" || p == "PHASE_IV" || p == "PHASEIV"
}

/// First failing sub-rule for a trial, or `None` when it passes.
pub fn prefilter_check(trial: &TrialRecord, policy: &PrefilterPolicy) -> Option<PrefilterBucket> {
    if normalize_enum(&trial.study_type) != "INTERVENTIONAL" {
        return Some(PrefilterBucket::NotInterventional);
    }
    let status = normalize_enum(&trial.status);
    if !policy.allowed_statuses.iter().any(|s| normalize_enum(s) == status) {
        return Some(PrefilterBucket::Status);
    }
    let phases: Vec<&String> = trial
        .phases
        .iter()
        .filter(|p| {
            let n = normalize_enum(p);
            !n.is_empty() && n != "NA"
        })
        .collect();
    if phases.is_empty() {
        return Some(PrefilterBucket::MissingPhase);
    }
    if phases.iter().any(|p| is_phase4(p)) {
        return Some(PrefilterBucket::Phase4);
    }
    if !trial.has_results && trial.publications.iter().all(|p| p.trim().is_empty()) {
        return Some(PrefilterBucket::NoResultsOrPublications);
    }
    None
}

/// Generic pre-filtering. Output preserves input order.
pub fn prefilter(corpus: &Corpus, policy: &PrefilterPolicy) -> (Corpus, PrefilterReport) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for trial in &corpus.trials {
        match prefilter_check(trial, policy) {
            None => kept.push(trial.clone()),
            Some(bucket) => dropped.push((trial.nct_id.clone(), bucket)),
        }
    }
    let removed = PrefilterBucket::ORDER
        .iter()
        .map(|&bucket| BucketCount {
            bucket,
            removed: dropped.iter().filter(|(_, b)| *b == bucket).count(),
        })
        .collect();
    let report = PrefilterReport {
        input: corpus.len(),
        retained: kept.len(),
        removed,
        dropped,
    };
    (corpus.with_trials(kept), report)
}
