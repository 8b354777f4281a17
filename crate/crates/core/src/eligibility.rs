//! Structured eligibility criteria and severity-scored penalty rules.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::digest_parts;
use crate::extract::ParserError;
use crate::plan::Comparison;
use crate::text::{contains_folded, eq_folded, fold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Inclusion,
    Exclusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredCriterion {
    pub kind: CriterionKind,
    pub entity: String,
    pub attribute: String,
    pub value: String,
    #[serde(default)]
    pub condition: String,
    pub sentence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionField {
    Kind,
    Entity,
    Attribute,
    Value,
    Condition,
    Sentence,
}

impl StructuredCriterion {
    pub fn field(&self, field: CriterionField) -> &str {
        match field {
            CriterionField::Kind => match self.kind {
                CriterionKind::Inclusion => "inclusion",
                CriterionKind::Exclusion => "exclusion",
            },
            CriterionField::Entity => &self.entity,
            CriterionField::Attribute => &self.attribute,
            CriterionField::Value => &self.value,
            CriterionField::Condition => &self.condition,
            CriterionField::Sentence => &self.sentence,
        }
    }
}

/// Picks the criteria a rule looks at. Absent parts match anything.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CriterionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

impl Selector {
    pub fn selects(&self, c: &StructuredCriterion) -> bool {
        self.kind.is_none_or(|k| k == c.kind)
            && self.entity.as_deref().is_none_or(|e| eq_folded(e, &c.entity))
            && self.attribute.as_deref().is_none_or(|a| eq_folded(a, &c.attribute))
    }
}

/// One comparison over a criterion field.
///
/// With `against_target`, the operands are the same field of every target
/// criterion the rule's selector picks, instead of `values`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldTest {
    pub field: CriterionField,
    pub comparison: Comparison,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub against_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    #[serde(default)]
    pub selector: Selector,
    /// All must hold.
    #[serde(default)]
    pub tests: Vec<FieldTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyRule {
    pub rule_id: String,
    pub description: String,
    pub severity: f64,
    pub matcher: Matcher,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleError {
    /// The document does not deserialize (unknown field, wrong type...).
    Malformed(String),
    Invalid { rule_id: String, reason: String },
    DuplicateId(String),
    /// A target-relative rule was evaluated without target criteria.
    MissingTarget { rule_id: String },
}

impl fmt::Display for RuleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleError::Malformed(m) => write!(f, "malformed penalty rules: {m}"),
            RuleError::Invalid { rule_id, reason } => write!(f, "rule `{rule_id}`: {reason}"),
            RuleError::DuplicateId(id) => write!(f, "duplicate rule id `{id}`"),
            RuleError::MissingTarget { rule_id } => {
                write!(f, "rule `{rule_id}` compares against the target but no target criteria were given")
            }
        }
    }
}

impl PenaltyRule {
    pub fn validate(&self) -> Result<(), RuleError> {
        let bad = |reason: &str| RuleError::Invalid { rule_id: self.rule_id.clone(), reason: reason.to_string() };
        if self.rule_id.trim().is_empty() {
            return Err(bad("rule_id is empty"));
        }
        if !(self.severity.is_finite() && (0.0..=1.0).contains(&self.severity)) {
            return Err(bad("severity must lie in [0, 1]"));
        }
        for t in &self.matcher.tests {
            if t.against_target && !t.values.is_empty() {
                return Err(bad("a test compares either against the target or against values, not both"));
            }
            let needs_values = !t.against_target && t.comparison != Comparison::PresenceMatch;
            if needs_values && t.values.is_empty() {
                return Err(bad("comparison requires at least one value"));
            }
            if matches!(t.comparison, Comparison::GreaterThan | Comparison::LessThan)
                && t.values.iter().any(|v| v.trim().parse::<f64>().is_err())
            {
                return Err(bad("greater_than/less_than need numeric values"));
            }
        }
        Ok(())
    }

    pub fn is_target_relative(&self) -> bool {
        self.matcher.tests.iter().any(|t| t.against_target)
    }
}

/// Parses and validates a rule list (bare array or `{"rules": [...]}`).
pub fn parse_rules(doc: &serde_json::Value) -> Result<Vec<PenaltyRule>, RuleError> {
    let arr = match doc {
        serde_json::Value::Object(m) if m.contains_key("rules") => m["rules"].clone(),
        other => other.clone(),
    };
    let rules: Vec<PenaltyRule> = serde_json::from_value(arr).map_err(|e| RuleError::Malformed(e.to_string()))?;
    for (i, r) in rules.iter().enumerate() {
        r.validate()?;
        if rules[..i].iter().any(|o| o.rule_id == r.rule_id) {
            return Err(RuleError::DuplicateId(r.rule_id.clone()));
        }
    }
    Ok(rules)
}

/// Penalties are summed in integer units of 1e-9 so that totals are exact
/// sums of the stated severities.
const UNITS: f64 = 1e9;

fn to_units(s: f64) -> i64 {
    libm::round(s * UNITS) as i64
}

fn from_units(u: i64) -> f64 {
    u as f64 / UNITS
}

/// Largest penalty any trial could receive under `rules`.
pub fn attainable_total(rules: &[PenaltyRule]) -> f64 {
    from_units(rules.iter().map(|r| to_units(r.severity)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggeredRule {
    pub rule_id: String,
    pub severity: f64,
    /// Indices into the trial's criteria that satisfied the matcher.
    pub matched: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyScore {
    pub trial_id: String,
    pub triggered: Vec<TriggeredRule>,
    pub total: f64,
}

fn first_number(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            return s[start..i].trim_end_matches('.').parse().ok();
        }
        i += 1;
    }
    None
}

fn test_holds(field: &str, comparison: Comparison, operands: &[&str], against_target: bool) -> bool {
    match comparison {
        Comparison::EqualTo | Comparison::InList => operands.iter().any(|o| eq_folded(field, o)),
        Comparison::NotEqual => {
            if against_target && operands.is_empty() {
                // The target has no such criterion, so any value differs.
                !field.trim().is_empty()
            } else {
                !operands.iter().any(|o| eq_folded(field, o))
            }
        }
        Comparison::PresenceMatch => {
            if operands.is_empty() && !against_target {
                !field.trim().is_empty()
            } else {
                operands.iter().any(|o| !o.trim().is_empty() && contains_folded(field, o))
            }
        }
        Comparison::GreaterThan | Comparison::LessThan => {
            let Some(x) = first_number(field) else { return false };
            operands.iter().filter_map(|o| first_number(o)).any(|t| match comparison {
                Comparison::GreaterThan => x > t,
                _ => x < t,
            })
        }
    }
}

fn matches(rule: &PenaltyRule, c: &StructuredCriterion, target: &[StructuredCriterion]) -> bool {
    if !rule.matcher.selector.selects(c) {
        return false;
    }
    rule.matcher.tests.iter().all(|t| {
        let field = c.field(t.field);
        if t.against_target {
            let ops: Vec<&str> = target
                .iter()
                .filter(|tc| rule.matcher.selector.selects(tc))
                .map(|tc| tc.field(t.field))
                .collect();
            test_holds(field, t.comparison, &ops, true)
        } else {
            let ops: Vec<&str> = t.values.iter().map(String::as_str).collect();
            test_holds(field, t.comparison, &ops, false)
        }
    })
}

/// A rule triggers (once) when at least one criterion satisfies its matcher;
/// the total is the sum of triggered severities.
pub fn evaluate_penalties(
    trial_id: &str,
    rules: &[PenaltyRule],
    criteria: &[StructuredCriterion],
    target: Option<&[StructuredCriterion]>,
) -> Result<PenaltyScore, RuleError> {
    let mut triggered = Vec::new();
    let mut units: i64 = 0;
    for rule in rules {
        rule.validate()?;
        let target_criteria = match (rule.is_target_relative(), target) {
            (true, None) => return Err(RuleError::MissingTarget { rule_id: rule.rule_id.clone() }),
            (_, t) => t.unwrap_or(&[]),
        };
        let matched: Vec<usize> = criteria
            .iter()
            .enumerate()
            .filter(|(_, c)| matches(rule, c, target_criteria))
            .map(|(i, _)| i)
            .collect();
        if !matched.is_empty() {
            units += to_units(rule.severity);
            triggered.push(TriggeredRule { rule_id: rule.rule_id.clone(), severity: rule.severity, matched });
        }
    }
    Ok(PenaltyScore { trial_id: trial_id.to_string(), triggered, total: from_units(units) })
}

/// A sentence-level unit of eligibility text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub kind: CriterionKind,
    pub sentence: String,
}

fn header_kind(line: &str) -> Option<CriterionKind> {
    let f = fold(line.trim_end_matches(':'));
    if f.starts_with("inclusion criteria") || f == "inclusion" || f == "key inclusion criteria" {
        Some(CriterionKind::Inclusion)
    } else if f.starts_with("exclusion criteria") || f == "exclusion" || f == "key exclusion criteria" {
        Some(CriterionKind::Exclusion)
    } else {
        None
    }
}

fn strip_bullet(line: &str) -> &str {
    let t = line.trim_start();
    let t = t
        .strip_prefix("* ")
        .or_else(|| t.strip_prefix("- "))
        .or_else(|| t.strip_prefix("• "))
        .unwrap_or(t);
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim();
        }
    }
    t.trim()
}

/// Splits registry eligibility text into clauses, one per non-header line,
/// tagged by the nearest preceding Inclusion/Exclusion header (inclusion
/// before any header).
pub fn split_clauses(text: &str) -> Vec<Clause> {
    let mut kind = CriterionKind::Inclusion;
    let mut out = Vec::new();
    for line in text.lines() {
        let s = strip_bullet(line);
        if s.is_empty() {
            continue;
        }
        if let Some(k) = header_kind(s) {
            kind = k;
            continue;
        }
        out.push(Clause { kind, sentence: s.to_string() });
    }
    out
}

/// Entity/attribute/value/condition for one clause.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClauseFields {
    pub entity: String,
    pub attribute: String,
    pub value: String,
    #[serde(default)]
    pub condition: String,
}

/// Maps a clause onto the tuple schema.
pub trait Structurer: Send + Sync {
    fn id(&self) -> &str;
    fn structure(&self, clause: &Clause) -> Result<ClauseFields, ParserError>;
}

/// Key for recorded structuring outputs.
pub fn clause_digest(clause: &Clause) -> String {
    let kind = match clause.kind {
        CriterionKind::Inclusion => "inclusion",
        CriterionKind::Exclusion => "exclusion",
    };
    digest_parts(&["structure-v1", kind, clause.sentence.trim()])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "kebab-case")]
pub enum StructureFlag {
    EmptyEligibility,
    /// No entity could be assigned; needs review.
    Unmapped { index: usize },
    StructurerFailed { index: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringReport {
    pub trial_id: String,
    pub structurer_id: String,
    pub criteria: Vec<StructuredCriterion>,
    pub flags: Vec<StructureFlag>,
}

pub fn structure_criteria<S: Structurer + ?Sized>(
    trial_id: &str,
    eligibility_text: &str,
    structurer: &S,
) -> StructuringReport {
    let mut criteria = Vec::new();
    let mut flags = Vec::new();
    if eligibility_text.trim().is_empty() {
        flags.push(StructureFlag::EmptyEligibility);
    }
    for (index, clause) in split_clauses(eligibility_text).into_iter().enumerate() {
        let fields = match structurer.structure(&clause) {
            Ok(f) => f,
            Err(ParserError::Unavailable(detail)) => {
                flags.push(StructureFlag::StructurerFailed { index, detail });
                ClauseFields::default()
            }
        };
        if fields.entity.trim().is_empty() || fields.attribute.trim().is_empty() {
            flags.push(StructureFlag::Unmapped { index });
        }
        criteria.push(StructuredCriterion {
            kind: clause.kind,
            entity: fields.entity.trim().to_string(),
            attribute: fields.attribute.trim().to_string(),
            value: fields.value.trim().to_string(),
            condition: fields.condition.trim().to_string(),
            sentence: clause.sentence,
        });
    }
    StructuringReport {
        trial_id: trial_id.to_string(),
        structurer_id: structurer.id().to_string(),
        criteria,
        flags,
    }
}

/// Keyword structurer: first matching entity group wins; attribute is the
/// matched cue, value the clause itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceStructurer;

const ENTITY_CUES: &[(&str, &[&str])] = &[
    ("biomarker", &["brca", "her2", "msi-h", "pd-l1", "mutation", "hrd", "dmmr", "claudin"]),
    ("response-status", &["complete response", "partial response", "stable disease", "progression", "remission"]),
    ("prior-treatment", &["platinum", "chemotherapy", "parp", "prior therapy", "prior treatment", "regimen"]),
    ("timing", &["within", "weeks", "days of", "randomi"]),
    ("disease", &["cancer", "carcinoma", "adenocarcinoma", "tumour", "tumor", "histolog", "metasta"]),
    ("demographics", &["age", "years", "female", "male", "pregnan", "breast-feeding", "breastfeeding"]),
    ("performance-status", &["ecog", "karnofsky", "performance status", "life expectancy"]),
    ("comorbidity", &["infection", "cardiac", "myelodysplastic", "leukaemia", "leukemia", "hepatitis", "hiv"]),
    ("organ-function", &["haemoglobin", "hemoglobin", "neutrophil", "platelet", "bilirubin", "creatinine", "marrow"]),
];

impl Structurer for ReferenceStructurer {
    fn id(&self) -> &str {
        "reference"
    }

    fn structure(&self, clause: &Clause) -> Result<ClauseFields, ParserError> {
        let s = &clause.sentence;
        for (entity, cues) in ENTITY_CUES {
            if let Some(cue) = cues.iter().find(|c| contains_folded(s, c)) {
                let attribute: String = cue
                    .chars()
                    .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '-' })
                    .collect();
                return Ok(ClauseFields {
                    entity: entity.to_string(),
                    attribute,
                    value: s.trim_end_matches('.').to_string(),
                    condition: String::new(),
                });
            }
        }
        Ok(ClauseFields { value: s.trim_end_matches('.').to_string(), ..Default::default() })
    }
}

impl core::error::Error for RuleError {}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::{format, vec};
    use serde_json::json;

    fn crit(kind: CriterionKind, entity: &str, attribute: &str, value: &str) -> StructuredCriterion {
        StructuredCriterion {
            kind,
            entity: entity.into(),
            attribute: attribute.into(),
            value: value.into(),
            condition: String::new(),
            sentence: format!("{entity} {attribute} {value}"),
        }
    }

    fn rule(id: &str, severity: f64, matcher: serde_json::Value) -> PenaltyRule {
        PenaltyRule {
            rule_id: id.into(),
            description: id.into(),
            severity,
            matcher: serde_json::from_value(matcher).unwrap(),
        }
    }

    #[test]
    fn additive_and_once_per_rule() {
        let rules = vec![
            rule("a", 0.9, json!({"selector": {"entity": "prior-treatment"}, "tests": [
                {"field": "value", "comparison": "presence_match", "values": ["platinum"]}]})),
            rule("b", 0.7, json!({"selector": {"entity": "disease"}, "tests": [
                {"field": "value", "comparison": "presence_match", "values": ["ovarian", "peritoneal"]}]})),
            rule("c", 0.6, json!({"selector": {"entity": "timing"}})),
            rule("d", 0.6, json!({"selector": {"entity": "timing", "attribute": "randomization-window"}})),
        ];
        let c = vec![
            crit(CriterionKind::Inclusion, "prior-treatment", "lines", "two or more platinum regimens"),
            crit(CriterionKind::Inclusion, "prior-treatment", "response", "platinum sensitive"),
            crit(CriterionKind::Inclusion, "Disease", "histology", "high grade serous ovarian cancer"),
            crit(CriterionKind::Inclusion, "timing", "randomization-window", "8 weeks"),
        ];
        let s = evaluate_penalties("t", &rules, &c, None).unwrap();
        assert_eq!(s.total, 2.8);
        assert_eq!(s.triggered[0].matched, vec![0, 1]);
        assert_eq!(s.triggered.len(), 4);
        assert_eq!(attainable_total(&rules), 2.8);
        assert_eq!(evaluate_penalties("t", &[], &c, None).unwrap().total, 0.0);
    }

    #[test]
    fn target_relative_rule_and_self_zero() {
        let r = rule("lines", 0.9, json!({"selector": {"entity": "prior-treatment", "attribute": "lines"}, "tests": [
            {"field": "value", "comparison": "not_equal", "against_target": true}]}));
        let target = vec![crit(CriterionKind::Inclusion, "prior-treatment", "lines", "first-line")];
        let other = vec![crit(CriterionKind::Inclusion, "prior-treatment", "lines", "two or more")];
        let rules = vec![r];
        assert_eq!(evaluate_penalties("x", &rules, &other, Some(&target)).unwrap().total, 0.9);
        assert_eq!(evaluate_penalties("t", &rules, &target, Some(&target)).unwrap().total, 0.0);
        assert_eq!(
            evaluate_penalties("x", &rules, &other, None).unwrap_err(),
            RuleError::MissingTarget { rule_id: "lines".into() }
        );
    }

    #[test]
    fn numeric_tests() {
        let r = rule("age", 0.2, json!({"selector": {"entity": "demographics", "attribute": "minimum-age"}, "tests": [
            {"field": "value", "comparison": "greater_than", "values": ["18"]}]}));
        let c = vec![crit(CriterionKind::Inclusion, "demographics", "minimum-age", ">= 21 years")];
        assert_eq!(evaluate_penalties("x", std::slice::from_ref(&r), &c, None).unwrap().total, 0.2);
        let c = vec![crit(CriterionKind::Inclusion, "demographics", "minimum-age", "18 years")];
        assert_eq!(evaluate_penalties("x", &[r], &c, None).unwrap().total, 0.0);
    }

    #[test]
    fn rule_validation() {
        assert!(matches!(
            parse_rules(&json!([{"rule_id": "x", "description": "d", "severity": 0.5,
                "matcher": {"tests": [{"field": "colour", "comparison": "equal_to", "values": ["a"]}]}}])),
            Err(RuleError::Malformed(_))
        ));
        assert!(matches!(
            parse_rules(&json!([{"rule_id": "x", "description": "d", "severity": 1.5, "matcher": {}}])),
            Err(RuleError::Invalid { .. })
        ));
        assert!(matches!(
            parse_rules(&json!({"rules": [{"rule_id": "x", "description": "d", "severity": 0.5,
                "matcher": {"tests": [{"field": "value", "comparison": "equal_to"}]}}]})),
            Err(RuleError::Invalid { .. })
        ));
        let dup = json!([
            {"rule_id": "x", "description": "d", "severity": 0.5, "matcher": {}},
            {"rule_id": "x", "description": "d", "severity": 0.5, "matcher": {}}
        ]);
        assert_eq!(parse_rules(&dup).unwrap_err(), RuleError::DuplicateId("x".into()));
    }

    #[test]
    fn clause_splitting() {
        let text = "Inclusion Criteria:\n\n* Age >= 18 years\n* Histologically confirmed adenocarcinoma\n\nExclusion Criteria:\n\n1. Prior PARP inhibitor\n  - Pregnant women\n";
        let c = split_clauses(text);
        assert_eq!(c.len(), 4);
        assert_eq!(c[0], Clause { kind: CriterionKind::Inclusion, sentence: "Age >= 18 years".into() });
        assert_eq!(c[2].kind, CriterionKind::Exclusion);
        assert_eq!(c[2].sentence, "Prior PARP inhibitor");
        assert_eq!(c[3].sentence, "Pregnant women");
    }

    #[test]
    fn structuring_flags() {
        let r = structure_criteria("t", "", &ReferenceStructurer);
        assert!(r.criteria.is_empty());
        assert_eq!(r.flags, vec![StructureFlag::EmptyEligibility]);
        let r = structure_criteria(
            "t",
            "Inclusion Criteria:\n* Documented gBRCA1 or gBRCA2 mutation\n* Signed informed consent",
            &ReferenceStructurer,
        );
        assert_eq!(r.criteria[0].entity, "biomarker");
        assert_eq!(r.criteria[0].attribute, "brca");
        assert_eq!(r.criteria[1].entity, "");
        assert_eq!(r.flags, vec![StructureFlag::Unmapped { index: 1 }]);
    }

    #[test]
    fn clause_digest_depends_on_kind_and_text() {
        let a = Clause { kind: CriterionKind::Inclusion, sentence: "x".into() };
        let b = Clause { kind: CriterionKind::Exclusion, sentence: "x".into() };
        assert_ne!(clause_digest(&a), clause_digest(&b));
        assert_eq!(clause_digest(&a), clause_digest(&Clause { sentence: " x ".into(), ..a.clone() }));
    }
}
