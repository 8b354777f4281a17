//! Deterministic evaluation of function plans over trial records.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::drugs::MembershipLibrary;
use crate::extract::{extract, ExtractedValue, ExtractionFailure, ExtractionRequest, Parser, Value};
use crate::plan::{Comparison, Condition, FunctionPlan, LogicalOperator, TargetValue};
use crate::text::{contains_folded, eq_folded};
use crate::trial::TrialRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionOutcome {
    Satisfied,
    Unsatisfied,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownAction {
    Keep,
    Drop,
}

/// What an `unknown` outcome means for the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownPolicy {
    /// Single-condition (inclusion) plans.
    pub default_plan: UnknownAction,
    /// A guard whose applicability cannot be established.
    pub sequential_guard: UnknownAction,
    /// The deciding condition of a sequential plan.
    pub sequential_final: UnknownAction,
}

impl Default for UnknownPolicy {
    fn default() -> Self {
        UnknownPolicy {
            default_plan: UnknownAction::Drop,
            sequential_guard: UnknownAction::Keep,
            sequential_final: UnknownAction::Drop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipMode {
    /// Every extracted name must be on the list.
    All,
    /// At least one extracted name must be on the list.
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipPolicy {
    pub mode: MembershipMode,
    /// Comparator names skipped before the membership check.
    pub ignore: Vec<String>,
}

impl Default for MembershipPolicy {
    fn default() -> Self {
        MembershipPolicy {
            mode: MembershipMode::All,
            ignore: ["placebo", "best supportive care", "standard of care", "observation"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalPolicy {
    pub unknown: UnknownPolicy,
    pub membership: MembershipPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    MissingList { filter_name: String, list: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::MissingList { filter_name, list } => {
                write!(f, "plan `{filter_name}` references unknown membership list `{list}`")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TraceExtraction {
    Value { extracted: ExtractedValue },
    Failure { failure: ExtractionFailure },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTrace {
    pub index: usize,
    pub request_digest: String,
    pub extraction: TraceExtraction,
    pub outcome: ConditionOutcome,
    /// Set on the entry that ended evaluation early.
    pub short_circuited: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "kebab-case")]
pub enum VerdictFlag {
    UnknownOutcome { index: usize },
    FallbackUsed { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub filter_name: String,
    pub nct_id: String,
    pub keep: bool,
    pub flags: Vec<VerdictFlag>,
    pub condition_trace: Vec<ConditionTrace>,
}

fn numbers_equal(a: &str, b: &str) -> Option<bool> {
    let x = a.trim().parse::<f64>().ok()?;
    let y = b.trim().parse::<f64>().ok()?;
    Some(x == y)
}

fn text_equal(a: &str, b: &str) -> bool {
    numbers_equal(a, b).unwrap_or_else(|| eq_folded(a, b))
}

/// Pure comparison of a validated value against a condition's target.
pub fn compare(
    condition: &Condition,
    value: &Value,
    list: Option<&crate::drugs::DrugList>,
    membership: &MembershipPolicy,
) -> ConditionOutcome {
    use ConditionOutcome::*;
    let yes = |b: bool| if b { Satisfied } else { Unsatisfied };
    let target = condition.target_value.as_ref();
    match (condition.comparison, value) {
        (Comparison::GreaterThan, Value::Number(n)) => match target.and_then(TargetValue::as_number) {
            Some(t) => yes(*n > t),
            None => Unknown,
        },
        (Comparison::LessThan, Value::Number(n)) => match target.and_then(TargetValue::as_number) {
            Some(t) => yes(*n < t),
            None => Unknown,
        },
        (cmp @ (Comparison::EqualTo | Comparison::NotEqual), v) => {
            let eq = match (v, target) {
                (Value::Flag(b), Some(t)) => match t.as_flag() {
                    Some(tb) => *b == tb,
                    None => return Unknown,
                },
                (Value::Phrase(p), Some(t)) => {
                    let got = p.as_deref().unwrap_or("None");
                    text_equal(got, &t.as_text())
                }
                (Value::Number(n), Some(t)) => match t.as_number() {
                    Some(x) => *n == x,
                    None => numbers_equal(&format!("{n}"), &t.as_text()).unwrap_or(false),
                },
                _ => return Unknown,
            };
            yes(if cmp == Comparison::EqualTo { eq } else { !eq })
        }
        (Comparison::PresenceMatch, Value::Phrase(p)) => match p {
            None => Unsatisfied,
            Some(phrase) => match target {
                Some(TargetValue::Text(t)) if !t.trim().is_empty() && TargetValue::Text(t.clone()).as_flag().is_none() => {
                    yes(contains_folded(phrase, t))
                }
                _ => Satisfied,
            },
        },
        (Comparison::InList, Value::Names(names)) => {
            let Some(list) = list else { return Unknown };
            let candidates: Vec<&String> = names
                .iter()
                .filter(|n| !membership.ignore.iter().any(|i| eq_folded(i, n)))
                .collect();
            if candidates.is_empty() {
                return Unsatisfied;
            }
            match membership.mode {
                MembershipMode::All => yes(candidates.iter().all(|n| list.contains(n))),
                MembershipMode::Any => yes(candidates.iter().any(|n| list.contains(n))),
            }
        }
        _ => Unknown,
    }
}

fn check_lists(plan: &FunctionPlan, lists: &MembershipLibrary) -> Result<(), EvalError> {
    for c in &plan.conditions {
        if c.comparison == Comparison::InList {
            let name = c.membership_list_name.as_deref().unwrap_or("");
            if lists.get(name).is_none() {
                return Err(EvalError::MissingList {
                    filter_name: plan.filter_name.clone(),
                    list: name.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// The extraction request a condition issues for a trial.
pub fn condition_request(condition: &Condition, trial: &TrialRecord) -> ExtractionRequest {
    ExtractionRequest::new(
        &condition.llm_instruction,
        &trial.attended_text(&condition.fields_to_attend),
        condition.expected_kind(),
    )
}

fn run_condition<P: Parser + ?Sized>(
    index: usize,
    condition: &Condition,
    trial: &TrialRecord,
    parser: &P,
    lists: &MembershipLibrary,
    policy: &EvalPolicy,
) -> ConditionTrace {
    let request = condition_request(condition, trial);
    let list = condition
        .membership_list_name
        .as_deref()
        .and_then(|n| lists.get(n));
    match extract(&request, parser) {
        Ok(extracted) => {
            let outcome = compare(condition, extracted.value(), list, &policy.membership);
            ConditionTrace {
                index,
                request_digest: extracted.provenance().request_digest.clone(),
                extraction: TraceExtraction::Value { extracted },
                outcome,
                short_circuited: false,
            }
        }
        Err(failure) => ConditionTrace {
            index,
            request_digest: failure.request_digest.clone(),
            extraction: TraceExtraction::Failure { failure },
            outcome: ConditionOutcome::Unknown,
            short_circuited: false,
        },
    }
}

/// Evaluates one condition. A missing membership list is a configuration
/// error; an extraction failure yields [`ConditionOutcome::Unknown`].
pub fn evaluate_condition<P: Parser + ?Sized>(
    condition: &Condition,
    trial: &TrialRecord,
    parser: &P,
    lists: &MembershipLibrary,
    policy: &EvalPolicy,
) -> Result<ConditionTrace, EvalError> {
    if condition.comparison == Comparison::InList {
        let name = condition.membership_list_name.as_deref().unwrap_or("");
        if lists.get(name).is_none() {
            return Err(EvalError::MissingList {
                filter_name: String::new(),
                list: name.to_string(),
            });
        }
    }
    Ok(run_condition(0, condition, trial, parser, lists, policy))
}

fn keep_for(action: UnknownAction) -> bool {
    action == UnknownAction::Keep
}

/// Evaluates a validated plan.
///
/// `default`: keep iff the single condition is satisfied. `sequential`: every
/// condition but the last is a guard; the first unsatisfied guard keeps the
/// trial and stops evaluation (the rule does not apply). When every guard
/// holds, the last condition decides. Unknown outcomes follow
/// [`UnknownPolicy`] and are flagged.
pub fn evaluate_plan<P: Parser + ?Sized>(
    plan: &FunctionPlan,
    trial: &TrialRecord,
    parser: &P,
    lists: &MembershipLibrary,
    policy: &EvalPolicy,
) -> Result<RuleVerdict, EvalError> {
    check_lists(plan, lists)?;
    let mut trace = Vec::with_capacity(plan.conditions.len());
    let mut flags = Vec::new();
    let last = plan.conditions.len() - 1;
    let mut keep = false;
    for (i, condition) in plan.conditions.iter().enumerate() {
        let mut entry = run_condition(i, condition, trial, parser, lists, policy);
        if let TraceExtraction::Value { extracted } = &entry.extraction {
            if extracted.provenance().fallback {
                flags.push(VerdictFlag::FallbackUsed { index: i });
            }
        }
        let outcome = entry.outcome;
        if outcome == ConditionOutcome::Unknown {
            flags.push(VerdictFlag::UnknownOutcome { index: i });
        }
        let is_guard = plan.logical_operator == LogicalOperator::Sequential && i < last;
        if is_guard {
            let stop = match outcome {
                ConditionOutcome::Satisfied => None,
                ConditionOutcome::Unsatisfied => Some(true),
                ConditionOutcome::Unknown => Some(keep_for(policy.unknown.sequential_guard)),
            };
            if let Some(k) = stop {
                entry.short_circuited = i < last;
                trace.push(entry);
                keep = k;
                break;
            }
            trace.push(entry);
        } else {
            let unknown_action = match plan.logical_operator {
                LogicalOperator::Default => policy.unknown.default_plan,
                LogicalOperator::Sequential => policy.unknown.sequential_final,
            };
            keep = match outcome {
                ConditionOutcome::Satisfied => true,
                ConditionOutcome::Unsatisfied => false,
                ConditionOutcome::Unknown => keep_for(unknown_action),
            };
            trace.push(entry);
        }
    }
    Ok(RuleVerdict {
        filter_name: plan.filter_name.clone(),
        nct_id: trial.nct_id.clone(),
        keep,
        flags,
        condition_trace: trace,
    })
}

impl core::error::Error for EvalError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drugs::{DrugLibrary, ImportDocument, ImportEntry};
    use crate::extract::{ParserError, ReferenceParser};
    use crate::plan::validate_plan;
    use alloc::vec;
    use serde_json::json;

    fn phase_enrollment_plan() -> FunctionPlan {
        validate_plan(&json!({
            "filter_name": "exclude_phase_iii_fewer_than_100_enrollment",
            "logical_operator": "sequential",
            "conditions": [
                {"fields_to_attend": ["Phase"],
                 "llm_instruction": "Check if the trial is in Phase III. Return 'Yes' if it is, otherwise return 'No'.",
                 "comparison": "equal_to", "target_value": "Yes"},
                {"fields_to_attend": ["Enrollment"],
                 "llm_instruction": "Extract the number of enrolled patients. Return a number only.",
                 "comparison": "greater_than", "target_value": 100}
            ]
        }))
        .unwrap()
    }

    fn trial(phase: &str, enrollment: Option<u64>) -> TrialRecord {
        TrialRecord {
            nct_id: "NCT00000001".into(),
            phases: vec![phase.into()],
            enrollment,
            ..Default::default()
        }
    }

    #[test]
    fn guard_unsatisfied_short_circuits() {
        let v = evaluate_plan(
            &phase_enrollment_plan(),
            &trial("PHASE2", Some(40)),
            &ReferenceParser,
            &MembershipLibrary::new(),
            &EvalPolicy::default(),
        )
        .unwrap();
        assert!(v.keep);
        assert_eq!(v.condition_trace.len(), 1);
        assert!(v.condition_trace[0].short_circuited);
    }

    #[test]
    fn phase3_large_kept_small_dropped() {
        let p = phase_enrollment_plan();
        let lists = MembershipLibrary::new();
        let pol = EvalPolicy::default();
        let big = evaluate_plan(&p, &trial("PHASE3", Some(738)), &ReferenceParser, &lists, &pol).unwrap();
        assert!(big.keep);
        assert_eq!(big.condition_trace.len(), 2);
        let small = evaluate_plan(&p, &trial("PHASE3", Some(84)), &ReferenceParser, &lists, &pol).unwrap();
        assert!(!small.keep);
        assert!(small.condition_trace.iter().all(|t| !t.short_circuited));
    }

    #[test]
    fn unknown_final_drops_with_flag() {
        let v = evaluate_plan(
            &phase_enrollment_plan(),
            &trial("PHASE3", None),
            &ReferenceParser,
            &MembershipLibrary::new(),
            &EvalPolicy::default(),
        )
        .unwrap();
        assert!(!v.keep);
        assert_eq!(v.flags, vec![VerdictFlag::UnknownOutcome { index: 1 }]);
    }

    #[test]
    fn unknown_guard_keeps_with_flag() {
        let mut t = trial("PHASE3", Some(10));
        t.phases.clear();
        let v = evaluate_plan(
            &phase_enrollment_plan(),
            &t,
            &ReferenceParser,
            &MembershipLibrary::new(),
            &EvalPolicy::default(),
        )
        .unwrap();
        assert!(v.keep);
        assert_eq!(v.flags, vec![VerdictFlag::UnknownOutcome { index: 0 }]);
        assert!(v.condition_trace[0].short_circuited);
    }

    fn condition(comparison: &str, target: serde_json::Value) -> Condition {
        let mut c = json!({
            "fields_to_attend": ["Title"],
            "llm_instruction": "q",
            "comparison": comparison,
        });
        if !target.is_null() {
            c["target_value"] = target;
        }
        let plan = validate_plan(&json!({
            "filter_name": "f", "logical_operator": "default", "conditions": [c]
        }))
        .unwrap();
        plan.conditions.into_iter().next().unwrap()
    }

    #[test]
    fn equality_comparisons() {
        let m = MembershipPolicy::default();
        let c = condition("equal_to", json!("Yes"));
        assert_eq!(compare(&c, &Value::Flag(false), None, &m), ConditionOutcome::Unsatisfied);
        assert_eq!(compare(&c, &Value::Flag(true), None, &m), ConditionOutcome::Satisfied);
        let c = condition("not_equal", json!(true));
        assert_eq!(compare(&c, &Value::Flag(true), None, &m), ConditionOutcome::Unsatisfied);
        let c = condition("equal_to", json!("RANDOMIZED"));
        assert_eq!(
            compare(&c, &Value::Phrase(Some(" randomized ".into())), None, &m),
            ConditionOutcome::Satisfied
        );
        assert_eq!(compare(&c, &Value::Phrase(None), None, &m), ConditionOutcome::Unsatisfied);
        let c = condition("equal_to", json!("100"));
        assert_eq!(
            compare(&c, &Value::Phrase(Some("100.0".into())), None, &m),
            ConditionOutcome::Satisfied
        );
    }

    #[test]
    fn presence_match_with_and_without_target() {
        let m = MembershipPolicy::default();
        let c = condition("presence_match", serde_json::Value::Null);
        assert_eq!(compare(&c, &Value::Phrase(Some("PFS".into())), None, &m), ConditionOutcome::Satisfied);
        assert_eq!(compare(&c, &Value::Phrase(None), None, &m), ConditionOutcome::Unsatisfied);
        let c = condition("presence_match", json!("HER2"));
        assert_eq!(
            compare(&c, &Value::Phrase(Some("her2-positive".into())), None, &m),
            ConditionOutcome::Satisfied
        );
        assert_eq!(
            compare(&c, &Value::Phrase(Some("PD-L1 CPS>=1".into())), None, &m),
            ConditionOutcome::Unsatisfied
        );
    }

    fn gastric_lists() -> MembershipLibrary {
        let mut lib = DrugLibrary::new();
        lib.import(ImportDocument {
            disease_key: "gastric cancer".into(),
            entries: ["trastuzumab", "pembrolizumab", "nivolumab"]
                .iter()
                .map(|n| ImportEntry {
                    display_name: n.to_string(),
                    generic_name: n.to_string(),
                    brand_names: vec![],
                    off_label: false,
                })
                .collect(),
            source: "t".into(),
            retrieved_at: String::new(),
            version: None,
        });
        let mut lists = MembershipLibrary::new();
        lists.insert("FDA_approved_drugs_gastric", lib.export("gastric cancer").unwrap());
        lists
    }

    #[test]
    fn in_list_all_mode() {
        let lists = gastric_lists();
        let list = lists.get("FDA_approved_drugs_gastric");
        let mut c = condition("presence_match", serde_json::Value::Null);
        c.comparison = Comparison::InList;
        c.membership_list_name = Some("FDA_approved_drugs_gastric".into());
        let all = MembershipPolicy::default();
        assert_eq!(
            compare(&c, &Value::Names(vec!["flx475".into()]), list, &all),
            ConditionOutcome::Unsatisfied
        );
        assert_eq!(
            compare(&c, &Value::Names(vec!["Pembrolizumab".into(), "placebo".into()]), list, &all),
            ConditionOutcome::Satisfied
        );
        assert_eq!(
            compare(&c, &Value::Names(vec!["pembrolizumab".into(), "flx475".into()]), list, &all),
            ConditionOutcome::Unsatisfied
        );
        assert_eq!(compare(&c, &Value::Names(vec![]), list, &all), ConditionOutcome::Unsatisfied);
        let any = MembershipPolicy { mode: MembershipMode::Any, ..Default::default() };
        assert_eq!(
            compare(&c, &Value::Names(vec!["pembrolizumab".into(), "flx475".into()]), list, &any),
            ConditionOutcome::Satisfied
        );
    }

    #[test]
    fn missing_list_is_configuration_error() {
        let plan = validate_plan(&json!({
            "filter_name": "fda_approved_drugs_only",
            "logical_operator": "default",
            "conditions": [{"fields_to_attend": ["Interventions"], "llm_instruction": "x",
                            "comparison": "in_list", "membership_list_name": "nope"}]
        }))
        .unwrap();
        struct Never;
        impl Parser for Never {
            fn id(&self) -> &str {
                "never"
            }
            fn parse(&self, _: &ExtractionRequest) -> Result<String, ParserError> {
                panic!("configuration errors precede extraction")
            }
        }
        let err = evaluate_plan(&plan, &trial("PHASE3", None), &Never, &gastric_lists(), &EvalPolicy::default())
            .unwrap_err();
        assert!(matches!(err, EvalError::MissingList { ref list, .. } if list == "nope"));
        assert!(evaluate_condition(&plan.conditions[0], &trial("PHASE3", None), &Never, &gastric_lists(), &EvalPolicy::default()).is_err());
    }

    #[test]
    fn in_list_over_interventions() {
        let plan = validate_plan(&json!({
            "filter_name": "fda_approved_drugs_only",
            "logical_operator": "default",
            "conditions": [{"fields_to_attend": ["Interventions"], "llm_instruction": "Extract drug names.",
                            "comparison": "in_list", "membership_list_name": "FDA_approved_drugs_gastric"}]
        }))
        .unwrap();
        let mut t = trial("PHASE2", None);
        t.interventions = vec![crate::trial::Intervention { kind: "DRUG".into(), name: "FLX475".into() }];
        let v = evaluate_plan(&plan, &t, &ReferenceParser, &gastric_lists(), &EvalPolicy::default()).unwrap();
        assert!(!v.keep);
        t.interventions[0].name = "Pembrolizumab".into();
        let v = evaluate_plan(&plan, &t, &ReferenceParser, &gastric_lists(), &EvalPolicy::default()).unwrap();
        assert!(v.keep);
    }
}
