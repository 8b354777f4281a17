//! Function plans: the executable form of a selection rule.
//!
//! Plans arrive as JSON with a fixed key set and are checked by
//! [`validate_plan`], which reports every violation with a JSON pointer.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::extract::ExpectedKind;
use crate::trial::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicalOperator {
    /// Exactly one condition; `"and"` is accepted as an alias on input.
    Default,
    /// Leading conditions are guards; the last one decides.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    GreaterThan,
    LessThan,
    EqualTo,
    NotEqual,
    PresenceMatch,
    InList,
}

impl Comparison {
    pub const ALL: [Comparison; 6] = [
        Comparison::GreaterThan,
        Comparison::LessThan,
        Comparison::EqualTo,
        Comparison::NotEqual,
        Comparison::PresenceMatch,
        Comparison::InList,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::GreaterThan => "greater_than",
            Comparison::LessThan => "less_than",
            Comparison::EqualTo => "equal_to",
            Comparison::NotEqual => "not_equal",
            Comparison::PresenceMatch => "presence_match",
            Comparison::InList => "in_list",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Comparison::ALL.iter().copied().find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl TargetValue {
    /// `true`/`false` or the strings yes/no/true/false.
    pub fn as_flag(&self) -> Option<bool> {
        match self {
            TargetValue::Bool(b) => Some(*b),
            TargetValue::Number(_) => None,
            TargetValue::Text(t) => {
                let t = t.trim();
                if t.eq_ignore_ascii_case("yes") || t.eq_ignore_ascii_case("true") {
                    Some(true)
                } else if t.eq_ignore_ascii_case("no") || t.eq_ignore_ascii_case("false") {
                    Some(false)
                } else {
                    None
                }
            }
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            TargetValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_text(&self) -> String {
        match self {
            TargetValue::Bool(b) => if *b { "Yes" } else { "No" }.to_string(),
            TargetValue::Number(n) => format!("{n}"),
            TargetValue::Text(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub fields_to_attend: Vec<Field>,
    pub llm_instruction: String,
    pub comparison: Comparison,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_value: Option<TargetValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub membership_list_name: Option<String>,
}

impl Condition {
    /// Extraction kind implied by the comparison and target.
    pub fn expected_kind(&self) -> ExpectedKind {
        match self.comparison {
            Comparison::GreaterThan | Comparison::LessThan => ExpectedKind::Number,
            Comparison::EqualTo | Comparison::NotEqual => {
                if self.target_value.as_ref().and_then(TargetValue::as_flag).is_some() {
                    ExpectedKind::BooleanYesNo
                } else {
                    ExpectedKind::PhraseOrNone
                }
            }
            Comparison::PresenceMatch => ExpectedKind::PhraseOrNone,
            Comparison::InList => ExpectedKind::NameList,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionPlan {
    pub filter_name: String,
    pub logical_operator: LogicalOperator,
    pub conditions: Vec<Condition>,
}

/// One violated schema invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// JSON pointer into the offending document.
    pub pointer: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{at}: {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSchemaError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for PlanSchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, pointer: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            pointer: pointer.to_owned(),
            message: message.into(),
        });
    }

    fn unknown_keys(&mut self, obj: &Map<String, Json>, allowed: &[&str], base: &str) {
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                self.push(&format!("{base}/{}", escape(key)), "unknown field");
            }
        }
    }
}

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

pub fn is_snake_case(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && !s.ends_with('_')
        && !s.contains("__")
}

const PLAN_KEYS: &[&str] = &["filter_name", "logical_operator", "conditions"];
const CONDITION_KEYS: &[&str] = &[
    "fields_to_attend",
    "llm_instruction",
    "comparison",
    "target_value",
    "membership_list_name",
];

fn check_condition(c: &mut Checker, raw: &Json, base: &str) -> Option<Condition> {
    let Some(obj) = raw.as_object() else {
        c.push(base, "condition must be an object");
        return None;
    };
    let before = c.violations.len();
    c.unknown_keys(obj, CONDITION_KEYS, base);

    let mut fields = Vec::new();
    match obj.get("fields_to_attend") {
        Some(Json::Array(items)) if !items.is_empty() => {
            for (i, item) in items.iter().enumerate() {
                let p = format!("{base}/fields_to_attend/{i}");
                match item.as_str().map(str::parse::<Field>) {
                    Some(Ok(f)) => fields.push(f),
                    Some(Err(e)) => c.push(&p, e),
                    None => c.push(&p, "field name must be a string"),
                }
            }
        }
        Some(Json::Array(_)) => c.push(&format!("{base}/fields_to_attend"), "must not be empty"),
        Some(_) => c.push(&format!("{base}/fields_to_attend"), "must be an array of field names"),
        None => c.push(&format!("{base}/fields_to_attend"), "required"),
    }

    let instruction = match obj.get("llm_instruction") {
        Some(Json::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Json::String(_)) => {
            c.push(&format!("{base}/llm_instruction"), "must not be empty");
            String::new()
        }
        Some(_) => {
            c.push(&format!("{base}/llm_instruction"), "must be a string");
            String::new()
        }
        None => {
            c.push(&format!("{base}/llm_instruction"), "required");
            String::new()
        }
    };

    let comparison = match obj.get("comparison") {
        Some(Json::String(s)) => {
            let parsed = Comparison::parse(s);
            if parsed.is_none() {
                c.push(
                    &format!("{base}/comparison"),
                    format!("unknown comparison `{s}`"),
                );
            }
            parsed
        }
        Some(_) => {
            c.push(&format!("{base}/comparison"), "must be a string");
            None
        }
        None => {
            c.push(&format!("{base}/comparison"), "required");
            None
        }
    };

    let target_ptr = format!("{base}/target_value");
    let target = match obj.get("target_value") {
        None | Some(Json::Null) => None,
        Some(Json::Bool(b)) => Some(TargetValue::Bool(*b)),
        Some(Json::Number(n)) => match n.as_f64() {
            Some(x) if x.is_finite() => Some(TargetValue::Number(x)),
            _ => {
                c.push(&target_ptr, "number out of range");
                None
            }
        },
        Some(Json::String(s)) => Some(TargetValue::Text(s.clone())),
        Some(_) => {
            c.push(&target_ptr, "must be a string, number or boolean");
            None
        }
    };

    let list_ptr = format!("{base}/membership_list_name");
    let list_name = match obj.get("membership_list_name") {
        None | Some(Json::Null) => None,
        Some(Json::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Some(_) => {
            c.push(&list_ptr, "must be a non-empty string");
            None
        }
    };

    if let Some(cmp) = comparison {
        match cmp {
            Comparison::GreaterThan | Comparison::LessThan => {
                if !matches!(target, Some(TargetValue::Number(_))) {
                    c.push(&target_ptr, "numeric comparison requires a numeric target_value");
                }
            }
            Comparison::EqualTo | Comparison::NotEqual => {
                if target.is_none() {
                    c.push(&target_ptr, "required for equal_to / not_equal");
                }
            }
            Comparison::PresenceMatch => {}
            Comparison::InList => {
                if list_name.is_none()
                    && obj.get("membership_list_name").is_none_or(Json::is_null)
                {
                    c.push(&list_ptr, "required for in_list");
                }
            }
        }
        if cmp != Comparison::InList
            && obj.get("membership_list_name").is_some_and(|v| !v.is_null())
        {
            c.push(&list_ptr, "only allowed with in_list");
        }
    }

    if c.violations.len() > before {
        return None;
    }
    let comparison = comparison?;
    Some(Condition {
        fields_to_attend: fields,
        llm_instruction: instruction,
        comparison,
        // in_list ignores any target
        target_value: if comparison == Comparison::InList { None } else { target },
        membership_list_name: list_name,
    })
}

fn check_plan(c: &mut Checker, raw: &Json, base: &str) -> Option<FunctionPlan> {
    let Some(obj) = raw.as_object() else {
        c.push(base, "plan must be a JSON object");
        return None;
    };
    let before = c.violations.len();
    c.unknown_keys(obj, PLAN_KEYS, base);

    let name = match obj.get("filter_name") {
        Some(Json::String(s)) if is_snake_case(s) => s.clone(),
        Some(Json::String(s)) => {
            c.push(&format!("{base}/filter_name"), format!("`{s}` is not snake_case"));
            String::new()
        }
        Some(_) => {
            c.push(&format!("{base}/filter_name"), "must be a string");
            String::new()
        }
        None => {
            c.push(&format!("{base}/filter_name"), "required");
            String::new()
        }
    };

    let op = match obj.get("logical_operator").map(|v| v.as_str()) {
        Some(Some("default" | "and")) | None => Some(LogicalOperator::Default),
        Some(Some("sequential")) => Some(LogicalOperator::Sequential),
        Some(Some(other)) => {
            c.push(
                &format!("{base}/logical_operator"),
                format!("unknown logical operator `{other}`"),
            );
            None
        }
        Some(None) => {
            c.push(&format!("{base}/logical_operator"), "must be a string");
            None
        }
    };

    let mut conditions = Vec::new();
    match obj.get("conditions") {
        Some(Json::Array(items)) if !items.is_empty() => {
            for (i, item) in items.iter().enumerate() {
                if let Some(cond) = check_condition(c, item, &format!("{base}/conditions/{i}")) {
                    conditions.push(cond);
                }
            }
            if op == Some(LogicalOperator::Default) && items.len() != 1 {
                c.push(
                    &format!("{base}/conditions"),
                    format!(
                        "logical_operator `default` takes exactly one condition, found {}",
                        items.len()
                    ),
                );
            }
        }
        Some(Json::Array(_)) => c.push(&format!("{base}/conditions"), "must not be empty"),
        Some(_) => c.push(&format!("{base}/conditions"), "must be an array"),
        None => c.push(&format!("{base}/conditions"), "required"),
    }

    if c.violations.len() > before {
        return None;
    }
    Some(FunctionPlan {
        filter_name: name,
        logical_operator: op?,
        conditions,
    })
}

/// Checks a plan document against the plan schema.
pub fn validate_plan(raw: &Json) -> Result<FunctionPlan, PlanSchemaError> {
    let mut c = Checker { violations: Vec::new() };
    match check_plan(&mut c, raw, "") {
        Some(plan) if c.violations.is_empty() => Ok(plan),
        _ => Err(PlanSchemaError { violations: c.violations }),
    }
}

/// An ordered, approved-for-execution collection of plans together with the
/// parsed condition and treatment strings and the membership-list bindings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    pub plans: Vec<FunctionPlan>,
    /// Membership list name -> disease key in the drug library.
    #[serde(default, skip_serializing_if = "alloc::collections::BTreeMap::is_empty")]
    pub membership_lists: alloc::collections::BTreeMap<String, String>,
}

const PLAN_SET_KEYS: &[&str] = &["condition", "treatment", "plans", "membership_lists"];

/// Validates a plan-set document: every plan, unique filter names, and the
/// optional `condition` / `treatment` / `membership_lists` entries.
///
/// A bare JSON array of plans is accepted as a plan set without metadata.
pub fn validate_plan_set(raw: &Json) -> Result<PlanSet, PlanSchemaError> {
    let mut c = Checker { violations: Vec::new() };
    let mut set = PlanSet::default();
    let (items, base) = match raw {
        Json::Array(items) => (items.as_slice(), String::new()),
        Json::Object(obj) => {
            c.unknown_keys(obj, PLAN_SET_KEYS, "");
            for key in ["condition", "treatment"] {
                match obj.get(key) {
                    None | Some(Json::Null) => {}
                    Some(Json::String(s)) => {
                        if key == "condition" {
                            set.condition = Some(s.clone());
                        } else {
                            set.treatment = Some(s.clone());
                        }
                    }
                    Some(_) => c.push(&format!("/{key}"), "must be a string"),
                }
            }
            match obj.get("membership_lists") {
                None | Some(Json::Null) => {}
                Some(Json::Object(m)) => {
                    for (name, key) in m {
                        match key.as_str() {
                            Some(k) => {
                                set.membership_lists.insert(name.clone(), k.to_string());
                            }
                            None => c.push(
                                &format!("/membership_lists/{}", escape(name)),
                                "must be a disease key string",
                            ),
                        }
                    }
                }
                Some(_) => c.push("/membership_lists", "must be an object"),
            }
            match obj.get("plans") {
                Some(Json::Array(items)) => (items.as_slice(), "/plans".to_string()),
                Some(_) => {
                    c.push("/plans", "must be an array");
                    (&[][..], String::new())
                }
                None => {
                    c.push("/plans", "required");
                    (&[][..], String::new())
                }
            }
        }
        _ => {
            c.push("", "plan set must be an object or an array");
            (&[][..], String::new())
        }
    };
    for (i, item) in items.iter().enumerate() {
        let ptr = format!("{base}/{i}");
        if let Some(plan) = check_plan(&mut c, item, &ptr) {
            if set.plans.iter().any(|p| p.filter_name == plan.filter_name) {
                c.push(
                    &format!("{ptr}/filter_name"),
                    format!("duplicate filter_name `{}`", plan.filter_name),
                );
            }
            set.plans.push(plan);
        }
    }
    if c.violations.is_empty() {
        Ok(set)
    } else {
        Err(PlanSchemaError { violations: c.violations })
    }
}

impl core::error::Error for PlanSchemaError {}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn phase_enrollment_plan() -> Json {
        json!({
            "filter_name": "exclude_phase_iii_fewer_than_100_enrollment",
            "logical_operator": "sequential",
            "conditions": [
                {
                    "fields_to_attend": ["Phase"],
                    "llm_instruction": "Check if the trial is in Phase III. Return `Yes' if it is, otherwise return `No'. Do not explain your answer.",
                    "comparison": "equal_to",
                    "target_value": "Yes"
                },
                {
                    "fields_to_attend": ["Enrollment"],
                    "llm_instruction": "Extract the number of enrolled patients. Return a number only. Do not include units or explanations.",
                    "comparison": "greater_than",
                    "target_value": 100
                }
            ]
        })
    }

    #[test]
    fn sequential_plan_validates() {
        let plan = validate_plan(&phase_enrollment_plan()).unwrap();
        assert_eq!(plan.logical_operator, LogicalOperator::Sequential);
        assert_eq!(plan.conditions.len(), 2);
        assert_eq!(plan.conditions[0].expected_kind(), ExpectedKind::BooleanYesNo);
        assert_eq!(plan.conditions[1].expected_kind(), ExpectedKind::Number);
    }

    #[test]
    fn default_with_two_conditions_is_rejected() {
        let mut raw = phase_enrollment_plan();
        raw["logical_operator"] = json!("default");
        let err = validate_plan(&raw).unwrap_err();
        assert_eq!(err.violations.len(), 1);
        assert_eq!(err.violations[0].pointer, "/conditions");
    }

    #[test]
    fn in_list_needs_list_name() {
        let raw = json!({
            "filter_name": "fda_approved_drugs_only",
            "logical_operator": "default",
            "conditions": [{
                "fields_to_attend": ["Interventions"],
                "llm_instruction": "Extract and return the names of drugs under investigation as a Python list.",
                "comparison": "in_list"
            }]
        });
        let err = validate_plan(&raw).unwrap_err();
        assert_eq!(err.violations[0].pointer, "/conditions/0/membership_list_name");
    }

    #[test]
    fn in_list_plan_validates() {
        let raw = json!({
            "filter_name": "fda_approved_drugs_only",
            "logical_operator": "default",
            "conditions": [{
                "fields_to_attend": ["Interventions"],
                "llm_instruction": "Extract and return the names of drugs under investigation as a Python list.",
                "comparison": "in_list",
                "membership_list_name": "FDA_approved_drugs_gastric"
            }]
        });
        let plan = validate_plan(&raw).unwrap();
        assert_eq!(
            plan.conditions[0].membership_list_name.as_deref(),
            Some("FDA_approved_drugs_gastric")
        );
        assert_eq!(plan.conditions[0].expected_kind(), ExpectedKind::NameList);
        // serialises back to the same document
        assert_eq!(serde_json::to_value(&plan).unwrap(), raw);
    }

    #[test]
    fn every_violation_is_reported_with_a_pointer() {
        let raw = json!({
            "filter_name": "Bad Name",
            "logical_operator": "sequential",
            "extra": 1,
            "conditions": [{
                "fields_to_attend": ["Status"],
                "llm_instruction": "",
                "comparison": "greater_than",
                "target_value": "100"
            }]
        });
        let err = validate_plan(&raw).unwrap_err();
        let pointers: Vec<&str> = err.violations.iter().map(|v| v.pointer.as_str()).collect();
        assert!(pointers.contains(&"/extra"));
        assert!(pointers.contains(&"/filter_name"));
        assert!(pointers.contains(&"/conditions/0/fields_to_attend/0"));
        assert!(pointers.contains(&"/conditions/0/llm_instruction"));
        assert!(pointers.contains(&"/conditions/0/target_value"));
    }

    #[test]
    fn and_is_alias_for_default() {
        let mut raw = phase_enrollment_plan();
        raw["logical_operator"] = json!("and");
        raw["conditions"].as_array_mut().unwrap().pop();
        assert_eq!(validate_plan(&raw).unwrap().logical_operator, LogicalOperator::Default);
    }

    #[test]
    fn plan_set_rejects_duplicate_names() {
        let set = json!({"condition": "gastric cancer", "plans": [phase_enrollment_plan(), phase_enrollment_plan()]});
        let err = validate_plan_set(&set).unwrap_err();
        assert_eq!(err.violations[0].pointer, "/plans/1/filter_name");
        let ok = validate_plan_set(&json!([phase_enrollment_plan()])).unwrap();
        assert_eq!(ok.plans.len(), 1);
    }

    #[test]
    fn snake_case() {
        assert!(is_snake_case("fda_approved_drugs_only"));
        assert!(!is_snake_case("FDA_approved"));
        assert!(!is_snake_case("_x"));
        assert!(!is_snake_case("a__b"));
    }
}
