//! Pre-filter plus ordered plan application with PRISMA accounting and an
//! append-only audit trail.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use evsynth_core::digest::{digest_bytes, digest_parts};
use evsynth_core::eval::{ConditionTrace, EvalError, TraceExtraction, VerdictFlag};
use evsynth_core::extract::{extract, ExpectedKind, ExtractionRequest, Parser, ParserError, Value};
use evsynth_core::plan::Comparison;
use evsynth_core::trial::{prefilter, PrefilterBucket, PrefilterPolicy};
use evsynth_core::{evaluate_plan, ConditionOutcome, Corpus, EvalPolicy, Field, MembershipLibrary, PlanSet, TrialRecord};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: String,
    pub text: String,
    pub kind: RuleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStatus {
    #[default]
    Draft,
    Approved,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub status: RuleStatus,
    pub revision: u64,
}

impl RuleSet {
    pub fn draft(rules: Vec<Rule>) -> Self {
        RuleSet { rules, status: RuleStatus::Draft, revision: 1 }
    }

    /// Replaces the rules; the set returns to draft under a new revision.
    pub fn edit(&mut self, rules: Vec<Rule>) {
        self.rules = rules;
        self.status = RuleStatus::Draft;
        self.revision += 1;
    }

    pub fn approve(&mut self) {
        self.status = RuleStatus::Approved;
    }

    pub fn is_approved(&self) -> bool {
        self.status == RuleStatus::Approved
    }
}

/// Kind of prose rule, from its leading verb.
pub fn rule_kind(text: &str) -> RuleKind {
    let t = text.trim_start().to_ascii_lowercase();
    if t.starts_with("exclude") || t.starts_with("remove") {
        RuleKind::Exclude
    } else {
        RuleKind::Include
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrismaStage {
    pub label: String,
    pub remaining: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrismaFlow {
    pub initial_count: usize,
    pub stages: Vec<PrismaStage>,
    pub final_count: usize,
}

impl PrismaFlow {
    /// Conservation across stages.
    pub fn is_consistent(&self) -> bool {
        let mut prev = self.initial_count;
        for s in &self.stages {
            if s.remaining + s.excluded != prev {
                return false;
            }
            prev = s.remaining;
        }
        prev == self.final_count
    }

    pub fn render_table(&self) -> String {
        let width = self.stages.iter().map(|s| s.label.len()).max().unwrap_or(0).max(14);
        let mut out = format!("{:<width$}  {:>9}  {:>8}\n", "stage", "remaining", "excluded");
        out.push_str(&format!("{:<width$}  {:>9}  {:>8}\n", "records", self.initial_count, ""));
        for s in &self.stages {
            out.push_str(&format!("{:<width$}  {:>9}  {:>8}\n", s.label, s.remaining, s.excluded));
        }
        out.push_str(&format!("{:<width$}  {:>9}  {:>8}\n", "selected", self.final_count, ""));
        out
    }
}

pub const PREFILTER_STAGE: &str = "prefilter";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditKind {
    RuleCreated,
    RuleEdited,
    PlanValidated,
    Extraction,
    Verdict,
    StageSummary,
    Weights,
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub run_id: String,
    pub seq: u64,
    pub kind: AuditKind,
    pub payload: serde_json::Value,
    pub timestamp: String,
}

pub trait Clock: Send + Sync {
    /// RFC 3339 timestamp.
    fn now(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

#[derive(Debug, Clone)]
pub struct FixedClock(pub String);

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

/// Sequence numbers are assigned here, in call order.
pub struct AuditLog {
    run_id: String,
    clock: Arc<dyn Clock>,
    base_seq: u64,
    events: Vec<AuditEvent>,
}

impl AuditLog {
    pub fn new(run_id: &str, clock: Arc<dyn Clock>) -> Self {
        Self::after(run_id, clock, 0)
    }

    /// Continues a persisted log whose last sequence number is `last_seq`;
    /// only new events are held.
    pub fn after(run_id: &str, clock: Arc<dyn Clock>, last_seq: u64) -> Self {
        AuditLog { run_id: run_id.to_string(), clock, base_seq: last_seq, events: Vec::new() }
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(self.base_seq, |e| e.seq)
    }

    pub fn push(&mut self, kind: AuditKind, payload: serde_json::Value) -> &AuditEvent {
        let seq = self.last_seq() + 1;
        self.events.push(AuditEvent {
            run_id: self.run_id.clone(),
            seq,
            kind,
            payload,
            timestamp: self.clock.now(),
        });
        self.events.last().expect("just pushed")
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<AuditEvent> {
        self.events
    }
}

pub fn write_jsonl<W: Write>(mut out: W, events: &[AuditEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<AuditEvent>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok(events)
}

/// Digest of the audit content with timestamps blanked.
pub fn audit_digest(events: &[AuditEvent]) -> String {
    let mut buf = Vec::new();
    for e in events {
        let mut e = e.clone();
        e.timestamp.clear();
        serde_json::to_writer(&mut buf, &e).expect("audit events serialize");
        buf.push(b'\n');
    }
    digest_bytes(&buf)
}

/// Per-condition audit record. Raw parser output is left out; the request
/// digest keys it in the replay fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub index: usize,
    pub request_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parser_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    pub outcome: ConditionOutcome,
    pub short_circuited: bool,
}

impl From<&ConditionTrace> for ConditionRecord {
    fn from(t: &ConditionTrace) -> Self {
        let (parser_id, value, failure, fallback) = match &t.extraction {
            TraceExtraction::Value { extracted } => (
                Some(extracted.provenance().parser_id.clone()),
                Some(extracted.value().clone()),
                None,
                extracted.provenance().fallback,
            ),
            TraceExtraction::Failure { failure } => (None, None, Some(failure.to_string()), false),
        };
        ConditionRecord {
            index: t.index,
            request_digest: t.request_digest.clone(),
            parser_id,
            value,
            failure,
            fallback,
            outcome: t.outcome,
            short_circuited: t.short_circuited,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub stage: String,
    pub nct_id: String,
    pub keep: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<PrefilterBucket>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<VerdictFlag>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionRecord>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("rule set is not approved")]
    NotApproved,
    #[error(transparent)]
    Config(#[from] EvalError),
}

pub struct PipelineInput<'a> {
    pub corpus: &'a Corpus,
    pub plans: &'a PlanSet,
    pub parser: &'a dyn Parser,
    pub lists: &'a MembershipLibrary,
    pub policy: &'a EvalPolicy,
    pub prefilter: &'a PrefilterPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub selected: Corpus,
    pub flow: PrismaFlow,
    pub verdicts: Vec<VerdictRecord>,
}

fn check_lists(plans: &PlanSet, lists: &MembershipLibrary) -> Result<(), EvalError> {
    for plan in &plans.plans {
        for c in &plan.conditions {
            if c.comparison == Comparison::InList {
                let name = c.membership_list_name.as_deref().unwrap_or("");
                if lists.get(name).is_none() {
                    return Err(EvalError::MissingList { filter_name: plan.filter_name.clone(), list: name.into() });
                }
            }
        }
    }
    Ok(())
}

/// Order-preserving parallel map over trials.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    if items.len() < 2 || threads < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("verdict worker panicked")).collect()
    })
}

/// Stage 0 is the pre-filter; stage i applies plan i to the survivors of
/// stage i-1. Extraction failures become flagged verdicts; only
/// configuration errors abort, and they do so before stage 0.
pub fn run_pipeline(input: &PipelineInput<'_>, audit: &mut AuditLog) -> Result<PipelineOutput, PipelineError> {
    check_lists(input.plans, input.lists)?;
    let (mut current, report) = prefilter(input.corpus, input.prefilter);
    let dropped: BTreeMap<&str, PrefilterBucket> = report.dropped.iter().map(|(id, b)| (id.as_str(), *b)).collect();
    let mut verdicts = Vec::new();
    for t in &input.corpus.trials {
        let bucket = dropped.get(t.nct_id.as_str()).copied();
        let v = VerdictRecord {
            stage: PREFILTER_STAGE.into(),
            nct_id: t.nct_id.clone(),
            keep: bucket.is_none(),
            bucket,
            flags: Vec::new(),
            conditions: Vec::new(),
        };
        audit.push(AuditKind::Verdict, serde_json::to_value(&v).expect("verdict serializes"));
        verdicts.push(v);
    }
    let mut stages = vec![PrismaStage {
        label: PREFILTER_STAGE.into(),
        remaining: current.len(),
        excluded: input.corpus.len() - current.len(),
    }];
    audit.push(AuditKind::StageSummary, json!({"stage": PREFILTER_STAGE, "report": report}));

    for plan in &input.plans.plans {
        let results = par_map(&current.trials, |t| evaluate_plan(plan, t, input.parser, input.lists, input.policy));
        let mut kept = Vec::new();
        for (trial, result) in current.trials.iter().zip(results) {
            let verdict = result?;
            let conditions: Vec<ConditionRecord> = verdict.condition_trace.iter().map(ConditionRecord::from).collect();
            for c in &conditions {
                audit.push(
                    AuditKind::Extraction,
                    json!({"stage": plan.filter_name, "nct_id": trial.nct_id, "condition": c}),
                );
            }
            let v = VerdictRecord {
                stage: plan.filter_name.clone(),
                nct_id: trial.nct_id.clone(),
                keep: verdict.keep,
                bucket: None,
                flags: verdict.flags,
                conditions,
            };
            audit.push(AuditKind::Verdict, serde_json::to_value(&v).expect("verdict serializes"));
            if v.keep {
                kept.push(trial.clone());
            }
            verdicts.push(v);
        }
        let excluded = current.len() - kept.len();
        current = current.with_trials(kept);
        stages.push(PrismaStage { label: plan.filter_name.clone(), remaining: current.len(), excluded });
        audit.push(
            AuditKind::StageSummary,
            json!({"stage": plan.filter_name, "remaining": current.len(), "excluded": excluded}),
        );
    }
    let flow = PrismaFlow { initial_count: input.corpus.len(), stages, final_count: current.len() };
    Ok(PipelineOutput { selected: current, flow, verdicts })
}

/// Recomputes the selected ids from verdict events alone: a trial is
/// selected when it has a keeping verdict at every stage that appears.
pub fn selected_from_audit(events: &[AuditEvent]) -> Result<Vec<String>, serde_json::Error> {
    let mut stages: Vec<String> = Vec::new();
    let mut keeps: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == AuditKind::Verdict) {
        let v: VerdictRecord = serde_json::from_value(e.payload.clone())?;
        if !stages.contains(&v.stage) {
            stages.push(v.stage.clone());
        }
        if v.keep {
            keeps.entry(v.nct_id).or_default().insert(v.stage);
        }
    }
    Ok(keeps
        .into_iter()
        .filter(|(_, s)| stages.iter().all(|st| s.contains(st)))
        .map(|(id, _)| id)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub nct_id: String,
    pub title: String,
    pub interventions: String,
    pub biomarker: String,
    pub condition: String,
    pub phase: String,
    pub enrollment: Option<u64>,
    pub status: String,
    pub summary: String,
    pub overall_survival: String,
    pub progression_free_survival: String,
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "NCT Number",
    "Study Title",
    "Intervention(s)",
    "Target/Biomarker",
    "Indication/Condition",
    "Study Phase",
    "Enrollment Size",
    "Status",
    "Trial Summary",
    "Endpoints: Overall Survival",
    "Endpoints: Progression-Free Survival",
];

pub const BIOMARKER_INSTRUCTION: &str =
    "Extract the biomarker that defines the enrolled population, such as HER2-positive, MSI-H or PD-L1 CPS >= 1. Return a short phrase, or None if no biomarker is required.";

/// The extraction request used for a trial's biomarker column.
pub fn biomarker_request(trial: &TrialRecord) -> ExtractionRequest {
    ExtractionRequest::new(
        BIOMARKER_INSTRUCTION,
        &trial.attended_text(&[Field::Title, Field::Eligibility]),
        ExpectedKind::PhraseOrNone,
    )
}

fn endpoint_text(trial: &TrialRecord, cues: &[&str]) -> String {
    trial
        .primary_outcomes
        .iter()
        .chain(&trial.secondary_outcomes)
        .filter(|o| {
            let m = o.measure.to_ascii_lowercase();
            cues.iter().any(|c| m.contains(c) || m.split(|ch: char| !ch.is_ascii_alphanumeric()).any(|w| w == *c))
        })
        .map(|o| if o.time_frame.is_empty() { o.measure.clone() } else { format!("{} ({})", o.measure, o.time_frame) })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Table-style summaries of selected trials. The biomarker comes from the
/// parser; every other column is read from the record.
pub fn summarize_selected(selected: &Corpus, parser: &dyn Parser) -> Vec<TrialSummary> {
    selected
        .trials
        .iter()
        .map(|t| {
            let req = biomarker_request(t);
            let biomarker = match extract(&req, parser).map(|v| v.value().clone()) {
                Ok(Value::Phrase(Some(p))) => p,
                _ => String::new(),
            };
            TrialSummary {
                nct_id: t.nct_id.clone(),
                title: t.title.clone(),
                interventions: t.interventions.iter().map(|i| i.name.as_str()).collect::<Vec<_>>().join(", "),
                biomarker,
                condition: t.conditions.join(", "),
                phase: t.phases.join(", "),
                enrollment: t.enrollment,
                status: t.status.clone(),
                summary: t.summary.clone(),
                overall_survival: endpoint_text(t, &["overall survival", "os"]),
                progression_free_survival: endpoint_text(t, &["progression-free survival", "progression free survival", "pfs"]),
            }
        })
        .collect()
}

pub fn summaries_csv(summaries: &[TrialSummary]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    for s in summaries {
        let enrollment = s.enrollment.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([
            &s.nct_id,
            &s.title,
            &s.interventions,
            &s.biomarker,
            &s.condition,
            &s.phase,
            &enrollment,
            &s.status,
            &s.summary,
            &s.overall_survival,
            &s.progression_free_survival,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const RULES_PROMPT: &str = include_str!("../assets/prompts/rules.txt");
pub const PLAN_PROMPT: &str = include_str!("../assets/prompts/plan.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationKind {
    Rules,
    Plan,
}

impl GenerationKind {
    pub fn prompt(self) -> &'static str {
        match self {
            GenerationKind::Rules => RULES_PROMPT,
            GenerationKind::Plan => PLAN_PROMPT,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            GenerationKind::Rules => "rules",
            GenerationKind::Plan => "plan",
        }
    }
}

/// Key for recorded generations.
pub fn generation_digest(kind: GenerationKind, input: &str) -> String {
    digest_parts(&["generate-v1", kind.as_str(), kind.prompt(), input.trim()])
}

/// Produces rule lists and plan JSON from prose. Outputs are drafts.
pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, kind: GenerationKind, input: &str) -> Result<String, ParserError>;
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplayGenerator {
    pub version: u32,
    pub entries: BTreeMap<String, String>,
}

impl ReplayGenerator {
    pub fn record(&mut self, kind: GenerationKind, input: &str, output: &str) {
        self.entries.insert(generation_digest(kind, input), output.to_string());
    }
}

impl Generator for ReplayGenerator {
    fn id(&self) -> &str {
        "replay"
    }

    fn generate(&self, kind: GenerationKind, input: &str) -> Result<String, ParserError> {
        let d = generation_digest(kind, input);
        self.entries
            .get(&d)
            .cloned()
            .ok_or_else(|| ParserError::Unavailable(format!("no recorded generation for {d}")))
    }
}

impl Generator for crate::parsers::RemoteParser {
    fn id(&self) -> &str {
        "remote"
    }

    fn generate(&self, kind: GenerationKind, input: &str) -> Result<String, ParserError> {
        let req = ExtractionRequest::new(kind.prompt(), input, ExpectedKind::PhraseOrNone);
        Parser::parse(self, &req)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GenerationError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    #[error("generator returned no rules")]
    NoRules,
    #[error("generated plan is not JSON: {0}")]
    NotJson(String),
}

fn strip_enumerator(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    if let Some(rest) = t.strip_prefix('(') {
        if let Some((label, after)) = rest.split_once(')') {
            if label.len() <= 5 && label.chars().all(|c| c.is_ascii_alphanumeric()) {
                return after.trim();
            }
        }
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(r) = t[digits..].strip_prefix('.').or_else(|| t[digits..].strip_prefix(')')) {
            return r.trim();
        }
    }
    t
}

/// Draft rule set from a research question.
pub fn generate_rules(query: &str, generator: &dyn Generator) -> Result<RuleSet, GenerationError> {
    if query.trim().is_empty() {
        return Err(GenerationError::EmptyQuery);
    }
    let out = generator
        .generate(GenerationKind::Rules, query)
        .map_err(|ParserError::Unavailable(m)| GenerationError::Unavailable(m))?;
    let rules: Vec<Rule> = out
        .lines()
        .map(strip_enumerator)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, text)| Rule { rule_id: format!("r{}", i + 1), text: text.to_string(), kind: rule_kind(text) })
        .collect();
    if rules.is_empty() {
        return Err(GenerationError::NoRules);
    }
    Ok(RuleSet::draft(rules))
}

/// Plan JSON for one rule, before validation.
pub fn generate_plan(rule: &str, generator: &dyn Generator) -> Result<serde_json::Value, GenerationError> {
    if rule.trim().is_empty() {
        return Err(GenerationError::EmptyQuery);
    }
    let out = generator
        .generate(GenerationKind::Plan, rule)
        .map_err(|ParserError::Unavailable(m)| GenerationError::Unavailable(m))?;
    let body = out.trim().trim_start_matches("```json").trim_start_matches("```").trim_end_matches("```");
    serde_json::from_str(body).map_err(|e| GenerationError::NotJson(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use evsynth_core::extract::ReferenceParser;
    use evsynth_core::trial::{Intervention, Outcome};

    fn trial(id: &str, phase: &str, enrollment: u64) -> TrialRecord {
        TrialRecord {
            nct_id: id.into(),
            title: format!("Trial {id}"),
            study_type: "INTERVENTIONAL".into(),
            status: "COMPLETED".into(),
            phases: vec![phase.into()],
            enrollment: Some(enrollment),
            has_results: true,
            interventions: vec![Intervention { kind: "DRUG".into(), name: "olaparib".into() }],
            primary_outcomes: vec![Outcome { measure: "Progression-free survival".into(), ..Default::default() }],
            secondary_outcomes: vec![Outcome { measure: "Overall Survival (OS)".into(), time_frame: "5 years".into(), ..Default::default() }],
            ..Default::default()
        }
    }

    fn corpus() -> Corpus {
        let mut no_phase = trial("NCT4", "PHASE2", 10);
        no_phase.phases.clear();
        Corpus::new(
            vec![trial("NCT3", "PHASE3", 84), trial("NCT1", "PHASE2", 40), trial("NCT2", "PHASE3", 738), no_phase],
            "t",
            "",
        )
    }

    fn plans() -> PlanSet {
        evsynth_core::plan::validate_plan_set(&json!([{
            "filter_name": "exclude_phase_iii_fewer_than_100_enrollment",
            "logical_operator": "sequential",
            "conditions": [
                {"fields_to_attend": ["Phase"], "llm_instruction": "Check if the trial is in Phase III. Return 'Yes' if it is, otherwise return 'No'.",
                 "comparison": "equal_to", "target_value": "Yes"},
                {"fields_to_attend": ["Enrollment"], "llm_instruction": "Extract the number of enrolled patients. Return a number only.",
                 "comparison": "greater_than", "target_value": 100}
            ]
        }]))
        .unwrap()
    }

    fn run(plans: &PlanSet) -> (PipelineOutput, Vec<AuditEvent>) {
        let c = corpus();
        let mut log = AuditLog::new("run-1", Arc::new(FixedClock("2026-01-01T00:00:00Z".into())));
        let out = run_pipeline(
            &PipelineInput {
                corpus: &c,
                plans,
                parser: &ReferenceParser,
                lists: &MembershipLibrary::new(),
                policy: &EvalPolicy::default(),
                prefilter: &PrefilterPolicy::default(),
            },
            &mut log,
        )
        .unwrap();
        (out, log.into_events())
    }

    #[test]
    fn flow_and_audit() {
        let (out, events) = run(&plans());
        assert_eq!(out.selected.ids(), vec!["NCT1", "NCT2"]);
        assert_eq!(out.flow.initial_count, 4);
        assert_eq!(out.flow.stages[0], PrismaStage { label: "prefilter".into(), remaining: 3, excluded: 1 });
        assert_eq!(out.flow.stages[1].excluded, 1);
        assert!(out.flow.is_consistent());
        assert_eq!(selected_from_audit(&events).unwrap(), out.selected.ids());
        assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));
        let short = out.verdicts.iter().find(|v| v.nct_id == "NCT1" && v.stage != "prefilter").unwrap();
        assert!(short.keep);
        assert_eq!(short.conditions.len(), 1);
        assert!(short.conditions[0].short_circuited);
        let table = out.flow.render_table();
        assert!(table.contains("exclude_phase_iii_fewer_than_100_enrollment"));
    }

    #[test]
    fn zero_plans_only_prefilter() {
        let (out, events) = run(&PlanSet::default());
        assert_eq!(out.flow.stages.len(), 1);
        assert_eq!(out.selected.len(), 3);
        assert_eq!(selected_from_audit(&events).unwrap().len(), 3);
    }

    #[test]
    fn deterministic_audit_digest() {
        let (_, a) = run(&plans());
        let (_, mut b) = run(&plans());
        for e in &mut b {
            e.timestamp = "other".into();
        }
        assert_eq!(audit_digest(&a), audit_digest(&b));
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &a).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), a);
    }

    #[test]
    fn missing_list_aborts_before_stage_zero() {
        let set = evsynth_core::plan::validate_plan_set(&json!([{
            "filter_name": "fda_approved_drugs_only", "logical_operator": "default",
            "conditions": [{"fields_to_attend": ["Interventions"], "llm_instruction": "x",
                            "comparison": "in_list", "membership_list_name": "L"}]
        }]))
        .unwrap();
        let c = corpus();
        let mut log = AuditLog::new("r", Arc::new(SystemClock));
        let err = run_pipeline(
            &PipelineInput {
                corpus: &c,
                plans: &set,
                parser: &ReferenceParser,
                lists: &MembershipLibrary::new(),
                policy: &EvalPolicy::default(),
                prefilter: &PrefilterPolicy::default(),
            },
            &mut log,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
        assert!(log.events().is_empty());
    }

    #[test]
    fn summaries() {
        let c = corpus();
        let s = summarize_selected(&c.with_trials(vec![c.trials[1].clone()]), &ReferenceParser);
        assert_eq!(s[0].nct_id, "NCT2");
        assert_eq!(s[0].enrollment, Some(738));
        assert_eq!(s[0].phase, "PHASE3");
        assert_eq!(s[0].overall_survival, "Overall Survival (OS) (5 years)");
        assert_eq!(s[0].progression_free_survival, "Progression-free survival");
        let csv = summaries_csv(&s).unwrap();
        assert!(csv.starts_with("NCT Number,Study Title,"));
        assert!(summarize_selected(&Corpus::default(), &ReferenceParser).is_empty());
    }

    #[test]
    fn rule_generation() {
        let mut g = ReplayGenerator::default();
        g.record(GenerationKind::Rules, "q", "(i) Include trials of gastric cancer\n\n(ii) Exclude Phase III trials with fewer than 100 enrolled patients\n");
        let rs = generate_rules("q", &g).unwrap();
        assert_eq!(rs.rules.len(), 2);
        assert_eq!(rs.rules[1].kind, RuleKind::Exclude);
        assert_eq!(rs.rules[0].text, "Include trials of gastric cancer");
        assert_eq!(rs.status, RuleStatus::Draft);
        assert_eq!(generate_rules("  ", &g), Err(GenerationError::EmptyQuery));
        assert!(matches!(generate_rules("other", &g), Err(GenerationError::Unavailable(_))));
        g.record(GenerationKind::Plan, "rule", "```json\n{\"filter_name\": \"x\"}\n```");
        assert_eq!(generate_plan("rule", &g).unwrap()["filter_name"], "x");
    }

    #[test]
    fn rule_set_lifecycle() {
        let mut rs = RuleSet::draft(vec![]);
        rs.approve();
        assert!(rs.is_approved());
        rs.edit(vec![Rule { rule_id: "r1".into(), text: "Include x".into(), kind: RuleKind::Include }]);
        assert_eq!(rs.revision, 2);
        assert!(!rs.is_approved());
    }
}
