//! HTTP JSON API over persisted runs.
//!
//! Each run lives in `<run_root>/<run_id>/` as numbered snapshots
//! (`snapshot-000001.json`, ...) plus an append-only `audit.jsonl`. The
//! newest snapshot is the run's state. Mutations of one run are serialized
//! by a per-run lock; readers always see a whole snapshot.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use evsynth_core::eligibility::{attainable_total, parse_rules};
use evsynth_core::extract::Parser;
use evsynth_core::meta::{sensitivity_sweep, sweep_grid, MetaError, PoolOptions, SweepPoint};
use evsynth_core::plan::{validate_plan_set, PlanSchemaError};
use evsynth_core::trial::PrefilterPolicy;
use evsynth_core::weights::compute_weights;
use evsynth_core::{ContingencyTable, Corpus, DrugLibrary, EvalPolicy, MembershipLibrary, PlanSet, PmaxMode, StudyWeight, WeightParams, WeightVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::analysis::{meta_report, score_trials, MetaReport};
use crate::config::ServiceConfig;
use crate::formats::{align_penalties, CriteriaFile};
use crate::parsers::{ParserSpec, RemoteConfig, RemoteParser};
use crate::pipeline::{
    generate_plan, generate_rules, rule_kind, run_pipeline, summarize_selected, write_jsonl, AuditKind, AuditLog, Clock,
    Generator, PipelineError, PipelineInput, PrismaFlow, ReplayGenerator, Rule, RuleKind, RuleSet, TrialSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Draft,
    RulesApproved,
    Filtered,
    Analyzed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPenalty {
    pub study_id: String,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: String,
    pub query: String,
    /// Corpus file name under the corpus root.
    pub corpus: String,
    pub rules: RuleSet,
    pub plans: PlanSet,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generation_issues: Vec<String>,
    pub flow: Option<PrismaFlow>,
    pub selected: Vec<String>,
    pub summaries: Vec<TrialSummary>,
    pub penalties: Vec<StudyPenalty>,
    pub attainable_total: Option<f64>,
    pub weights: Option<WeightVector>,
    pub tables: Vec<ContingencyTable>,
    pub meta: Option<MetaReport>,
    /// Snapshot number; bumped by every mutation.
    pub snapshot: u64,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detail {
    pub pointer: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Vec<Detail>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), details: Vec::new() }
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown run `{id}`"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "illegal_state", message)
    }

    pub fn invalid(pointer: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "schema_violation",
            message: message.clone(),
            details: vec![Detail { pointer: pointer.into(), message }],
        }
    }

    fn plan(prefix: &str, e: PlanSchemaError) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "schema_violation",
            message: "plan set failed validation".into(),
            details: e
                .violations
                .into_iter()
                .map(|v| Detail { pointer: format!("{prefix}{}", v.pointer), message: v.message })
                .collect(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.code, "message": self.message, "details": self.details});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("", format!("invalid request body: {e}")))
}

struct RunHandle {
    lock: tokio::sync::Mutex<()>,
    current: RwLock<Arc<Run>>,
}

impl RunHandle {
    fn new(run: Run) -> Arc<Self> {
        Arc::new(RunHandle { lock: tokio::sync::Mutex::new(()), current: RwLock::new(Arc::new(run)) })
    }

    fn snapshot(&self) -> Arc<Run> {
        self.current.read().expect("run snapshot lock").clone()
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    parser: Arc<dyn Parser>,
    generator: Option<Arc<dyn Generator>>,
    drugs: DrugLibrary,
    clock: Arc<dyn Clock>,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
    create_lock: tokio::sync::Mutex<()>,
}

fn build_generator(spec: &str) -> Result<Arc<dyn Generator>, String> {
    match spec.split_once(':') {
        Some(("replay", p)) => {
            let raw = std::fs::read_to_string(p).map_err(|e| format!("{p}: {e}"))?;
            let g: ReplayGenerator = serde_json::from_str(&raw).map_err(|e| format!("{p}: {e}"))?;
            Ok(Arc::new(g))
        }
        Some(("remote", p)) => Ok(Arc::new(RemoteParser::new(RemoteConfig::load(Path::new(p)).map_err(|e| e.to_string())?))),
        _ => Err(format!("unknown generator `{spec}`; expected replay:PATH or remote:CONFIG")),
    }
}

const SNAPSHOT_PREFIX: &str = "snapshot-";

fn snapshot_path(dir: &Path, n: u64) -> PathBuf {
    dir.join(format!("{SNAPSHOT_PREFIX}{n:06}.json"))
}

fn latest_snapshot(dir: &Path) -> std::io::Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let n = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix(SNAPSHOT_PREFIX))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(n) = n {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

impl AppState {
    pub fn new(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Arc<Self>, String> {
        let spec: ParserSpec = config.parser.parse().map_err(|e: crate::parsers::BackendError| e.to_string())?;
        let parser = spec.build().map_err(|e| e.to_string())?;
        let generator = config.generator.as_deref().map(build_generator).transpose()?;
        let drugs = match &config.drug_library {
            Some(p) => crate::formats::read_drug_library(p).map_err(|e| e.to_string())?,
            None => DrugLibrary::new(),
        };
        std::fs::create_dir_all(&config.run_root).map_err(|e| format!("{}: {e}", config.run_root.display()))?;
        let mut runs = BTreeMap::new();
        for entry in std::fs::read_dir(&config.run_root).map_err(|e| e.to_string())? {
            let dir = entry.map_err(|e| e.to_string())?.path();
            if !dir.is_dir() {
                continue;
            }
            if let Some(p) = latest_snapshot(&dir).map_err(|e| e.to_string())? {
                let raw = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                let run: Run = serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", p.display()))?;
                runs.insert(run.run_id.clone(), RunHandle::new(run));
            }
        }
        Ok(Arc::new(AppState {
            config,
            parser,
            generator,
            drugs,
            clock,
            runs: RwLock::new(runs),
            create_lock: tokio::sync::Mutex::new(()),
        }))
    }

    fn handle(&self, id: &str) -> ApiResult<Arc<RunHandle>> {
        self.runs.read().expect("run table lock").get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.config.run_root.join(id)
    }

    /// Writes the next snapshot and appends audit events. The snapshot file
    /// is written to a temporary name and renamed into place.
    fn persist(&self, run: &Run, log: &AuditLog) -> ApiResult<()> {
        let dir = self.run_dir(&run.run_id);
        std::fs::create_dir_all(&dir).map_err(|e| ApiError::internal(e.to_string()))?;
        let tmp = dir.join(".snapshot.tmp");
        let body = serde_json::to_vec_pretty(run).expect("run serializes");
        std::fs::write(&tmp, body).map_err(|e| ApiError::internal(e.to_string()))?;
        std::fs::rename(&tmp, snapshot_path(&dir, run.snapshot)).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("audit.jsonl"))
            .map_err(|e| ApiError::internal(e.to_string()))?;
        write_jsonl(&mut f, log.events()).map_err(|e| ApiError::internal(e.to_string()))?;
        f.flush().map_err(|e| ApiError::internal(e.to_string()))
    }

    /// Applies `f` to a copy of the run under its lock, persists, then
    /// publishes the copy.
    async fn mutate<T, F>(self: &Arc<Self>, id: &str, f: F) -> ApiResult<(Arc<Run>, T)>
    where
        T: Send + 'static,
        F: FnOnce(&AppState, &mut Run, &mut AuditLog) -> ApiResult<T> + Send + 'static,
    {
        let handle = self.handle(id)?;
        let _guard = handle.lock.lock().await;
        let state = self.clone();
        let h = handle.clone();
        let (run, out) = tokio::task::spawn_blocking(move || {
            let mut run = (*h.snapshot()).clone();
            let mut log = AuditLog::after(&run.run_id, state.clock.clone(), run.audit_seq);
            let out = f(&state, &mut run, &mut log)?;
            run.snapshot += 1;
            run.audit_seq = log.last_seq();
            state.persist(&run, &log)?;
            Ok::<_, ApiError>((Arc::new(run), out))
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
        *handle.current.write().expect("run snapshot lock") = run.clone();
        Ok((run, out))
    }

    fn load_corpus(&self, name: &str) -> ApiResult<Corpus> {
        let path = self.config.corpus_root.join(name);
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| ApiError::invalid("/corpus", format!("cannot read corpus `{name}`: {e}")))?;
        let c: Corpus = serde_json::from_str(&raw).map_err(|e| ApiError::invalid("/corpus", format!("corpus `{name}`: {e}")))?;
        Ok(Corpus::new(c.trials, &c.source_tag, &c.ingested_at))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleInput {
    #[serde(default)]
    rule_id: Option<String>,
    text: String,
    #[serde(default)]
    kind: Option<RuleKind>,
}

fn to_rules(inputs: Vec<RuleInput>) -> ApiResult<Vec<Rule>> {
    let mut out: Vec<Rule> = Vec::new();
    for (i, r) in inputs.into_iter().enumerate() {
        if r.text.trim().is_empty() {
            return Err(ApiError::invalid(&format!("/rules/{i}/text"), "rule text is empty"));
        }
        let rule_id = r.rule_id.unwrap_or_else(|| format!("r{}", i + 1));
        if out.iter().any(|o| o.rule_id == rule_id) {
            return Err(ApiError::invalid(&format!("/rules/{i}/rule_id"), format!("duplicate rule id `{rule_id}`")));
        }
        let kind = r.kind.unwrap_or_else(|| rule_kind(&r.text));
        out.push(Rule { rule_id, text: r.text.trim().to_string(), kind });
    }
    Ok(out)
}

fn valid_corpus_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRun {
    query: String,
    corpus: String,
    #[serde(default)]
    rules: Option<Vec<RuleInput>>,
    #[serde(default)]
    plans: Option<Value>,
    #[serde(default)]
    generate: bool,
}

async fn create_run(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Run>)> {
    let req: CreateRun = parse_body(&body)?;
    if req.query.trim().is_empty() {
        return Err(ApiError::invalid("/query", "query is empty"));
    }
    if !valid_corpus_name(&req.corpus) {
        return Err(ApiError::invalid("/corpus", "corpus must be a file name under the corpus root"));
    }
    if !state.config.corpus_root.join(&req.corpus).is_file() {
        return Err(ApiError::invalid("/corpus", format!("no corpus named `{}`", req.corpus)));
    }
    let mut plans = match &req.plans {
        Some(v) => validate_plan_set(v).map_err(|e| ApiError::plan("/plans", e))?,
        None => PlanSet::default(),
    };
    let mut issues = Vec::new();
    let rules = match (req.rules, req.generate) {
        (Some(r), false) => RuleSet::draft(to_rules(r)?),
        (Some(_), true) => return Err(ApiError::invalid("/generate", "give rules or request generation, not both")),
        (None, false) => RuleSet::draft(Vec::new()),
        (None, true) => {
            let g = state
                .generator
                .clone()
                .ok_or_else(|| ApiError::invalid("/generate", "no generator is configured"))?;
            let query = req.query.clone();
            let (rules, generated, gen_issues) = tokio::task::spawn_blocking(move || {
                let rules = generate_rules(&query, g.as_ref()).map_err(|e| ApiError::invalid("/query", e.to_string()))?;
                let mut generated = Vec::new();
                let mut issues = Vec::new();
                for r in &rules.rules {
                    match generate_plan(&r.text, g.as_ref()) {
                        Ok(v) => generated.push(v),
                        Err(e) => issues.push(format!("{}: {e}", r.rule_id)),
                    }
                }
                Ok::<_, ApiError>((rules, generated, issues))
            })
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
            issues = gen_issues;
            if req.plans.is_none() && !generated.is_empty() {
                match validate_plan_set(&Value::Array(generated)) {
                    Ok(p) => plans = p,
                    Err(e) => issues.extend(e.violations.into_iter().map(|v| format!("/plans{}: {}", v.pointer, v.message))),
                }
            }
            rules
        }
    };

    let _guard = state.create_lock.lock().await;
    let n = state.runs.read().expect("run table lock").len() + 1;
    let mut run_id = format!("run-{n:04}");
    let mut bump = n;
    while state.run_dir(&run_id).exists() {
        bump += 1;
        run_id = format!("run-{bump:04}");
    }
    let mut run = Run {
        run_id: run_id.clone(),
        query: req.query,
        corpus: req.corpus,
        rules,
        plans,
        state: RunState::Draft,
        generation_issues: issues,
        flow: None,
        selected: Vec::new(),
        summaries: Vec::new(),
        penalties: Vec::new(),
        attainable_total: None,
        weights: None,
        tables: Vec::new(),
        meta: None,
        snapshot: 1,
        audit_seq: 0,
    };
    let mut log = AuditLog::new(&run_id, state.clock.clone());
    log.push(AuditKind::RuleCreated, json!({"query": run.query, "corpus": run.corpus, "rules": run.rules}));
    if !run.plans.plans.is_empty() {
        log.push(AuditKind::PlanValidated, json!({"plans": run.plans}));
    }
    run.audit_seq = log.last_seq();
    state.persist(&run, &log)?;
    state.runs.write().expect("run table lock").insert(run_id, RunHandle::new(run.clone()));
    Ok((StatusCode::CREATED, Json(run)))
}

#[derive(Debug, Serialize)]
struct RunListing {
    run_id: String,
    query: String,
    state: RunState,
    revision: u64,
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<RunListing>> {
    let runs = state.runs.read().expect("run table lock");
    Json(
        runs.values()
            .map(|h| {
                let r = h.snapshot();
                RunListing { run_id: r.run_id.clone(), query: r.query.clone(), state: r.state, revision: r.rules.revision }
            })
            .collect(),
    )
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Run>> {
    Ok(Json((*state.handle(&id)?.snapshot()).clone()))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RulesView {
    pub rules: RuleSet,
    pub plans: PlanSet,
    pub state: RunState,
}

async fn get_rules(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RulesView>> {
    let r = state.handle(&id)?.snapshot();
    Ok(Json(RulesView { rules: r.rules.clone(), plans: r.plans.clone(), state: r.state }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PutRules {
    #[serde(default)]
    rules: Option<Vec<RuleInput>>,
    #[serde(default)]
    plans: Option<Value>,
    #[serde(default)]
    approve: bool,
}

async fn put_rules(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<RulesView>> {
    let req: PutRules = parse_body(&body)?;
    let rules = req.rules.map(to_rules).transpose()?;
    let plans = match &req.plans {
        Some(v) => Some(validate_plan_set(v).map_err(|e| ApiError::plan("/plans", e))?),
        None => None,
    };
    if rules.is_none() && plans.is_none() && !req.approve {
        return Err(ApiError::invalid("", "nothing to change: give rules, plans or approve"));
    }
    let (run, ()) = state
        .mutate(&id, move |_, run, log| {
            if run.state >= RunState::Filtered {
                return Err(ApiError::conflict("rules cannot change after execution"));
            }
            if rules.is_some() || plans.is_some() {
                let new_rules = rules.unwrap_or_else(|| run.rules.rules.clone());
                run.rules.edit(new_rules);
                if let Some(p) = plans {
                    run.plans = p;
                    log.push(AuditKind::PlanValidated, json!({"plans": run.plans}));
                }
                run.state = RunState::Draft;
                log.push(AuditKind::RuleEdited, json!({"revision": run.rules.revision, "rules": run.rules.rules}));
            }
            if req.approve {
                run.rules.approve();
                run.state = RunState::RulesApproved;
                log.push(AuditKind::RuleEdited, json!({"revision": run.rules.revision, "status": run.rules.status}));
            }
            Ok(())
        })
        .await?;
    Ok(Json(RulesView { rules: run.rules.clone(), plans: run.plans.clone(), state: run.state }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ExecuteResponse {
    pub flow: PrismaFlow,
    pub selected: Vec<TrialSummary>,
}

async fn execute(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ExecuteResponse>> {
    let (_, resp) = state
        .mutate(&id, |st, run, log| {
            if run.state != RunState::RulesApproved {
                return Err(ApiError::conflict(format!("run is {:?}; execution needs approved rules", run.state)));
            }
            if run.plans.plans.is_empty() {
                return Err(ApiError::conflict("no approved plans to execute"));
            }
            let corpus = st.load_corpus(&run.corpus)?;
            let (lists, missing) = MembershipLibrary::resolve(&st.drugs, &run.plans.membership_lists);
            if let Some(name) = missing.first() {
                return Err(ApiError::conflict(format!("membership list `{name}` has no matching drug list")));
            }
            let out = run_pipeline(
                &PipelineInput {
                    corpus: &corpus,
                    plans: &run.plans,
                    parser: st.parser.as_ref(),
                    lists: &lists,
                    policy: &EvalPolicy::default(),
                    prefilter: &PrefilterPolicy::default(),
                },
                log,
            )
            .map_err(|e| match e {
                PipelineError::NotApproved => ApiError::conflict(e.to_string()),
                PipelineError::Config(e) => ApiError::conflict(e.to_string()),
            })?;
            let summaries = summarize_selected(&out.selected, st.parser.as_ref());
            run.flow = Some(out.flow.clone());
            run.selected = out.selected.ids();
            run.summaries = summaries.clone();
            run.state = RunState::Filtered;
            Ok(ExecuteResponse { flow: out.flow, selected: summaries })
        })
        .await?;
    Ok(Json(resp))
}

fn require(run: &Run, at_least: RunState) -> ApiResult<()> {
    if run.state < at_least {
        return Err(ApiError::conflict(format!("run is {:?}; this needs {:?} or later", run.state, at_least)));
    }
    Ok(())
}

async fn get_prisma(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PrismaFlow>> {
    let r = state.handle(&id)?.snapshot();
    require(&r, RunState::Filtered)?;
    Ok(Json(r.flow.clone().expect("filtered runs carry a flow")))
}

async fn get_trials(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<TrialSummary>>> {
    let r = state.handle(&id)?.snapshot();
    require(&r, RunState::Filtered)?;
    Ok(Json(r.summaries.clone()))
}

fn default_gamma() -> f64 {
    WeightParams::default().gamma
}

fn default_floor() -> f64 {
    WeightParams::default().floor
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsRequest {
    #[serde(default)]
    penalties: Option<Vec<StudyPenalty>>,
    #[serde(default)]
    rules: Option<Value>,
    #[serde(default)]
    criteria: Option<CriteriaFile>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    study_ids: Option<Vec<String>>,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default = "default_floor")]
    floor: f64,
    #[serde(default)]
    pmax_mode: PmaxMode,
    #[serde(default)]
    explicit_pmax: Option<f64>,
    #[serde(default)]
    attainable_total: Option<f64>,
}

async fn post_weights(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<WeightVector>> {
    let req: WeightsRequest = parse_body(&body)?;
    let params = WeightParams { gamma: req.gamma, floor: req.floor, pmax_mode: req.pmax_mode, explicit_pmax: req.explicit_pmax };
    params.validate().map_err(|e| ApiError::invalid("", e.to_string()))?;
    let (penalties, attainable) = match (req.penalties, req.rules) {
        (Some(p), None) => {
            let needs_total = req.pmax_mode == PmaxMode::Attainable && req.explicit_pmax.is_none();
            let total = match req.attainable_total {
                Some(t) => t,
                None if needs_total => {
                    return Err(ApiError::invalid("/attainable_total", "attainable mode needs attainable_total or rules"))
                }
                None => 0.0,
            };
            (p.into_iter().map(|s| (s.study_id, s.penalty)).collect::<Vec<_>>(), total)
        }
        (None, Some(rules)) => {
            let rules = parse_rules(&rules).map_err(|e| ApiError::invalid("/rules", e.to_string()))?;
            let criteria = req.criteria.ok_or_else(|| ApiError::invalid("/criteria", "rules need structured criteria"))?;
            let scores = score_trials(&rules, &criteria, req.target.as_deref(), req.study_ids.as_deref())
                .map_err(|e| ApiError::invalid("/criteria", e.to_string()))?;
            (scores.into_iter().map(|s| (s.trial_id, s.total)).collect(), attainable_total(&rules))
        }
        (Some(_), Some(_)) => return Err(ApiError::invalid("/rules", "give penalties or rules, not both")),
        (None, None) => return Err(ApiError::invalid("/penalties", "penalties or rules are required")),
    };
    let vector = compute_weights(&penalties, &params, attainable).map_err(|e| ApiError::invalid("/penalties", e.to_string()))?;
    let (_, v) = state
        .mutate(&id, move |_, run, log| {
            require(run, RunState::Filtered)?;
            run.penalties = penalties.iter().map(|(id, p)| StudyPenalty { study_id: id.clone(), penalty: *p }).collect();
            run.attainable_total = Some(attainable);
            run.weights = Some(vector.clone());
            log.push(AuditKind::Weights, serde_json::to_value(&vector).expect("weights serialize"));
            Ok(vector)
        })
        .await?;
    Ok(Json(v))
}

#[derive(Debug, Deserialize)]
struct TableInput {
    study_id: String,
    events_trt: u64,
    total_trt: u64,
    events_ctl: u64,
    total_ctl: u64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum WeightChoice {
    Named(String),
    Explicit(Vec<StudyWeight>),
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRequest {
    tables: Vec<TableInput>,
    weights: WeightChoice,
    #[serde(default = "default_level")]
    level: f64,
    #[serde(default)]
    continuity_correction: bool,
}

fn meta_error(e: MetaError) -> ApiError {
    match e {
        MetaError::ZeroSide(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "estimation", e.to_string()),
        MetaError::InvalidLevel => ApiError::invalid("/level", e.to_string()),
        _ => ApiError::invalid("/weights", e.to_string()),
    }
}

async fn post_meta(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<MetaReport>> {
    let req: MetaRequest = parse_body(&body)?;
    if req.tables.is_empty() {
        return Err(ApiError::invalid("/tables", "at least one table is required"));
    }
    let tables = req
        .tables
        .iter()
        .enumerate()
        .map(|(i, t)| {
            ContingencyTable::from_arms(&t.study_id, t.events_trt, t.total_trt, t.events_ctl, t.total_ctl)
                .map_err(|e| ApiError::invalid(&format!("/tables/{i}"), e.to_string()))
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let options = PoolOptions { level: req.level, continuity_correction: req.continuity_correction };
    let choice = req.weights;
    let (_, report) = state
        .mutate(&id, move |_, run, log| {
            require(run, RunState::Filtered)?;
            let weights = match choice {
                WeightChoice::Named(n) if n == "uniform" => StudyWeight::uniform(&tables),
                WeightChoice::Named(n) if n == "run" => StudyWeight::from_vector(
                    run.weights.as_ref().ok_or_else(|| ApiError::conflict("run has no stored weights"))?,
                ),
                WeightChoice::Named(n) => {
                    return Err(ApiError::invalid("/weights", format!("unknown weights `{n}`; use uniform, run or a list")))
                }
                WeightChoice::Explicit(w) => w,
            };
            let report = meta_report(&tables, &weights, &options).map_err(meta_error)?;
            run.tables = tables;
            run.meta = Some(report.clone());
            run.state = RunState::Analyzed;
            log.push(AuditKind::Estimate, serde_json::to_value(&report.weighted).expect("estimate serializes"));
            Ok(report)
        })
        .await?;
    Ok(Json(report))
}

#[derive(Debug, Deserialize)]
struct SweepQuery {
    #[serde(default)]
    gammas: Option<String>,
    #[serde(default)]
    floors: Option<String>,
    #[serde(default)]
    modes: Option<String>,
}

pub const DEFAULT_SWEEP_GAMMAS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const DEFAULT_SWEEP_FLOORS: [f64; 4] = [10.0, 20.0, 50.0, 100.0];

fn parse_numbers(s: &str, field: &str) -> ApiResult<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| ApiError::invalid(&format!("/{field}"), format!("`{v}` is not a number"))))
        .collect()
}

fn parse_modes(s: &str) -> ApiResult<Vec<PmaxMode>> {
    s.split(',')
        .map(|v| match v.trim() {
            "attainable" => Ok(PmaxMode::Attainable),
            "observed" => Ok(PmaxMode::Observed),
            other => Err(ApiError::invalid("/modes", format!("unknown mode `{other}`"))),
        })
        .collect()
}

async fn get_sweep(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SweepQuery>,
) -> ApiResult<Json<Vec<SweepPoint>>> {
    let run = state.handle(&id)?.snapshot();
    require(&run, RunState::Analyzed)?;
    if run.penalties.is_empty() {
        return Err(ApiError::conflict("run has no penalties; post weights first"));
    }
    let gammas = q.gammas.as_deref().map(|s| parse_numbers(s, "gammas")).transpose()?.unwrap_or(DEFAULT_SWEEP_GAMMAS.to_vec());
    let floors = q.floors.as_deref().map(|s| parse_numbers(s, "floors")).transpose()?.unwrap_or(DEFAULT_SWEEP_FLOORS.to_vec());
    let modes = q.modes.as_deref().map(parse_modes).transpose()?.unwrap_or(vec![PmaxMode::Attainable]);
    let penalties: Vec<(String, f64)> = run.penalties.iter().map(|p| (p.study_id.clone(), p.penalty)).collect();
    let aligned = align_penalties(&run.tables, &penalties).map_err(|e| ApiError::conflict(e.to_string()))?;
    let options = run.meta.as_ref().map_or_else(PoolOptions::default, |m| PoolOptions {
        level: m.weighted.level,
        continuity_correction: !m.weighted.continuity_corrected.is_empty(),
    });
    let grid = sweep_grid(&gammas, &floors, &modes);
    let points = sensitivity_sweep(&run.tables, &aligned, run.attainable_total.unwrap_or(0.0), &grid, &options).map_err(|e| match e {
        MetaError::Weights(w) => ApiError::invalid("", w.to_string()),
        other => meta_error(other),
    })?;
    Ok(Json(points))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let origins: Vec<HeaderValue> = state.config.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/rules", get(get_rules).put(put_rules))
        .route("/runs/{id}/execute", post(execute))
        .route("/runs/{id}/prisma", get(get_prisma))
        .route("/runs/{id}/trials", get(get_trials))
        .route("/runs/{id}/weights", post(post_weights))
        .route("/runs/{id}/meta", post(post_meta))
        .route("/runs/{id}/sweep", get(get_sweep))
        .fallback(fallback)
        .layer(cors)
        .with_state(state)
}

pub async fn serve(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<(), String> {
    let addr = config.socket_addr().map_err(|e| e.to_string())?;
    let state = AppState::new(config, clock)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("{addr}: {e}"))?;
    axum::serve(listener, router(state)).await.map_err(|e| e.to_string())
}
