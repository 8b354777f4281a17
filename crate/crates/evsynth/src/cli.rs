//! Command-line front end. Every subcommand reads and writes the module file
//! formats; stdout is JSON unless `--format` says otherwise.
//!
//! Exit codes: 0 success, 2 input or schema error, 3 estimation or
//! configuration error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser as ClapParser, Subcommand, ValueEnum};
use evsynth_core::eligibility::{attainable_total, structure_criteria, PenaltyScore, StructuringReport};
use evsynth_core::eval::condition_request;
use evsynth_core::meta::{forest_data, pool_ew_mh, sensitivity_sweep, sweep_grid, MetaError, PoolOptions, SweepPoint};
use evsynth_core::trial::{prefilter, PrefilterPolicy};
use evsynth_core::weights::{compute_weights, WeightError};
use evsynth_core::{Corpus, EvalPolicy, MembershipLibrary, PmaxMode, PooledEstimate, StudyWeight, WeightParams, WeightVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{align_weights, score_trials};
use crate::config::ServiceConfig;
use crate::formats::{self, FormatError, PmaxArg};
use crate::montecarlo::{simulate, SimulationConfig, SimulationReport};
use crate::parsers::{BackendError, ParserSpec, ReplayFixture, StructureFixture, FIXTURE_VERSION};
use crate::pipeline::{
    audit_digest, biomarker_request, generate_rules, run_pipeline, summaries_csv, summarize_selected, write_jsonl,
    AuditLog, Clock, FixedClock, GenerationKind, PipelineError, PipelineInput, PrismaFlow, ReplayGenerator, SystemClock,
};
use crate::registry::ingest_registry_dump;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;

#[derive(Debug, ClapParser)]
#[command(name = "evsynth", version, about = "Eligibility-weighted evidence synthesis over clinical trial registries")]
pub struct Cli {
    /// Output format.
    #[arg(long, value_enum, global = true, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    /// Shorthand for --format table.
    #[arg(long, global = true)]
    pub table: bool,
    /// Log progress with timestamps to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Plain,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a registry dump into a corpus file
    Ingest(IngestArgs),
    /// Apply the deterministic pre-filter to a corpus
    Prefilter(PrefilterArgs),
    /// Validate a plan or plan-set document
    PlanValidate(PlanValidateArgs),
    /// Run the pre-filter and every plan over a corpus
    Filter(FilterArgs),
    /// Split eligibility text into structured criteria
    StructureCriteria(StructureArgs),
    /// Score trials against penalty rules
    Penalize(PenalizeArgs),
    /// Turn penalties into normalised study weights
    Weights(WeightsArgs),
    /// Pool risk ratios with Mantel-Haenszel weighting
    Meta(MetaArgs),
    /// Recompute the pooled estimate over a parameter grid
    Sweep(SweepArgs),
    /// Emit forest plot data as JSON or SVG
    Forest(ForestArgs),
    /// Run the seeded consistency simulation
    Simulate(SimulateArgs),
    /// Build replay fixtures from answer sheets, reviewed criteria or generation outputs
    #[command(subcommand)]
    Fixture(FixtureCommand),
    /// Start the HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Registry dump (array of studies or {"studies": [...]})
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Source tag recorded on the corpus (default: input file name)
    #[arg(long)]
    pub source_tag: Option<String>,
    /// Ingestion timestamp recorded on the corpus
    #[arg(long, default_value = "")]
    pub ingested_at: String,
}

#[derive(Debug, Args)]
pub struct PrefilterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the retained corpus here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanValidateArgs {
    /// Plan, array of plans, or plan-set object
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParserArg {
    /// Extraction backend: reference, replay:PATH or remote:CONFIG
    #[arg(long, default_value = "reference")]
    pub parser: String,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Plan-set document
    #[arg(long)]
    pub plans: PathBuf,
    #[command(flatten)]
    pub parser: ParserArg,
    /// Drug library used to resolve membership lists
    #[arg(long)]
    pub drug_library: Option<PathBuf>,
    /// Append-only audit log to write (JSON lines)
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// Run identifier recorded in audit events
    #[arg(long, default_value = "cli")]
    pub run_id: String,
    /// Fixed audit timestamp instead of the wall clock
    #[arg(long)]
    pub timestamp: Option<String>,
    /// Write the selected corpus here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write trial summaries as CSV here
    #[arg(long)]
    pub summaries: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StructureArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Structuring backend: reference or replay:PATH
    #[arg(long, default_value = "reference")]
    pub parser: String,
    /// Only these NCT ids (comma-separated)
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    /// Write the criteria file here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PenalizeArgs {
    /// Penalty rules (array or {"rules": [...]})
    #[arg(long)]
    pub rules: PathBuf,
    /// Structured criteria keyed by NCT id
    #[arg(long)]
    pub criteria: PathBuf,
    /// Target trial for target-relative rules
    #[arg(long)]
    pub target: Option<String>,
    /// Score these trials in this order (default: all, sorted)
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PenaltySource {
    /// Comma-separated penalties
    #[arg(long, conflicts_with = "penalties_file")]
    pub penalties: Option<String>,
    /// Penalty file: output of `penalize` or {"id": penalty}
    #[arg(long)]
    pub penalties_file: Option<PathBuf>,
    /// Study ids for --penalties (default s1, s2, ...)
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub source: PenaltySource,
    /// Decay rate of compatibility with penalty
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Floor B on the 0-100 score scale
    #[arg(long, default_value_t = 20.0)]
    pub floor: f64,
    /// attainable[:TOTAL], observed, or a number
    #[arg(long, default_value = "attainable")]
    pub pmax: String,
    /// Rules file supplying the attainable total
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Tables CSV: study_id,events_trt,total_trt,events_ctl,total_ctl
    #[arg(long)]
    pub tables: PathBuf,
    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Add 0.5 to every cell of tables with a zero cell
    #[arg(long)]
    pub continuity_correction: bool,
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    /// `uniform` or a weights file
    #[arg(long, default_value = "uniform")]
    pub weights: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    #[command(flatten)]
    pub source: PenaltySource,
    /// Attainable penalty total for attainable mode
    #[arg(long)]
    pub attainable: Option<f64>,
    /// Rules file supplying the attainable total
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 1.0, 2.0])]
    pub gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 20.0, 50.0, 100.0])]
    pub floors: Vec<f64>,
    /// attainable and/or observed
    #[arg(long, value_delimiter = ',', default_value = "attainable")]
    pub modes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ForestArgs {
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Weights file for the weighted analysis
    #[arg(long)]
    pub weights: PathBuf,
    /// Emit SVG instead of JSON
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = SimulationConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub replicates: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [100u64, 1000, 10000])]
    pub sizes: Vec<u64>,
}

#[derive(Debug, Subcommand)]
pub enum FixtureCommand {
    /// Extraction replay fixture from a per-trial answer sheet
    Extract(FixtureExtractArgs),
    /// Structuring replay fixture from reviewed criteria
    Structure(FixtureStructureArgs),
    /// Rule and plan generation replay fixture from a query, its rule list and plans
    Generation(FixtureGenerationArgs),
}

#[derive(Debug, Args)]
pub struct FixtureExtractArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub plans: PathBuf,
    /// {"NCT..": {"conditions": {"filter_name": ["raw", ...]}, "biomarker": "raw"}}
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureStructureArgs {
    #[arg(long)]
    pub criteria: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureGenerationArgs {
    /// Query text
    #[arg(long)]
    pub query: PathBuf,
    /// Generated rule list, one rule per line
    #[arg(long)]
    pub rules: PathBuf,
    /// Plan set whose plans follow the rule order
    #[arg(long)]
    pub plans: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Config file (default: $EVSYNTH_CONFIG)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Estimation(String),
    #[error("{0}")]
    Config(String),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Format(_) | CliError::Input(_) | CliError::Io(_) => EXIT_INPUT,
            CliError::Estimation(_) | CliError::Config(_) => EXIT_ESTIMATION,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn weight_error(e: WeightError) -> CliError {
    match e {
        WeightError::ZeroPmax => CliError::Estimation(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn meta_error(e: MetaError) -> CliError {
    match e {
        MetaError::ZeroSide(_) => CliError::Estimation(e.to_string()),
        MetaError::Weights(w) => weight_error(w),
        _ => CliError::Input(e.to_string()),
    }
}

struct Ctx<'a> {
    format: OutputFormat,
    verbose: bool,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn json<T: Serialize>(&mut self, v: &T) -> Result<(), CliError> {
        let s = serde_json::to_string_pretty(v).expect("output serializes");
        writeln!(self.out, "{s}")?;
        Ok(())
    }

    fn text(&mut self, s: &str) -> Result<(), CliError> {
        self.out.write_all(s.as_bytes())?;
        if !s.ends_with('\n') {
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// JSON by default; `plain` and `table` renderings when given.
    fn emit<T: Serialize>(&mut self, v: &T, plain: Option<String>, table: Option<String>) -> Result<(), CliError> {
        match (self.format, plain, table) {
            (OutputFormat::Plain, Some(p), _) => self.text(&p),
            (OutputFormat::Table, _, Some(t)) | (OutputFormat::Plain, None, Some(t)) => self.text(&t),
            (OutputFormat::Table, Some(p), None) => self.text(&p),
            _ => self.json(v),
        }
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{} {msg}", SystemClock.now());
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = out.write_all(rendered.as_bytes());
            } else {
                let _ = err.write_all(rendered.as_bytes());
            }
            return code;
        }
    };
    let format = if cli.table { OutputFormat::Table } else { cli.format };
    let mut ctx = Ctx { format, verbose: cli.verbose, out };
    match dispatch(cli.command, &mut ctx) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    match cmd {
        Command::Ingest(a) => ingest(a, ctx),
        Command::Prefilter(a) => prefilter_cmd(a, ctx),
        Command::PlanValidate(a) => plan_validate(a, ctx),
        Command::Filter(a) => filter(a, ctx),
        Command::StructureCriteria(a) => structure(a, ctx),
        Command::Penalize(a) => penalize(a, ctx),
        Command::Weights(a) => weights(a, ctx),
        Command::Meta(a) => meta(a, ctx),
        Command::Sweep(a) => sweep(a, ctx),
        Command::Forest(a) => forest(a, ctx),
        Command::Simulate(a) => simulate_cmd(a, ctx),
        Command::Fixture(FixtureCommand::Extract(a)) => fixture_extract(a, ctx),
        Command::Fixture(FixtureCommand::Structure(a)) => fixture_structure(a, ctx),
        Command::Fixture(FixtureCommand::Generation(a)) => fixture_generation(a, ctx),
        Command::Serve(a) => serve(a, ctx),
    }
}

fn read_corpus(path: &Path) -> Result<Corpus, CliError> {
    let c: Corpus = formats::read_json(path)?;
    Ok(Corpus::new(c.trials, &c.source_tag, &c.ingested_at))
}

fn ingest(a: IngestArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let raw = std::fs::read(&a.input).map_err(|source| FormatError::Io { path: a.input.clone(), source })?;
    let tag = a.source_tag.unwrap_or_else(|| a.input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    let (corpus, report) =
        ingest_registry_dump(&raw, &tag, &a.ingested_at).map_err(|e| CliError::Input(format!("{}: {e}", a.input.display())))?;
    formats::write_json(&a.out, &corpus)?;
    ctx.log(&format!("ingested {} of {} studies", report.accepted, report.studies));
    let table = format!("studies   {}\naccepted  {}\nrejected  {}\n", report.studies, report.accepted, report.rejected.len());
    ctx.emit(&report, None, Some(table))
}

fn prefilter_cmd(a: PrefilterArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let corpus = read_corpus(&a.corpus)?;
    let (kept, report) = prefilter(&corpus, &PrefilterPolicy::default());
    if let Some(out) = &a.out {
        formats::write_json(out, &kept)?;
    }
    let mut table = format!("{:<24} {:>7}\n{:<24} {:>7}\n", "input", report.input, "retained", report.retained);
    for b in &report.removed {
        table.push_str(&format!("{:<24} {:>7}\n", b.bucket.label(), b.removed));
    }
    ctx.emit(&report, None, Some(table))
}

fn plan_validate(a: PlanValidateArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let raw: serde_json::Value = formats::read_json(&a.file)?;
    let set = if raw.get("filter_name").is_some() {
        serde_json::Value::Array(vec![raw])
    } else {
        raw
    };
    let set = evsynth_core::plan::validate_plan_set(&set).map_err(|e| {
        let lines: Vec<String> = e.violations.iter().map(|v| format!("{}: {}", v.pointer, v.message)).collect();
        CliError::Input(format!("{}: plan failed validation\n{}", a.file.display(), lines.join("\n")))
    })?;
    let names: Vec<&str> = set.plans.iter().map(|p| p.filter_name.as_str()).collect();
    ctx.emit(&set, Some(format!("valid {}", names.join(" "))), None)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FilterReport {
    pub flow: PrismaFlow,
    pub selected: Vec<String>,
    pub audit_digest: String,
}

fn membership(plans: &evsynth_core::PlanSet, library: Option<&Path>) -> Result<MembershipLibrary, CliError> {
    if plans.membership_lists.is_empty() {
        return Ok(MembershipLibrary::new());
    }
    let path = library.ok_or_else(|| CliError::Config("plans use membership lists; pass --drug-library".into()))?;
    let lib = formats::read_drug_library(path)?;
    let (lists, missing) = MembershipLibrary::resolve(&lib, &plans.membership_lists);
    if !missing.is_empty() {
        return Err(CliError::Config(format!("no drug list for membership list(s): {}", missing.join(", "))));
    }
    Ok(lists)
}

fn filter(a: FilterArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let corpus = read_corpus(&a.corpus)?;
    let plans = formats::read_plan_set(&a.plans)?;
    let spec: ParserSpec = a.parser.parser.parse()?;
    let parser = spec.build()?;
    let lists = membership(&plans, a.drug_library.as_deref())?;
    let clock: Arc<dyn Clock> = match a.timestamp {
        Some(t) => Arc::new(FixedClock(t)),
        None => Arc::new(SystemClock),
    };
    let mut log = AuditLog::new(&a.run_id, clock);
    ctx.log(&format!("filtering {} trials with {} plans", corpus.len(), plans.plans.len()));
    let out = run_pipeline(
        &PipelineInput {
            corpus: &corpus,
            plans: &plans,
            parser: parser.as_ref(),
            lists: &lists,
            policy: &EvalPolicy::default(),
            prefilter: &PrefilterPolicy::default(),
        },
        &mut log,
    )
    .map_err(|e| match e {
        PipelineError::Config(e) => CliError::Config(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    if let Some(p) = &a.audit {
        let mut f = std::fs::File::create(p).map_err(|source| FormatError::Io { path: p.clone(), source })?;
        write_jsonl(&mut f, log.events())?;
    }
    if let Some(p) = &a.out {
        formats::write_json(p, &out.selected)?;
    }
    if let Some(p) = &a.summaries {
        let csv = summaries_csv(&summarize_selected(&out.selected, parser.as_ref())).map_err(|e| CliError::Input(e.to_string()))?;
        std::fs::write(p, csv).map_err(|source| FormatError::Io { path: p.clone(), source })?;
    }
    let report = FilterReport { selected: out.selected.ids(), audit_digest: audit_digest(log.events()), flow: out.flow };
    let table = format!("{}\n{}\n", report.flow.render_table(), report.selected.join("\n"));
    ctx.emit(&report, None, Some(table))
}

fn structure(a: StructureArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let corpus = read_corpus(&a.corpus)?;
    let spec: ParserSpec = a.parser.parse()?;
    let structurer = spec.build_structurer()?;
    let mut reports: Vec<StructuringReport> = Vec::new();
    for id in if a.ids.is_empty() { corpus.ids() } else { a.ids.clone() } {
        let t = corpus.get(&id).ok_or_else(|| CliError::Input(format!("no trial `{id}` in corpus")))?;
        reports.push(structure_criteria(&t.nct_id, &t.eligibility_text, structurer.as_ref()));
    }
    if let Some(out) = &a.out {
        let file: formats::CriteriaFile = reports.iter().map(|r| (r.trial_id.clone(), r.criteria.clone())).collect();
        formats::write_json(out, &file)?;
    }
    let table: String = reports
        .iter()
        .map(|r| format!("{:<14} {:>3} criteria {:>3} flags\n", r.trial_id, r.criteria.len(), r.flags.len()))
        .collect();
    ctx.emit(&reports, None, Some(table))
}

fn render_total(p: f64) -> String {
    let s = format!("{p:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn penalize(a: PenalizeArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let rules = formats::read_rules(&a.rules)?;
    let criteria = formats::read_criteria(&a.criteria)?;
    let order = (!a.ids.is_empty()).then_some(a.ids.as_slice());
    let scores: Vec<PenaltyScore> =
        score_trials(&rules, &criteria, a.target.as_deref(), order).map_err(|e| CliError::Input(e.to_string()))?;
    let plain = scores.iter().map(|s| render_total(s.total)).collect::<Vec<_>>().join(" ");
    let table: String = scores
        .iter()
        .map(|s| {
            let ids: Vec<&str> = s.triggered.iter().map(|t| t.rule_id.as_str()).collect();
            format!("{:<14} {:>5}  {}\n", s.trial_id, render_total(s.total), ids.join(","))
        })
        .collect();
    ctx.emit(&scores, Some(plain), Some(table))
}

fn load_penalties(src: &PenaltySource) -> Result<Vec<(String, f64)>, CliError> {
    match (&src.penalties, &src.penalties_file) {
        (Some(list), None) => {
            let values = formats::parse_penalty_list(list)?;
            let ids: Vec<String> = if src.ids.is_empty() {
                (1..=values.len()).map(|i| format!("s{i}")).collect()
            } else if src.ids.len() == values.len() {
                src.ids.clone()
            } else {
                return Err(CliError::Input(format!("{} ids for {} penalties", src.ids.len(), values.len())));
            };
            Ok(ids.into_iter().zip(values).collect())
        }
        (None, Some(path)) => Ok(formats::read_penalties(path)?),
        _ => Err(CliError::Input("give --penalties or --penalties-file".into())),
    }
}

/// Weight parameters plus the attainable total implied by `--pmax` / `--rules`.
fn weight_setup(gamma: f64, floor: f64, pmax: &str, rules: Option<&Path>) -> Result<(WeightParams, f64), CliError> {
    let arg: PmaxArg = pmax.parse()?;
    let from_rules = rules.map(formats::read_rules).transpose()?.map(|r| attainable_total(&r));
    let params = WeightParams {
        gamma,
        floor,
        pmax_mode: arg.mode(),
        explicit_pmax: match arg {
            PmaxArg::Explicit(x) => Some(x),
            _ => None,
        },
    };
    let total = match (arg, from_rules) {
        (PmaxArg::Attainable(Some(t)), _) => t,
        (PmaxArg::Attainable(None), Some(t)) => t,
        (PmaxArg::Attainable(None), None) => {
            return Err(CliError::Input("attainable P_max needs a total (attainable:TOTAL) or --rules".into()))
        }
        (_, t) => t.unwrap_or(0.0),
    };
    Ok((params, total))
}

fn weights(a: WeightsArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let penalties = load_penalties(&a.source)?;
    let (params, total) = weight_setup(a.gamma, a.floor, &a.pmax, a.rules.as_deref())?;
    let v: WeightVector = compute_weights(&penalties, &params, total).map_err(weight_error)?;
    let plain = v.studies.iter().map(|s| format!("{:.4}", s.w)).collect::<Vec<_>>().join(" ");
    let mut table = format!("{:<14} {:>6} {:>7} {:>7} {:>7}\n", "study", "p", "f", "S", "w");
    for s in &v.studies {
        table.push_str(&format!("{:<14} {:>6.2} {:>7.4} {:>7.2} {:>7.4}\n", s.study_id, s.p, s.f, s.s, s.w));
    }
    table.push_str(&format!("P_max {:.4}\n", v.pmax));
    ctx.emit(&v, Some(plain), Some(table))
}

fn load_weights(spec: &str, tables: &[evsynth_core::ContingencyTable]) -> Result<Vec<StudyWeight>, CliError> {
    if spec == "uniform" {
        return Ok(StudyWeight::uniform(tables));
    }
    let w = formats::read_weights(Path::new(spec))?;
    align_weights(tables, &w).map_err(meta_error)
}

fn pool_options(p: &PoolArgs) -> PoolOptions {
    PoolOptions { level: p.level, continuity_correction: p.continuity_correction }
}

fn pooled_table(e: &PooledEstimate) -> String {
    let mut t = format!("{:<14} {:>22} {:>8}\n", "study", "RR (CI)", "weight%");
    for s in &e.studies {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".into(), |v| format!("{v:.2}"));
        t.push_str(&format!(
            "{:<14} {:>22} {:>8.1}\n",
            s.study_id,
            format!("{} ({}, {})", f(s.rr.rr), f(s.rr.ci_low), f(s.rr.ci_high)),
            s.display_weight_percent
        ));
    }
    t.push_str(&format!("{:<14} {:>22}\n", "pooled", format!("{:.2} ({:.2}, {:.2})", e.theta_hat, e.ci_low, e.ci_high)));
    t
}

fn meta(a: MetaArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let tables = formats::read_tables(&a.pool.tables)?;
    let w = load_weights(&a.weights, &tables)?;
    let e = pool_ew_mh(&tables, &w, &pool_options(&a.pool)).map_err(meta_error)?;
    let plain = format!("theta {:.2} ci {:.2} {:.2}", e.theta_hat, e.ci_low, e.ci_high);
    let table = pooled_table(&e);
    ctx.emit(&e, Some(plain), Some(table))
}

fn sweep(a: SweepArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let tables = formats::read_tables(&a.pool.tables)?;
    let penalties = formats::align_penalties(&tables, &load_penalties_for_tables(&a.source, &tables)?)?;
    let modes = a
        .modes
        .iter()
        .map(|m| match m.as_str() {
            "attainable" => Ok(PmaxMode::Attainable),
            "observed" => Ok(PmaxMode::Observed),
            other => Err(CliError::Input(format!("unknown mode `{other}`"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let from_rules = a.rules.as_deref().map(formats::read_rules).transpose()?.map(|r| attainable_total(&r));
    let total = match a.attainable.or(from_rules) {
        Some(t) => t,
        None if modes.contains(&PmaxMode::Attainable) => {
            return Err(CliError::Input("attainable mode needs --attainable or --rules".into()))
        }
        None => 0.0,
    };
    let grid = sweep_grid(&a.gammas, &a.floors, &modes);
    let points: Vec<SweepPoint> =
        sensitivity_sweep(&tables, &penalties, total, &grid, &pool_options(&a.pool)).map_err(meta_error)?;
    let mut table = format!("{:>6} {:>6} {:<10} {:>7} {:>7} {:>7}\n", "gamma", "floor", "pmax", "theta", "low", "high");
    for p in &points {
        let mode = match p.params.pmax_mode {
            PmaxMode::Attainable => "attainable",
            PmaxMode::Observed => "observed",
        };
        table.push_str(&format!(
            "{:>6} {:>6} {:<10} {:>7.4} {:>7.4} {:>7.4}\n",
            p.params.gamma, p.params.floor, mode, p.estimate.theta_hat, p.estimate.ci_low, p.estimate.ci_high
        ));
    }
    ctx.emit(&points, None, Some(table))
}

/// `--penalties` without `--ids` takes the table order.
fn load_penalties_for_tables(
    src: &PenaltySource,
    tables: &[evsynth_core::ContingencyTable],
) -> Result<Vec<(String, f64)>, CliError> {
    if src.penalties.is_some() && src.ids.is_empty() {
        let values = formats::parse_penalty_list(src.penalties.as_deref().unwrap_or_default())?;
        if values.len() != tables.len() {
            return Err(CliError::Input(format!("{} penalties for {} tables", values.len(), tables.len())));
        }
        return Ok(tables.iter().map(|t| t.study_id.clone()).zip(values).collect());
    }
    load_penalties(src)
}

fn forest(a: ForestArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let tables = formats::read_tables(&a.pool.tables)?;
    let options = pool_options(&a.pool);
    let w = load_weights(&a.weights.to_string_lossy(), &tables)?;
    let weighted = pool_ew_mh(&tables, &w, &options).map_err(meta_error)?;
    let classical = evsynth_core::meta::pool_classical_mh(&tables, &options).map_err(meta_error)?;
    let data = forest_data(&classical, &weighted).map_err(meta_error)?;
    if a.svg {
        return ctx.text(&crate::forest::render_svg(&data));
    }
    ctx.emit(&data, None, None)
}

fn simulate_cmd(a: SimulateArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let config = SimulationConfig { seed: a.seed, replicates: a.replicates, arm_sizes: a.sizes, ..Default::default() };
    let r: SimulationReport = simulate(&config).map_err(|e| CliError::Input(e.to_string()))?;
    let plain = r.sizes.iter().map(|s| format!("{:.6}", s.mean_absolute_error)).collect::<Vec<_>>().join(" ");
    let mut table = format!("{:>7} {:>10} {:>10} {:>9}\n", "n", "mean", "MAE", "coverage");
    for s in &r.sizes {
        table.push_str(&format!("{:>7} {:>10.4} {:>10.4} {:>9.3}\n", s.arm_size, s.mean_estimate, s.mean_absolute_error, s.coverage));
    }
    ctx.emit(&r, Some(plain), Some(table))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialAnswers {
    /// filter_name -> raw answer per condition, in condition order.
    #[serde(default)]
    pub conditions: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub biomarker: Option<String>,
}

/// Records each answer under the digest of the request the pipeline will
/// issue for that trial and condition.
pub fn fixture_from_answers(
    corpus: &Corpus,
    plans: &evsynth_core::PlanSet,
    answers: &BTreeMap<String, TrialAnswers>,
) -> Result<ReplayFixture, CliError> {
    let mut fx = ReplayFixture::new();
    for (id, a) in answers {
        let trial = corpus.get(id).ok_or_else(|| CliError::Input(format!("answers name unknown trial `{id}`")))?;
        for (filter, raws) in &a.conditions {
            let plan = plans
                .plans
                .iter()
                .find(|p| &p.filter_name == filter)
                .ok_or_else(|| CliError::Input(format!("{id}: unknown plan `{filter}`")))?;
            if raws.len() > plan.conditions.len() {
                return Err(CliError::Input(format!("{id}: {} answers for {} conditions of `{filter}`", raws.len(), plan.conditions.len())));
            }
            for (cond, raw) in plan.conditions.iter().zip(raws) {
                fx.entries.insert(condition_request(cond, trial).digest(), raw.clone());
            }
        }
        if let Some(b) = &a.biomarker {
            fx.entries.insert(biomarker_request(trial).digest(), b.clone());
        }
    }
    Ok(fx)
}

fn fixture_extract(a: FixtureExtractArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let corpus = read_corpus(&a.corpus)?;
    let plans = formats::read_plan_set(&a.plans)?;
    let answers: BTreeMap<String, TrialAnswers> = formats::read_json(&a.answers)?;
    let fx = fixture_from_answers(&corpus, &plans, &answers)?;
    formats::write_json(&a.out, &fx)?;
    ctx.emit(&serde_json::json!({"version": FIXTURE_VERSION, "entries": fx.entries.len()}), None, None)
}

fn fixture_structure(a: FixtureStructureArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let criteria = formats::read_criteria(&a.criteria)?;
    let fx = StructureFixture::from_criteria(criteria.values().flatten());
    formats::write_json(&a.out, &fx)?;
    ctx.emit(&serde_json::json!({"version": FIXTURE_VERSION, "entries": fx.entries.len()}), None, None)
}

fn fixture_generation(a: FixtureGenerationArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let query = formats::read_text(&a.query)?;
    let rules_text = formats::read_text(&a.rules)?;
    let doc: serde_json::Value = formats::read_json(&a.plans)?;
    formats::read_plan_set(&a.plans)?;
    let plans = match &doc {
        serde_json::Value::Object(m) => m.get("plans").and_then(|p| p.as_array()).cloned().unwrap_or_default(),
        serde_json::Value::Array(a) => a.clone(),
        _ => Vec::new(),
    };
    let mut g = ReplayGenerator { version: FIXTURE_VERSION, entries: BTreeMap::new() };
    g.record(GenerationKind::Rules, &query, &rules_text);
    let rules = generate_rules(&query, &g).map_err(|e| CliError::Input(format!("{}: {e}", a.rules.display())))?;
    if rules.rules.len() != plans.len() {
        return Err(CliError::Input(format!("{} rules but {} plans", rules.rules.len(), plans.len())));
    }
    for (r, p) in rules.rules.iter().zip(&plans) {
        let body = serde_json::to_string_pretty(p).map_err(|e| CliError::Input(e.to_string()))?;
        g.record(GenerationKind::Plan, &r.text, &body);
    }
    formats::write_json(&a.out, &g)?;
    ctx.emit(&serde_json::json!({"version": FIXTURE_VERSION, "entries": g.entries.len()}), None, None)
}

fn serve(a: ServeArgs, ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let config = ServiceConfig::load(a.config.as_deref()).map_err(|e| CliError::Config(e.to_string()))?;
    ctx.log(&format!("listening on {}:{}", config.bind, config.port));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::service::serve(config, Arc::new(SystemClock))).map_err(CliError::Config)
}
