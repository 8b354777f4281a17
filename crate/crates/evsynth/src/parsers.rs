//! Extraction and structuring backends: replay fixtures, recording, and a
//! remote text-extraction service client.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use evsynth_core::eligibility::{clause_digest, Clause, ClauseFields, ReferenceStructurer, StructuredCriterion, Structurer};
use evsynth_core::extract::{ExtractionRequest, Parser, ParserError, ReferenceParser};
use serde::{Deserialize, Serialize};

pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("unsupported fixture version {0}")]
    Version(u32),
    #[error("unknown parser `{0}`; expected reference, replay:PATH or remote:CONFIG")]
    Spec(String),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BackendError> {
    let raw = std::fs::read(path).map_err(|source| BackendError::Read { path: path.into(), source })?;
    serde_json::from_slice(&raw).map_err(|e| BackendError::Format { path: path.into(), message: e.to_string() })
}

/// Request digest -> raw response.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub version: u32,
    pub entries: BTreeMap<String, String>,
}

impl ReplayFixture {
    pub fn new() -> Self {
        ReplayFixture { version: FIXTURE_VERSION, entries: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let f: ReplayFixture = read_json(path)?;
        if f.version != FIXTURE_VERSION {
            return Err(BackendError::Version(f.version));
        }
        Ok(f)
    }
}

/// Answers from a fixture; a missing digest is `Unavailable`.
#[derive(Debug, Clone)]
pub struct ReplayParser {
    fixture: Arc<ReplayFixture>,
}

impl ReplayParser {
    pub fn new(fixture: ReplayFixture) -> Self {
        ReplayParser { fixture: Arc::new(fixture) }
    }
}

impl Parser for ReplayParser {
    fn id(&self) -> &str {
        "replay"
    }

    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        let digest = request.digest();
        self.fixture
            .entries
            .get(&digest)
            .cloned()
            .ok_or_else(|| ParserError::Unavailable(format!("no recorded response for {digest}")))
    }
}

/// Wraps a parser and keeps every successful exchange for later replay.
/// The first response for a digest wins.
pub struct RecordingParser<P> {
    inner: P,
    recorded: Mutex<ReplayFixture>,
}

impl<P: Parser> RecordingParser<P> {
    pub fn new(inner: P) -> Self {
        RecordingParser { inner, recorded: Mutex::new(ReplayFixture::new()) }
    }

    pub fn fixture(&self) -> ReplayFixture {
        self.recorded.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl<P: Parser> Parser for RecordingParser<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        let raw = self.inner.parse(request)?;
        self.recorded
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entries
            .entry(request.digest())
            .or_insert_with(|| raw.clone());
        Ok(raw)
    }
}

/// Remote endpoint settings, read from a TOML file. The credential itself is
/// never stored in the file, only the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_max_output")]
    pub max_output_length: u32,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_max_output() -> u32 {
    64
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    30
}
fn default_backoff() -> u64 {
    500
}

impl RemoteConfig {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path).map_err(|source| BackendError::Read { path: path.into(), source })?;
        toml::from_str(&raw).map_err(|e| BackendError::Format { path: path.into(), message: e.to_string() })
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    model: &'a str,
    instruction: &'a str,
    input: &'a str,
    max_output_length: u32,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    text: String,
}

/// Client for a text-extraction service:
/// `POST {model, instruction, input, max_output_length}` -> `{text}`.
/// HTTP 429 and 5xx are retried up to `max_retries` times with linear
/// backoff, then reported as `Unavailable`.
pub struct RemoteParser {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteParser {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = config.api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
        RemoteParser { config, agent, api_key }
    }

    fn call(&self, request: &ExtractionRequest) -> Result<Option<String>, ParserError> {
        let body = RemoteRequest {
            model: &self.config.model,
            instruction: &request.instruction,
            input: &request.attended_text,
            max_output_length: self.config.max_output_length,
        };
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| ParserError::Unavailable(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Ok(None);
        }
        if status >= 400 {
            return Err(ParserError::Unavailable(format!("HTTP {status}")));
        }
        let parsed: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ParserError::Unavailable(format!("response body: {e}")))?;
        Ok(Some(parsed.text))
    }
}

impl Parser for RemoteParser {
    fn id(&self) -> &str {
        "remote"
    }

    fn parse(&self, request: &ExtractionRequest) -> Result<String, ParserError> {
        for attempt in 0..=self.config.max_retries {
            if let Some(text) = self.call(request)? {
                return Ok(text);
            }
            if attempt < self.config.max_retries {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms * u64::from(attempt + 1)));
            }
        }
        Err(ParserError::Unavailable(format!(
            "rate limited or server error after {} retries",
            self.config.max_retries
        )))
    }
}

/// `--parser` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParserSpec {
    Reference,
    Replay(PathBuf),
    Remote(PathBuf),
}

impl FromStr for ParserSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "reference" {
            return Ok(ParserSpec::Reference);
        }
        match s.split_once(':') {
            Some(("replay", p)) if !p.is_empty() => Ok(ParserSpec::Replay(p.into())),
            Some(("remote", p)) if !p.is_empty() => Ok(ParserSpec::Remote(p.into())),
            _ => Err(BackendError::Spec(s.to_string())),
        }
    }
}

impl std::fmt::Display for ParserSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParserSpec::Reference => f.write_str("reference"),
            ParserSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            ParserSpec::Remote(p) => write!(f, "remote:{}", p.display()),
        }
    }
}

impl ParserSpec {
    pub fn build(&self) -> Result<Arc<dyn Parser>, BackendError> {
        Ok(match self {
            ParserSpec::Reference => Arc::new(ReferenceParser),
            ParserSpec::Replay(p) => Arc::new(ReplayParser::new(ReplayFixture::load(p)?)),
            ParserSpec::Remote(p) => Arc::new(RemoteParser::new(RemoteConfig::load(p)?)),
        })
    }

    /// Structuring backend for the same spec. Remote structuring is not
    /// offered; recorded tuples are replayed instead.
    pub fn build_structurer(&self) -> Result<Arc<dyn Structurer>, BackendError> {
        Ok(match self {
            ParserSpec::Reference => Arc::new(ReferenceStructurer),
            ParserSpec::Replay(p) => Arc::new(ReplayStructurer::new(StructureFixture::load(p)?)),
            ParserSpec::Remote(_) => return Err(BackendError::Spec(self.to_string())),
        })
    }
}

/// Clause digest -> structured fields.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructureFixture {
    pub version: u32,
    pub entries: BTreeMap<String, ClauseFields>,
}

impl StructureFixture {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let f: StructureFixture = read_json(path)?;
        if f.version != FIXTURE_VERSION {
            return Err(BackendError::Version(f.version));
        }
        Ok(f)
    }

    /// Records reviewed tuples so that structuring their source text replays them.
    pub fn from_criteria<'a>(criteria: impl IntoIterator<Item = &'a StructuredCriterion>) -> Self {
        let mut entries = BTreeMap::new();
        for c in criteria {
            let clause = Clause { kind: c.kind, sentence: c.sentence.clone() };
            entries.entry(clause_digest(&clause)).or_insert_with(|| ClauseFields {
                entity: c.entity.clone(),
                attribute: c.attribute.clone(),
                value: c.value.clone(),
                condition: c.condition.clone(),
            });
        }
        StructureFixture { version: FIXTURE_VERSION, entries }
    }
}

pub struct ReplayStructurer {
    fixture: StructureFixture,
}

impl ReplayStructurer {
    pub fn new(fixture: StructureFixture) -> Self {
        ReplayStructurer { fixture }
    }
}

impl Structurer for ReplayStructurer {
    fn id(&self) -> &str {
        "replay"
    }

    fn structure(&self, clause: &Clause) -> Result<ClauseFields, ParserError> {
        let d = clause_digest(clause);
        self.fixture
            .entries
            .get(&d)
            .cloned()
            .ok_or_else(|| ParserError::Unavailable(format!("no recorded structure for {d}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use evsynth_core::extract::{extract, ExpectedKind};
    use evsynth_core::CriterionKind;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn spec_parsing() {
        assert_eq!("reference".parse::<ParserSpec>().unwrap(), ParserSpec::Reference);
        assert_eq!("replay:a.json".parse::<ParserSpec>().unwrap(), ParserSpec::Replay("a.json".into()));
        assert_eq!("remote:c.toml".parse::<ParserSpec>().unwrap().to_string(), "remote:c.toml");
        assert!("replay:".parse::<ParserSpec>().is_err());
        assert!("llm".parse::<ParserSpec>().is_err());
    }

    #[test]
    fn record_then_replay_is_identical() {
        let requests = [
            ExtractionRequest::new("Extract the number of enrolled patients.", "Enrollment: 738", ExpectedKind::Number),
            ExtractionRequest::new("Is it phase 3?", "Phase: PHASE3", ExpectedKind::BooleanYesNo),
        ];
        let rec = RecordingParser::new(ReferenceParser);
        let live: Vec<_> = requests.iter().map(|r| extract(r, &rec).unwrap()).collect();
        let replay = ReplayParser::new(rec.fixture());
        for (r, l) in requests.iter().zip(&live) {
            let v = extract(r, &replay).unwrap();
            assert_eq!(v.value(), l.value());
            assert_eq!(v.raw(), l.raw());
            assert_eq!(v.provenance().parser_id, "replay");
        }
        let missing = ExtractionRequest::new("x", "y", ExpectedKind::Number);
        assert!(matches!(replay.parse(&missing), Err(ParserError::Unavailable(_))));
    }

    /// Serves the given raw HTTP responses, one per connection.
    fn serve(responses: Vec<&'static str>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}/extract", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for resp in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = vec![0u8; 8192];
                let mut got = Vec::new();
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    got.extend_from_slice(&buf[..n]);
                    let s = String::from_utf8_lossy(&got);
                    if let Some(h) = s.find("\r\n\r\n") {
                        let len = s[..h]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if got.len() >= h + 4 + len {
                            bodies.push(s[h + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    fn config(endpoint: String) -> RemoteConfig {
        RemoteConfig {
            endpoint,
            model: "m1".into(),
            max_output_length: 16,
            api_key_env: None,
            max_retries: 2,
            timeout_secs: 5,
            backoff_ms: 1,
        }
    }

    #[test]
    fn remote_success_after_rate_limit() {
        let (addr, h) = serve(vec![
            "HTTP/1.1 429 Too Many Requests\r\ncontent-length: 0\r\nconnection: close\r\n\r\n",
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: 15\r\nconnection: close\r\n\r\n{\"text\": \"738\"}",
        ]);
        let p = RemoteParser::new(config(addr));
        let r = ExtractionRequest::new("count", "Enrollment: 738", ExpectedKind::Number);
        assert_eq!(p.parse(&r).unwrap(), "738");
        let bodies = h.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["input"], "Enrollment: 738");
        assert_eq!(sent["max_output_length"], 16);
    }

    #[test]
    fn remote_gives_up_after_bounded_retries() {
        let r429 = "HTTP/1.1 429 Too Many Requests\r\ncontent-length: 0\r\nconnection: close\r\n\r\n";
        let (addr, h) = serve(vec![r429, r429, r429]);
        let p = RemoteParser::new(config(addr));
        let r = ExtractionRequest::new("count", "x", ExpectedKind::Number);
        assert!(matches!(p.parse(&r), Err(ParserError::Unavailable(_))));
        assert_eq!(h.join().unwrap().len(), 3);
    }

    #[test]
    fn structure_fixture_round_trip() {
        let c = StructuredCriterion {
            kind: CriterionKind::Inclusion,
            entity: "biomarker".into(),
            attribute: "germline-brca".into(),
            value: "deleterious".into(),
            condition: String::new(),
            sentence: "Documented gBRCA mutation".into(),
        };
        let s = ReplayStructurer::new(StructureFixture::from_criteria([&c]));
        let f = s.structure(&Clause { kind: CriterionKind::Inclusion, sentence: c.sentence.clone() }).unwrap();
        assert_eq!(f.attribute, "germline-brca");
        assert!(s.structure(&Clause { kind: CriterionKind::Exclusion, sentence: c.sentence }).is_err());
    }
}
