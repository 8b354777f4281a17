//! Service configuration: a TOML file plus `EVSYNTH_*` environment
//! overrides. Environment wins.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "EVSYNTH_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Directory holding corpus JSON files referenced by runs.
    pub corpus_root: PathBuf,
    /// Directory holding one subdirectory per run.
    pub run_root: PathBuf,
    /// `reference`, `replay:PATH` or `remote:CONFIG`.
    pub parser: String,
    /// Optional rule/plan generator fixture (`replay:PATH` or `remote:CONFIG`).
    pub generator: Option<String>,
    pub drug_library: Option<PathBuf>,
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            corpus_root: "corpora".into(),
            run_root: "runs".into(),
            parser: "reference".into(),
            generator: None,
            drug_library: None,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid bind address {0}")]
    Bind(String),
}

impl ServiceConfig {
    pub fn from_toml(raw: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(raw).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })
    }

    /// Loads `path` (or `$EVSYNTH_CONFIG`, or defaults) and applies the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with("EVSYNTH_")).collect();
        let from_env = env.get(CONFIG_ENV).map(PathBuf::from);
        let mut cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let raw = std::fs::read_to_string(&p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
                Self::from_toml(&raw, &p)?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(&env)?;
        Ok(cfg)
    }

    /// Overrides from `EVSYNTH_BIND`, `EVSYNTH_PORT`, `EVSYNTH_CORPUS_ROOT`,
    /// `EVSYNTH_RUN_ROOT`, `EVSYNTH_PARSER`, `EVSYNTH_GENERATOR`,
    /// `EVSYNTH_DRUG_LIBRARY` and `EVSYNTH_CORS_ORIGINS` (comma-separated).
    pub fn apply_env(&mut self, env: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in env {
            match k.as_str() {
                "EVSYNTH_BIND" => self.bind = v.clone(),
                "EVSYNTH_PORT" => {
                    self.port = v.parse().map_err(|_| ConfigError::Env { var: k.clone(), message: format!("`{v}` is not a port") })?
                }
                "EVSYNTH_CORPUS_ROOT" => self.corpus_root = v.into(),
                "EVSYNTH_RUN_ROOT" => self.run_root = v.into(),
                "EVSYNTH_PARSER" => self.parser = v.clone(),
                "EVSYNTH_GENERATOR" => self.generator = Some(v.clone()).filter(|s| !s.is_empty()),
                "EVSYNTH_DRUG_LIBRARY" => self.drug_library = Some(v.into()),
                "EVSYNTH_CORS_ORIGINS" => {
                    self.cors_origins = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> Result<SocketAddr, ConfigError> {
        format!("{}:{}", self.bind, self.port).parse().map_err(|_| ConfigError::Bind(format!("{}:{}", self.bind, self.port)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_then_env() {
        let mut c = ServiceConfig::from_toml(
            "port = 9000\nparser = \"replay:fx.json\"\ncors_origins = [\"http://localhost:5173\"]\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.bind, "127.0.0.1");
        let env = BTreeMap::from([
            ("EVSYNTH_PORT".to_string(), "9100".to_string()),
            ("EVSYNTH_CORS_ORIGINS".to_string(), "http://a, http://b".to_string()),
        ]);
        c.apply_env(&env).unwrap();
        assert_eq!(c.port, 9100);
        assert_eq!(c.cors_origins, vec!["http://a", "http://b"]);
        assert_eq!(c.socket_addr().unwrap().port(), 9100);
        let bad = BTreeMap::from([("EVSYNTH_PORT".to_string(), "x".to_string())]);
        assert!(c.apply_env(&bad).is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ServiceConfig::from_toml("prot = 1\n", Path::new("c.toml")).is_err());
    }
}
