//! Run configuration: a JSON file with `${VAR}` interpolation in string
//! values. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use hopdebate_core::classifier::ClassifierConfig;
use hopdebate_core::debate::DebateConfig;
use hopdebate_core::gateway::HttpConfig;
use hopdebate_core::operators::OperatorBudget;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {0} referenced by the config is not set")]
    MissingEnv(String),
    #[error("unterminated ${{...}} in {0:?}")]
    Unterminated(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Mock { script: PathBuf },
    Http(HttpConfig),
}

impl BackendSpec {
    /// Parses a command-line backend override: `mock:<script>` or
    /// `http:<base url>`. The http form keeps `model` from `current` when
    /// it is also http.
    pub fn from_flag(flag: &str, current: Option<&BackendSpec>, model: Option<&str>) -> Result<Self, ConfigError> {
        let (kind, rest) = flag
            .split_once(':')
            .ok_or_else(|| ConfigError::Invalid(format!("backend {flag:?} is not mock:<script> or http:<url>")))?;
        match kind {
            "mock" => Ok(BackendSpec::Mock { script: PathBuf::from(rest) }),
            "http" => {
                let mut cfg = match current {
                    Some(BackendSpec::Http(c)) => c.clone(),
                    _ => HttpConfig::new("", ""),
                };
                cfg.base_url = rest.to_string();
                if let Some(m) = model {
                    cfg.model = m.to_string();
                }
                Ok(BackendSpec::Http(cfg))
            }
            _ => Err(ConfigError::Invalid(format!("unknown backend kind {kind:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: Option<BackendSpec>,
    /// Classifier config file; the bundled ICL config when absent.
    pub classifier: Option<PathBuf>,
    pub debate: DebateConfig,
    pub budget: OperatorBudget,
    /// Serialized index written by `ingest`.
    pub index: Option<PathBuf>,
    /// Corpus JSONL indexed in memory when no index file is given.
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Questions answered at once during `eval`.
    pub concurrency: usize,
    pub executor_temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: None,
            classifier: None,
            debate: DebateConfig::default(),
            budget: OperatorBudget::default(),
            index: None,
            corpus: None,
            output_dir: PathBuf::from("runs"),
            concurrency: 4,
            executor_temperature: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, |k| std::env::var(k).ok()).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(
        text: &str,
        base_dir: &Path,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let parse = |message: String| ConfigError::Parse {
            path: PathBuf::new(),
            message,
        };
        let mut value: Value = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
        interpolate_value(&mut value, &env)?;
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(BackendSpec::Mock { script }) = &mut self.backend {
            fix(script);
        }
        for p in [&mut self.classifier, &mut self.index, &mut self.corpus].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Checks everything that can be checked without a backend call.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.backend {
            None => return Err(ConfigError::Invalid("no backend configured".into())),
            Some(BackendSpec::Mock { script }) if script.as_os_str().is_empty() => {
                return Err(ConfigError::Invalid("mock backend requires a script path".into()))
            }
            Some(BackendSpec::Http(h)) if h.base_url.trim().is_empty() || h.model.trim().is_empty() => {
                return Err(ConfigError::Invalid("http backend requires base_url and model".into()))
            }
            Some(BackendSpec::Http(h)) if h.max_in_flight == 0 => {
                return Err(ConfigError::Invalid("max_in_flight must be at least 1".into()))
            }
            _ => {}
        }
        self.debate.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.budget.validate().map_err(ConfigError::Invalid)?;
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        if !self.executor_temperature.is_finite() || self.executor_temperature < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "invalid executor temperature {}",
                self.executor_temperature
            )));
        }
        self.classifier_config()?;
        Ok(())
    }

    pub fn classifier_config(&self) -> Result<ClassifierConfig, ConfigError> {
        match &self.classifier {
            Some(p) => ClassifierConfig::from_file(p).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(ClassifierConfig::default()),
        }
    }
}

/// Replaces every `${NAME}` in `s` with `env(NAME)`.
pub fn interpolate(s: &str, env: &impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| ConfigError::Unterminated(s.to_string()))?;
        let name = &after[..end];
        out.push_str(&env(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: &mut Value, env: &impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    match v {
        Value::String(s) if s.contains("${") => *s = interpolate(s, env)?,
        Value::Array(items) => {
            for item in items {
                interpolate_value(item, env)?;
            }
        }
        Value::Object(map) => {
            for item in map.values_mut() {
                interpolate_value(item, env)?;
            }
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(k: &str) -> Option<String> {
        (k == "HOST").then(|| "example.test".to_string())
    }

    #[test]
    fn interpolates_and_resolves() {
        let cfg = RunConfig::from_json(
            r#"{"backend":{"kind":"http","base_url":"https://${HOST}/v1","model":"m"},"index":"idx.json"}"#,
            Path::new("/etc/run"),
            env,
        )
        .unwrap();
        match cfg.backend.as_ref().unwrap() {
            BackendSpec::Http(h) => assert_eq!(h.base_url, "https://example.test/v1"),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.index.as_deref(), Some(Path::new("/etc/run/idx.json")));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn missing_variable_is_an_error() {
        let err = RunConfig::from_json(r#"{"output_dir":"${NOPE}"}"#, Path::new("."), env).unwrap_err();
        assert!(matches!(err, ConfigError::MissingEnv(ref v) if v == "NOPE"));
        assert!(matches!(interpolate("${OPEN", &env), Err(ConfigError::Unterminated(_))));
    }

    #[test]
    fn backend_invariants() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.backend = Some(BackendSpec::Mock { script: PathBuf::new() });
        assert!(cfg.validate().is_err());
        cfg.backend = Some(BackendSpec::Http(HttpConfig::new("http://x", "")));
        assert!(cfg.validate().is_err());
        cfg.backend = Some(BackendSpec::from_flag("mock:s.json", None, None).unwrap());
        assert!(cfg.validate().is_ok());
        cfg.budget.k_docs = 50;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"bakend":{}}"#, Path::new("."), env).is_err());
    }

    #[test]
    fn http_flag_keeps_model() {
        let cur = BackendSpec::Http(HttpConfig::new("http://old", "m1"));
        match BackendSpec::from_flag("http:http://new", Some(&cur), None).unwrap() {
            BackendSpec::Http(h) => assert_eq!((h.base_url.as_str(), h.model.as_str()), ("http://new", "m1")),
            other => panic!("{other:?}"),
        }
        assert!(BackendSpec::from_flag("grpc:x", None, None).is_err());
    }
}
