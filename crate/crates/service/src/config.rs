//! TOML service configuration with environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use homegate_core::backend::{BackendConfig, MockRules};
use homegate_core::kb::DEFAULT_KB_CAPACITY;
use homegate_core::memory::DEFAULT_HISTORY_CAPACITY;
use homegate_core::prompting::PromptTemplate;
use homegate_core::{Label, Locale, PipelineConfig};

/// Classifier selection. `mock` needs no network and is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock(MockRules),
    Http(BackendConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock(MockRules::always(Label::Reject))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub backend: BackendSpec,
    pub pipeline: PipelineConfig,
    /// Optional prompt template file; relative paths resolve against the config file.
    pub template_path: Option<PathBuf>,
    /// When set, history/kb lookups for households with no data return 404.
    pub strict_households: bool,
    /// Name of the env var holding the shared bearer token. Unset disables auth.
    pub auth_token_env: Option<String>,
    pub history_capacity: usize,
    pub kb_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            backend: BackendSpec::default(),
            pipeline: PipelineConfig::default(),
            template_path: None,
            strict_households: false,
            auth_token_env: None,
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            kb_capacity: DEFAULT_KB_CAPACITY,
        }
    }
}

/// Environment variables consulted by [`ServiceConfig::apply_env`].
pub const ENV_LISTEN: &str = "HOMEGATE_LISTEN";
pub const ENV_DATA_DIR: &str = "HOMEGATE_DATA_DIR";
pub const ENV_LOCALE: &str = "HOMEGATE_LOCALE";
pub const ENV_BASE_URL: &str = "HOMEGATE_BASE_URL";
pub const ENV_MODEL: &str = "HOMEGATE_MODEL";

impl ServiceConfig {
    /// Reads a TOML file. Relative paths inside it are resolved against its directory.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if let Some(t) = &cfg.template_path {
            if t.is_relative() {
                cfg.template_path = Some(base.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Applies overrides from `get` (normally `std::env::var`).
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(v) = get(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = get(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_LOCALE) {
            self.pipeline.locale = match v.as_str() {
                "zh" => Locale::Zh,
                "en" => Locale::En,
                other => bail!("{ENV_LOCALE}: unknown locale {other:?}"),
            };
        }
        let url = get(ENV_BASE_URL);
        let model = get(ENV_MODEL);
        if url.is_some() || model.is_some() {
            let mut http = match &self.backend {
                BackendSpec::Http(c) => c.clone(),
                BackendSpec::Mock(_) => BackendConfig::default(),
            };
            if let Some(u) = url {
                http.base_url = u;
            }
            if let Some(m) = model {
                http.model_name = m;
            }
            self.backend = BackendSpec::Http(http);
        }
        Ok(())
    }

    /// Loads the template, if any, after checking it has every placeholder.
    pub fn template(&self) -> anyhow::Result<Option<PromptTemplate>> {
        let Some(path) = &self.template_path else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("template {}", path.display()))?;
        let t = PromptTemplate::parse(text).with_context(|| format!("template {}", path.display()))?;
        Ok(Some(t))
    }

    /// Fail-fast validation of everything that can be checked before serving.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.listen
            .parse::<std::net::SocketAddr>()
            .with_context(|| format!("listen address {:?}", self.listen))?;
        self.pipeline.validate()?;
        if self.history_capacity == 0 || self.kb_capacity == 0 {
            bail!("history_capacity and kb_capacity must be positive");
        }
        if let BackendSpec::Http(c) = &self.backend {
            c.validate()?;
        }
        self.template()?;
        if let Some(var) = &self.auth_token_env {
            match std::env::var(var) {
                Ok(t) if !t.is_empty() => {}
                _ => bail!("auth_token_env names {var}, which is unset or empty"),
            }
        }
        std::fs::create_dir_all(&self.data_dir)
            .with_context(|| format!("creating data dir {}", self.data_dir.display()))?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .with_context(|| format!("data dir {} is not writable", self.data_dir.display()))?;
        let _ = std::fs::remove_file(probe);
        Ok(())
    }

    pub fn auth_token(&self) -> Option<String> {
        self.auth_token_env.as_ref().and_then(|v| std::env::var(v).ok())
    }
}
