//! Settings resolved from flags, then environment, then the config file.

use std::path::{Path, PathBuf};

use gridfm_core::llm::{
    ChatProvider, LiveConfig, LiveProvider, MockProvider, RecordingProvider, ReplayProvider, DEFAULT_API_BASE,
    DEFAULT_MODEL, ENV_API_BASE, ENV_API_KEY, ENV_MODEL,
};
use gridfm_core::DispatchProblem;
use serde::Deserialize;

use crate::CliError;

pub const ENV_PROVIDER: &str = "GRIDFM_PROVIDER";

/// Contents of the `--config` TOML file. Credentials are never read from it.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub provider: Option<String>,
    pub api_base: Option<String>,
    pub model: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Mock,
    Live,
    Replay(PathBuf),
}

impl ProviderSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "mock" => Ok(Self::Mock),
            "live" | "openai" => Ok(Self::Live),
            other => match other.strip_prefix("replay:") {
                Some(path) if !path.is_empty() => Ok(Self::Replay(path.into())),
                _ => Err(CliError::Usage(format!(
                    "unknown provider `{other}`; expected mock, live or replay:<transcript>"
                ))),
            },
        }
    }
}

/// Which provider a command falls back to when none is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderDefault {
    Live,
    /// Live when a credential is present, otherwise mock.
    Auto,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub provider: ProviderSpec,
    pub api_base: String,
    pub model: String,
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub chat_log: Option<PathBuf>,
}

pub struct Overrides<'a> {
    pub config: Option<&'a Path>,
    pub provider: Option<&'a str>,
    pub api_base: Option<&'a str>,
    pub model: Option<&'a str>,
    pub chat_log: Option<&'a Path>,
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

fn api_key() -> Option<String> {
    env(ENV_API_KEY)
}

pub fn resolve(o: &Overrides<'_>, default: ProviderDefault) -> Result<Resolved, CliError> {
    let file = match o.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let provider = match o.provider.map(str::to_string).or_else(|| env(ENV_PROVIDER)).or(file.provider) {
        Some(name) => ProviderSpec::parse(&name)?,
        None => match default {
            ProviderDefault::Live => ProviderSpec::Live,
            ProviderDefault::Auto if api_key().is_some() => ProviderSpec::Live,
            ProviderDefault::Auto => ProviderSpec::Mock,
        },
    };
    let pick = |flag: Option<&str>, var: &str, file: Option<String>, fallback: &str| {
        flag.map(str::to_string)
            .or_else(|| env(var))
            .or(file)
            .unwrap_or_else(|| fallback.to_string())
    };
    Ok(Resolved {
        provider,
        api_base: pick(o.api_base, ENV_API_BASE, file.api_base, DEFAULT_API_BASE),
        model: pick(o.model, ENV_MODEL, file.model, DEFAULT_MODEL),
        data_dir: file.data_dir,
        port: file.port,
        chat_log: o.chat_log.map(Path::to_path_buf),
    })
}

impl Resolved {
    pub fn live_config(&self) -> Result<LiveConfig, CliError> {
        let key = api_key().ok_or_else(|| {
            CliError::Usage(format!(
                "the live provider needs {ENV_API_KEY}; export it or pass --provider mock"
            ))
        })?;
        Ok(LiveConfig::new(&self.api_base, key, &self.model))
    }

    /// Builds the configured model. The mock answers dispatch prompts
    /// against `dispatch` when one is given.
    pub fn provider(&self, dispatch: Option<&DispatchProblem>) -> Result<Box<dyn ChatProvider>, CliError> {
        let inner: Box<dyn ChatProvider> = match &self.provider {
            ProviderSpec::Mock => match dispatch {
                Some(p) => Box::new(MockProvider::with_dispatch(p.clone())),
                None => Box::new(MockProvider::new()),
            },
            ProviderSpec::Live => Box::new(LiveProvider::new(self.live_config()?)),
            ProviderSpec::Replay(path) => Box::new(ReplayProvider::load(path)?),
        };
        Ok(match &self.chat_log {
            Some(path) => Box::new(RecordingProvider::new(inner, path)),
            None => inner,
        })
    }

    pub fn provider_name(&self) -> &'static str {
        match self.provider {
            ProviderSpec::Mock => "mock",
            ProviderSpec::Live => "live",
            ProviderSpec::Replay(_) => "replay",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_names_parse() {
        assert_eq!(ProviderSpec::parse("mock").unwrap(), ProviderSpec::Mock);
        assert_eq!(ProviderSpec::parse("openai").unwrap(), ProviderSpec::Live);
        assert_eq!(ProviderSpec::parse("replay:t.jsonl").unwrap(), ProviderSpec::Replay("t.jsonl".into()));
        assert!(matches!(ProviderSpec::parse("replay:"), Err(CliError::Usage(_))));
        assert!(matches!(ProviderSpec::parse("gpt"), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "provider = \"mock\"\nmodel = \"file-model\"\napi_base = \"http://file\"\n").unwrap();
        let o = Overrides {
            config: Some(&path),
            provider: None,
            api_base: Some("http://flag"),
            model: None,
            chat_log: None,
        };
        let r = resolve(&o, ProviderDefault::Live).unwrap();
        assert_eq!(r.provider, ProviderSpec::Mock);
        assert_eq!(r.api_base, "http://flag");
        if env(ENV_MODEL).is_none() {
            assert_eq!(r.model, "file-model");
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "api_key = \"secret\"\n").unwrap();
        assert!(matches!(FileConfig::load(&path), Err(CliError::Usage(_))));
    }
}
