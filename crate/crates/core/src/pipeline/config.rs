use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::agent::{AgentBackend, HttpBackend, PromptBook, ScriptedBackend};
use crate::experts::{Stage2Options, DEFAULT_COLLABORATIVE_PASSES, DEFAULT_SELF_REFINE_ITERS, DEFAULT_SUPERVISION_ROUNDS};
use crate::gateway::{Endpoint, DEFAULT_IN_FLIGHT};
use crate::mixer::{check_rate, MixOptions};
use crate::plan::AudioType;
use crate::stage1::DEFAULT_PLAN_ROUNDS;
use crate::tools::ToolLibrary;
use crate::tot::{Budget, DEFAULT_MAX_FIX_CHAIN, DEFAULT_MAX_RETRIES};

pub const DEFAULT_PARALLEL: usize = 2;
pub const DEFAULT_TARGET_RATE: u32 = 48_000;

/// Agent backend selector: `scripted:PATH` or `http:URL`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Scripted(PathBuf),
    Http(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(BackendSpec::Http(s.trim_end_matches('/').to_string()));
        }
        if let Some(path) = s.strip_prefix("scripted:") {
            if path.is_empty() {
                return Err("scripted backend needs a path".into());
            }
            return Ok(BackendSpec::Scripted(PathBuf::from(path)));
        }
        if let Some(url) = s.strip_prefix("http:") {
            if url.starts_with("http://") || url.starts_with("https://") {
                return Ok(BackendSpec::Http(url.trim_end_matches('/').to_string()));
            }
            if !url.is_empty() && !url.starts_with('/') {
                return Ok(BackendSpec::Http(format!("http://{}", url.trim_end_matches('/'))));
            }
        }
        Err(format!("backend must be `scripted:PATH` or `http:URL`, got `{s}`"))
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Scripted(p) => write!(f, "scripted:{}", p.display()),
            BackendSpec::Http(url) => write!(f, "http:{url}"),
        }
    }
}

/// `"mock"` (or one URL) for every tool, or a per-tool map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolEndpoints {
    All(Endpoint),
    Map(BTreeMap<String, Endpoint>),
}

impl Default for ToolEndpoints {
    fn default() -> Self {
        ToolEndpoints::All(Endpoint::Mock)
    }
}

impl ToolEndpoints {
    /// Endpoint per library tool. A map must name every tool and nothing else.
    pub fn resolve(&self, library: &ToolLibrary) -> Result<BTreeMap<String, Endpoint>, PipelineError> {
        match self {
            ToolEndpoints::All(e) => Ok(library.ids().map(|id| (id.to_string(), e.clone())).collect()),
            ToolEndpoints::Map(map) => {
                let missing: Vec<&str> = library.ids().filter(|id| !map.contains_key(*id)).collect();
                if !missing.is_empty() {
                    return Err(PipelineError::Config(format!(
                        "no endpoint for {}",
                        missing.join(", ")
                    )));
                }
                if let Some(extra) = map.keys().find(|id| !library.contains(id)) {
                    return Err(PipelineError::Config(format!("endpoint for unknown tool `{extra}`")));
                }
                Ok(map.clone())
            }
        }
    }

    /// Reads a tool map file, or the literal `mock`.
    pub fn from_arg(arg: &str) -> Result<Self, PipelineError> {
        if arg.trim() == "mock" {
            return Ok(ToolEndpoints::All(Endpoint::Mock));
        }
        let text = std::fs::read_to_string(arg).map_err(|e| PipelineError::Config(format!("{arg}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{arg}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: Option<BackendSpec>,
    pub tools: ToolEndpoints,
    /// Tool library file; the built-in library when unset.
    pub library: Option<PathBuf>,
    /// Prompt book file; the built-in prompts when unset.
    pub prompts: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub target_rate: u32,
    /// Events evaluated concurrently in stage 3.
    pub parallel: usize,
    pub tool_in_flight: usize,
    pub plan_rounds: usize,
    pub self_refine_iters: usize,
    pub collaborative_passes: usize,
    pub supervision_rounds: usize,
    pub expert_order: Vec<AudioType>,
    pub max_retries: usize,
    pub max_fix_chain: usize,
    pub max_repairs: usize,
    pub agent_timeout_s: f64,
    pub tool_timeout_s: f64,
    pub limiter: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: None,
            tools: ToolEndpoints::default(),
            library: None,
            prompts: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            target_rate: DEFAULT_TARGET_RATE,
            parallel: DEFAULT_PARALLEL,
            tool_in_flight: DEFAULT_IN_FLIGHT,
            plan_rounds: DEFAULT_PLAN_ROUNDS,
            self_refine_iters: DEFAULT_SELF_REFINE_ITERS,
            collaborative_passes: DEFAULT_COLLABORATIVE_PASSES,
            supervision_rounds: DEFAULT_SUPERVISION_ROUNDS,
            expert_order: AudioType::ALL.to_vec(),
            max_retries: DEFAULT_MAX_RETRIES,
            max_fix_chain: DEFAULT_MAX_FIX_CHAIN,
            max_repairs: crate::agent::DEFAULT_MAX_REPAIRS,
            agent_timeout_s: crate::agent::DEFAULT_TIMEOUT.as_secs_f64(),
            tool_timeout_s: crate::gateway::DEFAULT_TOOL_TIMEOUT.as_secs_f64(),
            limiter: true,
        }
    }
}

fn rebase(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file. Script, library and prompt paths are relative to the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(BackendSpec::Scripted(p)) = &mut config.backend {
            rebase(base, p);
        }
        if let Some(p) = &mut config.library {
            rebase(base, p);
        }
        if let Some(p) = &mut config.prompts {
            rebase(base, p);
        }
        Ok(config)
    }

    pub fn budget(&self) -> Budget {
        Budget {
            max_retries: self.max_retries,
            max_fix_chain: self.max_fix_chain,
        }
    }

    pub fn stage2_options(&self) -> Stage2Options {
        Stage2Options {
            self_refine_iters: self.self_refine_iters,
            collaborative_passes: self.collaborative_passes,
            supervision_rounds: self.supervision_rounds,
            expert_order: self.expert_order.clone(),
        }
    }

    pub fn mix_options(&self) -> MixOptions {
        MixOptions {
            target_rate: self.target_rate,
            limiter: self.limiter,
        }
    }

    pub fn agent_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.agent_timeout_s)
    }

    pub fn tool_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.tool_timeout_s)
    }

    pub fn load_library(&self) -> Result<ToolLibrary, PipelineError> {
        match &self.library {
            Some(p) => ToolLibrary::load(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display()))),
            None => Ok(ToolLibrary::default()),
        }
    }

    pub fn load_prompts(&self) -> Result<PromptBook, PipelineError> {
        match &self.prompts {
            Some(p) => PromptBook::load(p).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(PromptBook::default()),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn AgentBackend>, PipelineError> {
        match &self.backend {
            None => Err(PipelineError::Config("no agent backend configured".into())),
            Some(BackendSpec::Scripted(p)) => Ok(Arc::new(
                ScriptedBackend::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            )),
            Some(BackendSpec::Http(url)) => Ok(Arc::new(HttpBackend::new(url.clone()))),
        }
    }

    /// Checks everything that does not need the backend. Returns the tool endpoints.
    pub fn validate(&self, library: &ToolLibrary) -> Result<BTreeMap<String, Endpoint>, PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = check_rate(self.target_rate) {
            return bad(e.to_string());
        }
        if self.parallel == 0 || self.tool_in_flight == 0 {
            return bad("parallel and tool_in_flight must be at least 1".into());
        }
        if self.plan_rounds == 0 || self.supervision_rounds == 0 {
            return bad("plan_rounds and supervision_rounds must be at least 1".into());
        }
        for (name, v) in [("agent_timeout_s", self.agent_timeout_s), ("tool_timeout_s", self.tool_timeout_s)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let mut order = self.expert_order.clone();
        order.sort();
        order.dedup();
        if order.len() != self.expert_order.len() {
            return bad("expert_order lists a type twice".into());
        }
        self.tools.resolve(library)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_forms() {
        assert_eq!(
            "scripted:a/b.json".parse::<BackendSpec>().unwrap(),
            BackendSpec::Scripted("a/b.json".into())
        );
        assert_eq!(
            "http:http://127.0.0.1:9000/".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://127.0.0.1:9000".into())
        );
        assert_eq!(
            "http:localhost:9000".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://localhost:9000".into())
        );
        assert_eq!(
            "https://x.test".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("https://x.test".into())
        );
        assert!("ftp:x".parse::<BackendSpec>().is_err());
        assert!("scripted:".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let c = RunConfig::from_json(r#"{"backend": "scripted:s.json", "seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.parallel, 2);
        assert_eq!(c.target_rate, 48_000);
        assert_eq!(c.tools, ToolEndpoints::All(Endpoint::Mock));
        assert_eq!(c.budget().max_nodes(), 10);
        assert!(RunConfig::from_json(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn missing_tool_endpoint_is_rejected() {
        let lib = ToolLibrary::default();
        let mut map: BTreeMap<String, Endpoint> = lib.ids().map(|id| (id.to_string(), Endpoint::Mock)).collect();
        let config = RunConfig {
            tools: ToolEndpoints::Map(map.clone()),
            ..Default::default()
        };
        assert_eq!(config.validate(&lib).unwrap().len(), lib.len());

        map.remove("DiffRhythm");
        let config = RunConfig {
            tools: ToolEndpoints::Map(map.clone()),
            ..Default::default()
        };
        let err = config.validate(&lib).unwrap_err();
        assert!(err.to_string().contains("DiffRhythm"), "{err}");
        assert_eq!(err.exit_code(), 2);

        map.insert("DiffRhythm".into(), Endpoint::Mock);
        map.insert("Nope".into(), Endpoint::Mock);
        let config = RunConfig {
            tools: ToolEndpoints::Map(map),
            ..Default::default()
        };
        assert!(config.validate(&lib).is_err());
    }

    #[test]
    fn tool_map_parses_from_json() {
        let t: ToolEndpoints = serde_json::from_str(r#"{"MMAudio": "http://127.0.0.1:1/", "AudioSR": "mock"}"#).unwrap();
        let ToolEndpoints::Map(m) = t else { panic!() };
        assert_eq!(m["MMAudio"], Endpoint::Http("http://127.0.0.1:1".into()));
        let t: ToolEndpoints = serde_json::from_str(r#""mock""#).unwrap();
        assert_eq!(t, ToolEndpoints::All(Endpoint::Mock));
    }

    #[test]
    fn bad_numbers_are_rejected() {
        let lib = ToolLibrary::default();
        for json in [
            r#"{"target_rate": 7}"#,
            r#"{"parallel": 0}"#,
            r#"{"plan_rounds": 0}"#,
            r#"{"agent_timeout_s": 0}"#,
            r#"{"expert_order": ["song", "song"]}"#,
        ] {
            assert!(RunConfig::from_json(json).unwrap().validate(&lib).is_err(), "{json}");
        }
    }

    #[test]
    fn load_rebases_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"backend": "scripted:script.json", "library": "lib.json"}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.backend, Some(BackendSpec::Scripted(dir.path().join("script.json"))));
        assert_eq!(c.library, Some(dir.path().join("lib.json")));
    }
}
