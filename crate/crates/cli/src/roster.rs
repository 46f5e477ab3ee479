//! Roster and provider resolution shared by `repl` and `serve`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use polyphony_core::coordinator::{GatewayScorer, RuleScorer, Scorer, Threshold};
use polyphony_core::executor::{ClockMode, RemoteBackend};
use polyphony_core::gateway::{AuditedGateway, Gateway, ProviderConfig, ProviderKind, ScriptedMock};
use polyphony_core::harness::{builtin_fixture, builtin_scenario, ScenarioConfig, ScorerChoice, BUILTIN_PREFIX, CONFIG_VERSION};
use polyphony_core::identity::{validate_roster, AgentProfile};
use polyphony_core::memory::{MemoryStore, DEFAULT_TOP_K, DEFAULT_WINDOW};
use polyphony_core::session::{Session, SessionConfig};
use serde::{Deserialize, Serialize};

use crate::{Failure, LiveArgs};

pub const DEFAULT_FIXTURE: &str = "builtin:coordination.jsonl";
const ROBOT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

fn version() -> u32 {
    CONFIG_VERSION
}
fn enabled() -> bool {
    true
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_fixture() -> String {
    DEFAULT_FIXTURE.to_string()
}

/// The agent group and toggles of a live session, without a script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterConfig {
    #[serde(default = "version")]
    pub v: u32,
    pub agents: Vec<AgentProfile>,
    #[serde(default = "enabled")]
    pub coordination_enabled: bool,
    #[serde(default = "enabled")]
    pub longterm_memory_enabled: bool,
    #[serde(default)]
    pub threshold: Threshold,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub scorer: ScorerChoice,
    /// Mock fixture used when no provider is configured.
    #[serde(default = "default_fixture")]
    pub fixture: String,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RosterConfig {
    fn from_scenario(s: ScenarioConfig) -> Self {
        Self {
            v: s.v,
            agents: s.agents,
            coordination_enabled: s.coordination_enabled,
            longterm_memory_enabled: s.longterm_memory_enabled,
            threshold: s.threshold,
            window: s.window,
            clock: s.clock,
            scorer: s.scorer,
            fixture: s.fixture,
            base_dir: s.base_dir,
        }
    }

    /// `builtin:<scenario id>`, a roster file, or a scenario file (whose
    /// script is ignored).
    pub fn resolve(source: &str) -> Result<Self, Failure> {
        if let Some(id) = source.strip_prefix(BUILTIN_PREFIX) {
            return builtin_scenario(id)
                .map(Self::from_scenario)
                .ok_or_else(|| Failure::usage(format!("--agents: no built-in scenario {id:?}")));
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut roster = if value.get("sessions").is_some() {
            Self::from_scenario(ScenarioConfig::from_json(&text)?)
        } else {
            serde_json::from_value::<RosterConfig>(value).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        };
        roster.base_dir = path.parent().map(Path::to_path_buf);
        roster.validate()?;
        Ok(roster)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.v != CONFIG_VERSION {
            return Err(Failure::usage(format!("v: unsupported version {}", self.v)));
        }
        if self.window == 0 {
            return Err(Failure::usage("window: must be at least 1"));
        }
        validate_roster(&self.profiles()).map_err(|v| Failure::Usage(polyphony_core::error::ConfigError::from(v).to_string()))
    }

    pub fn profiles(&self) -> Vec<AgentProfile> {
        self.agents.iter().cloned().map(AgentProfile::normalized).collect()
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            coordination_enabled: self.coordination_enabled,
            longterm_memory_enabled: self.longterm_memory_enabled,
            threshold: self.threshold,
            window: self.window,
            top_k: DEFAULT_TOP_K,
            clock: self.clock,
        }
    }

    fn fixture_mock(&self) -> Result<ScriptedMock, Failure> {
        let text = match self.fixture.strip_prefix(BUILTIN_PREFIX) {
            Some(name) => builtin_fixture(name)
                .ok_or_else(|| Failure::usage(format!("fixture: no builtin fixture {name:?}")))?
                .to_string(),
            None => {
                let p = match &self.base_dir {
                    Some(b) if Path::new(&self.fixture).is_relative() => b.join(&self.fixture),
                    _ => PathBuf::from(&self.fixture),
                };
                std::fs::read_to_string(&p).map_err(|e| Failure::usage(format!("fixture: {}: {e}", p.display())))?
            }
        };
        ScriptedMock::parse(&text).map_err(|e| Failure::usage(format!("fixture: {e}")))
    }
}

/// Reads a provider config file. A relative fixture path is taken relative
/// to the file.
pub fn load_provider(path: &Path) -> Result<ProviderConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut cfg: ProviderConfig =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let (Some(f), Some(base)) = (&cfg.fixture, path.parent()) {
        if f.is_relative() && !f.as_os_str().is_empty() {
            cfg.fixture = Some(base.join(f));
        }
    }
    Ok(cfg)
}

pub fn build_provider(cfg: &ProviderConfig) -> Result<Arc<dyn Gateway>, Failure> {
    cfg.build().map_err(|e| Failure::usage(format!("provider: {e}")))
}

/// Provider precedence: `--provider`, then the environment, then the
/// roster's mock fixture. A mock provider without a fixture also falls back
/// to the roster's fixture.
pub fn resolve_gateway(provider: Option<&Path>, roster: &RosterConfig) -> Result<(Arc<dyn Gateway>, String), Failure> {
    let cfg = match provider {
        Some(p) => Some(load_provider(p)?),
        None => ProviderConfig::from_env().map_err(|e| Failure::usage(e.to_string()))?,
    };
    match cfg {
        Some(c) if c.provider == ProviderKind::OpenaiCompatible => Ok((build_provider(&c)?, "openai_compatible".into())),
        Some(c) if c.fixture.as_ref().is_some_and(|f| !f.as_os_str().is_empty()) => {
            Ok((build_provider(&c)?, "scripted_mock".into()))
        }
        Some(c) => Ok((Arc::new(roster.fixture_mock()?.with_dimension(c.dimension)), "scripted_mock".into())),
        None => Ok((Arc::new(roster.fixture_mock()?), "scripted_mock".into())),
    }
}

/// Builds sessions that share one gateway and one long-term store, each
/// with its own request audit.
pub struct SessionFactory {
    pub roster: RosterConfig,
    pub gateway: Arc<dyn Gateway>,
    pub memory: Arc<MemoryStore>,
    pub provider_label: String,
    robots: Vec<(String, String)>,
}

impl SessionFactory {
    pub fn from_args(args: &LiveArgs) -> Result<Self, Failure> {
        let roster = RosterConfig::resolve(&args.agents)?;
        let (gateway, provider_label) = resolve_gateway(args.provider.as_deref(), &roster)?;
        let memory = Arc::new(match &args.data_dir {
            Some(d) => MemoryStore::open(d, gateway.clone()).map_err(|e| Failure::runtime(format!("{}: {e}", d.display())))?,
            None => MemoryStore::in_memory(gateway.clone()),
        });
        let ids: Vec<String> = roster.profiles().into_iter().map(|a| a.agent_id).collect();
        let mut robots = Vec::new();
        for r in &args.robots {
            let (agent, addr) = r
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--robot {r:?}: expected AGENT=HOST:PORT")))?;
            if !ids.iter().any(|id| id == agent) {
                return Err(Failure::usage(format!("--robot: unknown agent {agent:?}")));
            }
            robots.push((agent.to_string(), addr.to_string()));
        }
        Ok(Self {
            roster,
            gateway,
            memory,
            provider_label,
            robots,
        })
    }

    pub fn new_session(&self, session_id: &str) -> Result<(Session, Arc<AuditedGateway>), Failure> {
        let audit = Arc::new(AuditedGateway::new(self.gateway.clone()));
        let scorer: Box<dyn Scorer> = match self.roster.scorer {
            ScorerChoice::Rules => Box::new(RuleScorer),
            ScorerChoice::Gateway => Box::new(GatewayScorer::new(audit.clone())),
        };
        let mut session = Session::new(
            session_id,
            self.roster.profiles(),
            audit.clone(),
            self.memory.clone(),
            scorer,
            self.roster.session_config(),
        )?;
        for (agent, addr) in &self.robots {
            let backend = RemoteBackend::connect(addr.as_str(), ROBOT_CONNECT_TIMEOUT)
                .map_err(|e| Failure::runtime(format!("robot {agent} at {addr}: {e}")))?;
            session.set_backend(agent, Box::new(backend))?;
        }
        Ok((session, audit))
    }
}
