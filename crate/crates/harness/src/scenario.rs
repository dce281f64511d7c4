//! Scenario scripts: data files describing client actions and the security
//! outcomes each step must produce.

use std::collections::BTreeMap;

use msag_core::audit::EventFilter;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::client::ClientKind;
use crate::topology::TopologySpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub topology: TopologyRef,
    #[serde(default)]
    pub actors: BTreeMap<String, ActorSpec>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyRef {
    Named(String),
    Custom(Box<TopologySpec>),
}

impl Default for TopologyRef {
    fn default() -> Self {
        TopologyRef::Named("standard".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub kind: ClientKind,
    #[serde(default)]
    pub account: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default)]
    pub actor: Option<String>,
    pub action: String,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_state: Option<String>,
    /// Events emitted while the step ran.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventExpect>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent_events: Vec<String>,
    /// Ordered subsequence of the step's events, as `event_type` or
    /// `component:event_type`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<String>,
    /// Headers on the last request any mock upstream received in this step.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub upstream_headers: BTreeMap<String, String>,
    /// Headers no upstream request in this step may carry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub upstream_absent_headers: Vec<String>,
    /// Whether any mock upstream received a request in this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forwarded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Status code histogram for parallel steps.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub statuses: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_actions: Option<usize>,
    /// Refreshes the actor performed during this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_refreshes: Option<u32>,
    /// Password grants the actor has performed so far.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password_grants: Option<u32>,
    /// Key id of the actor's access token after the step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    /// Active signing key after the step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_kid: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventExpect {
    #[serde(rename = "type")]
    pub event_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, String>,
    /// Exact number of matches; otherwise at least one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    #[default]
    Gateway,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Public,
    Private,
    Sts,
    Facade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacadeMode {
    #[default]
    None,
    Valid,
    WrongKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperMode {
    FlipPayloadBit,
    FlipSignatureBit,
    EscalateScopes,
    EscalateTier,
    Garble,
}

fn get() -> String {
    "GET".into()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoginParams {
    #[serde(default)]
    pub password: Option<String>,
    #[serde(default)]
    pub via: Via,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestParams {
    pub path: String,
    #[serde(default = "get")]
    pub method: String,
    /// Token reference or literal; overrides the client's own token and
    /// disables automatic refresh.
    #[serde(default)]
    pub bearer: Option<String>,
    #[serde(default)]
    pub auto_refresh: Option<bool>,
    #[serde(default)]
    pub body: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefreshParams {
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub via: Via,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectParams {
    pub target: Target,
    pub path: String,
    #[serde(default = "get")]
    pub method: String,
    #[serde(default)]
    pub bearer: Option<String>,
    #[serde(default)]
    pub facade: FacadeMode,
    #[serde(default)]
    pub form: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperParams {
    pub token: String,
    pub mode: TamperMode,
    #[serde(default)]
    pub scopes: Vec<String>,
    /// Stash name, or `$actor.access` / `$actor.refresh` to overwrite the
    /// actor's stored token.
    pub save_as: String,
    #[serde(default)]
    pub bit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubAction {
    #[serde(default)]
    pub actor: Option<String>,
    pub action: String,
    #[serde(default)]
    pub params: Value,
    /// Repeat this sub-action `times` times.
    #[serde(default = "one")]
    pub times: usize,
}

fn one() -> usize {
    1
}

/// Parsed form of a step's action and params.
#[derive(Debug, Clone)]
pub enum Action {
    Login(LoginParams),
    ClientCredentials(LoginParams),
    Request(RequestParams),
    Refresh(RefreshParams),
    AdvanceClock { seconds: i64 },
    RotateKeys { force: bool },
    Revoke { jti: Option<String>, token: Option<String>, sub: Option<String> },
    TamperToken(TamperParams),
    KillSts,
    AnomalyScan,
    Parallel(Vec<SubAction>),
    Direct(DirectParams),
    VerifyLocal { token: String },
    Introspect { token: String },
    QueryLog(EventFilter),
    AssertTrace(Vec<String>),
    /// Saves a token under a name for later `$stash.<name>` references.
    Stash { token: String, name: String },
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("step {step}: {message}")]
    InvalidStep { step: usize, message: String },
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
    #[error(transparent)]
    Boot(#[from] crate::topology::BootError),
    #[error("step {0} timed out")]
    StepTimeout(usize),
    #[error("report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Seconds {
    seconds: i64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Force {
    #[serde(default)]
    force: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RevokeParams {
    #[serde(default)]
    jti: Option<String>,
    #[serde(default)]
    token: Option<String>,
    #[serde(default)]
    sub: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenParam {
    token: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StashParams {
    token: String,
    name: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParallelParams {
    actions: Vec<SubAction>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryParams {
    #[serde(default)]
    filter: EventFilter,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceParams {
    events: Vec<String>,
}

fn params<T: serde::de::DeserializeOwned + Default>(v: &Value) -> Result<T, String> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| e.to_string())
}

fn required<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, String> {
    serde_json::from_value(v.clone()).map_err(|e| e.to_string())
}

impl Action {
    pub fn parse(action: &str, p: &Value) -> Result<Action, String> {
        Ok(match action {
            "login" => Action::Login(params(p)?),
            "client_credentials" => Action::ClientCredentials(params(p)?),
            "request" => Action::Request(required(p)?),
            "refresh" => Action::Refresh(params(p)?),
            "advance_clock" => Action::AdvanceClock {
                seconds: required::<Seconds>(p)?.seconds,
            },
            "rotate_keys" => Action::RotateKeys {
                force: params::<Force>(p)?.force,
            },
            "revoke" => {
                let r: RevokeParams = params(p)?;
                if r.jti.is_none() && r.token.is_none() && r.sub.is_none() {
                    return Err("revoke needs jti, token or sub".into());
                }
                Action::Revoke {
                    jti: r.jti,
                    token: r.token,
                    sub: r.sub,
                }
            }
            "tamper_token" => Action::TamperToken(required(p)?),
            "kill_sts" => Action::KillSts,
            "anomaly_scan" => Action::AnomalyScan,
            "parallel" => {
                let pp: ParallelParams = required(p)?;
                for sub in &pp.actions {
                    match Action::parse(&sub.action, &sub.params)? {
                        Action::Refresh(RefreshParams { token: Some(_), .. }) => {}
                        Action::Request(RequestParams { bearer: Some(_), .. }) => {}
                        _ => {
                            return Err(
                                "parallel supports refresh with an explicit token and request with an explicit bearer"
                                    .into(),
                            )
                        }
                    }
                }
                Action::Parallel(pp.actions)
            }
            "direct" => Action::Direct(required(p)?),
            "verify_local" => Action::VerifyLocal {
                token: required::<TokenParam>(p)?.token,
            },
            "introspect" => Action::Introspect {
                token: required::<TokenParam>(p)?.token,
            },
            "query_log" => Action::QueryLog(required::<QueryParams>(p)?.filter),
            "stash" => {
                let sp: StashParams = required(p)?;
                Action::Stash {
                    token: sp.token,
                    name: sp.name,
                }
            }
            "assert_trace" => Action::AssertTrace(required::<TraceParams>(p)?.events),
            other => return Err(format!("unknown action {other:?}")),
        })
    }

    /// Actions that act on behalf of a simulated client need an actor.
    pub fn needs_actor(&self) -> bool {
        matches!(
            self,
            Action::Login(_) | Action::ClientCredentials(_) | Action::Request(_) | Action::Refresh(_)
        )
    }
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    /// Checks every step parses and names a declared actor.
    pub fn validate(&self) -> Result<Vec<Action>, ScenarioError> {
        if let TopologyRef::Named(n) = &self.topology {
            if n != "standard" {
                return Err(ScenarioError::Parse(format!("unknown topology {n:?}")));
            }
        }
        for (name, actor) in &self.actors {
            if actor.kind != ClientKind::External && actor.account.is_none() {
                return Err(ScenarioError::Parse(format!("actor {name} needs an account")));
            }
        }
        let mut out = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            let invalid = |message: String| ScenarioError::InvalidStep { step: i + 1, message };
            let action = Action::parse(&step.action, &step.params).map_err(invalid)?;
            match &step.actor {
                Some(a) if !self.actors.contains_key(a) => {
                    return Err(invalid(format!("undeclared actor {a:?}")));
                }
                None if action.needs_actor() => return Err(invalid(format!("{} needs an actor", step.action))),
                _ => {}
            }
            if let (Action::Login(_), Some(a)) = (&action, &step.actor) {
                if self.actors[a].kind == ClientKind::Iot {
                    return Err(invalid(format!("iot actor {a} cannot perform a login")));
                }
            }
            out.push(action);
        }
        Ok(out)
    }
}
