//! Simulated front ends.
//!
//! Web and mobile clients log in with the password grant, keep both tokens in
//! memory and refresh once when the gateway reports an expired access token.
//! IoT clients only ever use the client-credentials grant.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Web,
    Mobile,
    Iot,
    /// Caller with no client logic: sends exactly what the step says.
    External,
}

impl ClientKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientKind::Web => "web",
            ClientKind::Mobile => "mobile",
            ClientKind::Iot => "iot",
            ClientKind::External => "external",
        }
    }

    pub fn interactive(self) -> bool {
        matches!(self, ClientKind::Web | ClientKind::Mobile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientState {
    Anonymous,
    Authenticated,
    LoginRequired,
}

impl ClientState {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientState::Anonymous => "anonymous",
            ClientState::Authenticated => "authenticated",
            ClientState::LoginRequired => "login_required",
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct SimClient {
    pub name: String,
    pub kind: ClientKind,
    /// Account id in the topology's identity provider.
    pub account: Option<String>,
    pub state: ClientState,
    #[serde(skip)]
    pub access: Option<String>,
    #[serde(skip)]
    pub refresh: Option<String>,
    pub password_grants: u32,
    pub client_credential_grants: u32,
    pub refreshes: u32,
}

impl std::fmt::Debug for SimClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimClient")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("state", &self.state)
            .field("has_access", &self.access.is_some())
            .finish_non_exhaustive()
    }
}

impl SimClient {
    pub fn new(name: &str, kind: ClientKind, account: Option<String>) -> Self {
        Self {
            name: name.to_owned(),
            kind,
            account,
            state: ClientState::Anonymous,
            access: None,
            refresh: None,
            password_grants: 0,
            client_credential_grants: 0,
            refreshes: 0,
        }
    }

    pub fn store(&mut self, access: String, refresh: String) {
        self.access = Some(access);
        self.refresh = Some(refresh);
        self.state = ClientState::Authenticated;
    }

    /// Drops both tokens; the user has to log in again.
    pub fn require_login(&mut self) {
        self.access = None;
        self.refresh = None;
        self.state = ClientState::LoginRequired;
    }
}
