//! Executes a scenario script against a freshly booted topology.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use msag_core::audit::{Component, EventSink, LogEvent, Outcome, CORRELATION_HEADER};
use msag_core::{verify_token_with_skew, Clock, EncodedToken, Tier, TokenClaims};
use msag_services::gateway::{facade_signature, FacadeKey, FACADE_IDENTITY_HEADER, FACADE_SIGNATURE_HEADER};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::client::{ClientKind, ClientState, SimClient};
use crate::scenario::{
    Action, DirectParams, EventExpect, Expect, FacadeMode, LoginParams, RefreshParams, RequestParams, ScenarioError,
    ScenarioScript, SubAction, TamperMode, TamperParams, Target, TopologyRef, Via,
};
use crate::topology::{account, Topology, TopologySpec, FACADE_IDENTITY};
use crate::upstream::RecordedRequest;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    /// Mirror every event to this NDJSON file.
    pub sink: Option<PathBuf>,
    pub step_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            sink: None,
            step_timeout: Duration::from_secs(30),
        }
    }
}

/// What a step observed. Holds nothing run-specific (no jtis, timestamps or
/// correlation ids) so two runs with one seed compare equal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub statuses: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_actions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_kid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_state: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_mismatch: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub passed: bool,
    pub failures: Vec<String>,
    pub outcome: StepOutcome,
    /// `component:event_type` for each event the step produced; sorted for
    /// parallel steps, whose interleaving is not deterministic.
    pub event_types: Vec<String>,
    /// Correlation ids of the HTTP requests the step sent.
    pub correlation_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    pub steps: Vec<StepReport>,
    pub events: Vec<LogEvent>,
    pub upstream_requests: BTreeMap<String, Vec<RecordedRequest>>,
    pub clients: Vec<SimClient>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sink: Option<PathBuf>,
    /// Every password and token the run handled, for leak scans. Never
    /// serialized.
    #[serde(skip)]
    pub secrets: Vec<String>,
}

impl ScenarioReport {
    pub fn failed_steps(&self) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().filter(|s| !s.passed)
    }

    /// Step outcomes plus event-type sequence; equal across runs with the
    /// same seed.
    pub fn fingerprint(&self) -> Vec<(bool, StepOutcome, Vec<String>)> {
        self.steps
            .iter()
            .map(|s| (s.passed, s.outcome.clone(), s.event_types.clone()))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "scenario {} (seed {}): {}\n",
            self.name,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for s in &self.steps {
            let who = s.actor.as_deref().map(|a| format!(" [{a}]")).unwrap_or_default();
            let status = s.outcome.status.map(|c| format!(" -> {c}")).unwrap_or_default();
            let err = s.outcome.error.as_deref().map(|e| format!(" {e}")).unwrap_or_default();
            out.push_str(&format!(
                "  {:>3} {:<5} {}{}{}{}\n",
                s.index,
                if s.passed { "ok" } else { "FAIL" },
                s.action,
                who,
                status,
                err
            ));
            for f in &s.failures {
                out.push_str(&format!("        {f}\n"));
            }
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?)
    }
}

pub async fn run_scenario(script: &ScenarioScript, opts: &RunOptions) -> Result<ScenarioReport, ScenarioError> {
    let actions = script.validate()?;
    let spec = match &script.topology {
        TopologyRef::Named(_) => TopologySpec::default(),
        TopologyRef::Custom(spec) => (**spec).clone(),
    };
    let topo = Topology::boot(spec, opts.sink.clone()).await?;
    let mut runner = Runner::new(&topo, script, opts.seed);
    let mut steps = Vec::new();
    for (i, (step, action)) in script.steps.iter().zip(actions).enumerate() {
        let before_events = topo.log.len();
        let before_up: BTreeMap<String, usize> =
            topo.upstreams.iter().map(|(k, u)| (k.clone(), u.request_count())).collect();
        let before_client = step.actor.as_ref().map(|a| runner.clients[a].clone());
        runner.cids.clear();

        let parallel = matches!(action, Action::Parallel(_));
        let outcome = match tokio::time::timeout(opts.step_timeout, runner.execute(step.actor.as_deref(), action)).await
        {
            Ok(o) => o,
            Err(_) => {
                topo.shutdown().await;
                return Err(ScenarioError::StepTimeout(i + 1));
            }
        };
        let mut outcome = outcome;
        if let Some(a) = &step.actor {
            outcome.client_state = Some(runner.clients[a].state.as_str().to_owned());
        }

        let events: Vec<LogEvent> = topo.log.all().into_iter().skip(before_events).collect();
        let upstream: Vec<RecordedRequest> = topo
            .upstreams
            .iter()
            .flat_map(|(k, u)| u.requests().into_iter().skip(before_up[k]))
            .collect();
        let ctx = StepContext {
            events: &events,
            upstream: &upstream,
            client: step.actor.as_ref().map(|a| &runner.clients[a]),
            client_before: before_client.as_ref(),
            active_kid: topo.sts.keys().snapshot().active().kid.clone(),
        };
        let failures = check(&step.expect, &outcome, &ctx);
        let mut event_types: Vec<String> = events.iter().map(label).collect();
        if parallel {
            event_types.sort();
        }
        steps.push(StepReport {
            index: i + 1,
            action: step.action.clone(),
            actor: step.actor.clone(),
            passed: failures.is_empty(),
            failures,
            outcome,
            event_types,
            correlation_ids: std::mem::take(&mut runner.cids),
        });
    }
    let clients = runner.clients.values().cloned().collect();
    let secrets = std::mem::take(&mut runner.secrets);
    topo.log.flush()?;
    let report = ScenarioReport {
        name: script.name.clone(),
        seed: opts.seed,
        passed: steps.iter().all(|s| s.passed),
        steps,
        events: topo.log.all(),
        upstream_requests: topo.upstreams.iter().map(|(k, u)| (k.clone(), u.requests())).collect(),
        clients,
        sink: opts.sink.clone(),
        secrets,
    };
    topo.shutdown().await;
    Ok(report)
}

/// `component:event_type`.
pub fn label(ev: &LogEvent) -> String {
    format!("{}:{}", ev.component.as_str(), ev.event_type)
}

/// Matches `event_type` or `component:event_type`.
pub fn pattern_matches(pattern: &str, ev: &LogEvent) -> bool {
    match pattern.split_once(':') {
        Some((c, t)) => ev.component.as_str() == c && ev.event_type == t,
        None => ev.event_type == pattern,
    }
}

/// Checks `patterns` occur in order within `events`; on failure returns the
/// first pattern that could not be matched.
pub fn ordered_subsequence<'a>(patterns: &'a [String], events: &[LogEvent]) -> Result<(), &'a str> {
    let mut it = events.iter();
    for p in patterns {
        if !it.any(|ev| pattern_matches(p, ev)) {
            return Err(p);
        }
    }
    Ok(())
}

struct StepContext<'a> {
    events: &'a [LogEvent],
    upstream: &'a [RecordedRequest],
    client: Option<&'a SimClient>,
    client_before: Option<&'a SimClient>,
    active_kid: String,
}

fn event_matches(e: &EventExpect, ev: &LogEvent) -> bool {
    ev.event_type == e.event_type
        && e.component.as_deref().is_none_or(|c| ev.component.as_str() == c)
        && e.outcome.as_deref().is_none_or(|o| {
            serde_json::to_value(ev.outcome).ok().and_then(|v| v.as_str().map(|s| s == o)) == Some(true)
        })
        && e.subject.as_deref().is_none_or(|s| ev.subject.as_deref() == Some(s))
        && e.detail.iter().all(|(k, v)| ev.detail.get(k) == Some(v))
}

fn expect_eq<T: PartialEq + std::fmt::Debug>(out: &mut Vec<String>, what: &str, want: &Option<T>, got: Option<&T>) {
    if let Some(w) = want {
        if got != Some(w) {
            out.push(format!("{what}: expected {w:?}, got {got:?}"));
        }
    }
}

fn check(x: &Expect, o: &StepOutcome, ctx: &StepContext<'_>) -> Vec<String> {
    let mut f = Vec::new();
    expect_eq(&mut f, "status", &x.status, o.status.as_ref());
    expect_eq(&mut f, "error", &x.error, o.error.as_ref());
    expect_eq(&mut f, "reason", &x.reason, o.reason.as_ref());
    expect_eq(&mut f, "client_state", &x.client_state, o.client_state.as_ref());
    expect_eq(&mut f, "verify", &x.verify, o.verify.as_ref());
    expect_eq(&mut f, "active", &x.active, o.active.as_ref());
    expect_eq(&mut f, "count", &x.count, o.count.as_ref());
    expect_eq(&mut f, "anomaly_actions", &x.anomaly_actions, o.anomaly_actions.as_ref());
    expect_eq(&mut f, "active_kid", &x.active_kid, Some(&ctx.active_kid));
    if !x.statuses.is_empty() && x.statuses != o.statuses {
        f.push(format!("statuses: expected {:?}, got {:?}", x.statuses, o.statuses));
    }
    if let Some(m) = &o.trace_mismatch {
        f.push(format!("trace: no match for {m}"));
    }
    for e in &x.events {
        let n = ctx.events.iter().filter(|ev| event_matches(e, ev)).count();
        match e.count {
            Some(c) if c != n => f.push(format!("event {}: expected {c}, found {n}", e.event_type)),
            None if n == 0 => f.push(format!("event {}: not emitted", e.event_type)),
            _ => {}
        }
    }
    for p in &x.absent_events {
        if ctx.events.iter().any(|ev| pattern_matches(p, ev)) {
            f.push(format!("event {p}: emitted but expected absent"));
        }
    }
    if let Err(p) = ordered_subsequence(&x.trace, ctx.events) {
        f.push(format!("trace: no match for {p}"));
    }
    if let Some(want) = x.forwarded {
        if want != !ctx.upstream.is_empty() {
            f.push(format!(
                "forwarded: expected {want}, upstream saw {} request(s)",
                ctx.upstream.len()
            ));
        }
    }
    if !x.upstream_headers.is_empty() {
        match ctx.upstream.last() {
            None => f.push("upstream_headers: no upstream request".into()),
            Some(r) => {
                for (k, v) in &x.upstream_headers {
                    if r.header(k) != Some(v.as_str()) {
                        f.push(format!("upstream header {k}: expected {v:?}, got {:?}", r.header(k)));
                    }
                }
            }
        }
    }
    for h in &x.upstream_absent_headers {
        if ctx.upstream.iter().any(|r| r.header(h).is_some()) {
            f.push(format!("upstream header {h}: present but expected absent"));
        }
    }
    if let Some(c) = ctx.client {
        if let Some(want) = x.client_refreshes {
            let before = ctx.client_before.map_or(0, |b| b.refreshes);
            if c.refreshes - before != want {
                f.push(format!("client_refreshes: expected {want}, got {}", c.refreshes - before));
            }
        }
        expect_eq(&mut f, "password_grants", &x.password_grants, Some(&c.password_grants));
        let kid = c.access.as_deref().and_then(|t| EncodedToken::new(t).kid());
        expect_eq(&mut f, "kid", &x.kid, kid.as_ref());
    } else if x.client_refreshes.is_some() || x.password_grants.is_some() || x.kid.is_some() {
        f.push("client expectations need an actor".into());
    }
    f
}

struct Reply {
    status: u16,
    body: Value,
}

impl Reply {
    fn field(&self, k: &str) -> Option<String> {
        self.body.get(k)?.as_str().map(str::to_owned)
    }

    fn outcome(&self) -> StepOutcome {
        StepOutcome {
            status: Some(self.status),
            error: self.field("error"),
            reason: self.field("reason"),
            ..Default::default()
        }
    }
}

fn unreachable() -> StepOutcome {
    StepOutcome {
        error: Some("unreachable".into()),
        ..Default::default()
    }
}

#[derive(Default)]
struct Req<'a> {
    method: &'a str,
    bearer: Option<&'a str>,
    headers: Vec<(&'static str, String)>,
    form: Option<&'a BTreeMap<String, String>>,
    body: Option<String>,
}

struct Runner<'t> {
    topo: &'t Topology,
    http: reqwest::Client,
    rng: StdRng,
    clients: BTreeMap<String, SimClient>,
    stash: BTreeMap<String, String>,
    secrets: Vec<String>,
    cids: Vec<String>,
}

impl<'t> Runner<'t> {
    fn new(topo: &'t Topology, script: &ScenarioScript, seed: u64) -> Self {
        let mut secrets = Vec::new();
        let clients = script
            .actors
            .iter()
            .map(|(name, a)| {
                if let Some(acc) = a.account.as_deref().and_then(account) {
                    secrets.push(acc.secret.to_owned());
                }
                (name.clone(), SimClient::new(name, a.kind, a.account.clone()))
            })
            .collect();
        Self {
            topo,
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(10))
                .redirect(reqwest::redirect::Policy::none())
                .build()
                .expect("http client"),
            rng: StdRng::seed_from_u64(seed),
            clients,
            stash: BTreeMap::new(),
            secrets,
            cids: Vec::new(),
        }
    }

    fn cid(&mut self) -> String {
        let id = uuid::Builder::from_random_bytes(self.rng.random()).into_uuid().to_string();
        self.cids.push(id.clone());
        id
    }

    fn now(&self) -> i64 {
        self.topo.clock.now()
    }

    fn emit(&self, cid: &str, event_type: &str, outcome: Outcome, actor: &str, detail: &[(&str, &str)]) {
        let c = &self.clients[actor];
        let mut ev = LogEvent::new(self.topo.clock.now_millis(), cid, Component::Harness, event_type, outcome)
            .with("client", c.name.clone())
            .with("kind", c.kind.as_str());
        if let Some(acc) = &c.account {
            ev = ev.subject(acc.clone());
        }
        for (k, v) in detail {
            ev = ev.with(*k, *v);
        }
        self.topo.log.emit(ev);
    }

    fn keep(&mut self, s: &str) {
        if !s.is_empty() && !self.secrets.iter().any(|x| x == s) {
            self.secrets.push(s.to_owned());
        }
    }

    /// Resolves `$actor.access`, `$actor.refresh`, `$stash.name` or a literal.
    fn resolve(&self, r: &str) -> Result<String, String> {
        let Some(rest) = r.strip_prefix('$') else {
            return Ok(r.to_owned());
        };
        let (who, what) = rest.split_once('.').ok_or_else(|| format!("bad token reference {r:?}"))?;
        let found = if who == "stash" {
            self.stash.get(what).cloned()
        } else {
            let c = self.clients.get(who).ok_or_else(|| format!("unknown actor in {r:?}"))?;
            match what {
                "access" => c.access.clone(),
                "refresh" => c.refresh.clone(),
                _ => return Err(format!("bad token reference {r:?}")),
            }
        };
        found.ok_or_else(|| format!("{r} is not set"))
    }

    fn save(&mut self, target: &str, token: String) -> Result<(), String> {
        self.keep(&token);
        if let Some(rest) = target.strip_prefix('$') {
            let (who, what) = rest.split_once('.').ok_or_else(|| format!("bad target {target:?}"))?;
            if who == "stash" {
                self.stash.insert(what.to_owned(), token);
                return Ok(());
            }
            let c = self.clients.get_mut(who).ok_or_else(|| format!("unknown actor in {target:?}"))?;
            match what {
                "access" => c.access = Some(token),
                "refresh" => c.refresh = Some(token),
                _ => return Err(format!("bad target {target:?}")),
            }
        } else {
            self.stash.insert(target.to_owned(), token);
        }
        Ok(())
    }

    async fn send(http: &reqwest::Client, url: String, cid: &str, r: Req<'_>) -> Option<Reply> {
        let method = reqwest::Method::from_bytes(r.method.as_bytes()).ok()?;
        let mut b = http.request(method, url).header(CORRELATION_HEADER, cid);
        if let Some(t) = r.bearer {
            b = b.header("authorization", format!("Bearer {t}"));
        }
        for (k, v) in r.headers {
            b = b.header(k, v);
        }
        if let Some(form) = r.form {
            b = b.form(form);
        } else if let Some(body) = r.body {
            b = b.body(body);
        }
        let resp = b.send().await.ok()?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.ok()?;
        let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        Some(Reply { status, body })
    }

    fn token_url(&self, via: Via) -> String {
        match via {
            Via::Gateway => format!("{}/token", self.topo.public_url),
            Via::Direct => format!("{}/token", self.topo.sts_url),
        }
    }

    async fn execute(&mut self, actor: Option<&str>, action: Action) -> StepOutcome {
        match self.run(actor, action).await {
            Ok(o) => o,
            Err(e) => StepOutcome {
                error: Some(format!("harness: {e}")),
                ..Default::default()
            },
        }
    }

    async fn run(&mut self, actor: Option<&str>, action: Action) -> Result<StepOutcome, String> {
        let actor_name = || actor.ok_or("step needs an actor").map(str::to_owned);
        Ok(match action {
            Action::Login(p) => self.login(&actor_name()?, &p).await?,
            Action::ClientCredentials(p) => self.client_credentials(&actor_name()?, p.via, p.password).await?,
            Action::Request(p) => self.request(&actor_name()?, &p).await?,
            Action::Refresh(p) => self.refresh(&actor_name()?, &p).await?,
            Action::AdvanceClock { seconds } => {
                self.topo.clock.advance(seconds);
                StepOutcome::default()
            }
            Action::RotateKeys { force } => {
                let cid = self.cid();
                let rotated = if force {
                    self.topo.sts.force_rotate(self.now(), &cid);
                    true
                } else {
                    self.topo.sts.rotate_keys(self.now(), &cid)
                };
                StepOutcome {
                    count: Some(rotated as usize),
                    active_kid: Some(self.topo.sts.keys().snapshot().active().kid.clone()),
                    ..Default::default()
                }
            }
            Action::Revoke { jti, token, sub } => {
                let mut form = BTreeMap::new();
                if let Some(j) = jti {
                    form.insert("jti".to_owned(), j);
                }
                if let Some(t) = token {
                    let t = self.resolve(&t)?;
                    let jti = EncodedToken::new(t).peek_claims().map(|c| c.jti).ok_or("token has no readable jti")?;
                    form.insert("jti".to_owned(), jti);
                }
                if let Some(s) = sub {
                    form.insert("sub".to_owned(), s);
                }
                let cid = self.cid();
                let url = format!("{}/revoke", self.topo.sts_url);
                match Self::send(&self.http, url, &cid, Req { method: "POST", form: Some(&form), ..Default::default() }).await {
                    Some(r) => StepOutcome {
                        count: r.body.get("revoked").and_then(Value::as_u64).map(|n| n as usize),
                        ..r.outcome()
                    },
                    None => unreachable(),
                }
            }
            Action::TamperToken(p) => {
                let original = self.resolve(&p.token)?;
                let forged = tamper(&original, &p)?;
                self.save(&p.save_as, forged)?;
                StepOutcome::default()
            }
            Action::Stash { token, name } => {
                let t = self.resolve(&token)?;
                self.save(&format!("$stash.{name}"), t)?;
                StepOutcome::default()
            }
            Action::KillSts => {
                self.topo.kill_sts().await;
                StepOutcome::default()
            }
            Action::AnomalyScan => StepOutcome {
                anomaly_actions: Some(self.topo.anomaly_scan().len()),
                ..Default::default()
            },
            Action::Parallel(subs) => self.parallel(subs).await?,
            Action::Direct(p) => self.direct(&p).await?,
            Action::VerifyLocal { token } => {
                let t = self.resolve(&token)?;
                let keys = self.topo.sts.keys().snapshot();
                let skew = self.topo.sts.config().skew_tolerance;
                StepOutcome {
                    verify: Some(verify_token_with_skew(&t, &keys, self.now(), skew).label().to_owned()),
                    ..Default::default()
                }
            }
            Action::Introspect { token } => {
                let t = self.resolve(&token)?;
                let form = BTreeMap::from([("token".to_owned(), t)]);
                let cid = self.cid();
                let url = format!("{}/introspect", self.topo.sts_url);
                match Self::send(&self.http, url, &cid, Req { method: "POST", form: Some(&form), ..Default::default() }).await {
                    Some(r) => StepOutcome {
                        active: r.body.get("active").and_then(Value::as_bool),
                        ..r.outcome()
                    },
                    None => unreachable(),
                }
            }
            Action::QueryLog(filter) => StepOutcome {
                count: Some(self.topo.log.query(&filter).len()),
                ..Default::default()
            },
            Action::AssertTrace(patterns) => StepOutcome {
                trace_mismatch: ordered_subsequence(&patterns, &self.topo.log.all()).err().map(str::to_owned),
                ..Default::default()
            },
        })
    }

    async fn grant(&mut self, actor: &str, cid: &str, url: String, form: BTreeMap<String, String>) -> Option<Reply> {
        let reply = Self::send(&self.http, url, cid, Req { method: "POST", form: Some(&form), ..Default::default() }).await?;
        if reply.status == 200 {
            let access = reply.field("access_token").unwrap_or_default();
            let refresh = reply.field("refresh_token").unwrap_or_default();
            self.keep(&access);
            self.keep(&refresh);
            self.clients.get_mut(actor).expect("declared actor").store(access, refresh);
        }
        Some(reply)
    }

    async fn login(&mut self, actor: &str, p: &LoginParams) -> Result<StepOutcome, String> {
        let (kind, acc) = {
            let c = &self.clients[actor];
            (c.kind, c.account.clone().ok_or("actor has no account")?)
        };
        if kind == ClientKind::Iot {
            return Err("iot clients do not log in".into());
        }
        let password = match &p.password {
            Some(pw) => pw.clone(),
            None => account(&acc).map(|a| a.secret.to_owned()).ok_or("unknown account")?,
        };
        self.keep(&password);
        let cid = self.cid();
        self.emit(&cid, "client.login", Outcome::Success, actor, &[("grant", "password")]);
        self.clients.get_mut(actor).expect("actor").password_grants += 1;
        let form = BTreeMap::from([
            ("grant_type".to_owned(), "password".to_owned()),
            ("username".to_owned(), acc),
            ("password".to_owned(), password),
        ]);
        let url = self.token_url(p.via);
        let Some(reply) = self.grant(actor, &cid, url, form).await else {
            return Ok(unreachable());
        };
        if reply.status == 200 {
            self.emit(&cid, "client.tokens_received", Outcome::Success, actor, &[]);
        } else {
            self.emit(&cid, "client.login_failed", Outcome::Deny, actor, &[]);
        }
        Ok(reply.outcome())
    }

    async fn client_credentials(&mut self, actor: &str, via: Via, secret: Option<String>) -> Result<StepOutcome, String> {
        let acc = self.clients[actor].account.clone().ok_or("actor has no account")?;
        let secret = match secret {
            Some(s) => s,
            None => account(&acc).map(|a| a.secret.to_owned()).ok_or("unknown account")?,
        };
        self.keep(&secret);
        let cid = self.cid();
        self.clients.get_mut(actor).expect("actor").client_credential_grants += 1;
        let form = BTreeMap::from([
            ("grant_type".to_owned(), "client_credentials".to_owned()),
            ("client_id".to_owned(), acc),
            ("client_secret".to_owned(), secret),
        ]);
        let url = self.token_url(via);
        let Some(reply) = self.grant(actor, &cid, url, form).await else {
            return Ok(unreachable());
        };
        if reply.status == 200 {
            self.emit(&cid, "client.tokens_received", Outcome::Success, actor, &[("grant", "client_credentials")]);
        }
        Ok(reply.outcome())
    }

    async fn refresh(&mut self, actor: &str, p: &RefreshParams) -> Result<StepOutcome, String> {
        let token = match &p.token {
            Some(r) => self.resolve(r)?,
            None => self.clients[actor].refresh.clone().ok_or("actor holds no refresh token")?,
        };
        let cid = self.cid();
        Ok(self.redeem(actor, &cid, token, p.via).await)
    }

    async fn redeem(&mut self, actor: &str, cid: &str, token: String, via: Via) -> StepOutcome {
        let form = BTreeMap::from([
            ("grant_type".to_owned(), "refresh_token".to_owned()),
            ("refresh_token".to_owned(), token),
        ]);
        let url = self.token_url(via);
        let Some(reply) = self.grant(actor, cid, url, form).await else {
            return unreachable();
        };
        if reply.status == 200 {
            self.clients.get_mut(actor).expect("actor").refreshes += 1;
            self.emit(cid, "client.refreshed", Outcome::Success, actor, &[]);
        } else {
            let code = reply.field("error").unwrap_or_default();
            self.emit(cid, "client.refresh_failed", Outcome::Deny, actor, &[("error", &code)]);
            if self.clients[actor].kind.interactive() {
                self.clients.get_mut(actor).expect("actor").require_login();
                self.emit(cid, "client.login_required", Outcome::Deny, actor, &[]);
            }
        }
        reply.outcome()
    }

    async fn gateway_get(&mut self, cid: &str, p: &RequestParams, bearer: Option<&str>) -> Option<Reply> {
        let url = format!("{}{}", self.topo.public_url, p.path);
        Self::send(
            &self.http,
            url,
            cid,
            Req {
                method: &p.method,
                bearer,
                body: p.body.clone(),
                ..Default::default()
            },
        )
        .await
    }

    async fn request(&mut self, actor: &str, p: &RequestParams) -> Result<StepOutcome, String> {
        let own = p.bearer.is_none();
        let auto = p.auto_refresh.unwrap_or(own);
        let kind = self.clients[actor].kind;
        let mut token = match &p.bearer {
            Some(r) => Some(self.resolve(r)?),
            None => self.clients[actor].access.clone(),
        };
        let cid = self.cid();
        self.emit(&cid, "client.resource_requested", Outcome::Success, actor, &[("path", &p.path)]);
        if token.is_none() && own {
            match kind {
                ClientKind::Iot => {
                    self.client_credentials(actor, Via::Gateway, None).await?;
                    token = self.clients[actor].access.clone();
                }
                ClientKind::Web | ClientKind::Mobile => {
                    self.clients.get_mut(actor).expect("actor").state = ClientState::LoginRequired;
                    self.emit(&cid, "client.login_required", Outcome::Deny, actor, &[]);
                    return Ok(StepOutcome {
                        error: Some("login_required".into()),
                        ..Default::default()
                    });
                }
                ClientKind::External => {}
            }
        }
        let Some(reply) = self.gateway_get(&cid, p, token.as_deref()).await else {
            return Ok(unreachable());
        };
        let error = reply.field("error");
        if reply.status == 401 && error.as_deref() == Some("token_expired") && auto {
            self.emit(&cid, "client.token_expired", Outcome::Deny, actor, &[]);
            let renewed = match kind {
                ClientKind::Iot => self.client_credentials(actor, Via::Gateway, None).await?.status == Some(200),
                _ => match self.clients[actor].refresh.clone() {
                    Some(rt) => {
                        let rcid = self.cid();
                        self.redeem(actor, &rcid, rt, Via::Gateway).await.status == Some(200)
                    }
                    None => false,
                },
            };
            if !renewed {
                return Ok(reply.outcome());
            }
            let retry_cid = self.cid();
            let token = self.clients[actor].access.clone();
            self.emit(&retry_cid, "client.resource_requested", Outcome::Success, actor, &[("path", &p.path), ("retry", "true")]);
            return Ok(match self.gateway_get(&retry_cid, p, token.as_deref()).await {
                Some(r) => r.outcome(),
                None => unreachable(),
            });
        }
        if reply.status == 401 && error.as_deref() == Some("token_invalid") && own && kind.interactive() {
            self.clients.get_mut(actor).expect("actor").require_login();
            self.emit(&cid, "client.login_required", Outcome::Deny, actor, &[]);
        }
        Ok(reply.outcome())
    }

    async fn direct(&mut self, p: &DirectParams) -> Result<StepOutcome, String> {
        let base = match p.target {
            Target::Public => &self.topo.public_url,
            Target::Private => &self.topo.private_url,
            Target::Sts => &self.topo.sts_url,
            Target::Facade => &self.topo.facade_url,
        };
        let url = format!("{base}{}", p.path);
        let bearer = p.bearer.as_deref().map(|b| self.resolve(b)).transpose()?;
        let cid = self.cid();
        let mut headers = Vec::new();
        match p.facade {
            FacadeMode::None => {}
            FacadeMode::Valid => {
                headers.push((FACADE_IDENTITY_HEADER, FACADE_IDENTITY.to_owned()));
                headers.push((FACADE_SIGNATURE_HEADER, facade_signature(&self.topo.facade_key, &cid)));
            }
            FacadeMode::WrongKey => {
                let forged = FacadeKey(self.rng.random::<[u8; 32]>().to_vec());
                headers.push((FACADE_IDENTITY_HEADER, FACADE_IDENTITY.to_owned()));
                headers.push((FACADE_SIGNATURE_HEADER, facade_signature(&forged, &cid)));
            }
        }
        let req = Req {
            method: &p.method,
            bearer: bearer.as_deref(),
            headers,
            form: (!p.form.is_empty()).then_some(&p.form),
            body: None,
        };
        Ok(match Self::send(&self.http, url, &cid, req).await {
            Some(r) => r.outcome(),
            None => unreachable(),
        })
    }

    /// Fires stateless refreshes and requests concurrently through the
    /// public gateway.
    async fn parallel(&mut self, subs: Vec<SubAction>) -> Result<StepOutcome, String> {
        let mut jobs = Vec::new();
        for sub in &subs {
            let action = Action::parse(&sub.action, &sub.params)?;
            for _ in 0..sub.times {
                let cid = self.cid();
                let (url, req_form, bearer, path_method) = match &action {
                    Action::Refresh(RefreshParams { token: Some(t), via }) => {
                        let form = BTreeMap::from([
                            ("grant_type".to_owned(), "refresh_token".to_owned()),
                            ("refresh_token".to_owned(), self.resolve(t)?),
                        ]);
                        (self.token_url(*via), Some(form), None, "POST".to_owned())
                    }
                    Action::Request(RequestParams { path, method, bearer: Some(b), .. }) => (
                        format!("{}{}", self.topo.public_url, path),
                        None,
                        Some(self.resolve(b)?),
                        method.clone(),
                    ),
                    _ => return Err("unsupported parallel action".into()),
                };
                jobs.push((cid, url, req_form, bearer, path_method));
            }
        }
        let http = &self.http;
        let replies = futures::future::join_all(jobs.iter().map(|(cid, url, form, bearer, method)| {
            Self::send(
                http,
                url.clone(),
                cid,
                Req {
                    method,
                    bearer: bearer.as_deref(),
                    form: form.as_ref(),
                    ..Default::default()
                },
            )
        }))
        .await;
        let mut statuses = BTreeMap::new();
        for r in &replies {
            let key = r.as_ref().map_or("unreachable".to_owned(), |r| r.status.to_string());
            *statuses.entry(key).or_insert(0) += 1;
        }
        for r in replies.iter().flatten() {
            for k in ["access_token", "refresh_token"] {
                if let Some(t) = r.field(k) {
                    self.keep(&t);
                }
            }
        }
        Ok(StepOutcome {
            statuses,
            ..Default::default()
        })
    }
}

fn b64(bytes: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

/// Produces a forged variant of `token` that keeps its original signature.
pub fn tamper(token: &str, p: &TamperParams) -> Result<String, String> {
    let parts: Vec<&str> = token.split('.').collect();
    if parts.len() != 3 {
        return Err("token is not three segments".into());
    }
    let decode = |s: &str| URL_SAFE_NO_PAD.decode(s).map_err(|e| e.to_string());
    let reencode = |claims: &TokenClaims| -> Result<String, String> {
        let payload = serde_json::to_vec(claims).map_err(|e| e.to_string())?;
        Ok(format!("{}.{}.{}", parts[0], b64(&payload), parts[2]))
    };
    let claims = || -> Result<TokenClaims, String> {
        serde_json::from_slice(&decode(parts[1])?).map_err(|e| e.to_string())
    };
    Ok(match p.mode {
        TamperMode::FlipPayloadBit => {
            // Flip a bit inside the jti value so the payload stays well-formed
            // JSON and only the MAC can catch it.
            let mut payload = decode(parts[1])?;
            let text = String::from_utf8_lossy(&payload).into_owned();
            let at = text.find("\"jti\":\"").ok_or("payload has no jti")? + 7;
            payload[at] ^= 1 << (p.bit.unwrap_or(0) % 2);
            format!("{}.{}.{}", parts[0], b64(&payload), parts[2])
        }
        TamperMode::FlipSignatureBit => {
            let mut mac = decode(parts[2])?;
            let bit = p.bit.unwrap_or(0) % (mac.len() * 8);
            mac[bit / 8] ^= 1 << (bit % 8);
            format!("{}.{}.{}", parts[0], parts[1], b64(&mac))
        }
        TamperMode::EscalateScopes => {
            let mut c = claims()?;
            c.scopes.extend(p.scopes.iter().cloned());
            reencode(&c)?
        }
        TamperMode::EscalateTier => {
            let mut c = claims()?;
            c.tier = Tier::Privileged;
            c.scopes.extend(p.scopes.iter().cloned());
            reencode(&c)?
        }
        TamperMode::Garble => format!("{}.{}", parts[0], parts[1]),
    })
}
