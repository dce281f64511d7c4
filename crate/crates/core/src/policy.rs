//! Deny-by-default least-privilege decisions.
//!
//! Checks run in a fixed order and the first failure is the reported reason:
//! rule lookup, authentication, tier, then scopes. Scopes are conjunctive.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::LogEvent;
use crate::token::{Tier, TokenClaims};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub route_id: String,
    pub required_tier: Tier,
    pub required_scopes: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoRule,
    Unauthenticated,
    InsufficientTier,
    MissingScope,
    UntrustedOrigin,
    MissingElevation,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::NoRule => "no_rule",
            DenyReason::Unauthenticated => "unauthenticated",
            DenyReason::InsufficientTier => "insufficient_tier",
            DenyReason::MissingScope => "missing_scope",
            DenyReason::UntrustedOrigin => "untrusted_origin",
            DenyReason::MissingElevation => "missing_elevation",
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyTable {
    rules: HashMap<String, PolicyRule>,
}

impl PolicyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: impl IntoIterator<Item = PolicyRule>) -> Result<Self, ValidationError> {
        let mut table = Self::new();
        for rule in rules {
            table.insert(rule)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, rule: PolicyRule) -> Result<(), ValidationError> {
        if rule.required_tier == Tier::Public && !rule.required_scopes.is_empty() {
            return Err(ValidationError::PublicWithScopes { route: rule.route_id });
        }
        if self.rules.contains_key(&rule.route_id) {
            return Err(ValidationError::DuplicateRoute { route: rule.route_id });
        }
        self.rules.insert(rule.route_id.clone(), rule);
        Ok(())
    }

    pub fn get(&self, route_id: &str) -> Option<&PolicyRule> {
        self.rules.get(route_id)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules sorted by route id.
    pub fn rules(&self) -> Vec<&PolicyRule> {
        let mut v: Vec<_> = self.rules.values().collect();
        v.sort_by(|a, b| a.route_id.cmp(&b.route_id));
        v
    }

    pub fn to_document(&self) -> Vec<PolicyEntry> {
        self.rules()
            .into_iter()
            .map(|r| PolicyEntry {
                route: r.route_id.clone(),
                tier: r.required_tier,
                scopes: r.required_scopes.iter().cloned().collect(),
            })
            .collect()
    }
}

pub fn evaluate(claims: Option<&TokenClaims>, table: &PolicyTable, route_id: &str) -> Decision {
    let Some(rule) = table.get(route_id) else {
        return Decision::Deny(DenyReason::NoRule);
    };
    if rule.required_tier == Tier::Public {
        return Decision::Allow;
    }
    let Some(claims) = claims else {
        return Decision::Deny(DenyReason::Unauthenticated);
    };
    if claims.tier < rule.required_tier {
        return Decision::Deny(DenyReason::InsufficientTier);
    }
    if !rule.required_scopes.is_subset(&claims.scopes) {
        return Decision::Deny(DenyReason::MissingScope);
    }
    Decision::Allow
}

/// One entry of the policy file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub route: String,
    pub tier: Tier,
    #[serde(default)]
    pub scopes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("policy document line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("route {route}: public routes cannot require scopes")]
    PublicWithScopes { route: String },
    #[error("route {route}: duplicate rule")]
    DuplicateRoute { route: String },
    #[error("route {route}: scope {scope} listed twice")]
    DuplicateScope { route: String, scope: String },
    #[error("rule #{index}: empty route id")]
    EmptyRoute { index: usize },
}

impl ValidationError {
    pub fn route(&self) -> Option<&str> {
        match self {
            ValidationError::PublicWithScopes { route }
            | ValidationError::DuplicateRoute { route }
            | ValidationError::DuplicateScope { route, .. } => Some(route),
            _ => None,
        }
    }
}

pub fn load_policy(document: &str) -> Result<PolicyTable, ValidationError> {
    if document.trim().is_empty() {
        return Ok(PolicyTable::new());
    }
    let entries: Vec<PolicyEntry> =
        serde_json::from_str(document).map_err(|e| ValidationError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    policy_from_entries(entries)
}

pub fn policy_from_entries(entries: Vec<PolicyEntry>) -> Result<PolicyTable, ValidationError> {
    let mut table = PolicyTable::new();
    for (index, entry) in entries.into_iter().enumerate() {
        if entry.route.trim().is_empty() {
            return Err(ValidationError::EmptyRoute { index });
        }
        let mut scopes = BTreeSet::new();
        for scope in entry.scopes {
            if !scopes.insert(scope.clone()) {
                return Err(ValidationError::DuplicateScope { route: entry.route, scope });
            }
        }
        table.insert(PolicyRule {
            route_id: entry.route,
            required_tier: entry.tier,
            required_scopes: scopes,
        })?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    /// Required scopes never observed on the route.
    UnusedScopes { route: String, scopes: BTreeSet<String> },
    /// Non-public route protected by tier alone.
    TierOnly { route: String, tier: Tier },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalityReport {
    pub findings: Vec<Finding>,
}

impl MinimalityReport {
    pub fn unused_scopes(&self) -> BTreeSet<(String, String)> {
        self.findings
            .iter()
            .filter_map(|f| match f {
                Finding::UnusedScopes { route, scopes } => Some((route, scopes)),
                _ => None,
            })
            .flat_map(|(route, scopes)| scopes.iter().map(move |s| (route.clone(), s.clone())))
            .collect()
    }
}

/// Flags grants wider than what traffic has needed.
pub fn audit_minimality(
    table: &PolicyTable,
    observed_scope_usage: &BTreeMap<String, BTreeSet<String>>,
) -> MinimalityReport {
    let empty = BTreeSet::new();
    let mut findings = Vec::new();
    for rule in table.rules() {
        if rule.required_tier == Tier::Public {
            continue;
        }
        if rule.required_scopes.is_empty() {
            findings.push(Finding::TierOnly {
                route: rule.route_id.clone(),
                tier: rule.required_tier,
            });
            continue;
        }
        let used = observed_scope_usage.get(&rule.route_id).unwrap_or(&empty);
        let unused: BTreeSet<String> = rule.required_scopes.difference(used).cloned().collect();
        if !unused.is_empty() {
            findings.push(Finding::UnusedScopes {
                route: rule.route_id.clone(),
                scopes: unused,
            });
        }
    }
    MinimalityReport { findings }
}

/// Collects per-route scope usage from forwarded-request events. Upstreams
/// report the scopes they consumed; the gateway records them under the
/// `scopes_used` detail key as a space-separated list.
pub fn usage_from_events<'a>(events: impl IntoIterator<Item = &'a LogEvent>) -> BTreeMap<String, BTreeSet<String>> {
    let mut usage: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for ev in events {
        let (Some(route), Some(used)) = (ev.detail.get("route_id"), ev.detail.get("scopes_used")) else {
            continue;
        };
        usage
            .entry(route.clone())
            .or_default()
            .extend(used.split_whitespace().map(str::to_owned));
    }
    usage
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::TokenUse;

    fn claims(tier: Tier, scopes: &[&str]) -> TokenClaims {
        TokenClaims {
            sub: "u".into(),
            iss: "sts".into(),
            aud: "gw".into(),
            iat: 0,
            exp: 300,
            jti: "j".into(),
            token_use: TokenUse::Access,
            scopes: scopes.iter().map(|s| s.to_string()).collect(),
            tier,
        }
    }

    fn rule(route: &str, tier: Tier, scopes: &[&str]) -> PolicyRule {
        PolicyRule {
            route_id: route.into(),
            required_tier: tier,
            required_scopes: scopes.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn table() -> PolicyTable {
        PolicyTable::from_rules([
            rule("catalog", Tier::Public, &[]),
            rule("orders", Tier::Authenticated, &["orders:read"]),
            rule("admin", Tier::Privileged, &["admin:write", "admin:read"]),
        ])
        .unwrap()
    }

    #[test]
    fn anonymous_reaches_public_route() {
        assert_eq!(evaluate(None, &table(), "catalog"), Decision::Allow);
    }

    #[test]
    fn anonymous_is_unauthenticated_elsewhere() {
        assert_eq!(evaluate(None, &table(), "orders"), Decision::Deny(DenyReason::Unauthenticated));
        assert_eq!(evaluate(None, &table(), "admin"), Decision::Deny(DenyReason::Unauthenticated));
    }

    #[test]
    fn missing_rule_denies_everyone() {
        let c = claims(Tier::Privileged, &["orders:read", "admin:read", "admin:write"]);
        assert_eq!(evaluate(Some(&c), &table(), "billing"), Decision::Deny(DenyReason::NoRule));
        assert_eq!(evaluate(None, &table(), "billing"), Decision::Deny(DenyReason::NoRule));
    }

    #[test]
    fn tier_is_checked_before_scopes() {
        let c = claims(Tier::Authenticated, &[]);
        assert_eq!(evaluate(Some(&c), &table(), "admin"), Decision::Deny(DenyReason::InsufficientTier));
    }

    #[test]
    fn scopes_are_conjunctive() {
        let c = claims(Tier::Privileged, &["admin:read"]);
        assert_eq!(evaluate(Some(&c), &table(), "admin"), Decision::Deny(DenyReason::MissingScope));
        let c = claims(Tier::Privileged, &["admin:read", "admin:write"]);
        assert_eq!(evaluate(Some(&c), &table(), "admin"), Decision::Allow);
    }

    #[test]
    fn empty_document_denies_everything() {
        let t = load_policy("").unwrap();
        assert!(t.is_empty());
        assert_eq!(
            evaluate(Some(&claims(Tier::Privileged, &[])), &t, "x"),
            Decision::Deny(DenyReason::NoRule)
        );
        assert!(load_policy("[]").unwrap().is_empty());
    }

    #[test]
    fn public_rule_with_scopes_is_rejected() {
        let err = load_policy(r#"[{"route": "open", "tier": "public", "scopes": ["x"]}]"#).unwrap_err();
        assert_eq!(err, ValidationError::PublicWithScopes { route: "open".into() });
        assert!(err.to_string().contains("open"));
    }

    #[test]
    fn duplicate_route_is_rejected() {
        let doc = r#"[
            {"route": "a", "tier": "authenticated", "scopes": ["r"]},
            {"route": "a", "tier": "privileged", "scopes": []}
        ]"#;
        assert_eq!(load_policy(doc).unwrap_err().route(), Some("a"));
    }

    #[test]
    fn syntax_errors_carry_line() {
        let err = load_policy("[\n{\"route\": \"a\", \"tier\": \"nope\"}\n]").unwrap_err();
        assert!(matches!(err, ValidationError::Syntax { line: 2, .. }), "{err:?}");
        let err = load_policy("[{\"route\": \"a\", \"tier\": \"public\", \"extra\": 1}]").unwrap_err();
        assert!(matches!(err, ValidationError::Syntax { .. }));
    }

    #[test]
    fn document_round_trip() {
        let t = table();
        let doc = serde_json::to_string(&t.to_document()).unwrap();
        assert_eq!(load_policy(&doc).unwrap(), t);
    }

    #[test]
    fn exercised_rule_is_not_flagged() {
        let t = PolicyTable::from_rules([rule("r", Tier::Authenticated, &["read"])]).unwrap();
        let usage = BTreeMap::from([("r".to_string(), BTreeSet::from(["read".to_string()]))]);
        assert!(audit_minimality(&t, &usage).findings.is_empty());
    }

    #[test]
    fn tier_only_privileged_route_is_a_review_item() {
        let t = PolicyTable::from_rules([rule("ops", Tier::Privileged, &[])]).unwrap();
        let report = audit_minimality(&t, &BTreeMap::new());
        assert_eq!(
            report.findings,
            vec![Finding::TierOnly { route: "ops".into(), tier: Tier::Privileged }]
        );
    }

    #[test]
    fn ten_route_fixture_flags_exactly_unused_scopes() {
        // Ten scoped routes; usage covers every required scope except three.
        let rules: Vec<PolicyRule> = (0..10)
            .map(|i| {
                let r = format!("r{i}");
                PolicyRule {
                    route_id: r.clone(),
                    required_tier: Tier::Authenticated,
                    required_scopes: [format!("{r}:read"), format!("{r}:write")].into(),
                }
            })
            .collect();
        let t = PolicyTable::from_rules(rules.clone()).unwrap();
        let unused: BTreeSet<(String, String)> = [
            ("r1".to_string(), "r1:write".to_string()),
            ("r4".to_string(), "r4:read".to_string()),
            ("r7".to_string(), "r7:write".to_string()),
        ]
        .into();
        let mut usage: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for rule in &rules {
            for scope in &rule.required_scopes {
                if !unused.contains(&(rule.route_id.clone(), scope.clone())) {
                    usage.entry(rule.route_id.clone()).or_default().insert(scope.clone());
                }
            }
        }
        // Hand set-difference: required minus observed.
        let report = audit_minimality(&t, &usage);
        assert_eq!(report.unused_scopes(), unused);
        assert_eq!(report.findings.len(), 3);
    }

    #[test]
    fn usage_is_collected_from_events() {
        use crate::audit::{Component, Outcome};
        let mut ev = LogEvent::new(0, "c", Component::GatewayPublic, "gateway.forward", Outcome::Success);
        ev.detail.insert("route_id".into(), "orders".into());
        ev.detail.insert("scopes_used".into(), "orders:read orders:list".into());
        let usage = usage_from_events([&ev]);
        assert_eq!(usage["orders"].len(), 2);
    }
}
