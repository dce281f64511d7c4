//! Removes credentials from events before they are stored.
//!
//! Anything shaped like a compact token is replaced by `jti:<jti>` (or
//! `jti:unknown` when the payload cannot be read); values under
//! secret-looking keys are replaced wholesale.

use std::sync::LazyLock;

use regex::{Captures, Regex};

use super::LogEvent;
use crate::token::EncodedToken;

pub const REDACTED: &str = "[redacted]";

static TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:[Bb]earer\s+)?([A-Za-z0-9_-]{4,}\.[A-Za-z0-9_-]{4,}\.[A-Za-z0-9_-]{4,})")
        .expect("valid regex")
});

const SECRET_KEYS: &[&str] = &[
    "password",
    "client_secret",
    "secret",
    "refresh_token",
    "access_token",
    "token",
    "authorization",
    "cookie",
];

fn is_secret_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    SECRET_KEYS.iter().any(|s| k == *s || k.ends_with(&format!("_{s}")))
}

// Long three-segment strings are treated as tokens even when the header is
// damaged, so tampered credentials are scrubbed too.
const OPAQUE_TOKEN_LEN: usize = 64;

fn looks_like_token(candidate: &str) -> bool {
    use base64::engine::general_purpose::URL_SAFE_NO_PAD;
    use base64::Engine;
    if candidate.len() >= OPAQUE_TOKEN_LEN {
        return true;
    }
    let Some(head) = candidate.split('.').next() else {
        return false;
    };
    URL_SAFE_NO_PAD
        .decode(head)
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .is_some_and(|v| v.get("alg").is_some())
}

pub fn scrub_text(text: &str) -> String {
    TOKEN_RE
        .replace_all(text, |caps: &Captures<'_>| {
            let candidate = &caps[1];
            if !looks_like_token(candidate) {
                return caps[0].to_owned();
            }
            let jti = EncodedToken::new(candidate)
                .peek_claims()
                .map(|c| c.jti)
                .unwrap_or_else(|| "unknown".into());
            format!("jti:{jti}")
        })
        .into_owned()
}

pub fn scrub(mut event: LogEvent) -> LogEvent {
    event.correlation_id = scrub_text(&event.correlation_id);
    event.event_type = scrub_text(&event.event_type);
    event.subject = event.subject.as_deref().map(scrub_text);
    event.detail = event
        .detail
        .into_iter()
        .map(|(k, v)| {
            let v = if is_secret_key(&k) && !v.starts_with("jti:") {
                let scrubbed = scrub_text(&v);
                if scrubbed != v { scrubbed } else { REDACTED.to_owned() }
            } else {
                scrub_text(&v)
            };
            (scrub_text(&k), v)
        })
        .collect();
    event
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{Component, Outcome};
    use crate::keystore::{KeySet, KeySetConfig};
    use crate::token::{sign_token, Tier, TokenClaims, TokenUse};

    fn token() -> (EncodedToken, String) {
        let keys = KeySet::generate(0, KeySetConfig::default());
        let claims = TokenClaims {
            sub: "alice".into(),
            iss: "sts".into(),
            aud: "gw".into(),
            iat: 0,
            exp: 300,
            jti: "0123456789abcdef0123456789abcdef".into(),
            token_use: TokenUse::Access,
            scopes: Default::default(),
            tier: Tier::Authenticated,
        };
        (sign_token(&claims, keys.active()).unwrap(), claims.jti)
    }

    #[test]
    fn bearer_token_is_replaced_by_jti() {
        let (tok, jti) = token();
        let ev = LogEvent::new(0, "c", Component::GatewayPublic, "x", Outcome::Deny)
            .with("header", format!("Bearer {}", tok.as_str()));
        let ev = scrub(ev);
        assert_eq!(ev.detail["header"], format!("jti:{jti}"));
    }

    #[test]
    fn secret_keys_are_redacted() {
        let ev = LogEvent::new(0, "c", Component::Sts, "auth.failure", Outcome::Deny)
            .with("password", "hunter2")
            .with("client_secret", "s3cr3t")
            .with("username", "alice");
        let ev = scrub(ev);
        assert_eq!(ev.detail["password"], REDACTED);
        assert_eq!(ev.detail["client_secret"], REDACTED);
        assert_eq!(ev.detail["username"], "alice");
    }

    #[test]
    fn dotted_non_tokens_survive() {
        assert_eq!(scrub_text("svc.internal.local"), "svc.internal.local");
        assert_eq!(scrub_text("gateway.forward.success"), "gateway.forward.success");
    }

    #[test]
    fn damaged_token_is_still_scrubbed() {
        let (tok, jti) = token();
        let damaged = format!("x{}", &tok.as_str()[1..]);
        assert_eq!(scrub_text(&damaged), format!("jti:{jti}"));
        let (head, _) = tok.as_str().split_once('.').unwrap();
        let garbled = format!("{head}.{}.{}", "Q".repeat(40), "Z".repeat(43));
        assert_eq!(scrub_text(&garbled), "jti:unknown");
    }

    #[test]
    fn token_embedded_in_text_is_replaced() {
        let (tok, jti) = token();
        let text = format!("rejected {} at edge", tok.as_str());
        assert_eq!(scrub_text(&text), format!("rejected jti:{jti} at edge"));
    }

    #[test]
    fn token_under_token_key_becomes_jti() {
        let (tok, jti) = token();
        let ev = LogEvent::new(0, "c", Component::Sts, "x", Outcome::Success).with("token", tok.as_str());
        assert_eq!(scrub(ev).detail["token"], format!("jti:{jti}"));
    }
}
