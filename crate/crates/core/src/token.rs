//! Compact MAC-signed tokens.
//!
//! Wire format: `b64(header) "." b64(claims) "." b64(mac)` where `b64` is
//! URL-safe base64 without padding and the MAC is HMAC-SHA256 over the first
//! two segments joined by the dot, keyed by the signing key's `sign` subkey.

use std::collections::BTreeSet;
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto;
use crate::keystore::{KeySet, KeyState, SigningKey};

pub const ALG: &str = "HS256";
pub const TYP: &str = "MSAT";
pub const DEFAULT_SKEW_TOLERANCE: i64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenUse {
    Access,
    Refresh,
}

/// Security tier, ordered `Public < Authenticated < Privileged`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Public,
    Authenticated,
    Privileged,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Public => "public",
            Tier::Authenticated => "authenticated",
            Tier::Privileged => "privileged",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Signed claim set. Field order here is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenClaims {
    pub sub: String,
    pub iss: String,
    pub aud: String,
    pub iat: i64,
    pub exp: i64,
    pub jti: String,
    pub token_use: TokenUse,
    pub scopes: BTreeSet<String>,
    pub tier: Tier,
}

impl TokenClaims {
    /// Checks the structural invariants every issued claim set must satisfy.
    pub fn check(&self) -> Result<(), ClaimsError> {
        if self.exp <= self.iat {
            return Err(ClaimsError::ExpiryNotAfterIssue);
        }
        if self.token_use == TokenUse::Refresh && !self.scopes.is_empty() {
            return Err(ClaimsError::RefreshWithScopes);
        }
        Ok(())
    }

    pub fn has_scope(&self, scope: &str) -> bool {
        self.scopes.contains(scope)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClaimsError {
    #[error("exp must be after iat")]
    ExpiryNotAfterIssue,
    #[error("refresh tokens carry no scopes")]
    RefreshWithScopes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    alg: String,
    kid: String,
    typ: String,
}

/// A token in compact serialization.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncodedToken(String);

impl EncodedToken {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Reads the `kid` header field without verifying anything.
    pub fn kid(&self) -> Option<String> {
        let header = self.0.split('.').next()?;
        let bytes = URL_SAFE_NO_PAD.decode(header).ok()?;
        serde_json::from_slice::<Header>(&bytes).ok().map(|h| h.kid)
    }

    /// Reads the claims without verifying the MAC. Only for log scrubbing
    /// and diagnostics; never for authorization.
    pub fn peek_claims(&self) -> Option<TokenClaims> {
        let claims = self.0.split('.').nth(1)?;
        let bytes = URL_SAFE_NO_PAD.decode(claims).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}

// Tokens are bearer credentials; keep them out of debug output.
impl fmt::Debug for EncodedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.peek_claims() {
            Some(c) => write!(f, "EncodedToken(jti:{})", c.jti),
            None => f.write_str("EncodedToken(<opaque>)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignError {
    #[error("key {0} is not active")]
    InactiveKey(String),
    #[error(transparent)]
    Claims(#[from] ClaimsError),
}

pub fn sign_token(claims: &TokenClaims, key: &SigningKey) -> Result<EncodedToken, SignError> {
    if key.state != KeyState::Active {
        return Err(SignError::InactiveKey(key.kid.clone()));
    }
    claims.check()?;
    let header = Header {
        alg: ALG.to_owned(),
        kid: key.kid.clone(),
        typ: TYP.to_owned(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let body = serde_json::to_vec(claims).expect("claims serialize");
    let mut out = URL_SAFE_NO_PAD.encode(header);
    out.push('.');
    URL_SAFE_NO_PAD.encode_string(body, &mut out);
    let mac = crypto::hmac_sha256(&key.mac_key(), out.as_bytes());
    out.push('.');
    URL_SAFE_NO_PAD.encode_string(mac, &mut out);
    Ok(EncodedToken(out))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyOutcome {
    Valid(TokenClaims),
    BadSignature,
    Expired,
    NotYetValid,
    UnknownKey,
    Malformed,
}

impl VerifyOutcome {
    pub fn is_valid(&self) -> bool {
        matches!(self, VerifyOutcome::Valid(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            VerifyOutcome::Valid(_) => "valid",
            VerifyOutcome::BadSignature => "bad_signature",
            VerifyOutcome::Expired => "expired",
            VerifyOutcome::NotYetValid => "not_yet_valid",
            VerifyOutcome::UnknownKey => "unknown_key",
            VerifyOutcome::Malformed => "malformed",
        }
    }
}

/// Verifies with the default 30 second skew tolerance.
pub fn verify_token(token: &str, keys: &KeySet, now: i64) -> VerifyOutcome {
    verify_token_with_skew(token, keys, now, DEFAULT_SKEW_TOLERANCE)
}

pub fn verify_token_with_skew(token: &str, keys: &KeySet, now: i64, skew: i64) -> VerifyOutcome {
    let mut parts = token.split('.');
    let (Some(header_b64), Some(claims_b64), Some(mac_b64), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return VerifyOutcome::Malformed;
    };

    let Ok(header_bytes) = URL_SAFE_NO_PAD.decode(header_b64) else {
        return VerifyOutcome::Malformed;
    };
    let Ok(header) = serde_json::from_slice::<Header>(&header_bytes) else {
        return VerifyOutcome::Malformed;
    };
    if header.alg != ALG || header.typ != TYP {
        return VerifyOutcome::Malformed;
    }
    let Ok(mac) = URL_SAFE_NO_PAD.decode(mac_b64) else {
        return VerifyOutcome::Malformed;
    };

    let key = match keys.get(&header.kid) {
        Some(k) if k.state != KeyState::Retired => k,
        _ => return VerifyOutcome::UnknownKey,
    };

    let signing_input = &token[..header_b64.len() + 1 + claims_b64.len()];
    if !crypto::hmac_sha256_verify(&key.mac_key(), signing_input.as_bytes(), &mac) {
        return VerifyOutcome::BadSignature;
    }

    let Ok(claims_bytes) = URL_SAFE_NO_PAD.decode(claims_b64) else {
        return VerifyOutcome::Malformed;
    };
    let Ok(claims) = serde_json::from_slice::<TokenClaims>(&claims_bytes) else {
        return VerifyOutcome::Malformed;
    };
    if claims.check().is_err() {
        return VerifyOutcome::Malformed;
    }

    if now > claims.exp.saturating_add(skew) {
        VerifyOutcome::Expired
    } else if now < claims.iat.saturating_sub(skew) {
        VerifyOutcome::NotYetValid
    } else {
        VerifyOutcome::Valid(claims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystore::{KeySetConfig, SigningKey};

    fn claims(iat: i64, ttl: i64) -> TokenClaims {
        TokenClaims {
            sub: "alice".into(),
            iss: "sts".into(),
            aud: "gateway".into(),
            iat,
            exp: iat + ttl,
            jti: crypto::random_id(),
            token_use: TokenUse::Access,
            scopes: ["orders:read".to_string(), "catalog:read".to_string()]
                .into_iter()
                .collect(),
            tier: Tier::Authenticated,
        }
    }

    fn keyset(now: i64) -> KeySet {
        KeySet::generate(now, KeySetConfig::default())
    }

    #[test]
    fn round_trip_is_valid() {
        let keys = keyset(1_000);
        let c = claims(1_000, 300);
        let token = sign_token(&c, keys.active()).unwrap();
        assert_eq!(verify_token(token.as_str(), &keys, 1_100), VerifyOutcome::Valid(c));
    }

    #[test]
    fn signing_is_deterministic_and_wire_shaped() {
        let keys = keyset(1_000);
        let c = claims(1_000, 300);
        let a = sign_token(&c, keys.active()).unwrap();
        let b = sign_token(&c, keys.active()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_str().split('.').count(), 3);
        assert!(!a.as_str().contains('='));
        assert!(!a.as_str().contains('+') && !a.as_str().contains('/'));

        let header = URL_SAFE_NO_PAD.decode(a.as_str().split('.').next().unwrap()).unwrap();
        assert_eq!(
            String::from_utf8(header).unwrap(),
            format!(r#"{{"alg":"HS256","kid":"{}","typ":"MSAT"}}"#, keys.active().kid)
        );
    }

    #[test]
    fn claims_serialize_in_fixed_order_with_sorted_scopes() {
        let c = claims(10, 5);
        let json = serde_json::to_string(&c).unwrap();
        let order = ["\"sub\"", "\"iss\"", "\"aud\"", "\"iat\"", "\"exp\"", "\"jti\"", "\"token_use\"", "\"scopes\"", "\"tier\""];
        let positions: Vec<usize> = order.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
        assert!(json.contains(r#""scopes":["catalog:read","orders:read"]"#));
    }

    #[test]
    fn long_expired_token_is_expired() {
        let keys = keyset(0);
        let now = 10_000;
        let c = claims(now - 1_300, 300);
        let token = sign_token(&c, keys.active()).unwrap();
        assert_eq!(verify_token(token.as_str(), &keys, now), VerifyOutcome::Expired);
    }

    #[test]
    fn expiry_boundary_is_strict() {
        let keys = keyset(0);
        let c = claims(1_000, 300);
        let token = sign_token(&c, keys.active()).unwrap();
        let edge = c.exp + DEFAULT_SKEW_TOLERANCE;
        assert!(verify_token(token.as_str(), &keys, edge).is_valid());
        assert_eq!(verify_token(token.as_str(), &keys, edge + 1), VerifyOutcome::Expired);
    }

    #[test]
    fn future_token_is_not_yet_valid() {
        let keys = keyset(0);
        let c = claims(1_000, 300);
        let token = sign_token(&c, keys.active()).unwrap();
        assert!(verify_token(token.as_str(), &keys, 1_000 - DEFAULT_SKEW_TOLERANCE).is_valid());
        assert_eq!(
            verify_token(token.as_str(), &keys, 1_000 - DEFAULT_SKEW_TOLERANCE - 1),
            VerifyOutcome::NotYetValid
        );
    }

    #[test]
    fn flipped_payload_bit_is_rejected() {
        let keys = keyset(0);
        let c = claims(1_000, 300);
        let token = sign_token(&c, keys.active()).unwrap();
        let mut bytes = token.as_str().as_bytes().to_vec();
        let dot = token.as_str().find('.').unwrap();
        // 'sub' lives early in the payload; flip a low bit of a base64 char.
        bytes[dot + 4] ^= 0x01;
        let tampered = String::from_utf8(bytes).unwrap();
        let outcome = verify_token(&tampered, &keys, 1_100);
        assert!(matches!(outcome, VerifyOutcome::BadSignature | VerifyOutcome::Malformed));
    }

    #[test]
    fn garbage_is_malformed() {
        let keys = keyset(0);
        assert_eq!(verify_token("abc", &keys, 0), VerifyOutcome::Malformed);
        assert_eq!(verify_token("a.b.c.d", &keys, 0), VerifyOutcome::Malformed);
        assert_eq!(verify_token("", &keys, 0), VerifyOutcome::Malformed);
    }

    #[test]
    fn unknown_kid_is_unknown_key() {
        let keys = keyset(0);
        let other = keyset(0);
        let token = sign_token(&claims(0, 300), other.active()).unwrap();
        // Both sets start at k-1, so rename the key to force a miss.
        let mut foreign = SigningKey::generate(7, 0);
        foreign.state = KeyState::Active;
        let token2 = sign_token(&claims(0, 300), &foreign).unwrap();
        assert_eq!(verify_token(token.as_str(), &keys, 10), VerifyOutcome::BadSignature);
        assert_eq!(verify_token(token2.as_str(), &keys, 10), VerifyOutcome::UnknownKey);
    }

    #[test]
    fn inactive_key_cannot_sign() {
        let mut key = SigningKey::generate(1, 0);
        key.state = KeyState::Retiring;
        assert!(matches!(
            sign_token(&claims(0, 300), &key),
            Err(SignError::InactiveKey(_))
        ));
    }

    #[test]
    fn refresh_claims_with_scopes_are_rejected() {
        let keys = keyset(0);
        let mut c = claims(0, 300);
        c.token_use = TokenUse::Refresh;
        assert_eq!(
            sign_token(&c, keys.active()),
            Err(SignError::Claims(ClaimsError::RefreshWithScopes))
        );
    }

    #[test]
    fn debug_output_hides_token() {
        let keys = keyset(0);
        let c = claims(0, 300);
        let token = sign_token(&c, keys.active()).unwrap();
        let dbg = format!("{token:?}");
        assert!(!dbg.contains(token.as_str()));
        assert!(dbg.contains(&c.jti));
        assert_eq!(token.kid().as_deref(), Some(keys.active().kid.as_str()));
    }
}
