//! Independent reference implementations used to cross-check the library.
//!
//! Nothing here calls into the code under test; each oracle is written from
//! the textbook definition of the thing it checks.

#![allow(dead_code)]

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

/// HMAC-SHA256 from the definition: H((K' ^ opad) || H((K' ^ ipad) || m)).
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    const BLOCK: usize = 64;
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let mut inner = Sha256::new();
    inner.update(k.iter().map(|b| b ^ 0x36).collect::<Vec<u8>>());
    inner.update(message);
    let inner = inner.finalize();
    let mut outer = Sha256::new();
    outer.update(k.iter().map(|b| b ^ 0x5c).collect::<Vec<u8>>());
    outer.update(inner);
    outer.finalize().into()
}

/// AES-256-GCM via ring, an implementation unrelated to the one in the
/// library. Returns ciphertext || tag.
pub fn aes256gcm_seal(key: &[u8; 32], nonce: &[u8; 12], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, AES_256_GCM};
    let key = LessSafeKey::new(UnboundKey::new(&AES_256_GCM, key).expect("32-byte key"));
    let mut buf = plaintext.to_vec();
    key.seal_in_place_append_tag(Nonce::assume_unique_for_key(*nonce), Aad::from(aad), &mut buf)
        .expect("seal");
    buf
}

/// Tier rank written out by hand rather than relying on derived ordering.
pub fn tier_rank(tier: &str) -> u8 {
    match tier {
        "public" => 0,
        "authenticated" => 1,
        "privileged" => 2,
        other => panic!("unknown tier {other}"),
    }
}

/// Naive policy decision: returns the deny reason label or "allow".
pub fn policy_decision(
    caller: Option<(&str, &BTreeSet<String>)>,
    rule: Option<(&str, &BTreeSet<String>)>,
) -> &'static str {
    let Some((rule_tier, rule_scopes)) = rule else {
        return "no_rule";
    };
    if rule_tier == "public" {
        return "allow";
    }
    let Some((caller_tier, caller_scopes)) = caller else {
        return "unauthenticated";
    };
    if tier_rank(caller_tier) < tier_rank(rule_tier) {
        return "insufficient_tier";
    }
    for scope in rule_scopes {
        if !caller_scopes.iter().any(|s| s == scope) {
            return "missing_scope";
        }
    }
    "allow"
}

/// Scans every prefix; the longest wins and the earliest registered wins ties.
/// A prefix only matches on a segment boundary: the path must equal it or
/// continue with '/' or '?', unless the prefix itself ends in '/'.
pub fn longest_prefix(prefixes: &[String], path: &str) -> Option<usize> {
    let path: Vec<char> = path.chars().collect();
    let mut best: Option<usize> = None;
    for (i, p) in prefixes.iter().enumerate() {
        let p: Vec<char> = p.chars().collect();
        if p.len() > path.len() || path[..p.len()] != p[..] {
            continue;
        }
        let boundary = p.last() == Some(&'/') || matches!(path.get(p.len()), None | Some('/') | Some('?'));
        if boundary && best.is_none_or(|b| p.len() > prefixes[b].chars().count()) {
            best = Some(i);
        }
    }
    best
}

/// Circuit breaker written as an explicit transition table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    Closed { failures: u32 },
    Open { since: i64 },
    HalfOpen { successes: u32 },
}

#[derive(Debug, Clone, Copy)]
pub struct RefBreaker {
    pub mode: RefMode,
    pub threshold: u32,
    pub cooldown: i64,
    pub probes: u32,
}

impl RefBreaker {
    pub fn new(threshold: u32, cooldown: i64, probes: u32) -> Self {
        Self {
            mode: RefMode::Closed { failures: 0 },
            threshold,
            cooldown,
            probes,
        }
    }

    /// Ask to make a call at `now`.
    pub fn acquire(&mut self, now: i64) -> bool {
        match self.mode {
            RefMode::Closed { .. } => true,
            RefMode::HalfOpen { .. } => true,
            RefMode::Open { since } => {
                if now - since >= self.cooldown {
                    self.mode = RefMode::HalfOpen { successes: 0 };
                    true
                } else {
                    false
                }
            }
        }
    }

    pub fn success(&mut self, now: i64) {
        if let RefMode::Open { since } = self.mode {
            if now - since < self.cooldown {
                return;
            }
            self.mode = RefMode::HalfOpen { successes: 0 };
        }
        self.mode = match self.mode {
            RefMode::Closed { .. } => RefMode::Closed { failures: 0 },
            RefMode::HalfOpen { successes } if successes + 1 >= self.probes => RefMode::Closed { failures: 0 },
            RefMode::HalfOpen { successes } => RefMode::HalfOpen { successes: successes + 1 },
            open => open,
        };
    }

    pub fn failure(&mut self, now: i64) {
        if let RefMode::Open { since } = self.mode {
            if now - since < self.cooldown {
                return;
            }
            self.mode = RefMode::HalfOpen { successes: 0 };
        }
        self.mode = match self.mode {
            RefMode::Closed { failures } if failures + 1 >= self.threshold => RefMode::Open { since: now },
            RefMode::Closed { failures } => RefMode::Closed { failures: failures + 1 },
            RefMode::HalfOpen { .. } => RefMode::Open { since: now },
            open => open,
        };
    }

    pub fn label(&self) -> &'static str {
        match self.mode {
            RefMode::Closed { .. } => "closed",
            RefMode::Open { .. } => "open",
            RefMode::HalfOpen { .. } => "half_open",
        }
    }
}

#[cfg(test)]
mod self_checks {
    #[allow(unused_imports)]
    use super::*;

    #[test]
    fn hmac_oracle_reproduces_rfc4231_case_2() {
        assert_eq!(
            hex::encode(hmac_sha256(b"Jefe", b"what do ya want for nothing?")),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn hmac_oracle_handles_long_keys() {
        // RFC 4231 test case 6: 131-byte key of 0xaa.
        let key = [0xaau8; 131];
        assert_eq!(
            hex::encode(hmac_sha256(&key, b"Test Using Larger Than Block-Size Key - Hash Key First")),
            "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54"
        );
    }
}
