use msag_core::keystore::{KeySet, KeySetConfig, KeyState, DEFAULT_ROTATION_PERIOD};
use msag_core::token::{sign_token, verify_token, DEFAULT_SKEW_TOLERANCE};
use msag_core::{Tier, TokenClaims, TokenUse, VerifyOutcome};
use proptest::prelude::*;

const DAY: i64 = 86_400;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_keeps_exactly_one_active(steps in prop::collection::vec(0i64..(5 * DAY), 1..40)) {
        let mut keys = KeySet::generate(0, KeySetConfig::default());
        let mut now = 0;
        let mut previous = keys.clone();
        for step in steps {
            now += step;
            keys = keys.rotate(now);
            let active = keys.keys().filter(|k| k.state == KeyState::Active).count();
            prop_assert_eq!(active, 1);
            // States only move forward.
            for old in previous.keys() {
                let new = keys.get(&old.kid).unwrap();
                prop_assert!(rank(new.state) >= rank(old.state));
            }
            previous = keys.clone();
        }
    }

    #[test]
    fn seal_unseal_round_trip(plaintext in prop::collection::vec(any::<u8>(), 0..4096)) {
        let keys = KeySet::generate(0, KeySetConfig::default());
        let blob = keys.seal(&plaintext).unwrap();
        prop_assert_eq!(keys.unseal(&blob).unwrap(), plaintext);
    }
}

fn rank(s: KeyState) -> u8 {
    match s {
        KeyState::Active => 0,
        KeyState::Retiring => 1,
        KeyState::Retired => 2,
    }
}

#[test]
fn hundred_random_plaintexts_round_trip() {
    use rand::{Rng, RngCore, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let keys = KeySet::generate(0, KeySetConfig::default());
    for _ in 0..100 {
        let mut p = vec![0u8; rng.random_range(0..=4096)];
        rng.fill_bytes(&mut p);
        assert_eq!(keys.unseal(&keys.seal(&p).unwrap()).unwrap(), p);
    }
}

fn claims(iat: i64, ttl: i64) -> TokenClaims {
    TokenClaims {
        sub: "alice".into(),
        iss: "sts".into(),
        aud: "gateway".into(),
        iat,
        exp: iat + ttl,
        jti: msag_core::crypto::random_id(),
        token_use: TokenUse::Refresh,
        scopes: Default::default(),
        tier: Tier::Authenticated,
    }
}

/// Issue just before rotation, rotate, then walk the clock to the token's
/// expiry and past the retire lag.
#[test]
fn token_signed_before_rotation_verifies_until_expiry() {
    let ttl = DAY;
    let cfg = KeySetConfig::default();
    let mut keys = KeySet::generate(0, cfg);
    keys.check_lifetime(ttl).unwrap();

    let issued_at = DEFAULT_ROTATION_PERIOD - 1;
    let c = claims(issued_at, ttl);
    let token = sign_token(&c, keys.active()).unwrap();

    keys = keys.rotate(DEFAULT_ROTATION_PERIOD);
    assert_eq!(keys.active().kid, "k-2");
    assert_eq!(keys.get("k-1").unwrap().state, KeyState::Retiring);

    let mut now = DEFAULT_ROTATION_PERIOD;
    while now <= c.exp {
        keys = keys.rotate(now);
        assert!(verify_token(token.as_str(), &keys, now).is_valid(), "t={now}");
        now += 3_600;
    }

    let after_lag = DEFAULT_ROTATION_PERIOD + cfg.retire_lag + 1;
    keys = keys.rotate(after_lag);
    assert_eq!(keys.get("k-1").unwrap().state, KeyState::Retired);
    assert_eq!(verify_token(token.as_str(), &keys, after_lag), VerifyOutcome::UnknownKey);

    let fresh = sign_token(&claims(after_lag, 300), keys.active()).unwrap();
    assert_ne!(fresh.kid().unwrap(), "k-1");
    assert!(verify_token(fresh.as_str(), &keys, after_lag + DEFAULT_SKEW_TOLERANCE).is_valid());
}
