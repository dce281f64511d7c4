//! Core building blocks for token-based microservice security: the compact
//! token format, key lifecycle and at-rest encryption, the least-privilege
//! policy engine and the central audit log.

pub mod audit;
pub mod clock;
pub mod crypto;
pub mod keystore;
pub mod policy;
pub mod token;

pub use clock::{Clock, SharedClock, SimClock, SystemClock};
pub use keystore::{KeyError, KeyRing, KeySet, KeySetConfig, KeyState, SealedBlob, SigningKey};
pub use policy::{evaluate, load_policy, Decision, DenyReason, PolicyRule, PolicyTable};
pub use token::{
    sign_token, verify_token, verify_token_with_skew, EncodedToken, Tier, TokenClaims, TokenUse,
    VerifyOutcome,
};
