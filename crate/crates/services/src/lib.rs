//! Network services: the token service, the filter-chain gateway and the
//! audit aggregator endpoint.

pub mod aggregator;
pub mod gateway;
pub mod idp;
pub mod server;
pub mod sts;

pub use gateway::{Gateway, GatewayProfile, GatewayRequest, GatewayResponse, Route, RouteTable};
pub use idp::{AccountSpec, Credentials, IdentityProvider, InMemoryIdp, Principal};
pub use sts::{Introspection, SealedStore, Sts, StsConfig, StsError, TokenPair};
