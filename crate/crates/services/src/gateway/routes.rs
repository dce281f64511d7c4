use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub prefix: String,
    /// Base URL of the upstream service.
    pub upstream: String,
    pub route_id: String,
    #[serde(default)]
    pub via_private: bool,
    /// Breaker and log name for the upstream; defaults to `route_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<String>,
    /// Pass the caller's bearer token on as `X-Delegated-Authorization`.
    /// Only meant for routes whose upstream is a trusted façade.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub delegate_token: bool,
}

impl Route {
    pub fn new(prefix: &str, upstream: &str, route_id: &str) -> Self {
        Self {
            prefix: prefix.to_owned(),
            upstream: upstream.to_owned(),
            route_id: route_id.to_owned(),
            via_private: false,
            service: None,
            delegate_token: false,
        }
    }

    pub fn private(mut self) -> Self {
        self.via_private = true;
        self
    }

    pub fn service_name(&self) -> &str {
        self.service.as_deref().unwrap_or(&self.route_id)
    }

    /// Segment-aware match: `/api` matches `/api`, `/api/x` and `/api?q`,
    /// but not `/apix`.
    pub fn matches(&self, path: &str) -> bool {
        let Some(rest) = path.strip_prefix(self.prefix.as_str()) else {
            return false;
        };
        self.prefix.ends_with('/') || rest.is_empty() || rest.starts_with('/') || rest.starts_with('?')
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("duplicate route prefix {0}")]
    DuplicatePrefix(String),
    #[error("route prefix {0:?} must start with '/'")]
    BadPrefix(String),
    #[error("route {0} is via_private and cannot be served by a public gateway")]
    PrivateOnPublic(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteTable {
    routes: Vec<Route>,
}

impl RouteTable {
    pub fn new(routes: Vec<Route>) -> Result<Self, RouteError> {
        for (i, r) in routes.iter().enumerate() {
            if !r.prefix.starts_with('/') {
                return Err(RouteError::BadPrefix(r.prefix.clone()));
            }
            if routes[..i].iter().any(|o| o.prefix == r.prefix) {
                return Err(RouteError::DuplicatePrefix(r.prefix.clone()));
            }
        }
        Ok(Self { routes })
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    /// Longest matching prefix; on equal length the first registered wins.
    pub fn lookup(&self, path: &str) -> Option<&Route> {
        let mut best: Option<&Route> = None;
        for r in &self.routes {
            if r.matches(path) && best.is_none_or(|b| r.prefix.len() > b.prefix.len()) {
                best = Some(r);
            }
        }
        best
    }
}

pub fn route_lookup<'a>(path: &str, routes: &'a RouteTable) -> Option<&'a Route> {
    routes.lookup(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> RouteTable {
        RouteTable::new(vec![
            Route::new("/api", "http://a", "api"),
            Route::new("/api/admin", "http://b", "admin"),
        ])
        .unwrap()
    }

    #[test]
    fn longest_prefix_wins() {
        assert_eq!(table().lookup("/api/admin/users").unwrap().route_id, "admin");
        assert_eq!(table().lookup("/api/orders").unwrap().route_id, "api");
        assert!(table().lookup("/other").is_none());
    }

    #[test]
    fn segment_boundaries_are_respected() {
        assert!(table().lookup("/apiary").is_none());
        assert_eq!(table().lookup("/api/administrator").unwrap().route_id, "api");
        assert_eq!(table().lookup("/api?x=1").unwrap().route_id, "api");
    }

    #[test]
    fn duplicates_rejected() {
        let err = RouteTable::new(vec![Route::new("/a", "u", "1"), Route::new("/a", "u", "2")]).unwrap_err();
        assert_eq!(err, RouteError::DuplicatePrefix("/a".into()));
    }
}
