//! End-to-end scenario harness. Boots the token service, both gateways, the
//! façade and mock upstreams on loopback under one simulated clock, then
//! drives simulated web, mobile and IoT clients through scripted steps.

pub mod client;
pub mod facade;
pub mod runner;
pub mod scenario;
pub mod topology;
pub mod upstream;

pub use client::{ClientKind, ClientState, SimClient};
pub use runner::{run_scenario, RunOptions, ScenarioReport, StepOutcome, StepReport};
pub use scenario::{ScenarioError, ScenarioScript};
pub use topology::{Topology, TopologySpec};

/// Scenario files compiled into the binary, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("fig3-happy-path", include_str!("../scenarios/fig3-happy-path.json")),
    ("expired-then-refresh", include_str!("../scenarios/expired-then-refresh.json")),
    ("invalid-refresh-relogin", include_str!("../scenarios/invalid-refresh-relogin.json")),
    ("key-rotation", include_str!("../scenarios/key-rotation.json")),
    ("defense-in-depth", include_str!("../scenarios/defense-in-depth.json")),
    ("iot-client-credentials", include_str!("../scenarios/iot-client-credentials.json")),
    ("multi-client", include_str!("../scenarios/multi-client.json")),
    ("brute-force-anomaly", include_str!("../scenarios/brute-force-anomaly.json")),
    ("circuit-breaker", include_str!("../scenarios/circuit-breaker.json")),
    ("concurrent-refresh", include_str!("../scenarios/concurrent-refresh.json")),
    ("attack-tampered-token", include_str!("../scenarios/attack-tampered-token.json")),
    ("attack-refresh-replay", include_str!("../scenarios/attack-refresh-replay.json")),
    ("attack-anonymous-privileged", include_str!("../scenarios/attack-anonymous-privileged.json")),
    ("attack-direct-private", include_str!("../scenarios/attack-direct-private.json")),
    ("attack-scope-escalation", include_str!("../scenarios/attack-scope-escalation.json")),
    ("attack-sts-down", include_str!("../scenarios/attack-sts-down.json")),
];

pub const ATTACKS: &[&str] = &[
    "attack-tampered-token",
    "attack-refresh-replay",
    "attack-anonymous-privileged",
    "attack-direct-private",
    "attack-scope-escalation",
    "attack-sts-down",
];

pub fn bundled(name: &str) -> Result<ScenarioScript, ScenarioError> {
    let name = name.trim_end_matches(".json");
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ScenarioError::UnknownBundled(name.to_owned()))?;
    ScenarioScript::from_json(text)
}

/// Runs every adversarial scenario; each must pass, i.e. every attack was
/// denied and logged.
pub async fn attack_suite(seed: u64) -> Result<Vec<ScenarioReport>, ScenarioError> {
    let mut out = Vec::new();
    for name in ATTACKS {
        let script = bundled(name)?;
        out.push(
            run_scenario(
                &script,
                &RunOptions {
                    seed,
                    ..Default::default()
                },
            )
            .await?,
        );
    }
    Ok(out)
}
