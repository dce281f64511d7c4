use msag_core::audit::{Component, LogEvent, Outcome};
use msag_harness::runner::{label, ordered_subsequence};
use proptest::prelude::*;

const COMPONENTS: [Component; 3] = [Component::Sts, Component::GatewayPublic, Component::Upstream];

fn events(spec: &[(usize, u8)]) -> Vec<LogEvent> {
    spec.iter()
        .enumerate()
        .map(|(i, (c, t))| LogEvent::new(i as i64, "cid", COMPONENTS[*c], format!("e.{t}"), Outcome::Success))
        .collect()
}

fn trace() -> impl Strategy<Value = Vec<(usize, u8)>> {
    proptest::collection::vec((0..3usize, 0..4u8), 0..24)
}

proptest! {
    #[test]
    fn any_subsequence_of_labels_matches(spec in trace(), keep in proptest::collection::vec(any::<bool>(), 24)) {
        let evs = events(&spec);
        let picked: Vec<String> = evs
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(e, _)| if e.ts % 2 == 0 { label(e) } else { e.event_type.clone() })
            .collect();
        prop_assert!(ordered_subsequence(&picked, &evs).is_ok());
    }

    #[test]
    fn a_pattern_absent_from_the_trace_is_reported(spec in trace(), at in 0usize..8) {
        let evs = events(&spec);
        let mut patterns: Vec<String> = evs.iter().map(label).collect();
        let at = at.min(patterns.len());
        patterns.insert(at, "sts:e.never".into());
        prop_assert_eq!(ordered_subsequence(&patterns, &evs), Err("sts:e.never"));
    }

    #[test]
    fn swapping_two_unique_events_breaks_the_order(spec in trace()) {
        let evs = events(&spec);
        let labels: Vec<String> = evs.iter().map(label).collect();
        let unique: Vec<&String> = labels.iter().filter(|l| labels.iter().filter(|m| m == l).count() == 1).collect();
        prop_assume!(unique.len() >= 2);
        let reversed = vec![unique[1].clone(), unique[0].clone()];
        prop_assert!(ordered_subsequence(&reversed, &evs).is_err());
    }
}
