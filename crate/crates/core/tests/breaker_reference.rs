mod oracles;

use msag_core::audit::{BreakerConfig, BreakerState, CallOutcome};
use oracles::RefBreaker;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, Copy)]
enum Step {
    Success,
    Failure,
    /// Let the cooldown pass, then ask for a call slot.
    WaitAndAcquire,
}

const ALPHABET: [Step; 3] = [Step::Success, Step::Failure, Step::WaitAndAcquire];

#[derive(Clone)]
struct Pair {
    ours: BreakerState,
    reference: RefBreaker,
    now: i64,
}

impl Pair {
    fn new() -> Self {
        let cfg = BreakerConfig::default();
        Self {
            ours: BreakerState::new("svc", cfg),
            reference: RefBreaker::new(cfg.failure_threshold, cfg.cooldown, cfg.probe_successes),
            now: 0,
        }
    }

    fn apply(&mut self, step: Step) -> bool {
        let (a, b) = match step {
            Step::Success => {
                self.ours.record(CallOutcome::Success, self.now);
                self.reference.success(self.now);
                (true, true)
            }
            Step::Failure => {
                self.ours.record(CallOutcome::Failure, self.now);
                self.reference.failure(self.now);
                (true, true)
            }
            Step::WaitAndAcquire => {
                self.now += self.ours.config.cooldown;
                (self.ours.try_acquire(self.now), self.reference.acquire(self.now))
            }
        };
        a == b && self.ours.state.as_str() == self.reference.label()
    }
}

fn explore(pair: Pair, depth: usize, max: usize, divergences: &mut usize, visited: &mut usize) {
    if depth == max {
        return;
    }
    for step in ALPHABET {
        let mut next = pair.clone();
        *visited += 1;
        if !next.apply(step) {
            *divergences += 1;
            continue;
        }
        explore(next, depth + 1, max, divergences, visited);
    }
}

#[test]
fn exhaustive_equivalence_up_to_length_12() {
    let mut divergences = 0;
    let mut visited = 0;
    explore(Pair::new(), 0, 12, &mut divergences, &mut visited);
    assert_eq!(visited, (1..=12).map(|k| 3usize.pow(k)).sum::<usize>());
    assert_eq!(divergences, 0);
}

#[test]
fn random_long_sequences_match_reference() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xb4ea_4e4);
    let cfg = BreakerConfig::default();
    let mut ours = BreakerState::new("svc", cfg);
    let mut reference = RefBreaker::new(cfg.failure_threshold, cfg.cooldown, cfg.probe_successes);
    let mut now = 0i64;
    for step in 0..10_000 {
        now += rng.random_range(0..=2 * cfg.cooldown / 3);
        let agree = match rng.random_range(0..3) {
            0 => ours.try_acquire(now) == reference.acquire(now),
            1 => {
                ours.record(CallOutcome::Success, now);
                reference.success(now);
                true
            }
            _ => {
                ours.record(CallOutcome::Failure, now);
                reference.failure(now);
                true
            }
        };
        assert!(agree && ours.state.as_str() == reference.label(), "diverged at step {step}");
    }
}
