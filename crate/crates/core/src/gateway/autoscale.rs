//! Queue-depth autoscaling as a pure decision function.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalePolicy {
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub q_hi: f64,
    pub q_lo: f64,
    pub sustain_ms: u64,
    pub cooldown_ms: u64,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        Self {
            min_replicas: 1,
            max_replicas: 4,
            q_hi: 4.0,
            q_lo: 0.5,
            sustain_ms: 3000,
            cooldown_ms: 10_000,
        }
    }
}

impl ScalePolicy {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.min_replicas > self.max_replicas {
            return Err("min_replicas");
        }
        if self.max_replicas == 0 {
            return Err("max_replicas");
        }
        if !(self.q_lo.is_finite() && self.q_hi.is_finite() && self.q_lo >= 0.0) {
            return Err("q_lo");
        }
        if self.q_lo >= self.q_hi {
            return Err("q_lo");
        }
        Ok(())
    }

    pub fn clamp(&self, replicas: u32) -> u32 {
        replicas.clamp(self.min_replicas, self.max_replicas)
    }
}

/// Sustain and cooldown clocks carried between steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleState {
    pub above_since_ms: Option<i64>,
    pub below_since_ms: Option<i64>,
    pub last_scale_ms: Option<i64>,
}

/// One autoscaler decision. The target moves by at most one replica, only
/// after the depth has stayed past a threshold for `sustain_ms` and at least
/// `cooldown_ms` after the previous change; it never leaves
/// `[min_replicas, max_replicas]`.
pub fn autoscale_step(
    now_ms: i64,
    queue_depth_avg: f64,
    replicas: u32,
    policy: &ScalePolicy,
    state: ScaleState,
) -> (u32, ScaleState) {
    let current = policy.clamp(replicas);
    let above = queue_depth_avg > policy.q_hi;
    let below = queue_depth_avg < policy.q_lo;
    let mut next = ScaleState {
        above_since_ms: above.then(|| state.above_since_ms.unwrap_or(now_ms)),
        below_since_ms: below.then(|| state.below_since_ms.unwrap_or(now_ms)),
        last_scale_ms: state.last_scale_ms,
    };
    let sustained = |since: Option<i64>| since.is_some_and(|s| now_ms - s >= policy.sustain_ms as i64);
    let cooled = state
        .last_scale_ms
        .is_none_or(|t| now_ms - t >= policy.cooldown_ms as i64);

    let target = if cooled && sustained(next.above_since_ms) && current < policy.max_replicas {
        current + 1
    } else if cooled && sustained(next.below_since_ms) && current > policy.min_replicas {
        current - 1
    } else {
        current
    };
    if target != current {
        next.last_scale_ms = Some(now_ms);
        next.above_since_ms = next.above_since_ms.map(|_| now_ms);
        next.below_since_ms = next.below_since_ms.map(|_| now_ms);
    }
    (target, next)
}

/// Runs a depth trace `(now_ms, depth)` through [`autoscale_step`], feeding
/// each target back as the next replica count.
pub fn replay(trace: &[(i64, f64)], start_replicas: u32, policy: &ScalePolicy) -> Vec<u32> {
    let mut state = ScaleState::default();
    let mut replicas = start_replicas;
    trace
        .iter()
        .map(|&(t, d)| {
            let (target, s) = autoscale_step(t, d, replicas, policy, state);
            state = s;
            replicas = target;
            target
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn idle_at_min_stays() {
        let p = ScalePolicy::default();
        let (t, _) = autoscale_step(0, 0.0, 1, &p, ScaleState::default());
        assert_eq!(t, 1);
    }

    #[test]
    fn sustained_high_depth_adds_one() {
        // Hand-stepped: depth 8 (twice q_hi) from t=0, ticks every 1000 ms.
        let p = ScalePolicy::default();
        let trace: Vec<(i64, f64)> = (0..=5).map(|i| (i * 1000, 8.0)).collect();
        assert_eq!(replay(&trace, 1, &p), vec![1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn cooldown_blocks_second_step() {
        let p = ScalePolicy::default();
        let trace: Vec<(i64, f64)> = (0..=14).map(|i| (i * 1000, 8.0)).collect();
        let got = replay(&trace, 1, &p);
        // +1 at 3000; the next is allowed at 13000 (cooldown 10 s, sustain
        // restarted at 3000 and long satisfied by then).
        assert_eq!(got[3], 2);
        assert_eq!(got[12], 2);
        assert_eq!(got[13], 3);
    }

    #[test]
    fn scale_down_after_low_depth() {
        let p = ScalePolicy::default();
        let trace: Vec<(i64, f64)> = (0..=4).map(|i| (i * 1000, 0.0)).collect();
        assert_eq!(replay(&trace, 3, &p), vec![3, 3, 3, 2, 2]);
    }

    #[test]
    fn interrupted_pressure_restarts_sustain() {
        let p = ScalePolicy::default();
        let trace = [(0, 9.0), (2000, 9.0), (2500, 1.0), (3000, 9.0), (5500, 9.0), (6000, 9.0)];
        assert_eq!(replay(&trace, 1, &p), vec![1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn at_max_stays_at_max() {
        let p = ScalePolicy::default();
        let trace: Vec<(i64, f64)> = (0..50).map(|i| (i * 1000, 1000.0)).collect();
        assert!(replay(&trace, 4, &p).iter().all(|&t| t == 4));
    }

    #[test]
    fn policy_validation() {
        assert!(ScalePolicy::default().validate().is_ok());
        let bad = ScalePolicy {
            q_lo: 5.0,
            ..ScalePolicy::default()
        };
        assert_eq!(bad.validate(), Err("q_lo"));
        let bad = ScalePolicy {
            min_replicas: 5,
            ..ScalePolicy::default()
        };
        assert_eq!(bad.validate(), Err("min_replicas"));
    }

    proptest! {
        #[test]
        fn clamped_and_deterministic(
            steps in prop::collection::vec((0i64..3000, 0.0f64..20.0), 1..200),
            min in 0u32..3, span in 0u32..4, start in 0u32..8,
        ) {
            let policy = ScalePolicy { min_replicas: min, max_replicas: min + span.max(1), ..ScalePolicy::default() };
            let mut t = 0;
            let trace: Vec<(i64, f64)> = steps.iter().map(|(dt, d)| { t += dt; (t, *d) }).collect();
            let a = replay(&trace, start, &policy);
            let b = replay(&trace, start, &policy);
            prop_assert_eq!(&a, &b);
            let mut prev = policy.clamp(start);
            for x in a {
                prop_assert!(x >= policy.min_replicas && x <= policy.max_replicas);
                prop_assert!(x.abs_diff(prev) <= 1);
                prev = x;
            }
        }
    }
}
