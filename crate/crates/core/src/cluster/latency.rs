use serde::{Deserialize, Serialize};

use crate::engine::RandomSource;

/// A latency knob: either a fixed number of seconds or a seeded distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delay {
    Constant(f64),
    Distribution(DelayDistribution),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayDistribution {
    Uniform { min: f64, max: f64 },
    /// Truncated at zero.
    Normal { mean: f64, std_dev: f64 },
    Exponential { mean: f64 },
}

impl Delay {
    pub fn constant(seconds: f64) -> Self {
        Delay::Constant(seconds)
    }

    pub fn uniform(min: f64, max: f64) -> Self {
        Delay::Distribution(DelayDistribution::Uniform { min, max })
    }

    /// Draws one value. Constants consume no randomness.
    pub fn sample(&self, rng: &mut RandomSource) -> f64 {
        let raw = match self {
            Delay::Constant(v) => *v,
            Delay::Distribution(DelayDistribution::Uniform { min, max }) => rng.uniform(*min, *max),
            Delay::Distribution(DelayDistribution::Normal { mean, std_dev }) => {
                rng.normal(*mean, *std_dev)
            }
            Delay::Distribution(DelayDistribution::Exponential { mean }) => rng.exponential(*mean),
        };
        raw.max(0.0)
    }

    pub fn mean(&self) -> f64 {
        match self {
            Delay::Constant(v) => *v,
            Delay::Distribution(DelayDistribution::Uniform { min, max }) => (min + max) / 2.0,
            Delay::Distribution(DelayDistribution::Normal { mean, .. }) => *mean,
            Delay::Distribution(DelayDistribution::Exponential { mean }) => *mean,
        }
    }

    /// Largest value a draw can take, where that is finite.
    pub fn upper_bound(&self) -> Option<f64> {
        match self {
            Delay::Constant(v) => Some(*v),
            Delay::Distribution(DelayDistribution::Uniform { max, .. }) => Some(*max),
            _ => None,
        }
    }

    fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            Delay::Constant(v) => ok(*v),
            Delay::Distribution(DelayDistribution::Uniform { min, max }) => {
                ok(*min) && ok(*max) && min <= max
            }
            Delay::Distribution(DelayDistribution::Normal { mean, std_dev }) => {
                ok(*mean) && ok(*std_dev)
            }
            Delay::Distribution(DelayDistribution::Exponential { mean }) => ok(*mean),
        }
    }
}

macro_rules! latency_profile {
    ($( $(#[$doc:meta])* $field:ident ),* $(,)?) => {
        /// Timing knobs for one architecture variant. Every field is a [`Delay`].
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct LatencyProfile {
            $( $(#[$doc])* pub $field: Delay, )*
        }

        /// Partial profile used by scenario files; unset fields keep the base value.
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct LatencyOverrides {
            $( #[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<Delay>, )*
        }

        impl LatencyProfile {
            pub fn with_overrides(&self, o: &LatencyOverrides) -> LatencyProfile {
                LatencyProfile {
                    $( $field: o.$field.clone().unwrap_or_else(|| self.$field.clone()), )*
                }
            }

            /// Names of fields whose value is negative, non-finite or malformed.
            pub fn invalid_fields(&self) -> Vec<&'static str> {
                let mut bad = Vec::new();
                $( if !self.$field.is_valid() { bad.push(stringify!($field)); } )*
                if self.checkpoint_interval.mean() <= 0.0 { bad.push("checkpoint_interval"); }
                if self.env_poll_interval.mean() <= 0.0 { bad.push("env_poll_interval"); }
                bad
            }
        }
    };
}

latency_profile! {
    /// Container death until the pod is marked not ready.
    detection_delay,
    /// Not ready until the restarted container is ready again.
    container_restart,
    pod_create,
    pod_delete,
    /// How long pods on a down node are kept before the parallel controller replaces them.
    node_eviction_timeout,
    /// Node back up until its stateful pods are running and ready.
    node_rejoin_delay,
    endpoint_update,
    env_propagation,
    /// Per-event processing time of the state controller.
    sc_handling,
    /// Per-pod label and environment assignment time when forming pairs.
    ha_assign_per_pod,
    state_restore,
    resume_delay,
    replication_latency,
    /// Only the mean is used; the interval is fixed per run.
    checkpoint_interval,
    /// Only the mean is used; the interval is fixed per run.
    env_poll_interval,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        let c = Delay::constant;
        LatencyProfile {
            detection_delay: c(0.7),
            container_restart: c(1.0),
            pod_create: c(2.0),
            pod_delete: c(0.3),
            node_eviction_timeout: c(300.0),
            node_rejoin_delay: c(30.0),
            endpoint_update: c(0.1),
            env_propagation: c(0.1),
            sc_handling: c(0.03),
            ha_assign_per_pod: c(0.01),
            state_restore: c(0.2),
            resume_delay: c(0.25),
            replication_latency: c(0.005),
            checkpoint_interval: c(1.0),
            env_poll_interval: c(0.05),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_delay_is_exact_and_consumes_no_randomness() {
        let mut a = RandomSource::new(3);
        let mut b = RandomSource::new(3);
        assert_eq!(Delay::constant(0.679).sample(&mut a), 0.679);
        assert_eq!(a.uniform(0.0, 1.0), b.uniform(0.0, 1.0));
    }

    #[test]
    fn distributions_are_non_negative() {
        let mut rng = RandomSource::new(9);
        let d = Delay::Distribution(DelayDistribution::Normal { mean: 0.01, std_dev: 1.0 });
        assert!((0..1000).all(|_| d.sample(&mut rng) >= 0.0));
        let u = Delay::uniform(0.5, 0.6);
        assert!((0..1000).map(|_| u.sample(&mut rng)).all(|x| (0.5..0.6).contains(&x)));
    }

    #[test]
    fn overrides_replace_only_given_fields() {
        let base = LatencyProfile::default();
        let o = LatencyOverrides { detection_delay: Some(Delay::constant(5.0)), ..Default::default() };
        let merged = base.with_overrides(&o);
        assert_eq!(merged.detection_delay, Delay::constant(5.0));
        assert_eq!(merged.container_restart, base.container_restart);
    }

    #[test]
    fn validation_catches_negative_values() {
        let mut p = LatencyProfile::default();
        assert!(p.invalid_fields().is_empty());
        p.endpoint_update = Delay::constant(-1.0);
        p.pod_create = Delay::uniform(3.0, 1.0);
        assert_eq!(p.invalid_fields(), vec!["pod_create", "endpoint_update"]);
    }

    #[test]
    fn toml_forms() {
        let o: LatencyOverrides = toml::from_str(
            "detection_delay = 0.5\npod_create = { uniform = { min = 1.0, max = 2.0 } }\n",
        )
        .unwrap();
        assert_eq!(o.detection_delay, Some(Delay::constant(0.5)));
        assert_eq!(o.pod_create, Some(Delay::uniform(1.0, 2.0)));
    }
}
