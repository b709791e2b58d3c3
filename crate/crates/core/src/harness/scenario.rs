use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{ControllerKind, LatencyOverrides, LatencyProfile, NodeFailureMode};
use crate::error::ScenarioError;
use crate::world::{NodeSelector, PodSelector, Step};

use super::profile::ProfilePreset;

/// Faults and scale-ins this close together on a parallel controller with the
/// state controller cannot be run safely: the scale-in may delete the standby
/// that is taking over.
pub const FAILOVER_SCALE_IN_WINDOW: f64 = 10.0;

fn default_trials() -> u32 {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "toml::Table")]
pub struct LatencyProfileSpec {
    /// Name of a shipped preset or path to a profile file; `default` if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(flatten)]
    pub overrides: LatencyOverrides,
}

// Flattening would silently accept misspelled latency keys, so split by hand.
impl TryFrom<toml::Table> for LatencyProfileSpec {
    type Error = String;

    fn try_from(mut t: toml::Table) -> Result<Self, String> {
        let preset = match t.remove("preset") {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => return Err(format!("preset must be a string, got {}", other.type_str())),
        };
        let overrides = t.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        Ok(LatencyProfileSpec { preset, overrides })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailMode {
    Shutdown,
    Reboot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScheduledAction {
    KillContainer { pod: PodSelector },
    FailNode {
        node: NodeSelector,
        mode: FailMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
    },
    Scale { target: i64 },
    EndObservation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Seconds after the deployment has settled and client streams are open.
    pub at: f64,
    #[serde(flatten)]
    pub action: ScheduledAction,
}

impl ScheduleEntry {
    pub fn to_step(&self) -> Step {
        match &self.action {
            ScheduledAction::KillContainer { pod } => Step::KillContainer(pod.clone()),
            ScheduledAction::FailNode { node, mode, duration } => {
                let mode = match mode {
                    FailMode::Shutdown => NodeFailureMode::Shutdown,
                    FailMode::Reboot => NodeFailureMode::Reboot(duration.unwrap_or(0.0)),
                };
                Step::FailNode(node.clone(), mode)
            }
            ScheduledAction::Scale { target } => Step::Scale(*target),
            ScheduledAction::EndObservation => Step::EndObservation,
        }
    }

    fn is_fault(&self) -> bool {
        matches!(self.action, ScheduledAction::KillContainer { .. } | ScheduledAction::FailNode { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub architecture: ControllerKind,
    pub with_sc: bool,
    pub replicas: u32,
    #[serde(default)]
    pub latency_profile: LatencyProfileSpec,
    pub schedule: Vec<ScheduleEntry>,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn parse(text: &str, source: &str) -> Result<Self, ScenarioError> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse { path: source.to_string(), message: e.to_string() })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: shown.clone(), source })?;
        Self::parse(&text, &shown)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }

    pub fn preset(&self) -> Result<ProfilePreset, ScenarioError> {
        ProfilePreset::load(self.latency_profile.preset.as_deref().unwrap_or("default"))
    }

    /// The preset resolved for this architecture variant, with the scenario's overrides on top.
    pub fn resolve_profile(&self, preset: &ProfilePreset) -> Result<LatencyProfile, ScenarioError> {
        let profile = preset.resolve(self.architecture, self.with_sc).with_overrides(&self.latency_profile.overrides);
        let bad = profile.invalid_fields();
        if !bad.is_empty() {
            return Err(ScenarioError::Invalid(format!("{}: invalid latency values for {}", self.name, bad.join(", "))));
        }
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::Invalid(format!("{}: {msg}", self.name)));
        if self.name.trim().is_empty() {
            return Err(ScenarioError::Invalid("scenario name must not be empty".into()));
        }
        if self.trials == 0 {
            return invalid("trials must be at least 1".into());
        }
        let Some(last) = self.schedule.last() else {
            return invalid("schedule must end with end_observation".into());
        };
        if last.action != ScheduledAction::EndObservation {
            return invalid("the last schedule entry must be end_observation".into());
        }
        let mut prev = 0.0;
        let mut replicas = i64::from(self.replicas);
        for (i, e) in self.schedule.iter().enumerate() {
            if !(e.at.is_finite() && e.at >= 0.0) {
                return invalid(format!("entry {i}: time {} is not a non-negative number", e.at));
            }
            if e.at < prev {
                return invalid(format!("entry {i}: schedule times must be sorted"));
            }
            prev = e.at;
            match &e.action {
                ScheduledAction::EndObservation if i + 1 != self.schedule.len() => {
                    return invalid(format!("entry {i}: end_observation must be the last entry"));
                }
                ScheduledAction::FailNode { mode: FailMode::Reboot, duration, .. } => {
                    if !duration.is_some_and(|d| d.is_finite() && d > 0.0) {
                        return invalid(format!("entry {i}: reboot needs a positive duration"));
                    }
                }
                ScheduledAction::FailNode { mode: FailMode::Shutdown, duration: Some(_), .. } => {
                    return invalid(format!("entry {i}: shutdown takes no duration"));
                }
                ScheduledAction::Scale { target } => {
                    if *target < 0 {
                        return invalid(format!("entry {i}: scale target {target} is negative"));
                    }
                    let shrinks = *target < replicas;
                    replicas = *target;
                    if shrinks && self.with_sc && self.architecture == ControllerKind::StatelessParallel {
                        let near_fault = self
                            .schedule
                            .iter()
                            .any(|f| f.is_fault() && (f.at - e.at).abs() <= FAILOVER_SCALE_IN_WINDOW);
                        if near_fault {
                            return invalid(format!(
                                "entry {i}: scale-in during failover is not supported for a parallel controller \
                                 with the state controller, because unordered deletion may remove the standby \
                                 that is taking over"
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
        let preset = self.preset()?;
        self.resolve_profile(&preset)?;
        Ok(())
    }

    pub fn end_time(&self) -> f64 {
        self.schedule.last().map_or(0.0, |e| e.at)
    }
}
