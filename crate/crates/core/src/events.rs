//! Trace entry kinds and the API-server watch events.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;

pub type FaultId = u64;
pub type ScaleId = u64;

pub const HA_STATE_KEY: &str = "HAState";
pub const PEER_KEY: &str = "peer";
pub const APP_KEY: &str = "app";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaState {
    Active,
    Standby,
}

impl HaState {
    pub fn as_str(self) -> &'static str {
        match self {
            HaState::Active => "active",
            HaState::Standby => "standby",
        }
    }
}

impl fmt::Display for HaState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HaState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(HaState::Active),
            "standby" => Ok(HaState::Standby),
            other => Err(format!("not an HA state: {other}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    ContainerFailure,
    NodeShutdown,
    NodeReboot,
}

/// Everything the simulation writes to its trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    FaultInjected { fault: FaultId, fault_kind: FaultKind, target: String },
    FaultIgnored { fault: FaultId, target: String, reason: String },
    NodeDown { node: String, fault: FaultId },
    NodeUp { node: String },
    PodCreated {
        pod: String,
        node: String,
        controller: String,
        scale: Option<ScaleId>,
        fault: Option<FaultId>,
        replaces: Option<String>,
    },
    PodReady { pod: String, fault: Option<FaultId>, scale: Option<ScaleId> },
    PodNotReady { pod: String, fault: Option<FaultId> },
    PodDeleted { pod: String, fault: Option<FaultId>, scale: Option<ScaleId> },
    LabelChanged { pod: String, key: String, value: Option<String> },
    EnvChanged { pod: String, key: String, value: Option<String> },
    ServiceCreated { service: String, selector: BTreeMap<String, String> },
    ServiceDeleted { service: String },
    EndpointsChanged { service: String, endpoints: Vec<String> },
    CheckpointWritten { pod: String, client: String, position: f64 },
    ReplicationDelivered { from: String, to: String, client: String, position: f64 },
    ReplicationSkipped { pod: String, service: String },
    SessionStarted { client: String, pod: String },
    SessionInterrupted { client: String, pod: String, fault: Option<FaultId> },
    SessionTerminated { client: String, pod: String },
    ServiceResumed {
        client: String,
        pod: String,
        position: f64,
        fault: Option<FaultId>,
        state_lost: bool,
    },
    ScaleRequested { scale: ScaleId, controller: String, from: u32, to: u32 },
    ScaleComplete { scale: ScaleId, added: Vec<String>, deleted: Vec<String> },
    HaStateAssigned { pod: String, state: HaState },
    Promotion { failed: String, promoted: String },
    ProtectionLost { pod: String, cause: String, scale: Option<ScaleId> },
    StateLost { client: String, pod: String },
    ControllerNote { note: String },
    EndObservation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ApiEventKind {
    /// Readiness went to not ready because of a fault.
    PodFailure { pod: String, fault: FaultId },
    PodReady { pod: String },
    PodAdded { pod: String, scale: Option<ScaleId> },
    PodDeleted { pod: String, scale: Option<ScaleId> },
    ScaleOut { scale: ScaleId, added: Vec<String> },
    ScaleIn { scale: ScaleId, deleted: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiEvent {
    pub time: SimTime,
    pub kind: ApiEventKind,
}
