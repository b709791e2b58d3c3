//! One simulated deployment: cluster, optional state controller and workload
//! on a shared engine, plus the scheduled experiment steps.

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterAction, Cluster, ControllerKind, ControllerSpec, LatencyProfile, Labels, NodeFailureMode, Routing};
use crate::controller::{ControllerAction, StateController};
use crate::engine::{Engine, SimTime, Stop};
use crate::error::ClusterError;
use crate::events::{Event, FaultId, HaState, ScaleId, APP_KEY, HA_STATE_KEY};
use crate::workload::{Workload, WorkloadAction};

pub type Sched = Engine<Action, Event>;

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Cluster(ClusterAction),
    Controller(ControllerAction),
    Workload(WorkloadAction),
    Step(Step),
}

impl Action {
    /// Self-rescheduling timers that never let the queue drain.
    fn is_periodic(&self) -> bool {
        matches!(self, Action::Workload(WorkloadAction::Checkpoint { .. }))
    }
}

/// Picks a pod when a step fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PodSelector {
    Name(String),
    /// The `rank`-th oldest live pod carrying the given HA state label.
    HaState { ha_state: HaState, rank: usize },
    /// The `rank`-th oldest live pod.
    Rank { rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeSelector {
    Name(String),
    HostOf { host_of: PodSelector },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    KillContainer(PodSelector),
    FailNode(NodeSelector, NodeFailureMode),
    Scale(i64),
    EndObservation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub controller: String,
    pub kind: ControllerKind,
    pub replicas: u32,
    pub with_sc: bool,
    pub profile: LatencyProfile,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(kind: ControllerKind, replicas: u32, with_sc: bool, profile: LatencyProfile, seed: u64) -> Self {
        let controller = match kind {
            ControllerKind::StatefulOrdered => "MS",
            ControllerKind::StatelessParallel => "web",
        };
        WorldConfig { controller: controller.to_string(), kind, replicas, with_sc, profile, seed }
    }
}

pub struct World {
    pub cluster: Cluster,
    pub controller: Option<StateController>,
    pub workload: Workload,
    pub sched: Sched,
    pub workload_name: String,
    pub app_service: String,
    with_sc: bool,
    pub faults: Vec<FaultId>,
    pub scales: Vec<ScaleId>,
    pub step_errors: Vec<String>,
}

impl World {
    /// Creates the application service and deploys the workload controller.
    pub fn new(config: WorldConfig) -> Result<Self, ClusterError> {
        let mut sched = Sched::new(config.seed);
        let mut cluster = Cluster::new(config.profile);
        let app_service = format!("{}-svc", config.controller);
        let mut selector = Labels::new();
        selector.insert(APP_KEY.to_string(), config.controller.clone());
        if config.with_sc {
            selector.insert(HA_STATE_KEY.to_string(), HaState::Active.as_str().to_string());
        }
        cluster.create_service(&app_service, selector, Routing::RoundRobin, &mut sched)?;
        cluster.deploy(ControllerSpec::new(config.controller.clone(), config.kind, config.replicas), &mut sched)?;
        let workload = Workload::new(&app_service, config.with_sc, &cluster);
        let mut world = World {
            cluster,
            controller: None,
            workload,
            sched,
            workload_name: config.controller,
            app_service,
            with_sc: config.with_sc,
            faults: Vec::new(),
            scales: Vec::new(),
            step_errors: Vec::new(),
        };
        world.pump();
        Ok(world)
    }

    pub fn with_sc(&self) -> bool {
        self.with_sc
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn start_controller(&mut self) {
        if self.controller.is_none() {
            let sc = StateController::start(&self.workload_name, &self.cluster);
            self.controller = Some(sc);
            self.pump();
        }
    }

    /// Opens one client stream per current application endpoint. Returns the client ids.
    pub fn start_streams(&mut self) -> Vec<String> {
        let count = self.cluster.service(&self.app_service).map_or(0, |s| s.endpoints.len());
        let mut clients = Vec::new();
        for i in 0..count {
            let client = format!("client-{i}");
            if self.workload.start_stream(&client, &mut self.cluster, &mut self.sched).is_ok() {
                clients.push(client);
            }
        }
        self.pump();
        clients
    }

    pub fn dispatch(&mut self, action: Action) {
        match action {
            Action::Cluster(a) => self.cluster.dispatch(a, &mut self.sched),
            Action::Controller(a) => {
                if let Some(sc) = self.controller.as_mut() {
                    sc.dispatch(a, &mut self.cluster, &mut self.sched);
                }
            }
            Action::Workload(a) => self.workload.dispatch(a, &mut self.cluster, &mut self.sched),
            Action::Step(s) => self.run_step(s),
        }
        self.pump();
    }

    /// Feeds new watch events to the controller and cluster notices to the workload.
    fn pump(&mut self) {
        loop {
            if let Some(sc) = self.controller.as_mut() {
                sc.pump(&mut self.cluster, &mut self.sched);
            }
            let notices = self.cluster.take_notices();
            if notices.is_empty() {
                break;
            }
            for n in notices {
                self.workload.on_notice(n, &mut self.cluster, &mut self.sched);
            }
        }
    }

    /// True when nothing but periodic checkpoint timers is queued and the controller is idle.
    pub fn is_settled(&self) -> bool {
        self.sched.pending().all(|(_, a)| a.is_periodic())
            && self.controller.as_ref().is_none_or(|sc| sc.is_idle())
            && self.cluster.is_stable()
    }

    /// Runs until settled or until `limit`; returns whether it settled.
    pub fn run_until_settled(&mut self, limit: SimTime) -> bool {
        loop {
            if self.is_settled() {
                return true;
            }
            let Some(a) = self.sched.pop_due(Stop::At(limit)) else {
                return self.is_settled();
            };
            self.dispatch(a.payload);
        }
    }

    pub fn run_until(&mut self, stop: Stop) {
        while let Some(a) = self.sched.pop_due(stop) {
            self.dispatch(a.payload);
            if self.sched.is_finished() {
                return;
            }
        }
        if let Stop::At(t) = stop {
            self.sched.advance_to(t);
        }
    }

    pub fn schedule_step(&mut self, at: SimTime, step: Step) -> Result<(), ClusterError> {
        self.sched.schedule_at(at, Action::Step(step))?;
        Ok(())
    }

    pub fn resolve_pod(&self, sel: &PodSelector) -> Option<String> {
        let live = self.cluster.controller_pods(&self.workload_name);
        match sel {
            PodSelector::Name(n) => self.cluster.pod(n).map(|p| p.name.clone()),
            PodSelector::Rank { rank } => live.get(*rank).map(|p| p.name.clone()),
            PodSelector::HaState { ha_state, rank } => live
                .into_iter()
                .filter(|p| p.label(HA_STATE_KEY) == Some(ha_state.as_str()))
                .nth(*rank)
                .map(|p| p.name.clone()),
        }
    }

    pub fn resolve_node(&self, sel: &NodeSelector) -> Option<String> {
        match sel {
            NodeSelector::Name(n) => self.cluster.node(n).map(|n| n.name.clone()),
            NodeSelector::HostOf { host_of } => {
                let pod = self.resolve_pod(host_of)?;
                self.cluster.pod(&pod).map(|p| p.node.clone())
            }
        }
    }

    fn run_step(&mut self, step: Step) {
        let result = match &step {
            Step::KillContainer(sel) => match self.resolve_pod(sel) {
                Some(pod) => self.cluster.inject_container_failure(&pod, &mut self.sched).map(|f| self.faults.push(f)),
                None => Err(ClusterError::UnknownPod(format!("{sel:?}"))),
            },
            Step::FailNode(sel, mode) => match self.resolve_node(sel) {
                Some(node) => self.cluster.inject_node_failure(&node, *mode, &mut self.sched).map(|f| self.faults.push(f)),
                None => Err(ClusterError::UnknownNode(format!("{sel:?}"))),
            },
            Step::Scale(target) => {
                self.cluster.scale(&self.workload_name, *target, &mut self.sched).map(|s| self.scales.push(s))
            }
            Step::EndObservation => {
                if let Some(sc) = &self.controller {
                    sc.audit(&self.cluster, &mut self.sched);
                }
                self.sched.record(Event::EndObservation);
                self.sched.finish();
                Ok(())
            }
        };
        if let Err(e) = result {
            let msg = format!("at {}: {:?} failed: {e}", self.sched.now(), step);
            self.sched.record(Event::ControllerNote { note: msg.clone() });
            self.step_errors.push(msg);
        }
    }
}
