//! Simulated orchestration substrate: nodes, pods, volumes, label-selector
//! services, ordered and parallel workload controllers, repair mechanics and
//! the watch event stream.
//!
//! All mutation happens inside action dispatch. Writes that other parts of the
//! simulation react to are published two ways: as [`ApiEvent`]s on the watch
//! log, and as internal [`Notice`]s drained by the world after each action.

mod latency;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

pub use latency::{Delay, DelayDistribution, LatencyOverrides, LatencyProfile};

use crate::engine::SimTime;
use crate::error::ClusterError;
use crate::events::{ApiEvent, ApiEventKind, Event, FaultId, FaultKind, ScaleId, APP_KEY};
use crate::world::{Action, Sched};

pub type Labels = BTreeMap<String, String>;

pub const DEFAULT_WORKER_NODES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Up,
    Down,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    /// Control-plane view.
    pub status: NodeStatus,
    /// Whether the machine is actually running.
    pub alive: bool,
    pub hosted_pods: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readiness {
    Ready,
    NotReady,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PodPhase {
    Creating,
    Running,
    Terminating,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeBinding {
    pub volume_id: String,
    pub storage_area_key: String,
}

#[derive(Clone, Debug)]
pub struct Pod {
    pub name: String,
    pub controller: String,
    pub ordinal: Option<u32>,
    pub creation_time: SimTime,
    pub node: String,
    pub phase: PodPhase,
    pub readiness: Readiness,
    pub container_alive: bool,
    pub labels: Labels,
    pub env: Labels,
    pub volume: VolumeBinding,
    pub origin_scale: Option<ScaleId>,
    pub origin_fault: Option<FaultId>,
    pub replaces: Option<String>,
    /// Bumped whenever the container dies so stale timers can be discarded.
    generation: u64,
    env_seq: BTreeMap<String, u64>,
}

impl Pod {
    pub fn is_ready(&self) -> bool {
        self.readiness == Readiness::Ready
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    pub fn env_var(&self, key: &str) -> Option<&str> {
        self.env.get(key).map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// StatefulSet-like: ordinal names, one volume per ordinal, one pod at a time.
    StatefulOrdered,
    /// Deployment-like: random names, one shared volume, everything in parallel.
    StatelessParallel,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::StatefulOrdered => "stateful_ordered",
            ControllerKind::StatelessParallel => "stateless_parallel",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSpec {
    pub name: String,
    pub kind: ControllerKind,
    pub replicas: u32,
    pub graceful_termination: f64,
}

impl ControllerSpec {
    pub fn new(name: impl Into<String>, kind: ControllerKind, replicas: u32) -> Self {
        Self { name: name.into(), kind, replicas, graceful_termination: 0.0 }
    }
}

#[derive(Clone, Debug)]
struct ScaleProgress {
    id: ScaleId,
    added: Vec<String>,
    deleted: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct WorkloadController {
    pub name: String,
    pub kind: ControllerKind,
    pub replicas: u32,
    pub graceful_termination: f64,
    /// Ordinal to volume id; kept across scale-in.
    pub claims: BTreeMap<u32, String>,
    pub shared_volume: Option<String>,
    request: Option<ScaleProgress>,
    replacements: VecDeque<(FaultId, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    RoundRobin,
    Random,
}

#[derive(Clone, Debug)]
pub struct ServiceObject {
    pub name: String,
    pub selector: Labels,
    pub routing: Routing,
    pub endpoints: BTreeSet<String>,
    rr_cursor: usize,
}

impl ServiceObject {
    pub fn matches(&self, pod: &Pod) -> bool {
        pod.is_ready() && self.selector.iter().all(|(k, v)| pod.labels.get(k) == Some(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeFailureMode {
    Shutdown,
    Reboot(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopCause {
    Fault(FaultId),
    Deleted,
}

/// Cluster-internal happenings that the workload reacts to.
#[derive(Clone, Debug, PartialEq)]
pub enum Notice {
    ContainerStarted { pod: String },
    ContainerStopped { pod: String, cause: StopCause },
    EnvVisible { pod: String },
    EndpointsChanged { service: String },
    PodRemoved { pod: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyncTarget {
    Pod(String),
    Service(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClusterAction {
    PodStarted { pod: String, generation: u64 },
    DetectContainerFailure { pod: String, fault: FaultId, generation: u64 },
    RestartContainer { pod: String, fault: FaultId, generation: u64 },
    DetectNodeFailure { node: String, fault: FaultId },
    EvictNode { node: String, fault: FaultId },
    NodeRejoin { node: String, fault: FaultId },
    RemovePod { pod: String },
    EndpointSync(SyncTarget),
    ApplyEnv { pod: String, key: String, value: Option<String>, seq: u64 },
}

/// A watch subscription: a cursor into the event log.
#[derive(Clone, Debug, Default)]
pub struct Subscription {
    cursor: usize,
}

#[derive(Debug)]
pub struct Cluster {
    profile: LatencyProfile,
    nodes: BTreeMap<String, Node>,
    node_order: Vec<String>,
    placement_cursor: usize,
    pods: BTreeMap<String, Pod>,
    controllers: BTreeMap<String, WorkloadController>,
    services: BTreeMap<String, ServiceObject>,
    events: Vec<ApiEvent>,
    notices: Vec<Notice>,
    next_fault: FaultId,
    next_scale: ScaleId,
    next_env_seq: u64,
}

pub(crate) fn later(sched: &mut Sched, delay: f64, action: ClusterAction) {
    // Scheduling only fails once the run is over, when nothing else matters.
    let _ = sched.schedule(delay, Action::Cluster(action));
}

impl Cluster {
    pub fn new(profile: LatencyProfile) -> Self {
        Self::with_nodes(profile, DEFAULT_WORKER_NODES)
    }

    pub fn with_nodes(profile: LatencyProfile, workers: usize) -> Self {
        let node_order: Vec<String> = (1..=workers).map(|i| format!("worker-{i}")).collect();
        let nodes = node_order
            .iter()
            .map(|n| {
                let node = Node {
                    name: n.clone(),
                    status: NodeStatus::Up,
                    alive: true,
                    hosted_pods: BTreeSet::new(),
                };
                (n.clone(), node)
            })
            .collect();
        Self {
            profile,
            nodes,
            node_order,
            placement_cursor: 0,
            pods: BTreeMap::new(),
            controllers: BTreeMap::new(),
            services: BTreeMap::new(),
            events: Vec::new(),
            notices: Vec::new(),
            next_fault: 1,
            next_scale: 1,
            next_env_seq: 0,
        }
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.profile
    }

    pub fn pod(&self, name: &str) -> Option<&Pod> {
        self.pods.get(name)
    }

    pub fn pods(&self) -> impl Iterator<Item = &Pod> {
        self.pods.values()
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.get(name)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn controller(&self, name: &str) -> Option<&WorkloadController> {
        self.controllers.get(name)
    }

    pub fn service(&self, name: &str) -> Option<&ServiceObject> {
        self.services.get(name)
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceObject> {
        self.services.values()
    }

    /// Live pods of a controller (not terminating), oldest first.
    pub fn controller_pods(&self, controller: &str) -> Vec<&Pod> {
        let mut pods: Vec<&Pod> = self
            .pods
            .values()
            .filter(|p| p.controller == controller && p.phase != PodPhase::Terminating)
            .collect();
        pods.sort_by(|a, b| a.creation_time.cmp(&b.creation_time).then(a.name.cmp(&b.name)));
        pods
    }

    pub fn scale_in_progress(&self, controller: &str) -> bool {
        self.controllers.get(controller).is_some_and(|c| c.request.is_some())
    }

    /// True when no pod is mid-creation or mid-deletion and no scale request is open.
    pub fn is_stable(&self) -> bool {
        self.pods.values().all(|p| p.phase == PodPhase::Running)
            && self.controllers.values().all(|c| c.request.is_none() && c.replacements.is_empty())
    }

    pub fn watch_events(&self) -> Subscription {
        Subscription { cursor: self.events.len() }
    }

    /// Events emitted since the subscription last polled, in emission order.
    pub fn poll_events(&self, sub: &mut Subscription) -> Vec<ApiEvent> {
        let out = self.events[sub.cursor..].to_vec();
        sub.cursor = self.events.len();
        out
    }

    pub fn event_log(&self) -> &[ApiEvent] {
        &self.events
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    fn emit(&mut self, sched: &Sched, kind: ApiEventKind) {
        self.events.push(ApiEvent { time: sched.now(), kind });
    }

    fn sample(&self, sched: &mut Sched, pick: impl Fn(&LatencyProfile) -> &Delay) -> f64 {
        pick(&self.profile).sample(sched.rng())
    }

    // ---- controllers ----

    pub fn deploy(&mut self, spec: ControllerSpec, sched: &mut Sched) -> Result<String, ClusterError> {
        if self.controllers.contains_key(&spec.name) {
            return Err(ClusterError::DuplicateController(spec.name));
        }
        let shared_volume = (spec.kind == ControllerKind::StatelessParallel)
            .then(|| format!("{}-pv-shared", spec.name));
        let name = spec.name.clone();
        self.controllers.insert(
            name.clone(),
            WorkloadController {
                name: spec.name,
                kind: spec.kind,
                replicas: spec.replicas,
                graceful_termination: spec.graceful_termination.max(0.0),
                claims: BTreeMap::new(),
                shared_volume,
                request: None,
                replacements: VecDeque::new(),
            },
        );
        self.reconcile(&name, sched);
        Ok(name)
    }

    pub fn scale(&mut self, controller: &str, target: i64, sched: &mut Sched) -> Result<ScaleId, ClusterError> {
        if target < 0 {
            return Err(ClusterError::InvalidScaleTarget(target));
        }
        let target = u32::try_from(target).map_err(|_| ClusterError::InvalidScaleTarget(target))?;
        let live = self.controller_pods(controller).len() as u32;
        let ctrl = self
            .controllers
            .get_mut(controller)
            .ok_or_else(|| ClusterError::UnknownController(controller.to_string()))?;
        let id = self.next_scale;
        self.next_scale += 1;
        ctrl.replicas = target;
        let inherited = ctrl.request.take();
        sched.record(Event::ScaleRequested {
            scale: id,
            controller: controller.to_string(),
            from: live,
            to: target,
        });
        let mut progress = ScaleProgress { id, added: Vec::new(), deleted: Vec::new() };
        if let Some(old) = inherited {
            sched.record(Event::ControllerNote {
                note: format!("scale request {} superseded by {}", old.id, id),
            });
            progress.added = old.added;
            progress.deleted = old.deleted;
        }
        ctrl.request = Some(progress);
        self.reconcile(controller, sched);
        Ok(id)
    }

    fn reconcile(&mut self, controller: &str, sched: &mut Sched) {
        let Some(ctrl) = self.controllers.get(controller) else { return };
        let kind = ctrl.kind;
        let desired = ctrl.replicas as usize;
        let all: Vec<&Pod> = self.pods.values().filter(|p| p.controller == controller).collect();
        let in_flight = all.iter().any(|p| p.phase != PodPhase::Running);
        let live: Vec<(String, Option<u32>, bool)> = all
            .iter()
            .filter(|p| p.phase != PodPhase::Terminating)
            .map(|p| (p.name.clone(), p.ordinal, p.is_ready()))
            .collect();
        match kind {
            ControllerKind::StatefulOrdered => {
                if in_flight {
                    return;
                }
                if live.len() != desired && live.iter().any(|(_, _, ready)| !ready) {
                    // Ordered controllers wait for every pod to be ready before each step.
                    return;
                }
                if live.len() < desired {
                    let used: BTreeSet<u32> = live.iter().filter_map(|(_, o, _)| *o).collect();
                    let ordinal = (0..).find(|o| !used.contains(o)).expect("unbounded range");
                    self.create_pod(controller, Some(ordinal), sched);
                } else if live.len() > desired {
                    let victim = live
                        .iter()
                        .max_by_key(|(_, o, _)| *o)
                        .map(|(n, _, _)| n.clone())
                        .expect("non-empty");
                    self.delete_pod(&victim, sched);
                } else {
                    self.complete_scale(controller, sched);
                }
            }
            ControllerKind::StatelessParallel => {
                if live.len() < desired {
                    for _ in live.len()..desired {
                        self.create_pod(controller, None, sched);
                    }
                } else if live.len() > desired {
                    let picks = sched.rng().choose_indices(live.len(), live.len() - desired);
                    let victims: Vec<String> = picks.into_iter().map(|i| live[i].0.clone()).collect();
                    for v in victims {
                        self.delete_pod(&v, sched);
                    }
                }
                let busy = self
                    .pods
                    .values()
                    .any(|p| p.controller == controller && p.phase != PodPhase::Running);
                if !busy && self.controller_pods(controller).len() == desired {
                    self.complete_scale(controller, sched);
                }
            }
        }
    }

    fn complete_scale(&mut self, controller: &str, sched: &mut Sched) {
        let Some(ctrl) = self.controllers.get_mut(controller) else { return };
        let Some(req) = ctrl.request.take() else { return };
        sched.record(Event::ScaleComplete {
            scale: req.id,
            added: req.added.clone(),
            deleted: req.deleted.clone(),
        });
        if !req.added.is_empty() {
            self.emit(sched, ApiEventKind::ScaleOut { scale: req.id, added: req.added.clone() });
        }
        if !req.deleted.is_empty() {
            self.emit(sched, ApiEventKind::ScaleIn { scale: req.id, deleted: req.deleted });
        }
    }

    fn place(&mut self) -> Option<String> {
        let n = self.node_order.len();
        for step in 0..n {
            let idx = (self.placement_cursor + step) % n;
            let name = &self.node_order[idx];
            let node = &self.nodes[name];
            if node.alive && node.status == NodeStatus::Up {
                self.placement_cursor = (idx + 1) % n;
                return Some(name.clone());
            }
        }
        None
    }

    fn create_pod(&mut self, controller: &str, ordinal: Option<u32>, sched: &mut Sched) {
        let ctrl = self.controllers.get_mut(controller).expect("controller exists");
        let (origin_fault, replaces) = match ctrl.replacements.pop_front() {
            Some((f, old)) => (Some(f), Some(old)),
            None => (None, None),
        };
        let origin_scale = ctrl.request.as_ref().map(|r| r.id).filter(|_| replaces.is_none());
        let name = match ordinal {
            Some(o) => format!("{controller}-{o}"),
            None => loop {
                let candidate = format!("{controller}-{}", sched.rng().suffix(5));
                if !self.pods.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        let ctrl = self.controllers.get_mut(controller).expect("controller exists");
        let volume = match ordinal {
            Some(o) => VolumeBinding {
                volume_id: ctrl.claims.entry(o).or_insert_with(|| format!("{controller}-pv{o}")).clone(),
                storage_area_key: name.clone(),
            },
            None => VolumeBinding {
                volume_id: ctrl.shared_volume.clone().expect("parallel controllers share a volume"),
                storage_area_key: name.clone(),
            },
        };
        if let Some(req) = ctrl.request.as_mut().filter(|_| replaces.is_none()) {
            req.added.push(name.clone());
        }
        let Some(node) = self.place() else {
            sched.record(Event::ControllerNote { note: format!("no node available for {name}") });
            return;
        };
        let mut labels = Labels::new();
        labels.insert(APP_KEY.to_string(), controller.to_string());
        let pod = Pod {
            name: name.clone(),
            controller: controller.to_string(),
            ordinal,
            creation_time: sched.now(),
            node: node.clone(),
            phase: PodPhase::Creating,
            readiness: Readiness::NotReady,
            container_alive: false,
            labels,
            env: Labels::new(),
            volume,
            origin_scale,
            origin_fault,
            replaces: replaces.clone(),
            generation: 0,
            env_seq: BTreeMap::new(),
        };
        self.nodes.get_mut(&node).expect("placed node").hosted_pods.insert(name.clone());
        self.pods.insert(name.clone(), pod);
        sched.record(Event::PodCreated {
            pod: name.clone(),
            node,
            controller: controller.to_string(),
            scale: origin_scale,
            fault: origin_fault,
            replaces,
        });
        self.emit(sched, ApiEventKind::PodAdded { pod: name.clone(), scale: origin_scale });
        let d = self.sample(sched, |p| &p.pod_create);
        later(sched, d, ClusterAction::PodStarted { pod: name, generation: 0 });
    }

    fn delete_pod(&mut self, name: &str, sched: &mut Sched) {
        let Some(pod) = self.pods.get_mut(name) else { return };
        if pod.phase == PodPhase::Terminating {
            return;
        }
        let was_ready = pod.is_ready();
        let was_alive = pod.container_alive;
        pod.phase = PodPhase::Terminating;
        pod.readiness = Readiness::NotReady;
        pod.container_alive = false;
        pod.generation += 1;
        let grace = self.controllers.get(&pod.controller).map_or(0.0, |c| c.graceful_termination);
        if was_ready {
            sched.record(Event::PodNotReady { pod: name.to_string(), fault: None });
            self.schedule_sync(SyncTarget::Pod(name.to_string()), sched);
        }
        if was_alive {
            self.notices.push(Notice::ContainerStopped { pod: name.to_string(), cause: StopCause::Deleted });
        }
        let d = grace + self.sample(sched, |p| &p.pod_delete);
        later(sched, d, ClusterAction::RemovePod { pod: name.to_string() });
    }

    fn remove_pod(&mut self, name: &str, fault: Option<FaultId>, sched: &mut Sched) -> Option<Pod> {
        let pod = self.pods.remove(name)?;
        if let Some(node) = self.nodes.get_mut(&pod.node) {
            node.hosted_pods.remove(name);
        }
        let scale = self
            .controllers
            .get_mut(&pod.controller)
            .and_then(|c| c.request.as_mut())
            .filter(|_| fault.is_none())
            .map(|r| {
                r.deleted.push(name.to_string());
                r.id
            });
        sched.record(Event::PodDeleted { pod: name.to_string(), fault, scale });
        self.emit(sched, ApiEventKind::PodDeleted { pod: name.to_string(), scale });
        self.notices.push(Notice::PodRemoved { pod: name.to_string() });
        for svc in self.services.values_mut() {
            if svc.endpoints.remove(name) {
                sched.record(Event::EndpointsChanged {
                    service: svc.name.clone(),
                    endpoints: svc.endpoints.iter().cloned().collect(),
                });
                self.notices.push(Notice::EndpointsChanged { service: svc.name.clone() });
            }
        }
        Some(pod)
    }

    // ---- faults ----

    fn new_fault(&mut self) -> FaultId {
        let id = self.next_fault;
        self.next_fault += 1;
        id
    }

    pub fn inject_container_failure(&mut self, pod: &str, sched: &mut Sched) -> Result<FaultId, ClusterError> {
        if !self.pods.contains_key(pod) {
            return Err(ClusterError::UnknownPod(pod.to_string()));
        }
        let fault = self.new_fault();
        sched.record(Event::FaultInjected {
            fault,
            fault_kind: FaultKind::ContainerFailure,
            target: pod.to_string(),
        });
        let p = self.pods.get_mut(pod).expect("checked");
        if !(p.phase == PodPhase::Running && p.is_ready() && p.container_alive) {
            sched.record(Event::FaultIgnored {
                fault,
                target: pod.to_string(),
                reason: "pod is not ready".into(),
            });
            return Ok(fault);
        }
        p.container_alive = false;
        p.generation += 1;
        let generation = p.generation;
        self.notices.push(Notice::ContainerStopped { pod: pod.to_string(), cause: StopCause::Fault(fault) });
        let d = self.sample(sched, |p| &p.detection_delay);
        later(sched, d, ClusterAction::DetectContainerFailure { pod: pod.to_string(), fault, generation });
        Ok(fault)
    }

    pub fn inject_node_failure(
        &mut self,
        node: &str,
        mode: NodeFailureMode,
        sched: &mut Sched,
    ) -> Result<FaultId, ClusterError> {
        if !self.nodes.contains_key(node) {
            return Err(ClusterError::UnknownNode(node.to_string()));
        }
        if let NodeFailureMode::Reboot(d) = mode {
            if !(d.is_finite() && d > 0.0) {
                return Err(ClusterError::InvalidRebootDuration(d));
            }
        }
        let fault = self.new_fault();
        let fault_kind = match mode {
            NodeFailureMode::Shutdown => FaultKind::NodeShutdown,
            NodeFailureMode::Reboot(_) => FaultKind::NodeReboot,
        };
        sched.record(Event::FaultInjected { fault, fault_kind, target: node.to_string() });
        let n = self.nodes.get_mut(node).expect("checked");
        if !n.alive {
            sched.record(Event::FaultIgnored {
                fault,
                target: node.to_string(),
                reason: "node is already down".into(),
            });
            return Ok(fault);
        }
        n.alive = false;
        let hosted: Vec<String> = n.hosted_pods.iter().cloned().collect();
        for name in hosted {
            let p = self.pods.get_mut(&name).expect("hosted pod exists");
            p.generation += 1;
            if p.container_alive {
                p.container_alive = false;
                self.notices.push(Notice::ContainerStopped { pod: name, cause: StopCause::Fault(fault) });
            }
        }
        let d = self.sample(sched, |p| &p.detection_delay);
        later(sched, d, ClusterAction::DetectNodeFailure { node: node.to_string(), fault });
        if let NodeFailureMode::Reboot(duration) = mode {
            later(sched, duration, ClusterAction::NodeRejoin { node: node.to_string(), fault });
        }
        Ok(fault)
    }

    // ---- labels, env, services ----

    pub fn set_label(&mut self, pod: &str, key: &str, value: Option<&str>, sched: &mut Sched) -> Result<(), ClusterError> {
        let p = self.pods.get_mut(pod).ok_or_else(|| ClusterError::UnknownPod(pod.to_string()))?;
        let changed = match value {
            Some(v) => p.labels.insert(key.to_string(), v.to_string()).as_deref() != Some(v),
            None => p.labels.remove(key).is_some(),
        };
        if changed {
            sched.record(Event::LabelChanged {
                pod: pod.to_string(),
                key: key.to_string(),
                value: value.map(str::to_string),
            });
            self.schedule_sync(SyncTarget::Pod(pod.to_string()), sched);
        }
        Ok(())
    }

    /// Writes an environment variable; the pod's processes see it after `env_propagation`.
    pub fn set_env(&mut self, pod: &str, key: &str, value: Option<&str>, sched: &mut Sched) -> Result<(), ClusterError> {
        if !self.pods.contains_key(pod) {
            return Err(ClusterError::UnknownPod(pod.to_string()));
        }
        let seq = self.next_env_seq;
        self.next_env_seq += 1;
        let d = self.sample(sched, |p| &p.env_propagation);
        later(
            sched,
            d,
            ClusterAction::ApplyEnv {
                pod: pod.to_string(),
                key: key.to_string(),
                value: value.map(str::to_string),
                seq,
            },
        );
        Ok(())
    }

    pub fn create_service(
        &mut self,
        name: &str,
        selector: Labels,
        routing: Routing,
        sched: &mut Sched,
    ) -> Result<(), ClusterError> {
        if self.services.contains_key(name) {
            return Err(ClusterError::DuplicateService(name.to_string()));
        }
        sched.record(Event::ServiceCreated { service: name.to_string(), selector: selector.clone() });
        self.services.insert(
            name.to_string(),
            ServiceObject {
                name: name.to_string(),
                selector,
                routing,
                endpoints: BTreeSet::new(),
                rr_cursor: 0,
            },
        );
        self.schedule_sync(SyncTarget::Service(name.to_string()), sched);
        Ok(())
    }

    pub fn delete_service(&mut self, name: &str, sched: &mut Sched) -> Result<(), ClusterError> {
        self.services.remove(name).ok_or_else(|| ClusterError::UnknownService(name.to_string()))?;
        sched.record(Event::ServiceDeleted { service: name.to_string() });
        Ok(())
    }

    /// Picks an endpoint: round-robin in name order, or a seeded random draw.
    pub fn route_request(&mut self, service: &str, sched: &mut Sched) -> Result<String, ClusterError> {
        let svc = self.services.get_mut(service).ok_or_else(|| ClusterError::UnknownService(service.to_string()))?;
        if svc.endpoints.is_empty() {
            return Err(ClusterError::NoEndpoint(service.to_string()));
        }
        let idx = match svc.routing {
            Routing::RoundRobin => {
                let i = svc.rr_cursor % svc.endpoints.len();
                svc.rr_cursor = svc.rr_cursor.wrapping_add(1);
                i
            }
            Routing::Random => sched.rng().below(svc.endpoints.len()),
        };
        Ok(svc.endpoints.iter().nth(idx).cloned().expect("index within bounds"))
    }

    fn schedule_sync(&mut self, target: SyncTarget, sched: &mut Sched) {
        let d = self.sample(sched, |p| &p.endpoint_update);
        later(sched, d, ClusterAction::EndpointSync(target));
    }

    fn sync_endpoints(&mut self, target: &SyncTarget, sched: &mut Sched) {
        let mut changed = Vec::new();
        for svc in self.services.values_mut() {
            let before = svc.endpoints.clone();
            match target {
                SyncTarget::Service(name) if name == &svc.name => {
                    svc.endpoints = self
                        .pods
                        .values()
                        .filter(|p| svc.matches(p))
                        .map(|p| p.name.clone())
                        .collect();
                }
                SyncTarget::Service(_) => continue,
                SyncTarget::Pod(pod) => match self.pods.get(pod) {
                    Some(p) if svc.matches(p) => {
                        svc.endpoints.insert(pod.clone());
                    }
                    _ => {
                        svc.endpoints.remove(pod);
                    }
                },
            }
            if svc.endpoints != before {
                changed.push((svc.name.clone(), svc.endpoints.iter().cloned().collect::<Vec<_>>()));
            }
        }
        for (service, endpoints) in changed {
            sched.record(Event::EndpointsChanged { service: service.clone(), endpoints });
            self.notices.push(Notice::EndpointsChanged { service });
        }
    }

    // ---- dispatch ----

    pub fn dispatch(&mut self, action: ClusterAction, sched: &mut Sched) {
        match action {
            ClusterAction::PodStarted { pod, generation } => self.on_pod_started(&pod, generation, sched),
            ClusterAction::DetectContainerFailure { pod, fault, generation } => {
                let Some(p) = self.pods.get_mut(&pod) else { return };
                if p.generation != generation || p.phase != PodPhase::Running || !p.is_ready() {
                    return;
                }
                p.readiness = Readiness::NotReady;
                sched.record(Event::PodNotReady { pod: pod.clone(), fault: Some(fault) });
                self.emit(sched, ApiEventKind::PodFailure { pod: pod.clone(), fault });
                self.schedule_sync(SyncTarget::Pod(pod.clone()), sched);
                let d = self.sample(sched, |p| &p.container_restart);
                later(sched, d, ClusterAction::RestartContainer { pod, fault, generation });
            }
            ClusterAction::RestartContainer { pod, fault, generation } => {
                let Some(p) = self.pods.get_mut(&pod) else { return };
                if p.generation != generation || p.phase != PodPhase::Running || p.container_alive {
                    return;
                }
                let node_ok = self.nodes.get(&p.node).is_some_and(|n| n.alive && n.status == NodeStatus::Up);
                if !node_ok {
                    return;
                }
                p.container_alive = true;
                let was_ready = p.is_ready();
                p.readiness = Readiness::Ready;
                let controller = p.controller.clone();
                if !was_ready {
                    sched.record(Event::PodReady { pod: pod.clone(), fault: Some(fault), scale: None });
                    self.emit(sched, ApiEventKind::PodReady { pod: pod.clone() });
                }
                self.schedule_sync(SyncTarget::Pod(pod.clone()), sched);
                self.notices.push(Notice::ContainerStarted { pod });
                self.reconcile(&controller, sched);
            }
            ClusterAction::DetectNodeFailure { node, fault } => {
                let Some(n) = self.nodes.get_mut(&node) else { return };
                if n.alive {
                    return;
                }
                n.status = NodeStatus::Down;
                let hosted: Vec<String> = n.hosted_pods.iter().cloned().collect();
                sched.record(Event::NodeDown { node: node.clone(), fault });
                let mut evictable = false;
                for name in hosted {
                    let p = self.pods.get_mut(&name).expect("hosted pod exists");
                    let parallel = self
                        .controllers
                        .get(&p.controller)
                        .is_some_and(|c| c.kind == ControllerKind::StatelessParallel);
                    evictable |= parallel;
                    if p.is_ready() {
                        p.readiness = Readiness::NotReady;
                        sched.record(Event::PodNotReady { pod: name.clone(), fault: Some(fault) });
                        if p.phase == PodPhase::Running {
                            self.emit(sched, ApiEventKind::PodFailure { pod: name.clone(), fault });
                        }
                        self.schedule_sync(SyncTarget::Pod(name), sched);
                    }
                }
                if evictable {
                    let d = self.sample(sched, |p| &p.node_eviction_timeout);
                    later(sched, d, ClusterAction::EvictNode { node, fault });
                }
            }
            ClusterAction::EvictNode { node, fault } => {
                let Some(n) = self.nodes.get(&node) else { return };
                if n.status == NodeStatus::Up {
                    return;
                }
                let victims: Vec<String> = n
                    .hosted_pods
                    .iter()
                    .filter(|p| {
                        self.pods.get(*p).and_then(|p| self.controllers.get(&p.controller)).is_some_and(
                            |c| c.kind == ControllerKind::StatelessParallel,
                        )
                    })
                    .cloned()
                    .collect();
                let mut touched = BTreeSet::new();
                for name in victims {
                    if let Some(pod) = self.remove_pod(&name, Some(fault), sched) {
                        if pod.phase != PodPhase::Terminating {
                            if let Some(c) = self.controllers.get_mut(&pod.controller) {
                                c.replacements.push_back((fault, name.clone()));
                            }
                        }
                        touched.insert(pod.controller);
                    }
                }
                for c in touched {
                    self.reconcile(&c, sched);
                }
            }
            ClusterAction::NodeRejoin { node, fault } => {
                let Some(n) = self.nodes.get_mut(&node) else { return };
                n.alive = true;
                n.status = NodeStatus::Up;
                let hosted: Vec<String> = n.hosted_pods.iter().cloned().collect();
                sched.record(Event::NodeUp { node: node.clone() });
                for name in hosted {
                    let p = self.pods.get(&name).expect("hosted pod exists");
                    let generation = p.generation;
                    match p.phase {
                        PodPhase::Running if !p.container_alive => {
                            let d = self.sample(sched, |p| &p.node_rejoin_delay);
                            later(sched, d, ClusterAction::RestartContainer { pod: name, fault, generation });
                        }
                        PodPhase::Creating => {
                            let d = self.sample(sched, |p| &p.pod_create);
                            later(sched, d, ClusterAction::PodStarted { pod: name, generation });
                        }
                        _ => {}
                    }
                }
            }
            ClusterAction::RemovePod { pod } => {
                let Some(controller) = self.pods.get(&pod).map(|p| p.controller.clone()) else { return };
                self.remove_pod(&pod, None, sched);
                self.reconcile(&controller, sched);
            }
            ClusterAction::EndpointSync(target) => self.sync_endpoints(&target, sched),
            ClusterAction::ApplyEnv { pod, key, value, seq } => {
                let Some(p) = self.pods.get_mut(&pod) else { return };
                if p.env_seq.get(&key).is_some_and(|&s| s > seq) {
                    return;
                }
                p.env_seq.insert(key.clone(), seq);
                let changed = match &value {
                    Some(v) => p.env.insert(key.clone(), v.clone()).as_ref() != Some(v),
                    None => p.env.remove(&key).is_some(),
                };
                if changed {
                    sched.record(Event::EnvChanged { pod: pod.clone(), key, value });
                    self.notices.push(Notice::EnvVisible { pod });
                }
            }
        }
    }

    fn on_pod_started(&mut self, pod: &str, generation: u64, sched: &mut Sched) {
        let Some(p) = self.pods.get_mut(pod) else { return };
        if p.generation != generation || p.phase != PodPhase::Creating {
            return;
        }
        let node_ok = self.nodes.get(&p.node).is_some_and(|n| n.alive && n.status == NodeStatus::Up);
        if !node_ok {
            return;
        }
        p.phase = PodPhase::Running;
        p.container_alive = true;
        p.readiness = Readiness::Ready;
        let (controller, scale, fault) = (p.controller.clone(), p.origin_scale, p.origin_fault);
        sched.record(Event::PodReady { pod: pod.to_string(), fault, scale });
        self.emit(sched, ApiEventKind::PodReady { pod: pod.to_string() });
        self.schedule_sync(SyncTarget::Pod(pod.to_string()), sched);
        self.notices.push(Notice::ContainerStarted { pod: pod.to_string() });
        self.reconcile(&controller, sched);
    }
}
