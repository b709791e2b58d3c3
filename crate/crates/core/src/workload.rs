//! The streaming application: per-client positions, periodic checkpoints to
//! the pod's own storage area (and to the replication service when the state
//! controller runs), and the endpoint process that watches `HAState` and
//! resumes service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, Notice, StopCause};
use crate::engine::{ActionHandle, SimTime, Trace};
use crate::error::{ClusterError, WorkloadError};
use crate::events::{Event, FaultId, HaState, HA_STATE_KEY, PEER_KEY};
use crate::world::{Action, Sched};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub client_id: String,
    pub position: f64,
    pub written_at: SimTime,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StorageArea {
    pub key: String,
    pub records: BTreeMap<String, StateRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SessionState {
    Streaming { pod: String, since: SimTime, base: f64 },
    Interrupted { last_pod: String, fault: Option<FaultId>, orphaned: bool },
    Restoring { pod: String, fault: Option<FaultId> },
    Terminated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSession {
    pub client_id: String,
    pub started_at: SimTime,
    pub state: SessionState,
    checkpointed: bool,
}

impl StreamSession {
    pub fn serving_pod(&self) -> Option<&str> {
        match &self.state {
            SessionState::Streaming { pod, .. } => Some(pod),
            _ => None,
        }
    }

    /// Live position, or `None` while the stream is not advancing.
    pub fn position(&self, now: SimTime) -> Option<f64> {
        match &self.state {
            SessionState::Streaming { since, base, .. } => Some(base + now.since(*since)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WorkloadAction {
    Checkpoint { pod: String, incarnation: u64 },
    Poll { pod: String, incarnation: u64 },
    Restore { pod: String, incarnation: u64, clients: Vec<String> },
    Resume { pod: String, incarnation: u64, items: Vec<(String, f64, bool)> },
    Deliver { to: String, from: String, record: StateRecord },
}

#[derive(Debug)]
struct Process {
    incarnation: u64,
    started_at: SimTime,
    last_seen: Option<HaState>,
    serving: bool,
    cache: BTreeMap<String, StateRecord>,
    checkpoint: Option<ActionHandle>,
    poll: Option<ActionHandle>,
    waiting: Vec<(String, f64, bool)>,
}

#[derive(Debug)]
pub struct Workload {
    app_service: String,
    with_sc: bool,
    checkpoint_interval: f64,
    poll_interval: f64,
    sessions: BTreeMap<String, StreamSession>,
    processes: BTreeMap<String, Process>,
    incarnations: u64,
    /// volume id → storage area key → area.
    storage: BTreeMap<String, BTreeMap<String, StorageArea>>,
}

fn emit(sched: &mut Sched, delay: f64, action: WorkloadAction) -> Option<ActionHandle> {
    sched.schedule(delay, Action::Workload(action)).ok()
}

fn env_state(cluster: &Cluster, pod: &str) -> Option<HaState> {
    cluster.pod(pod)?.env_var(HA_STATE_KEY)?.parse().ok()
}

impl Workload {
    pub fn new(app_service: &str, with_sc: bool, cluster: &Cluster) -> Self {
        let p = cluster.profile();
        Workload {
            app_service: app_service.to_string(),
            with_sc,
            checkpoint_interval: p.checkpoint_interval.mean(),
            poll_interval: p.env_poll_interval.mean(),
            sessions: BTreeMap::new(),
            processes: BTreeMap::new(),
            incarnations: 0,
            storage: BTreeMap::new(),
        }
    }

    pub fn sessions(&self) -> impl Iterator<Item = &StreamSession> {
        self.sessions.values()
    }

    pub fn session(&self, client: &str) -> Option<&StreamSession> {
        self.sessions.get(client)
    }

    /// Clients currently streaming from `pod`.
    pub fn clients_of(&self, pod: &str) -> Vec<String> {
        self.sessions.values().filter(|s| s.serving_pod() == Some(pod)).map(|s| s.client_id.clone()).collect()
    }

    pub fn storage_area(&self, volume_id: &str, key: &str) -> Option<&StorageArea> {
        self.storage.get(volume_id)?.get(key)
    }

    pub fn cached(&self, pod: &str, client: &str) -> Option<&StateRecord> {
        self.processes.get(pod)?.cache.get(client)
    }

    pub fn is_active_process(&self, pod: &str) -> bool {
        self.processes.get(pod).is_some_and(|p| p.serving)
    }

    /// True if any restore or resume is still outstanding.
    pub fn is_busy(&self) -> bool {
        self.sessions.values().any(|s| matches!(s.state, SessionState::Restoring { .. }))
            || self.processes.values().any(|p| !p.waiting.is_empty())
    }

    pub fn start_stream(&mut self, client: &str, cluster: &mut Cluster, sched: &mut Sched) -> Result<String, WorkloadError> {
        let pod = match cluster.route_request(&self.app_service, sched) {
            Ok(p) => p,
            Err(ClusterError::NoEndpoint(s)) | Err(ClusterError::UnknownService(s)) => {
                return Err(WorkloadError::ServiceUnavailable(s))
            }
            Err(e) => return Err(e.into()),
        };
        let now = sched.now();
        self.sessions.insert(
            client.to_string(),
            StreamSession {
                client_id: client.to_string(),
                started_at: now,
                state: SessionState::Streaming { pod: pod.clone(), since: now, base: 0.0 },
                checkpointed: false,
            },
        );
        sched.record(Event::SessionStarted { client: client.to_string(), pod: pod.clone() });
        self.ensure_checkpointing(&pod, sched);
        Ok(pod)
    }

    fn ensure_checkpointing(&mut self, pod: &str, sched: &mut Sched) {
        let interval = self.checkpoint_interval;
        let Some(proc_) = self.processes.get_mut(pod) else { return };
        if proc_.checkpoint.is_none() {
            let incarnation = proc_.incarnation;
            proc_.checkpoint = emit(sched, interval, WorkloadAction::Checkpoint { pod: pod.to_string(), incarnation });
        }
    }

    fn own_area<'a>(&'a mut self, cluster: &Cluster, pod: &str) -> Option<&'a mut StorageArea> {
        let v = &cluster.pod(pod)?.volume;
        let area = self
            .storage
            .entry(v.volume_id.clone())
            .or_default()
            .entry(v.storage_area_key.clone())
            .or_insert_with(|| StorageArea { key: v.storage_area_key.clone(), records: BTreeMap::new() });
        Some(area)
    }

    /// One checkpoint pass over the sessions `pod` is serving.
    pub fn checkpoint_tick(&mut self, pod: &str, cluster: &mut Cluster, sched: &mut Sched) -> Vec<StateRecord> {
        if !self.is_active_process(pod) {
            return Vec::new();
        }
        let now = sched.now();
        let records: Vec<StateRecord> = self
            .sessions
            .values_mut()
            .filter_map(|s| {
                let position = s.position(now).filter(|_| s.serving_pod() == Some(pod))?;
                s.checkpointed = true;
                Some(StateRecord { client_id: s.client_id.clone(), position, written_at: now })
            })
            .collect();
        if records.is_empty() {
            return records;
        }
        if let Some(area) = self.own_area(cluster, pod) {
            for r in &records {
                area.records.insert(r.client_id.clone(), r.clone());
            }
        }
        for r in &records {
            sched.record(Event::CheckpointWritten { pod: pod.to_string(), client: r.client_id.clone(), position: r.position });
        }
        if self.with_sc {
            let service = format!("{}{pod}", crate::controller::REPLICATION_PREFIX);
            match cluster.route_request(&service, sched) {
                Ok(target) => {
                    let latency = cluster.profile().replication_latency.sample(sched.rng());
                    for r in &records {
                        let action = WorkloadAction::Deliver { to: target.clone(), from: pod.to_string(), record: r.clone() };
                        emit(sched, latency, action);
                    }
                }
                Err(_) => sched.record(Event::ReplicationSkipped { pod: pod.to_string(), service }),
            }
        }
        records
    }

    pub fn dispatch(&mut self, action: WorkloadAction, cluster: &mut Cluster, sched: &mut Sched) {
        match action {
            WorkloadAction::Checkpoint { pod, incarnation } => {
                if !self.current(&pod, incarnation) {
                    return;
                }
                self.processes.get_mut(&pod).expect("current").checkpoint = None;
                if !self.checkpoint_tick(&pod, cluster, sched).is_empty() {
                    self.ensure_checkpointing(&pod, sched);
                }
            }
            WorkloadAction::Poll { pod, incarnation } => {
                if !self.current(&pod, incarnation) {
                    return;
                }
                self.processes.get_mut(&pod).expect("current").poll = None;
                self.observe_env(&pod, cluster, sched);
            }
            WorkloadAction::Restore { pod, incarnation, clients } => {
                if !self.current(&pod, incarnation) {
                    return;
                }
                let area = cluster
                    .pod(&pod)
                    .and_then(|p| self.storage_area(&p.volume.volume_id, &p.volume.storage_area_key))
                    .cloned()
                    .unwrap_or_default();
                let mut items = Vec::new();
                for c in clients {
                    let Some(s) = self.sessions.get(&c) else { continue };
                    if !matches!(&s.state, SessionState::Restoring { pod: p, .. } if *p == pod) {
                        continue;
                    }
                    let found = area.records.get(&c).map(|r| r.position);
                    items.push((c, found.unwrap_or(0.0), s.checkpointed && found.is_none()));
                }
                let d = cluster.profile().resume_delay.sample(sched.rng());
                emit(sched, d, WorkloadAction::Resume { pod, incarnation, items });
            }
            WorkloadAction::Resume { pod, incarnation, items } => {
                if !self.current(&pod, incarnation) {
                    return;
                }
                if self.in_app_endpoints(cluster, &pod) {
                    self.resume(&pod, items, sched);
                } else {
                    self.processes.get_mut(&pod).expect("current").waiting.extend(items);
                }
            }
            WorkloadAction::Deliver { to, from, record } => {
                if !self.processes.contains_key(&to) {
                    sched.record(Event::ReplicationSkipped { pod: from, service: format!("{}{}", crate::controller::REPLICATION_PREFIX, to) });
                    return;
                }
                if let Some(area) = self.own_area(cluster, &to) {
                    area.records.insert(record.client_id.clone(), record.clone());
                }
                sched.record(Event::ReplicationDelivered {
                    from,
                    to: to.clone(),
                    client: record.client_id.clone(),
                    position: record.position,
                });
                self.processes.get_mut(&to).expect("checked").cache.insert(record.client_id.clone(), record);
            }
        }
    }

    fn current(&self, pod: &str, incarnation: u64) -> bool {
        self.processes.get(pod).is_some_and(|p| p.incarnation == incarnation)
    }

    fn in_app_endpoints(&self, cluster: &Cluster, pod: &str) -> bool {
        cluster.service(&self.app_service).is_some_and(|s| s.endpoints.contains(pod))
    }

    fn resume(&mut self, pod: &str, items: Vec<(String, f64, bool)>, sched: &mut Sched) {
        let now = sched.now();
        let mut any = false;
        for (client, position, state_lost) in items {
            let Some(s) = self.sessions.get_mut(&client) else { continue };
            let SessionState::Restoring { pod: p, fault } = &s.state else { continue };
            if p != pod {
                continue;
            }
            let fault = *fault;
            s.state = SessionState::Streaming { pod: pod.to_string(), since: now, base: position };
            sched.record(Event::ServiceResumed { client: client.clone(), pod: pod.to_string(), position, fault, state_lost });
            if state_lost {
                sched.record(Event::StateLost { client, pod: pod.to_string() });
            }
            any = true;
        }
        if any {
            self.ensure_checkpointing(pod, sched);
        }
    }

    /// Claims interrupted sessions that `pod` may serve and starts restoring them.
    fn take_over(&mut self, pod: &str, from: &[String], cluster: &Cluster, sched: &mut Sched) {
        let clients: Vec<String> = self
            .sessions
            .values_mut()
            .filter_map(|s| match &s.state {
                SessionState::Interrupted { last_pod, fault, .. } if from.contains(last_pod) => {
                    let fault = *fault;
                    s.state = SessionState::Restoring { pod: pod.to_string(), fault };
                    Some(s.client_id.clone())
                }
                _ => None,
            })
            .collect();
        self.begin_restore(pod, clients, cluster, sched);
    }

    fn begin_restore(&mut self, pod: &str, clients: Vec<String>, cluster: &Cluster, sched: &mut Sched) {
        if clients.is_empty() {
            return;
        }
        let Some(proc_) = self.processes.get(pod) else { return };
        let incarnation = proc_.incarnation;
        let d = cluster.profile().state_restore.sample(sched.rng());
        emit(sched, d, WorkloadAction::Restore { pod: pod.to_string(), incarnation, clients });
    }

    fn takeover_sources(&self, pod: &str, cluster: &Cluster) -> Vec<String> {
        let mut from = vec![pod.to_string()];
        if let Some(peer) = cluster.pod(pod).and_then(|p| p.label(PEER_KEY)) {
            from.push(peer.to_string());
        }
        from
    }

    fn observe_env(&mut self, pod: &str, cluster: &Cluster, sched: &mut Sched) {
        let seen = env_state(cluster, pod);
        let Some(proc_) = self.processes.get_mut(pod) else { return };
        if proc_.last_seen == seen {
            return;
        }
        let before = proc_.last_seen;
        proc_.last_seen = seen;
        match (before, seen) {
            (_, Some(HaState::Active)) => {
                proc_.serving = true;
                let from = self.takeover_sources(pod, cluster);
                self.take_over(pod, &from, cluster, sched);
            }
            (Some(HaState::Active), _) => {
                proc_.serving = false;
                if let Some(h) = proc_.checkpoint.take() {
                    sched.cancel(h);
                }
                let peer = cluster.pod(pod).and_then(|p| p.label(PEER_KEY)).map(str::to_string);
                self.interrupt(pod, None, sched);
                // Hand anything this pod was holding to a peer that is already serving.
                if let Some(peer) = peer.filter(|p| self.is_active_process(p)) {
                    self.take_over(&peer, &[pod.to_string()], cluster, sched);
                }
            }
            _ => {}
        }
    }

    fn interrupt(&mut self, pod: &str, cause: Option<FaultId>, sched: &mut Sched) {
        for s in self.sessions.values_mut() {
            let fault = match &s.state {
                SessionState::Streaming { pod: p, .. } if p == pod => cause,
                SessionState::Restoring { pod: p, fault } if p == pod => fault.or(cause),
                _ => continue,
            };
            s.state = SessionState::Interrupted { last_pod: pod.to_string(), fault, orphaned: false };
            sched.record(Event::SessionInterrupted { client: s.client_id.clone(), pod: pod.to_string(), fault });
        }
        if let Some(p) = self.processes.get_mut(pod) {
            p.waiting.clear();
        }
    }

    fn schedule_poll(&mut self, pod: &str, sched: &mut Sched) {
        let interval = self.poll_interval;
        let Some(proc_) = self.processes.get_mut(pod) else { return };
        if proc_.poll.is_some() {
            return;
        }
        // Polls run on a fixed grid anchored at process start; only the next tick matters.
        let elapsed = sched.now().since(proc_.started_at);
        let ticks = (elapsed / interval).ceil().max(1.0);
        let delay = (ticks * interval - elapsed).max(0.0);
        let incarnation = proc_.incarnation;
        proc_.poll = emit(sched, delay, WorkloadAction::Poll { pod: pod.to_string(), incarnation });
    }

    pub fn on_notice(&mut self, notice: Notice, cluster: &mut Cluster, sched: &mut Sched) {
        match notice {
            Notice::ContainerStarted { pod } => self.on_started(&pod, cluster, sched),
            Notice::ContainerStopped { pod, cause } => {
                if let Some(p) = self.processes.remove(&pod) {
                    for h in [p.checkpoint, p.poll].into_iter().flatten() {
                        sched.cancel(h);
                    }
                }
                match cause {
                    StopCause::Fault(f) => self.interrupt(&pod, Some(f), sched),
                    StopCause::Deleted => {
                        for s in self.sessions.values_mut() {
                            let hit = match &s.state {
                                SessionState::Streaming { pod: p, .. } | SessionState::Restoring { pod: p, .. } => p == &pod,
                                _ => false,
                            };
                            if hit {
                                s.state = SessionState::Terminated;
                                sched.record(Event::SessionTerminated { client: s.client_id.clone(), pod: pod.clone() });
                            }
                        }
                    }
                }
            }
            Notice::EnvVisible { pod } => {
                if self.processes.contains_key(&pod) {
                    self.schedule_poll(&pod, sched);
                }
            }
            Notice::EndpointsChanged { service } => {
                if service != self.app_service {
                    return;
                }
                let ready: Vec<String> = self
                    .processes
                    .iter()
                    .filter(|(p, proc_)| !proc_.waiting.is_empty() && self.in_app_endpoints(cluster, p))
                    .map(|(p, _)| p.clone())
                    .collect();
                for pod in ready {
                    let items = std::mem::take(&mut self.processes.get_mut(&pod).expect("listed").waiting);
                    self.resume(&pod, items, sched);
                }
                self.reroute_orphans(cluster, sched);
            }
            Notice::PodRemoved { pod } => {
                if self.with_sc {
                    return;
                }
                for s in self.sessions.values_mut() {
                    if let SessionState::Interrupted { last_pod, orphaned, .. } = &mut s.state {
                        if *last_pod == pod {
                            *orphaned = true;
                        }
                    }
                }
                self.reroute_orphans(cluster, sched);
            }
        }
    }

    fn on_started(&mut self, pod: &str, cluster: &Cluster, sched: &mut Sched) {
        self.incarnations += 1;
        let seen = env_state(cluster, pod);
        let serving = if self.with_sc { seen == Some(HaState::Active) } else { true };
        self.processes.insert(
            pod.to_string(),
            Process {
                incarnation: self.incarnations,
                started_at: sched.now(),
                last_seen: seen,
                serving,
                cache: BTreeMap::new(),
                checkpoint: None,
                poll: None,
                waiting: Vec::new(),
            },
        );
        if serving {
            let from = if self.with_sc { self.takeover_sources(pod, cluster) } else { vec![pod.to_string()] };
            self.take_over(pod, &from, cluster, sched);
        }
    }

    /// Without the state controller, clients of a pod that no longer exists reconnect
    /// through the application service to whichever pod it routes them to.
    fn reroute_orphans(&mut self, cluster: &mut Cluster, sched: &mut Sched) {
        let orphans: Vec<String> = self
            .sessions
            .values()
            .filter(|s| matches!(s.state, SessionState::Interrupted { orphaned: true, .. }))
            .map(|s| s.client_id.clone())
            .collect();
        let mut by_pod: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in orphans {
            let Ok(target) = cluster.route_request(&self.app_service, sched) else { return };
            if !self.processes.contains_key(&target) {
                continue;
            }
            let s = self.sessions.get_mut(&c).expect("listed");
            let SessionState::Interrupted { fault, .. } = s.state else { continue };
            s.state = SessionState::Restoring { pod: target.clone(), fault };
            by_pod.entry(target).or_default().push(c);
        }
        for (pod, clients) in by_pod {
            self.begin_restore(&pod, clients, cluster, sched);
        }
    }
}

/// Whether a client's stream picked up exactly where its last pre-failure checkpoint left it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub client_id: String,
    pub interrupted: bool,
    pub recovered: bool,
    pub resumed_position: Option<f64>,
    pub last_checkpoint_before_failure: Option<f64>,
    pub continuous: bool,
}

/// Examines the first interruption of `client` in `trace`.
pub fn observe_continuity(client: &str, trace: &Trace<Event>) -> ContinuityReport {
    let entries = trace.entries();
    let failure = entries.iter().position(|e| matches!(&e.event, Event::SessionInterrupted { client: c, .. } if c == client));
    let Some(fi) = failure else {
        return ContinuityReport {
            client_id: client.to_string(),
            interrupted: false,
            recovered: true,
            resumed_position: None,
            last_checkpoint_before_failure: None,
            continuous: true,
        };
    };
    let last_checkpoint = entries[..fi].iter().rev().find_map(|e| match &e.event {
        Event::CheckpointWritten { client: c, position, .. } if c == client => Some(*position),
        _ => None,
    });
    let resumed = entries[fi..].iter().find_map(|e| match &e.event {
        Event::ServiceResumed { client: c, position, .. } if c == client => Some(*position),
        _ => None,
    });
    ContinuityReport {
        client_id: client.to_string(),
        interrupted: true,
        recovered: resumed.is_some(),
        resumed_position: resumed,
        last_checkpoint_before_failure: last_checkpoint,
        continuous: resumed.is_some() && resumed == Some(last_checkpoint.unwrap_or(0.0)),
    }
}
