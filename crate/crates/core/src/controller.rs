//! The HA state controller.
//!
//! Pods are paired oldest-first into (active, standby) pairs. Roles are carried
//! by the `HAState` label and environment variable, pairs by the `peer` label,
//! and each pair gets a replication service named `replicate-{active}` that
//! selects the standby. Watch events are handled one at a time in arrival
//! order; each handling costs `sc_handling` before its writes land.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, Labels, Routing, Subscription};
use crate::error::ControllerError;
use crate::events::{ApiEvent, ApiEventKind, Event, HaState, ScaleId, HA_STATE_KEY, PEER_KEY};
use crate::world::{Action, Sched};

pub const REPLICATION_PREFIX: &str = "replicate-";

/// Name of the replication service owned by an active pod.
pub fn replication_service_name(active: &str) -> Result<String, ControllerError> {
    if active.is_empty() {
        return Err(ControllerError::EmptyPodName);
    }
    Ok(format!("{REPLICATION_PREFIX}{active}"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub active: String,
    pub standby: String,
    pub replication_service: String,
}

impl PairRecord {
    fn new(active: &str, standby: &str) -> Self {
        PairRecord {
            active: active.to_string(),
            standby: standby.to_string(),
            replication_service: format!("{REPLICATION_PREFIX}{active}"),
        }
    }

    fn contains(&self, pod: &str) -> bool {
        self.active == pod || self.standby == pod
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairRegistry {
    records: Vec<PairRecord>,
    pending: Vec<String>,
}

impl PairRegistry {
    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn pending(&self) -> &[String] {
        &self.pending
    }

    pub fn role_of(&self, pod: &str) -> Option<(usize, HaState)> {
        self.records.iter().enumerate().find_map(|(i, r)| {
            if r.active == pod {
                Some((i, HaState::Active))
            } else if r.standby == pod {
                Some((i, HaState::Standby))
            } else {
                None
            }
        })
    }

    pub fn peer_of(&self, pod: &str) -> Option<&str> {
        self.records.iter().find_map(|r| {
            if r.active == pod {
                Some(r.standby.as_str())
            } else if r.standby == pod {
                Some(r.active.as_str())
            } else {
                None
            }
        })
    }
}

/// Cluster writes the controller performs once a handling step completes.
#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Assign { pod: String, state: HaState, peer: String },
    LabelOnly { pod: String, state: HaState },
    Failover { failed: String, promoted: String },
    WriteEnv { pod: String, state: HaState },
    CreateReplication { active: String, standby: String },
    DeleteService { name: String },
    /// Drops pairing labels from a pod that lost its peer. An active pod keeps
    /// its role label so it stays in the application service.
    Unpair { pod: String, keep_active: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ControllerAction {
    Apply(Effect),
    Finish,
}

#[derive(Clone, Debug, PartialEq)]
struct Step {
    delay: f64,
    effect: Effect,
    /// Follow-up writes that do not hold up the event queue.
    detached: bool,
}

/// Outcome of handling one queued job, for inspection in tests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Handled {
    pub effects: Vec<Effect>,
    pub pairs_formed: Vec<PairRecord>,
    pub pairs_removed: Vec<PairRecord>,
}

#[derive(Clone, Debug)]
enum Job {
    Initial(Vec<String>),
    Event(ApiEvent),
}

#[derive(Debug)]
pub struct StateController {
    workload: String,
    registry: PairRegistry,
    queue: VecDeque<Job>,
    busy: bool,
    awaiting_repair: BTreeSet<String>,
    awaiting_ready: BTreeSet<String>,
    subscription: Subscription,
    handled_jobs: u64,
}

fn emit_later(sched: &mut Sched, delay: f64, action: ControllerAction) {
    let _ = sched.schedule(delay, Action::Controller(action));
}

impl StateController {
    /// Subscribes to the watch and queues the initial pairing of `workload`'s ready pods.
    pub fn start(workload: &str, cluster: &Cluster) -> Self {
        let running: Vec<String> = cluster
            .controller_pods(workload)
            .into_iter()
            .filter(|p| p.is_ready())
            .map(|p| p.name.clone())
            .collect();
        let mut sc = StateController {
            workload: workload.to_string(),
            registry: PairRegistry::default(),
            queue: VecDeque::new(),
            busy: false,
            awaiting_repair: BTreeSet::new(),
            awaiting_ready: BTreeSet::new(),
            subscription: cluster.watch_events(),
            handled_jobs: 0,
        };
        sc.queue.push_back(Job::Initial(running));
        sc
    }

    pub fn registry(&self) -> &PairRegistry {
        &self.registry
    }

    pub fn is_idle(&self) -> bool {
        !self.busy && self.queue.is_empty()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn handled_jobs(&self) -> u64 {
        self.handled_jobs
    }

    /// Moves newly emitted watch events into the FIFO queue and starts work if idle.
    pub fn pump(&mut self, cluster: &mut Cluster, sched: &mut Sched) {
        for ev in cluster.poll_events(&mut self.subscription) {
            self.queue.push_back(Job::Event(ev));
        }
        if !self.busy {
            self.start_next(cluster, sched);
        }
    }

    fn start_next(&mut self, cluster: &mut Cluster, sched: &mut Sched) {
        while let Some(job) = self.queue.pop_front() {
            let steps = match job {
                Job::Initial(pods) => self.plan_pairing(pods, cluster, sched),
                Job::Event(ev) => self.plan_event(ev, cluster, sched),
            };
            if steps.is_empty() {
                continue;
            }
            self.handled_jobs += 1;
            let mut busy_for: f64 = 0.0;
            for step in steps {
                if !step.detached {
                    busy_for = busy_for.max(step.delay);
                }
                emit_later(sched, step.delay, ControllerAction::Apply(step.effect));
            }
            self.busy = true;
            emit_later(sched, busy_for, ControllerAction::Finish);
            return;
        }
    }

    pub fn dispatch(&mut self, action: ControllerAction, cluster: &mut Cluster, sched: &mut Sched) {
        match action {
            ControllerAction::Apply(effect) => self.apply(effect, cluster, sched),
            ControllerAction::Finish => {
                self.busy = false;
                self.pump(cluster, sched);
            }
        }
    }

    fn handling(&self, cluster: &Cluster, sched: &mut Sched) -> f64 {
        cluster.profile().sc_handling.sample(sched.rng())
    }

    fn plan_event(&mut self, ev: ApiEvent, cluster: &Cluster, sched: &mut Sched) -> Vec<Step> {
        match ev.kind {
            ApiEventKind::PodFailure { pod, .. } => self.plan_failure(&pod, cluster, sched),
            ApiEventKind::PodReady { pod } => {
                if self.awaiting_repair.remove(&pod) {
                    let Some((i, state)) = self.registry.role_of(&pod) else { return Vec::new() };
                    let r = &self.registry.records[i];
                    let peer = if state == HaState::Active { r.standby.clone() } else { r.active.clone() };
                    let d = self.handling(cluster, sched);
                    vec![Step { delay: d, effect: Effect::Assign { pod, state, peer }, detached: false }]
                } else if self.awaiting_ready.remove(&pod) {
                    let mut pods = std::mem::take(&mut self.registry.pending);
                    pods.push(pod);
                    self.plan_pairing(pods, cluster, sched)
                } else {
                    Vec::new()
                }
            }
            ApiEventKind::PodAdded { pod, scale: None } => {
                if cluster.pod(&pod).is_some_and(|p| p.controller == self.workload) {
                    self.awaiting_ready.insert(pod);
                }
                Vec::new()
            }
            ApiEventKind::PodAdded { .. } => Vec::new(),
            ApiEventKind::PodDeleted { pod, scale: None } => {
                self.awaiting_ready.remove(&pod);
                self.plan_removal(&[pod], None, "pod deleted", cluster, sched)
            }
            ApiEventKind::PodDeleted { .. } => Vec::new(),
            ApiEventKind::ScaleOut { added, .. } => {
                let mut pods = std::mem::take(&mut self.registry.pending);
                pods.extend(added);
                self.plan_pairing(pods, cluster, sched)
            }
            ApiEventKind::ScaleIn { scale, deleted } => {
                self.plan_removal(&deleted, Some(scale), "scale-in removed peer", cluster, sched)
            }
        }
    }

    fn plan_failure(&mut self, pod: &str, cluster: &Cluster, sched: &mut Sched) -> Vec<Step> {
        match self.registry.role_of(pod) {
            Some((i, HaState::Active)) => {
                let promoted = self.registry.records[i].standby.clone();
                self.registry.records[i] = PairRecord::new(&promoted, pod);
                self.awaiting_repair.insert(pod.to_string());
                let d = self.handling(cluster, sched);
                let env_at = d + cluster.profile().endpoint_update.sample(sched.rng());
                vec![
                    Step {
                        delay: d,
                        effect: Effect::Failover { failed: pod.to_string(), promoted: promoted.clone() },
                        detached: false,
                    },
                    Step {
                        delay: env_at,
                        effect: Effect::WriteEnv { pod: promoted, state: HaState::Active },
                        detached: true,
                    },
                ]
            }
            Some((_, HaState::Standby)) => {
                self.awaiting_repair.insert(pod.to_string());
                let d = self.handling(cluster, sched);
                vec![Step {
                    delay: d,
                    effect: Effect::LabelOnly { pod: pod.to_string(), state: HaState::Standby },
                    detached: false,
                }]
            }
            None => {
                sched.record(Event::ControllerNote { note: format!("failure of unpaired pod {pod}, no action") });
                Vec::new()
            }
        }
    }

    /// Sorts by creation time (ties by name), pairs oldest-first, older pod active.
    fn plan_pairing(&mut self, pods: Vec<String>, cluster: &Cluster, sched: &mut Sched) -> Vec<Step> {
        let mut candidates: Vec<(crate::engine::SimTime, String)> = pods
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|p| self.registry.role_of(p).is_none())
            .filter_map(|p| cluster.pod(&p).map(|pod| (pod.creation_time, p)))
            .collect();
        candidates.sort();
        let mut ordered = candidates.into_iter().map(|(_, p)| p);
        let mut steps = Vec::new();
        let mut at = self.handling(cluster, sched);
        let mut leftovers = Vec::new();
        while let Some(a) = ordered.next() {
            let Some(b) = ordered.next() else {
                leftovers.push(a);
                break;
            };
            self.registry.records.push(PairRecord::new(&a, &b));
            for (pod, state, peer) in [(&a, HaState::Active, &b), (&b, HaState::Standby, &a)] {
                at += cluster.profile().ha_assign_per_pod.sample(sched.rng());
                steps.push(Step {
                    delay: at,
                    effect: Effect::Assign { pod: pod.clone(), state, peer: peer.clone() },
                    detached: false,
                });
            }
            steps.push(Step {
                delay: at,
                effect: Effect::CreateReplication { active: a, standby: b },
                detached: false,
            });
        }
        for p in leftovers {
            sched.record(Event::ControllerNote { note: format!("{p} has no partner, held pending") });
            self.registry.pending.push(p);
        }
        steps
    }

    fn plan_removal(
        &mut self,
        deleted: &[String],
        scale: Option<ScaleId>,
        cause: &str,
        cluster: &Cluster,
        sched: &mut Sched,
    ) -> Vec<Step> {
        let gone: BTreeSet<&str> = deleted.iter().map(String::as_str).collect();
        self.registry.pending.retain(|p| !gone.contains(p.as_str()));
        for p in &gone {
            self.awaiting_repair.remove(*p);
        }
        let (hit, kept): (Vec<PairRecord>, Vec<PairRecord>) = std::mem::take(&mut self.registry.records)
            .into_iter()
            .partition(|r| gone.iter().any(|g| r.contains(g)));
        self.registry.records = kept;
        if hit.is_empty() {
            return Vec::new();
        }
        let d = self.handling(cluster, sched);
        let mut steps = Vec::new();
        for r in hit {
            steps.push(Step {
                delay: d,
                effect: Effect::DeleteService { name: r.replication_service.clone() },
                detached: false,
            });
            let survivor = match (gone.contains(r.active.as_str()), gone.contains(r.standby.as_str())) {
                (true, false) => Some((r.standby.clone(), false)),
                (false, true) => Some((r.active.clone(), true)),
                _ => None,
            };
            if let Some((pod, was_active)) = survivor {
                sched.record(Event::ProtectionLost { pod: pod.clone(), cause: cause.to_string(), scale });
                self.awaiting_repair.remove(&pod);
                self.registry.pending.push(pod.clone());
                steps.push(Step { delay: d, effect: Effect::Unpair { pod, keep_active: was_active }, detached: false });
            }
        }
        steps
    }

    fn apply(&mut self, effect: Effect, cluster: &mut Cluster, sched: &mut Sched) {
        let missing = |pod: &str, sched: &mut Sched| {
            sched.record(Event::ControllerNote { note: format!("{pod} no longer exists, write skipped") });
        };
        match effect {
            Effect::Assign { pod, state, peer } => {
                if cluster.pod(&pod).is_none() {
                    return missing(&pod, sched);
                }
                let _ = cluster.set_label(&pod, HA_STATE_KEY, Some(state.as_str()), sched);
                let _ = cluster.set_label(&pod, PEER_KEY, Some(&peer), sched);
                let _ = cluster.set_env(&pod, HA_STATE_KEY, Some(state.as_str()), sched);
                sched.record(Event::HaStateAssigned { pod, state });
            }
            Effect::LabelOnly { pod, state } => {
                if cluster.pod(&pod).is_none() {
                    return missing(&pod, sched);
                }
                let _ = cluster.set_label(&pod, HA_STATE_KEY, Some(state.as_str()), sched);
            }
            Effect::Failover { failed, promoted } => {
                sched.record(Event::Promotion { failed: failed.clone(), promoted: promoted.clone() });
                if cluster.pod(&promoted).is_some() {
                    let _ = cluster.set_label(&promoted, HA_STATE_KEY, Some(HaState::Active.as_str()), sched);
                    sched.record(Event::HaStateAssigned { pod: promoted.clone(), state: HaState::Active });
                } else {
                    missing(&promoted, sched);
                }
                if cluster.pod(&failed).is_some() {
                    let _ = cluster.set_label(&failed, HA_STATE_KEY, Some(HaState::Standby.as_str()), sched);
                    let _ = cluster.set_env(&failed, HA_STATE_KEY, Some(HaState::Standby.as_str()), sched);
                }
                if let Ok(old) = replication_service_name(&failed) {
                    let _ = cluster.delete_service(&old, sched);
                }
                self.create_replication(&promoted, cluster, sched);
            }
            Effect::WriteEnv { pod, state } => {
                if cluster.pod(&pod).is_none() {
                    return missing(&pod, sched);
                }
                let _ = cluster.set_env(&pod, HA_STATE_KEY, Some(state.as_str()), sched);
            }
            Effect::CreateReplication { active, .. } => self.create_replication(&active, cluster, sched),
            Effect::DeleteService { name } => {
                let _ = cluster.delete_service(&name, sched);
            }
            Effect::Unpair { pod, keep_active } => {
                if cluster.pod(&pod).is_none() {
                    return missing(&pod, sched);
                }
                let _ = cluster.set_label(&pod, PEER_KEY, None, sched);
                if !keep_active {
                    let _ = cluster.set_label(&pod, HA_STATE_KEY, None, sched);
                    let _ = cluster.set_env(&pod, HA_STATE_KEY, None, sched);
                }
            }
        }
    }

    fn create_replication(&self, active: &str, cluster: &mut Cluster, sched: &mut Sched) {
        let Ok(name) = replication_service_name(active) else { return };
        let mut selector = Labels::new();
        selector.insert(HA_STATE_KEY.to_string(), HaState::Standby.as_str().to_string());
        selector.insert(PEER_KEY.to_string(), active.to_string());
        if cluster.create_service(&name, selector, Routing::RoundRobin, sched).is_err() {
            sched.record(Event::ControllerNote { note: format!("replication service {name} already exists") });
        }
    }

    /// Flags pairs whose standby is still down at the end of an observation window.
    pub fn audit(&self, cluster: &Cluster, sched: &mut Sched) {
        for r in &self.registry.records {
            let standby_ready = cluster.pod(&r.standby).is_some_and(|p| p.is_ready());
            if !standby_ready {
                sched.record(Event::ProtectionLost {
                    pod: r.active.clone(),
                    cause: format!("standby {} not repaired", r.standby),
                    scale: None,
                });
            }
        }
    }

    /// Checks the pairing invariants against cluster state. Meant for quiescent points.
    pub fn check_invariants(&self, cluster: &Cluster, app_service: &str) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for r in &self.registry.records {
            if r.active == r.standby {
                return Err(format!("pair with itself: {}", r.active));
            }
            for p in [&r.active, &r.standby] {
                if !seen.insert(p.clone()) {
                    return Err(format!("{p} appears in more than one pair"));
                }
            }
            let expect = [(&r.active, HaState::Active, &r.standby), (&r.standby, HaState::Standby, &r.active)];
            for (pod, state, peer) in expect {
                let Some(p) = cluster.pod(pod) else { return Err(format!("paired pod {pod} does not exist")) };
                if p.label(HA_STATE_KEY) != Some(state.as_str()) {
                    return Err(format!("{pod} labelled {:?}, expected {state}", p.label(HA_STATE_KEY)));
                }
                if p.label(PEER_KEY) != Some(peer.as_str()) {
                    return Err(format!("{pod} peer label {:?}, expected {peer}", p.label(PEER_KEY)));
                }
                if p.is_ready() && p.env_var(HA_STATE_KEY) != Some(state.as_str()) {
                    return Err(format!("{pod} env {:?}, expected {state}", p.env_var(HA_STATE_KEY)));
                }
            }
        }
        for p in &self.registry.pending {
            if seen.contains(p) {
                return Err(format!("{p} is both paired and pending"));
            }
            if let Some(pod) = cluster.pod(p) {
                if pod.label(PEER_KEY).is_some() || pod.label(HA_STATE_KEY) == Some(HaState::Standby.as_str()) {
                    return Err(format!("pending pod {p} still carries pairing labels"));
                }
            }
        }
        for pod in cluster.controller_pods(&self.workload) {
            if pod.label(HA_STATE_KEY).is_some() && !seen.contains(&pod.name) && !self.registry.pending.contains(&pod.name) {
                return Err(format!("{} has an HA state but is not managed", pod.name));
            }
        }
        let app = cluster.service(app_service).ok_or_else(|| format!("missing service {app_service}"))?;
        let expected: BTreeSet<String> = cluster
            .pods()
            .filter(|p| p.is_ready() && p.label(HA_STATE_KEY) == Some(HaState::Active.as_str()))
            .map(|p| p.name.clone())
            .collect();
        if app.endpoints != expected {
            return Err(format!("application endpoints {:?}, expected {:?}", app.endpoints, expected));
        }
        let services: BTreeSet<String> = cluster
            .services()
            .filter(|s| s.name.starts_with(REPLICATION_PREFIX))
            .map(|s| s.name.clone())
            .collect();
        let wanted: BTreeSet<String> = self.registry.records.iter().map(|r| r.replication_service.clone()).collect();
        if services != wanted {
            return Err(format!("replication services {services:?}, expected {wanted:?}"));
        }
        Ok(())
    }

    /// Pairs as a map from active to standby.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        self.registry.records.iter().map(|r| (r.active.clone(), r.standby.clone())).collect()
    }
}
