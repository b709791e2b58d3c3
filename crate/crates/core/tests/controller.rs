mod common;

use common::*;
use ha_sim::cluster::{ControllerKind, Delay};
use ha_sim::events::{HA_STATE_KEY, PEER_KEY};
use ha_sim::world::{PodSelector, Step};
use ha_sim::{Event, HaState};

fn state(w: &ha_sim::world::World, pod: &str) -> Option<String> {
    w.cluster.pod(pod).and_then(|p| p.label(HA_STATE_KEY)).map(str::to_string)
}

fn sc(w: &ha_sim::world::World) -> &ha_sim::controller::StateController {
    w.controller.as_ref().unwrap()
}

#[test]
fn pairs_four_pods_in_creation_order() {
    let mut p = table1(ControllerKind::StatefulOrdered, true);
    p.pod_create = Delay::constant(1.0);
    let w = ready_world(ControllerKind::StatefulOrdered, 4, true, p, 1);
    let recs = sc(&w).registry().records();
    assert_eq!(recs.len(), 2);
    assert_eq!((recs[0].active.as_str(), recs[0].standby.as_str()), ("MS-0", "MS-1"));
    assert_eq!((recs[1].active.as_str(), recs[1].standby.as_str()), ("MS-2", "MS-3"));
    assert_eq!(recs[0].replication_service, "replicate-MS-0");
    assert_eq!(recs[1].replication_service, "replicate-MS-2");
    assert!(w.cluster.service("replicate-MS-0").is_some());
    assert_eq!(state(&w, "MS-1").as_deref(), Some("standby"));
    assert_eq!(w.cluster.pod("MS-1").unwrap().label(PEER_KEY), Some("MS-0"));
    assert_eq!(w.cluster.pod("MS-0").unwrap().env_var(HA_STATE_KEY), Some("active"));
    let endpoints = &w.cluster.service(&w.app_service).unwrap().endpoints;
    assert_eq!(endpoints.iter().map(String::as_str).collect::<Vec<_>>(), vec!["MS-0", "MS-2"]);
    sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
    assert_eq!(sc(&w).registry().peer_of("MS-3"), Some("MS-2"));
    assert_eq!(sc(&w).registry().role_of("MS-2"), Some((1, HaState::Active)));
}

#[test]
fn lone_pod_waits_and_pairs_on_scale_out() {
    let mut w = ready_world(ControllerKind::StatefulOrdered, 3, true, table1(ControllerKind::StatefulOrdered, true), 1);
    assert_eq!(sc(&w).registry().pending(), ["MS-2"]);
    assert_eq!(state(&w, "MS-2"), None);
    assert!(step_now(&mut w, Step::Scale(4)));
    assert!(sc(&w).registry().pending().is_empty());
    assert_eq!(sc(&w).pairs().get("MS-2").map(String::as_str), Some("MS-3"));
    sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
}

#[test]
fn single_pod_is_never_active() {
    let w = ready_world(ControllerKind::StatefulOrdered, 1, true, table1(ControllerKind::StatefulOrdered, true), 1);
    assert!(sc(&w).registry().records().is_empty());
    assert_eq!(sc(&w).registry().pending(), ["MS-0"]);
    assert!(w.cluster.service(&w.app_service).unwrap().endpoints.is_empty());
    assert!(w.workload.sessions().next().is_none());
}

#[test]
fn failover_swaps_roles_and_is_an_involution() {
    for kind in [ControllerKind::StatefulOrdered, ControllerKind::StatelessParallel] {
        let mut w = ready_world(kind, 2, true, table1(kind, true), 5);
        let before = sc(&w).pairs();
        let (a, b) = before.iter().next().map(|(a, b)| (a.clone(), b.clone())).unwrap();
        assert!(step_now(&mut w, Step::KillContainer(PodSelector::Name(a.clone()))));
        assert_eq!(sc(&w).pairs().get(&b), Some(&a), "{kind:?}: standby promoted, failed pod demoted");
        assert_eq!(state(&w, &b).as_deref(), Some("active"));
        assert_eq!(state(&w, &a).as_deref(), Some("standby"));
        assert!(w.cluster.service(&format!("replicate-{b}")).is_some());
        assert!(w.cluster.service(&format!("replicate-{a}")).is_none());
        sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
        assert!(step_now(&mut w, Step::KillContainer(PodSelector::Name(b.clone()))));
        assert_eq!(sc(&w).pairs(), before, "{kind:?}: two failovers restore the original pair");
        sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
    }
}

#[test]
fn standby_failure_keeps_the_active_serving() {
    let mut w = ready_world(ControllerKind::StatefulOrdered, 2, true, table1(ControllerKind::StatefulOrdered, true), 2);
    assert!(step_now(&mut w, Step::KillContainer(PodSelector::Name("MS-1".into()))));
    assert_eq!(sc(&w).pairs().get("MS-0").map(String::as_str), Some("MS-1"));
    assert_eq!(count(&w, |e| matches!(e, Event::SessionInterrupted { .. })), 0);
    sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
}

#[test]
fn ordered_scale_in_removes_whole_pairs() {
    let mut w = ready_world(ControllerKind::StatefulOrdered, 4, true, table1(ControllerKind::StatefulOrdered, true), 3);
    assert!(step_now(&mut w, Step::Scale(2)));
    assert_eq!(sc(&w).pairs().len(), 1);
    assert!(w.cluster.service("replicate-MS-2").is_none());
    assert!(sc(&w).registry().pending().is_empty());
    assert_eq!(count(&w, |e| matches!(e, Event::ProtectionLost { .. })), 0);
    sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
}

#[test]
fn parallel_scale_in_can_split_pairs() {
    let mut hit = 0;
    for seed in 0..40 {
        let kind = ControllerKind::StatelessParallel;
        let mut w = ready_world(kind, 4, true, table1(kind, true), seed);
        assert!(step_now(&mut w, Step::Scale(2)));
        let flags = count(&w, |e| matches!(e, Event::ProtectionLost { scale: Some(_), .. }));
        let pending = sc(&w).registry().pending().len();
        assert_eq!(flags, pending, "every split pair leaves one pending survivor");
        assert_eq!(sc(&w).pairs().len() * 2 + pending, 2);
        if flags == 2 {
            hit += 1;
        }
        sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
    }
    assert!(hit > 0, "some seed deletes one pod from each pair");
}

#[test]
fn audit_flags_an_unrepaired_standby() {
    let kind = ControllerKind::StatefulOrdered;
    let mut w = ready_world(kind, 2, true, table1(kind, true), 4);
    let node = w.cluster.pod("MS-0").unwrap().node.clone();
    let now = w.now();
    w.schedule_step(now, Step::FailNode(ha_sim::world::NodeSelector::Name(node), ha_sim::cluster::NodeFailureMode::Shutdown))
        .unwrap();
    advance(&mut w, 30.0);
    assert_eq!(state(&w, "MS-1").as_deref(), Some("active"));
    let now = w.now();
    w.schedule_step(now, Step::EndObservation).unwrap();
    advance(&mut w, 1.0);
    assert_eq!(count(&w, |e| matches!(e, Event::ProtectionLost { pod, scale: None, .. } if pod == "MS-1")), 1);
}

#[test]
fn double_failure_waits_for_the_first_repair() {
    let kind = ControllerKind::StatefulOrdered;
    let mut w = ready_world(kind, 2, true, table1(kind, true), 6);
    advance(&mut w, 3.5);
    let now = w.now();
    w.schedule_step(now, Step::KillContainer(PodSelector::Name("MS-0".into()))).unwrap();
    w.schedule_step(now, Step::KillContainer(PodSelector::Name("MS-1".into()))).unwrap();
    assert!(w.run_until_settled(ha_sim::SimTime::new(now.seconds() + 100.0).unwrap()));
    let trace = w.sched.trace();
    let first_ready = trace.iter().find(|e| matches!(e.event, Event::PodReady { fault: Some(_), .. })).unwrap().time;
    let resumed = trace.iter().find(|e| matches!(e.event, Event::ServiceResumed { .. })).unwrap().time;
    assert!(resumed > first_ready, "no pod can serve before one is repaired");
    let c = ha_sim::workload::observe_continuity("client-0", trace);
    assert!(c.continuous, "{c:?}");
    sc(&w).check_invariants(&w.cluster, &w.app_service).unwrap();
}
