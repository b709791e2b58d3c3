#![allow(dead_code)]

use ha_sim::cluster::{ControllerKind, LatencyProfile};
use ha_sim::harness::ProfilePreset;
use ha_sim::world::{Step, World, WorldConfig};
use ha_sim::{Event, SimTime};

pub const LIMIT: f64 = 1.0e6;

pub fn table1(kind: ControllerKind, with_sc: bool) -> LatencyProfile {
    ProfilePreset::builtin("table1").unwrap().resolve(kind, with_sc)
}

/// A deployment that has come up, been paired (if `with_sc`) and has streams open.
pub fn ready_world(kind: ControllerKind, replicas: u32, with_sc: bool, profile: LatencyProfile, seed: u64) -> World {
    let mut w = World::new(WorldConfig::new(kind, replicas, with_sc, profile, seed)).unwrap();
    assert!(w.run_until_settled(SimTime::new(LIMIT).unwrap()));
    if with_sc {
        w.start_controller();
        assert!(w.run_until_settled(SimTime::new(LIMIT).unwrap()));
    }
    w.start_streams();
    w
}

/// Fires `step` now and runs to quiescence.
pub fn step_now(w: &mut World, step: Step) -> bool {
    let now = w.now();
    w.schedule_step(now, step).unwrap();
    w.run_until_settled(SimTime::new(now.seconds() + 5000.0).unwrap())
}

/// Runs for `seconds` of simulated time, checkpoint timers included.
pub fn advance(w: &mut World, seconds: f64) {
    let t = SimTime::new(w.now().seconds() + seconds).unwrap();
    w.run_until(ha_sim::Stop::At(t));
}

pub fn count(w: &World, pred: impl Fn(&Event) -> bool) -> usize {
    w.sched.trace().iter().filter(|e| pred(&e.event)).count()
}

use ha_sim::cluster::{Delay, LatencyOverrides};
use ha_sim::harness::scenario::{FailMode, LatencyProfileSpec};
use ha_sim::harness::{Scenario, ScheduleEntry, ScheduledAction};
use ha_sim::world::{NodeSelector, PodSelector};
use ha_sim::RandomSource;

const KINDS: [ControllerKind; 2] = [ControllerKind::StatefulOrdered, ControllerKind::StatelessParallel];

fn jitter(rng: &mut RandomSource, lo: f64, hi: f64) -> Option<Delay> {
    let a = rng.uniform(lo, hi);
    let b = rng.uniform(lo, hi);
    Some(Delay::uniform(a.min(b), a.max(b)))
}

/// A valid scenario with jittered latencies and a few faults and scale requests.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = RandomSource::new(seed);
    let architecture = KINDS[rng.below(2)];
    let with_sc = rng.below(2) == 1;
    let replicas = 1 + rng.below(6) as u32;
    let overrides = LatencyOverrides {
        detection_delay: jitter(&mut rng, 0.2, 1.5),
        container_restart: jitter(&mut rng, 0.5, 3.0),
        endpoint_update: jitter(&mut rng, 0.01, 0.3),
        env_propagation: jitter(&mut rng, 0.01, 0.3),
        sc_handling: jitter(&mut rng, 0.005, 0.1),
        state_restore: jitter(&mut rng, 0.05, 0.5),
        node_eviction_timeout: Some(Delay::constant(rng.uniform(5.0, 60.0))),
        node_rejoin_delay: Some(Delay::constant(rng.uniform(5.0, 40.0))),
        ..Default::default()
    };
    let mut schedule = Vec::new();
    let mut at = rng.uniform(0.5, 5.0);
    for _ in 0..1 + rng.below(4) {
        let action = match rng.below(6) {
            0 => ScheduledAction::FailNode {
                node: NodeSelector::HostOf { host_of: PodSelector::Rank { rank: rng.below(replicas as usize) } },
                mode: FailMode::Reboot,
                duration: Some(rng.uniform(1.0, 30.0)),
            },
            1 => ScheduledAction::Scale { target: rng.below(7) as i64 },
            _ if with_sc && rng.below(2) == 0 => ScheduledAction::KillContainer {
                pod: PodSelector::HaState { ha_state: ha_sim::HaState::Active, rank: rng.below(3) },
            },
            _ => ScheduledAction::KillContainer { pod: PodSelector::Rank { rank: rng.below(replicas as usize) } },
        };
        schedule.push(ScheduleEntry { at, action });
        // Sometimes simultaneous.
        if rng.below(3) != 0 {
            at += rng.uniform(0.0, 8.0);
        }
    }
    schedule.push(ScheduleEntry { at: at + 150.0, action: ScheduledAction::EndObservation });
    let mut s = Scenario {
        name: format!("random-{seed}"),
        architecture,
        with_sc,
        replicas,
        latency_profile: LatencyProfileSpec { preset: Some("table1".into()), overrides },
        schedule,
        trials: 1,
        seed,
    };
    if s.validate().is_err() {
        s.schedule.retain(|e| !matches!(e.action, ScheduledAction::Scale { .. }));
    }
    s.validate().unwrap();
    s
}

/// Outcome of one randomized fault and scale schedule on a paired deployment.
pub struct InvariantRun {
    pub steps: usize,
    pub scale_protection_lost: usize,
}

/// Applies random steps one at a time, checking the pairing invariants at every
/// quiescent point in between.
pub fn invariant_run(kind: ControllerKind, seed: u64) -> Result<InvariantRun, String> {
    let mut rng = RandomSource::new(seed ^ 0x5eed);
    let mut profile = table1(kind, true);
    profile.node_eviction_timeout = Delay::constant(20.0);
    profile.node_rejoin_delay = Delay::constant(10.0);
    profile.detection_delay = Delay::uniform(0.3, 1.0);
    profile.container_restart = Delay::uniform(0.5, 2.0);
    let replicas = 2 + rng.below(6) as u32;
    let mut w = ready_world(kind, replicas, true, profile, seed);
    let check = |w: &World, after: &str| {
        w.controller.as_ref().unwrap().check_invariants(&w.cluster, &w.app_service).map_err(|e| format!("seed {seed}, {after}: {e}"))
    };
    check(&w, "initial pairing")?;
    let steps = 4 + rng.below(5);
    for _ in 0..steps {
        let live = w.cluster.controller_pods(&w.workload_name).len().max(1);
        let step = match rng.below(5) {
            0 => Step::Scale(match kind {
                ControllerKind::StatefulOrdered => 2 * rng.below(5) as i64,
                ControllerKind::StatelessParallel => rng.below(9) as i64,
            }),
            1 => Step::FailNode(
                NodeSelector::HostOf { host_of: PodSelector::Rank { rank: rng.below(live) } },
                ha_sim::cluster::NodeFailureMode::Reboot(rng.uniform(1.0, 20.0)),
            ),
            _ => Step::KillContainer(PodSelector::Rank { rank: rng.below(live) }),
        };
        let label = format!("{step:?}");
        if !step_now(&mut w, step) {
            return Err(format!("seed {seed}: did not settle after {label}"));
        }
        check(&w, &label)?;
    }
    let scale_protection_lost = count(&w, |e| matches!(e, Event::ProtectionLost { scale: Some(_), .. }));
    Ok(InvariantRun { steps, scale_protection_lost })
}
