//! One line per acceptance criterion. Exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use ha_sim::cluster::{ControllerKind, Delay};
use ha_sim::harness::{
    max_tolerable_failures, render_csv, run_many, run_scenario, run_trial, RunReport, Scenario, TrialRun,
};
use ha_sim::Event;

/// Calibrated replay tolerance, seconds.
const TABLE_TOL: f64 = 0.005;
/// Recovery reduction tolerance, percentage points.
const REDUCTION_TOL: f64 = 2.0;
const REBOOT_OUTAGE: f64 = 164.507;
const REBOOT_TOL: f64 = 0.5;
const IDENTITY_SCENARIOS: u64 = 1000;
const INVARIANT_SEEDS: u64 = 500;
const HAZARD_SEEDS: u64 = 100;
const SWEEP_LIMIT_S: f64 = 60.0;

// reaction, repair, recovery, outage
const CALIBRATED_ROWS: [(&str, [f64; 4]); 4] = [
    ("rq1_stateful", [0.679, 1.029, 1.480, 2.159]),
    ("rq1_stateful_sc", [0.719, 1.083, 0.793, 1.512]),
    ("rq1_deployment", [0.554, 1.021, 1.534, 2.088]),
    ("rq1_deployment_sc", [0.784, 1.244, 0.688, 1.472]),
];

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn load(name: &str) -> Scenario {
    Scenario::load(scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run(name: &str) -> RunReport {
    run_scenario(&load(name)).unwrap()
}

fn trials(s: &Scenario) -> Vec<TrialRun> {
    let profile = s.resolve_profile(&s.preset().unwrap()).unwrap();
    (0..s.trials).map(|t| run_trial(s, &profile, t).unwrap()).collect()
}

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn criterion_1() -> Outcome {
    let mut shown = Vec::new();
    for (name, want) in CALIBRATED_ROWS {
        let r = run(name);
        let s = &r.summary;
        let got = [s.reaction, s.repair, s.recovery, s.outage].map(|x| x.map_or(f64::NAN, |x| x.mean));
        for (g, w) in got.iter().zip(want) {
            if (g - w).abs().is_nan() || (g - w).abs() > TABLE_TOL {
                return Err(format!("{name}: got {got:.3?}, want {want:?}"));
            }
        }
        shown.push(format!("{name} {:.3}/{:.3}/{:.3}/{:.3}", got[0], got[1], got[2], got[3]));
    }
    Ok(shown.join("; "))
}

fn criterion_2() -> Outcome {
    for (name, [reaction, _, recovery, outage]) in CALIBRATED_ROWS {
        if ((reaction + recovery) - outage).abs() > 1e-9 {
            return Err(format!("reference row {name} does not add up"));
        }
    }
    let mut records = 0;
    let mut inf = 0;
    for seed in 0..IDENTITY_SCENARIOS {
        let s = random_scenario(seed);
        let profile = s.resolve_profile(&s.preset().unwrap()).unwrap();
        let t = run_trial(&s, &profile, 0).map_err(|e| format!("seed {seed}: {e}"))?;
        for r in &t.report.availability {
            if r.outage_s != r.reaction_s + r.recovery_s {
                return Err(format!("seed {seed}: {} != {} + {}", r.outage_s, r.reaction_s, r.recovery_s));
            }
            records += 1;
            inf += usize::from(!r.outage_s.is_finite());
        }
    }
    if records < IDENTITY_SCENARIOS as usize {
        return Err(format!("only {records} records over {IDENTITY_SCENARIOS} scenarios"));
    }
    Ok(format!("{IDENTITY_SCENARIOS} scenarios, {records} records ({inf} unbounded), all exact"))
}

fn resumed_before_ready(run: &TrialRun) -> Result<(), String> {
    let trace = run.trace();
    for &fault in &run.world.faults {
        let failed = trace
            .iter()
            .find_map(|e| match &e.event {
                Event::PodNotReady { pod, fault: Some(f) } if *f == fault => Some(pod.clone()),
                _ => None,
            })
            .ok_or("no reaction")?;
        let ready = trace.iter().position(|e| matches!(&e.event, Event::PodReady { pod, fault: Some(f), .. } if *f == fault && *pod == failed));
        let resumed = trace.iter().position(|e| matches!(&e.event, Event::ServiceResumed { fault: Some(f), .. } if *f == fault));
        match (resumed, ready) {
            (Some(a), Some(b)) if a < b && trace.entries()[a].time < trace.entries()[b].time => {}
            _ => return Err(format!("trial {}: resumed {resumed:?}, ready {ready:?}", run.report.trial)),
        }
    }
    Ok(())
}

fn criterion_3() -> Outcome {
    let mut runs = 0;
    for name in ["rq1_stateful_sc", "rq1_deployment_sc"] {
        for t in trials(&load(name)) {
            resumed_before_ready(&t).map_err(|e| format!("{name}: {e}"))?;
            runs += 1;
        }
    }
    let mut shown = Vec::new();
    for (base, sc, want) in [("rq1_stateful", "rq1_stateful_sc", 46.0), ("rq1_deployment", "rq1_deployment_sc", 55.0)] {
        let b = run(base).mean_recovery().unwrap();
        let s = run(sc).mean_recovery().unwrap();
        let reduction = (1.0 - s / b) * 100.0;
        if (reduction - want).abs() > REDUCTION_TOL {
            return Err(format!("{sc}: recovery reduction {reduction:.1}%, want {want}%"));
        }
        shown.push(format!("{sc} -{reduction:.1}%"));
    }
    Ok(format!("{runs} runs resumed before repair; {}", shown.join(", ")))
}

fn criterion_4() -> Outcome {
    let down = run("node_shutdown_stateful").mean_outage().unwrap();
    if down.is_finite() {
        return Err(format!("shutdown without the SC gave finite outage {down}"));
    }
    let mut bounded = Vec::new();
    for rejoin in [10.0, 37.656, 500.0] {
        let mut s = load("node_shutdown_stateful_sc");
        s.latency_profile.overrides.node_rejoin_delay = Some(Delay::constant(rejoin));
        let o = run_scenario(&s).unwrap().mean_outage().unwrap();
        if !o.is_finite() {
            return Err(format!("shutdown with the SC unbounded at rejoin {rejoin}"));
        }
        bounded.push(o);
    }
    if bounded.iter().any(|o| (o - bounded[0]).abs() > 1e-9) {
        return Err(format!("SC outage depends on rejoin time: {bounded:?}"));
    }
    let reboot = run("node_reboot_stateful").mean_outage().unwrap();
    if (reboot - REBOOT_OUTAGE).abs() > REBOOT_TOL {
        return Err(format!("reboot outage {reboot:.3}, want {REBOOT_OUTAGE}"));
    }
    Ok(format!("shutdown inf; with SC {:.3} for any rejoin time; reboot {reboot:.3}", bounded[0]))
}

fn criterion_5() -> Outcome {
    let a = max_tolerable_failures(2.159, 0.99999).map_err(|e| e.to_string())?;
    let b = max_tolerable_failures(164.507, 0.99999).map_err(|e| e.to_string())?;
    if (a, b) != (146, 1) {
        return Err(format!("got {a} and {b}, want 146 and 1"));
    }
    Ok(format!("{a} container failures, {b} node reboot per year"))
}

fn criterion_6() -> Outcome {
    let mut steps = 0;
    for kind in [ControllerKind::StatefulOrdered, ControllerKind::StatelessParallel] {
        for seed in 0..INVARIANT_SEEDS {
            let r = invariant_run(kind, seed)?;
            steps += r.steps;
            if kind == ControllerKind::StatefulOrdered && r.scale_protection_lost > 0 {
                return Err(format!("stateful seed {seed}: {} protection_lost on scale-in", r.scale_protection_lost));
            }
        }
    }
    let mut hazard = 0;
    for seed in 0..HAZARD_SEEDS {
        let kind = ControllerKind::StatelessParallel;
        let mut w = ready_world(kind, 4, true, table1(kind, true), seed);
        step_now(&mut w, ha_sim::world::Step::Scale(2));
        if count(&w, |e| matches!(e, Event::ProtectionLost { scale: Some(_), .. })) > 0 {
            hazard += 1;
        }
    }
    if hazard == 0 {
        return Err(format!("no protection_lost in {HAZARD_SEEDS} parallel scale-ins"));
    }
    Ok(format!(
        "{} seeds x 2 architectures, {steps} checked steps; stateful scale-in 0 flags; parallel 4->2 flagged in {hazard}/{HAZARD_SEEDS}",
        INVARIANT_SEEDS
    ))
}

const KS: [u32; 6] = [4, 8, 16, 32, 64, 128];

fn criterion_7() -> Outcome {
    let mut names = Vec::new();
    for dir in ["out", "in"] {
        for arch in ["stateful", "deployment"] {
            for sc in ["", "_sc"] {
                for k in KS {
                    names.push(format!("rq3_scale_{dir}_{arch}{sc}_k{k}"));
                }
            }
        }
    }
    let scenarios: Vec<Scenario> = names.iter().map(|n| load(n)).collect();
    let start = Instant::now();
    let reports = run_many(&scenarios).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let t: BTreeMap<&str, f64> = names.iter().map(String::as_str).zip(reports.iter().map(|r| r.mean_scaling().unwrap())).collect();
    let get = |dir: &str, arch: &str, sc: &str, k: u32| t[format!("rq3_scale_{dir}_{arch}{sc}_k{k}").as_str()];
    for k in KS {
        for sc in ["", "_sc"] {
            let (s, d) = (get("out", "stateful", sc, k), get("out", "deployment", sc, k));
            if s <= d {
                return Err(format!("k={k}{sc}: stateful {s:.3} not above deployment {d:.3}"));
            }
        }
        for dir in ["out", "in"] {
            for arch in ["stateful", "deployment"] {
                let (with, without) = (get(dir, arch, "_sc", k), get(dir, arch, "", k));
                if with < without {
                    return Err(format!("scale-{dir} {arch} k={k}: with SC {with:.3} below {without:.3}"));
                }
            }
        }
    }
    for sc in ["", "_sc"] {
        for w in KS.windows(2) {
            let (a, b) = (get("out", "stateful", sc, w[0]), get("out", "stateful", sc, w[1]));
            if b <= a || b / f64::from(w[1]) < a / f64::from(w[0]) {
                return Err(format!("stateful{sc} scale-out k={}..{}: {a:.3} -> {b:.3} is not at least linear", w[0], w[1]));
            }
        }
    }
    if elapsed >= SWEEP_LIMIT_S {
        return Err(format!("sweep took {elapsed:.1}s"));
    }
    Ok(format!(
        "{} scenarios in {elapsed:.2}s; stateful scale-out k=4 {:.3}s .. k=128 {:.3}s",
        names.len(),
        get("out", "stateful", "", 4),
        get("out", "stateful", "", 128)
    ))
}

fn criterion_8() -> Outcome {
    let mut checked = 0;
    for arch in ["stateful", "deployment"] {
        for k in 1..=5usize {
            let name = format!("rq4_{arch}_sc_k{k}");
            for t in run(&name).trials {
                let mut recs = t.availability.clone();
                if recs.len() != k {
                    return Err(format!("{name} trial {}: {} records, want {k}", t.trial, recs.len()));
                }
                recs.sort_by_key(|r| r.detected_at);
                if recs.windows(2).any(|w| w[1].outage_s < w[0].outage_s) {
                    let o: Vec<f64> = recs.iter().map(|r| r.outage_s).collect();
                    return Err(format!("{name} trial {}: outages {o:.3?}", t.trial));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} trials non-decreasing in detection rank"))
}

fn criterion_9() -> Outcome {
    let sc_cases = [
        "rq1_stateful_sc",
        "rq1_deployment_sc",
        "rq2_scale_out_stateful_sc",
        "rq2_scale_out_deployment_sc",
        "rq2_scale_in_stateful_sc",
        "node_shutdown_stateful_sc",
        "rq4_stateful_sc_k5",
        "rq4_deployment_sc_k5",
    ];
    let mut failovers = 0;
    for name in sc_cases {
        for t in run(name).trials {
            for c in t.continuity.iter().filter(|c| c.interrupted) {
                let want = c.last_checkpoint_before_failure.unwrap_or(0.0);
                if !(c.continuous && c.resumed_position == Some(want)) {
                    return Err(format!("{name} trial {}: {c:?}", t.trial));
                }
                failovers += 1;
            }
        }
    }
    let lost = run("node_shutdown_deployment");
    for t in &lost.trials {
        let c = t.continuity.iter().find(|c| c.interrupted).ok_or("no interruption")?;
        if t.state_lost == 0 || !t.availability.iter().all(|r| r.state_lost) || c.resumed_position != Some(0.0) {
            return Err(format!("node_shutdown_deployment trial {}: state_lost {}, {c:?}", t.trial, t.state_lost));
        }
    }
    Ok(format!("{failovers} failed-over sessions resumed at their last checkpoint; deployment node loss restarts at 0"))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for name in ["rq1_deployment_sc", "rq4_stateful_sc_k3", "rq2_scale_out_deployment_sc", "node_reboot_stateful"] {
        let s = load(name);
        let mut bytes = Vec::new();
        for i in 0..2 {
            let out = dir.path().join(format!("{name}-{i}"));
            run_scenario(&s).unwrap().write_dir(&out).map_err(|e| e.to_string())?;
            bytes.push(std::fs::read(out.join("records.csv")).map_err(|e| e.to_string())?);
        }
        if bytes[0] != bytes[1] {
            return Err(format!("{name}: CSV differs between runs"));
        }
        compared += 1;
    }
    for seed in 0..50 {
        let s = random_scenario(seed);
        let csv = || render_csv(&[run_scenario(&s).unwrap()]);
        if csv() != csv() {
            return Err(format!("random scenario {seed}: CSV differs"));
        }
        compared += 1;
    }
    Ok(format!("{compared} scenarios byte-identical across two runs"))
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("calibrated replay", criterion_1),
        ("metric identity", criterion_2),
        ("recovery before repair", criterion_3),
        ("node shutdown dichotomy", criterion_4),
        ("availability budget", criterion_5),
        ("pair invariants", criterion_6),
        ("RQ3 orderings", criterion_7),
        ("RQ4 FIFO monotonicity", criterion_8),
        ("continuity", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
