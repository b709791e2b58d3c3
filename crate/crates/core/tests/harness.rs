use std::path::Path;

use ha_sim::cluster::ControllerKind;
use ha_sim::harness::report::{CSV_HEADER, RECORDS_FILE, REPORT_FILE};
use ha_sim::harness::{
    compare, render_csv, render_curves, render_table, run_scenario, run_scenario_with, Execution, ProfilePreset, RunReport,
    Scenario,
};

fn shipped(name: &str) -> Scenario {
    Scenario::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))).unwrap()
}

#[test]
fn every_shipped_scenario_parses() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let s = Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(path.file_stem().unwrap().to_str(), Some(s.name.as_str()));
        n += 1;
    }
    assert!(n >= 60);
}

#[test]
fn profiles_parse_and_resolve() {
    let names: Vec<String> = ProfilePreset::builtins().into_iter().map(|p| p.name).collect();
    assert!(names.contains(&"default".to_string()) && names.contains(&"table1".to_string()));
    let t = ProfilePreset::load("table1").unwrap();
    assert_eq!(t.resolve(ControllerKind::StatelessParallel, true).detection_delay.mean(), 0.784);
    assert!(ProfilePreset::load("no-such-profile").is_err());
}

#[test]
fn trials_are_deterministic_and_execution_independent() {
    let s = shipped("rq1_deployment_sc");
    let preset = s.preset().unwrap();
    let a = run_scenario_with(&s, &preset, Execution::Sequential).unwrap();
    let b = run_scenario_with(&s, &preset, Execution::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(render_csv(&[a]), render_csv(&[b]));
}

#[test]
fn reports_round_trip_through_a_directory() {
    let rep = run_scenario(&shipped("node_shutdown_stateful")).unwrap();
    assert_eq!(rep.mean_outage(), Some(f64::INFINITY));
    let dir = tempfile::tempdir().unwrap();
    rep.write_dir(dir.path()).unwrap();
    assert!(dir.path().join(REPORT_FILE).exists());
    let csv = std::fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
    assert!(csv.starts_with(&CSV_HEADER.join(",")));
    assert!(csv.lines().nth(1).unwrap().contains(",inf,"));
    let back = RunReport::read_dir(dir.path()).unwrap();
    assert_eq!(back, rep);
    assert!(RunReport::read_dir(&dir.path().join("missing")).is_err());
}

#[test]
fn csv_rows_follow_the_schema() {
    let rep = run_scenario(&shipped("rq2_scale_out_stateful_sc")).unwrap();
    let csv = render_csv(std::slice::from_ref(&rep));
    let mut rows = csv.lines();
    assert_eq!(rows.next().unwrap(), CSV_HEADER.join(","));
    let rows: Vec<Vec<&str>> = rows.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    for r in &rows {
        assert_eq!(r.len(), CSV_HEADER.len());
        assert_eq!(r[0], "rq2_scale_out_stateful_sc");
        assert_eq!(r[2], "stateful_ordered");
        assert_eq!(r[3], "true");
    }
    let fault = rows.iter().find(|r| r[5] == "container_failure").unwrap();
    assert_eq!(&fault[6..10], ["0.719", "1.083", "0.794", "1.513"]);
    assert_eq!(&fault[10..12], ["", ""]);
    let scale = rows.iter().find(|r| r[5] == "scale_out").unwrap();
    assert!(scale[6..10].iter().all(|c| c.is_empty()));
    assert!(scale[10].contains('.') && scale[11].contains('.'));
}

#[test]
fn sc_comparison_percentages() {
    let base = run_scenario(&shipped("rq1_stateful")).unwrap();
    let sc = run_scenario(&shipped("rq1_stateful_sc")).unwrap();
    let c = compare(&base, &sc);
    let rec = c.recovery_improvement_pct.unwrap();
    assert!((rec - 46.35).abs() < 0.1, "{rec}");
    assert!(c.outage_increase_pct.unwrap() < 0.0);
    assert_eq!(c.scaling_overhead_pct, None);
}

#[test]
fn table_and_curves_render() {
    let rep = run_scenario(&shipped("rq4_stateful_sc_k3")).unwrap();
    let table = render_table(std::slice::from_ref(&rep));
    assert!(table.lines().nth(1).unwrap().starts_with("rq4_stateful_sc_k3"));
    let curves = render_curves(std::slice::from_ref(&rep));
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some("scenario,k,trial,rank,pod,outage_s"));
    assert_eq!(lines.count(), 30);
    assert!(curves.contains("rq4_stateful_sc_k3,3,0,3,"));
}

#[test]
fn failover_during_scaling_delays_assignment() {
    // The deployment failover is over before its scale request arrives, so only
    // the ordered controller, blocked on the unrepaired pod, shows a strict delay.
    for (with_fault, quiet, strict) in [
        ("rq2_scale_out_stateful_sc", "rq3_scale_out_stateful_sc_k4", true),
        ("rq2_scale_out_deployment_sc", "rq3_scale_out_deployment_sc_k4", false),
    ] {
        let a = run_scenario(&shipped(with_fault)).unwrap();
        let b = run_scenario(&shipped(quiet)).unwrap();
        let c = compare(&b, &a);
        assert!(c.scaling_overhead_pct.unwrap() >= 0.0, "{with_fault}: {c:?}");
        let inc = c.ha_assign_increase_pct.unwrap();
        assert!(if strict { inc > 0.0 } else { inc >= 0.0 }, "{with_fault}: {c:?}");
        let alone = run_scenario(&shipped(if with_fault.contains("stateful") { "rq1_stateful_sc" } else { "rq1_deployment_sc" }))
            .unwrap();
        assert!(a.mean_outage().unwrap() >= alone.mean_outage().unwrap() - 1e-9);
    }
}
