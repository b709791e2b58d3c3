use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ControllerKind;
use crate::error::RunError;
use crate::workload::ContinuityReport;

use super::metrics::{fault_kind_name, seconds, MetricsRecord, ScalingRecord};

pub const CSV_HEADER: [&str; 14] = [
    "scenario",
    "trial",
    "architecture",
    "with_sc",
    "event_id",
    "event_kind",
    "reaction_s",
    "repair_s",
    "recovery_s",
    "outage_s",
    "scaling_s",
    "ha_assign_s",
    "protection_lost",
    "state_lost",
];

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: u32,
    pub seed: u64,
    pub availability: Vec<MetricsRecord>,
    pub scaling: Vec<ScalingRecord>,
    pub continuity: Vec<ContinuityReport>,
    pub protection_lost: usize,
    pub state_lost: usize,
    pub errors: Vec<String>,
}

/// Mean and sample standard deviation of per-trial values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(with = "seconds")]
    pub mean: f64,
    #[serde(with = "seconds")]
    pub std_dev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_dev = if values.len() < 2 || !mean.is_finite() {
            if mean.is_finite() { 0.0 } else { f64::INFINITY }
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Summary { count: values.len(), mean, std_dev })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub reaction: Option<Summary>,
    pub repair: Option<Summary>,
    pub recovery: Option<Summary>,
    pub outage: Option<Summary>,
    pub scaling: Option<Summary>,
    pub ha_assign: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub architecture: ControllerKind,
    pub with_sc: bool,
    pub replicas: u32,
    pub seed: u64,
    pub trials: Vec<TrialReport>,
    pub summary: Aggregates,
    pub protection_lost: usize,
    pub state_lost: usize,
}

fn per_trial_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl RunReport {
    pub fn new(scenario: &str, architecture: ControllerKind, with_sc: bool, replicas: u32, seed: u64, trials: Vec<TrialReport>) -> Self {
        let summarize = |f: &dyn Fn(&TrialReport) -> Option<f64>| {
            let v: Vec<f64> = trials.iter().filter_map(f).collect();
            Summary::of(&v)
        };
        let summary = Aggregates {
            reaction: summarize(&|t| per_trial_mean(t.availability.iter().map(|r| r.reaction_s))),
            repair: summarize(&|t| per_trial_mean(t.availability.iter().map(|r| r.repair_s))),
            recovery: summarize(&|t| per_trial_mean(t.availability.iter().map(|r| r.recovery_s))),
            outage: summarize(&|t| per_trial_mean(t.availability.iter().map(|r| r.outage_s))),
            scaling: summarize(&|t| per_trial_mean(t.scaling.iter().map(|r| r.scaling_time_s))),
            ha_assign: summarize(&|t| per_trial_mean(t.scaling.iter().filter_map(|r| r.ha_assignment_time_s))),
        };
        RunReport {
            scenario: scenario.to_string(),
            architecture,
            with_sc,
            replicas,
            seed,
            protection_lost: trials.iter().map(|t| t.protection_lost).sum(),
            state_lost: trials.iter().map(|t| t.state_lost).sum(),
            trials,
            summary,
        }
    }

    pub fn mean_outage(&self) -> Option<f64> {
        self.summary.outage.map(|s| s.mean)
    }

    pub fn mean_recovery(&self) -> Option<f64> {
        self.summary.recovery.map(|s| s.mean)
    }

    pub fn mean_scaling(&self) -> Option<f64> {
        self.summary.scaling.map(|s| s.mean)
    }

    pub fn mean_ha_assign(&self) -> Option<f64> {
        self.summary.ha_assign.map(|s| s.mean)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), RunError> {
        let out = |p: &Path, source| RunError::Output { path: p.display().to_string(), source };
        std::fs::create_dir_all(dir).map_err(|e| out(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("reports serialize");
        let report = dir.join(REPORT_FILE);
        std::fs::write(&report, json).map_err(|e| out(&report, e))?;
        let records = dir.join(RECORDS_FILE);
        std::fs::write(&records, render_csv(std::slice::from_ref(self))).map_err(|e| out(&records, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<RunReport, RunError> {
        let path = dir.join(REPORT_FILE);
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(&path).map_err(|e| RunError::Input { path: shown.clone(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| RunError::Input { path: shown, message: e.to_string() })
    }
}

/// Relative changes of a treatment run against a baseline run, in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub recovery_improvement_pct: Option<f64>,
    pub outage_increase_pct: Option<f64>,
    pub scaling_overhead_pct: Option<f64>,
    pub ha_assign_increase_pct: Option<f64>,
}

fn pct_change(base: Option<f64>, new: Option<f64>) -> Option<f64> {
    let (b, n) = (base?, new?);
    (b.is_finite() && n.is_finite() && b > 0.0).then(|| (n - b) / b * 100.0)
}

pub fn compare(baseline: &RunReport, treatment: &RunReport) -> Comparison {
    Comparison {
        recovery_improvement_pct: pct_change(baseline.mean_recovery(), treatment.mean_recovery()).map(|p| -p),
        outage_increase_pct: pct_change(baseline.mean_outage(), treatment.mean_outage()),
        scaling_overhead_pct: pct_change(baseline.mean_scaling(), treatment.mean_scaling()),
        ha_assign_increase_pct: pct_change(baseline.mean_ha_assign(), treatment.mean_ha_assign()),
    }
}

fn secs(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".to_string()
    }
}

/// One row per availability or scaling record, header always present.
pub fn render_csv(reports: &[RunReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for rep in reports {
        for t in &rep.trials {
            let common = [rep.scenario.clone(), t.trial.to_string(), rep.architecture.as_str().to_string(), rep.with_sc.to_string()];
            for r in &t.availability {
                let row = [
                    r.event_id.clone(),
                    fault_kind_name(r.fault_kind).to_string(),
                    secs(r.reaction_s),
                    secs(r.repair_s),
                    secs(r.recovery_s),
                    secs(r.outage_s),
                    String::new(),
                    String::new(),
                    r.protection_lost.to_string(),
                    r.state_lost.to_string(),
                ];
                w.write_record(common.iter().chain(row.iter())).expect("in-memory write");
            }
            for s in &t.scaling {
                let row = [
                    format!("scale{}", s.request_id),
                    s.event_kind().to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    secs(s.scaling_time_s),
                    s.ha_assignment_time_s.map(secs).unwrap_or_default(),
                    (s.protection_lost > 0).to_string(),
                    "false".to_string(),
                ];
                w.write_record(common.iter().chain(row.iter())).expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn cell(s: Option<Summary>) -> String {
    match s {
        Some(s) if s.mean.is_finite() => format!("{:.3} ± {:.3}", s.mean, s.std_dev),
        Some(_) => "inf".to_string(),
        None => "NA".to_string(),
    }
}

/// Table-style summary, one line per report.
pub fn render_table(reports: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<32} {:<20} {:<5} {:>3}  {:>15} {:>15} {:>15} {:>15} {:>15} {:>15}",
        "scenario", "architecture", "sc", "n", "reaction", "repair", "recovery", "outage", "scaling", "ha_assign"
    );
    for r in reports {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<32} {:<20} {:<5} {:>3}  {:>15} {:>15} {:>15} {:>15} {:>15} {:>15}",
            r.scenario,
            r.architecture.as_str(),
            r.with_sc,
            r.replicas,
            cell(s.reaction),
            cell(s.repair),
            cell(s.recovery),
            cell(s.outage),
            cell(s.scaling),
            cell(s.ha_assign)
        );
        if r.protection_lost > 0 || r.state_lost > 0 {
            let _ = writeln!(out, "  protection_lost={} state_lost={}", r.protection_lost, r.state_lost);
        }
    }
    out
}

/// `(k, trial, rank, pod, outage)` rows: per trial, failed pods ordered by detection.
pub fn render_curves(reports: &[RunReport]) -> String {
    let mut out = String::from("scenario,k,trial,rank,pod,outage_s\n");
    for rep in reports {
        for t in &rep.trials {
            let mut recs: Vec<&MetricsRecord> = t.availability.iter().collect();
            recs.sort_by_key(|r| r.detected_at);
            let k = recs.len();
            for (rank, r) in recs.iter().enumerate() {
                let _ = writeln!(out, "{},{k},{},{},{},{}", rep.scenario, t.trial, rank + 1, r.pod, secs(r.outage_s));
            }
        }
    }
    out
}
