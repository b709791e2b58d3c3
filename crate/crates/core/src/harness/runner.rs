#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::cluster::LatencyProfile;
use crate::engine::{SimTime, Stop, Trace};
use crate::error::ScenarioError;
use crate::events::Event;
use crate::workload::observe_continuity;
use crate::world::{World, WorldConfig};

use super::metrics::{extract_availability_metrics, extract_scaling_metrics};
use super::profile::ProfilePreset;
use super::report::{RunReport, TrialReport};
use super::scenario::Scenario;

/// Upper bound on simulated seconds spent bringing a deployment up.
pub const SETTLE_LIMIT_S: f64 = 1.0e6;

/// Parallel is the default when the `parallel` feature is on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

pub struct TrialRun {
    pub report: TrialReport,
    pub world: World,
    /// When client streams opened; schedule times count from here.
    pub start: SimTime,
}

impl TrialRun {
    pub fn trace(&self) -> &Trace<Event> {
        self.world.sched.trace()
    }
}

/// Deploys, lets the deployment settle, starts the controller (if any) and opens one
/// stream per application endpoint. Returns the world and the stream start time.
pub fn prepare(scenario: &Scenario, profile: &LatencyProfile, seed: u64) -> Result<(World, SimTime), String> {
    let cfg = WorldConfig::new(scenario.architecture, scenario.replicas, scenario.with_sc, profile.clone(), seed);
    let mut world = World::new(cfg).map_err(|e| e.to_string())?;
    let limit = SimTime::new(SETTLE_LIMIT_S).expect("finite");
    if !world.run_until_settled(limit) {
        return Err("deployment did not settle".into());
    }
    if scenario.with_sc {
        world.start_controller();
        if !world.run_until_settled(limit) {
            return Err("initial HA state assignment did not settle".into());
        }
    }
    world.start_streams();
    let start = world.now();
    Ok((world, start))
}

pub fn run_trial(scenario: &Scenario, profile: &LatencyProfile, trial: u32) -> Result<TrialRun, String> {
    let seed = scenario.seed.wrapping_add(u64::from(trial));
    let (mut world, start) = prepare(scenario, profile, seed)?;
    for entry in &scenario.schedule {
        world.schedule_step(start.plus(entry.at), entry.to_step()).map_err(|e| e.to_string())?;
    }
    world.run_until(Stop::At(start.plus(scenario.end_time())));

    let trace = world.sched.trace();
    let mut errors = world.step_errors.clone();
    let mut availability = Vec::new();
    for &f in &world.faults {
        match extract_availability_metrics(trace, f) {
            Ok(recs) => availability.extend(recs),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let mut scaling = Vec::new();
    for &s in &world.scales {
        match extract_scaling_metrics(trace, s) {
            Ok(r) => scaling.push(r),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let continuity = world.workload.sessions().map(|s| observe_continuity(&s.client_id, trace)).collect();
    let protection_lost = trace.iter().filter(|e| matches!(e.event, Event::ProtectionLost { .. })).count();
    let state_lost = trace.iter().filter(|e| matches!(e.event, Event::StateLost { .. })).count();
    let report = TrialReport { trial, seed, availability, scaling, continuity, protection_lost, state_lost, errors };
    Ok(TrialRun { report, world, start })
}

fn trial_report(scenario: &Scenario, profile: &LatencyProfile, trial: u32) -> TrialReport {
    match run_trial(scenario, profile, trial) {
        Ok(run) => run.report,
        Err(e) => TrialReport {
            trial,
            seed: scenario.seed.wrapping_add(u64::from(trial)),
            availability: Vec::new(),
            scaling: Vec::new(),
            continuity: Vec::new(),
            protection_lost: 0,
            state_lost: 0,
            errors: vec![e],
        },
    }
}

pub fn run_with_profile(scenario: &Scenario, profile: &LatencyProfile, execution: Execution) -> RunReport {
    let trials: Vec<TrialReport> = match execution {
        Execution::Sequential => (0..scenario.trials).map(|t| trial_report(scenario, profile, t)).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..scenario.trials).into_par_iter().map(|t| trial_report(scenario, profile, t)).collect(),
    };
    RunReport::new(&scenario.name, scenario.architecture, scenario.with_sc, scenario.replicas, scenario.seed, trials)
}

/// Runs every trial of `scenario` using its own latency preset.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let preset = scenario.preset()?;
    run_scenario_with(scenario, &preset, Execution::default())
}

/// Runs with `preset` in place of the scenario's preset; scenario overrides still apply.
pub fn run_scenario_with(scenario: &Scenario, preset: &ProfilePreset, execution: Execution) -> Result<RunReport, ScenarioError> {
    scenario.validate()?;
    let profile = scenario.resolve_profile(preset)?;
    Ok(run_with_profile(scenario, &profile, execution))
}

/// Runs several scenarios, spreading them across threads when parallel execution is enabled.
pub fn run_many(scenarios: &[Scenario]) -> Result<Vec<RunReport>, ScenarioError> {
    let prepared: Vec<(&Scenario, LatencyProfile)> = scenarios
        .iter()
        .map(|s| {
            s.validate()?;
            Ok((s, s.resolve_profile(&s.preset()?)?))
        })
        .collect::<Result<_, ScenarioError>>()?;
    #[cfg(feature = "parallel")]
    let reports = prepared.par_iter().map(|(s, p)| run_with_profile(s, p, Execution::Sequential)).collect();
    #[cfg(not(feature = "parallel"))]
    let reports = prepared.iter().map(|(s, p)| run_with_profile(s, p, Execution::Sequential)).collect();
    Ok(reports)
}
