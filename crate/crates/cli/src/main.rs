use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ha_sim::error::{RunError, ScenarioError};
use ha_sim::harness::{render_csv, render_curves, render_table, run_scenario_with, Execution, ProfilePreset, RunReport, Scenario};

/// Cluster failover and scaling simulator.
#[derive(Parser)]
#[command(name = "ha-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of a scenario and write report.json and records.csv.
    Run {
        /// Scenario file, or the name of a shipped scenario.
        #[arg(long)]
        scenario: String,
        /// Overrides the scenario's trial count.
        #[arg(long)]
        trials: Option<u32>,
        /// Overrides the scenario's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Latency preset name or profile file, replacing the scenario's preset.
        #[arg(long)]
        profile: Option<String>,
        /// Run trials one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Render a report directory written by `run`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// List shipped latency presets and scenarios.
    Presets {
        #[command(subcommand)]
        command: PresetsCommand,
    },
}

#[derive(Subcommand)]
enum PresetsCommand {
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
    Curves,
}

const VALIDATION: u8 = 1;
const RUNTIME: u8 = 2;

struct Failure {
    code: u8,
    message: String,
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Io { .. } => RUNTIME,
            _ => VALIDATION,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Scenario(e) => e.into(),
            e => Failure { code: RUNTIME, message: e.to_string() },
        }
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios")
}

fn resolve_scenario(arg: &str) -> PathBuf {
    let given = PathBuf::from(arg);
    if given.exists() {
        return given;
    }
    let shipped = scenarios_dir().join(format!("{arg}.toml"));
    if shipped.exists() { shipped } else { given }
}

fn run(
    scenario: &str,
    trials: Option<u32>,
    seed: Option<u64>,
    out: &Path,
    profile: Option<&str>,
    sequential: bool,
) -> Result<(), Failure> {
    let mut s = Scenario::load(resolve_scenario(scenario))?;
    if let Some(t) = trials {
        s.trials = t;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate()?;
    let preset = match profile {
        Some(p) => ProfilePreset::load(p)?,
        None => s.preset()?,
    };
    let exec = if sequential { Execution::Sequential } else { Execution::default() };
    let report = run_scenario_with(&s, &preset, exec)?;
    report.write_dir(out)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    let errors: Vec<String> =
        report.trials.iter().flat_map(|t| t.errors.iter().map(move |e| format!("trial {}: {e}", t.trial))).collect();
    if !errors.is_empty() {
        return Err(Failure { code: RUNTIME, message: errors.join("\n") });
    }
    Ok(())
}

fn report(input: &Path, format: Format) -> Result<(), Failure> {
    let r = RunReport::read_dir(input)?;
    let reports = std::slice::from_ref(&r);
    let text = match format {
        Format::Csv => render_csv(reports),
        Format::Table => render_table(reports),
        Format::Curves => render_curves(reports),
    };
    print!("{text}");
    Ok(())
}

fn presets() -> Result<(), Failure> {
    println!("profiles:");
    for p in ProfilePreset::builtins() {
        println!("  {:<10} {}", p.name, p.description);
    }
    println!("scenarios:");
    let mut names: Vec<String> = std::fs::read_dir(scenarios_dir())
        .map(|d| {
            d.filter_map(|e| e.ok()?.path().file_stem()?.to_str().map(str::to_string)).collect()
        })
        .unwrap_or_default();
    names.sort();
    for n in names {
        println!("  {n}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, trials, seed, out, profile, sequential } => {
            run(scenario, *trials, *seed, out, profile.as_deref(), *sequential)
        }
        Command::Report { input, format } => report(input, *format),
        Command::Presets { command: PresetsCommand::List } => presets(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
