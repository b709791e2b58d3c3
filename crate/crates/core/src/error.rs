use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("delay must be a non-negative finite number of seconds, got {0}")]
    NegativeDelay(f64),
    #[error("time must be a non-negative finite number of seconds, got {0}")]
    InvalidTime(f64),
    #[error("cannot schedule at {at}s, clock is already at {now}s")]
    InPast { at: f64, now: f64 },
    #[error("engine has finished, no more actions may be scheduled")]
    Finished,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("controller {0} already exists")]
    DuplicateController(String),
    #[error("unknown controller {0}")]
    UnknownController(String),
    #[error("unknown pod {0}")]
    UnknownPod(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("service {0} already exists")]
    DuplicateService(String),
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("service {0} has no endpoints")]
    NoEndpoint(String),
    #[error("no node is up to place pod {0}")]
    NoNodeAvailable(String),
    #[error("invalid scale target {0}")]
    InvalidScaleTarget(i64),
    #[error("invalid reboot duration {0}")]
    InvalidRebootDuration(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("pod name must not be empty")]
    EmptyPodName,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("fault {0} not found in trace")]
    MissingFault(u64),
    #[error("scale request {0} not found in trace")]
    MissingScaleRequest(u64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("outage per failure must be positive, got {0}")]
    NonPositiveOutage(f64),
    #[error("availability target must lie in (0, 1), got {0}")]
    InvalidTarget(f64),
}

/// Problems with a scenario or profile document, detected before running.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown profile {0}")]
    UnknownProfile(String),
}

/// Failures while running or reporting (as opposed to validating).
#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("cannot read report {path}: {message}")]
    Input { path: String, message: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}
