//! Availability and scaling measurements extracted from a trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::{SimTime, Trace};
use crate::error::{BudgetError, MetricsError};
use crate::events::{Event, FaultId, FaultKind, ScaleId};

pub const SECONDS_PER_YEAR: f64 = 365.25 * 24.0 * 3600.0;

/// Serializes non-finite seconds as the string `"inf"` so reports survive JSON.
pub(crate) mod seconds {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("not a duration: {t}"))),
        }
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Option::<Repr>::deserialize(d)? {
                None => Ok(None),
                Some(Repr::Num(v)) => Ok(Some(v)),
                Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
                Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("not a duration: {t}"))),
            }
        }
    }
}

/// Reaction, repair, recovery and outage for one serving pod hit by one fault.
/// Repair and recovery are measured from the moment the pod was marked not ready.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub event_id: String,
    pub fault: FaultId,
    pub fault_kind: FaultKind,
    pub pod: String,
    pub detected_at: SimTime,
    #[serde(with = "seconds")]
    pub reaction_s: f64,
    #[serde(with = "seconds")]
    pub repair_s: f64,
    #[serde(with = "seconds")]
    pub recovery_s: f64,
    #[serde(with = "seconds")]
    pub outage_s: f64,
    pub clients: usize,
    pub state_lost: bool,
    pub protection_lost: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub request_id: ScaleId,
    pub from: u32,
    pub to: u32,
    #[serde(with = "seconds")]
    pub scaling_time_s: f64,
    #[serde(default, with = "seconds::opt", skip_serializing_if = "Option::is_none")]
    pub ha_assignment_time_s: Option<f64>,
    pub protection_lost: usize,
}

impl ScalingRecord {
    pub fn event_kind(&self) -> &'static str {
        match self.to.cmp(&self.from) {
            std::cmp::Ordering::Greater => "scale_out",
            std::cmp::Ordering::Less => "scale_in",
            std::cmp::Ordering::Equal => "scale_noop",
        }
    }
}

pub fn fault_kind_name(kind: FaultKind) -> &'static str {
    match kind {
        FaultKind::ContainerFailure => "container_failure",
        FaultKind::NodeShutdown => "node_shutdown",
        FaultKind::NodeReboot => "node_reboot",
    }
}

fn after(trace: &Trace<Event>, t: SimTime) -> impl Iterator<Item = (SimTime, &Event)> {
    trace.iter().filter(move |e| e.time >= t).map(|e| (e.time, &e.event))
}

/// One record per serving pod whose clients were interrupted by `fault`.
/// Missing repair or resume entries yield an unbounded (`inf`) duration.
pub fn extract_availability_metrics(trace: &Trace<Event>, fault: FaultId) -> Result<Vec<MetricsRecord>, MetricsError> {
    let (injected_at, fault_kind) = trace
        .iter()
        .find_map(|e| match &e.event {
            Event::FaultInjected { fault: f, fault_kind, .. } if *f == fault => Some((e.time, *fault_kind)),
            _ => None,
        })
        .ok_or(MetricsError::MissingFault(fault))?;

    let mut clients_by_pod: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in trace.iter() {
        if let Event::SessionInterrupted { client, pod, fault: Some(f) } = &e.event {
            if *f == fault {
                clients_by_pod.entry(pod).or_default().insert(client);
            }
        }
    }

    let mut out = Vec::new();
    for (pod, clients) in clients_by_pod {
        let detected = trace.iter().find_map(|e| match &e.event {
            Event::PodNotReady { pod: p, fault: Some(f) } if p == pod && *f == fault => Some(e.time),
            _ => None,
        });
        let Some(detected) = detected else { continue };
        let replacements: BTreeSet<&str> = trace
            .iter()
            .filter_map(|e| match &e.event {
                Event::PodCreated { pod: p, fault: Some(f), replaces: Some(r), .. } if *f == fault && r == pod => {
                    Some(p.as_str())
                }
                _ => None,
            })
            .collect();
        let repaired = after(trace, detected).find_map(|(t, ev)| match ev {
            Event::PodReady { pod: p, fault: Some(f), .. }
                if *f == fault && (p == pod || replacements.contains(p.as_str())) =>
            {
                Some(t)
            }
            _ => None,
        });
        let mut resumed_at = Some(detected);
        let mut state_lost = false;
        for client in &clients {
            let r = after(trace, detected).find_map(|(t, ev)| match ev {
                Event::ServiceResumed { client: c, fault: Some(f), state_lost, .. } if c == client && *f == fault => {
                    Some((t, *state_lost))
                }
                _ => None,
            });
            match r {
                Some((t, lost)) => {
                    state_lost |= lost;
                    resumed_at = resumed_at.map(|m| m.max(t));
                }
                None => resumed_at = None,
            }
        }
        let promoted: Vec<&str> = after(trace, injected_at)
            .filter_map(|(_, ev)| match ev {
                Event::Promotion { failed, promoted } if failed == pod => Some(promoted.as_str()),
                _ => None,
            })
            .collect();
        let protection_lost = after(trace, injected_at).any(|(_, ev)| {
            matches!(ev, Event::ProtectionLost { pod: p, scale: None, .. } if p == pod || promoted.contains(&p.as_str()))
        });
        let reaction_s = detected.since(injected_at);
        let recovery_s = resumed_at.map_or(f64::INFINITY, |t| t.since(detected));
        out.push(MetricsRecord {
            event_id: format!("fault{fault}:{pod}"),
            fault,
            fault_kind,
            pod: pod.to_string(),
            detected_at: detected,
            reaction_s,
            repair_s: repaired.map_or(f64::INFINITY, |t| t.since(detected)),
            recovery_s,
            outage_s: reaction_s + recovery_s,
            clients: clients.len(),
            state_lost,
            protection_lost,
        });
    }
    Ok(out)
}

pub fn extract_scaling_metrics(trace: &Trace<Event>, scale: ScaleId) -> Result<ScalingRecord, MetricsError> {
    let (requested, from, to) = trace
        .iter()
        .find_map(|e| match &e.event {
            Event::ScaleRequested { scale: s, from, to, .. } if *s == scale => Some((e.time, *from, *to)),
            _ => None,
        })
        .ok_or(MetricsError::MissingScaleRequest(scale))?;
    let complete = trace.iter().find_map(|e| match &e.event {
        Event::ScaleComplete { scale: s, added, .. } if *s == scale => Some((e.time, added.clone())),
        _ => None,
    });
    let last_change = after(trace, requested)
        .filter_map(|(t, ev)| match ev {
            Event::PodReady { scale: Some(s), .. } | Event::PodDeleted { scale: Some(s), .. } if *s == scale => Some(t),
            _ => None,
        })
        .last();
    let scaling_time_s = match (&complete, last_change) {
        (None, _) => f64::INFINITY,
        (Some(_), Some(t)) => t.since(requested),
        (Some(_), None) => 0.0,
    };
    let assigned: BTreeMap<&str, SimTime> = after(trace, requested).fold(BTreeMap::new(), |mut m, (t, ev)| {
        if let Event::HaStateAssigned { pod, .. } = ev {
            m.entry(pod.as_str()).or_insert(t);
        }
        m
    });
    let ha_managed = trace.iter().any(|e| matches!(e.event, Event::HaStateAssigned { .. }));
    let ha_assignment_time_s = match &complete {
        Some((_, added)) if ha_managed && !added.is_empty() => {
            let times: Option<Vec<SimTime>> = added.iter().map(|p| assigned.get(p.as_str()).copied()).collect();
            Some(times.map_or(f64::INFINITY, |ts| ts.into_iter().max().expect("non-empty").since(requested)))
        }
        _ => None,
    };
    let protection_lost = trace
        .iter()
        .filter(|e| matches!(&e.event, Event::ProtectionLost { scale: Some(s), .. } if *s == scale))
        .count();
    Ok(ScalingRecord { request_id: scale, from, to, scaling_time_s, ha_assignment_time_s, protection_lost })
}

/// How many failures of the given outage fit into a year's downtime budget.
pub fn max_tolerable_failures(outage_per_failure_s: f64, availability_target: f64) -> Result<u64, BudgetError> {
    if !(outage_per_failure_s.is_finite() && outage_per_failure_s > 0.0) {
        return Err(BudgetError::NonPositiveOutage(outage_per_failure_s));
    }
    if !(availability_target > 0.0 && availability_target <= 1.0) {
        return Err(BudgetError::InvalidTarget(availability_target));
    }
    let budget = (1.0 - availability_target) * SECONDS_PER_YEAR;
    Ok((budget / outage_per_failure_s).floor() as u64)
}
