//! Line-delimited JSON traces: one `{"t", "kind", "payload"}` object per line.
//!
//! The same format carries simulator observations, detector output, tracker
//! messages and passenger commands, so a simulated run can be replayed
//! through the detector and compared against its own ground truth.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{DetectError, RideDetector, RideEvent, RideEventKind, WifiScan};
use crate::geo::GeoPoint;
use crate::network::{Seconds, TransitNetwork, VehicleId};
use crate::planner::TripPlan;
use crate::sim::{BusProgress, GroundTruth, PassengerCommand};
use crate::tracker::{NavigationMessage, ReplanChoice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// What was attempted, e.g. `board` or `replan`.
    pub command: String,
    pub code: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum TraceEvent {
    Scan(WifiScan),
    Gps(GeoPoint),
    BusProgress(BusProgress),
    RideEvent(RideEvent),
    Message(NavigationMessage),
    GroundTruth(GroundTruth),
    Command(PassengerCommand),
    ReplanResponse(ReplanChoice),
    Rejection(Rejection),
    Plan(TripPlan),
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Scan(_) => "scan",
            TraceEvent::Gps(_) => "gps",
            TraceEvent::BusProgress(_) => "bus_progress",
            TraceEvent::RideEvent(_) => "ride_event",
            TraceEvent::Message(_) => "message",
            TraceEvent::GroundTruth(_) => "ground_truth",
            TraceEvent::Command(_) => "command",
            TraceEvent::ReplanResponse(_) => "replan_response",
            TraceEvent::Rejection(_) => "rejection",
            TraceEvent::Plan(_) => "plan",
        }
    }

    /// Raw sensor and feed input, as opposed to what the engine and the
    /// passenger did with it.
    pub fn is_observation(&self) -> bool {
        matches!(self, TraceEvent::Scan(_) | TraceEvent::Gps(_) | TraceEvent::BusProgress(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Seconds,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl TraceRecord {
    pub fn new(t: Seconds, event: TraceEvent) -> Self {
        Self { t, event }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: time {t} is earlier than {previous}")]
    OutOfOrder { line: usize, t: Seconds, previous: Seconds },
    #[error("line {line}: {source}")]
    Detect { line: usize, source: DetectError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    out.flush()
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Reads a trace, checking that times never go backwards. Blank lines are
/// skipped. Line numbers in errors start at 1.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<(usize, TraceRecord)>, TraceError> {
    let mut out = Vec::new();
    let mut previous: Option<Seconds> = None;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| TraceError::Malformed { line: line_no, message: e.to_string() })?;
        if let Some(p) = previous {
            if record.t < p {
                return Err(TraceError::OutOfOrder { line: line_no, t: record.t, previous: p });
            }
        }
        previous = Some(record.t);
        out.push((line_no, record));
    }
    Ok(out)
}

/// One stretch on one bus, from boarding to alighting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub vehicle_id: VehicleId,
    pub board: Seconds,
    pub alight: Option<Seconds>,
}

fn episodes<'a>(events: impl Iterator<Item = (Seconds, bool, &'a VehicleId)>) -> Vec<Episode> {
    let mut out: Vec<Episode> = Vec::new();
    for (t, boarded, vehicle) in events {
        if boarded {
            out.push(Episode { vehicle_id: vehicle.clone(), board: t, alight: None });
        } else if let Some(open) = out.iter_mut().rev().find(|e| e.alight.is_none() && &e.vehicle_id == vehicle) {
            open.alight = Some(t);
        }
    }
    out
}

pub fn detected_episodes(events: &[RideEvent]) -> Vec<Episode> {
    episodes(events.iter().map(|e| (e.timestamp, e.kind == RideEventKind::Boarded, &e.vehicle_id)))
}

pub fn true_episodes(truth: &[(Seconds, GroundTruth)]) -> Vec<Episode> {
    episodes(truth.iter().map(|(t, g)| match g {
        GroundTruth::Boarded { vehicle_id, .. } => (*t, true, vehicle_id),
        GroundTruth::Alighted { vehicle_id, .. } => (*t, false, vehicle_id),
    }))
}

/// A detected episode paired with the true one it overlaps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMatch {
    pub vehicle_id: VehicleId,
    /// Detected minus true boarding time.
    pub board_error: i64,
    /// Detected minus true alighting time, when both exist.
    pub alight_error: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub events: Vec<RideEvent>,
    pub has_ground_truth: bool,
    pub matches: Vec<EpisodeMatch>,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// How far outside a true episode a detected one may start and still count.
pub const MATCH_SLACK_S: Seconds = 60;

/// Pairs each true episode with the first unclaimed detected episode on the
/// same vehicle whose span overlaps it (with [`MATCH_SLACK_S`] of slack).
pub fn match_episodes(detected: &[Episode], truth: &[Episode]) -> (Vec<EpisodeMatch>, usize, usize) {
    let mut claimed = BTreeSet::new();
    let mut matches = Vec::new();
    let mut misses = 0;
    for te in truth {
        let t_end = te.alight.unwrap_or(Seconds::MAX);
        let found = detected.iter().enumerate().find(|(i, de)| {
            !claimed.contains(i)
                && de.vehicle_id == te.vehicle_id
                && de.board <= t_end.saturating_add(MATCH_SLACK_S)
                && de.alight.unwrap_or(Seconds::MAX).saturating_add(MATCH_SLACK_S) >= te.board
        });
        match found {
            Some((i, de)) => {
                claimed.insert(i);
                matches.push(EpisodeMatch {
                    vehicle_id: te.vehicle_id.clone(),
                    board_error: i64::from(de.board) - i64::from(te.board),
                    alight_error: match (de.alight, te.alight) {
                        (Some(d), Some(t)) => Some(i64::from(d) - i64::from(t)),
                        _ => None,
                    },
                });
            }
            None => misses += 1,
        }
    }
    (matches, detected.len() - claimed.len(), misses)
}

/// Runs a fresh detector over the trace's scans and scores it against any
/// ground-truth records.
pub fn replay(
    records: &[(usize, TraceRecord)],
    network: &TransitNetwork,
    detector: RideDetector,
) -> Result<DetectionReport, TraceError> {
    let mut detector = detector;
    let mut events = Vec::new();
    let mut truth = Vec::new();
    for (line, r) in records {
        match &r.event {
            TraceEvent::Scan(scan) => {
                let out = detector
                    .step(scan, network)
                    .map_err(|source| TraceError::Detect { line: *line, source })?;
                events.extend(out);
            }
            TraceEvent::GroundTruth(g) => truth.push((r.t, g.clone())),
            _ => {}
        }
    }
    let has_ground_truth = !truth.is_empty();
    let (matches, false_positives, false_negatives) =
        match_episodes(&detected_episodes(&events), &true_episodes(&truth));
    Ok(DetectionReport { events, has_ground_truth, matches, false_positives, false_negatives })
}

/// The ride events recorded in a trace, in order.
pub fn recorded_ride_events(records: &[TraceRecord]) -> Vec<RideEvent> {
    records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::RideEvent(e) => Some(e.clone()),
            _ => None,
        })
        .collect()
}
