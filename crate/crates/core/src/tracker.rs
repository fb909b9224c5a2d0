//! Trip tracking and micro-navigation guidance.
//!
//! The tracker follows one [`TripPlan`] segment by segment. Walks are checked
//! against GPS fixes (distance to the walk polyline, arrival radius at the
//! end), bus rides against ride events from the detector and the vehicles'
//! next-stop feed. Three kinds of deviation are recognised: boarding a bus of
//! another line or direction, passing or getting off before the planned exit
//! stop, and straying from a walk. Each deviation raises one re-plan prompt
//! that the passenger may confirm, delay or refuse.
//!
//! Every handler returns the messages it produced; the same stream of inputs
//! always yields the same messages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{RideEvent, RideEventKind};
use crate::geo::{haversine_distance, GeoPoint};
use crate::network::{Direction, LineId, QueryError, Seconds, StopId, TransitNetwork, VehicleId};
use crate::planner::{replan, BusRideSegment, PlannerConfig, Segment, TripPlan};

mod templates;

pub use templates::{clock, Templates, DEFAULT_TEMPLATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripActivity {
    StartingJourney,
    WalkingToStop,
    ArrivingAtStop,
    BoardingBus,
    RidingBus,
    DepartingBus,
    WalkingToDestination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Guidance,
    Deviation,
    LeaveSoon,
    ReplanPrompt,
    Replan,
    BackOnTrack,
    Arrived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    WrongBus,
    MissedStop,
    OffPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviationDetail {
    WrongBus { line_id: LineId, direction: Direction, vehicle_id: VehicleId },
    /// `observed_stop` is set when the passenger got off somewhere else;
    /// it is absent when the bus was seen heading past the exit.
    MissedStop {
        exit_stop: StopId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observed_stop: Option<StopId>,
    },
    OffPath { distance_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub kind: DeviationKind,
    pub detected_at: Seconds,
    pub detail: DeviationDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "deviation", rename_all = "snake_case")]
pub enum TripStatus {
    OnTrack,
    Deviated(Deviation),
    Arrived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "choice", content = "seconds", rename_all = "snake_case")]
pub enum ReplanChoice {
    Confirm,
    Delay(Seconds),
    Refuse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplanPrompt {
    pub raised_at: Seconds,
    /// Set after a Delay; the prompt is shown again at this time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delayed_until: Option<Seconds>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepartureInfo {
    pub line_id: LineId,
    pub direction: Direction,
    pub headsign: String,
    pub board_stop: StopId,
    pub exit_stop: StopId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departure: Option<Seconds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_id: Option<VehicleId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessagePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_remaining_m: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_departure: Option<DepartureInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stops_left: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_stop: Option<StopId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<Deviation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival: Option<Seconds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationMessage {
    pub activity: TripActivity,
    pub severity: Severity,
    pub kind: MessageKind,
    pub text: String,
    pub payload: MessagePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Walk fixes farther than this from the path count as off path.
    pub deviation_bound_m: f64,
    pub arrival_radius_m: f64,
    /// Consecutive off-path fixes needed before deviating.
    pub off_path_fixes: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { deviation_bound_m: 50.0, arrival_radius_m: 25.0, off_path_fixes: 2 }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrackError {
    #[error("ride event for unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("no re-plan prompt is pending")]
    NoPendingPrompt,
    #[error(transparent)]
    Query(#[from] QueryError),
}

/// The bus the detector says the passenger is on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedRide {
    pub vehicle_id: VehicleId,
    pub line_id: LineId,
    pub direction: Direction,
    /// Whether this is the bus ride of the current plan segment.
    pub on_plan: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    config: TrackerConfig,
    templates: Templates,
    plan: TripPlan,
    segment_index: usize,
    activity: TripActivity,
    status: TripStatus,
    pending_replan: Option<ReplanPrompt>,
    ride: Option<ObservedRide>,
    stops_left: Option<u32>,
    next_stop: Option<StopId>,
    leave_soon_sent: bool,
    off_path_count: u32,
    last_gps: Option<(GeoPoint, Seconds)>,
    replans: u32,
    guidance: Option<NavigationMessage>,
    deviation_message: Option<NavigationMessage>,
}

fn headsign(network: &TransitNetwork, line: &LineId, direction: Direction) -> String {
    network
        .pattern(line, direction)
        .and_then(|p| p.stops.last())
        .and_then(|s| network.stop(s))
        .map(|s| s.name.clone())
        .unwrap_or_else(|| "?".to_string())
}

fn stop_name(network: &TransitNetwork, stop: &StopId) -> String {
    network.stop(stop).map(|s| s.name.clone()).unwrap_or_else(|| stop.to_string())
}

impl Tracker {
    /// Starts following `plan`. An empty plan is arrived at once.
    pub fn start(
        plan: TripPlan,
        network: &TransitNetwork,
        now: Seconds,
        config: TrackerConfig,
        templates: Templates,
    ) -> (Tracker, Vec<NavigationMessage>) {
        let mut tracker = Tracker {
            config,
            templates,
            plan,
            segment_index: 0,
            activity: TripActivity::StartingJourney,
            status: TripStatus::OnTrack,
            pending_replan: None,
            ride: None,
            stops_left: None,
            next_stop: None,
            leave_soon_sent: false,
            off_path_count: 0,
            last_gps: None,
            replans: 0,
            guidance: None,
            deviation_message: None,
        };
        let messages = tracker.begin(network, now);
        (tracker, messages)
    }

    fn begin(&mut self, network: &TransitNetwork, now: Seconds) -> Vec<NavigationMessage> {
        if self.plan.segments.is_empty() {
            return self.arrive();
        }
        let arrival = self.plan.arrival;
        let mut out = vec![self.guide(
            TripActivity::StartingJourney,
            "starting",
            &[("arrival", clock(arrival))],
            MessagePayload { arrival: Some(arrival), ..Default::default() },
        )];
        if let Segment::Bus(_) = &self.plan.segments[0] {
            out.extend(self.enter_segment(network, now));
        }
        out
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn plan(&self) -> &TripPlan {
        &self.plan
    }

    pub fn segment_index(&self) -> usize {
        self.segment_index
    }

    pub fn current_segment(&self) -> Option<&Segment> {
        self.plan.segments.get(self.segment_index)
    }

    pub fn activity(&self) -> TripActivity {
        self.activity
    }

    pub fn status(&self) -> &TripStatus {
        &self.status
    }

    pub fn deviation(&self) -> Option<&Deviation> {
        match &self.status {
            TripStatus::Deviated(d) => Some(d),
            _ => None,
        }
    }

    pub fn pending_replan(&self) -> Option<&ReplanPrompt> {
        self.pending_replan.as_ref()
    }

    pub fn ride(&self) -> Option<&ObservedRide> {
        self.ride.as_ref()
    }

    pub fn stops_left(&self) -> Option<u32> {
        self.stops_left
    }

    pub fn next_stop(&self) -> Option<&StopId> {
        self.next_stop.as_ref()
    }

    pub fn last_gps(&self) -> Option<(GeoPoint, Seconds)> {
        self.last_gps
    }

    /// Number of confirmed re-plans so far.
    pub fn replans(&self) -> u32 {
        self.replans
    }

    pub fn is_arrived(&self) -> bool {
        self.status == TripStatus::Arrived
    }

    // -----------------------------------------------------------------------
    // Message helpers
    // -----------------------------------------------------------------------

    fn message(
        &self,
        activity: TripActivity,
        severity: Severity,
        kind: MessageKind,
        key: &str,
        vars: &[(&str, String)],
        payload: MessagePayload,
    ) -> NavigationMessage {
        NavigationMessage { activity, severity, kind, text: self.templates.render(key, vars), payload }
    }

    /// Info message for the current activity; remembered for `current_guidance`.
    fn guide(
        &mut self,
        activity: TripActivity,
        key: &str,
        vars: &[(&str, String)],
        payload: MessagePayload,
    ) -> NavigationMessage {
        self.activity = activity;
        let m = self.message(activity, Severity::Info, MessageKind::Guidance, key, vars, payload);
        self.guidance = Some(m.clone());
        m
    }

    fn prompt_message(&self) -> NavigationMessage {
        self.message(
            self.activity,
            Severity::Info,
            MessageKind::ReplanPrompt,
            "replan_prompt",
            &[],
            MessagePayload {
                choices: vec!["confirm".into(), "delay".into(), "refuse".into()],
                deviation: self.deviation().cloned(),
                ..Default::default()
            },
        )
    }

    /// Reports a deviation and raises its prompt. A walking deviation gives
    /// way to a bus one; otherwise an active deviation blocks new ones.
    fn raise(
        &mut self,
        deviation: Deviation,
        key: &str,
        vars: &[(&str, String)],
    ) -> Vec<NavigationMessage> {
        if let Some(active) = self.deviation() {
            if !(active.kind == DeviationKind::OffPath && deviation.kind != DeviationKind::OffPath) {
                return Vec::new();
            }
        }
        let alert = self.message(
            self.activity,
            Severity::Alert,
            MessageKind::Deviation,
            key,
            vars,
            MessagePayload { deviation: Some(deviation.clone()), ..Default::default() },
        );
        self.status = TripStatus::Deviated(deviation.clone());
        self.pending_replan = Some(ReplanPrompt { raised_at: deviation.detected_at, delayed_until: None });
        self.deviation_message = Some(alert.clone());
        vec![alert, self.prompt_message()]
    }

    fn clear_deviation(&mut self) -> Vec<NavigationMessage> {
        if self.deviation().is_none() {
            return Vec::new();
        }
        self.status = TripStatus::OnTrack;
        self.pending_replan = None;
        self.deviation_message = None;
        vec![self.message(
            self.activity,
            Severity::Info,
            MessageKind::BackOnTrack,
            "back_on_track",
            &[],
            MessagePayload::default(),
        )]
    }

    fn arrive(&mut self) -> Vec<NavigationMessage> {
        self.status = TripStatus::Arrived;
        self.pending_replan = None;
        self.deviation_message = None;
        self.ride = None;
        self.stops_left = None;
        self.next_stop = None;
        let m = self.message(
            self.activity,
            Severity::Info,
            MessageKind::Arrived,
            "arrived",
            &[],
            MessagePayload::default(),
        );
        self.guidance = Some(m.clone());
        vec![m]
    }

    fn walk_message(&mut self, network: &TransitNetwork, remaining: f64) -> NavigationMessage {
        let last = self.segment_index + 1 == self.plan.segments.len();
        let distance = remaining.round() as u32;
        let payload = MessagePayload { distance_remaining_m: Some(distance), ..Default::default() };
        if last {
            self.guide(
                TripActivity::WalkingToDestination,
                "walk_to_destination",
                &[("distance", distance.to_string())],
                payload,
            )
        } else {
            let stop = match self.plan.segments.get(self.segment_index + 1) {
                Some(Segment::Bus(b)) => b.board_stop.clone(),
                _ => StopId::new("?"),
            };
            self.guide(
                TripActivity::WalkingToStop,
                "walk_to_stop",
                &[("stop", stop_name(network, &stop)), ("distance", distance.to_string())],
                MessagePayload { stop: Some(stop), ..payload },
            )
        }
    }

    fn riding_message(&mut self, network: &TransitNetwork, exit: &StopId) -> NavigationMessage {
        let stops_left = self.stops_left.unwrap_or(0);
        let next = self.next_stop.clone().unwrap_or_else(|| exit.clone());
        let payload = MessagePayload {
            stops_left: Some(stops_left),
            next_stop: Some(next.clone()),
            stop: Some(exit.clone()),
            ..Default::default()
        };
        if stops_left == 1 && !self.leave_soon_sent {
            self.leave_soon_sent = true;
            self.activity = TripActivity::RidingBus;
            let m = self.message(
                TripActivity::RidingBus,
                Severity::Alert,
                MessageKind::LeaveSoon,
                "leave_soon",
                &[("exit", stop_name(network, exit))],
                payload,
            );
            self.guidance = Some(m.clone());
            m
        } else {
            self.guide(
                TripActivity::RidingBus,
                "riding",
                &[("stops_left", stops_left.to_string()), ("next_stop", stop_name(network, &next))],
                payload,
            )
        }
    }

    // -----------------------------------------------------------------------
    // Segment progression
    // -----------------------------------------------------------------------

    /// Sets up the segment at `segment_index` (or arrival past the end).
    fn enter_segment(&mut self, network: &TransitNetwork, now: Seconds) -> Vec<NavigationMessage> {
        self.off_path_count = 0;
        self.leave_soon_sent = false;
        self.stops_left = None;
        self.next_stop = None;
        match self.plan.segments.get(self.segment_index).cloned() {
            None => self.arrive(),
            Some(Segment::Walk(w)) => {
                let from = self.last_gps.map(|(p, _)| p).unwrap_or(w.start);
                vec![self.walk_message(network, haversine_distance(&from, &w.end))]
            }
            Some(Segment::Bus(b)) => vec![self.arriving_message(network, &b, now)],
        }
    }

    fn arriving_message(
        &mut self,
        network: &TransitNetwork,
        bus: &BusRideSegment,
        now: Seconds,
    ) -> NavigationMessage {
        let next = network
            .next_departures(&bus.board_stop, now, usize::MAX)
            .unwrap_or_default()
            .into_iter()
            .find(|d| d.line_id == bus.line_id && d.direction == bus.direction);
        let info = DepartureInfo {
            line_id: bus.line_id.clone(),
            direction: bus.direction,
            headsign: headsign(network, &bus.line_id, bus.direction),
            board_stop: bus.board_stop.clone(),
            exit_stop: bus.alight_stop.clone(),
            departure: next.as_ref().map(|d| d.departure),
            vehicle_id: next.map(|d| d.vehicle_id),
        };
        let mut vars = vec![
            ("line", bus.line_id.to_string()),
            ("headsign", info.headsign.clone()),
            ("exit", stop_name(network, &bus.alight_stop)),
            ("stop", stop_name(network, &bus.board_stop)),
        ];
        let key = match info.departure {
            Some(t) => {
                vars.push(("departure", clock(t)));
                "arriving"
            }
            None => "arriving_unscheduled",
        };
        self.guide(
            TripActivity::ArrivingAtStop,
            key,
            &vars,
            MessagePayload { next_departure: Some(info), ..Default::default() },
        )
    }

    fn advance(&mut self, network: &TransitNetwork, now: Seconds) -> Vec<NavigationMessage> {
        self.segment_index += 1;
        self.enter_segment(network, now)
    }

    // -----------------------------------------------------------------------
    // Inputs
    // -----------------------------------------------------------------------

    /// A GPS fix. Walk segments are checked for straying and arrival; during
    /// bus segments the fix only updates the known position.
    pub fn on_gps(&mut self, fix: GeoPoint, network: &TransitNetwork, now: Seconds) -> Vec<NavigationMessage> {
        self.last_gps = Some((fix, now));
        if self.is_arrived() || self.ride.is_some() {
            return Vec::new();
        }
        let Some(Segment::Walk(walk)) = self.current_segment().cloned() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let off = walk.path.distance_to(&fix);
        if off > self.config.deviation_bound_m {
            self.off_path_count += 1;
            if self.off_path_count >= self.config.off_path_fixes {
                let distance_m = (off * 10.0).round() / 10.0;
                out.extend(self.raise(
                    Deviation {
                        kind: DeviationKind::OffPath,
                        detected_at: now,
                        detail: DeviationDetail::OffPath { distance_m },
                    },
                    "off_path",
                    &[("distance", format!("{}", off.round() as u32))],
                ));
            }
        } else {
            self.off_path_count = 0;
            if self.deviation().is_some_and(|d| d.kind == DeviationKind::OffPath) {
                out.extend(self.clear_deviation());
            }
        }
        let remaining = haversine_distance(&fix, &walk.end);
        if remaining <= self.config.arrival_radius_m {
            if self.deviation().is_some_and(|d| d.kind == DeviationKind::OffPath) {
                out.extend(self.clear_deviation());
            }
            out.extend(self.advance(network, now));
        } else {
            out.push(self.walk_message(network, remaining));
        }
        out
    }

    pub fn on_ride_event(
        &mut self,
        event: &RideEvent,
        network: &TransitNetwork,
        now: Seconds,
    ) -> Result<Vec<NavigationMessage>, TrackError> {
        if network.vehicle_info(&event.vehicle_id).is_none() {
            return Err(TrackError::UnknownVehicle(event.vehicle_id.clone()));
        }
        if self.is_arrived() {
            return Ok(Vec::new());
        }
        Ok(match event.kind {
            RideEventKind::Boarded => self.on_boarded(event, network, now),
            RideEventKind::Alighted => self.on_alighted(event, network, now),
        })
    }

    /// The bus ride the passenger should be taking next, and whether a walk
    /// has to be completed first to reach it.
    fn planned_ride(&self) -> Option<(BusRideSegment, bool)> {
        match self.current_segment()? {
            Segment::Bus(b) => Some((b.clone(), false)),
            Segment::Walk(_) => match self.plan.segments.get(self.segment_index + 1)? {
                Segment::Bus(b) => Some((b.clone(), true)),
                Segment::Walk(_) => None,
            },
        }
    }

    fn on_boarded(&mut self, event: &RideEvent, network: &TransitNetwork, now: Seconds) -> Vec<NavigationMessage> {
        if self.ride.is_some() {
            return Vec::new();
        }
        let planned = self.planned_ride();
        let matches = planned
            .as_ref()
            .is_some_and(|(b, _)| b.line_id == event.line_id && b.direction == event.direction);
        let observed_headsign = headsign(network, &event.line_id, event.direction);
        let mut out = Vec::new();

        if let (true, Some((bus, walk_first))) = (matches, planned) {
            if walk_first {
                self.segment_index += 1;
            }
            self.ride = Some(ObservedRide {
                vehicle_id: event.vehicle_id.clone(),
                line_id: event.line_id.clone(),
                direction: event.direction,
                on_plan: true,
            });
            out.extend(self.clear_deviation());
            self.leave_soon_sent = false;
            out.push(self.guide(
                TripActivity::BoardingBus,
                "boarding_ok",
                &[("line", event.line_id.to_string()), ("headsign", observed_headsign)],
                MessagePayload::default(),
            ));
            let pattern = network.pattern(&bus.line_id, bus.direction).expect("plan uses known lines");
            let board = pattern.position(&bus.board_stop).expect("board stop on pattern");
            let exit = pattern.position(&bus.alight_stop).expect("exit stop on pattern");
            self.stops_left = Some((exit - board) as u32);
            self.next_stop = pattern.stops.get(board + 1).cloned();
            out.push(self.riding_message(network, &bus.alight_stop));
            return out;
        }

        self.ride = Some(ObservedRide {
            vehicle_id: event.vehicle_id.clone(),
            line_id: event.line_id.clone(),
            direction: event.direction,
            on_plan: false,
        });
        self.activity = TripActivity::BoardingBus;
        let deviation = Deviation {
            kind: DeviationKind::WrongBus,
            detected_at: now,
            detail: DeviationDetail::WrongBus {
                line_id: event.line_id.clone(),
                direction: event.direction,
                vehicle_id: event.vehicle_id.clone(),
            },
        };
        let mut vars = vec![("line", event.line_id.to_string()), ("headsign", observed_headsign)];
        let key = match self.planned_ride() {
            Some((b, _)) => {
                vars.push(("planned_line", b.line_id.to_string()));
                vars.push(("planned_headsign", headsign(network, &b.line_id, b.direction)));
                "wrong_bus"
            }
            None => "unplanned_bus",
        };
        out.extend(self.raise(deviation, key, &vars));
        self.activity = TripActivity::RidingBus;
        out
    }

    fn on_alighted(&mut self, event: &RideEvent, network: &TransitNetwork, now: Seconds) -> Vec<NavigationMessage> {
        let Some(ride) = self.ride.clone() else {
            return Vec::new();
        };
        if ride.vehicle_id != event.vehicle_id {
            return Vec::new();
        }
        self.ride = None;
        self.stops_left = None;
        self.next_stop = None;

        let bus = match (ride.on_plan, self.current_segment()) {
            (true, Some(Segment::Bus(b))) => b.clone(),
            _ => {
                return vec![self.guide(
                    TripActivity::DepartingBus,
                    "left_bus",
                    &[("line", ride.line_id.to_string())],
                    MessagePayload::default(),
                )];
            }
        };
        let observed = match self.last_gps {
            Some((p, _)) => network.nearest_stop(&p).map(|(s, _)| s.id.clone()),
            None => None,
        }
        .unwrap_or_else(|| bus.alight_stop.clone());

        let mut out = vec![self.guide(
            TripActivity::DepartingBus,
            "departing",
            &[("stop", stop_name(network, &observed))],
            MessagePayload { stop: Some(observed.clone()), ..Default::default() },
        )];
        if observed == bus.alight_stop {
            out.extend(self.advance(network, now));
        } else {
            out.extend(self.raise(
                Deviation {
                    kind: DeviationKind::MissedStop,
                    detected_at: now,
                    detail: DeviationDetail::MissedStop {
                        exit_stop: bus.alight_stop.clone(),
                        observed_stop: Some(observed.clone()),
                    },
                },
                "wrong_stop",
                &[("stop", stop_name(network, &observed)), ("exit", stop_name(network, &bus.alight_stop))],
            ));
        }
        out
    }

    /// Next-stop update for the bus the passenger is riding.
    pub fn on_bus_progress(
        &mut self,
        next_stop: &StopId,
        network: &TransitNetwork,
        now: Seconds,
    ) -> Result<Vec<NavigationMessage>, TrackError> {
        let on_plan = self.ride.as_ref().is_some_and(|r| r.on_plan);
        let Some(Segment::Bus(bus)) = self.current_segment().cloned() else {
            return Ok(Vec::new());
        };
        if !on_plan || self.activity != TripActivity::RidingBus {
            return Ok(Vec::new());
        }
        let pattern = network
            .pattern(&bus.line_id, bus.direction)
            .ok_or_else(|| QueryError::UnknownLine(bus.line_id.clone()))?;
        let index = pattern.position(next_stop).ok_or_else(|| QueryError::StopNotOnPattern {
            stop: next_stop.clone(),
            line: bus.line_id.clone(),
            direction: bus.direction,
        })?;
        let exit = pattern.position(&bus.alight_stop).expect("exit stop on pattern");
        if self.next_stop.as_ref() == Some(next_stop) && self.stops_left.is_some() {
            return Ok(Vec::new());
        }
        self.next_stop = Some(next_stop.clone());
        if index > exit {
            self.stops_left = None;
            return Ok(self.raise(
                Deviation {
                    kind: DeviationKind::MissedStop,
                    detected_at: now,
                    detail: DeviationDetail::MissedStop { exit_stop: bus.alight_stop.clone(), observed_stop: None },
                },
                "missed_stop",
                &[("exit", stop_name(network, &bus.alight_stop))],
            ));
        }
        let between = network.stops_between(&bus.line_id, bus.direction, next_stop, &bus.alight_stop)?;
        self.stops_left = Some(between.len() as u32);
        Ok(vec![self.riding_message(network, &bus.alight_stop)])
    }

    /// Re-raises a delayed prompt once its time has come.
    pub fn poll(&mut self, now: Seconds) -> Vec<NavigationMessage> {
        let due = self
            .pending_replan
            .as_ref()
            .and_then(|p| p.delayed_until)
            .is_some_and(|t| t <= now);
        if !due || self.deviation().is_none() {
            return Vec::new();
        }
        if let Some(p) = self.pending_replan.as_mut() {
            p.delayed_until = None;
        }
        vec![self.prompt_message()]
    }

    pub fn respond_to_replan(
        &mut self,
        choice: ReplanChoice,
        network: &TransitNetwork,
        planner: &PlannerConfig,
        now: Seconds,
    ) -> Result<Vec<NavigationMessage>, TrackError> {
        if self.pending_replan.is_none() {
            return Err(TrackError::NoPendingPrompt);
        }
        let info = |t: &Tracker, key: &str, vars: &[(&str, String)], payload| {
            t.message(t.activity, Severity::Info, MessageKind::Replan, key, vars, payload)
        };
        match choice {
            ReplanChoice::Delay(seconds) => {
                if let Some(p) = self.pending_replan.as_mut() {
                    p.delayed_until = Some(now + seconds);
                }
                Ok(vec![info(self, "replan_delayed", &[("seconds", seconds.to_string())], MessagePayload::default())])
            }
            ReplanChoice::Refuse => {
                self.pending_replan = None;
                Ok(vec![info(self, "replan_refused", &[], MessagePayload::default())])
            }
            ReplanChoice::Confirm => {
                let here = self.last_gps.map(|(p, _)| p).unwrap_or(self.plan.origin);
                match replan(network, here, self.plan.destination, now, planner) {
                    Ok(plan) => {
                        let arrival = plan.arrival;
                        let (fresh, start) = Tracker::start(
                            plan,
                            network,
                            now,
                            self.config.clone(),
                            self.templates.clone(),
                        );
                        let (last_gps, replans) = (self.last_gps, self.replans + 1);
                        // Still on the old bus, if any; its ride no longer belongs to the plan.
                        let ride = self.ride.take().map(|r| ObservedRide { on_plan: false, ..r });
                        *self = fresh;
                        self.last_gps = last_gps;
                        self.replans = replans;
                        self.ride = ride;
                        let mut out = vec![info(
                            self,
                            "replanned",
                            &[("arrival", clock(arrival))],
                            MessagePayload { arrival: Some(arrival), ..Default::default() },
                        )];
                        out.extend(start);
                        Ok(out)
                    }
                    Err(_) => {
                        self.pending_replan = None;
                        Ok(vec![info(self, "no_route", &[], MessagePayload::default())])
                    }
                }
            }
        }
    }

    /// What the guidance screen shows right now: the activity message, then
    /// any active deviation and its prompt. A stale "leave soon" gives way to
    /// the deviation so only one alert is shown.
    pub fn current_guidance(&self) -> Vec<NavigationMessage> {
        let deviated = self.deviation().is_some();
        let mut out: Vec<NavigationMessage> = self
            .guidance
            .iter()
            .filter(|m| !(deviated && m.severity == Severity::Alert))
            .cloned()
            .collect();
        if deviated {
            out.extend(self.deviation_message.iter().cloned());
            if self.pending_replan.as_ref().is_some_and(|p| p.delayed_until.is_none()) {
                out.push(self.prompt_message());
            }
        }
        out
    }
}
