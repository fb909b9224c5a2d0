//! A passenger session: one simulated world feeding one detector and one
//! tracker, with everything recorded to a trace.
//!
//! The engine only sees what a phone would: scans, GPS fixes and the fleet's
//! next-stop feed. Ground truth from the world goes to the log for scoring
//! and never reaches the detector or tracker.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{DetectorConfig, RideDetector, RideEventKind, RideMode};
use crate::geo::GeoPoint;
use crate::network::{Seconds, StopId, TransitNetwork, VehicleId};
use crate::planner::{plan_trip, PlanError, PlannerConfig, Segment, TripPlan};
use crate::sim::{
    BusProgress, CommandError, ConfigError, Observation, Passenger, PassengerCommand, SimConfig,
    SimWorld, VehicleState,
};
use crate::trace::{Rejection, TraceEvent, TraceRecord};
use crate::tracker::{
    NavigationMessage, ReplanChoice, TrackError, Tracker, TrackerConfig, TripActivity, TripStatus,
    Templates,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub detector: DetectorConfig,
    pub tracker: TrackerConfig,
    pub planner: PlannerConfig,
}

/// What a client sees of the world at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub t: Seconds,
    pub passenger: Passenger,
    pub vehicles: Vec<VehicleState>,
    pub ride_mode: RideMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<TripActivity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<TripStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_index: Option<usize>,
}

pub struct Session {
    network: Arc<TransitNetwork>,
    config: EngineConfig,
    templates: Templates,
    world: SimWorld,
    detector: RideDetector,
    tracker: Option<Tracker>,
    /// Latest feed entry per vehicle.
    progress: BTreeMap<VehicleId, BusProgress>,
    /// Feed entries for the bus being ridden, with the number of scans seen
    /// since. They reach the tracker once the detector has had as many scans
    /// as it needs to notice an alighting and is not counting towards one, so
    /// a passenger who just got off is not told they missed their stop.
    held: VecDeque<(BusProgress, u8)>,
    log: Vec<TraceRecord>,
}

impl Session {
    pub fn new(
        network: Arc<TransitNetwork>,
        sim: SimConfig,
        config: EngineConfig,
        start_time: Seconds,
        start: GeoPoint,
    ) -> Result<Session, ConfigError> {
        let world = SimWorld::new(&network, sim, start_time, start)?;
        Ok(Session {
            detector: RideDetector::new(config.detector.clone()),
            network,
            config,
            templates: Templates::default(),
            world,
            tracker: None,
            progress: BTreeMap::new(),
            held: VecDeque::new(),
            log: Vec::new(),
        })
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    pub fn network(&self) -> &TransitNetwork {
        &self.network
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn detector(&self) -> &RideDetector {
        &self.detector
    }

    pub fn tracker(&self) -> Option<&Tracker> {
        self.tracker.as_ref()
    }

    pub fn now(&self) -> Seconds {
        self.world.clock()
    }

    pub fn log(&self) -> &[TraceRecord] {
        &self.log
    }

    fn record(&mut self, event: TraceEvent) {
        let t = self.world.clock();
        self.log.push(TraceRecord::new(t, event));
    }

    fn record_messages(&mut self, messages: Vec<NavigationMessage>) {
        for m in messages {
            self.record(TraceEvent::Message(m));
        }
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            t: self.world.clock(),
            passenger: self.world.passenger().clone(),
            vehicles: self.world.vehicles().cloned().collect(),
            ride_mode: self.detector.mode().clone(),
            activity: self.tracker.as_ref().map(Tracker::activity),
            status: self.tracker.as_ref().map(|t| t.status().clone()),
            segment_index: self.tracker.as_ref().map(Tracker::segment_index),
        }
    }

    /// Plans a trip leaving now and logs the plan.
    pub fn plan(&mut self, origin: GeoPoint, destination: GeoPoint) -> Result<TripPlan, PlanError> {
        let plan = plan_trip(&self.network, origin, destination, self.now(), &self.config.planner)?;
        self.record(TraceEvent::Plan(plan.clone()));
        Ok(plan)
    }

    /// Replaces any running tracker with one following `plan`.
    pub fn start_tracking(&mut self, plan: TripPlan) {
        let (tracker, messages) = Tracker::start(
            plan,
            &self.network,
            self.now(),
            self.config.tracker.clone(),
            self.templates.clone(),
        );
        self.tracker = Some(tracker);
        self.record_messages(messages);
    }

    /// Applies a passenger command to the world; rejections are logged too.
    pub fn command(&mut self, command: PassengerCommand) -> Result<(), CommandError> {
        self.record(TraceEvent::Command(command.clone()));
        match self.world.apply(&self.network, &command) {
            Ok(truth) => {
                if let Some(g) = truth {
                    self.record(TraceEvent::GroundTruth(g));
                }
                Ok(())
            }
            Err(e) => {
                self.record(TraceEvent::Rejection(Rejection {
                    command: command_name(&command).to_string(),
                    code: command_error_code(&e).to_string(),
                    reason: e.to_string(),
                }));
                Err(e)
            }
        }
    }

    pub fn respond_to_replan(&mut self, choice: ReplanChoice) -> Result<(), TrackError> {
        self.record(TraceEvent::ReplanResponse(choice));
        let now = self.now();
        let result = match self.tracker.as_mut() {
            Some(t) => {
                let before = t.replans();
                t.respond_to_replan(choice, &self.network, &self.config.planner, now)
                    .map(|m| (m, t.replans() != before))
            }
            None => Err(TrackError::NoPendingPrompt),
        };
        match result {
            Ok((messages, replanned)) => {
                if replanned {
                    let plan = self.tracker.as_ref().expect("tracker").plan().clone();
                    self.record(TraceEvent::Plan(plan));
                }
                self.record_messages(messages);
                Ok(())
            }
            Err(e) => {
                self.record(TraceEvent::Rejection(Rejection {
                    command: "replan".into(),
                    code: "no_pending_prompt".into(),
                    reason: e.to_string(),
                }));
                Err(e)
            }
        }
    }

    /// Advances the world by one tick and runs the engine on what it produced.
    pub fn step(&mut self) {
        let observations = self.world.step(&self.network);
        for obs in observations {
            match obs {
                Observation::GroundTruth(g) => self.record(TraceEvent::GroundTruth(g)),
                Observation::BusProgress(p) => {
                    self.record(TraceEvent::BusProgress(p.clone()));
                    let riding = matches!(self.detector.mode(), RideMode::OnBus(v) if *v == p.vehicle_id);
                    self.progress.insert(p.vehicle_id.clone(), p.clone());
                    if riding {
                        self.held.push_back((p, 0));
                    }
                }
                Observation::Gps(fix) => {
                    self.record(TraceEvent::Gps(fix));
                    let now = self.now();
                    if let Some(t) = self.tracker.as_mut() {
                        let messages = t.on_gps(fix, &self.network, now);
                        self.record_messages(messages);
                    }
                }
                Observation::Scan(scan) => {
                    let events = self
                        .detector
                        .step(&scan, &self.network)
                        .expect("the world emits scans in time order");
                    self.record(TraceEvent::Scan(scan));
                    for event in events {
                        self.record(TraceEvent::RideEvent(event.clone()));
                        let now = self.now();
                        let Some(t) = self.tracker.as_mut() else { continue };
                        match t.on_ride_event(&event, &self.network, now) {
                            Ok(messages) => self.record_messages(messages),
                            Err(e) => log::warn!("tracker rejected {event:?}: {e}"),
                        }
                        if event.kind == RideEventKind::Boarded {
                            self.catch_up_progress(&event.vehicle_id);
                        }
                    }
                    self.release_held();
                }
            }
        }
        let now = self.now();
        if let Some(t) = self.tracker.as_mut() {
            let messages = t.poll(now);
            self.record_messages(messages);
        }
    }

    fn release_held(&mut self) {
        let RideMode::OnBus(vehicle) = self.detector.mode().clone() else {
            self.held.clear();
            return;
        };
        self.held.retain(|(p, _)| p.vehicle_id == vehicle);
        let needed = self.detector.config().exit_strikes;
        for (_, seen) in self.held.iter_mut() {
            *seen += 1;
        }
        if self.detector.low_counter() > 0 {
            return;
        }
        while self.held.front().is_some_and(|(_, seen)| *seen >= needed) {
            let (p, _) = self.held.pop_front().expect("non-empty");
            self.feed_progress(&p.next_stop);
        }
    }

    fn feed_progress(&mut self, next: &StopId) {
        let now = self.now();
        if let Some(t) = self.tracker.as_mut() {
            match t.on_bus_progress(next, &self.network, now) {
                Ok(messages) => self.record_messages(messages),
                Err(e) => log::warn!("bus progress not applied: {e}"),
            }
        }
    }

    /// Boarding is detected a little after it happens; if the bus has
    /// already left the boarding stop, apply its latest next stop.
    fn catch_up_progress(&mut self, vehicle: &VehicleId) {
        let Some(p) = self.progress.get(vehicle).cloned() else { return };
        let Some(t) = self.tracker.as_ref() else { return };
        if !t.ride().is_some_and(|r| r.on_plan) {
            return;
        }
        let Some(Segment::Bus(bus)) = t.current_segment() else { return };
        let board = self
            .network
            .pattern(&bus.line_id, bus.direction)
            .and_then(|pat| pat.position(&bus.board_stop));
        if board.is_some_and(|b| p.index > b) {
            self.feed_progress(&p.next_stop);
        }
    }

    pub fn advance(&mut self, seconds: Seconds) {
        let until = self.now() + seconds;
        while self.now() < until {
            self.step();
        }
    }
}

fn command_name(c: &PassengerCommand) -> &'static str {
    match c {
        PassengerCommand::WalkToward { .. } => "walk_toward",
        PassengerCommand::Wait => "wait",
        PassengerCommand::Board { .. } => "board",
        PassengerCommand::Alight => "alight",
    }
}

pub fn command_error_code(e: &CommandError) -> &'static str {
    match e {
        CommandError::UnknownVehicle(_) => "unknown_vehicle",
        CommandError::DoorsClosed => "doors_closed",
        CommandError::TooFar(_) => "too_far",
        CommandError::AlreadyOnBoard => "already_on_board",
        CommandError::NotOnBoard => "not_on_board",
    }
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

/// A point given either directly or relative to a stop, in meters east and
/// north of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Place {
    Stop {
        stop: StopId,
        #[serde(default)]
        east: f64,
        #[serde(default)]
        north: f64,
    },
    Point {
        lat: f64,
        lon: f64,
    },
}

impl Place {
    pub fn resolve(&self, network: &TransitNetwork) -> Result<GeoPoint, ScenarioError> {
        match self {
            Place::Stop { stop, east, north } => network
                .stop(stop)
                .map(|s| s.location.offset(*east, *north))
                .ok_or_else(|| ScenarioError::UnknownStop(stop.clone())),
            Place::Point { lat, lon } => {
                GeoPoint::new(*lat, *lon).map_err(|e| ScenarioError::Invalid(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    /// `"destination"` or `"origin"`.
    Named(String),
    Place(Place),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScriptAction {
    WalkToward { to: Target },
    Wait,
    Board { vehicle: VehicleId },
    Alight,
    Confirm,
    Delay { seconds: Seconds },
    Refuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptCommand {
    pub at: Seconds,
    #[serde(flatten)]
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub start_time: Seconds,
    pub end_time: Seconds,
    pub origin: Place,
    #[serde(default)]
    pub destination: Option<Place>,
    /// Plan from origin to destination at the start and track the plan.
    #[serde(default = "yes")]
    pub track: bool,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub commands: Vec<ScriptCommand>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown stop {0}")]
    UnknownStop(StopId),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("planning failed: {0}")]
    Plan(#[from] PlanError),
}

impl Scenario {
    pub fn load_str(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        if s.end_time < s.start_time {
            return Err(ScenarioError::Invalid("end_time precedes start_time".into()));
        }
        if let Some(c) = s.commands.iter().find(|c| c.at < s.start_time || c.at > s.end_time) {
            return Err(ScenarioError::Invalid(format!("command at {} is outside the scenario time span", c.at)));
        }
        if s.track && s.destination.is_none() {
            return Err(ScenarioError::Invalid("tracking needs a destination".into()));
        }
        Ok(s)
    }
}

/// Builds the session for a scenario, planning and starting tracking if asked.
pub fn start_scenario(
    network: Arc<TransitNetwork>,
    scenario: &Scenario,
    seed: Option<u64>,
) -> Result<Session, ScenarioError> {
    let origin = scenario.origin.resolve(&network)?;
    let destination = scenario.destination.as_ref().map(|d| d.resolve(&network)).transpose()?;
    let mut sim = scenario.sim.clone();
    if let Some(seed) = seed {
        sim.seed = seed;
    }
    let mut session = Session::new(network, sim, scenario.engine.clone(), scenario.start_time, origin)?;
    if let (true, Some(dest)) = (scenario.track, destination) {
        let plan = session.plan(origin, dest)?;
        session.start_tracking(plan);
    }
    Ok(session)
}

fn apply_script(session: &mut Session, scenario: &Scenario, action: &ScriptAction) -> Result<(), ScenarioError> {
    let resolve_target = |session: &Session, to: &Target| -> Result<GeoPoint, ScenarioError> {
        match to {
            Target::Named(n) if n == "destination" => scenario
                .destination
                .as_ref()
                .ok_or_else(|| ScenarioError::Invalid("no destination".into()))?
                .resolve(session.network()),
            Target::Named(n) if n == "origin" => scenario.origin.resolve(session.network()),
            Target::Named(n) => Err(ScenarioError::Invalid(format!("unknown target {n}"))),
            Target::Place(p) => p.resolve(session.network()),
        }
    };
    // Rejected commands are part of the log, not failures of the run.
    match action {
        ScriptAction::WalkToward { to } => {
            let target = resolve_target(session, to)?;
            let _ = session.command(PassengerCommand::WalkToward { target });
        }
        ScriptAction::Wait => {
            let _ = session.command(PassengerCommand::Wait);
        }
        ScriptAction::Board { vehicle } => {
            let _ = session.command(PassengerCommand::Board { vehicle_id: vehicle.clone() });
        }
        ScriptAction::Alight => {
            let _ = session.command(PassengerCommand::Alight);
        }
        ScriptAction::Confirm => {
            let _ = session.respond_to_replan(ReplanChoice::Confirm);
        }
        ScriptAction::Delay { seconds } => {
            let _ = session.respond_to_replan(ReplanChoice::Delay(*seconds));
        }
        ScriptAction::Refuse => {
            let _ = session.respond_to_replan(ReplanChoice::Refuse);
        }
    }
    Ok(())
}

/// Applies a scenario's script to a session one tick at a time.
#[derive(Debug, Clone)]
pub struct ScriptedRun {
    scenario: Scenario,
    script: Vec<ScriptCommand>,
    next: usize,
}

impl ScriptedRun {
    pub fn new(scenario: &Scenario) -> Self {
        let mut script = scenario.commands.clone();
        script.sort_by_key(|c| c.at);
        Self { scenario: scenario.clone(), script, next: 0 }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn is_finished(&self, session: &Session) -> bool {
        self.next >= self.script.len() && session.now() >= self.scenario.end_time
    }

    /// Applies the commands that are due, then steps the session unless the
    /// end time has been reached. Returns whether it stepped.
    pub fn step(&mut self, session: &mut Session) -> Result<bool, ScenarioError> {
        while self.next < self.script.len() && self.script[self.next].at <= session.now() {
            apply_script(session, &self.scenario, &self.script[self.next].action)?;
            self.next += 1;
        }
        if session.now() >= self.scenario.end_time {
            return Ok(false);
        }
        session.step();
        Ok(true)
    }
}

/// Runs a scenario to its end time, calling `observe` after every tick.
pub fn run_scenario_with(
    network: Arc<TransitNetwork>,
    scenario: &Scenario,
    seed: Option<u64>,
    mut observe: impl FnMut(&Session),
) -> Result<Session, ScenarioError> {
    let mut session = start_scenario(network, scenario, seed)?;
    let mut run = ScriptedRun::new(scenario);
    while run.step(&mut session)? {
        observe(&session);
    }
    Ok(session)
}

pub fn run_scenario(
    network: Arc<TransitNetwork>,
    scenario: &Scenario,
    seed: Option<u64>,
) -> Result<Vec<TraceRecord>, ScenarioError> {
    Ok(run_scenario_with(network, scenario, seed, |_| {})?.log)
}

impl Session {
    pub fn into_log(self) -> Vec<TraceRecord> {
        self.log
    }
}
