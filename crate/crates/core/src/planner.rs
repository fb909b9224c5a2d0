//! Earliest-arrival journey planning over the local timetable.
//!
//! Plans are a single linear sequence of walk and bus-ride segments. The
//! search is round based: round `k` holds every non-dominated way of
//! reaching each stop with exactly `k` rides, where a label dominates another
//! at the same stop if it arrives no later and has walked no further. Walks
//! never follow walks: the origin walks to a first stop, and after each ride
//! the passenger may walk once (to another stop or to the destination).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint, Polyline};
use crate::network::{
    Direction, LineId, Seconds, StopId, TransitNetwork, VehicleId, END_OF_DAY,
};

mod oracle;

pub use oracle::{brute_force_oracle, OracleError, ORACLE_MAX_RUNS_PER_LINE, ORACLE_MAX_STOPS};

/// Walks shorter than this are dropped from plans; the two points count as one place.
pub const SAME_PLACE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub walk_speed_mps: f64,
    pub walk_radius_m: f64,
    pub max_bus_segments: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { walk_speed_mps: 1.2, walk_radius_m: 500.0, max_bus_segments: 3 }
    }
}

impl PlannerConfig {
    /// Whole seconds needed to walk `meters`, rounded up.
    pub fn walk_seconds(&self, meters: f64) -> Seconds {
        (meters / self.walk_speed_mps).ceil() as Seconds
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("no route to the destination before the end of the service day")]
    NoRoute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkSegment {
    pub path: Polyline,
    pub start: GeoPoint,
    pub end: GeoPoint,
    pub distance_m: f64,
    pub est_duration: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusRideSegment {
    pub line_id: LineId,
    pub direction: Direction,
    pub board_stop: StopId,
    pub alight_stop: StopId,
    pub scheduled_board: Seconds,
    pub scheduled_alight: Seconds,
    pub intermediate_stops: u32,
    /// The scheduled run the plan expects; tracking only checks line and direction.
    pub vehicle_id: VehicleId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Walk(WalkSegment),
    Bus(BusRideSegment),
}

impl Segment {
    pub fn start(&self, network: &TransitNetwork) -> GeoPoint {
        match self {
            Segment::Walk(w) => w.start,
            Segment::Bus(b) => stop_location(network, &b.board_stop),
        }
    }

    pub fn end(&self, network: &TransitNetwork) -> GeoPoint {
        match self {
            Segment::Walk(w) => w.end,
            Segment::Bus(b) => stop_location(network, &b.alight_stop),
        }
    }

    pub fn as_bus(&self) -> Option<&BusRideSegment> {
        match self {
            Segment::Bus(b) => Some(b),
            Segment::Walk(_) => None,
        }
    }

    pub fn as_walk(&self) -> Option<&WalkSegment> {
        match self {
            Segment::Walk(w) => Some(w),
            Segment::Bus(_) => None,
        }
    }
}

fn stop_location(network: &TransitNetwork, stop: &StopId) -> GeoPoint {
    network.stop(stop).expect("plan references known stops").location
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripPlan {
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    pub planned_departure: Seconds,
    pub arrival: Seconds,
    pub segments: Vec<Segment>,
}

impl TripPlan {
    pub fn bus_segments(&self) -> usize {
        self.segments.iter().filter(|s| s.as_bus().is_some()).count()
    }

    pub fn walk_distance(&self) -> f64 {
        self.segments.iter().filter_map(Segment::as_walk).map(|w| w.distance_m).sum()
    }

    /// Chaining check: segments meet end to start, the first starts at the
    /// origin, the last ends at the destination, and no two walks touch.
    pub fn check_connectivity(&self, network: &TransitNetwork, tolerance_m: f64) -> Result<(), String> {
        if self.segments.is_empty() {
            return Ok(());
        }
        let mut at = self.origin;
        let mut prev_walk = false;
        for (i, seg) in self.segments.iter().enumerate() {
            let gap = haversine_distance(&at, &seg.start(network));
            if gap > tolerance_m {
                return Err(format!("segment {i} starts {gap:.2} m from where the previous ended"));
            }
            let is_walk = seg.as_walk().is_some();
            if is_walk && prev_walk {
                return Err(format!("segments {} and {i} are both walks", i - 1));
            }
            prev_walk = is_walk;
            at = seg.end(network);
        }
        let gap = haversine_distance(&at, &self.destination);
        if gap > tolerance_m {
            return Err(format!("plan ends {gap:.2} m from the destination"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Place {
    Stop(StopId),
    Destination,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum LegKey {
    Walk(Place),
    Ride { line: LineId, direction: Direction, board: StopId, alight: StopId, at: Seconds, vehicle: VehicleId },
}

#[derive(Debug, Clone)]
enum Leg {
    Walk { from: GeoPoint, to: GeoPoint, meters: f64 },
    Ride { run: usize, board: usize, alight: usize },
}

#[derive(Debug, Clone)]
struct Label {
    arrival: Seconds,
    walk_m: f64,
    legs: Vec<Leg>,
    keys: Vec<LegKey>,
}

impl Label {
    fn cmp_final(&self, other: &Label, rides_self: usize, rides_other: usize) -> Ordering {
        self.arrival
            .cmp(&other.arrival)
            .then(rides_self.cmp(&rides_other))
            .then(self.walk_m.total_cmp(&other.walk_m))
            .then_with(|| self.keys.cmp(&other.keys))
    }

    /// True if `self` is at least as good in every respect.
    fn dominates(&self, other: &Label) -> bool {
        self.arrival <= other.arrival
            && self.walk_m <= other.walk_m
            && (self.arrival < other.arrival || self.walk_m < other.walk_m || self.keys <= other.keys)
    }
}

/// Non-dominated labels per (stop, arrived-by-walk).
#[derive(Default, Clone)]
struct Bags(BTreeMap<(StopId, bool), Vec<Label>>);

impl Bags {
    fn insert(&mut self, stop: StopId, by_walk: bool, label: Label) {
        let bag = self.0.entry((stop, by_walk)).or_default();
        if bag.iter().any(|l| l.dominates(&label)) {
            return;
        }
        bag.retain(|l| !label.dominates(l));
        bag.push(label);
    }

    fn iter(&self) -> impl Iterator<Item = (&StopId, bool, &Label)> {
        self.0.iter().flat_map(|((s, w), bag)| bag.iter().map(move |l| (s, *w, l)))
    }

    fn at_stop<'a>(&'a self, stop: &'a StopId) -> impl Iterator<Item = &'a Label> + 'a {
        [false, true]
            .into_iter()
            .filter_map(move |w| self.0.get(&(stop.clone(), w)))
            .flatten()
    }
}

fn walk_leg(from: GeoPoint, to: GeoPoint, meters: f64) -> Option<Leg> {
    (meters >= SAME_PLACE_M).then_some(Leg::Walk { from, to, meters })
}

fn extend(label: &Label, leg: Option<Leg>, arrival: Seconds, key: Option<LegKey>) -> Label {
    let mut next = label.clone();
    next.arrival = arrival;
    if let Some(leg) = leg {
        if let Leg::Walk { meters, .. } = &leg {
            next.walk_m += meters;
        }
        next.legs.push(leg);
    }
    if let Some(k) = key {
        next.keys.push(k);
    }
    next
}

/// Earliest-arrival plan from `origin` to `destination` leaving at or after `depart_after`.
///
/// Ties on arrival are broken by fewer rides, then less walking, then the
/// lexicographic order of the segments.
pub fn plan_trip(
    network: &TransitNetwork,
    origin: GeoPoint,
    destination: GeoPoint,
    depart_after: Seconds,
    config: &PlannerConfig,
) -> Result<TripPlan, PlanError> {
    if haversine_distance(&origin, &destination) < SAME_PLACE_M {
        return Ok(TripPlan {
            origin,
            destination,
            planned_departure: depart_after,
            arrival: depart_after,
            segments: Vec::new(),
        });
    }

    let start = Label { arrival: depart_after, walk_m: 0.0, legs: Vec::new(), keys: Vec::new() };
    // (label, rides)
    let mut finals: Vec<(Label, usize)> = Vec::new();

    let direct = haversine_distance(&origin, &destination);
    if direct <= config.walk_radius_m {
        let leg = walk_leg(origin, destination, direct);
        finals.push((
            extend(&start, leg, depart_after + config.walk_seconds(direct), Some(LegKey::Walk(Place::Destination))),
            0,
        ));
    }

    let mut round = Bags::default();
    for stop in network.stops() {
        let d = haversine_distance(&origin, &stop.location);
        if d <= config.walk_radius_m {
            let leg = walk_leg(origin, stop.location, d);
            let by_walk = leg.is_some();
            let key = by_walk.then(|| LegKey::Walk(Place::Stop(stop.id.clone())));
            round.insert(
                stop.id.clone(),
                by_walk,
                extend(&start, leg, depart_after + config.walk_seconds(d), key),
            );
        }
    }

    for rides in 1..=config.max_bus_segments {
        let mut ridden = Bags::default();
        for (run_idx, run) in network.runs().iter().enumerate() {
            for (i, board) in run.stop_times.iter().enumerate() {
                for label in round.at_stop(&board.stop) {
                    if label.arrival > board.departure {
                        continue;
                    }
                    for (j, alight) in run.stop_times.iter().enumerate().skip(i + 1) {
                        let key = LegKey::Ride {
                            line: run.line_id.clone(),
                            direction: run.direction,
                            board: board.stop.clone(),
                            alight: alight.stop.clone(),
                            at: board.departure,
                            vehicle: run.vehicle_id.clone(),
                        };
                        let leg = Leg::Ride { run: run_idx, board: i, alight: j };
                        ridden.insert(
                            alight.stop.clone(),
                            false,
                            extend(label, Some(leg), alight.arrival, Some(key)),
                        );
                    }
                }
            }
        }
        if ridden.0.is_empty() {
            break;
        }

        let mut next = Bags::default();
        for (stop_id, _, label) in ridden.iter() {
            let here = network.stop(stop_id).expect("run stops exist").location;
            let d = haversine_distance(&here, &destination);
            if d <= config.walk_radius_m {
                let leg = walk_leg(here, destination, d);
                let key = leg.is_some().then_some(LegKey::Walk(Place::Destination));
                finals.push((extend(label, leg, label.arrival + config.walk_seconds(d), key), rides));
            }
            next.insert(stop_id.clone(), false, label.clone());
            for other in network.stops() {
                if &other.id == stop_id {
                    continue;
                }
                let d = haversine_distance(&here, &other.location);
                if d <= config.walk_radius_m {
                    let leg = walk_leg(here, other.location, d);
                    let by_walk = leg.is_some();
                    let key = by_walk.then(|| LegKey::Walk(Place::Stop(other.id.clone())));
                    next.insert(
                        other.id.clone(),
                        by_walk,
                        extend(label, leg, label.arrival + config.walk_seconds(d), key),
                    );
                }
            }
        }
        round = next;
    }

    let (best, _) = finals
        .into_iter()
        .filter(|(l, _)| l.arrival <= END_OF_DAY)
        .min_by(|(a, ra), (b, rb)| a.cmp_final(b, *ra, *rb))
        .ok_or(PlanError::NoRoute)?;

    Ok(TripPlan {
        origin,
        destination,
        planned_departure: depart_after,
        arrival: best.arrival,
        segments: best.legs.iter().map(|leg| to_segment(network, leg, config)).collect(),
    })
}

/// Re-planning is planning from wherever the passenger is now.
pub fn replan(
    network: &TransitNetwork,
    current_position: GeoPoint,
    destination: GeoPoint,
    now: Seconds,
    config: &PlannerConfig,
) -> Result<TripPlan, PlanError> {
    plan_trip(network, current_position, destination, now, config)
}

fn to_segment(network: &TransitNetwork, leg: &Leg, config: &PlannerConfig) -> Segment {
    match leg {
        Leg::Walk { from, to, meters, .. } => Segment::Walk(WalkSegment {
            path: Polyline::straight(*from, *to).expect("walk legs are at least 1 m long"),
            start: *from,
            end: *to,
            distance_m: *meters,
            est_duration: config.walk_seconds(*meters),
        }),
        Leg::Ride { run, board, alight } => {
            let r = &network.runs()[*run];
            Segment::Bus(BusRideSegment {
                line_id: r.line_id.clone(),
                direction: r.direction,
                board_stop: r.stop_times[*board].stop.clone(),
                alight_stop: r.stop_times[*alight].stop.clone(),
                scheduled_board: r.stop_times[*board].departure,
                scheduled_alight: r.stop_times[*alight].arrival,
                intermediate_stops: (alight - board - 1) as u32,
                vehicle_id: r.vehicle_id.clone(),
            })
        }
    }
}
