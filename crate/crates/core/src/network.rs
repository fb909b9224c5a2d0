//! Static transit network: stops, two-direction lines, timetabled vehicle
//! runs and the registry that maps each bus access point to its vehicle.
//!
//! Networks are loaded from a TOML document (see `docs/formats.md`) and are
//! immutable afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoError, GeoPoint, Polyline};

/// Seconds since midnight of the (single) service day.
pub type Seconds = u32;

/// Last second of the service day; nothing is scheduled past it.
pub const END_OF_DAY: Seconds = 86_399;

/// Stops further than this from their route shape are rejected at load time.
const MAX_STOP_TO_SHAPE_M: f64 = 50.0;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_type!(StopId);
id_type!(LineId);
id_type!(
    /// Fleet vehicle; also the ordering key for boarding tie-breaks.
    VehicleId
);

/// 48-bit access point hardware address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Bssid(pub [u8; 6]);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid bssid {0:?}: expected six colon-separated hex octets")]
pub struct BssidParseError(pub String);

impl FromStr for Bssid {
    type Err = BssidParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || BssidParseError(s.to_owned());
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(err)?;
            if part.len() != 2 {
                return Err(err());
            }
            *byte = u8::from_str_radix(part, 16).map_err(|_| err())?;
        }
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(Bssid(out))
    }
}

impl TryFrom<String> for Bssid {
    type Error = BssidParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Bssid> for String {
    fn from(b: Bssid) -> Self {
        b.to_string()
    }
}

impl fmt::Display for Bssid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

/// Travel direction of a line: 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Direction(u8);

impl Direction {
    pub const OUTBOUND: Direction = Direction(0);
    pub const INBOUND: Direction = Direction(1);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for Direction {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 | 1 => Ok(Direction(v)),
            _ => Err(format!("direction must be 0 or 1, got {v}")),
        }
    }
}

impl From<Direction> for u8 {
    fn from(d: Direction) -> Self {
        d.0
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stop {
    pub id: StopId,
    pub name: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutePattern {
    pub line_id: LineId,
    pub direction: Direction,
    pub stops: Vec<StopId>,
    pub shape: Polyline,
    /// Distance along `shape` at which each stop of `stops` is served.
    pub stop_offsets: Vec<f64>,
}

impl RoutePattern {
    pub fn position(&self, stop: &StopId) -> Option<usize> {
        self.stops.iter().position(|s| s == stop)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: LineId,
    pub directions: [RoutePattern; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(StopId, Seconds, Seconds)", into = "(StopId, Seconds, Seconds)")]
pub struct StopTime {
    pub stop: StopId,
    pub arrival: Seconds,
    pub departure: Seconds,
}

impl From<(StopId, Seconds, Seconds)> for StopTime {
    fn from((stop, arrival, departure): (StopId, Seconds, Seconds)) -> Self {
        Self { stop, arrival, departure }
    }
}

impl From<StopTime> for (StopId, Seconds, Seconds) {
    fn from(st: StopTime) -> Self {
        (st.stop, st.arrival, st.departure)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRun {
    pub vehicle_id: VehicleId,
    pub bssid: Bssid,
    pub line_id: LineId,
    pub direction: Direction,
    pub stop_times: Vec<StopTime>,
}

impl VehicleRun {
    pub fn starts_at(&self) -> Seconds {
        self.stop_times[0].arrival
    }

    pub fn ends_at(&self) -> Seconds {
        self.stop_times[self.stop_times.len() - 1].departure
    }
}

/// What the fleet registry knows about a vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub vehicle_id: VehicleId,
    pub line_id: LineId,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Departure {
    pub vehicle_id: VehicleId,
    pub line_id: LineId,
    pub direction: Direction,
    pub departure: Seconds,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("bus_ssid must not be empty")]
    EmptySsid,
    #[error("duplicate stop id {0}")]
    DuplicateStop(StopId),
    #[error("stop {stop}: {source}")]
    StopLocation { stop: StopId, source: GeoError },
    #[error("duplicate line id {0}")]
    DuplicateLine(LineId),
    #[error("line {0} must define exactly directions 0 and 1")]
    Directions(LineId),
    #[error("line {line} direction {direction}: {reason}")]
    Pattern { line: LineId, direction: Direction, reason: String },
    #[error("{context} references unknown stop {stop}")]
    DanglingStop { context: String, stop: StopId },
    #[error("duplicate vehicle id {0}")]
    DuplicateVehicle(VehicleId),
    #[error("duplicate bssid {bssid} (vehicles {first} and {second})")]
    DuplicateBssid { bssid: Bssid, first: VehicleId, second: VehicleId },
    #[error("vehicle {vehicle} runs on unknown line {line}")]
    UnknownLine { vehicle: VehicleId, line: LineId },
    #[error("vehicle {vehicle}: stop_times must visit every stop of its pattern in order")]
    RunOffPattern { vehicle: VehicleId },
    #[error("vehicle {vehicle}: non-increasing stop_times at stop {stop}")]
    NonIncreasingTimes { vehicle: VehicleId, stop: StopId },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("unknown stop {0}")]
    UnknownStop(StopId),
    #[error("unknown line {0}")]
    UnknownLine(LineId),
    #[error("stop {stop} is not on line {line} direction {direction}")]
    StopNotOnPattern { stop: StopId, line: LineId, direction: Direction },
    #[error("to precedes from: {to} comes before {from} on line {line} direction {direction}")]
    ToPrecedesFrom { from: StopId, to: StopId, line: LineId, direction: Direction },
}

// ---------------------------------------------------------------------------
// File document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub bus_ssid: String,
    pub stops: Vec<StopDoc>,
    pub lines: Vec<LineDoc>,
    #[serde(default)]
    pub vehicle_runs: Vec<RunDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopDoc {
    pub id: StopId,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineDoc {
    pub id: LineId,
    pub directions: Vec<DirectionDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionDoc {
    pub direction: Direction,
    pub stops: Vec<StopId>,
    /// `[lat, lon]` pairs.
    pub shape: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDoc {
    pub vehicle_id: VehicleId,
    pub bssid: Bssid,
    pub line: LineId,
    pub direction: Direction,
    pub stop_times: Vec<StopTime>,
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TransitNetwork {
    bus_ssid: String,
    stops: BTreeMap<StopId, Stop>,
    /// Stops in document order, for stable iteration.
    stop_order: Vec<StopId>,
    lines: BTreeMap<LineId, Line>,
    line_order: Vec<LineId>,
    runs: Vec<VehicleRun>,
    by_bssid: BTreeMap<Bssid, usize>,
    by_vehicle: BTreeMap<VehicleId, usize>,
}

impl FromStr for TransitNetwork {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::load_str(s)
    }
}

impl TransitNetwork {
    /// Parses and validates a network document.
    pub fn load_str(document: &str) -> Result<Self, NetworkError> {
        let doc: NetworkDocument =
            toml::from_str(document).map_err(|e| NetworkError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: NetworkDocument) -> Result<Self, NetworkError> {
        if doc.bus_ssid.trim().is_empty() {
            return Err(NetworkError::EmptySsid);
        }

        let mut stops = BTreeMap::new();
        let mut stop_order = Vec::new();
        for s in doc.stops {
            let location = GeoPoint::new(s.lat, s.lon)
                .map_err(|source| NetworkError::StopLocation { stop: s.id.clone(), source })?;
            if stops.contains_key(&s.id) {
                return Err(NetworkError::DuplicateStop(s.id));
            }
            stop_order.push(s.id.clone());
            stops.insert(s.id.clone(), Stop { id: s.id, name: s.name, location });
        }

        let mut lines = BTreeMap::new();
        let mut line_order = Vec::new();
        for l in doc.lines {
            if lines.contains_key(&l.id) {
                return Err(NetworkError::DuplicateLine(l.id));
            }
            let dirs: BTreeSet<Direction> = l.directions.iter().map(|d| d.direction).collect();
            if l.directions.len() != 2 || dirs.len() != 2 {
                return Err(NetworkError::Directions(l.id));
            }
            let mut patterns: Vec<RoutePattern> = l
                .directions
                .into_iter()
                .map(|d| build_pattern(&l.id, d, &stops))
                .collect::<Result<_, _>>()?;
            patterns.sort_by_key(|p| p.direction);
            let [p0, p1]: [RoutePattern; 2] = patterns.try_into().expect("two directions");
            line_order.push(l.id.clone());
            lines.insert(l.id.clone(), Line { id: l.id, directions: [p0, p1] });
        }

        let mut runs = Vec::new();
        let mut by_bssid = BTreeMap::new();
        let mut by_vehicle = BTreeMap::new();
        for r in doc.vehicle_runs {
            if by_vehicle.contains_key(&r.vehicle_id) {
                return Err(NetworkError::DuplicateVehicle(r.vehicle_id));
            }
            if let Some(&i) = by_bssid.get(&r.bssid) {
                let first: &VehicleRun = &runs[i];
                return Err(NetworkError::DuplicateBssid {
                    bssid: r.bssid,
                    first: first.vehicle_id.clone(),
                    second: r.vehicle_id,
                });
            }
            let line = lines.get(&r.line).ok_or_else(|| NetworkError::UnknownLine {
                vehicle: r.vehicle_id.clone(),
                line: r.line.clone(),
            })?;
            let pattern = &line.directions[r.direction.index()];
            for st in &r.stop_times {
                if !stops.contains_key(&st.stop) {
                    return Err(NetworkError::DanglingStop {
                        context: format!("vehicle {}", r.vehicle_id),
                        stop: st.stop.clone(),
                    });
                }
            }
            if r.stop_times.len() != pattern.stops.len()
                || r.stop_times.iter().zip(&pattern.stops).any(|(st, s)| &st.stop != s)
            {
                return Err(NetworkError::RunOffPattern { vehicle: r.vehicle_id });
            }
            let mut prev_departure: Option<Seconds> = None;
            for st in &r.stop_times {
                let bad = st.departure < st.arrival
                    || st.departure > END_OF_DAY
                    || prev_departure.is_some_and(|p| st.arrival <= p);
                if bad {
                    return Err(NetworkError::NonIncreasingTimes {
                        vehicle: r.vehicle_id.clone(),
                        stop: st.stop.clone(),
                    });
                }
                prev_departure = Some(st.departure);
            }
            let idx = runs.len();
            by_bssid.insert(r.bssid, idx);
            by_vehicle.insert(r.vehicle_id.clone(), idx);
            runs.push(VehicleRun {
                vehicle_id: r.vehicle_id,
                bssid: r.bssid,
                line_id: r.line,
                direction: r.direction,
                stop_times: r.stop_times,
            });
        }

        Ok(Self {
            bus_ssid: doc.bus_ssid,
            stops,
            stop_order,
            lines,
            line_order,
            runs,
            by_bssid,
            by_vehicle,
        })
    }

    /// Inverse of [`TransitNetwork::from_document`].
    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            bus_ssid: self.bus_ssid.clone(),
            stops: self
                .stops()
                .map(|s| StopDoc {
                    id: s.id.clone(),
                    name: s.name.clone(),
                    lat: s.location.lat,
                    lon: s.location.lon,
                })
                .collect(),
            lines: self
                .lines()
                .map(|l| LineDoc {
                    id: l.id.clone(),
                    directions: l
                        .directions
                        .iter()
                        .map(|p| DirectionDoc {
                            direction: p.direction,
                            stops: p.stops.clone(),
                            shape: p.shape.waypoints().iter().map(|w| [w.lat, w.lon]).collect(),
                        })
                        .collect(),
                })
                .collect(),
            vehicle_runs: self
                .runs
                .iter()
                .map(|r| RunDoc {
                    vehicle_id: r.vehicle_id.clone(),
                    bssid: r.bssid,
                    line: r.line_id.clone(),
                    direction: r.direction,
                    stop_times: r.stop_times.clone(),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("network document serializes")
    }

    pub fn bus_ssid(&self) -> &str {
        &self.bus_ssid
    }

    pub fn stop(&self, id: &StopId) -> Option<&Stop> {
        self.stops.get(id)
    }

    /// Stops in document order.
    pub fn stops(&self) -> impl Iterator<Item = &Stop> {
        self.stop_order.iter().map(|id| &self.stops[id])
    }

    pub fn stop_count(&self) -> usize {
        self.stops.len()
    }

    pub fn line(&self, id: &LineId) -> Option<&Line> {
        self.lines.get(id)
    }

    /// Lines in document order.
    pub fn lines(&self) -> impl Iterator<Item = &Line> {
        self.line_order.iter().map(|id| &self.lines[id])
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn pattern(&self, line: &LineId, direction: Direction) -> Option<&RoutePattern> {
        self.lines.get(line).map(|l| &l.directions[direction.index()])
    }

    pub fn runs(&self) -> &[VehicleRun] {
        &self.runs
    }

    pub fn run(&self, vehicle: &VehicleId) -> Option<&VehicleRun> {
        self.by_vehicle.get(vehicle).map(|&i| &self.runs[i])
    }

    /// Fleet registry lookup. Ambient access points resolve to `None`.
    pub fn vehicle_for_bssid(&self, bssid: &Bssid) -> Option<VehicleInfo> {
        self.by_bssid.get(bssid).map(|&i| {
            let r = &self.runs[i];
            VehicleInfo {
                vehicle_id: r.vehicle_id.clone(),
                line_id: r.line_id.clone(),
                direction: r.direction,
            }
        })
    }

    pub fn vehicle_info(&self, vehicle: &VehicleId) -> Option<VehicleInfo> {
        self.run(vehicle).map(|r| VehicleInfo {
            vehicle_id: r.vehicle_id.clone(),
            line_id: r.line_id.clone(),
            direction: r.direction,
        })
    }

    /// Inclusive run of stops from `from` to `to` along one direction of a line.
    pub fn stops_between(
        &self,
        line: &LineId,
        direction: Direction,
        from: &StopId,
        to: &StopId,
    ) -> Result<Vec<StopId>, QueryError> {
        let pattern = self
            .pattern(line, direction)
            .ok_or_else(|| QueryError::UnknownLine(line.clone()))?;
        let not_on = |stop: &StopId| QueryError::StopNotOnPattern {
            stop: stop.clone(),
            line: line.clone(),
            direction,
        };
        let i = pattern.position(from).ok_or_else(|| not_on(from))?;
        let j = pattern.position(to).ok_or_else(|| not_on(to))?;
        if j < i {
            return Err(QueryError::ToPrecedesFrom {
                from: from.clone(),
                to: to.clone(),
                line: line.clone(),
                direction,
            });
        }
        Ok(pattern.stops[i..=j].to_vec())
    }

    /// Scheduled departures from `stop` at or after `after`, earliest first.
    /// A run's terminal stop is not a departure.
    pub fn next_departures(
        &self,
        stop: &StopId,
        after: Seconds,
        limit: usize,
    ) -> Result<Vec<Departure>, QueryError> {
        if !self.stops.contains_key(stop) {
            return Err(QueryError::UnknownStop(stop.clone()));
        }
        let mut out: Vec<Departure> = self
            .runs
            .iter()
            .flat_map(|r| {
                let last = r.stop_times.len() - 1;
                r.stop_times[..last]
                    .iter()
                    .filter(|st| &st.stop == stop && st.departure >= after)
                    .map(|st| Departure {
                        vehicle_id: r.vehicle_id.clone(),
                        line_id: r.line_id.clone(),
                        direction: r.direction,
                        departure: st.departure,
                    })
            })
            .collect();
        out.sort_by(|a, b| {
            (a.departure, &a.vehicle_id).cmp(&(b.departure, &b.vehicle_id))
        });
        out.truncate(limit);
        Ok(out)
    }

    /// Closest stop to `p`, ties broken by stop id.
    pub fn nearest_stop(&self, p: &GeoPoint) -> Option<(&Stop, f64)> {
        self.stops
            .values()
            .map(|s| (s, haversine_distance(p, &s.location)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)))
    }

    /// `(south_west, north_east)` corners around every stop and shape waypoint.
    pub fn bounding_box(&self) -> (GeoPoint, GeoPoint) {
        let points = self.stops.values().map(|s| s.location).chain(
            self.lines
                .values()
                .flat_map(|l| l.directions.iter())
                .flat_map(|p| p.shape.waypoints().iter().copied()),
        );
        let (mut lo, mut hi) = ((90.0f64, 180.0f64), (-90.0f64, -180.0f64));
        for p in points {
            lo = (lo.0.min(p.lat), lo.1.min(p.lon));
            hi = (hi.0.max(p.lat), hi.1.max(p.lon));
        }
        (GeoPoint { lat: lo.0, lon: lo.1 }, GeoPoint { lat: hi.0, lon: hi.1 })
    }
}

fn build_pattern(
    line: &LineId,
    d: DirectionDoc,
    stops: &BTreeMap<StopId, Stop>,
) -> Result<RoutePattern, NetworkError> {
    let fail = |reason: String| NetworkError::Pattern {
        line: line.clone(),
        direction: d.direction,
        reason,
    };
    if d.stops.len() < 2 {
        return Err(fail(format!("needs at least 2 stops, got {}", d.stops.len())));
    }
    let mut seen = BTreeSet::new();
    for s in &d.stops {
        if !stops.contains_key(s) {
            return Err(NetworkError::DanglingStop {
                context: format!("line {line} direction {}", d.direction),
                stop: s.clone(),
            });
        }
        if !seen.insert(s) {
            return Err(fail(format!("stop {s} appears twice")));
        }
    }
    let waypoints = d
        .shape
        .iter()
        .map(|[lat, lon]| GeoPoint::new(*lat, *lon))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(format!("shape: {e}")))?;
    let shape = Polyline::new(waypoints).map_err(|e| fail(format!("shape: {e}")))?;
    let mut stop_offsets = Vec::with_capacity(d.stops.len());
    let mut along = 0.0;
    for s in &d.stops {
        let proj = shape.project_from(&stops[s].location, along);
        if proj.offset > MAX_STOP_TO_SHAPE_M {
            return Err(fail(format!("stop {s} is {:.0} m from the route shape", proj.offset)));
        }
        along = proj.along;
        stop_offsets.push(along);
    }
    if stop_offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(fail("two stops project onto the same point of the shape".into()));
    }
    Ok(RoutePattern {
        line_id: line.clone(),
        direction: d.direction,
        stops: d.stops,
        shape,
        stop_offsets,
    })
}
