//! Semantic bus ride detection from Wifi scans.
//!
//! Two stages: a speed classifier that looks at how fast the set of visible
//! access points churns over the last 30 s, and a boarding/alighting state
//! machine driven by the bus network's access points (one fixed bssid per
//! vehicle, shared ssid across the fleet).
//!
//! Entry rules, in priority order, while on foot:
//!
//! 1. the strongest bus reading is above [`DetectorConfig::entry_rssi`];
//! 2. a bus has been visible in at least half of the scans of the last minute
//!    and was first seen more than a minute ago;
//! 3. the speed classifier says `Fast` and any bus reading is present.
//!
//! While on a bus, a scan where the bus is absent or weaker than
//! [`DetectorConfig::low_rssi`] counts a strike unless the speed is `Fast`;
//! a stronger reading clears the strikes. Three strikes in a row mean the
//! passenger has left the bus.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Bssid, Direction, LineId, Seconds, TransitNetwork, VehicleId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApReading {
    pub bssid: Bssid,
    pub ssid: String,
    /// Received signal strength, dBm.
    pub rssi: i32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScanError {
    #[error("bssid {0} appears twice in one scan")]
    DuplicateBssid(Bssid),
    #[error("rssi {rssi} dBm for {bssid} is positive")]
    PositiveRssi { bssid: Bssid, rssi: i32 },
}

/// One radio scan. Readings are kept sorted by bssid, at most one each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScan")]
pub struct WifiScan {
    pub timestamp: Seconds,
    readings: Vec<ApReading>,
}

#[derive(Deserialize)]
struct RawScan {
    timestamp: Seconds,
    readings: Vec<ApReading>,
}

impl TryFrom<RawScan> for WifiScan {
    type Error = ScanError;

    fn try_from(raw: RawScan) -> Result<Self, Self::Error> {
        WifiScan::new(raw.timestamp, raw.readings)
    }
}

impl WifiScan {
    pub fn new(timestamp: Seconds, mut readings: Vec<ApReading>) -> Result<Self, ScanError> {
        readings.sort_by_key(|r| r.bssid);
        for pair in readings.windows(2) {
            if pair[0].bssid == pair[1].bssid {
                return Err(ScanError::DuplicateBssid(pair[0].bssid));
            }
        }
        if let Some(r) = readings.iter().find(|r| r.rssi > 0) {
            return Err(ScanError::PositiveRssi { bssid: r.bssid, rssi: r.rssi });
        }
        Ok(Self { timestamp, readings })
    }

    pub fn empty(timestamp: Seconds) -> Self {
        Self { timestamp, readings: Vec::new() }
    }

    pub fn readings(&self) -> &[ApReading] {
        &self.readings
    }

    pub fn bssids(&self) -> BTreeSet<Bssid> {
        self.readings.iter().map(|r| r.bssid).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedClass {
    Slow,
    Fast,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// A bus reading stronger than this (strictly) means the passenger is at the door.
    pub entry_rssi: i32,
    /// Readings of the current bus weaker than this (strictly) count as low.
    pub low_rssi: i32,
    pub exit_strikes: u8,
    /// Length of the dwell rule's trailing window and minimum sighting age.
    pub dwell_secs: Seconds,
    /// Fraction of scans in the dwell window that must show the bus.
    pub dwell_visibility: f64,
    pub speed_window_secs: Seconds,
    /// Change rate strictly above this is `Fast`.
    pub fast_change_rate: f64,
    /// The speed classifier only answers when strictly more access points were seen.
    pub min_access_points: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            entry_rssi: -60,
            low_rssi: -90,
            exit_strikes: 3,
            dwell_secs: 60,
            dwell_visibility: 0.5,
            speed_window_secs: 30,
            fast_change_rate: 0.10,
            min_access_points: 20,
        }
    }
}

/// Mean Jaccard distance between consecutive bssid sets; 0 for fewer than two sets.
pub fn change_rate(sets: &[BTreeSet<Bssid>]) -> f64 {
    if sets.len() < 2 {
        return 0.0;
    }
    let total: f64 = sets
        .windows(2)
        .map(|w| {
            let union = w[0].union(&w[1]).count();
            if union == 0 {
                0.0
            } else {
                w[0].symmetric_difference(&w[1]).count() as f64 / union as f64
            }
        })
        .sum();
    total / (sets.len() - 1) as f64
}

fn classify_sets(sets: &[BTreeSet<Bssid>], config: &DetectorConfig) -> SpeedClass {
    let union: BTreeSet<&Bssid> = sets.iter().flatten().collect();
    if union.len() <= config.min_access_points {
        SpeedClass::Unknown
    } else if change_rate(sets) > config.fast_change_rate {
        SpeedClass::Fast
    } else {
        SpeedClass::Slow
    }
}

/// Speed class of a window of scans (ordered by timestamp, typically the last 30 s).
pub fn classify_speed(window: &[WifiScan], config: &DetectorConfig) -> SpeedClass {
    let sets: Vec<_> = window.iter().map(WifiScan::bssids).collect();
    classify_sets(&sets, config)
}

/// Registered bus access points in a scan, strongest first (ties: smallest vehicle id).
pub fn bus_readings(scan: &WifiScan, network: &TransitNetwork) -> Vec<(VehicleId, i32)> {
    let mut out: Vec<(VehicleId, i32)> = scan
        .readings
        .iter()
        .filter(|r| r.ssid == network.bus_ssid())
        .filter_map(|r| match network.vehicle_for_bssid(&r.bssid) {
            Some(v) => Some((v.vehicle_id, r.rssi)),
            None => {
                log::warn!("bus ssid from unregistered bssid {} at t={}", r.bssid, scan.timestamp);
                None
            }
        })
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "vehicle", rename_all = "snake_case")]
pub enum RideMode {
    OnFoot,
    OnBus(VehicleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RideEventKind {
    Boarded,
    Alighted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RideEvent {
    pub kind: RideEventKind,
    pub vehicle_id: VehicleId,
    pub line_id: LineId,
    pub direction: Direction,
    pub timestamp: Seconds,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectError {
    #[error("scan at t={got} does not follow previous scan at t={previous}")]
    OutOfOrder { previous: Seconds, got: Seconds },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ScanSummary {
    timestamp: Seconds,
    bssids: BTreeSet<Bssid>,
    buses: BTreeSet<VehicleId>,
}

/// Detector state for one passenger session.
#[derive(Debug, Clone, PartialEq)]
pub struct RideDetector {
    config: DetectorConfig,
    mode: RideMode,
    low_counter: u8,
    /// When each currently-tracked bus was first seen.
    first_seen: BTreeMap<VehicleId, Seconds>,
    /// Recent scans, long enough for both the speed and dwell windows.
    window: VecDeque<ScanSummary>,
    last_timestamp: Option<Seconds>,
    last_speed: SpeedClass,
}

impl Default for RideDetector {
    fn default() -> Self {
        Self::new(DetectorConfig::default())
    }
}

impl RideDetector {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            mode: RideMode::OnFoot,
            low_counter: 0,
            first_seen: BTreeMap::new(),
            window: VecDeque::new(),
            last_timestamp: None,
            last_speed: SpeedClass::Unknown,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn mode(&self) -> &RideMode {
        &self.mode
    }

    pub fn low_counter(&self) -> u8 {
        self.low_counter
    }

    /// Speed class computed at the last scan.
    pub fn last_speed(&self) -> SpeedClass {
        self.last_speed
    }

    pub fn first_seen(&self, vehicle: &VehicleId) -> Option<Seconds> {
        self.first_seen.get(vehicle).copied()
    }

    /// Feeds one scan; returns the events it triggered (zero or one).
    pub fn step(
        &mut self,
        scan: &WifiScan,
        network: &TransitNetwork,
    ) -> Result<Vec<RideEvent>, DetectError> {
        let now = scan.timestamp;
        if let Some(previous) = self.last_timestamp {
            if now <= previous {
                return Err(DetectError::OutOfOrder { previous, got: now });
            }
        }
        self.last_timestamp = Some(now);

        let buses = bus_readings(scan, network);
        self.remember(now, scan.bssids(), buses.iter().map(|(v, _)| v.clone()).collect());

        let speed_from = now.saturating_sub(self.config.speed_window_secs);
        let sets: Vec<BTreeSet<Bssid>> = self
            .window
            .iter()
            .filter(|s| s.timestamp >= speed_from)
            .map(|s| s.bssids.clone())
            .collect();
        let speed = classify_sets(&sets, &self.config);
        self.last_speed = speed;

        let event = match self.mode.clone() {
            RideMode::OnFoot => self
                .pick_boarding(now, &buses, speed)
                .map(|vehicle| self.board(vehicle, now, network)),
            RideMode::OnBus(vehicle) => {
                let reading = buses.iter().find(|(v, _)| *v == vehicle).map(|(_, r)| *r);
                match reading {
                    Some(rssi) if rssi >= self.config.low_rssi => self.low_counter = 0,
                    _ if speed != SpeedClass::Fast => self.low_counter += 1,
                    _ => {}
                }
                (self.low_counter >= self.config.exit_strikes)
                    .then(|| self.alight(vehicle, now, network))
            }
        };
        Ok(event.into_iter().collect())
    }

    fn remember(&mut self, now: Seconds, bssids: BTreeSet<Bssid>, buses: BTreeSet<VehicleId>) {
        let keep_from = now.saturating_sub(self.config.dwell_secs.max(self.config.speed_window_secs));
        while self.window.front().is_some_and(|s| s.timestamp < keep_from) {
            self.window.pop_front();
        }
        for v in &buses {
            self.first_seen.entry(v.clone()).or_insert(now);
        }
        self.window.push_back(ScanSummary { timestamp: now, bssids, buses });
        let dwell_from = now.saturating_sub(self.config.dwell_secs);
        let recent: BTreeSet<&VehicleId> = self
            .window
            .iter()
            .filter(|s| s.timestamp >= dwell_from)
            .flat_map(|s| s.buses.iter())
            .collect();
        self.first_seen.retain(|v, _| recent.contains(v));
    }

    fn pick_boarding(
        &self,
        now: Seconds,
        buses: &[(VehicleId, i32)],
        speed: SpeedClass,
    ) -> Option<VehicleId> {
        if let Some((v, rssi)) = buses.first() {
            if *rssi > self.config.entry_rssi {
                return Some(v.clone());
            }
        }

        let dwell_from = now.saturating_sub(self.config.dwell_secs);
        let recent: Vec<&ScanSummary> =
            self.window.iter().filter(|s| s.timestamp >= dwell_from).collect();
        let mut dwellers: Vec<(Option<i32>, &VehicleId)> = self
            .first_seen
            .iter()
            .filter(|(_, &first)| now - first > self.config.dwell_secs)
            .filter(|(v, _)| {
                let seen = recent.iter().filter(|s| s.buses.contains(*v)).count();
                seen as f64 >= self.config.dwell_visibility * recent.len() as f64
            })
            .map(|(v, _)| (buses.iter().find(|(b, _)| b == v).map(|(_, r)| *r), v))
            .collect();
        // Strongest current reading first, unseen-now last, then by id.
        dwellers.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        if let Some((_, v)) = dwellers.first() {
            return Some((*v).clone());
        }

        if speed == SpeedClass::Fast {
            return buses.first().map(|(v, _)| v.clone());
        }
        None
    }

    fn board(&mut self, vehicle: VehicleId, now: Seconds, network: &TransitNetwork) -> RideEvent {
        let info = network
            .vehicle_info(&vehicle)
            .expect("bus readings only name registered vehicles");
        self.mode = RideMode::OnBus(vehicle);
        self.low_counter = 0;
        RideEvent {
            kind: RideEventKind::Boarded,
            vehicle_id: info.vehicle_id,
            line_id: info.line_id,
            direction: info.direction,
            timestamp: now,
        }
    }

    fn alight(&mut self, vehicle: VehicleId, now: Seconds, network: &TransitNetwork) -> RideEvent {
        let info = network.vehicle_info(&vehicle).expect("current vehicle is registered");
        self.mode = RideMode::OnFoot;
        self.low_counter = 0;
        self.first_seen.clear();
        RideEvent {
            kind: RideEventKind::Alighted,
            vehicle_id: info.vehicle_id,
            line_id: info.line_id,
            direction: info.direction,
            timestamp: now,
        }
    }
}

/// Value-style step: returns the successor state and the emitted events.
pub fn detect_step(
    state: &RideDetector,
    scan: &WifiScan,
    network: &TransitNetwork,
) -> Result<(RideDetector, Vec<RideEvent>), DetectError> {
    let mut next = state.clone();
    let events = next.step(scan, network)?;
    Ok((next, events))
}
