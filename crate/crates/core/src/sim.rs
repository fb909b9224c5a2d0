//! Deterministic simulated city.
//!
//! Buses follow their timetables along the route shapes: they appear at
//! their first stop at its scheduled arrival, dwell at every stop from
//! arrival to departure with doors open, move at constant speed between
//! stops and leave service after departing the terminal. One passenger
//! walks, waits, boards and alights on command. Every `scan_period` the world
//! synthesises a Wifi scan at the passenger's position and every
//! `gps_period` a noisy GPS fix.
//!
//! The radio model is log-distance path loss,
//! `rssi = p0 - 10 n log10(max(d, 1))`, plus a shadowing term. Bus access
//! points get fresh gaussian noise and beacon dropout on every scan and an
//! extra body loss when heard from outside. Ambient access points get one
//! fixed shadowing offset each and are otherwise stable, so that a standing
//! passenger sees an unchanging set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{ApReading, WifiScan};
use crate::geo::{haversine_distance, GeoPoint};
use crate::network::{Bssid, Direction, LineId, Seconds, StopId, TransitNetwork, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioModel {
    /// Bus access point power at 1 m.
    pub p0_dbm: f64,
    pub path_loss_exponent: f64,
    /// Per-scan shadowing of bus access points.
    pub shadow_sigma_db: f64,
    /// Extra loss when a bus is heard from outside (bus body, people).
    pub body_loss_db: f64,
    /// Readings weaker than this are not reported.
    pub cutoff_dbm: f64,
    /// Own-bus level while riding: uniform in this range plus gaussian noise
    /// clipped at two sigma.
    pub in_bus_low_dbm: f64,
    pub in_bus_high_dbm: f64,
    pub in_bus_sigma_db: f64,
    /// Ambient access point power at 1 m.
    pub ambient_p0_dbm: f64,
    /// Spread of the fixed per-access-point shadowing offset.
    pub ambient_shadow_sigma_db: f64,
}

impl Default for RadioModel {
    fn default() -> Self {
        Self {
            p0_dbm: -40.0,
            path_loss_exponent: 3.0,
            shadow_sigma_db: 4.0,
            body_loss_db: 10.0,
            cutoff_dbm: -96.0,
            in_bus_low_dbm: -93.0,
            in_bus_high_dbm: -87.0,
            in_bus_sigma_db: 2.0,
            ambient_p0_dbm: -36.0,
            ambient_shadow_sigma_db: 4.0,
        }
    }
}

impl RadioModel {
    /// Noise-free level at distance `d` for transmit power `p0`.
    pub fn path_loss(&self, p0: f64, d: f64) -> f64 {
        p0 - 10.0 * self.path_loss_exponent * d.max(1.0).log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub tick: Seconds,
    pub scan_period: Seconds,
    pub gps_period: Seconds,
    pub gps_noise_sigma: f64,
    pub ambient_ap_count: usize,
    /// Ambient access points are scattered over the network's bounding box
    /// grown by this margin on every side.
    pub ambient_margin_m: f64,
    pub dropout_base: f64,
    pub walk_speed_mps: f64,
    /// A passenger can board a dwelling bus no farther than this.
    pub board_radius_m: f64,
    pub radio: RadioModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tick: 1,
            scan_period: 5,
            gps_period: 5,
            gps_noise_sigma: 8.0,
            ambient_ap_count: 60,
            ambient_margin_m: 100.0,
            dropout_base: 0.2,
            walk_speed_mps: 1.2,
            board_radius_m: 15.0,
            radio: RadioModel::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("{0} must be a probability in [0, 1]")]
    Probability(&'static str),
    #[error("in-bus range is empty")]
    InBusRange,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("tick", self.tick), ("scan_period", self.scan_period), ("gps_period", self.gps_period)] {
            if v == 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if !(0.0..=1.0).contains(&self.dropout_base) {
            return Err(ConfigError::Probability("dropout_base"));
        }
        if self.walk_speed_mps <= 0.0 {
            return Err(ConfigError::NonPositive("walk_speed_mps"));
        }
        if self.radio.in_bus_low_dbm > self.radio.in_bus_high_dbm {
            return Err(ConfigError::InBusRange);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientAp {
    pub bssid: Bssid,
    pub ssid: String,
    pub location: GeoPoint,
    pub shadow_db: f64,
}

/// Where a vehicle is at the current clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub vehicle_id: VehicleId,
    pub line_id: LineId,
    pub direction: Direction,
    pub position: GeoPoint,
    /// Distance along the route shape.
    pub along: f64,
    /// Pattern index of the stop the vehicle is at or heading to.
    pub next_stop_index: usize,
    pub doors_open: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PassengerMode {
    Walking { target: GeoPoint },
    Waiting,
    OnBoard { vehicle_id: VehicleId, boarded_at: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passenger {
    pub position: GeoPoint,
    pub mode: PassengerMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum PassengerCommand {
    WalkToward { target: GeoPoint },
    Wait,
    Board { vehicle_id: VehicleId },
    Alight,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum CommandError {
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("doors closed")]
    DoorsClosed,
    #[error("vehicle is {0} m away")]
    TooFar(u32),
    #[error("already on board")]
    AlreadyOnBoard,
    #[error("not on board")]
    NotOnBoard,
}

/// Passenger-side facts, logged for evaluation only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum GroundTruth {
    Boarded { vehicle_id: VehicleId, stop: StopId },
    Alighted { vehicle_id: VehicleId, stop: StopId },
}

/// Next-stop feed from the fleet: sent when a vehicle enters service and
/// whenever it departs a stop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusProgress {
    pub vehicle_id: VehicleId,
    pub line_id: LineId,
    pub direction: Direction,
    pub next_stop: StopId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    GroundTruth(GroundTruth),
    BusProgress(BusProgress),
    Gps(GeoPoint),
    Scan(WifiScan),
}

/// Everything needed to advance the city one tick at a time.
#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimConfig,
    clock: Seconds,
    ambient: Vec<AmbientAp>,
    vehicles: BTreeMap<VehicleId, VehicleState>,
    passenger: Passenger,
    radio_rng: ChaCha8Rng,
    gps_rng: ChaCha8Rng,
}

const STREAM_FIELD: u64 = 1;
const STREAM_RADIO: u64 = 2;
const STREAM_GPS: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Position of a run at `t`, or `None` outside its service span.
pub fn vehicle_at(network: &TransitNetwork, vehicle: &VehicleId, t: Seconds) -> Option<VehicleState> {
    let run = network.run(vehicle)?;
    if t < run.starts_at() || t >= run.ends_at() {
        return None;
    }
    let pattern = network.pattern(&run.line_id, run.direction)?;
    let times = &run.stop_times;
    let (along, next_stop_index, doors_open) = match times.iter().position(|st| t < st.departure) {
        Some(k) if t >= times[k].arrival => (pattern.stop_offsets[k], k, true),
        Some(k) => {
            let (from, to) = (&times[k - 1], &times[k]);
            let frac = f64::from(t - from.departure) / f64::from(to.arrival - from.departure);
            let (a, b) = (pattern.stop_offsets[k - 1], pattern.stop_offsets[k]);
            (a + frac * (b - a), k, false)
        }
        None => return None,
    };
    Some(VehicleState {
        vehicle_id: run.vehicle_id.clone(),
        line_id: run.line_id.clone(),
        direction: run.direction,
        position: pattern.shape.point_at(along),
        along,
        next_stop_index,
        doors_open,
    })
}

impl SimWorld {
    pub fn new(
        network: &TransitNetwork,
        config: SimConfig,
        start_time: Seconds,
        start: GeoPoint,
    ) -> Result<SimWorld, ConfigError> {
        config.validate()?;
        let ambient = ambient_field(network, &config);
        let mut world = SimWorld {
            radio_rng: rng_for(config.seed, STREAM_RADIO),
            gps_rng: rng_for(config.seed, STREAM_GPS),
            config,
            clock: start_time,
            ambient,
            vehicles: BTreeMap::new(),
            passenger: Passenger { position: start, mode: PassengerMode::Waiting },
        };
        world.vehicles = world.vehicles_at(network, start_time);
        Ok(world)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn clock(&self) -> Seconds {
        self.clock
    }

    pub fn passenger(&self) -> &Passenger {
        &self.passenger
    }

    pub fn ambient(&self) -> &[AmbientAp] {
        &self.ambient
    }

    /// Vehicles in service at the current clock.
    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.values()
    }

    pub fn vehicle(&self, id: &VehicleId) -> Option<&VehicleState> {
        self.vehicles.get(id)
    }

    fn vehicles_at(&self, network: &TransitNetwork, t: Seconds) -> BTreeMap<VehicleId, VehicleState> {
        network
            .runs()
            .iter()
            .filter_map(|r| vehicle_at(network, &r.vehicle_id, t))
            .map(|v| (v.vehicle_id.clone(), v))
            .collect()
    }

    /// Distance from the passenger to the nearest bus in service.
    pub fn nearest_bus_distance(&self) -> Option<f64> {
        self.vehicles
            .values()
            .map(|v| haversine_distance(&v.position, &self.passenger.position))
            .min_by(f64::total_cmp)
    }

    /// Applies a passenger command at the current clock. A rejected command
    /// leaves the world untouched.
    pub fn apply(
        &mut self,
        network: &TransitNetwork,
        command: &PassengerCommand,
    ) -> Result<Option<GroundTruth>, CommandError> {
        match command {
            PassengerCommand::WalkToward { target } => {
                if matches!(self.passenger.mode, PassengerMode::OnBoard { .. }) {
                    return Err(CommandError::AlreadyOnBoard);
                }
                self.passenger.mode = PassengerMode::Walking { target: *target };
                Ok(None)
            }
            PassengerCommand::Wait => {
                if !matches!(self.passenger.mode, PassengerMode::OnBoard { .. }) {
                    self.passenger.mode = PassengerMode::Waiting;
                }
                Ok(None)
            }
            PassengerCommand::Board { vehicle_id } => {
                if matches!(self.passenger.mode, PassengerMode::OnBoard { .. }) {
                    return Err(CommandError::AlreadyOnBoard);
                }
                if network.run(vehicle_id).is_none() {
                    return Err(CommandError::UnknownVehicle(vehicle_id.clone()));
                }
                let v = match self.vehicles.get(vehicle_id) {
                    Some(v) if v.doors_open => v,
                    _ => return Err(CommandError::DoorsClosed),
                };
                let d = haversine_distance(&v.position, &self.passenger.position);
                if d > self.config.board_radius_m {
                    return Err(CommandError::TooFar(d.round() as u32));
                }
                let stop = self.stop_of(network, v);
                self.passenger.mode =
                    PassengerMode::OnBoard { vehicle_id: vehicle_id.clone(), boarded_at: v.next_stop_index };
                self.passenger.position = v.position;
                Ok(Some(GroundTruth::Boarded { vehicle_id: vehicle_id.clone(), stop }))
            }
            PassengerCommand::Alight => {
                let PassengerMode::OnBoard { vehicle_id, .. } = &self.passenger.mode else {
                    return Err(CommandError::NotOnBoard);
                };
                let v = match self.vehicles.get(vehicle_id) {
                    Some(v) if v.doors_open => v,
                    _ => return Err(CommandError::DoorsClosed),
                };
                let stop = self.stop_of(network, v);
                let vehicle_id = vehicle_id.clone();
                self.passenger.position = network.stop(&stop).expect("pattern stop").location;
                self.passenger.mode = PassengerMode::Waiting;
                Ok(Some(GroundTruth::Alighted { vehicle_id, stop }))
            }
        }
    }

    fn stop_of(&self, network: &TransitNetwork, v: &VehicleState) -> StopId {
        let pattern = network.pattern(&v.line_id, v.direction).expect("run pattern");
        pattern.stops[v.next_stop_index].clone()
    }

    /// Advances the clock by one tick and returns what happened at the new
    /// time, in a fixed order: ground truth, bus feed, GPS, scan.
    pub fn step(&mut self, network: &TransitNetwork) -> Vec<Observation> {
        let t = self.clock + self.config.tick;
        let next = self.vehicles_at(network, t);
        let mut out = Vec::new();

        // A passenger still aboard when the bus leaves service gets off at the terminal.
        if let PassengerMode::OnBoard { vehicle_id, .. } = &self.passenger.mode {
            if !next.contains_key(vehicle_id) {
                let run = network.run(vehicle_id).expect("boarded run");
                let stop = run.stop_times.last().expect("non-empty run").stop.clone();
                out.push(Observation::GroundTruth(GroundTruth::Alighted {
                    vehicle_id: vehicle_id.clone(),
                    stop: stop.clone(),
                }));
                self.passenger.position = network.stop(&stop).expect("terminal").location;
                self.passenger.mode = PassengerMode::Waiting;
            }
        }

        for (id, v) in &next {
            let moved_on = match self.vehicles.get(id) {
                None => true,
                Some(prev) => prev.next_stop_index != v.next_stop_index,
            };
            if moved_on {
                let pattern = network.pattern(&v.line_id, v.direction).expect("run pattern");
                out.push(Observation::BusProgress(BusProgress {
                    vehicle_id: id.clone(),
                    line_id: v.line_id.clone(),
                    direction: v.direction,
                    next_stop: pattern.stops[v.next_stop_index].clone(),
                    index: v.next_stop_index,
                }));
            }
        }
        self.vehicles = next;
        self.clock = t;

        match self.passenger.mode.clone() {
            PassengerMode::Walking { target } => {
                let step = self.config.walk_speed_mps * f64::from(self.config.tick);
                let d = haversine_distance(&self.passenger.position, &target);
                if d <= step {
                    self.passenger.position = target;
                    self.passenger.mode = PassengerMode::Waiting;
                } else {
                    self.passenger.position = self.passenger.position.lerp(&target, step / d);
                }
            }
            PassengerMode::OnBoard { vehicle_id, .. } => {
                self.passenger.position = self.vehicles[&vehicle_id].position;
            }
            PassengerMode::Waiting => {}
        }

        if t.is_multiple_of(self.config.gps_period) {
            out.push(Observation::Gps(self.gps_fix()));
        }
        if t.is_multiple_of(self.config.scan_period) {
            out.push(Observation::Scan(self.synth_scan(network)));
        }
        out
    }

    fn gps_fix(&mut self) -> GeoPoint {
        let noise = Normal::new(0.0, self.config.gps_noise_sigma).expect("finite sigma");
        let east = noise.sample(&mut self.gps_rng);
        let north = noise.sample(&mut self.gps_rng);
        self.passenger.position.offset(east, north)
    }

    /// Wifi scan at the passenger's position.
    pub fn synth_scan(&mut self, network: &TransitNetwork) -> WifiScan {
        let radio = self.config.radio.clone();
        let here = self.passenger.position;
        let mut readings = Vec::new();

        for ap in &self.ambient {
            let d = haversine_distance(&here, &ap.location);
            let rssi = radio.path_loss(radio.ambient_p0_dbm, d) + ap.shadow_db;
            if rssi >= radio.cutoff_dbm {
                readings.push(ApReading { bssid: ap.bssid, ssid: ap.ssid.clone(), rssi: rssi.round() as i32 });
            }
        }

        let shadow = Normal::new(0.0, radio.shadow_sigma_db).expect("finite sigma");
        let in_bus_noise = Normal::new(0.0, radio.in_bus_sigma_db).expect("finite sigma");
        let in_bus_level =
            Uniform::new_inclusive(radio.in_bus_low_dbm, radio.in_bus_high_dbm).expect("ordered range");
        let riding = match &self.passenger.mode {
            PassengerMode::OnBoard { vehicle_id, boarded_at } => Some((vehicle_id.clone(), *boarded_at)),
            _ => None,
        };
        for v in self.vehicles.values() {
            let rssi = match &riding {
                // Still at the door: the passenger is right under the access point.
                Some((id, at)) if *id == v.vehicle_id && v.doors_open && v.next_stop_index == *at => {
                    radio.p0_dbm + shadow.sample(&mut self.radio_rng)
                }
                // Noise is clipped at two sigma so the band stays bounded.
                Some((id, _)) if *id == v.vehicle_id => {
                    let k = 2.0 * radio.in_bus_sigma_db;
                    in_bus_level.sample(&mut self.radio_rng) + in_bus_noise.sample(&mut self.radio_rng).clamp(-k, k)
                }
                _ => {
                    let d = haversine_distance(&here, &v.position);
                    radio.path_loss(radio.p0_dbm, d) - radio.body_loss_db + shadow.sample(&mut self.radio_rng)
                }
            };
            if rssi < radio.cutoff_dbm {
                continue;
            }
            if self.radio_rng.random::<f64>() < self.config.dropout_base {
                continue;
            }
            let run = network.run(&v.vehicle_id).expect("vehicle has a run");
            readings.push(ApReading {
                bssid: run.bssid,
                ssid: network.bus_ssid().to_string(),
                rssi: (rssi.round() as i32).min(0),
            });
        }
        WifiScan::new(self.clock, readings).expect("bssids are unique")
    }
}

/// Ambient access points scattered uniformly over the padded bounding box.
/// Bssids are locally administered addresses that avoid the fleet's.
pub fn ambient_field(network: &TransitNetwork, config: &SimConfig) -> Vec<AmbientAp> {
    let mut rng = rng_for(config.seed, STREAM_FIELD);
    let (sw, ne) = network.bounding_box();
    let sw = sw.offset(-config.ambient_margin_m, -config.ambient_margin_m);
    let (width, height) = {
        let ne = ne.offset(config.ambient_margin_m, config.ambient_margin_m);
        sw.local_xy(&ne)
    };
    let shadow = Normal::new(0.0, config.radio.ambient_shadow_sigma_db).expect("finite sigma");
    let fleet: std::collections::BTreeSet<Bssid> = network.runs().iter().map(|r| r.bssid).collect();
    let mut used = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(config.ambient_ap_count);
    while out.len() < config.ambient_ap_count {
        let mut bytes: [u8; 6] = rng.random();
        bytes[0] = (bytes[0] & 0xfc) | 0x02;
        let bssid = Bssid(bytes);
        if fleet.contains(&bssid) || !used.insert(bssid) {
            continue;
        }
        let east = rng.random::<f64>() * width;
        let north = rng.random::<f64>() * height;
        out.push(AmbientAp {
            bssid,
            ssid: format!("net-{:02x}{:02x}", bytes[4], bytes[5]),
            location: sw.offset(east, north),
            shadow_db: shadow.sample(&mut rng),
        });
    }
    out
}
