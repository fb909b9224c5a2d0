//! Seeded random small networks for planner checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use ubn_core::geo::GeoPoint;
use ubn_core::network::{
    Bssid, DirectionDoc, LineDoc, LineId, NetworkDocument, RunDoc, StopDoc, StopId, StopTime,
    TransitNetwork, VehicleId,
};
use ubn_core::planner::{brute_force_oracle, plan_trip, PlanError, PlannerConfig};

pub const ANCHOR: (f64, f64) = (40.4168, -3.7038);

pub fn anchor() -> GeoPoint {
    GeoPoint::new(ANCHOR.0, ANCHOR.1).unwrap()
}

/// A network of 2..=12 stops in a 1.2 km square, 1..=3 lines of 2..=6 stops,
/// 0..=4 runs per line.
pub fn random_network(seed: u64) -> TransitNetwork {
    let mut rng = StdRng::seed_from_u64(seed);
    let origin = anchor();
    let n_stops = rng.random_range(2..=12usize);
    let stops: Vec<StopDoc> = (0..n_stops)
        .map(|i| {
            let p = origin.offset(rng.random_range(0.0..1200.0), rng.random_range(0.0..1200.0));
            StopDoc { id: StopId::new(format!("s{i:02}")), name: format!("Stop {i}"), lat: p.lat, lon: p.lon }
        })
        .collect();
    let n_lines = rng.random_range(1..=3usize);
    let mut lines = Vec::new();
    let mut runs = Vec::new();
    let mut bssid = 0u8;
    for l in 0..n_lines {
        let len = rng.random_range(2..=n_stops.min(6));
        let mut order: Vec<usize> = (0..n_stops).collect();
        for i in 0..len {
            let j = rng.random_range(i..n_stops);
            order.swap(i, j);
        }
        let forward: Vec<usize> = order[..len].to_vec();
        let backward: Vec<usize> = forward.iter().rev().copied().collect();
        let line_id = LineId::new(format!("L{l}"));
        let dir_doc = |d: u8, seq: &[usize]| DirectionDoc {
            direction: d.try_into().unwrap(),
            stops: seq.iter().map(|&i| stops[i].id.clone()).collect(),
            shape: seq.iter().map(|&i| [stops[i].lat, stops[i].lon]).collect(),
        };
        lines.push(LineDoc {
            id: line_id.clone(),
            directions: vec![dir_doc(0, &forward), dir_doc(1, &backward)],
        });
        for r in 0..rng.random_range(0..=4usize) {
            let d: u8 = rng.random_range(0..=1);
            let seq = if d == 0 { &forward } else { &backward };
            let speed = rng.random_range(5.0..12.0);
            let mut t: u32 = rng.random_range(28_800..30_600);
            let mut stop_times = Vec::new();
            for (k, &i) in seq.iter().enumerate() {
                if k > 0 {
                    let prev = &stops[seq[k - 1]];
                    let a = GeoPoint::new(prev.lat, prev.lon).unwrap();
                    let b = GeoPoint::new(stops[i].lat, stops[i].lon).unwrap();
                    t += (ubn_core::geo::haversine_distance(&a, &b) / speed).ceil() as u32 + 1;
                }
                let dwell = rng.random_range(0..=30);
                stop_times.push(StopTime { stop: stops[i].id.clone(), arrival: t, departure: t + dwell });
                t += dwell;
            }
            bssid += 1;
            runs.push(RunDoc {
                vehicle_id: VehicleId::new(format!("v{l}{r}")),
                bssid: Bssid([2, 0, 0, 0, 0, bssid]),
                line: line_id.clone(),
                direction: d.try_into().unwrap(),
                stop_times,
            });
        }
    }
    let doc = NetworkDocument { bus_ssid: "Fleet".into(), stops, lines, vehicle_runs: runs };
    TransitNetwork::from_document(doc).expect("generated network is valid")
}

/// Origin and destination: anywhere, near a stop, or exactly on one.
pub fn random_query(seed: u64, network: &TransitNetwork) -> (GeoPoint, GeoPoint, u32) {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let stops: Vec<GeoPoint> = network.stops().map(|s| s.location).collect();
    let point = |rng: &mut StdRng| {
        let roll: f64 = rng.random();
        if roll < 0.2 {
            stops[rng.random_range(0..stops.len())]
        } else if roll < 0.7 {
            let s = stops[rng.random_range(0..stops.len())];
            s.offset(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0))
        } else {
            anchor().offset(rng.random_range(-300.0..1500.0), rng.random_range(-300.0..1500.0))
        }
    };
    let o = point(&mut rng);
    let d = point(&mut rng);
    (o, d, rng.random_range(28_500..30_300))
}

pub struct EquivalenceOutcome {
    pub seed: u64,
    pub planner: Option<u32>,
    pub oracle: Option<u32>,
}

/// Runs `count` seeded cases; returns every case (matching or not).
pub fn equivalence(count: u64) -> Vec<EquivalenceOutcome> {
    let config = PlannerConfig::default();
    (0..count)
        .map(|seed| {
            let network = random_network(seed);
            let (o, d, t) = random_query(seed, &network);
            let planner = match plan_trip(&network, o, d, t, &config) {
                Ok(p) => {
                    p.check_connectivity(&network, 1.0).expect("connected plan");
                    Some(p.arrival)
                }
                Err(PlanError::NoRoute) => None,
            };
            let oracle = brute_force_oracle(&network, o, d, t, &config).expect("network within oracle bounds");
            EquivalenceOutcome { seed, planner, oracle }
        })
        .collect()
}
