//! Table of detector threshold cases against the gridtown fleet.

use ubn_core::detection::{ApReading, RideDetector, RideEventKind, RideMode, WifiScan};
use ubn_core::network::{Bssid, TransitNetwork, VehicleId};

use super::gridtown;

#[derive(Clone, Copy)]
pub enum Amb {
    None,
    /// The same `n` access points in every scan.
    Static(u16),
    /// `n` access points, shifted by `shift` ids per 5 s of scan time.
    Moving(u16, u16),
}

pub struct Scan {
    pub t: u32,
    /// (vehicle suffix as in `bus-11`, rssi)
    pub buses: Vec<(&'static str, i32)>,
    pub amb: Amb,
    /// Extra readings: (bssid, ssid, rssi).
    pub extra: Vec<(&'static str, &'static str, i32)>,
}

pub struct Case {
    pub name: &'static str,
    pub scans: Vec<Scan>,
    pub events: Vec<(RideEventKind, &'static str, u32)>,
    /// Expected vehicle suffix when on a bus at the end, `None` for on foot.
    pub final_bus: Option<&'static str>,
    pub final_counter: u8,
}

fn bus_bssid(suffix: &str) -> Bssid {
    format!("02:1b:00:00:00:{suffix}").parse().unwrap()
}

fn ambient(id: u16) -> ApReading {
    ApReading {
        bssid: Bssid([0x0a, 0, 0, 0, (id >> 8) as u8, id as u8]),
        ssid: format!("home-{id}"),
        rssi: -70,
    }
}

pub fn build(scan: &Scan) -> WifiScan {
    let mut readings: Vec<ApReading> = match scan.amb {
        Amb::None => Vec::new(),
        Amb::Static(n) => (0..n).map(ambient).collect(),
        Amb::Moving(n, shift) => {
            let base = (scan.t / 5) as u16 * shift;
            (base..base + n).map(ambient).collect()
        }
    };
    for (suffix, rssi) in &scan.buses {
        readings.push(ApReading { bssid: bus_bssid(suffix), ssid: "EMT-Bus".into(), rssi: *rssi });
    }
    for (bssid, ssid, rssi) in &scan.extra {
        readings.push(ApReading { bssid: bssid.parse().unwrap(), ssid: (*ssid).into(), rssi: *rssi });
    }
    WifiScan::new(scan.t, readings).unwrap()
}

fn s(t: u32, buses: &[(&'static str, i32)], amb: Amb) -> Scan {
    Scan { t, buses: buses.to_vec(), amb, extra: Vec::new() }
}

/// Scans every 5 s over `[from, to]`, with buses chosen per timestamp.
fn series(from: u32, to: u32, amb: Amb, buses: impl Fn(u32) -> Vec<(&'static str, i32)>) -> Vec<Scan> {
    (from..=to).step_by(5).map(|t| Scan { t, buses: buses(t), amb, extra: Vec::new() }).collect()
}

/// A first scan that boards bus-11 at t=0 through the entry rule.
fn boarded() -> Vec<Scan> {
    vec![s(0, &[("11", -50)], Amb::Static(25))]
}

fn then(mut a: Vec<Scan>, b: Vec<Scan>) -> Vec<Scan> {
    a.extend(b);
    a
}

use RideEventKind::{Alighted as A, Boarded as B};

pub fn cases() -> Vec<Case> {
    let slow = Amb::Static(25);
    let fast = Amb::Moving(25, 4);
    vec![
        Case {
            name: "entry: -59 dBm boards",
            scans: vec![s(0, &[("11", -59)], Amb::None)],
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "entry: -60 dBm is not above the threshold",
            scans: vec![s(0, &[("11", -60)], Amb::None)],
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "entry: strongest bus is chosen",
            scans: vec![s(0, &[("11", -70), ("12", -55)], Amb::None)],
            events: vec![(B, "12", 0)],
            final_bus: Some("12"),
            final_counter: 0,
        },
        Case {
            name: "entry: equal rssi goes to the smaller vehicle id",
            scans: vec![s(0, &[("12", -55), ("11", -55)], Amb::None)],
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "entry: strongest bus below threshold, weaker ones ignored",
            scans: vec![s(0, &[("21", -61), ("22", -80)], slow)],
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "empty scan stays on foot",
            scans: vec![s(0, &[], Amb::None)],
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "ambient access points only",
            scans: series(0, 120, slow, |_| vec![]),
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "bus ssid with unregistered bssid is ignored",
            scans: vec![Scan {
                t: 0,
                buses: vec![],
                amb: Amb::None,
                extra: vec![("02:1b:00:00:00:99", "EMT-Bus", -40)],
            }],
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "registered bssid under another ssid is ignored",
            scans: vec![Scan {
                t: 0,
                buses: vec![],
                amb: Amb::None,
                extra: vec![("02:1b:00:00:00:11", "cafe", -40)],
            }],
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "dwell: continuous sighting boards once first seen more than 60 s ago",
            scans: series(0, 80, slow, |_| vec![("11", -75)]),
            events: vec![(B, "11", 65)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "dwell: every other scan is enough",
            // At t=70 the window [10, 70] holds 13 scans and the bus is in 7.
            // At t=65 it is in 6 of 13.
            scans: series(0, 70, slow, |t| if t % 10 == 0 { vec![("11", -75)] } else { vec![] }),
            events: vec![(B, "11", 70)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "dwell: exactly half the scans of the window is enough",
            // 12 s cadence: at t=72 the window [12, 72] holds 6 scans, the bus
            // is in 12, 36 and 60, and was first seen at 0.
            scans: (0..=72)
                .step_by(12)
                .map(|t| Scan {
                    t,
                    buses: if [0, 12, 36, 60].contains(&t) { vec![("11", -75)] } else { vec![] },
                    amb: slow,
                    extra: Vec::new(),
                })
                .collect(),
            events: vec![(B, "11", 72)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "dwell: one scan in three is not enough",
            scans: series(0, 300, slow, |t| if t % 15 == 0 { vec![("11", -75)] } else { vec![] }),
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "dwell: first sighting is forgotten after a minute unseen",
            scans: series(0, 175, slow, |t| {
                if t <= 30 || t >= 105 { vec![("11", -75)] } else { vec![] }
            }),
            events: vec![(B, "11", 170)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "dwell: two qualifying buses, the stronger one boards",
            scans: series(0, 65, slow, |_| vec![("11", -80), ("12", -75)]),
            events: vec![(B, "12", 65)],
            final_bus: Some("12"),
            final_counter: 0,
        },
        Case {
            name: "fast: weak bus reading boards as soon as movement is detected",
            scans: series(0, 10, fast, |_| vec![("11", -85)]),
            events: vec![(B, "11", 5)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "fast: no bus reading, no boarding",
            scans: series(0, 60, fast, |_| vec![]),
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "slow: weak bus reading for under a minute does not board",
            scans: series(0, 60, slow, |_| vec![("11", -85)]),
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "fast churn among 20 or fewer access points is unknown, not fast",
            // 10 ambient access points shifting by one per scan: 17 distinct
            // bssids in 30 s including the bus.
            scans: series(0, 60, Amb::Moving(10, 1), |_| vec![("11", -85)]),
            events: vec![],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "exit: -93, absent, -95 at slow speed alights on the third",
            scans: then(
                boarded(),
                vec![s(5, &[("11", -93)], slow), s(10, &[], slow), s(15, &[("11", -95)], slow)],
            ),
            events: vec![(B, "11", 0), (A, "11", 15)],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "exit: a good reading after two strikes resets the counter",
            scans: then(
                boarded(),
                vec![s(5, &[("11", -93)], slow), s(10, &[("11", -95)], slow), s(15, &[("11", -70)], slow)],
            ),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "exit: -90 dBm is not low",
            scans: then(boarded(), vec![s(5, &[("11", -91)], slow), s(10, &[("11", -90)], slow)]),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "exit: -91 dBm is low",
            scans: then(boarded(), vec![s(5, &[("11", -91)], slow), s(10, &[("11", -91)], slow)]),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 2,
        },
        Case {
            name: "exit: unknown speed counts strikes",
            scans: then(
                vec![s(0, &[("11", -50)], Amb::None)],
                vec![s(5, &[], Amb::None), s(10, &[], Amb::None), s(15, &[], Amb::None)],
            ),
            events: vec![(B, "11", 0), (A, "11", 15)],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "exit: fast speed leaves the counter unchanged",
            scans: then(
                vec![s(0, &[("11", -50)], slow), s(5, &[("11", -88)], slow)],
                // One strike at slow speed, then absent while moving.
                vec![s(10, &[], slow)]
                    .into_iter()
                    .chain(series(15, 60, fast, |_| vec![]))
                    .collect(),
            ),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 1,
        },
        Case {
            name: "exit: fast speed with a good reading still resets",
            scans: then(
                boarded(),
                vec![s(5, &[], slow), s(10, &[], slow)]
                    .into_iter()
                    .chain(series(15, 20, fast, |_| vec![("11", -88)]))
                    .collect(),
            ),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "exit: alternating pairs of strikes never alight",
            scans: then(
                boarded(),
                series(5, 200, slow, |t| if (t / 5) % 3 == 0 { vec![("11", -80)] } else { vec![] }),
            ),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 1,
        },
        Case {
            name: "on a bus, a stronger other bus is ignored",
            scans: then(boarded(), vec![s(5, &[("11", -88), ("12", -40)], slow)]),
            events: vec![(B, "11", 0)],
            final_bus: Some("11"),
            final_counter: 0,
        },
        Case {
            name: "on a bus, another bus does not count as the current one",
            scans: then(
                boarded(),
                vec![s(5, &[("12", -40)], slow), s(10, &[("12", -40)], slow), s(15, &[("12", -40)], slow)],
            ),
            events: vec![(B, "11", 0), (A, "11", 15)],
            final_bus: None,
            final_counter: 0,
        },
        Case {
            name: "after alighting, a new entry boards again",
            scans: then(
                boarded(),
                vec![s(5, &[], slow), s(10, &[], slow), s(15, &[], slow), s(20, &[("12", -50)], slow)],
            ),
            events: vec![(B, "11", 0), (A, "11", 15), (B, "12", 20)],
            final_bus: Some("12"),
            final_counter: 0,
        },
        Case {
            name: "after alighting, the dwell rule starts over",
            // Bus-11 is seen throughout; sightings up to the alighting are
            // forgotten, so the dwell clock restarts at t=20.
            scans: then(
                boarded(),
                then(
                    vec![s(5, &[("11", -95)], slow), s(10, &[("11", -95)], slow), s(15, &[("11", -95)], slow)],
                    series(20, 90, slow, |_| vec![("11", -80)]),
                ),
            ),
            events: vec![(B, "11", 0), (A, "11", 15), (B, "11", 85)],
            final_bus: Some("11"),
            final_counter: 0,
        },
    ]
}

pub fn run_case(network: &TransitNetwork, case: &Case) -> Result<(), String> {
    let mut detector = RideDetector::default();
    let mut events = Vec::new();
    for scan in &case.scans {
        let out = detector.step(&build(scan), network).map_err(|e| e.to_string())?;
        events.extend(out.into_iter().map(|e| (e.kind, e.vehicle_id, e.timestamp)));
    }
    let expected: Vec<(RideEventKind, VehicleId, u32)> = case
        .events
        .iter()
        .map(|(k, v, t)| (*k, VehicleId::new(format!("bus-{v}")), *t))
        .collect();
    if events != expected {
        return Err(format!("events {events:?}, expected {expected:?}"));
    }
    let expected_mode = match case.final_bus {
        Some(v) => RideMode::OnBus(VehicleId::new(format!("bus-{v}"))),
        None => RideMode::OnFoot,
    };
    if *detector.mode() != expected_mode {
        return Err(format!("mode {:?}, expected {expected_mode:?}", detector.mode()));
    }
    if detector.low_counter() != case.final_counter {
        return Err(format!("low counter {}, expected {}", detector.low_counter(), case.final_counter));
    }
    Ok(())
}

pub fn run_table() -> Vec<(&'static str, Result<(), String>)> {
    let network = gridtown();
    cases().iter().map(|c| (c.name, run_case(&network, c))).collect()
}
