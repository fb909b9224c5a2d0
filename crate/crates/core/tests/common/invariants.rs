//! Property suites shared by the invariant tests and the acceptance report.
//! Each suite runs a fixed number of seeded cases through proptest.

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use ubn_core::detection::{
    change_rate, detect_step, ApReading, RideDetector, RideEvent, RideEventKind, WifiScan,
};
use ubn_core::engine::run_scenario;
use ubn_core::geo::GeoPoint;
use ubn_core::network::{Bssid, Direction, LineId, StopId, TransitNetwork, VehicleId};
use ubn_core::planner::{plan_trip, BusRideSegment, PlannerConfig, Segment, TripPlan};
use ubn_core::trace::{read_trace, recorded_ride_events, replay, to_jsonl};
use ubn_core::tracker::{
    MessageKind, NavigationMessage, ReplanChoice, Severity, Templates, Tracker, TrackerConfig, TripActivity,
};

use super::{gridtown, scenario};

pub struct Suite {
    pub name: &'static str,
    pub cases: u32,
    pub outcome: Result<(), String>,
}

fn run_suite<S: Strategy>(
    name: &'static str,
    cases: u32,
    seed: u8,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Suite {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut key = [0u8; 32];
    key[0] = seed;
    let mut runner = TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &key));
    let outcome = runner.run(&strategy, test).map_err(|e| e.to_string());
    Suite { name, cases, outcome }
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

// ---------------------------------------------------------------------------
// Detector streams
// ---------------------------------------------------------------------------

/// A stretch of scans with the same radio situation.
#[derive(Debug, Clone)]
pub struct Block {
    /// Index into the fleet, or none.
    bus: Option<usize>,
    rssi: i32,
    /// Bit k set: the bus is heard on the block's k-th scan.
    present: u32,
    noise: u32,
    second: Option<(usize, i32)>,
    len: u32,
    ambient: u16,
    drift: u16,
}

fn block() -> impl Strategy<Value = Block> {
    (
        prop::option::weighted(0.8, 0..4usize),
        -100..-35i32,
        any::<u32>(),
        any::<u32>(),
        prop::option::weighted(0.2, (0..4usize, -100..-40i32)),
        1..25u32,
        0..45u16,
        0..4u16,
    )
        .prop_map(|(bus, rssi, present, noise, second, len, ambient, drift)| Block {
            bus,
            rssi,
            present,
            noise,
            second,
            len,
            ambient,
            drift,
        })
}

fn ambient(i: u16) -> ApReading {
    let [hi, lo] = i.to_be_bytes();
    ApReading { bssid: Bssid([0x0a, 0, 0, 0, hi, lo]), ssid: "home".into(), rssi: -70 }
}

/// Expands blocks into a scan stream, 5 s apart from t = 1000.
pub fn expand(network: &TransitNetwork, blocks: &[Block]) -> Vec<WifiScan> {
    let fleet: Vec<Bssid> = network.runs().iter().map(|r| r.bssid).collect();
    let bus_reading = |i: usize, rssi: i32| ApReading {
        bssid: fleet[i % fleet.len()],
        ssid: network.bus_ssid().to_string(),
        rssi: rssi.min(0),
    };
    let mut out = Vec::new();
    let mut t = 1000;
    let mut offset = 0u16;
    for b in blocks {
        let mut noise = b.noise;
        for k in 0..b.len {
            noise = noise.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            let jitter = (noise >> 16) as i32 % 9 - 4;
            let mut readings: Vec<ApReading> = (0..b.ambient).map(|i| ambient(offset + i)).collect();
            if let Some(bus) = b.bus {
                if b.present & (1 << (k % 32)) != 0 {
                    readings.push(bus_reading(bus, b.rssi + jitter));
                }
            }
            if let Some((other, rssi)) = b.second {
                if Some(other) != b.bus {
                    readings.push(bus_reading(other, rssi - jitter));
                }
            }
            out.push(WifiScan::new(t, readings).expect("distinct bssids"));
            t += 5;
            offset += b.drift;
        }
    }
    out
}

fn run_detector(network: &TransitNetwork, scans: &[WifiScan]) -> Vec<RideEvent> {
    let mut d = RideDetector::default();
    scans.iter().flat_map(|s| d.step(s, network).unwrap()).collect()
}

fn check_stream(network: &TransitNetwork, scans: &[WifiScan]) -> Result<(), TestCaseError> {
    let events = run_detector(network, scans);

    // Alternation, starting with Boarded, and alighting the bus that was boarded.
    let mut riding: Option<&VehicleId> = None;
    for e in &events {
        match (e.kind, riding) {
            (RideEventKind::Boarded, None) => riding = Some(&e.vehicle_id),
            (RideEventKind::Alighted, Some(v)) if *v == e.vehicle_id => riding = None,
            _ => return Err(fail(format!("out of turn: {e:?} while riding {riding:?}"))),
        }
    }

    // Every boarding had that bus in a scan of the preceding minute.
    for e in events.iter().filter(|e| e.kind == RideEventKind::Boarded) {
        let bssid = network.run(&e.vehicle_id).unwrap().bssid;
        let heard = scans
            .iter()
            .filter(|s| s.timestamp <= e.timestamp && s.timestamp + 60 >= e.timestamp)
            .any(|s| s.readings().iter().any(|r| r.bssid == bssid && r.ssid == network.bus_ssid()));
        if !heard {
            return Err(fail(format!("spontaneous boarding {e:?}")));
        }
    }

    // Change rate stays a proportion over every window.
    let sets: Vec<_> = scans.iter().map(WifiScan::bssids).collect();
    for w in 0..sets.len() {
        let r = change_rate(&sets[w.saturating_sub(6)..=w]);
        if !(0.0..=1.0).contains(&r) {
            return Err(fail(format!("change rate {r}")));
        }
    }

    // Pure and repeatable: the value-style step and a second run agree.
    let mut state = RideDetector::default();
    let mut again = Vec::new();
    for s in scans {
        let (next, out) = detect_step(&state, s, network).unwrap();
        state = next;
        again.extend(out);
    }
    if serde_json::to_string(&again).unwrap() != serde_json::to_string(&events).unwrap() {
        return Err(fail("detector output differs between runs"));
    }
    Ok(())
}

pub fn detector_streams(cases: u32) -> Suite {
    let network = gridtown();
    run_suite("detector: alternation, grounded boarding, change rate, determinism", cases, 1, prop::collection::vec(block(), 1..14), move |blocks| {
        let scans = expand(&network, &blocks);
        check_stream(&network, &scans)
    })
}

/// After an entry-strength boarding, the bus is heard normally with at most
/// two low or missing readings in a row: no alighting. Then, once the
/// surroundings stop changing, three more lows alight on exactly the third.
pub fn exit_strikes(cases: u32) -> Suite {
    let network = gridtown();
    let gap = prop::collection::vec((-89..-40i32, 0..=2usize, any::<bool>(), -110..-91i32), 1..40);
    run_suite("detector: exit needs three consecutive lows", cases, 2, (gap, 0..3u16), move |(gaps, drift)| {
        let bssid = network.runs()[0].bssid;
        let ssid = network.bus_ssid().to_string();
        let scan = |k: u32, offset: u16, bus: Option<i32>| {
            let mut r: Vec<ApReading> = (0..25).map(|i| ambient(offset + i)).collect();
            if let Some(rssi) = bus {
                r.push(ApReading { bssid, ssid: ssid.clone(), rssi });
            }
            WifiScan::new(1000 + 5 * k, r).unwrap()
        };
        let mut bus = vec![Some(-50)];
        for (good, lows, absent, low) in gaps {
            bus.push(Some(good));
            bus.extend(std::iter::repeat_n(if absent { None } else { Some(low) }, lows));
        }
        let moving = bus.len() as u32;
        let scans: Vec<WifiScan> =
            bus.iter().enumerate().map(|(k, b)| scan(k as u32, k as u16 * drift, *b)).collect();
        let mut d = RideDetector::default();
        let mut events = Vec::new();
        for s in &scans {
            events.extend(d.step(s, &network).unwrap());
        }
        if events.len() != 1 || events[0].kind != RideEventKind::Boarded {
            return Err(fail(format!("{events:?}")));
        }
        // Seven steady scans fill the speed window, then the three lows.
        let still = moving as u16 * drift;
        let tail = [Some(-70); 7].into_iter().chain([None, Some(-95), None]);
        let outs: Vec<usize> = tail
            .enumerate()
            .map(|(k, b)| d.step(&scan(moving + k as u32, still, b), &network).unwrap().len())
            .collect();
        if outs != [0, 0, 0, 0, 0, 0, 0, 0, 0, 1] {
            return Err(fail(format!("tail events {outs:?}")));
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Tracker streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Act {
    Gps { anchor: usize, east: i16, north: i16 },
    Board(usize),
    Alight,
    Progress(usize),
    Respond(u8, u16),
    Poll,
}

fn act() -> impl Strategy<Value = Act> {
    prop_oneof![
        5 => (0..8usize, -40..40i16, -40..40i16).prop_map(|(anchor, east, north)| Act::Gps { anchor, east, north }),
        2 => (0..8usize, -150..150i16, -150..150i16).prop_map(|(anchor, east, north)| Act::Gps { anchor, east, north }),
        1 => (0..4usize).prop_map(Act::Board),
        1 => Just(Act::Alight),
        3 => (0..6usize).prop_map(Act::Progress),
        1 => (0..3u8, 0..120u16).prop_map(|(c, d)| Act::Respond(c, d)),
        1 => Just(Act::Poll),
    ]
}

fn anchors(network: &TransitNetwork, plan: &TripPlan) -> Vec<GeoPoint> {
    let mut v = vec![plan.origin, plan.destination];
    for id in ["s_A", "s_B", "s_C", "s_D", "s_E", "s_I"] {
        v.push(network.stop(&StopId::new(id)).unwrap().location);
    }
    v
}

pub fn example_plan(network: &TransitNetwork) -> TripPlan {
    let a = network.stop(&StopId::new("s_A")).unwrap().location;
    let d = network.stop(&StopId::new("s_D")).unwrap().location;
    plan_trip(network, a.offset(-30.0, 40.0), d.offset(30.0, -40.0), 28_650, &PlannerConfig::default()).unwrap()
}

/// Applies a stream of inputs to a fresh tracker, returning each step's
/// messages. Ride events follow the detector's alternation; progress is fed
/// for the bus being ridden and never runs backwards.
pub fn drive(network: &TransitNetwork, acts: &[(Act, u16)]) -> (Tracker, Vec<(Act, Vec<NavigationMessage>, TrackerView)>) {
    let plan = example_plan(network);
    let points = anchors(network, &plan);
    let mut now = 28_650;
    let (mut t, _) = Tracker::start(plan, network, now, TrackerConfig::default(), Templates::default());
    let fleet: Vec<VehicleId> = network.runs().iter().map(|r| r.vehicle_id.clone()).collect();
    let mut riding: Option<VehicleId> = None;
    let mut progress: usize = 0;
    let mut out = Vec::new();
    for (a, dt) in acts {
        now += u32::from(*dt);
        let event = |kind, v: &VehicleId| {
            let info = network.vehicle_info(v).unwrap();
            RideEvent { kind, vehicle_id: info.vehicle_id, line_id: info.line_id, direction: info.direction, timestamp: now }
        };
        let messages = match a {
            Act::Gps { anchor, east, north } => {
                t.on_gps(points[*anchor].offset(f64::from(*east), f64::from(*north)), network, now)
            }
            Act::Board(i) if riding.is_none() => {
                let v = fleet[*i % fleet.len()].clone();
                progress = 0;
                riding = Some(v.clone());
                t.on_ride_event(&event(RideEventKind::Boarded, &v), network, now).unwrap()
            }
            Act::Alight if riding.is_some() => {
                let v = riding.take().unwrap();
                t.on_ride_event(&event(RideEventKind::Alighted, &v), network, now).unwrap()
            }
            Act::Progress(i) if riding.is_some() => {
                let run = network.run(riding.as_ref().unwrap()).unwrap();
                let pattern = network.pattern(&run.line_id, run.direction).unwrap();
                progress = progress.max(*i % pattern.stops.len());
                t.on_bus_progress(&pattern.stops[progress], network, now).unwrap()
            }
            Act::Respond(c, d) => {
                let choice = match c {
                    0 => ReplanChoice::Confirm,
                    1 => ReplanChoice::Delay(u32::from(*d)),
                    _ => ReplanChoice::Refuse,
                };
                t.respond_to_replan(choice, network, &PlannerConfig::default(), now).unwrap_or_default()
            }
            Act::Poll => t.poll(now),
            _ => Vec::new(),
        };
        let view = TrackerView::of(&t);
        out.push((a.clone(), messages, view));
    }
    (t, out)
}

/// The parts of tracker state the invariants look at, after each input.
#[derive(Debug, Clone)]
pub struct TrackerView {
    segment: usize,
    replans: u32,
    activity: TripActivity,
    deviated: Option<ubn_core::tracker::DeviationKind>,
    pending: bool,
    delayed: bool,
}

impl TrackerView {
    fn of(t: &Tracker) -> Self {
        Self {
            segment: t.segment_index(),
            replans: t.replans(),
            activity: t.activity(),
            deviated: t.deviation().map(|d| d.kind),
            pending: t.pending_replan().is_some(),
            delayed: t.pending_replan().is_some_and(|p| p.delayed_until.is_some()),
        }
    }
}

fn check_tracker(network: &TransitNetwork, acts: &[(Act, u16)]) -> Result<(), TestCaseError> {
    use ubn_core::tracker::DeviationKind::OffPath;
    let (_, steps) = drive(network, acts);
    let mut prev = {
        let plan = example_plan(network);
        let (t, _) = Tracker::start(plan, network, 28_650, TrackerConfig::default(), Templates::default());
        TrackerView::of(&t)
    };
    let mut leave_soon: BTreeMap<(u32, usize), usize> = BTreeMap::new();
    for (i, (a, messages, view)) in steps.iter().enumerate() {
        let here = || format!("step {i} {a:?}: {messages:#?}");

        // Segment index only moves forward, except for a fresh plan after Confirm.
        if view.replans != prev.replans {
            let confirmed = matches!(a, Act::Respond(0, _));
            if !confirmed || view.replans != prev.replans + 1 || view.segment != 0 {
                return Err(fail(format!("bad replan transition {}", here())));
            }
        } else if view.segment < prev.segment {
            return Err(fail(format!("segment went back {}", here())));
        }

        for (k, m) in messages.iter().enumerate() {
            let alert_kind = matches!(m.kind, MessageKind::Deviation | MessageKind::LeaveSoon);
            if (m.severity == Severity::Alert) != alert_kind {
                return Err(fail(format!("severity mismatch {}", here())));
            }
            match m.kind {
                MessageKind::LeaveSoon => {
                    if m.payload.stops_left != Some(1) {
                        return Err(fail(format!("leave soon with stops_left {:?}", m.payload.stops_left)));
                    }
                    let n = leave_soon.entry((view.replans, view.segment)).or_default();
                    *n += 1;
                    if *n > 1 {
                        return Err(fail(format!("second leave soon {}", here())));
                    }
                }
                MessageKind::Deviation => {
                    // Exactly one prompt goes with every deviation.
                    if messages.get(k + 1).map(|n| n.kind) != Some(MessageKind::ReplanPrompt) {
                        return Err(fail(format!("deviation without prompt {}", here())));
                    }
                    let new = m.payload.deviation.as_ref().unwrap().kind;
                    // Only an off-path deviation may give way to another kind.
                    let allowed = match prev.deviated {
                        None => true,
                        Some(OffPath) => new != OffPath,
                        Some(_) => false,
                    };
                    let replanned = messages[..k].iter().any(|m| m.kind == MessageKind::Replan);
                    let cleared = messages[..k].iter().any(|m| m.kind == MessageKind::BackOnTrack);
                    if !(allowed || replanned || cleared) {
                        return Err(fail(format!("second active deviation {}", here())));
                    }
                }
                MessageKind::ReplanPrompt => {
                    let paired = k > 0 && messages[k - 1].kind == MessageKind::Deviation;
                    // Otherwise it is a re-raise, which only a delayed prompt may do.
                    let reraise = matches!(a, Act::Poll) && prev.delayed && messages.len() == 1;
                    if !(paired || reraise) {
                        return Err(fail(format!("stray prompt {}", here())));
                    }
                }
                _ => {}
            }
        }
        let prompts = messages.iter().filter(|m| m.kind == MessageKind::ReplanPrompt).count();
        let devs = messages.iter().filter(|m| m.kind == MessageKind::Deviation).count();
        if matches!(a, Act::Poll) && prompts > 1 || !matches!(a, Act::Poll) && prompts != devs {
            return Err(fail(format!("prompt count {}", here())));
        }

        if view.pending && view.deviated.is_none() {
            return Err(fail(format!("prompt pending while on track {}", here())));
        }
        if prev.activity == TripActivity::DepartingBus
            && view.activity == TripActivity::RidingBus
            && view.replans == prev.replans
            && !matches!(a, Act::Board(_))
        {
            return Err(fail(format!("riding again without boarding {}", here())));
        }
        prev = view.clone();
    }

    // Same inputs, same messages.
    let (_, again) = drive(network, acts);
    let flat = |s: &[(Act, Vec<NavigationMessage>, TrackerView)]| {
        serde_json::to_string(&s.iter().map(|x| &x.1).collect::<Vec<_>>()).unwrap()
    };
    if flat(&steps) != flat(&again) {
        return Err(fail("tracker output differs between runs"));
    }
    Ok(())
}

pub fn tracker_streams(cases: u32) -> Suite {
    let network = gridtown();
    run_suite(
        "tracker: forward segments, one deviation and prompt, alerts, replay determinism",
        cases,
        3,
        prop::collection::vec((act(), 1..40u16), 1..80),
        move |acts| check_tracker(&network, &acts),
    )
}

/// A plan that is only the L1 outbound ride from `board` to `exit`.
pub fn l1_ride(network: &TransitNetwork, board: usize, exit: usize) -> TripPlan {
    let pattern = network.pattern(&LineId::new("L1"), Direction::OUTBOUND).unwrap();
    let run = network.run(&VehicleId::new("bus-11")).unwrap();
    let (b, e) = (&pattern.stops[board], &pattern.stops[exit]);
    TripPlan {
        origin: network.stop(b).unwrap().location,
        destination: network.stop(e).unwrap().location,
        planned_departure: run.stop_times[board].departure,
        arrival: run.stop_times[exit].arrival,
        segments: vec![Segment::Bus(BusRideSegment {
            line_id: LineId::new("L1"),
            direction: Direction::OUTBOUND,
            board_stop: b.clone(),
            alight_stop: e.clone(),
            scheduled_board: run.stop_times[board].departure,
            scheduled_alight: run.stop_times[exit].arrival,
            intermediate_stops: (exit - board - 1) as u32,
            vehicle_id: VehicleId::new("bus-11"),
        })],
    }
}

/// Any in-order feed (with repeats) that reaches the exit without passing it
/// gives exactly one "leave soon": on the first update naming the exit, or at
/// boarding when the exit is the very next stop.
pub fn leave_soon_once(cases: u32) -> Suite {
    let network = gridtown();
    let strategy = (0..4usize, 1..5usize, prop::collection::vec(0..6usize, 1..12)).prop_filter_map(
        "needs a ride of at least one stop",
        |(board, len, raw)| {
            let exit = board + len;
            (exit < 6).then_some((board, exit, raw))
        },
    );
    run_suite("tracker: leave soon exactly once per ride", cases, 4, strategy, move |(board, exit, raw)| {
        let pattern = network.pattern(&LineId::new("L1"), Direction::OUTBOUND).unwrap();
        let mut feed: Vec<usize> = raw.iter().map(|r| board + 1 + r % (exit - board)).collect();
        feed.sort_unstable();
        feed.push(exit);
        let plan = l1_ride(&network, board, exit);
        let (mut t, _) = Tracker::start(plan, &network, 28_700, TrackerConfig::default(), Templates::default());
        let info = network.vehicle_info(&VehicleId::new("bus-11")).unwrap();
        let boarded = RideEvent {
            kind: RideEventKind::Boarded,
            vehicle_id: info.vehicle_id,
            line_id: info.line_id,
            direction: info.direction,
            timestamp: 28_705,
        };
        // Boarding counts as position `board`; a one-stop ride is told at once.
        let mut seen: Vec<(usize, _)> =
            t.on_ride_event(&boarded, &network, 28_705).unwrap().into_iter().map(|m| (board, m)).collect();
        for (k, i) in feed.iter().enumerate() {
            for m in t.on_bus_progress(&pattern.stops[*i], &network, 28_710 + 10 * k as u32).unwrap() {
                seen.push((*i, m));
            }
        }
        let soon: Vec<usize> = seen.iter().filter(|(_, m)| m.kind == MessageKind::LeaveSoon).map(|(i, _)| *i).collect();
        let expected = if exit == board + 1 { board } else { exit };
        if soon != [expected] {
            return Err(fail(format!("feed {feed:?}: leave soon at {soon:?}")));
        }
        if seen.iter().any(|(_, m)| m.kind == MessageKind::Deviation) {
            return Err(fail(format!("feed {feed:?}: unexpected deviation")));
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Whole runs
// ---------------------------------------------------------------------------

pub const RUN_SCENARIOS: [&str; 4] = ["happy-path", "wrong-bus", "missed-stop", "refuse-then-delay"];

/// A simulated trace, written out and read back, replays to the same ride events.
pub fn replay_closure(cases: u32) -> Suite {
    let network: Arc<TransitNetwork> = gridtown();
    let scenarios: Vec<_> = RUN_SCENARIOS.iter().map(|n| scenario(n)).collect();
    run_suite("replay closure: simulate then replay gives the same ride events", cases, 5, (0..RUN_SCENARIOS.len(), any::<u64>()), move |(k, seed)| {
        let log = run_scenario(network.clone(), &scenarios[k], Some(seed)).unwrap();
        let text = to_jsonl(&log);
        let records = read_trace(text.as_bytes()).map_err(|e| fail(e.to_string()))?;
        let detector = RideDetector::new(scenarios[k].engine.detector.clone());
        let report = replay(&records, &network, detector).map_err(|e| fail(e.to_string()))?;
        let recorded = recorded_ride_events(&log);
        if report.events != recorded {
            return Err(fail(format!("{}: replayed {:?}, recorded {:?}", RUN_SCENARIOS[k], report.events, recorded)));
        }
        Ok(())
    })
}

/// Identical scenario and seed give byte-identical logs.
pub fn seeded_determinism(cases: u32) -> Suite {
    let network: Arc<TransitNetwork> = gridtown();
    let scenarios: Vec<_> = RUN_SCENARIOS.iter().map(|n| scenario(n)).collect();
    run_suite("determinism: same seed, same log", cases, 6, (0..RUN_SCENARIOS.len(), any::<u64>()), move |(k, seed)| {
        let a = to_jsonl(&run_scenario(network.clone(), &scenarios[k], Some(seed)).unwrap());
        let b = to_jsonl(&run_scenario(network.clone(), &scenarios[k], Some(seed)).unwrap());
        if a != b {
            return Err(fail(format!("{} seed {seed}", RUN_SCENARIOS[k])));
        }
        Ok(())
    })
}

pub fn all() -> Vec<Suite> {
    vec![
        detector_streams(200),
        exit_strikes(120),
        tracker_streams(200),
        leave_soon_once(100),
        replay_closure(40),
        seeded_determinism(20),
    ]
}

/// For every exit on the 6-stop L1 pattern and every next-stop position: a
/// lone update deviates iff it is past the exit, and an in-order feed
/// deviates exactly at the first position past the exit. Returns the number
/// of (exit, position) pairs checked.
pub fn missed_stop_positions() -> Result<usize, String> {
    let network = gridtown();
    let pattern = network.pattern(&LineId::new("L1"), Direction::OUTBOUND).unwrap().clone();
    let n = pattern.stops.len();
    if n != 6 {
        return Err(format!("pattern has {n} stops"));
    }
    let info = network.vehicle_info(&VehicleId::new("bus-11")).unwrap();
    let boarded = RideEvent {
        kind: RideEventKind::Boarded,
        vehicle_id: info.vehicle_id,
        line_id: info.line_id,
        direction: info.direction,
        timestamp: 28_805,
    };
    let feed = |exit: usize, positions: &[usize]| {
        let (mut t, _) =
            Tracker::start(l1_ride(&network, 0, exit), &network, 28_800, TrackerConfig::default(), Templates::default());
        t.on_ride_event(&boarded, &network, 28_805).unwrap();
        positions
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let m = t.on_bus_progress(&pattern.stops[i], &network, 28_810 + 60 * k as u32).unwrap();
                m.iter().any(|m| m.kind == MessageKind::Deviation)
            })
            .collect::<Vec<bool>>()
    };
    let mut checked = 0;
    for exit in 1..n {
        for pos in 0..n {
            if feed(exit, &[pos])[0] != (pos > exit) {
                return Err(format!("exit {exit}: lone update at {pos}"));
            }
            checked += 1;
        }
        let in_order: Vec<usize> = (1..n).collect();
        let raised = feed(exit, &in_order);
        let first = raised.iter().position(|&r| r).map(|k| in_order[k]);
        if first != (exit + 1 < n).then_some(exit + 1) {
            return Err(format!("exit {exit}: in-order feed first deviates at {first:?}"));
        }
    }
    Ok(checked)
}
