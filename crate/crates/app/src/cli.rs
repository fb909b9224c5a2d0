//! The `ubn` command line: `plan`, `replay`, `simulate` and `serve`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use ubn_core::detection::{RideDetector, RideEventKind};
use ubn_core::engine::{run_scenario, Place, Scenario, ScenarioError};
use ubn_core::geo::GeoPoint;
use ubn_core::network::{NetworkError, Seconds, StopId, TransitNetwork};
use ubn_core::planner::{plan_trip, PlanError, PlannerConfig, Segment, TripPlan};
use ubn_core::trace::{read_trace, replay, write_trace, DetectionReport, TraceError, TraceEvent, TraceRecord};

use crate::server::{self, ServerConfig};

/// Process exit codes. Clap exits with 2 on usage errors.
pub mod exit {
    pub const USAGE: u8 = 2;
    /// A file could not be read or written.
    pub const IO: u8 = 3;
    /// A network, scenario or place argument failed validation.
    pub const INVALID_INPUT: u8 = 4;
    /// A trace line is malformed or out of order.
    pub const BAD_TRACE: u8 = 5;
    pub const NO_ROUTE: u8 = 6;
    pub const BIND: u8 = 7;
}

#[derive(Debug, Parser)]
#[command(name = "ubn", version, about = "Urban bus navigator: plan, simulate, replay and serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan a trip on the network's timetable.
    Plan(PlanArgs),
    /// Run ride detection over a recorded trace and score it.
    Replay(ReplayArgs),
    /// Run a scripted scenario and write its trace and message logs.
    Simulate(SimulateArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub network: PathBuf,
    /// `LAT,LON`, a stop id, or `STOP@EAST,NORTH` (meters from the stop).
    #[arg(long, value_parser = parse_place, allow_hyphen_values = true)]
    pub from: Place,
    #[arg(long, value_parser = parse_place, allow_hyphen_values = true)]
    pub to: Place,
    /// Departure time, `HH:MM[:SS]` or seconds of the day.
    #[arg(long, value_parser = parse_time, default_value = "08:00")]
    pub at: Seconds,
    /// Print only the machine-readable record.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub network: PathBuf,
    /// Line-delimited JSON trace.
    pub trace: PathBuf,
    /// Take the detector settings from this scenario instead of the defaults.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Full trace, every record.
    #[arg(long)]
    pub trace_out: PathBuf,
    /// Commands, ride events, plans and messages only. Defaults to the trace
    /// path with a `.messages.jsonl` extension.
    #[arg(long)]
    pub messages_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Simulated seconds per real second for interactive sessions.
    #[arg(long, default_value_t = 5.0)]
    pub speed: f64,
    /// Scenarios sessions may be created from, by name. Repeatable.
    #[arg(long)]
    pub scenario: Vec<PathBuf>,
    /// Each session's trace is written here when it is deleted or the
    /// server shuts down.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: invalid network: {source}", path.display())]
    Network { path: PathBuf, source: NetworkError },
    #[error("{}: invalid scenario: {source}", path.display())]
    Scenario { path: PathBuf, source: ScenarioError },
    #[error("{}: {source}", path.display())]
    Trace { path: PathBuf, source: TraceError },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    NoRoute(PlanError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("writing output: {0}")]
    Output(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Output(_) => exit::IO,
            CliError::Trace { source: TraceError::Io(_), .. } => exit::IO,
            CliError::Trace { .. } => exit::BAD_TRACE,
            CliError::Scenario { source: ScenarioError::Plan(_), .. } | CliError::NoRoute(_) => exit::NO_ROUTE,
            CliError::Network { .. } | CliError::Scenario { .. } | CliError::Input(_) => exit::INVALID_INPUT,
            CliError::Bind { .. } => exit::BIND,
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Plan(a) => cmd_plan(&a, out),
        Command::Replay(a) => cmd_replay(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Serve(a) => cmd_serve(a),
    }
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

pub fn parse_place(s: &str) -> Result<Place, String> {
    let s = s.trim();
    let pair = |t: &str| -> Option<(f64, f64)> {
        let (a, b) = t.split_once(',')?;
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    };
    if let Some((stop, rest)) = s.split_once('@') {
        let (east, north) = pair(rest).ok_or_else(|| format!("expected STOP@EAST,NORTH, got {s:?}"))?;
        return Ok(Place::Stop { stop: StopId::new(stop), east, north });
    }
    if s.contains(',') {
        let (lat, lon) = pair(s).ok_or_else(|| format!("expected LAT,LON, got {s:?}"))?;
        GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
        return Ok(Place::Point { lat, lon });
    }
    if s.is_empty() {
        return Err("empty place".into());
    }
    Ok(Place::Stop { stop: StopId::new(s), east: 0.0, north: 0.0 })
}

pub fn parse_time(s: &str) -> Result<Seconds, String> {
    let s = s.trim();
    if let Ok(n) = s.parse::<Seconds>() {
        return Ok(n);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(format!("expected HH:MM[:SS] or seconds, got {s:?}"));
    }
    let mut fields = [0u32; 3];
    for (f, p) in fields.iter_mut().zip(&parts) {
        *f = p.parse().map_err(|_| format!("bad time {s:?}"))?;
    }
    let [h, m, sec] = fields;
    if h > 47 || m > 59 || sec > 59 {
        return Err(format!("bad time {s:?}"));
    }
    Ok(h * 3600 + m * 60 + sec)
}

pub fn clock(t: Seconds) -> String {
    format!("{:02}:{:02}:{:02}", t / 3600, t / 60 % 60, t % 60)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

pub fn load_network(path: &Path) -> Result<Arc<TransitNetwork>, CliError> {
    let text = read_file(path)?;
    TransitNetwork::load_str(&text)
        .map(Arc::new)
        .map_err(|source| CliError::Network { path: path.to_owned(), source })
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = read_file(path)?;
    Scenario::load_str(&text).map_err(|source| CliError::Scenario { path: path.to_owned(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io { path: path.to_owned(), source })
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

fn resolve(place: &Place, network: &TransitNetwork) -> Result<GeoPoint, CliError> {
    place.resolve(network).map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_plan(a: &PlanArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let network = load_network(&a.network)?;
    let origin = resolve(&a.from, &network)?;
    let destination = resolve(&a.to, &network)?;
    let plan =
        plan_trip(&network, origin, destination, a.at, &PlannerConfig::default()).map_err(CliError::NoRoute)?;
    if !a.json {
        write_plan(&plan, &network, out)?;
    }
    writeln!(out, "{}", serde_json::to_string(&plan).expect("plans serialize"))?;
    Ok(())
}

fn place_name(p: &GeoPoint, network: &TransitNetwork) -> Option<String> {
    network
        .nearest_stop(p)
        .filter(|(_, d)| *d < 5.0)
        .map(|(s, _)| format!("{} ({})", s.name, s.id))
}

fn stop_name(id: &StopId, network: &TransitNetwork) -> String {
    match network.stop(id) {
        Some(s) => format!("{} ({})", s.name, s.id),
        None => id.to_string(),
    }
}

pub fn write_plan(plan: &TripPlan, network: &TransitNetwork, out: &mut dyn Write) -> io::Result<()> {
    if plan.segments.is_empty() {
        return writeln!(out, "already at destination");
    }
    writeln!(
        out,
        "leave {} and arrive {} ({} segments, {} by bus)",
        clock(plan.planned_departure),
        clock(plan.arrival),
        plan.segments.len(),
        plan.bus_segments()
    )?;
    let last = plan.segments.len() - 1;
    for (i, seg) in plan.segments.iter().enumerate() {
        match seg {
            Segment::Walk(w) => {
                let to = match place_name(&w.end, network) {
                    Some(n) => n,
                    None if i == last => "the destination".to_string(),
                    None => format!("{:.5},{:.5}", w.end.lat, w.end.lon),
                };
                let minutes = w.est_duration.div_ceil(60);
                writeln!(out, "  {}. walk {:.0} m to {to}, about {minutes} min", i + 1, w.distance_m)?;
            }
            Segment::Bus(b) => {
                let towards = network
                    .pattern(&b.line_id, b.direction)
                    .and_then(|p| p.stops.last())
                    .map(|s| stop_name(s, network))
                    .unwrap_or_default();
                writeln!(
                    out,
                    "  {}. bus {} towards {towards}: board at {} {}, get off at {} {} ({} stops in between, vehicle {})",
                    i + 1,
                    b.line_id,
                    stop_name(&b.board_stop, network),
                    clock(b.scheduled_board),
                    stop_name(&b.alight_stop, network),
                    clock(b.scheduled_alight),
                    b.intermediate_stops,
                    b.vehicle_id
                )?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

fn cmd_replay(a: &ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let network = load_network(&a.network)?;
    let detector = match &a.scenario {
        Some(p) => RideDetector::new(load_scenario(p)?.engine.detector),
        None => RideDetector::default(),
    };
    let file = File::open(&a.trace).map_err(|source| CliError::Io { path: a.trace.clone(), source })?;
    let trace_err = |source| CliError::Trace { path: a.trace.clone(), source };
    let records = read_trace(BufReader::new(file)).map_err(trace_err)?;
    let report = replay(&records, &network, detector).map_err(trace_err)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&report).expect("reports serialize"))?;
    } else {
        let scans = records.iter().filter(|(_, r)| matches!(r.event, TraceEvent::Scan(_))).count();
        write_report(&report, records.len(), scans, out)?;
    }
    Ok(())
}

fn signed(s: i64) -> String {
    format!("{s:+} s")
}

pub fn write_report(report: &DetectionReport, records: usize, scans: usize, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "trace: {records} records, {scans} scans")?;
    writeln!(out, "ride events: {}", report.events.len())?;
    for e in &report.events {
        let kind = match e.kind {
            RideEventKind::Boarded => "boarded",
            RideEventKind::Alighted => "alighted",
        };
        writeln!(out, "  {}  {kind:<8} {} (line {} direction {})", clock(e.timestamp), e.vehicle_id, e.line_id, e.direction)?;
    }
    if report.has_ground_truth {
        writeln!(out, "matched rides: {}", report.matches.len())?;
        for m in &report.matches {
            let alight = m.alight_error.map(signed).unwrap_or_else(|| "n/a".into());
            writeln!(out, "  {}: boarding error {}, alighting error {alight}", m.vehicle_id, signed(m.board_error))?;
        }
    } else {
        writeln!(out, "no ground truth in trace; every detected ride counts as a false positive")?;
    }
    writeln!(out, "false positives: {}", report.false_positives)?;
    writeln!(out, "false negatives: {}", report.false_negatives)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Everything but raw scans, fixes and fleet feed entries.
pub fn message_log(records: &[TraceRecord]) -> Vec<TraceRecord> {
    records.iter().filter(|r| !r.event.is_observation()).cloned().collect()
}

fn default_messages_path(trace: &Path) -> PathBuf {
    let stem = trace.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    trace.with_file_name(format!("{stem}.messages.jsonl"))
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let network = load_network(&a.network)?;
    let scenario = load_scenario(&a.scenario)?;
    let records = run_scenario(network, &scenario, a.seed)
        .map_err(|source| CliError::Scenario { path: a.scenario.clone(), source })?;
    let messages = message_log(&records);
    let messages_path = a.messages_out.clone().unwrap_or_else(|| default_messages_path(&a.trace_out));
    for (path, recs) in [(&a.trace_out, &records), (&messages_path, &messages)] {
        write_trace(create(path)?, recs).map_err(|source| CliError::Io { path: path.clone(), source })?;
    }
    let rejections = records.iter().filter(|r| matches!(r.event, TraceEvent::Rejection(_))).count();
    writeln!(out, "scenario {}: {} .. {}", scenario.name, clock(scenario.start_time), clock(scenario.end_time))?;
    writeln!(out, "wrote {} records to {}", records.len(), a.trace_out.display())?;
    writeln!(out, "wrote {} records to {}", messages.len(), messages_path.display())?;
    if rejections > 0 {
        writeln!(out, "{rejections} commands rejected")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// serve
// ---------------------------------------------------------------------------

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let network = load_network(&a.network)?;
    let mut scenarios = Vec::new();
    for p in &a.scenario {
        let s = load_scenario(p)?;
        // Catch unknown stops now rather than at session creation.
        s.origin.resolve(&network).map_err(|source| CliError::Scenario { path: p.clone(), source })?;
        scenarios.push(s);
    }
    if !(a.speed.is_finite() && a.speed > 0.0) {
        return Err(CliError::Input(format!("speed must be positive, got {}", a.speed)));
    }
    let config = ServerConfig { network, scenarios, default_speed: a.speed, log_dir: a.log_dir };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|source| CliError::Bind { addr: a.bind.clone(), source })?;
        log::info!("listening on {}", listener.local_addr()?);
        eprintln!("listening on http://{}", listener.local_addr()?);
        server::serve(listener, config, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("cannot wait for ctrl-c: {e}");
        std::future::pending::<()>().await;
    }
}

