//! Exhaustive earliest-arrival search, used to check the planner.
//!
//! Depth-first enumeration of every itinerary with at most three rides:
//! from the current place, either walk to the destination or walk (if
//! allowed) to any boarding stop of any run, ride it to any later stop, and
//! recurse. The only pruning is on the arrival time of the best itinerary
//! found so far, which is sound because time never decreases along a path.

use thiserror::Error;

use super::{PlannerConfig, SAME_PLACE_M};
use crate::geo::{haversine_distance, GeoPoint};
use crate::network::{Seconds, TransitNetwork, END_OF_DAY};

pub const ORACLE_MAX_STOPS: usize = 12;
pub const ORACLE_MAX_RUNS_PER_LINE: usize = 4;
const ORACLE_MAX_RIDES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("network too large for exhaustive search: {0}")]
    TooLarge(String),
}

struct Search<'a> {
    network: &'a TransitNetwork,
    destination: GeoPoint,
    config: &'a PlannerConfig,
    best: Option<Seconds>,
}

impl Search<'_> {
    fn visit(&mut self, at: GeoPoint, time: Seconds, rides: usize, walked_last: bool) {
        if self.best.is_some_and(|b| time >= b) {
            return;
        }
        let to_dest = haversine_distance(&at, &self.destination);
        if to_dest < SAME_PLACE_M {
            self.best = Some(time);
            return;
        }
        if !walked_last && to_dest <= self.config.walk_radius_m {
            let arrival = time + self.config.walk_seconds(to_dest);
            if self.best.is_none_or(|b| arrival < b) {
                self.best = Some(arrival);
            }
        }
        if rides == ORACLE_MAX_RIDES.min(self.config.max_bus_segments) {
            return;
        }
        for run in self.network.runs() {
            for (i, board) in run.stop_times.iter().enumerate() {
                let stop_at = self.network.stop(&board.stop).expect("known stop").location;
                let d = haversine_distance(&at, &stop_at);
                let ready = if d < SAME_PLACE_M {
                    time
                } else if !walked_last && d <= self.config.walk_radius_m {
                    time + self.config.walk_seconds(d)
                } else {
                    continue;
                };
                if ready > board.departure {
                    continue;
                }
                for alight in &run.stop_times[i + 1..] {
                    let here = self.network.stop(&alight.stop).expect("known stop").location;
                    self.visit(here, alight.arrival, rides + 1, false);
                }
            }
        }
    }
}

/// Earliest possible arrival at `destination`, or `None` if unreachable
/// within the service day.
pub fn brute_force_oracle(
    network: &TransitNetwork,
    origin: GeoPoint,
    destination: GeoPoint,
    depart_after: Seconds,
    config: &PlannerConfig,
) -> Result<Option<Seconds>, OracleError> {
    if network.stop_count() > ORACLE_MAX_STOPS {
        return Err(OracleError::TooLarge(format!(
            "{} stops (max {ORACLE_MAX_STOPS})",
            network.stop_count()
        )));
    }
    for line in network.lines() {
        let runs = network.runs().iter().filter(|r| r.line_id == line.id).count();
        if runs > ORACLE_MAX_RUNS_PER_LINE {
            return Err(OracleError::TooLarge(format!(
                "line {} has {runs} runs (max {ORACLE_MAX_RUNS_PER_LINE})",
                line.id
            )));
        }
    }
    let mut search = Search { network, destination, config, best: None };
    search.visit(origin, depart_after, 0, false);
    Ok(search.best.filter(|&t| t <= END_OF_DAY))
}
