//! Message text, one substitution template per key.
//!
//! Placeholders are written `{name}`. Unknown placeholders are left in place
//! so a missing variable is visible in the output rather than silently empty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_TEMPLATES: &[(&str, &str)] = &[
    ("starting", "Starting your journey. Expected arrival at {arrival}."),
    ("walk_to_stop", "Walk to stop {stop}: {distance} m to go."),
    ("walk_to_destination", "Walk to your destination: {distance} m to go."),
    ("arriving", "Take line {line} towards {headsign} at {departure} and get off at {exit}."),
    ("arriving_unscheduled", "Wait for line {line} towards {headsign} and get off at {exit}."),
    ("boarding_ok", "This is your bus: line {line} towards {headsign}."),
    ("riding", "Stops left: {stops_left}. Next stop: {next_stop}."),
    ("leave_soon", "Leave the bus soon: get off at the next stop, {exit}."),
    ("departing", "You got off at {stop}."),
    ("left_bus", "You left line {line}."),
    ("wrong_bus", "Wrong bus: this is line {line} towards {headsign}, you planned line {planned_line} towards {planned_headsign}."),
    ("unplanned_bus", "You boarded line {line} towards {headsign}, which is not part of your route."),
    ("missed_stop", "You missed your stop, {exit}."),
    ("wrong_stop", "You got off at {stop}, but your stop is {exit}."),
    ("off_path", "You are {distance} m away from your route."),
    ("back_on_track", "You are back on your route."),
    ("replan_prompt", "Look for a new route from here? Confirm, delay or refuse."),
    ("replan_delayed", "Re-planning postponed for {seconds} s."),
    ("replan_refused", "Keeping the original route."),
    ("replanned", "New route found. Expected arrival at {arrival}."),
    ("no_route", "No route to your destination from here."),
    ("arrived", "You have arrived. Journey complete."),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Templates(BTreeMap<String, String>);

impl Default for Templates {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATES.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }
}

impl Templates {
    /// Replaces individual entries, e.g. with a translation.
    pub fn with_overrides(mut self, overrides: impl IntoIterator<Item = (String, String)>) -> Self {
        self.0.extend(overrides);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn render(&self, key: &str, vars: &[(&str, String)]) -> String {
        let Some(template) = self.get(key) else {
            return format!("<{key}>");
        };
        let mut out = String::with_capacity(template.len() + 16);
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => {
                    let name = &after[..close];
                    match vars.iter().find(|(k, _)| *k == name) {
                        Some((_, v)) => out.push_str(v),
                        None => {
                            out.push('{');
                            out.push_str(name);
                            out.push('}');
                        }
                    }
                    rest = &after[close + 1..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// `HH:MM:SS` for a seconds-of-day value.
pub fn clock(t: u32) -> String {
    format!("{:02}:{:02}:{:02}", t / 3600, (t / 60) % 60, t % 60)
}
