//! WGS84 points, great-circle distance and polyline geometry.
//!
//! All distances are in meters. Short-range geometry (point to segment,
//! projection along a polyline) works in a local equirectangular frame
//! centred on the query point, which is exact enough at city scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by every distance computation.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("polyline needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("polyline waypoints {0} and {1} coincide")]
    RepeatedWaypoint(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint")]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;

    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    /// Point displaced by `east`/`north` meters in the local tangent plane.
    pub fn offset(&self, east: f64, north: f64) -> GeoPoint {
        let lat = self.lat + (north / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon + (east / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        GeoPoint { lat, lon }
    }

    /// East/north meters of `other` relative to `self`.
    pub fn local_xy(&self, other: &GeoPoint) -> (f64, f64) {
        let x = (other.lon - self.lon).to_radians() * EARTH_RADIUS_M * self.lat.to_radians().cos();
        let y = (other.lat - self.lat).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    /// Linear interpolation in degree space; `frac` is clamped to [0, 1].
    pub fn lerp(&self, other: &GeoPoint, frac: f64) -> GeoPoint {
        let f = frac.clamp(0.0, 1.0);
        GeoPoint {
            lat: self.lat + (other.lat - self.lat) * f,
            lon: self.lon + (other.lon - self.lon) * f,
        }
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Closest point on segment `a`-`b` to `p`, as (fraction along the segment, distance in meters).
pub fn closest_on_segment(p: &GeoPoint, a: &GeoPoint, b: &GeoPoint) -> (f64, f64) {
    let (ax, ay) = p.local_xy(a);
    let (bx, by) = p.local_xy(b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (t, (cx * cx + cy * cy).sqrt())
}

/// Where a point lands when projected onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Distance from the first waypoint, measured along the line.
    pub along: f64,
    /// Perpendicular (or endpoint) distance from the line.
    pub offset: f64,
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GeoPoint>", into = "Vec<GeoPoint>")]
pub struct Polyline {
    waypoints: Vec<GeoPoint>,
    /// Cumulative length at each waypoint.
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<GeoPoint>> for Polyline {
    type Error = GeoError;

    fn try_from(points: Vec<GeoPoint>) -> Result<Self, Self::Error> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<GeoPoint> {
    fn from(line: Polyline) -> Self {
        line.waypoints
    }
}

impl Polyline {
    pub fn new(waypoints: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if waypoints.len() < 2 {
            return Err(GeoError::TooFewWaypoints(waypoints.len()));
        }
        let mut cumulative = Vec::with_capacity(waypoints.len());
        cumulative.push(0.0);
        for (i, pair) in waypoints.windows(2).enumerate() {
            let d = haversine_distance(&pair[0], &pair[1]);
            if d <= 0.0 {
                return Err(GeoError::RepeatedWaypoint(i, i + 1));
            }
            cumulative.push(cumulative[i] + d);
        }
        Ok(Self { waypoints, cumulative })
    }

    /// Two-point line; fails if the endpoints coincide.
    pub fn straight(a: GeoPoint, b: GeoPoint) -> Result<Self, GeoError> {
        Self::new(vec![a, b])
    }

    pub fn waypoints(&self) -> &[GeoPoint] {
        &self.waypoints
    }

    pub fn first(&self) -> GeoPoint {
        self.waypoints[0]
    }

    pub fn last(&self) -> GeoPoint {
        self.waypoints[self.waypoints.len() - 1]
    }

    pub fn length(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    /// Minimum distance from `p` to any edge.
    pub fn distance_to(&self, p: &GeoPoint) -> f64 {
        self.project(p).offset
    }

    /// Nearest point on the whole line. Ties go to the earliest edge.
    pub fn project(&self, p: &GeoPoint) -> Projection {
        self.project_from(p, 0.0)
    }

    /// Nearest point among the parts of the line at or beyond `min_along`.
    pub fn project_from(&self, p: &GeoPoint, min_along: f64) -> Projection {
        let mut best: Option<Projection> = None;
        for (i, pair) in self.waypoints.windows(2).enumerate() {
            let edge_len = self.cumulative[i + 1] - self.cumulative[i];
            if self.cumulative[i + 1] < min_along {
                continue;
            }
            let start = if self.cumulative[i] < min_along {
                self.point_at(min_along)
            } else {
                pair[0]
            };
            let (t, offset) = closest_on_segment(p, &start, &pair[1]);
            let start_along = self.cumulative[i].max(min_along);
            let along = start_along + t * (self.cumulative[i] + edge_len - start_along);
            if best.is_none_or(|b| offset < b.offset) {
                best = Some(Projection { along, offset, edge: i });
            }
        }
        best.expect("polyline has at least one edge")
    }

    /// Point at `along` meters from the start, clamped to the ends.
    pub fn point_at(&self, along: f64) -> GeoPoint {
        if along <= 0.0 {
            return self.first();
        }
        if along >= self.length() {
            return self.last();
        }
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&along)) {
            Ok(i) => return self.waypoints[i],
            Err(i) => i - 1,
        };
        let span = self.cumulative[i + 1] - self.cumulative[i];
        self.waypoints[i].lerp(&self.waypoints[i + 1], (along - self.cumulative[i]) / span)
    }

    /// Distance left to the last waypoint after projecting `p` onto the line.
    pub fn remaining_from(&self, p: &GeoPoint) -> f64 {
        self.length() - self.project(p).along
    }
}
