//! Junction geometry used to classify turns and derive the conflict table.
//!
//! Each junction is a disc. Incoming lanes enter on the rim opposite their
//! travel heading, outgoing lanes leave on the rim along theirs, both offset
//! to the right-hand side of the carriageway. A movement's path is the chord
//! between its entry and exit points.

use serde::{Deserialize, Serialize};

pub const LANE_WIDTH_M: f64 = 3.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Right,
    Through,
    Left,
}

impl Turn {
    pub fn as_str(self) -> &'static str {
        match self {
            Turn::Right => "right",
            Turn::Through => "through",
            Turn::Left => "left",
        }
    }
}

/// Signed heading change in degrees, normalized to (-180, 180]. Positive is
/// counter-clockwise (a left turn under right-hand traffic).
pub fn turn_angle(heading_in_deg: f64, heading_out_deg: f64) -> f64 {
    let mut a = (heading_out_deg - heading_in_deg) % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

pub fn classify_turn(heading_in_deg: f64, heading_out_deg: f64) -> Turn {
    let a = turn_angle(heading_in_deg, heading_out_deg);
    if a > 30.0 {
        Turn::Left
    } else if a < -30.0 {
        Turn::Right
    } else {
        Turn::Through
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

fn unit(heading_deg: f64) -> (f64, f64) {
    let r = heading_deg.to_radians();
    (r.cos(), r.sin())
}

/// Lateral offset of lane `index` (0 = rightmost) on a road of `lanes` lanes,
/// measured from the road centreline towards the right.
fn lateral_offset(index: usize, lanes: usize) -> f64 {
    (lanes as f64 - index as f64 - 0.5) * LANE_WIDTH_M
}

pub fn entry_point(radius: f64, heading_deg: f64, lane_index: usize, lanes: usize) -> Point {
    let (dx, dy) = unit(heading_deg);
    let (rx, ry) = (dy, -dx);
    let off = lateral_offset(lane_index, lanes);
    Point {
        x: -radius * dx + off * rx,
        y: -radius * dy + off * ry,
    }
}

pub fn exit_point(radius: f64, heading_deg: f64, lane_index: usize, lanes: usize) -> Point {
    let (dx, dy) = unit(heading_deg);
    let (rx, ry) = (dy, -dx);
    let off = lateral_offset(lane_index, lanes);
    Point {
        x: radius * dx + off * rx,
        y: radius * dy + off * ry,
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Strict crossing test; segments that only touch at an endpoint do not cross.
pub fn segments_cross(a0: Point, a1: Point, b0: Point, b1: Point) -> bool {
    const EPS: f64 = 1e-9;
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    ((d1 > EPS && d2 < -EPS) || (d1 < -EPS && d2 > EPS))
        && ((d3 > EPS && d4 < -EPS) || (d3 < -EPS && d4 > EPS))
}

/// Geometric description of one movement at a junction.
#[derive(Debug, Clone, Copy)]
pub struct MovementPath {
    pub from_road: usize,
    pub to_lane: usize,
    pub turn: Turn,
    pub entry: Point,
    pub exit: Point,
}

/// Two movements conflict when their chords cross inside the junction or
/// they merge into the same lane. Movements from the same approach never
/// conflict (lane discipline) and right turns may share any phase.
pub fn conflicts(a: &MovementPath, b: &MovementPath) -> bool {
    if a.from_road == b.from_road {
        return false;
    }
    if a.turn == Turn::Right || b.turn == Turn::Right {
        return false;
    }
    if a.to_lane == b.to_lane {
        return true;
    }
    segments_cross(a.entry, a.exit, b.entry, b.exit)
}

pub fn junction_radius(max_lanes: usize) -> f64 {
    4.0 + 2.0 * LANE_WIDTH_M * max_lanes as f64
}
