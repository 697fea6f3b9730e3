//! Constant-surge-speed planar vehicle with line-of-sight waypoint
//! guidance. Unicycle kinematics stand in for hull dynamics; the mapper and
//! planner are the subject here, not the hull.

use crate::error::{Error, Result};
use crate::Point;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VehicleState {
    pub position: Point,
    /// Radians, wrapped to (-pi, pi].
    pub heading: f64,
    /// Meters per second, constant over a mission.
    pub surge_speed: f64,
}

impl VehicleState {
    pub fn new(position: Point, heading: f64, surge_speed: f64) -> Result<Self> {
        if !(surge_speed.is_finite() && surge_speed > 0.0) {
            return Err(Error::InvalidInput(format!("surge speed {surge_speed} must be positive")));
        }
        Ok(Self { position, heading: wrap_angle(heading), surge_speed })
    }
}

/// Ordered waypoint list with cached cumulative arc length.
#[derive(Clone, Debug)]
pub struct Path {
    waypoints: Vec<Point>,
    /// cumulative[i] = arc length from the first waypoint to waypoint i.
    cumulative: Vec<f64>,
}

impl Path {
    pub fn new(waypoints: Vec<Point>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::InvalidInput("a path needs at least one waypoint".into()));
        }
        let mut cumulative = Vec::with_capacity(waypoints.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in waypoints.windows(2) {
            acc += (w[1] - w[0]).norm();
            cumulative.push(acc);
        }
        Ok(Self { waypoints, cumulative })
    }

    pub fn waypoints(&self) -> &[Point] {
        &self.waypoints
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn first(&self) -> Point {
        self.waypoints[0]
    }

    pub fn last(&self) -> Point {
        *self.waypoints.last().unwrap()
    }

    /// Append the waypoints of `extension`, skipping its first waypoint if
    /// it coincides with this path's last.
    pub fn extend_with(&mut self, extension: &Path) {
        let mut wps = self.waypoints.clone();
        for (i, w) in extension.waypoints.iter().enumerate() {
            if i == 0 && (*w - self.last()).norm() < 1e-9 {
                continue;
            }
            wps.push(*w);
        }
        *self = Path::new(wps).expect("nonempty by construction");
    }

    /// Point at the given arc length, clamped to the path ends.
    pub fn point_at(&self, s: f64) -> Point {
        if s <= 0.0 {
            return self.waypoints[0];
        }
        let total = self.total_length();
        if s >= total {
            return self.last();
        }
        // cumulative is sorted; find the segment containing s.
        let idx = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let seg_len = self.cumulative[idx + 1] - self.cumulative[idx];
        if seg_len == 0.0 {
            return self.waypoints[idx];
        }
        let t = (s - self.cumulative[idx]) / seg_len;
        self.waypoints[idx] + (self.waypoints[idx + 1] - self.waypoints[idx]) * t
    }

    /// Arc length of the path point nearest to `p` (the earliest such point
    /// on ties).
    pub fn nearest_arclength(&self, p: Point) -> f64 {
        if self.waypoints.len() == 1 {
            return 0.0;
        }
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.waypoints.len() - 1 {
            let a = self.waypoints[i];
            let b = self.waypoints[i + 1];
            let ab = b - a;
            let len_sq = ab.norm_squared();
            let t = if len_sq == 0.0 { 0.0 } else { ((p - a).dot(&ab) / len_sq).clamp(0.0, 1.0) };
            let closest = a + ab * t;
            let d = (p - closest).norm_squared();
            if d < best_d - 1e-15 {
                best_d = d;
                best_s = self.cumulative[i] + len_sq.sqrt() * t;
            }
        }
        best_s
    }
}

/// Line-of-sight heading command: aim at the point one lookahead distance
/// past the vehicle's current progress along the path; at the path end, aim
/// at the final waypoint.
pub fn los_heading(state: &VehicleState, path: &Path, lookahead: f64) -> f64 {
    let progress = path.nearest_arclength(state.position);
    let target = if progress + lookahead >= path.total_length() {
        path.last()
    } else {
        path.point_at(progress + lookahead)
    };
    let d = target - state.position;
    if d.norm() < 1e-12 {
        state.heading
    } else {
        d.y.atan2(d.x)
    }
}

/// Advance one step of unicycle kinematics: turn toward the command at most
/// `turn_rate_limit * dt`, then move exactly `surge_speed * dt` along the
/// new heading.
pub fn step(state: &VehicleState, heading_cmd: f64, dt: f64, turn_rate_limit: f64) -> VehicleState {
    assert!(dt > 0.0, "dt must be positive");
    let err = wrap_angle(heading_cmd - state.heading);
    let max_turn = turn_rate_limit * dt;
    let turn = err.clamp(-max_turn, max_turn);
    let heading = wrap_angle(state.heading + turn);
    let position = Point::new(
        state.position.x + state.surge_speed * dt * heading.cos(),
        state.position.y + state.surge_speed * dt * heading.sin(),
    );
    VehicleState { position, heading, surge_speed: state.surge_speed }
}

/// Arc-length progress of the vehicle along the path and its fraction of
/// the total length (1.0 for a degenerate zero-length path).
pub fn path_progress(state: &VehicleState, path: &Path) -> (f64, f64) {
    let s = path.nearest_arclength(state.position);
    let total = path.total_length();
    let fraction = if total > 0.0 { s / total } else { 1.0 };
    (s, fraction)
}
