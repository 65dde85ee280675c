//! Timed pose sequences, the unicycle integrator and geometric maneuver
//! classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geometry::{Pose, Vec2};
use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least {need} waypoints, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("dt must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("non-finite value at waypoint {0}")]
    NonFinite(usize),
    #[error("non-finite control at step {0}")]
    NonFiniteControl(usize),
}

/// Kinematic state of the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState<T = f64> {
    pub position: Vec2<T>,
    pub heading: T,
    pub speed: T,
    pub acceleration: T,
}

impl<T: Real> EgoState<T> {
    /// Heading is wrapped into `(-pi, pi]`, speed clamped at zero.
    pub fn new(position: Vec2<T>, heading: T, speed: T, acceleration: T) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            speed: speed.max(T::zero()),
            acceleration,
        }
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.position.x, self.position.y, self.heading)
    }
}

/// Waypoints sampled every `dt` seconds, the first one at step index `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T = f64> {
    pub waypoints: Vec<Pose<T>>,
    pub dt: T,
    pub t0: i64,
}

impl<T: Real> Trajectory<T> {
    pub fn new(waypoints: Vec<Pose<T>>, dt: T, t0: i64) -> Result<Self, TrajectoryError> {
        let t = Self { waypoints, dt, t0 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.waypoints.is_empty() {
            return Err(TrajectoryError::TooShort { need: 1, got: 0 });
        }
        if !(self.dt > T::zero() && self.dt.is_finite()) {
            return Err(TrajectoryError::BadDt(self.dt.as_f64()));
        }
        if let Some(i) = self.waypoints.iter().position(|w| !w.is_finite()) {
            return Err(TrajectoryError::NonFinite(i));
        }
        Ok(())
    }

    /// Build from positions; headings follow successive differences, the first
    /// waypoint keeps `start_heading` and stationary steps keep the previous
    /// heading.
    pub fn from_positions(start_heading: T, positions: &[Vec2<T>], dt: T, t0: i64) -> Self {
        let mut waypoints = Vec::with_capacity(positions.len());
        let mut heading = wrap_angle(start_heading);
        for (i, p) in positions.iter().enumerate() {
            if i > 0 {
                let d = *p - positions[i - 1];
                if d.norm() > T::lit(1e-6) {
                    heading = d.angle();
                }
            }
            waypoints.push(Pose::new(p.x, p.y, heading));
        }
        Self { waypoints, dt, t0 }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2<T>> {
        self.waypoints.iter().map(|w| w.position()).collect()
    }

    pub fn first(&self) -> &Pose<T> {
        &self.waypoints[0]
    }

    pub fn last(&self) -> &Pose<T> {
        &self.waypoints[self.waypoints.len() - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.dt.is_finite() && self.waypoints.iter().all(|w| w.is_finite())
    }

    /// Interval speeds `|p[k+1] - p[k]| / dt`.
    pub fn speeds(&self) -> Vec<T> {
        self.waypoints
            .windows(2)
            .map(|w| w[0].position().dist(w[1].position()) / self.dt)
            .collect()
    }

    /// Finite-difference longitudinal accelerations of [`Self::speeds`].
    pub fn accelerations(&self) -> Vec<T> {
        diff(&self.speeds(), self.dt)
    }

    pub fn jerks(&self) -> Vec<T> {
        diff(&self.accelerations(), self.dt)
    }

    pub fn arc_length(&self) -> T {
        self.waypoints
            .windows(2)
            .map(|w| w[0].position().dist(w[1].position()))
            .sum()
    }

    /// Apply a rigid motion: rotate by `angle` about the origin then translate.
    pub fn transformed(&self, angle: T, shift: Vec2<T>) -> Self {
        let waypoints = self
            .waypoints
            .iter()
            .map(|w| {
                let p = w.position().rotate(angle) + shift;
                Pose::new(p.x, p.y, wrap_angle(w.heading + angle))
            })
            .collect();
        Self { waypoints, dt: self.dt, t0: self.t0 }
    }

    /// Mirror across the x axis.
    pub fn reflected(&self) -> Self {
        let waypoints = self
            .waypoints
            .iter()
            .map(|w| Pose::new(w.x, -w.y, wrap_angle(-w.heading)))
            .collect();
        Self { waypoints, dt: self.dt, t0: self.t0 }
    }

    /// Join `self` and `next`, dropping `next`'s first waypoint when it
    /// duplicates the time of `self`'s last.
    pub fn concat(&self, next: &Self) -> Self {
        let mut waypoints = self.waypoints.clone();
        let last_t = self.t0 + self.len() as i64 - 1;
        let skip = if next.t0 <= last_t { (last_t - next.t0 + 1) as usize } else { 0 };
        waypoints.extend(next.waypoints.iter().skip(skip).copied());
        Self { waypoints, dt: self.dt, t0: self.t0 }
    }
}

fn diff<T: Real>(v: &[T], dt: T) -> Vec<T> {
    v.windows(2).map(|w| (w[1] - w[0]) / dt).collect()
}

/// Forward-Euler unicycle rollout. Waypoint `k` is the state after applying
/// control `k`; the start pose itself is not included.
pub fn rollout_kinematic<T: Real>(
    start: &EgoState<T>,
    controls: &[(T, T)],
    dt: T,
) -> Result<Trajectory<T>, TrajectoryError> {
    if !(dt > T::zero() && dt.is_finite()) {
        return Err(TrajectoryError::BadDt(dt.as_f64()));
    }
    if !start.position.is_finite() || !start.heading.is_finite() || !start.speed.is_finite() {
        return Err(TrajectoryError::NonFinite(0));
    }
    let mut x = start.position.x;
    let mut y = start.position.y;
    let mut h = start.heading;
    let mut v = start.speed.max(T::zero());
    let mut waypoints = Vec::with_capacity(controls.len());
    for (k, &(a, w)) in controls.iter().enumerate() {
        if !a.is_finite() || !w.is_finite() {
            return Err(TrajectoryError::NonFiniteControl(k));
        }
        x = x + v * h.cos() * dt;
        y = y + v * h.sin() * dt;
        h = wrap_angle(h + w * dt);
        v = (v + a * dt).max(T::zero());
        waypoints.push(Pose::new(x, y, h));
    }
    Ok(Trajectory { waypoints, dt, t0: 1 })
}

/// Recover the `(accel, yaw_rate)` sequence that [`rollout_kinematic`] would
/// need to reproduce `traj` from `start`. The final acceleration is not
/// observable from positions and is returned as zero.
pub fn controls_from_trajectory<T: Real>(start: &EgoState<T>, traj: &Trajectory<T>) -> Vec<(T, T)> {
    let dt = traj.dt;
    let n = traj.len();
    let mut poses = Vec::with_capacity(n + 1);
    poses.push(start.pose());
    poses.extend(traj.waypoints.iter().copied());
    // speed in force during step k moves poses[k] -> poses[k+1]
    let step_speed: Vec<T> = poses.windows(2).map(|w| w[0].position().dist(w[1].position()) / dt).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let yaw = wrap_angle(poses[k + 1].heading - poses[k].heading) / dt;
        let accel = if k + 1 < n { (step_speed[k + 1] - step_speed[k]) / dt } else { T::zero() };
        out.push((accel, yaw));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lateral {
    Straight,
    LeftTurn,
    RightTurn,
    ChangeLeft,
    ChangeRight,
}

impl Lateral {
    pub const ALL: [Lateral; 5] = [
        Lateral::Straight,
        Lateral::LeftTurn,
        Lateral::RightTurn,
        Lateral::ChangeLeft,
        Lateral::ChangeRight,
    ];

    pub fn mirrored(self) -> Self {
        match self {
            Lateral::Straight => Lateral::Straight,
            Lateral::LeftTurn => Lateral::RightTurn,
            Lateral::RightTurn => Lateral::LeftTurn,
            Lateral::ChangeLeft => Lateral::ChangeRight,
            Lateral::ChangeRight => Lateral::ChangeLeft,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lateral::Straight => "straight",
            Lateral::LeftTurn => "left_turn",
            Lateral::RightTurn => "right_turn",
            Lateral::ChangeLeft => "change_left",
            Lateral::ChangeRight => "change_right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Longitudinal {
    Keep,
    Accelerate,
    Decelerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManeuverLabel {
    pub lateral: Lateral,
    pub longitudinal: Longitudinal,
}

/// Decision thresholds for [`classify_maneuver`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManeuverThresholds {
    /// Net heading change separating turns from straight driving (rad).
    pub turn: f64,
    /// Net lateral offset marking a lane change (m).
    pub lane_change: f64,
    /// Net speed change marking acceleration or deceleration (m/s).
    pub speed_change: f64,
}

impl Default for ManeuverThresholds {
    fn default() -> Self {
        Self {
            turn: std::f64::consts::FRAC_PI_6,
            lane_change: 1.75,
            speed_change: 1.5,
        }
    }
}

/// Classify the maneuver over the full horizon from the net signed heading
/// change, the net lateral offset relative to the initial heading and the net
/// speed change.
pub fn classify_maneuver<T: Real>(traj: &Trajectory<T>, th: &ManeuverThresholds) -> ManeuverLabel {
    let wps = &traj.waypoints;
    let first = wps[0];
    if wps.iter().all(|w| w.position() == first.position()) {
        return ManeuverLabel { lateral: Lateral::Straight, longitudinal: Longitudinal::Keep };
    }
    let dpsi: T = wps.windows(2).map(|w| wrap_angle(w[1].heading - w[0].heading)).sum();
    let turn = T::lit(th.turn);
    let lateral = if dpsi >= turn {
        Lateral::LeftTurn
    } else if dpsi <= -turn {
        Lateral::RightTurn
    } else {
        let normal = Vec2::from_angle(first.heading).perp();
        let offset = (wps[wps.len() - 1].position() - first.position()).dot(normal);
        let lc = T::lit(th.lane_change);
        if offset > lc {
            Lateral::ChangeLeft
        } else if offset < -lc {
            Lateral::ChangeRight
        } else {
            Lateral::Straight
        }
    };
    let speeds = traj.speeds();
    let dv = if speeds.len() >= 2 { speeds[speeds.len() - 1] - speeds[0] } else { T::zero() };
    let acc = T::lit(th.speed_change);
    let longitudinal = if dv > acc {
        Longitudinal::Accelerate
    } else if dv < -acc {
        Longitudinal::Decelerate
    } else {
        Longitudinal::Keep
    };
    ManeuverLabel { lateral, longitudinal }
}
