//! Scene geometry and the scenario record.

use serde::{Deserialize, Serialize};

use super::geometry::{segments_intersect, OrientedBox, Polygon, Polyline, Pose, Vec2};
use super::trajectory::{Lateral, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Vehicle,
    Cyclist,
    Pedestrian,
    Cone,
}

impl ObstacleKind {
    pub fn index(self) -> usize {
        match self {
            ObstacleKind::Vehicle => 0,
            ObstacleKind::Cyclist => 1,
            ObstacleKind::Pedestrian => 2,
            ObstacleKind::Cone => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub length: f64,
    pub width: f64,
    /// Poses from step 0 on, sharing the ego `dt`.
    pub trajectory: Trajectory<f64>,
}

impl Obstacle {
    /// Pose at step `k` (relative to the obstacle's `t0`), extrapolated at
    /// constant velocity past the end.
    pub fn pose_at(&self, k: i64) -> Pose<f64> {
        let wps = &self.trajectory.waypoints;
        let idx = k - self.trajectory.t0;
        if idx <= 0 {
            return wps[0];
        }
        let idx = idx as usize;
        if idx < wps.len() {
            return wps[idx];
        }
        let last = wps[wps.len() - 1];
        let v = self.velocity_at(wps.len() as i64 - 1 + self.trajectory.t0);
        let extra = (idx - (wps.len() - 1)) as f64 * self.trajectory.dt;
        Pose::new(last.x + v.x * extra, last.y + v.y * extra, last.heading)
    }

    /// Velocity by forward difference (backward at the last waypoint).
    pub fn velocity_at(&self, k: i64) -> Vec2<f64> {
        let wps = &self.trajectory.waypoints;
        if wps.len() < 2 {
            return Vec2::zero();
        }
        let idx = (k - self.trajectory.t0).clamp(0, wps.len() as i64 - 1) as usize;
        let (a, b) = if idx + 1 < wps.len() { (idx, idx + 1) } else { (idx - 1, idx) };
        (wps[b].position() - wps[a].position()).scale(1.0 / self.trajectory.dt)
    }

    pub fn box_at(&self, k: i64) -> OrientedBox<f64> {
        OrientedBox::new(self.pose_at(k), self.length, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub stop_line: [Vec2<f64>; 2],
    /// State per step from step 0; the last entry holds afterwards.
    pub schedule: Vec<LightState>,
}

impl TrafficLight {
    pub fn state_at(&self, k: i64) -> LightState {
        if self.schedule.is_empty() {
            return LightState::Green;
        }
        let i = k.clamp(0, self.schedule.len() as i64 - 1) as usize;
        self.schedule[i]
    }

    /// Steps until the light turns green, counted from step 0.
    pub fn red_steps(&self) -> usize {
        self.schedule.iter().take_while(|s| **s == LightState::Red).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Polyline<f64>,
    /// Travel direction at each centerline point.
    pub directions: Vec<f64>,
}

impl Lane {
    pub fn straight(y: f64, x0: f64, x1: f64, n: usize) -> Self {
        let pts: Vec<Vec2<f64>> = (0..n)
            .map(|i| Vec2::new(x0 + (x1 - x0) * i as f64 / (n - 1) as f64, y))
            .collect();
        let directions = vec![0.0; n];
        Self { centerline: Polyline::new(pts), directions }
    }

    /// Lateral offset of the centerline at `x = 0` in the scene frame.
    pub fn offset_at_origin(&self) -> f64 {
        self.centerline
            .project(Vec2::zero())
            .map(|p| -p.lateral)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub drivable_area: Vec<Polygon<f64>>,
    pub lanes: Vec<Lane>,
    pub obstacles: Vec<Obstacle>,
    pub traffic_lights: Vec<TrafficLight>,
    pub route: Polyline<f64>,
    pub lane_width: f64,
}

impl Scene {
    pub fn in_drivable_area(&self, p: Vec2<f64>) -> bool {
        self.drivable_area.iter().any(|poly| poly.contains(p))
    }

    /// Nearest lane centerline: `(lane index, signed lateral offset, lane
    /// direction at the closest point)`.
    pub fn nearest_lane(&self, p: Vec2<f64>) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for (i, lane) in self.lanes.iter().enumerate() {
            if let Some(pr) = lane.centerline.project(p) {
                if best.map_or(true, |b| pr.distance < b.3) {
                    best = Some((i, pr.lateral, pr.direction, pr.distance));
                }
            }
        }
        best.map(|(i, lat, dir, _)| (i, lat, dir))
    }

    /// Structural checks: simple polygons, shared `dt`, stop lines on lanes.
    pub fn check(&self, dt: f64) -> Result<(), String> {
        for (i, poly) in self.drivable_area.iter().enumerate() {
            if !poly.is_simple() {
                return Err(format!("drivable polygon {i} is not simple"));
            }
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if (ob.trajectory.dt - dt).abs() > 1e-12 {
                return Err(format!("obstacle {i} dt {} differs from ego dt {dt}", ob.trajectory.dt));
            }
        }
        for (i, tl) in self.traffic_lights.iter().enumerate() {
            let hits = self.lanes.iter().any(|lane| {
                lane.centerline
                    .points
                    .windows(2)
                    .any(|w| segments_intersect(w[0], w[1], tl.stop_line[0], tl.stop_line[1]))
            });
            if !hits {
                return Err(format!("stop line {i} does not cross any lane"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Recovery,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Positive, Label::Negative, Label::Recovery];

    pub fn name(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Recovery => "recovery",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    GoStraight,
    TurnLeft,
    TurnRight,
    ChangeLeft,
    ChangeRight,
    Stop,
}

impl Instruction {
    pub fn index(self) -> usize {
        match self {
            Instruction::GoStraight => 0,
            Instruction::TurnLeft => 1,
            Instruction::TurnRight => 2,
            Instruction::ChangeLeft => 3,
            Instruction::ChangeRight => 4,
            Instruction::Stop => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    LaneChange,
    LaneBias,
    Vru,
    Construction,
    StopSign,
    CutIn,
    LeadBraking,
}

impl Archetype {
    pub const ALL: [Archetype; 7] = [
        Archetype::LaneChange,
        Archetype::LaneBias,
        Archetype::Vru,
        Archetype::Construction,
        Archetype::StopSign,
        Archetype::CutIn,
        Archetype::LeadBraking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::LaneChange => "lane_change",
            Archetype::LaneBias => "lane_bias",
            Archetype::Vru => "vru",
            Archetype::Construction => "construction",
            Archetype::StopSign => "stop_sign",
            Archetype::CutIn => "cut_in",
            Archetype::LeadBraking => "lead_braking",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// One training / evaluation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub scene: Scene,
    /// History poses ending at step 0.
    pub ego_history: Trajectory<f64>,
    /// Future starting at step 0 (current pose included).
    pub reference: Trajectory<f64>,
    pub label: Label,
    pub instruction: Instruction,
    pub archetype: Archetype,
    /// Maneuver tags attached to the reference; empty means fast thinking.
    pub reasoning_tags: Vec<Lateral>,
}

impl Scenario {
    pub fn current_pose(&self) -> Pose<f64> {
        *self.ego_history.last()
    }

    /// Number of future steps in the reference.
    pub fn horizon(&self) -> usize {
        self.reference.len().saturating_sub(1)
    }
}
