//! Structured scene features fed to the encoder, one row per context token.

use super::PolicyError;
use crate::microworld::geometry::{Pose, Vec2};
use crate::microworld::scene::{LightState, Scenario};
use crate::nnkit::Tensor;

pub const FEATURE_DIM: usize = 24;

const KIND_HISTORY: usize = 0;
const KIND_INSTRUCTION: usize = 1;
const KIND_OBSTACLE: usize = 2;
const KIND_LANE: usize = 3;
const KIND_LIGHT: usize = 4;
const KIND_ROUTE: usize = 5;
const P: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens {
    pub features: Tensor,
    /// `false` marks padding.
    pub valid: Vec<bool>,
}

impl ContextTokens {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Append zero rows marked as padding.
    pub fn padded(&self, n: usize) -> ContextTokens {
        let extra = n.saturating_sub(self.len());
        let mut features = self.features.clone();
        features.data.extend(std::iter::repeat(0.0).take(extra * FEATURE_DIM));
        features.rows += extra;
        let mut valid = self.valid.clone();
        valid.extend(std::iter::repeat(false).take(extra));
        ContextTokens { features, valid }
    }

    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }
}

fn row(kind: usize) -> [f64; FEATURE_DIM] {
    let mut r = [0.0; FEATURE_DIM];
    r[kind] = 1.0;
    r
}

fn local(frame: &Pose<f64>, p: Vec2<f64>) -> Vec2<f64> {
    frame.to_local(p)
}

/// Feature rows for a scenario, in the ego frame at t = 0.
pub fn encode_features(s: &Scenario, max_obstacles: usize, max_context: usize) -> Result<ContextTokens, PolicyError> {
    let frame = s.current_pose();
    let scene = &s.scene;
    let mut rows: Vec<[f64; FEATURE_DIM]> = Vec::new();

    let hist = &s.ego_history;
    let speeds = hist.speeds();
    let n_h = hist.len();
    for (k, w) in hist.waypoints.iter().enumerate() {
        let p = local(&frame, w.position());
        let mut r = row(KIND_HISTORY);
        r[P] = p.x / 10.0;
        r[P + 1] = p.y / 10.0;
        r[P + 2] = crate::scalar::wrap_angle(w.heading - frame.heading);
        r[P + 3] = (k as f64 + 1.0 - n_h as f64) / (n_h.max(2) - 1) as f64;
        let v = if speeds.is_empty() { 0.0 } else { speeds[k.saturating_sub(1).min(speeds.len() - 1)] };
        r[P + 4] = v / 10.0;
        rows.push(r);
    }

    let mut r = row(KIND_INSTRUCTION);
    r[P + s.instruction.index()] = 1.0;
    rows.push(r);

    let mut obs: Vec<(f64, [f64; FEATURE_DIM])> = scene
        .obstacles
        .iter()
        .map(|ob| {
            let pose = ob.pose_at(0);
            let p = local(&frame, pose.position());
            let v0 = frame_rot(&frame, ob.velocity_at(0));
            let v1 = frame_rot(&frame, ob.velocity_at(2));
            let h = crate::scalar::wrap_angle(pose.heading - frame.heading);
            let mut r = row(KIND_OBSTACLE);
            r[P + ob.kind.index()] = 1.0;
            let q = P + 4;
            r[q] = p.x / 20.0;
            r[q + 1] = p.y / 10.0;
            r[q + 2] = h.cos();
            r[q + 3] = h.sin();
            r[q + 4] = v0.x / 10.0;
            r[q + 5] = v0.y / 10.0;
            r[q + 6] = (v1.x - v0.x) / (2.0 * s.reference.dt) / 5.0;
            r[q + 7] = (v1.y - v0.y) / (2.0 * s.reference.dt) / 5.0;
            r[q + 8] = ob.length / 5.0;
            r[q + 9] = ob.width / 5.0;
            r[q + 10] = p.norm() / 20.0;
            // lateral offset in half-lane units
            r[q + 11] = p.y / (0.5 * scene.lane_width);
            (p.norm(), r)
        })
        .collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    rows.extend(obs.into_iter().take(max_obstacles).map(|(_, r)| r));

    for lane in &scene.lanes {
        let Some(pr) = lane.centerline.project(frame.position()) else {
            continue;
        };
        let dir = crate::scalar::wrap_angle(pr.direction - frame.heading);
        let mut r = row(KIND_LANE);
        r[P] = -pr.lateral / scene.lane_width;
        r[P + 1] = dir.cos();
        r[P + 2] = dir.sin();
        let (start, end) = closure_ahead(s, lane, pr.arc_length);
        r[P + 3] = if start.is_some() { 1.0 } else { 0.0 };
        r[P + 4] = start.unwrap_or(100.0) / 50.0;
        r[P + 5] = end.unwrap_or(100.0) / 50.0;
        r[P + 6] = if pr.lateral.abs() <= 0.5 * scene.lane_width { 1.0 } else { 0.0 };
        rows.push(r);
    }

    for tl in &scene.traffic_lights {
        let mid = (tl.stop_line[0] + tl.stop_line[1]).scale(0.5);
        let p = local(&frame, mid);
        let mut r = row(KIND_LIGHT);
        r[P] = p.x / 20.0;
        r[P + 1] = p.y / 10.0;
        r[P + 2] = if tl.state_at(0) == LightState::Red { 1.0 } else { 0.0 };
        let green = tl.schedule.iter().position(|st| *st == LightState::Green);
        r[P + 3] = green.map_or(1.0, |g| g as f64 / 10.0);
        r[P + 4] = p.norm() / 20.0;
        rows.push(r);
    }

    if let (Some(first), Some(last)) = (scene.route.points.first(), scene.route.points.last()) {
        let end = local(&frame, *last);
        let mut r = row(KIND_ROUTE);
        r[P] = end.x / 50.0;
        r[P + 1] = end.y / scene.lane_width;
        if let Some(pr) = scene.route.project(frame.position()) {
            r[P + 2] = (scene.route.length() - pr.arc_length) / 50.0;
            r[P + 3] = pr.lateral / scene.lane_width;
        }
        let st = local(&frame, *first);
        r[P + 4] = st.y / scene.lane_width;
        rows.push(r);
    }

    if rows.len() > max_context {
        return Err(PolicyError::ContextOverflow { len: rows.len(), max: max_context });
    }
    let n = rows.len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(ContextTokens { features: Tensor { rows: n, cols: FEATURE_DIM, data }, valid: vec![true; n] })
}

fn frame_rot(frame: &Pose<f64>, v: Vec2<f64>) -> Vec2<f64> {
    v.rotate(-frame.heading)
}

/// Start and end (metres ahead along the lane) of the first stretch where the
/// lane centre leaves the drivable area, looking 100 m ahead.
fn closure_ahead(s: &Scenario, lane: &crate::microworld::Lane, from: f64) -> (Option<f64>, Option<f64>) {
    let pts = &lane.centerline.points;
    let (Some(a), Some(b)) = (pts.first(), pts.last()) else {
        return (None, None);
    };
    let dir = (*b - *a).scale(1.0 / (*b - *a).norm().max(1e-9));
    let mut start = None;
    for d in 0..=100 {
        let p = *a + dir.scale(from + d as f64);
        let inside = s.scene.in_drivable_area(p);
        match (start, inside) {
            (None, false) => start = Some(d as f64),
            (Some(_), true) => return (start, Some(d as f64)),
            _ => {}
        }
    }
    (start, None)
}
