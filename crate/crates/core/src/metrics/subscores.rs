use serde::{Deserialize, Serialize};

use super::aggregate::{epdms, pdms, SubScores};
use crate::microworld::geometry::{segments_intersect, OrientedBox, Polyline, Pose};
use crate::microworld::scene::{Label, LightState, Scenario, Scene};
use crate::microworld::trajectory::Trajectory;
use crate::scalar::wrap_angle;

/// Which aggregate serves as the driving score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    #[default]
    Pdms,
    Epdms,
}

/// Vehicle footprint and comfort / TTC bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub ego_length: f64,
    pub ego_width: f64,
    /// Longitudinal acceleration bound (m/s^2).
    pub a_max: f64,
    /// Jerk bound (m/s^3).
    pub j_max: f64,
    /// Constant-velocity look-ahead for TTC (s).
    pub ttc_horizon: f64,
    /// Sub-step for the TTC look-ahead (s).
    pub ttc_step: f64,
    /// First-step acceleration difference tolerated between consecutive plans.
    pub ec_tol: f64,
    /// Reference progress below which EP is vacuous.
    pub ep_min_progress: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ego_length: 4.6,
            ego_width: 1.9,
            a_max: 3.0,
            j_max: 5.0,
            ttc_horizon: 1.0,
            ttc_step: 0.25,
            ec_tol: 1.0,
            ep_min_progress: 0.1,
        }
    }
}

pub fn ego_box(pose: Pose<f64>, cfg: &MetricConfig) -> OrientedBox<f64> {
    OrientedBox::new(pose, cfg.ego_length, cfg.ego_width)
}

fn step_of(traj: &Trajectory<f64>, k: usize) -> i64 {
    traj.t0 + k as i64
}

fn bin(ok: bool) -> f64 {
    if ok {
        1.0
    } else {
        0.0
    }
}

/// 0 when the ego footprint overlaps any obstacle at any step.
pub fn sub_nc(traj: &Trajectory<f64>, scene: &Scene, cfg: &MetricConfig) -> f64 {
    let hit = traj.waypoints.iter().enumerate().any(|(k, w)| {
        let eb = ego_box(*w, cfg);
        let t = step_of(traj, k);
        scene.obstacles.iter().any(|ob| eb.overlaps(&ob.box_at(t)))
    });
    bin(!hit)
}

/// 1 iff every ego corner stays inside the drivable area.
pub fn sub_dac(traj: &Trajectory<f64>, scene: &Scene, cfg: &MetricConfig) -> f64 {
    bin(traj
        .waypoints
        .iter()
        .all(|w| ego_box(*w, cfg).corners().iter().all(|c| scene.in_drivable_area(*c))))
}

/// 1 iff the heading stays within pi/2 of the nearest lane direction.
pub fn sub_ddc(traj: &Trajectory<f64>, scene: &Scene) -> f64 {
    bin(traj.waypoints.iter().all(|w| match scene.nearest_lane(w.position()) {
        Some((_, _, dir)) => wrap_angle(w.heading - dir).abs() <= std::f64::consts::FRAC_PI_2,
        None => true,
    }))
}

/// 1 iff the ego centre never crosses a stop line while it is red.
pub fn sub_tlc(traj: &Trajectory<f64>, scene: &Scene) -> f64 {
    for (k, w) in traj.waypoints.windows(2).enumerate() {
        let t = step_of(traj, k);
        for tl in &scene.traffic_lights {
            if tl.state_at(t) == LightState::Red
                && segments_intersect(w[0].position(), w[1].position(), tl.stop_line[0], tl.stop_line[1])
            {
                return 0.0;
            }
        }
    }
    1.0
}

fn route_progress(traj: &Trajectory<f64>, route: &Polyline<f64>) -> Option<f64> {
    let a = route.project(traj.first().position())?;
    let b = route.project(traj.last().position())?;
    Some(b.arc_length - a.arc_length)
}

fn progress_ratio(progress: f64, target: f64, cfg: &MetricConfig) -> f64 {
    if target < cfg.ep_min_progress {
        return 1.0;
    }
    (progress / target).clamp(0.0, 1.0)
}

/// Ego progress along the route relative to the reference's progress.
pub fn sub_ep(traj: &Trajectory<f64>, reference: &Trajectory<f64>, route: &Polyline<f64>, cfg: &MetricConfig) -> f64 {
    let (Some(p), Some(r)) = (route_progress(traj, route), route_progress(reference, route)) else {
        return 1.0;
    };
    progress_ratio(p, r, cfg)
}

/// Ego progress relative to the remaining route length; used where the
/// reference is not a progress target.
pub fn sub_ep_route(traj: &Trajectory<f64>, route: &Polyline<f64>, cfg: &MetricConfig) -> f64 {
    let Some(start) = route.project(traj.first().position()) else {
        return 1.0;
    };
    let p = route_progress(traj, route).unwrap_or(0.0);
    progress_ratio(p, route.length() - start.arc_length, cfg)
}

/// 1 iff no constant-velocity projection over the TTC horizon collides.
pub fn sub_ttc(traj: &Trajectory<f64>, scene: &Scene, cfg: &MetricConfig) -> f64 {
    let wps = &traj.waypoints;
    if wps.len() < 2 || scene.obstacles.is_empty() {
        return 1.0;
    }
    let n_sub = (cfg.ttc_horizon / cfg.ttc_step).round().max(1.0) as usize;
    for k in 0..wps.len() {
        let (a, b) = if k + 1 < wps.len() { (k, k + 1) } else { (k - 1, k) };
        let v = (wps[b].position() - wps[a].position()).scale(1.0 / traj.dt);
        let t = step_of(traj, k);
        for ob in &scene.obstacles {
            let op = ob.pose_at(t);
            let ov = ob.velocity_at(t);
            for j in 1..=n_sub {
                let s = j as f64 * cfg.ttc_horizon / n_sub as f64;
                let ep = wps[k].position() + v.scale(s);
                let eb = ego_box(Pose::new(ep.x, ep.y, wps[k].heading), cfg);
                let obp = op.position() + ov.scale(s);
                let obb = OrientedBox::new(Pose::new(obp.x, obp.y, op.heading), ob.length, ob.width);
                if eb.overlaps(&obb) {
                    return 0.0;
                }
            }
        }
    }
    1.0
}

/// 1 iff the lateral deviation from the nearest centerline stays within half a
/// lane width outside lane-change windows (the two steps around a switch of
/// nearest lane).
pub fn sub_lk(traj: &Trajectory<f64>, scene: &Scene) -> f64 {
    let near: Vec<Option<(usize, f64, f64)>> = traj.waypoints.iter().map(|w| scene.nearest_lane(w.position())).collect();
    let mut in_window = vec![false; near.len()];
    for k in 1..near.len() {
        if let (Some(a), Some(b)) = (near[k - 1], near[k]) {
            if a.0 != b.0 {
                in_window[k - 1] = true;
                in_window[k] = true;
            }
        }
    }
    let limit = 0.5 * scene.lane_width;
    bin(near
        .iter()
        .zip(&in_window)
        .all(|(n, w)| *w || n.map_or(true, |(_, lat, _)| lat.abs() <= limit + 1e-9)))
}

/// 1 iff longitudinal acceleration and jerk stay within bounds.
pub fn sub_comfort(traj: &Trajectory<f64>, cfg: &MetricConfig) -> f64 {
    let eps = 1e-9;
    let ok_a = traj.accelerations().iter().all(|a| a.abs() <= cfg.a_max + eps);
    let ok_j = traj.jerks().iter().all(|j| j.abs() <= cfg.j_max + eps);
    bin(ok_a && ok_j)
}

/// Comfort over history followed by the plan.
pub fn sub_hc(traj: &Trajectory<f64>, history: &Trajectory<f64>, cfg: &MetricConfig) -> f64 {
    sub_comfort(&history.concat(traj), cfg)
}

/// 1 iff the plan's first acceleration matches the previous plan's
/// acceleration at the same step within `ec_tol`. Without a previous plan the
/// term is vacuous.
pub fn sub_ec(traj: &Trajectory<f64>, prev_plan: Option<&Trajectory<f64>>, cfg: &MetricConfig) -> f64 {
    let Some(prev) = prev_plan else {
        return 1.0;
    };
    let a = traj.accelerations();
    let b = prev.accelerations();
    let Some(first) = a.first() else {
        return 1.0;
    };
    let offset = traj.t0 - prev.t0;
    if offset < 0 || offset as usize >= b.len() {
        return 1.0;
    }
    bin((first - b[offset as usize]).abs() <= cfg.ec_tol + 1e-12)
}

/// Sub-scores plus both aggregates. An invalid plan scores zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub subscores: SubScores<f64>,
    pub pdms: f64,
    pub epdms: f64,
    pub valid: bool,
}

impl ScoreReport {
    pub fn invalid() -> Self {
        Self { subscores: SubScores::zeros(), pdms: 0.0, epdms: 0.0, valid: false }
    }

    pub fn driving(&self, mode: BenchmarkMode) -> f64 {
        match mode {
            BenchmarkMode::Pdms => self.pdms,
            BenchmarkMode::Epdms => self.epdms,
        }
    }
}

fn subscores_of(
    traj: &Trajectory<f64>,
    scenario: &Scenario,
    prev_plan: Option<&Trajectory<f64>>,
    cfg: &MetricConfig,
) -> SubScores<f64> {
    let scene = &scenario.scene;
    let ep = match scenario.label {
        Label::Negative => sub_ep_route(traj, &scene.route, cfg),
        _ => sub_ep(traj, &scenario.reference, &scene.route, cfg),
    };
    SubScores {
        nc: sub_nc(traj, scene, cfg),
        dac: sub_dac(traj, scene, cfg),
        ddc: sub_ddc(traj, scene),
        tlc: sub_tlc(traj, scene),
        ep,
        ttc: sub_ttc(traj, scene, cfg),
        lk: sub_lk(traj, scene),
        hc: sub_hc(traj, &scenario.ego_history, cfg),
        ec: sub_ec(traj, prev_plan, cfg),
        c: sub_comfort(traj, cfg),
    }
}

/// Score a plan (current pose first) against a scenario. EP is measured
/// against the reference's route progress, except on negative scenarios where
/// the remaining route length is the target. EPDMS filters against the
/// scenario reference scored the same way.
pub fn score(
    traj: &Trajectory<f64>,
    scenario: &Scenario,
    prev_plan: Option<&Trajectory<f64>>,
    cfg: &MetricConfig,
) -> ScoreReport {
    if traj.len() < 2 || !traj.is_finite() || !(traj.dt > 0.0) {
        return ScoreReport::invalid();
    }
    let agent = subscores_of(traj, scenario, prev_plan, cfg);
    let human = subscores_of(&scenario.reference, scenario, None, cfg);
    ScoreReport { subscores: agent, pdms: pdms(&agent), epdms: epdms(&agent, &human), valid: true }
}
