//! Reward shaping: reference matching, reasoning-length penalty, the
//! reasoning/trajectory consistency check and the combined reward.

use serde::{Deserialize, Serialize};

use crate::metrics::{score, BenchmarkMode, MetricConfig, ScoreReport};
use crate::microworld::scene::{Label, Scenario};
use crate::microworld::trajectory::{classify_maneuver, Lateral, ManeuverThresholds, Trajectory};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingConfig {
    pub lambda_n: f64,
    pub lambda_r: f64,
    pub lambda_c: f64,
    /// Distance at which reference matching reaches zero (m).
    pub delta: f64,
    /// Reasoning length at the centre of the length penalty (tokens).
    pub l_tol: f64,
    pub gamma: f64,
    /// Value replacing the length penalty when reasoning and trajectory disagree.
    pub kappa_align: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self { lambda_n: 0.5, lambda_r: 0.5, lambda_c: 0.05, delta: 2.0, l_tol: 4.0, gamma: 0.5, kappa_align: 10.0 }
    }
}

/// Mean Euclidean distance between time-aligned positions over the common
/// prefix of both trajectories.
pub fn avg_distance<T: Real>(traj: &Trajectory<T>, reference: &Trajectory<T>) -> T {
    let n = traj.len().min(reference.len());
    if n == 0 {
        return T::zero();
    }
    let total: T = traj
        .waypoints
        .iter()
        .zip(&reference.waypoints)
        .map(|(a, b)| (a.position() - b.position()).norm())
        .sum();
    total / <T as Real>::from_usize(n)
}

/// `clip(1 - d / delta, 0, 1)`.
pub fn reference_match<T: Real>(traj: &Trajectory<T>, reference: &Trajectory<T>, delta: T) -> T {
    reference_match_distance(avg_distance(traj, reference), delta)
}

pub fn reference_match_distance<T: Real>(d: T, delta: T) -> T {
    (T::one() - d / delta).clip(T::zero(), T::one())
}

/// `sigmoid((L - L_tol) * gamma)`.
pub fn cot_penalty<T: Real>(len: T, l_tol: T, gamma: T) -> T {
    T::one() / (T::one() + (-(len - l_tol) * gamma).exp())
}

/// Whether the reasoning tags agree with the executed maneuver. No tags is
/// consistent; tags naming different maneuvers are not.
pub fn alignment_check<T: Real>(tags: &[Lateral], traj: &Trajectory<T>, th: &ManeuverThresholds) -> bool {
    let Some(&first) = tags.first() else {
        return true;
    };
    if tags.iter().any(|&t| t != first) {
        return false;
    }
    classify_maneuver(traj, th).lateral == first
}

/// Per-candidate reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_driving: f64,
    pub r_negative: f64,
    pub r_recovery: f64,
    pub r_cot: f64,
    pub alignment_violated: bool,
    pub w_n: f64,
    pub w_r: f64,
    pub lambda_c: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// The combined reward recomputed from the stored components.
    pub fn recompute(&self) -> f64 {
        self.r_driving - self.w_n * self.r_negative + self.w_r * self.r_recovery - self.lambda_c * self.r_cot
    }
}

/// A decoded candidate: its reasoning and trajectory (`None` if decoding
/// failed).
#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub tags: &'a [Lateral],
    pub traj: Option<&'a Trajectory<f64>>,
}

/// Everything the combined reward depends on besides the candidate.
#[derive(Debug, Clone, Copy)]
pub struct RewardContext<'a> {
    pub shaping: &'a ShapingConfig,
    pub metrics: &'a MetricConfig,
    pub thresholds: &'a ManeuverThresholds,
    pub mode: BenchmarkMode,
}

/// Driving score plus label-routed shaping terms. The scenario's reference is
/// the negative or recovery demonstration on those labels.
pub fn total_reward(scenario: &Scenario, cand: &Candidate, ctx: &RewardContext) -> (RewardBreakdown, ScoreReport) {
    let sh = ctx.shaping;
    let report = match cand.traj {
        Some(t) => score(t, scenario, None, ctx.metrics),
        None => ScoreReport::invalid(),
    };
    let r_driving = report.driving(ctx.mode);
    let matched = cand.traj.filter(|_| report.valid).map(|t| reference_match(t, &scenario.reference, sh.delta));
    let (w_n, r_negative) = match scenario.label {
        // an undecodable plan is treated as sitting on the bad demonstration
        Label::Negative => (sh.lambda_n, matched.unwrap_or(1.0)),
        _ => (0.0, 0.0),
    };
    let (w_r, r_recovery) = match scenario.label {
        Label::Recovery => (sh.lambda_r, matched.unwrap_or(0.0)),
        _ => (0.0, 0.0),
    };
    let aligned = cand.traj.map_or(true, |t| alignment_check(cand.tags, t, ctx.thresholds));
    let r_cot = if aligned { cot_penalty(cand.tags.len() as f64, sh.l_tol, sh.gamma) } else { sh.kappa_align };
    let mut b = RewardBreakdown {
        r_driving,
        r_negative,
        r_recovery,
        r_cot,
        alignment_violated: !aligned,
        w_n,
        w_r,
        lambda_c: sh.lambda_c,
        total: 0.0,
    };
    b.total = b.recompute();
    (b, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::geometry::Pose;

    fn line(y: f64, n: usize) -> Trajectory<f64> {
        Trajectory::new((0..n).map(|i| Pose::new(i as f64, y, 0.0)).collect(), 0.5, 0).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(avg_distance(&line(0.0, 5), &line(0.0, 5)), 0.0);
        assert!((avg_distance(&line(1.0, 5), &line(0.0, 5)) - 1.0).abs() < 1e-15);
        let a = Trajectory::new(vec![Pose::new(0.0, 0.0, 0.0), Pose::new(1.0, 1.0, 0.0), Pose::new(2.0, 2.0, 0.0)], 0.5, 0)
            .unwrap();
        let b = line(0.0, 3);
        assert!((avg_distance(&a, &b) - 1.0).abs() < 1e-15);
        // common prefix only
        assert_eq!(avg_distance(&line(0.0, 3), &line(0.0, 7)), 0.0);
    }

    #[test]
    fn match_and_penalty_examples() {
        assert_eq!(reference_match_distance(0.0, 2.0), 1.0);
        assert_eq!(reference_match_distance(1.0, 2.0), 0.5);
        assert_eq!(reference_match_distance(3.0, 2.0), 0.0);
        assert_eq!(cot_penalty(4.0, 4.0, 0.5), 0.5);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((cot_penalty(14.0, 4.0, 0.1) - want).abs() < 1e-15);
        assert!(cot_penalty(0.0, 100.0, 1.0) < 1e-40);
    }

    #[test]
    fn alignment_examples() {
        let th = ManeuverThresholds::default();
        let arc: Vec<Pose<f64>> = (0..=10)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / 10.0;
                Pose::new(10.0 * a.sin(), 10.0 * (1.0 - a.cos()), a)
            })
            .collect();
        let left = Trajectory::new(arc, 0.5, 0).unwrap();
        assert!(alignment_check(&[Lateral::LeftTurn], &left, &th));
        assert!(!alignment_check(&[Lateral::Straight], &left, &th));
        assert!(alignment_check::<f64>(&[], &left, &th));
        assert!(!alignment_check(&[Lateral::LeftTurn, Lateral::Straight], &left, &th));
    }
}
