//! Motion-primitive codebook over 0.5 s segments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::microworld::geometry::Pose;
use crate::microworld::trajectory::{rollout_kinematic, EgoState, Trajectory};
use crate::microworld::Vec2;

/// One segment's displacement in the frame of its start pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub dx: f64,
    pub dy: f64,
    pub dh: f64,
}

impl Motion {
    pub const ZERO: Motion = Motion { dx: 0.0, dy: 0.0, dh: 0.0 };

    fn dist2(&self, o: &Motion, w: f64) -> f64 {
        let (a, b, c) = (self.dx - o.dx, self.dy - o.dy, w * (self.dh - o.dh));
        a * a + b * b + c * c
    }

    fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.dh == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCodebook {
    /// Centroid 0 is the exact zero motion.
    pub centroids: Vec<Motion>,
    pub seed: u64,
    /// Metres per radian in the clustering distance.
    pub heading_weight: f64,
}

pub const HEADING_WEIGHT: f64 = 2.0;

/// Consecutive relative motions of a trajectory.
pub fn segment_motions(traj: &Trajectory<f64>) -> Vec<Motion> {
    traj.waypoints
        .windows(2)
        .map(|w| {
            let (dx, dy, dh) = w[0].relative(&w[1]);
            Motion { dx, dy, dh }
        })
        .collect()
}

/// Random unicycle rollouts covering speeds and turn rates the planner may emit.
pub fn synthetic_motions(n_rollouts: usize, steps: usize, dt: f64, seed: u64) -> Vec<Motion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_rollouts * steps);
    for _ in 0..n_rollouts {
        let v = rng.gen_range(0.0..14.0);
        let start = EgoState::new(Vec2::new(0.0, 0.0), 0.0, v, 0.0);
        let mut a = rng.gen_range(-4.0..2.0);
        let mut w = rng.gen_range(-0.3..0.3);
        let controls: Vec<(f64, f64)> = (0..steps)
            .map(|_| {
                a = (a + rng.gen_range(-1.0..1.0f64)).clamp(-6.0, 3.0);
                w = (w + rng.gen_range(-0.15..0.15f64)).clamp(-0.5, 0.5);
                (a, w)
            })
            .collect();
        if let Ok(t) = rollout_kinematic(&start, &controls, dt) {
            let mut wps = vec![start.pose()];
            wps.extend(t.waypoints);
            out.extend(segment_motions(&Trajectory { waypoints: wps, dt, t0: 0 }));
        }
    }
    out
}

/// k-means with the zero motion pinned as centroid 0.
pub fn fit_codebook(motions: &[Motion], k: usize, seed: u64) -> Result<ActionCodebook, PolicyError> {
    if k < 2 {
        return Err(PolicyError::Codebook(format!("K = {k} < 2")));
    }
    let mut distinct: Vec<Motion> = motions.iter().copied().filter(|m| !m.is_zero()).collect();
    if distinct.iter().any(|m| !(m.dx.is_finite() && m.dy.is_finite() && m.dh.is_finite())) {
        return Err(PolicyError::Codebook("non-finite motion".into()));
    }
    distinct.sort_by(|a, b| (a.dx, a.dy, a.dh).partial_cmp(&(b.dx, b.dy, b.dh)).unwrap());
    distinct.dedup();
    if distinct.len() + 1 < k {
        return Err(PolicyError::Codebook(format!("K = {k} exceeds {} distinct motions", distinct.len() + 1)));
    }
    let w = HEADING_WEIGHT;
    let pts = &distinct;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut cents = vec![Motion::ZERO];
    let mut d2: Vec<f64> = pts.iter().map(|p| p.dist2(&Motion::ZERO, w)).collect();
    while cents.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..pts.len())
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut idx = pts.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        let c = pts[pick];
        cents.push(c);
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(p.dist2(&c, w));
        }
    }
    let mut assign = vec![0usize; pts.len()];
    for _ in 0..40 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let a = nearest_index(&cents, p, w);
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0.0, 0usize); k];
        for (p, &a) in pts.iter().zip(&assign) {
            let s = &mut sums[a];
            s.0 += p.dx;
            s.1 += p.dy;
            s.2 += p.dh;
            s.3 += 1;
        }
        for c in 1..k {
            let s = sums[c];
            if s.3 > 0 {
                let n = s.3 as f64;
                cents[c] = Motion { dx: s.0 / n, dy: s.1 / n, dh: s.2 / n };
            } else {
                // re-seed an empty cluster at the worst-served point
                let far = pts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.dist2(&cents[assign[a.0]], w).total_cmp(&b.1.dist2(&cents[assign[b.0]], w)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                cents[c] = pts[far];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(ActionCodebook { centroids: cents, seed, heading_weight: w })
}

fn nearest_index(cents: &[Motion], p: &Motion, w: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in cents.iter().enumerate() {
        let d = p.dist2(c, w);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

impl ActionCodebook {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn nearest(&self, m: &Motion) -> usize {
        nearest_index(&self.centroids, m, self.heading_weight)
    }

    /// Closed-loop tokenisation: each segment is matched relative to the pose
    /// reconstructed from the tokens chosen so far.
    pub fn tokenize(&self, traj: &Trajectory<f64>) -> Vec<usize> {
        let mut pose = *traj.first();
        traj.waypoints[1..]
            .iter()
            .map(|target| {
                let (dx, dy, dh) = pose.relative(target);
                let t = self.nearest(&Motion { dx, dy, dh });
                let c = self.centroids[t];
                pose = pose.compose(c.dx, c.dy, c.dh);
                t
            })
            .collect()
    }

    /// Chain centroids forward from `start`.
    pub fn detokenize(&self, tokens: &[usize], start: Pose<f64>, dt: f64, t0: i64) -> Result<Trajectory<f64>, PolicyError> {
        let mut pose = start;
        let mut waypoints = vec![start];
        for &t in tokens {
            let c = self
                .centroids
                .get(t)
                .ok_or_else(|| PolicyError::Codebook(format!("token {t} outside codebook of {}", self.len())))?;
            pose = pose.compose(c.dx, c.dy, c.dh);
            waypoints.push(pose);
        }
        Ok(Trajectory { waypoints, dt, t0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book() -> ActionCodebook {
        fit_codebook(&synthetic_motions(200, 10, 0.5, 1), 64, 3).unwrap()
    }

    #[test]
    fn zero_primitive_and_stationary_roundtrip() {
        let cb = book();
        assert_eq!(cb.centroids[0], Motion::ZERO);
        let start = Pose::new(3.0, -1.0, 0.4);
        let still = Trajectory { waypoints: vec![start; 6], dt: 0.5, t0: 0 };
        let toks = cb.tokenize(&still);
        assert_eq!(toks, vec![0; 5]);
        assert_eq!(cb.detokenize(&toks, start, 0.5, 0).unwrap(), still);
    }

    #[test]
    fn detokenize_is_a_fixed_point() {
        let cb = book();
        let toks = vec![5, 9, 9, 30, 2, 63];
        let start = Pose::new(1.0, 2.0, -0.3);
        let t1 = cb.detokenize(&toks, start, 0.5, 0).unwrap();
        let t2 = cb.detokenize(&cb.tokenize(&t1), start, 0.5, 0).unwrap();
        assert_eq!(cb.tokenize(&t1), toks);
        assert!(t1.waypoints.iter().zip(&t2.waypoints).all(|(a, b)| a.position().dist(b.position()) < 1e-9));
    }

    #[test]
    fn too_few_motions_rejected() {
        let m = vec![Motion { dx: 1.0, dy: 0.0, dh: 0.0 }; 10];
        assert!(fit_codebook(&m, 3, 0).is_err());
        assert!(fit_codebook(&m, 2, 0).is_ok());
    }

    #[test]
    fn fitting_is_seeded() {
        let m = synthetic_motions(50, 10, 0.5, 9);
        assert_eq!(fit_codebook(&m, 16, 4).unwrap(), fit_codebook(&m, 16, 4).unwrap());
    }
}
