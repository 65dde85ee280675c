//! Planar geometry primitives: points, poses, oriented boxes, polygons and
//! polylines.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2<T = f64> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn from_angle(a: T) -> Self {
        Self::new(a.cos(), a.sin())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z component of the 3-D cross product.
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Self) -> T {
        (self - o).norm()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    /// Counter-clockwise rotation by `a` radians.
    pub fn rotate(self, a: T) -> Self {
        let (s, c) = a.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn angle(self) -> T {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl<T: Real> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose<T = f64> {
    pub x: T,
    pub y: T,
    pub heading: T,
}

impl<T: Real> Pose<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }

    /// Express a world point in this pose's frame.
    pub fn to_local(&self, p: Vec2<T>) -> Vec2<T> {
        (p - self.position()).rotate(-self.heading)
    }

    /// Map a point given in this pose's frame to the world.
    pub fn to_world(&self, p: Vec2<T>) -> Vec2<T> {
        p.rotate(self.heading) + self.position()
    }

    /// Compose with a relative motion `(dx, dy, dheading)` expressed in this
    /// pose's frame.
    pub fn compose(&self, dx: T, dy: T, dheading: T) -> Self {
        let p = self.to_world(Vec2::new(dx, dy));
        Self::new(p.x, p.y, wrap_angle(self.heading + dheading))
    }

    /// Relative motion from `self` to `other`, in `self`'s frame.
    pub fn relative(&self, other: &Self) -> (T, T, T) {
        let d = self.to_local(other.position());
        (d.x, d.y, wrap_angle(other.heading - self.heading))
    }
}

/// Oriented rectangle centred on a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox<T = f64> {
    pub center: Pose<T>,
    pub length: T,
    pub width: T,
}

impl<T: Real> OrientedBox<T> {
    pub fn new(center: Pose<T>, length: T, width: T) -> Self {
        Self { center, length, width }
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2<T>; 4] {
        let half = T::lit(0.5);
        let hl = self.length * half;
        let hw = self.width * half;
        [
            self.center.to_world(Vec2::new(hl, hw)),
            self.center.to_world(Vec2::new(-hl, hw)),
            self.center.to_world(Vec2::new(-hl, -hw)),
            self.center.to_world(Vec2::new(hl, -hw)),
        ]
    }

    /// Separating-axis test. Touching edges do not count as overlap.
    pub fn overlaps(&self, other: &Self) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            Vec2::from_angle(self.center.heading),
            Vec2::from_angle(self.center.heading).perp(),
            Vec2::from_angle(other.center.heading),
            Vec2::from_angle(other.center.heading).perp(),
        ];
        for axis in axes {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            if amax <= bmin || bmax <= amin {
                return false;
            }
        }
        true
    }
}

fn project<T: Real>(pts: &[Vec2<T>], axis: Vec2<T>) -> (T, T) {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for p in pts {
        let d = p.dot(axis);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

/// Simple polygon given by its vertices (either winding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon<T = f64> {
    pub vertices: Vec<Vec2<T>>,
}

impl<T: Real> Polygon<T> {
    pub fn new(vertices: Vec<Vec2<T>>) -> Self {
        Self { vertices }
    }

    pub fn rect(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self::new(vec![
            Vec2::new(x0, y0),
            Vec2::new(x1, y0),
            Vec2::new(x1, y1),
            Vec2::new(x0, y1),
        ])
    }

    /// Even-odd containment; points on the boundary count as inside.
    pub fn contains(&self, p: Vec2<T>) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let eps = T::lit(1e-9);
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[j];
            if point_segment_distance(p, a, b) <= eps {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            let (a0, a1) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in (i + 1)..n {
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (b0, b1) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(a0, a1, b0, b1) {
                    return false;
                }
            }
        }
        true
    }
}

pub fn point_segment_distance<T: Real>(p: Vec2<T>, a: Vec2<T>, b: Vec2<T>) -> T {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 <= T::zero() {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clip(T::zero(), T::one());
    p.dist(a + ab * t)
}

/// Closed-segment intersection test.
pub fn segments_intersect<T: Real>(p1: Vec2<T>, p2: Vec2<T>, q1: Vec2<T>, q2: Vec2<T>) -> bool {
    let d1 = (q2 - q1).cross(p1 - q1);
    let d2 = (q2 - q1).cross(p2 - q1);
    let d3 = (p2 - p1).cross(q1 - p1);
    let d4 = (p2 - p1).cross(q2 - p1);
    if ((d1 > T::zero() && d2 < T::zero()) || (d1 < T::zero() && d2 > T::zero()))
        && ((d3 > T::zero() && d4 < T::zero()) || (d3 < T::zero() && d4 > T::zero()))
    {
        return true;
    }
    let on = |a: Vec2<T>, b: Vec2<T>, p: Vec2<T>| {
        p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
    };
    (d1 == T::zero() && on(q1, q2, p1))
        || (d2 == T::zero() && on(q1, q2, p2))
        || (d3 == T::zero() && on(p1, p2, q1))
        || (d4 == T::zero() && on(p1, p2, q2))
}

/// Closest-point query result against a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineProjection<T> {
    /// Arc length from the first vertex to the closest point.
    pub arc_length: T,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: T,
    /// Direction of the closest segment.
    pub direction: T,
    pub distance: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline<T = f64> {
    pub points: Vec<Vec2<T>>,
}

impl<T: Real> Polyline<T> {
    pub fn new(points: Vec<Vec2<T>>) -> Self {
        Self { points }
    }

    pub fn length(&self) -> T {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Closest point on the polyline. Returns `None` for fewer than two
    /// vertices.
    pub fn project(&self, p: Vec2<T>) -> Option<PolylineProjection<T>> {
        if self.points.len() < 2 {
            return None;
        }
        let mut best: Option<PolylineProjection<T>> = None;
        let mut acc = T::zero();
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len = ab.norm();
            if len <= T::zero() {
                continue;
            }
            let t = ((p - a).dot(ab) / (len * len)).clip(T::zero(), T::one());
            let q = a + ab * t;
            let dist = p.dist(q);
            if best.map_or(true, |b| dist < b.distance) {
                let lateral = ab.cross(p - a) / len;
                best = Some(PolylineProjection {
                    arc_length: acc + len * t,
                    lateral,
                    direction: ab.angle(),
                    distance: dist,
                });
            }
            acc = acc + len;
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(x: f64, y: f64, h: f64) -> OrientedBox<f64> {
        OrientedBox::new(Pose::new(x, y, h), 2.0, 2.0)
    }

    #[test]
    fn boxes_overlap_and_separate() {
        assert!(unit_box(0.0, 0.0, 0.0).overlaps(&unit_box(1.0, 0.0, 0.0)));
        assert!(!unit_box(0.0, 0.0, 0.0).overlaps(&unit_box(2.1, 0.0, 0.0)));
        // touching counts as clear
        assert!(!unit_box(0.0, 0.0, 0.0).overlaps(&unit_box(2.0, 0.0, 0.0)));
        // rotated 45 degrees: corner reaches sqrt(2) from centre
        assert!(unit_box(0.0, 0.0, 0.0).overlaps(&unit_box(2.3, 0.0, std::f64::consts::FRAC_PI_4)));
        assert!(!unit_box(0.0, 0.0, 0.0).overlaps(&unit_box(2.5, 0.0, std::f64::consts::FRAC_PI_4)));
    }

    #[test]
    fn polygon_contains() {
        let sq = Polygon::rect(0.0, 0.0, 1.0, 1.0);
        assert!(sq.contains(Vec2::new(0.5, 0.5)));
        assert!(sq.contains(Vec2::new(1.0, 0.5)));
        assert!(!sq.contains(Vec2::new(1.1, 0.5)));
        assert!(sq.is_simple());
        let bowtie = Polygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ]);
        assert!(!bowtie.is_simple());
    }

    #[test]
    fn polyline_projection() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)]);
        assert_eq!(pl.length(), 20.0);
        let pr = pl.project(Vec2::new(4.0, 1.5)).unwrap();
        assert_eq!(pr.arc_length, 4.0);
        assert_eq!(pr.lateral, 1.5);
        let pr = pl.project(Vec2::new(11.0, 5.0)).unwrap();
        assert_eq!(pr.arc_length, 15.0);
        assert_eq!(pr.lateral, -1.0);
    }

    #[test]
    fn pose_compose_relative_roundtrip() {
        let a = Pose::<f64>::new(1.0, 2.0, 0.7);
        let b = a.compose(3.0, -0.5, 0.2);
        let (dx, dy, dh) = a.relative(&b);
        assert!((dx - 3.0).abs() < 1e-12 && (dy + 0.5).abs() < 1e-12 && (dh - 0.2).abs() < 1e-12);
    }

    #[test]
    fn works_at_f32() {
        let a = OrientedBox::new(Pose::new(0.0f32, 0.0, 0.0), 4.6, 1.9);
        let b = OrientedBox::new(Pose::new(4.0f32, 0.5, 0.1), 4.6, 1.9);
        assert!(a.overlaps(&b));
    }
}
