use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Per-metric driving sub-scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubScores<T = f64> {
    pub nc: T,
    pub dac: T,
    pub ddc: T,
    pub tlc: T,
    pub ep: T,
    pub ttc: T,
    pub lk: T,
    pub hc: T,
    pub ec: T,
    pub c: T,
}

impl<T: Real> SubScores<T> {
    pub fn splat(v: T) -> Self {
        Self { nc: v, dac: v, ddc: v, tlc: v, ep: v, ttc: v, lk: v, hc: v, ec: v, c: v }
    }

    pub fn ones() -> Self {
        Self::splat(T::one())
    }

    pub fn zeros() -> Self {
        Self::splat(T::zero())
    }

    /// Values in the column order NC, DAC, DDC, TLC, EP, TTC, LK, HC, EC, C.
    pub fn to_array(&self) -> [T; 10] {
        [self.nc, self.dac, self.ddc, self.tlc, self.ep, self.ttc, self.lk, self.hc, self.ec, self.c]
    }

    pub fn from_array(a: [T; 10]) -> Self {
        Self { nc: a[0], dac: a[1], ddc: a[2], tlc: a[3], ep: a[4], ttc: a[5], lk: a[6], hc: a[7], ec: a[8], c: a[9] }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| *v >= T::zero() && *v <= T::one())
    }
}

pub const SUBSCORE_NAMES: [&str; 10] = ["NC", "DAC", "DDC", "TLC", "EP", "TTC", "LK", "HC", "EC", "C"];

/// `NC * DAC * (5 TTC + 2 C + 5 EP) / 12`.
pub fn pdms<T: Real>(s: &SubScores<T>) -> T {
    let w = |x: f64| T::lit(x);
    s.nc * s.dac * (w(5.0) * s.ttc + w(2.0) * s.c + w(5.0) * s.ep) / w(12.0)
}

/// Human filter: a metric the human reference also fails is excused.
pub fn filter<T: Real>(agent: T, human: T) -> T {
    if human == T::zero() {
        T::one()
    } else {
        agent
    }
}

pub const EPDMS_WEIGHTS: [(usize, f64); 5] = [(5, 5.0), (4, 5.0), (7, 2.0), (6, 2.0), (8, 2.0)];

/// Gated product over NC, DAC, DDC, TLC times the weighted mean over TTC, EP,
/// HC, LK, EC (weights 5, 5, 2, 2, 2), every term passed through [`filter`].
pub fn epdms<T: Real>(agent: &SubScores<T>, human: &SubScores<T>) -> T {
    let a = agent.to_array();
    let h = human.to_array();
    let gate = (0..4).fold(T::one(), |acc, i| acc * filter(a[i], h[i]));
    let mut num = T::zero();
    let mut den = T::zero();
    for (i, w) in EPDMS_WEIGHTS {
        num = num + T::lit(w) * filter(a[i], h[i]);
        den = den + T::lit(w);
    }
    gate * num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdms_examples() {
        assert_eq!(pdms(&SubScores::<f64>::ones()), 1.0);
        let mut s = SubScores::<f64>::ones();
        s.nc = 0.0;
        assert_eq!(pdms(&s), 0.0);
        let mut s = SubScores::<f64>::ones();
        s.ep = 0.5;
        assert!((pdms(&s) - 9.5 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn epdms_examples() {
        let ones = SubScores::<f64>::ones();
        assert_eq!(epdms(&ones, &ones), 1.0);
        let mut a = ones;
        a.dac = 0.0;
        let mut h = ones;
        h.dac = 0.0;
        assert_eq!(epdms(&a, &h), 1.0);
        assert_eq!(epdms(&a, &ones), 0.0);
        let mut a = ones;
        a.ep = 0.8;
        a.ec = 0.5;
        assert!((epdms(&a, &ones) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn f32_instantiation() {
        let mut s = SubScores::<f32>::ones();
        s.ep = 0.5;
        assert!((pdms(&s) - 9.5 / 12.0).abs() < 1e-6);
        assert_eq!(epdms(&s, &SubScores::ones()), 1.0 - 2.5 / 16.0);
    }
}
