//! Flow-matching path, target field, time sampling and the Euler sampler.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

/// `sigmoid(z + shift)` with `z ~ N(0, 1)`, kept strictly inside (0, 1).
pub fn sample_tau<R: Rng + ?Sized>(rng: &mut R, shift: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let t = 1.0 / (1.0 + (-(z + shift)).exp());
    t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// `tau * a + (1 - tau) * a_his`, elementwise.
pub fn fm_interpolate<T: Real>(a: &[T], a_his: &[T], tau: T) -> Vec<T> {
    debug_assert_eq!(a.len(), a_his.len());
    a.iter().zip(a_his).map(|(&x, &h)| tau * x + (T::one() - tau) * h).collect()
}

/// Derivative of the interpolation path: `a - a_his`.
pub fn target_field<T: Real>(a: &[T], a_his: &[T]) -> Vec<T> {
    a.iter().zip(a_his).map(|(&x, &h)| x - h).collect()
}

/// `steps` forward-Euler steps of `a <- a + dtau * f(a, tau)` from `tau = 0`.
pub fn euler_integrate<T: Real, E>(
    a0: &[T],
    steps: usize,
    mut field: impl FnMut(&[T], T) -> Result<Vec<T>, E>,
) -> Result<Vec<T>, E> {
    let n = <T as Real>::from_usize(steps.max(1));
    let dtau = T::one() / n;
    let mut a = a0.to_vec();
    for k in 0..steps.max(1) {
        let tau = <T as Real>::from_usize(k) / n;
        let v = field(&a, tau)?;
        for (x, d) in a.iter_mut().zip(v) {
            *x = *x + dtau * d;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = [1.25, -3.5, 7.1];
        let h = [0.3, 0.2, -9.9];
        assert_eq!(fm_interpolate(&a, &h, 0.0), h.to_vec());
        assert_eq!(fm_interpolate(&a, &h, 1.0), a.to_vec());
        assert_eq!(fm_interpolate(&[2.0, 2.0], &[0.0, 0.0], 0.5), vec![1.0, 1.0]);
        assert_eq!(fm_interpolate(&[2.0f32], &[0.0], 0.5), vec![1.0f32]);
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let h = [0.5, -1.0];
        let v = [2.0, 3.0];
        for steps in [1, 2, 4, 5, 8] {
            let out: Result<Vec<f64>, ()> = euler_integrate(&h, steps, |_, _| Ok(v.to_vec()));
            let out = out.unwrap();
            assert!((out[0] - 2.5).abs() < 1e-15 && (out[1] - 2.0).abs() < 1e-15, "{steps}: {out:?}");
        }
    }

    #[test]
    fn tau_median_tracks_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d: Vec<f64> = (0..20_000).map(|_| sample_tau(&mut rng, 0.0)).collect();
        d.sort_by(f64::total_cmp);
        assert!((d[10_000] - 0.5).abs() < 0.01);
        assert!(d.iter().all(|&t| t > 0.0 && t < 1.0));
    }
}
