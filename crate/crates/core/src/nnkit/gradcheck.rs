//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Grads, NnError, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries sampled per parameter array; `None` checks all of them.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, floor: 1e-6, max_entries: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub worst_rel_error: f64,
    pub worst_entry: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient returned by `f` with central differences for
/// every (or a sample of every) entry of `params`. `f` evaluates the scalar
/// objective and its gradients for the current store values.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&ParamStore) -> Result<(f64, Grads), NnError>,
{
    let (_, grads) = f(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut worst_entry = None;
    let mut checked = 0;
    for &id in params {
        let analytic = grads.param_or_zero(id, store);
        let n = analytic.len();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(k) = cfg.max_entries {
            entries.shuffle(&mut rng);
            entries.truncate(k);
        }
        for e in entries {
            let orig = store.get(id).data[e];
            store.get_mut(id).data[e] = orig + cfg.h;
            let (fp, _) = f(store)?;
            store.get_mut(id).data[e] = orig - cfg.h;
            let (fm, _) = f(store)?;
            store.get_mut(id).data[e] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let err = relative_error(analytic.data[e], numeric, cfg.floor);
            checked += 1;
            if err > worst || !err.is_finite() {
                worst = if err.is_finite() { err } else { f64::INFINITY };
                worst_entry = Some((store.name(id).to_string(), e));
            }
        }
    }
    Ok(GradCheckReport { passed: worst < cfg.tol, worst_rel_error: worst, worst_entry, checked })
}
