//! Wall-clock comparison of token decoding and flow sampling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::microworld::generate_scenario;
use crate::microworld::scene::{Archetype, Label};
use crate::policy::codebook::{fit_codebook, synthetic_motions};
use crate::policy::{PolicyConfig, PolicyModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub waypoints: usize,
    /// Median seconds to decode the action tokens after the context pass.
    pub ar_seconds: f64,
    /// Median seconds for flow sampling from the same cache.
    pub flow_seconds: f64,
    pub repeats: usize,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time models that differ only in the horizon. Rounds visit every model in
/// turn so slow spells of the machine hit all of them alike; the first round
/// is an untimed warm-up.
pub fn time_models(models: &[PolicyModel], repeats: usize) -> Result<Vec<LatencyRow>, TrainError> {
    let s = generate_scenario(0, Archetype::LaneChange, Label::Positive);
    let repeats = repeats.max(3);
    let mut prepared = Vec::with_capacity(models.len());
    for model in models {
        let ctx = model.context(&s)?;
        prepared.push(model.prefill(&model.store, &ctx)?);
    }
    let mut ar = vec![Vec::with_capacity(repeats); models.len()];
    let mut flow = vec![Vec::with_capacity(repeats); models.len()];
    for round in 0..=repeats {
        for (i, (model, (cache, logits))) in models.iter().zip(&prepared).enumerate() {
            let t = Instant::now();
            let d = model.decode_from(&model.store, cache.clone(), logits.clone(), None, false)?;
            let t_ar = t.elapsed().as_secs_f64();
            std::hint::black_box(d);
            let t = Instant::now();
            let off = model.flow_offsets(&model.store, cache, &s.ego_history, model.cfg.flow_steps)?;
            let t_flow = t.elapsed().as_secs_f64();
            std::hint::black_box(off);
            if round > 0 {
                ar[i].push(t_ar);
                flow[i].push(t_flow);
            }
        }
    }
    Ok(models
        .iter()
        .zip(ar.into_iter().zip(flow))
        .map(|(m, (a, f))| LatencyRow { waypoints: m.cfg.future_steps, ar_seconds: median(a), flow_seconds: median(f), repeats })
        .collect())
}

/// Latency of untrained models sharing `base` except for the horizon. Timing
/// does not depend on the weights.
pub fn bench_latency(base: &PolicyConfig, waypoint_counts: &[usize], repeats: usize) -> Result<Vec<LatencyRow>, TrainError> {
    let motions = synthetic_motions(200, 10, base.dt, base.seed);
    let codebook = fit_codebook(&motions, base.codebook_size, base.seed)?;
    let models = waypoint_counts
        .iter()
        .map(|&w| PolicyModel::new(PolicyConfig { future_steps: w, ..base.clone() }, codebook.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    time_models(&models, repeats)
}
