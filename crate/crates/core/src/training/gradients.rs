//! Finite-difference checks of every learned map of the policy: encoder and
//! token head through the language loss, bridge and history embedding through
//! the flow-matching loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::microworld::generate_scenario;
use crate::microworld::scene::{Archetype, Label};
use crate::nnkit::{grad_check, GradCheckConfig, NnError, ParamId, ParamStore, Tape};
use crate::policy::codebook::{fit_codebook, synthetic_motions};
use crate::policy::{LayerSelection, PolicyConfig, PolicyModel};

pub const LEARNED_MAPS: [&str; 4] = ["encoder", "head", "bridge", "history"];

/// Worst relative error of one map over all parameter draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCheck {
    pub map: String,
    pub draws: usize,
    pub checked: usize,
    pub worst_rel_error: f64,
    pub worst_entry: Option<(String, usize)>,
}

/// Small enough that a draw costs milliseconds, deep enough to exercise the
/// sparse bridge (two encoder layers, interval 1).
pub fn gradcheck_config() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        n_layers: 2,
        heads: 2,
        mlp_hidden: 12,
        d_bridge: 4,
        bridge_mlp_hidden: 6,
        query_slots: 2,
        layers: LayerSelection::Interval(1),
        history_hidden: 6,
        codebook_size: 8,
        ..PolicyConfig::default()
    }
}

/// Check each learned map on `draws` parameter initializations, sampling
/// `entries` coordinates per parameter array.
pub fn check_learned_maps(cfg: &PolicyConfig, draws: usize, entries: usize, h: f64) -> Result<Vec<MapCheck>, TrainError> {
    let codebook = fit_codebook(&synthetic_motions(60, 10, cfg.dt, 0), cfg.codebook_size, 0)?;
    let mut out: Vec<MapCheck> = LEARNED_MAPS
        .iter()
        .map(|m| MapCheck { map: m.to_string(), draws, checked: 0, worst_rel_error: 0.0, worst_entry: None })
        .collect();
    for d in 0..draws {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(d as u64);
        let model = PolicyModel::new(c, codebook.clone())?;
        let s = generate_scenario(d as u64, Archetype::ALL[d % Archetype::ALL.len()], Label::Positive);
        let ctx = model.context(&s)?;
        let seq = model.target_tokens(&s)?;
        let reason = model.vocab.validate(&seq)?;
        let cache = model.prefix_cache(&model.store, &ctx, &seq[..=reason])?;
        let target = model.offsets_of(&s.current_pose(), &s.reference);
        let tau = 0.1 + 0.8 * ((d * 7919) % 97) as f64 / 97.0;
        let gc = GradCheckConfig { h, max_entries: Some(entries), seed: d as u64, ..GradCheckConfig::default() };
        let groups: [Vec<ParamId>; 4] =
            [model.encoder_params(), model.head_params(), model.bridge_params(), model.history_params()];
        for (k, params) in groups.iter().enumerate() {
            let m = &model;
            // objectives are divided by their value at the draw so the error
            // floor is relative to the loss scale
            let lm = |store: &ParamStore, scale: f64| -> Result<(f64, crate::nnkit::Grads), NnError> {
                let mut tape = Tape::new(store);
                let (logits, _) = m.forward_sequences(&mut tape, &ctx, &[&seq]).map_err(policy_nn)?;
                let nll = tape.nll_rows(logits, &seq)?;
                let loss = tape.mean(nll)?;
                let loss = tape.scale(loss, scale)?;
                let v = tape.value(loss).item();
                Ok((v, tape.backward(loss)?))
            };
            let fm = |store: &ParamStore, scale: f64| -> Result<(f64, crate::nnkit::Grads), NnError> {
                let mut tape = Tape::new(store);
                let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
                let loss = m
                    .fm_sample_loss(&mut tape, &cache, &s.ego_history, &target, tau, &mut rng, m.cfg.noise_std)
                    .map_err(policy_nn)?;
                let loss = tape.scale(loss, scale)?;
                let v = tape.value(loss).item();
                Ok((v, tape.backward(loss)?))
            };
            let mut store = model.store.clone();
            let r = if k < 2 {
                let scale = 1.0 / lm(&store, 1.0)?.0.abs().max(1e-12);
                grad_check(&mut store, params, &gc, |st| lm(st, scale))?
            } else {
                let scale = 1.0 / fm(&store, 1.0)?.0.abs().max(1e-12);
                grad_check(&mut store, params, &gc, |st| fm(st, scale))?
            };
            let o = &mut out[k];
            o.checked += r.checked;
            if r.worst_rel_error > o.worst_rel_error || !r.worst_rel_error.is_finite() {
                o.worst_rel_error = r.worst_rel_error;
                o.worst_entry = r.worst_entry;
            }
        }
    }
    Ok(out)
}

fn policy_nn(e: crate::policy::PolicyError) -> NnError {
    match e {
        crate::policy::PolicyError::Nn(n) => n,
        other => NnError::Data(other.to_string()),
    }
}
