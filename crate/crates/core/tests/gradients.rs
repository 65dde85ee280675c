//! Analytic gradients of the policy's learned maps and of the nnkit layers
//! against central differences.

use flowdrive::nnkit::layers::{Attention, GatedMlp, LayerNorm, Linear};
use flowdrive::nnkit::{grad_check, GradCheckConfig, Init, ParamStore, Tape, Tensor};
use flowdrive::training::{check_learned_maps, gradcheck_config, LEARNED_MAPS};

#[test]
fn every_learned_map_matches_finite_differences_over_64_draws() {
    let checks = check_learned_maps(&gradcheck_config(), 64, 3, 1e-5).unwrap();
    assert_eq!(checks.len(), LEARNED_MAPS.len());
    for c in &checks {
        assert_eq!(c.draws, 64);
        assert!(c.checked >= 64, "{}: only {} entries", c.map, c.checked);
        assert!(c.worst_rel_error < 1e-4, "{}: {} at {:?}", c.map, c.worst_rel_error, c.worst_entry);
    }
}

/// A small transformer block (self- and cross-attention, norm, gated MLP) on
/// random inputs; each draw reinitializes the store.
#[test]
fn transformer_block_matches_finite_differences_over_64_draws() {
    for draw in 0..64u64 {
        let mut store = ParamStore::new(draw);
        let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
        let attn = Attention::new(&mut store, "self", 6, 6, 2).unwrap();
        let cross = Attention::new(&mut store, "cross", 6, 4, 3).unwrap();
        let mlp = GatedMlp::new(&mut store, "mlp", 6, 10).unwrap();
        let out = Linear::new(&mut store, "out", 6, 1, true).unwrap();
        let x_id = store.add("x", 3, 6, Init::Uniform(1.5)).unwrap();
        let src_id = store.add("src", 5, 4, Init::Uniform(1.5)).unwrap();
        let params: Vec<_> = store.ids().collect();
        let f = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let x = t.param(x_id);
            let src = t.param(src_id);
            let h = ln.forward(&mut t, x)?;
            let a = attn.forward(&mut t, h, h, None)?;
            let h = t.add(x, a)?;
            let c = cross.forward(&mut t, h, src, None)?;
            let h = t.add(h, c)?;
            let m = mlp.forward(&mut t, h)?;
            let h = t.add(h, m)?;
            let y = out.forward(&mut t, h)?;
            let y = t.tanh(y)?;
            let loss = t.sum(y)?;
            let v = t.value(loss).item();
            Ok((v, t.backward(loss)?))
        };
        let cfg = GradCheckConfig { max_entries: Some(4), seed: draw, ..GradCheckConfig::default() };
        let r = grad_check(&mut store, &params, &cfg, f).unwrap();
        assert!(r.passed, "draw {draw}: {} at {:?}", r.worst_rel_error, r.worst_entry);
    }
}

#[test]
fn masked_attention_gradients_match() {
    let mut store = ParamStore::new(9);
    let attn = Attention::new(&mut store, "a", 4, 4, 2).unwrap();
    let x_id = store.add("x", 4, 4, Init::Uniform(1.5)).unwrap();
    let params: Vec<_> = store.ids().collect();
    let mut mask = Tensor::zeros(4, 4);
    for r in 0..4 {
        for c in r + 1..4 {
            mask.set(r, c, f64::NEG_INFINITY);
        }
    }
    let f = |s: &ParamStore| {
        let mut t = Tape::new(s);
        let x = t.param(x_id);
        let y = attn.forward(&mut t, x, x, Some(&mask))?;
        let sq = t.mul(y, y)?;
        let loss = t.sum(sq)?;
        let v = t.value(loss).item();
        Ok((v, t.backward(loss)?))
    };
    let r = grad_check(&mut store, &params, &GradCheckConfig::default(), f).unwrap();
    assert!(r.passed, "{} at {:?}", r.worst_rel_error, r.worst_entry);
}
