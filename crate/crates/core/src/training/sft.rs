//! Supervised stages: language loss on the encoder and token head, then
//! flow matching on the action expert with the encoder frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::microworld::scene::{Label, Scenario};
use crate::nnkit::{Adam, AdamConfig, Grads, ParamStore, Tape};
use crate::policy::vocab::sequence_nll;
use crate::policy::{sample_tau, LayerKvCache, PolicyModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lm_steps: usize,
    pub lm_lr: f64,
    pub fm_steps: usize,
    pub fm_lr: f64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    /// Samples in the fixed batch used to report the flow loss.
    pub fm_eval_samples: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lm_steps: 600,
            lm_lr: 2e-3,
            fm_steps: 2000,
            fm_lr: 1e-3,
            batch_size: 8,
            max_grad_norm: 1.0,
            fm_eval_samples: 64,
            log_every: 50,
            seed: 0,
        }
    }
}

/// One point of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub aux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// `(step, L_LM, L_Action)` on the training batches.
    pub lm_curve: Vec<CurvePoint>,
    /// `(step, fixed-batch flow loss, training-batch flow loss)` in m^2.
    pub fm_curve: Vec<CurvePoint>,
    pub fm_initial: f64,
    pub fm_final: f64,
}

/// Teacher-forced `(L_LM, L_Action)` of a scenario's target sequence.
pub fn lm_loss(model: &PolicyModel, scenario: &Scenario) -> Result<(f64, f64), TrainError> {
    let ctx = model.context(scenario)?;
    let seq = model.target_tokens(scenario)?;
    let reason = model.vocab.validate(&seq)?;
    let mut tape = Tape::new(&model.store);
    let (logits, _) = model.forward_sequences(&mut tape, &ctx, &[&seq])?;
    Ok(sequence_nll(tape.value(logits), &seq, reason))
}

/// Precomputed inputs of one flow-matching sample.
#[derive(Debug, Clone)]
pub struct FmSample {
    pub cache: LayerKvCache,
    pub target: Vec<f64>,
    pub index: usize,
}

/// Cache over context + reasoning prefix + ACTION_START, and the future
/// offsets of the reference, for each scenario.
pub fn fm_samples(model: &PolicyModel, scenarios: &[Scenario]) -> Result<Vec<FmSample>, TrainError> {
    scenarios
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let ctx = model.context(s)?;
            let seq = model.target_tokens(s)?;
            let reason = model.vocab.validate(&seq)?;
            let cache = model.prefix_cache(&model.store, &ctx, &seq[..=reason])?;
            let target = model.offsets_of(&s.current_pose(), &s.reference);
            Ok(FmSample { cache, target, index })
        })
        .collect()
}

/// Mean flow-matching loss (m^2) over `samples` with `tau` and anchor noise
/// drawn from `rng`, plus gradients when `grads` is requested.
pub fn fm_loss(
    model: &PolicyModel,
    store: &ParamStore,
    scenarios: &[Scenario],
    samples: &[&FmSample],
    rng: &mut dyn rand::RngCore,
    with_grads: bool,
) -> Result<(f64, Option<Grads>), TrainError> {
    let s2 = model.cfg.action_scale * model.cfg.action_scale;
    let n = samples.len().max(1) as f64;
    let mut tape = Tape::new(store);
    let mut terms = Vec::with_capacity(samples.len());
    for smp in samples {
        let tau = sample_tau(&mut *rng, model.cfg.tau_shift);
        let sc = &scenarios[smp.index];
        let l = model.fm_sample_loss(&mut tape, &smp.cache, &sc.ego_history, &smp.target, tau, &mut *rng, model.cfg.noise_std)?;
        terms.push(l);
    }
    let total = tape.concat_rows(&terms)?;
    let total = tape.sum(total)?;
    let loss = tape.scale(total, s2 / n)?;
    let value = tape.value(loss).item();
    let grads = if with_grads { Some(tape.backward(loss)?) } else { None };
    Ok((value, grads))
}

fn positives(data: &[Scenario]) -> Vec<Scenario> {
    data.iter().filter(|s| s.label == Label::Positive).cloned().collect()
}

/// Stage 1: encoder + token head on the language loss over positive
/// scenarios.
pub fn train_lm(model: &mut PolicyModel, data: &[Scenario], cfg: &SftConfig) -> Result<Vec<CurvePoint>, TrainError> {
    let train = positives(data);
    if train.is_empty() {
        return Err(TrainError::EmptyData("no positive scenarios for supervised training".into()));
    }
    let seqs: Vec<Vec<usize>> = train.iter().map(|s| model.target_tokens(s)).collect::<Result<_, _>>()?;
    let reasons: Vec<usize> = seqs.iter().map(|q| model.vocab.validate(q)).collect::<Result<_, _>>()?;
    let ctxs: Vec<_> = train.iter().map(|s| model.context(s)).collect::<Result<_, _>>()?;
    let params = model.token_policy_params();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lm_lr, ..AdamConfig::default() }, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4c4d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::new();
    let mut last_good = model.store.clone();
    for step in 0..cfg.lm_steps {
        let mut grads = Grads::empty(&model.store);
        let (mut lm, mut act) = (0.0, 0.0);
        let b = cfg.batch_size.max(1);
        for _ in 0..b {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let mut tape = Tape::new(&model.store);
            let (logits, _) = model.forward_sequences(&mut tape, &ctxs[i], &[&seqs[i]])?;
            let (l, a) = sequence_nll(tape.value(logits), &seqs[i], reasons[i]);
            lm += l / b as f64;
            act += a / b as f64;
            let nll = tape.nll_rows(logits, &seqs[i])?;
            let loss = tape.mean(nll)?;
            grads.accumulate(&tape.backward(loss)?);
        }
        grads.scale(1.0 / b as f64);
        if !lm.is_finite() || !grads.all_finite() {
            model.store = last_good;
            return Err(TrainError::Diverged { stage: "lm".into(), step, last_good: Some(Box::new(model.store.clone())) });
        }
        grads.clip(&params, cfg.max_grad_norm);
        adam.config.lr = cfg.lm_lr * cosine(step, cfg.lm_steps);
        adam.step(&mut model.store, &grads, &params);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.lm_steps {
            curve.push(CurvePoint { step, loss: lm, aux: act });
            last_good = model.store.clone();
        }
    }
    Ok(curve)
}

/// Stage 2: bridge + history embedding on the flow-matching loss. The caches
/// come from the frozen encoder and are computed once.
pub fn train_fm(model: &mut PolicyModel, data: &[Scenario], cfg: &SftConfig) -> Result<SftReport, TrainError> {
    let train = positives(data);
    if train.is_empty() {
        return Err(TrainError::EmptyData("no positive scenarios for supervised training".into()));
    }
    let samples = fm_samples(model, &train)?;
    let eval: Vec<&FmSample> = samples.iter().take(cfg.fm_eval_samples.max(1)).collect();
    let eval_seed = cfg.seed ^ 0x6576_616c;
    let eval_loss = |m: &PolicyModel| -> Result<f64, TrainError> {
        let mut r = ChaCha8Rng::seed_from_u64(eval_seed);
        Ok(fm_loss(m, &m.store, &train, &eval, &mut r, false)?.0)
    };
    let fm_initial = eval_loss(model)?;
    let params = model.action_expert_params();
    let mut adam = Adam::new(AdamConfig { lr: cfg.fm_lr, ..AdamConfig::default() }, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x464d);
    let mut curve = vec![CurvePoint { step: 0, loss: fm_initial, aux: fm_initial }];
    let mut last_good = model.store.clone();
    for step in 0..cfg.fm_steps {
        let batch: Vec<&FmSample> = (0..cfg.batch_size.max(1)).map(|_| &samples[rng.gen_range(0..samples.len())]).collect();
        let (loss, grads) = fm_loss(model, &model.store, &train, &batch, &mut rng, true)?;
        let mut grads = grads.expect("gradients requested");
        if !loss.is_finite() || !grads.all_finite() {
            model.store = last_good;
            return Err(TrainError::Diverged { stage: "fm".into(), step, last_good: Some(Box::new(model.store.clone())) });
        }
        grads.clip(&params, cfg.max_grad_norm);
        adam.config.lr = cfg.fm_lr * cosine(step, cfg.fm_steps);
        adam.step(&mut model.store, &grads, &params);
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.fm_steps {
            curve.push(CurvePoint { step: step + 1, loss: eval_loss(model)?, aux: loss });
            last_good = model.store.clone();
        }
    }
    let fm_final = curve.last().map_or(fm_initial, |c| c.loss);
    Ok(SftReport { lm_curve: Vec::new(), fm_curve: curve, fm_initial, fm_final })
}

/// Both supervised stages in order.
pub fn train_sft(model: &mut PolicyModel, data: &[Scenario], cfg: &SftConfig) -> Result<SftReport, TrainError> {
    let lm_curve = train_lm(model, data, cfg)?;
    let mut report = train_fm(model, data, cfg)?;
    report.lm_curve = lm_curve;
    Ok(report)
}

/// Cosine decay to 10% of the base rate.
fn cosine(step: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let p = step as f64 / (total - 1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}
