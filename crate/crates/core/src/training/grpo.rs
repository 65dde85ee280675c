//! Group-relative policy optimization over the token head.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::shaping::{total_reward, Candidate, RewardBreakdown, RewardContext};
use super::TrainError;
use crate::microworld::scene::Scenario;
use crate::microworld::trajectory::{Lateral, Trajectory};
use crate::nnkit::{Adam, ParamStore, Tape, Tensor};
use crate::policy::PolicyModel;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { group_size: 8, clip_eps: 0.2, beta: 0.01, lr: 2e-4, max_grad_norm: 1.0 }
    }
}

/// `(r_i - mean) / std` with the population std; all zeros when the group is
/// degenerate.
pub fn group_advantage<T: Real>(rewards: &[T]) -> Vec<T> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = <T as Real>::from_usize(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if !(std >= T::lit(1e-8)) {
        return vec![T::zero(); rewards.len()];
    }
    rewards.iter().map(|&r| (r - mean) / std).collect()
}

/// `rho - ln(rho) - 1` with `rho = pi_ref / pi_theta`.
pub fn kl_term<T: Real>(logp_ref: T, logp: T) -> T {
    let x = logp_ref - logp;
    (x.exp() - x - T::one()).max(T::zero())
}

/// Clipped surrogate `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)` and its
/// derivative with respect to `log rho`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// One decoded group member.
#[derive(Debug, Clone)]
pub struct GroupMember {
    pub tokens: Vec<usize>,
    pub tags: Vec<Lateral>,
    pub traj: Option<Trajectory<f64>>,
    pub logp_old: f64,
}

/// Per-step record of a group update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLog {
    pub scenario: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
    pub kl: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub objective: f64,
    pub grad_norm: f64,
    pub skipped: Option<String>,
}

impl GroupLog {
    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }

    pub fn std_reward(&self) -> f64 {
        let m = self.mean_reward();
        mean(&self.rewards.iter().map(|r| (r - m) * (r - m)).collect::<Vec<_>>()).sqrt()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample `g` candidates at temperature 1 and decode their trajectories.
pub fn sample_group(
    model: &PolicyModel,
    scenario: &Scenario,
    g: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<GroupMember>, TrainError> {
    let ctx = model.context(scenario)?;
    let frame = scenario.current_pose();
    let (cache, logits) = model.prefill(&model.store, &ctx)?;
    let mut out = Vec::with_capacity(g);
    for _ in 0..g {
        let d = model.decode_from(&model.store, cache.clone(), logits.clone(), Some(&mut *rng), false)?;
        let (tags, _) = model.vocab.split(&d.tokens);
        let traj = if d.finished { model.detokenize(&frame, &d.tokens).ok() } else { None };
        out.push(GroupMember { tokens: d.tokens, tags, traj, logp_old: d.logprob });
    }
    Ok(out)
}

/// One GRPO update on `scenario`: sample a group, score it, and ascend the
/// clipped surrogate minus the KL penalty to `reference`. Only the token
/// policy parameters move.
pub fn grpo_step(
    model: &mut PolicyModel,
    reference: &ParamStore,
    adam: &mut Adam,
    scenario: &Scenario,
    cfg: &GrpoConfig,
    rctx: &RewardContext,
    rng: &mut dyn RngCore,
) -> Result<GroupLog, TrainError> {
    if cfg.group_size < 2 {
        return Err(TrainError::Config("group_size must be at least 2".into()));
    }
    let members = sample_group(model, scenario, cfg.group_size, rng)?;
    let mut breakdowns = Vec::with_capacity(members.len());
    for m in &members {
        let (b, _) = total_reward(scenario, &Candidate { tags: &m.tags, traj: m.traj.as_ref() }, rctx);
        breakdowns.push(b);
    }
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let advantages = group_advantage(&rewards);
    let mut log = GroupLog {
        scenario: scenario.id.clone(),
        rewards,
        advantages,
        ratios: Vec::new(),
        kl: Vec::new(),
        breakdowns,
        objective: 0.0,
        grad_norm: 0.0,
        skipped: None,
    };
    if members.iter().all(|m| m.traj.is_none()) {
        log.skipped = Some("all candidates invalid".into());
        return Ok(log);
    }

    let ctx = model.context(scenario)?;
    let seqs: Vec<&[usize]> = members.iter().map(|m| m.tokens.as_slice()).collect();
    let logp_ref = model.sequence_logprobs(reference, &ctx, &seqs)?;
    let params = model.token_policy_params();
    let g = members.len() as f64;

    let grads = {
        let mut tape = Tape::new(&model.store);
        let scores = model.score_sequences(&mut tape, &ctx, &seqs)?;
        let nll = tape.value(scores.nll).clone();
        let mut weights = Tensor::zeros(nll.rows, 1);
        for (i, &(off, len)) in scores.spans.iter().enumerate() {
            let lp = -nll.data[off..off + len].iter().sum::<f64>();
            let ratio = (lp - members[i].logp_old).exp();
            if (ratio - 1.0).abs() > 1e-6 {
                return Err(TrainError::Invariant(format!("single-update ratio {ratio} differs from 1")));
            }
            let (surr, d_surr) = clipped_surrogate(ratio, log.advantages[i], cfg.clip_eps);
            let kl = kl_term(logp_ref[i], lp);
            // d kl / d lp = 1 - rho
            let d_kl = 1.0 - (logp_ref[i] - lp).exp();
            let coeff = d_surr - cfg.beta * d_kl;
            log.objective += (surr - cfg.beta * kl) / g;
            log.ratios.push(ratio);
            log.kl.push(kl);
            // loss = -(1/G) sum_i coeff_i * lp_i and lp_i = -sum(nll rows)
            for r in off..off + len {
                weights.data[r] = coeff / g;
            }
        }
        if weights.data.iter().all(|&w| w == 0.0) {
            log.skipped = Some("zero objective gradient".into());
            return Ok(log);
        }
        let loss = tape.weighted_sum(scores.nll, &weights)?;
        tape.backward(loss)?
    };
    let mut grads = grads;
    log.grad_norm = grads.clip(&params, cfg.max_grad_norm);
    if !grads.all_finite() {
        return Err(TrainError::Diverged { stage: "rft".into(), step: adam.step as usize, last_good: None });
    }
    adam.config.lr = cfg.lr;
    adam.step(&mut model.store, &grads, &params);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[0.3, 0.3, 0.3]), vec![0.0; 3]);
        let a = group_advantage(&[0.2, 0.4, 0.6]);
        let s = (2.0f64 / 3.0).sqrt() * 0.2;
        for (x, want) in a.iter().zip([-0.2 / s, 0.0, 0.2 / s]) {
            assert!((x - want).abs() < 1e-10);
        }
        assert!((a[2] - 1.224_744_871_391_589).abs() < 1e-10);
        assert_eq!(group_advantage(&[1.0, -1.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_term(-1.3, -1.3), 0.0);
        let v = kl_term(2.0f64.ln(), 0.0);
        assert!((v - (1.0 - 2.0f64.ln())).abs() < 1e-12);
        assert!((v - 0.30685).abs() < 1e-5);
    }

    #[test]
    fn clipping_blocks_gradient_outside_trust_region() {
        assert_eq!(clipped_surrogate(1.0, 2.0, 0.2), (2.0, 2.0));
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (1.2, 0.0));
        let (v, d) = clipped_surrogate(0.5, -1.0, 0.2);
        assert!((v + 0.8).abs() < 1e-15 && d == 0.0);
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), (0.5, 0.5));
    }
}
