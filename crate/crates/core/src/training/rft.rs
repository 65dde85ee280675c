//! Reinforcement fine-tuning of the token policy over a recipe stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grpo::{grpo_step, GroupLog, GrpoConfig};
use super::shaping::{RewardBreakdown, RewardContext};
use super::TrainError;
use crate::microworld::scene::Scenario;
use crate::nnkit::{Adam, AdamConfig};
use crate::policy::PolicyModel;

/// Sample counts for the warm-up and mixed phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RftRecipe {
    pub warmup: usize,
    pub positive: usize,
    pub negative: usize,
    pub recovery: usize,
    pub seed: u64,
}

impl Default for RftRecipe {
    fn default() -> Self {
        Self { warmup: 100, positive: 150, negative: 25, recovery: 25, seed: 0 }
    }
}

impl RftRecipe {
    pub fn total(&self) -> usize {
        self.warmup + self.positive + self.negative + self.recovery
    }

    /// Same budget with every negative and recovery slot given to positives.
    pub fn positive_only(&self) -> Self {
        Self { positive: self.positive + self.negative + self.recovery, negative: 0, recovery: 0, ..*self }
    }

    /// Same budget with the warm-up replaced by positives in the mix.
    pub fn without_warmup(&self) -> Self {
        Self { warmup: 0, positive: self.positive + self.warmup, ..*self }
    }
}

/// Phase of an RFT step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Mixed,
}

/// An ordered list of dataset indices with the warm-up length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeStream {
    pub indices: Vec<usize>,
    pub warmup: usize,
    /// Labels drawn with replacement because the pool was too small.
    pub with_replacement: Vec<String>,
}

impl RecipeStream {
    pub fn phase(&self, i: usize) -> Phase {
        if i < self.warmup {
            Phase::Warmup
        } else {
            Phase::Mixed
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RftStepLog {
    pub step: usize,
    pub phase: Phase,
    pub group: GroupLog,
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftLogLine {
    pub step: usize,
    pub phase: Phase,
    pub scenario: String,
    pub objective: f64,
    pub grad_norm: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub kl_mean: f64,
    pub r_driving: f64,
    pub r_negative: f64,
    pub r_recovery: f64,
    pub r_cot: f64,
    /// Fraction of candidates whose reasoning contradicts their trajectory.
    pub misaligned: f64,
    pub skipped: Option<String>,
}

impl From<&RftStepLog> for RftLogLine {
    fn from(l: &RftStepLog) -> Self {
        let g = &l.group;
        let n = g.breakdowns.len().max(1) as f64;
        let avg = |f: &dyn Fn(&RewardBreakdown) -> f64| g.breakdowns.iter().map(f).sum::<f64>() / n;
        Self {
            step: l.step,
            phase: l.phase,
            scenario: g.scenario.clone(),
            objective: g.objective,
            grad_norm: g.grad_norm,
            reward_mean: g.mean_reward(),
            reward_std: g.std_reward(),
            kl_mean: g.kl.iter().sum::<f64>() / g.kl.len().max(1) as f64,
            r_driving: avg(&|b| b.r_driving),
            r_negative: avg(&|b| b.r_negative),
            r_recovery: avg(&|b| b.r_recovery),
            r_cot: avg(&|b| b.r_cot),
            misaligned: avg(&|b| if b.alignment_violated { 1.0 } else { 0.0 }),
            skipped: g.skipped.clone(),
        }
    }
}

/// Run GRPO over `stream`, tuning only the token policy. The reference policy
/// is the starting point.
pub fn run_rft(
    model: &mut PolicyModel,
    data: &[Scenario],
    stream: &RecipeStream,
    cfg: &GrpoConfig,
    rctx: &RewardContext,
    seed: u64,
    mut on_step: impl FnMut(&RftStepLog),
) -> Result<Vec<RftStepLog>, TrainError> {
    if stream.indices.is_empty() {
        return Err(TrainError::Recipe("empty recipe stream".into()));
    }
    let reference = model.store.clone();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5246_54);
    let mut logs = Vec::with_capacity(stream.indices.len());
    for (step, &i) in stream.indices.iter().enumerate() {
        let s = data.get(i).ok_or_else(|| TrainError::Recipe(format!("stream index {i} outside dataset")))?;
        let group = grpo_step(model, &reference, &mut adam, s, cfg, rctx, &mut rng)?;
        let log = RftStepLog { step, phase: stream.phase(step), group };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}
