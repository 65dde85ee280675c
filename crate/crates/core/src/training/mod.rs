//! Supervised training (language loss, then flow matching with the encoder
//! frozen), reward shaping and GRPO fine-tuning of the token policy, plan
//! evaluation and the latency harness.

pub mod bench;
pub mod eval;
pub mod gradients;
pub mod grpo;
pub mod rft;
pub mod sft;
pub mod shaping;

pub use bench::{bench_latency, LatencyRow};
pub use eval::{ade, evaluate, mean_of, plan, score_row, EvalRow, Plan, Planner};
pub use gradients::{check_learned_maps, gradcheck_config, MapCheck, LEARNED_MAPS};
pub use grpo::{clipped_surrogate, group_advantage, grpo_step, kl_term, GroupLog, GrpoConfig};
pub use rft::{run_rft, Phase, RecipeStream, RftLogLine, RftRecipe, RftStepLog};
pub use sft::{fm_loss, fm_samples, lm_loss, train_fm, train_lm, train_sft, CurvePoint, SftConfig, SftReport};
pub use shaping::{
    alignment_check, avg_distance, cot_penalty, reference_match, reference_match_distance, total_reward, Candidate,
    RewardBreakdown, RewardContext, ShapingConfig,
};

use thiserror::Error;

use crate::nnkit::{NnError, ParamStore};
use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    EmptyData(String),
    #[error("recipe: {0}")]
    Recipe(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{stage} training diverged at step {step}")]
    Diverged { stage: String, step: usize, last_good: Option<Box<ParamStore>> },
}
