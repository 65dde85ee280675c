//! Driving scores: per-metric sub-scores, the PDMS and EPDMS aggregates and the
//! EPDMS human filter. The same scorer serves as evaluation metric and as the
//! driving reward during reinforcement fine-tuning.

mod aggregate;
mod subscores;

pub use aggregate::{epdms, filter, pdms, SubScores, EPDMS_WEIGHTS, SUBSCORE_NAMES};
pub use subscores::{
    ego_box, score, sub_comfort, sub_dac, sub_ddc, sub_ec, sub_ep, sub_ep_route, sub_hc, sub_lk, sub_nc, sub_tlc,
    sub_ttc, BenchmarkMode, MetricConfig, ScoreReport,
};
