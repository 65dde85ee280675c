//! Planning with a trained model and scoring the plans.

use serde::{Deserialize, Serialize};

use super::shaping::reference_match;
use super::TrainError;
use crate::metrics::{score, MetricConfig, ScoreReport};
use crate::microworld::scene::{Archetype, Label, Scenario};
use crate::microworld::trajectory::{Lateral, Trajectory};
use crate::policy::PolicyModel;

/// How a plan is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    /// Greedy reasoning, then flow sampling from the history anchors.
    Flow,
    /// Greedy decoding of reasoning and action tokens.
    #[default]
    Token,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub tags: Vec<Lateral>,
    pub traj: Option<Trajectory<f64>>,
}

/// Plan for one scenario. Decoding failures yield `traj = None`.
pub fn plan(model: &PolicyModel, scenario: &Scenario, planner: Planner) -> Result<Plan, TrainError> {
    let ctx = model.context(scenario)?;
    let frame = scenario.current_pose();
    match planner {
        Planner::Token => {
            let d = model.decode(&model.store, &ctx, None, false)?;
            let (tags, _) = model.vocab.split(&d.tokens);
            let traj = if d.finished { model.detokenize(&frame, &d.tokens).ok() } else { None };
            Ok(Plan { tags, traj })
        }
        Planner::Flow => {
            let d = model.decode(&model.store, &ctx, None, true)?;
            let (tags, _) = model.vocab.split(&d.tokens);
            let traj = match model.flow_offsets(&model.store, &d.cache, &scenario.ego_history, model.cfg.flow_steps) {
                Ok(off) => Some(model.trajectory_from_offsets(&frame, &off)),
                Err(crate::policy::PolicyError::NonFinite(_)) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(Plan { tags, traj })
        }
    }
}

/// Mean distance over the future waypoints (the shared current pose excluded).
pub fn ade(traj: &Trajectory<f64>, reference: &Trajectory<f64>) -> f64 {
    let n = traj.len().min(reference.len());
    if n < 2 {
        return 0.0;
    }
    let s: f64 = (1..n).map(|k| (traj.waypoints[k].position() - reference.waypoints[k].position()).norm()).sum();
    s / (n - 1) as f64
}

/// One evaluated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub archetype: Archetype,
    pub label: Label,
    pub report: ScoreReport,
    /// ADE to the scenario reference (m); `None` for invalid plans.
    pub ade: Option<f64>,
    /// Reference matching against the scenario reference.
    pub reference_match: f64,
}

pub fn evaluate(
    model: &PolicyModel,
    scenarios: &[Scenario],
    planner: Planner,
    metrics: &MetricConfig,
    delta: f64,
) -> Result<Vec<EvalRow>, TrainError> {
    scenarios.iter().map(|s| Ok(score_row(s, plan(model, s, planner)?.traj.as_ref(), metrics, delta))).collect()
}

/// Score a plan (or its absence) against a scenario.
pub fn score_row(s: &Scenario, traj: Option<&Trajectory<f64>>, metrics: &MetricConfig, delta: f64) -> EvalRow {
    let (report, ade_v, rm) = match traj {
        Some(t) => (score(t, s, None, metrics), Some(ade(t, &s.reference)), reference_match(t, &s.reference, delta)),
        None => (ScoreReport::invalid(), None, 0.0),
    };
    EvalRow { id: s.id.clone(), archetype: s.archetype, label: s.label, report, ade: ade_v, reference_match: rm }
}

/// Mean of a column over rows; invalid plans count as the worst value given.
pub fn mean_of(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}
