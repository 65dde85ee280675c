//! Stage orchestration shared by the command line and the acceptance suite.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DataConfig, RunConfig};
use crate::dataio::{sample_recipe, DataError, Report};
use crate::microworld::generate_scenario;
use crate::microworld::scene::{Archetype, Label, Scenario};
use crate::policy::codebook::{fit_codebook, synthetic_motions};
use crate::policy::{LayerSelection, PolicyError, PolicyModel};
use crate::training::bench::median;
use crate::training::{
    evaluate, mean_of, run_rft, train_fm, train_lm, EvalRow, Planner, RewardContext, RftRecipe, RftStepLog, SftReport,
    TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Label counts for `count` scenarios: negatives and recoveries rounded from
/// their fractions, positives take the rest.
pub fn label_counts(cfg: &DataConfig) -> (usize, usize, usize) {
    let neg = (cfg.count as f64 * cfg.neg_frac).round() as usize;
    let rec = ((cfg.count as f64 * cfg.rec_frac).round() as usize).min(cfg.count - neg);
    (cfg.count - neg - rec, neg, rec)
}

/// The `k`-th (seed, archetype) slot of a generation run.
fn slot(cfg: &DataConfig, k: usize) -> (u64, Archetype) {
    let n = cfg.archetypes.len();
    (cfg.seed + (k / n) as u64, cfg.archetypes[k % n])
}

/// Positives over consecutive slots; negatives reuse the scenes of the first
/// positive slots and recoveries the slots after them, so every shaped sample
/// has a positive sibling.
pub fn gen_data(cfg: &DataConfig) -> Vec<Scenario> {
    let (pos, neg, rec) = label_counts(cfg);
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..pos {
        let (s, a) = slot(cfg, k);
        out.push(generate_scenario(s, a, Label::Positive));
    }
    for k in 0..neg {
        let (s, a) = slot(cfg, k);
        out.push(generate_scenario(s, a, Label::Negative));
    }
    for k in 0..rec {
        let (s, a) = slot(cfg, if pos > 0 { (neg + k) % pos } else { neg + k });
        out.push(generate_scenario(s, a, Label::Recovery));
    }
    out
}

/// Held-out positives and their negative siblings.
pub fn heldout(cfg: &RunConfig) -> (Vec<Scenario>, Vec<Scenario>) {
    let dc = DataConfig { seed: cfg.ablate.eval_seed, count: cfg.ablate.eval_count, neg_frac: 0.0, rec_frac: 0.0, ..cfg.data.clone() };
    let pos = gen_data(&dc);
    let neg = (0..pos.len())
        .map(|k| {
            let (s, a) = slot(&dc, k);
            generate_scenario(s, a, Label::Negative)
        })
        .collect();
    (pos, neg)
}

/// Untrained model with a freshly fitted codebook.
pub fn build_model(cfg: &RunConfig) -> Result<PolicyModel, PipelineError> {
    let cb = &cfg.codebook;
    let motions = synthetic_motions(cb.rollouts, cb.steps, cfg.policy.dt, cb.seed);
    let codebook = fit_codebook(&motions, cfg.policy.codebook_size, cb.seed)?;
    Ok(PolicyModel::new(cfg.policy.clone(), codebook)?)
}

/// Both supervised stages from scratch.
pub fn run_sft(cfg: &RunConfig, data: &[Scenario]) -> Result<(PolicyModel, SftReport), PipelineError> {
    let mut model = build_model(cfg)?;
    let lm = train_lm(&mut model, data, &cfg.sft)?;
    let mut report = train_fm(&mut model, data, &cfg.sft)?;
    report.lm_curve = lm;
    Ok((model, report))
}

pub fn reward_context(cfg: &RunConfig) -> RewardContext<'_> {
    RewardContext { shaping: &cfg.shaping, metrics: &cfg.metrics, thresholds: &cfg.maneuver, mode: cfg.eval.mode }
}

/// GRPO over the stream drawn from `recipe`.
pub fn run_rft_recipe(
    cfg: &RunConfig,
    model: &mut PolicyModel,
    data: &[Scenario],
    recipe: &RftRecipe,
    on_step: impl FnMut(&RftStepLog),
) -> Result<Vec<RftStepLog>, PipelineError> {
    let stream = sample_recipe(data, recipe)?;
    Ok(run_rft(model, data, &stream, &cfg.grpo, &reward_context(cfg), recipe.seed, on_step)?)
}

pub fn eval_report(cfg: &RunConfig, model: &PolicyModel, scenarios: &[Scenario], planner: Planner) -> Result<Report, PipelineError> {
    let rows = evaluate(model, scenarios, planner, &cfg.metrics, cfg.shaping.delta)?;
    Ok(Report::new(&rows, Some(planner), cfg.eval.mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Recipe,
    Layers,
    HistoryInit,
    Shaping,
}

impl AblationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "recipe" => Some(Self::Recipe),
            "layers" => Some(Self::Layers),
            "history-init" => Some(Self::HistoryInit),
            "shaping" => Some(Self::Shaping),
            _ => None,
        }
    }
}

/// One (arm, seed) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub arms: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Median of a metric over the seeds of one arm.
    pub fn median(&self, arm: &str, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).filter_map(|r| r.metrics.get(metric).copied()).collect();
        (!v.is_empty()).then(|| median(v))
    }

    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Arms by rows, metrics (median over seeds) by columns.
    pub fn to_table(&self) -> String {
        let names = self.metric_names();
        let mut s = format!("{:<18}", "arm");
        for n in &names {
            s.push_str(&format!(" {n:>16}"));
        }
        s.push('\n');
        for arm in &self.arms {
            s.push_str(&format!("{arm:<18}"));
            for n in &names {
                match self.median(arm, n) {
                    Some(v) => s.push_str(&format!(" {v:>16.4}")),
                    None => s.push_str(&format!(" {:>16}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.policy.seed = cfg.policy.seed.wrapping_add(seed);
    c.sft.seed = cfg.sft.seed.wrapping_add(seed);
    c.recipe.seed = cfg.recipe.seed.wrapping_add(seed);
    c
}

fn flow_metrics(cfg: &RunConfig, model: &PolicyModel, eval: &[Scenario]) -> Result<BTreeMap<String, f64>, PipelineError> {
    let rows = evaluate(model, eval, Planner::Flow, &cfg.metrics, cfg.shaping.delta)?;
    let mut m = BTreeMap::new();
    m.insert("ade".into(), mean_ade(&rows));
    m.insert("pdms".into(), mean_of(&rows, |r| r.report.pdms));
    m.insert("epdms".into(), mean_of(&rows, |r| r.report.epdms));
    Ok(m)
}

/// Mean ADE with invalid plans counted at the worst valid ADE seen (or 1e3).
pub fn mean_ade(rows: &[EvalRow]) -> f64 {
    let worst = rows.iter().filter_map(|r| r.ade).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    let fill = worst.unwrap_or(1e3);
    mean_of(rows, |r| r.ade.unwrap_or(fill))
}

/// Median seconds of flow sampling per plan over the held-out caches.
pub fn flow_generation_time(model: &PolicyModel, eval: &[Scenario], repeats: usize) -> Result<f64, PipelineError> {
    let mut caches = Vec::with_capacity(eval.len());
    for s in eval {
        let ctx = model.context(s)?;
        let d = model.decode(&model.store, &ctx, None, true)?;
        caches.push(d.cache);
    }
    let mut times = Vec::new();
    for _ in 0..repeats.max(3) {
        let t = Instant::now();
        for (s, c) in eval.iter().zip(&caches) {
            std::hint::black_box(model.flow_offsets(&model.store, c, &s.ego_history, model.cfg.flow_steps)?);
        }
        times.push(t.elapsed().as_secs_f64() / eval.len().max(1) as f64);
    }
    Ok(median(times))
}

fn token_metrics(
    cfg: &RunConfig,
    model: &PolicyModel,
    eval: &[Scenario],
    negatives: &[Scenario],
) -> Result<BTreeMap<String, f64>, PipelineError> {
    let rows = evaluate(model, eval, Planner::Token, &cfg.metrics, cfg.shaping.delta)?;
    let neg = evaluate(model, negatives, Planner::Token, &cfg.metrics, cfg.shaping.delta)?;
    let mut m = BTreeMap::new();
    m.insert("pdms".into(), mean_of(&rows, |r| r.report.pdms));
    m.insert("epdms".into(), mean_of(&rows, |r| r.report.epdms));
    m.insert("ade".into(), mean_ade(&rows));
    m.insert("neg_match".into(), mean_of(&neg, |r| r.reference_match));
    Ok(m)
}

/// Run one ablation over `cfg.ablate.seeds`, reusing `data` across arms. The
/// language stage is shared by all arms of a seed.
pub fn run_ablation(
    kind: AblationKind,
    cfg: &RunConfig,
    data: &[Scenario],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable, PipelineError> {
    let (eval, negatives) = heldout(cfg);
    let mut rows = Vec::new();
    let mut arms: Vec<String> = Vec::new();
    let mut push = |rows: &mut Vec<AblationRow>, arms: &mut Vec<String>, row: AblationRow| {
        if !arms.contains(&row.arm) {
            arms.push(row.arm.clone());
        }
        progress(&row);
        rows.push(row);
    };
    for &seed in &cfg.ablate.seeds {
        let sc = seeded(cfg, seed);
        let mut base = build_model(&sc)?;
        train_lm(&mut base, data, &sc.sft)?;
        match kind {
            AblationKind::Layers => {
                let n = sc.policy.n_layers;
                let mut sel: Vec<LayerSelection> = [1, 2, 4].iter().filter(|&&k| k <= n).map(|&k| LayerSelection::Interval(k)).collect();
                sel.push(LayerSelection::LastOnly);
                for layers in sel {
                    let mut ac = sc.clone();
                    ac.policy.layers = layers;
                    let mut m = PolicyModel::new(ac.policy.clone(), base.codebook.clone())?;
                    m.adopt_token_policy(&base)?;
                    train_fm(&mut m, data, &ac.sft)?;
                    let mut metrics = flow_metrics(&ac, &m, &eval)?;
                    metrics.insert("bridge_layers".into(), m.sparse.len() as f64);
                    metrics.insert("gen_seconds".into(), flow_generation_time(&m, &eval, cfg.ablate.timing_repeats)?);
                    push(&mut rows, &mut arms, AblationRow { arm: layers.label(), seed, metrics });
                }
            }
            AblationKind::HistoryInit => {
                for hi in [true, false] {
                    let mut ac = sc.clone();
                    ac.policy.history_init = hi;
                    let mut m = PolicyModel::new(ac.policy.clone(), base.codebook.clone())?;
                    m.adopt_token_policy(&base)?;
                    train_fm(&mut m, data, &ac.sft)?;
                    let metrics = flow_metrics(&ac, &m, &eval)?;
                    let arm = if hi { "history-init" } else { "zero-anchor" };
                    push(&mut rows, &mut arms, AblationRow { arm: arm.into(), seed, metrics });
                }
            }
            AblationKind::Recipe | AblationKind::Shaping => {
                let metrics = token_metrics(&sc, &base, &eval, &negatives)?;
                push(&mut rows, &mut arms, AblationRow { arm: "sft".into(), seed, metrics });
                let mut variants: Vec<(String, RunConfig)> = Vec::new();
                if kind == AblationKind::Recipe {
                    variants.push(("mixed".into(), sc.clone()));
                    let mut p = sc.clone();
                    p.recipe = sc.recipe.positive_only();
                    variants.push(("positive-only".into(), p));
                    let mut w = sc.clone();
                    w.recipe = sc.recipe.without_warmup();
                    variants.push(("no-warmup".into(), w));
                } else {
                    for &l in &cfg.ablate.lambda_n {
                        let mut c = sc.clone();
                        c.shaping.lambda_n = l;
                        variants.push((format!("lambda_n={l}"), c));
                    }
                    for &d in &cfg.ablate.delta {
                        let mut c = sc.clone();
                        c.shaping.delta = d;
                        variants.push((format!("delta={d}"), c));
                    }
                }
                for (arm, vc) in variants {
                    let mut m = base.clone();
                    run_rft_recipe(&vc, &mut m, data, &vc.recipe, |_| {})?;
                    // compare arms under the base shaping so only the policy differs
                    let metrics = token_metrics(&sc, &m, &eval, &negatives)?;
                    push(&mut rows, &mut arms, AblationRow { arm, seed, metrics });
                }
            }
        }
    }
    Ok(AblationTable { kind, arms, rows })
}
