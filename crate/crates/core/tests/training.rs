//! Reward shaping, group statistics, supervised losses, freeze contracts and
//! the GRPO update.

use flowdrive::metrics::{score, BenchmarkMode, MetricConfig};
use flowdrive::microworld::scene::{Archetype, Label, Scenario};
use flowdrive::microworld::trajectory::{rollout_kinematic, EgoState, Lateral, ManeuverThresholds};
use flowdrive::microworld::generate_scenario;
use flowdrive::nnkit::{Adam, AdamConfig, NamedArray, ParamId, ParamStore, Tensor};
use flowdrive::policy::codebook::synthetic_motions;
use flowdrive::policy::vocab::sequence_nll;
use flowdrive::policy::{fit_codebook, PolicyModel};
use flowdrive::training::{
    alignment_check, avg_distance, cot_penalty, fm_loss, fm_samples, gradcheck_config, group_advantage, grpo_step,
    kl_term, reference_match, run_rft, total_reward, train_fm, train_sft, Candidate, GrpoConfig, Phase, RecipeStream,
    RewardBreakdown, RewardContext, SftConfig, ShapingConfig,
};
use flowdrive::{Trajectory, Vec2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> PolicyModel {
    let mut cfg = gradcheck_config();
    cfg.seed = seed;
    let cb = fit_codebook(&synthetic_motions(60, 10, cfg.dt, 0), cfg.codebook_size, 0).unwrap();
    PolicyModel::new(cfg, cb).unwrap()
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Vec<u64>> {
    ids.iter().map(|&i| store.get(i).data.iter().map(|v| v.to_bits()).collect()).collect()
}

fn all_bits(store: &ParamStore) -> Vec<NamedArray> {
    store.export()
}

/// Candidate from the scenario's current pose under random controls.
fn candidate(s: &Scenario, v: f64, controls: &[(f64, f64)]) -> Trajectory {
    let p = s.current_pose();
    let start = EgoState::new(p.position(), p.heading, v, 0.0);
    let t = rollout_kinematic(&start, controls, s.reference.dt).unwrap();
    let mut wps = vec![p];
    wps.extend(t.waypoints);
    Trajectory { waypoints: wps, dt: s.reference.dt, t0: 0 }
}

/// Every plan leaves the (empty) drivable area, so the driving score is 0.
fn undrivable(mut s: Scenario) -> Scenario {
    s.scene.drivable_area.clear();
    s
}

fn rctx<'a>(sh: &'a ShapingConfig, m: &'a MetricConfig, th: &'a ManeuverThresholds) -> RewardContext<'a> {
    RewardContext { shaping: sh, metrics: m, thresholds: th, mode: BenchmarkMode::Pdms }
}

#[test]
fn reward_breakdown_hand_examples() {
    let pos = RewardBreakdown {
        r_driving: 0.9,
        r_negative: 0.0,
        r_recovery: 0.0,
        r_cot: cot_penalty(4.0, 4.0, 0.5),
        alignment_violated: false,
        w_n: 0.0,
        w_r: 0.0,
        lambda_c: 0.1,
        total: 0.0,
    };
    assert!((pos.recompute() - 0.85).abs() < 1e-12);
    let neg = RewardBreakdown { r_driving: 0.6, r_negative: 1.0, r_cot: 0.0, w_n: 0.5, ..pos };
    assert!((neg.recompute() - 0.10).abs() < 1e-12);
}

#[test]
fn demonstrations_scored_against_themselves() {
    let (sh, m, th) = (ShapingConfig::default(), MetricConfig::default(), ManeuverThresholds::default());
    let ctx = rctx(&sh, &m, &th);
    for (seed, arch) in [(1, Archetype::LaneChange), (2, Archetype::StopSign), (3, Archetype::LeadBraking)] {
        for label in [Label::Positive, Label::Negative, Label::Recovery] {
            let s = generate_scenario(seed, arch, label);
            let tags: Vec<Lateral> = s.reasoning_tags.clone();
            let (b, _) = total_reward(&s, &Candidate { tags: &tags, traj: Some(&s.reference) }, &ctx);
            let drv = score(&s.reference, &s, None, &m).pdms;
            let cot = if b.alignment_violated { sh.kappa_align } else { cot_penalty(tags.len() as f64, 4.0, 0.5) };
            let want = match label {
                Label::Positive => drv - 0.05 * cot,
                Label::Negative => drv - 0.5 - 0.05 * cot,
                Label::Recovery => drv + 0.5 - 0.05 * cot,
            };
            assert!((b.total - want).abs() < 1e-12, "{}: {} vs {}", s.id, b.total, want);
        }
    }
}

#[test]
fn alignment_examples() {
    let th = ManeuverThresholds::default();
    let w = std::f64::consts::FRAC_PI_2 / 5.0;
    let start = EgoState::new(Vec2::zero(), 0.0, 5.0, 0.0);
    let t = rollout_kinematic(&start, &[(0.0, w); 10], 0.5).unwrap();
    let mut wps = vec![start.pose()];
    wps.extend(t.waypoints);
    let turn = Trajectory { waypoints: wps, dt: 0.5, t0: 0 };
    assert!(alignment_check(&[Lateral::LeftTurn], &turn, &th));
    assert!(!alignment_check(&[Lateral::Straight], &turn, &th));
    assert!(alignment_check(&[], &turn, &th));
    assert!(!alignment_check(&[Lateral::LeftTurn, Lateral::RightTurn], &turn, &th));

    let (sh, m) = (ShapingConfig::default(), MetricConfig::default());
    let s = generate_scenario(0, Archetype::LeadBraking, Label::Positive);
    let (b, _) = total_reward(&s, &Candidate { tags: &[Lateral::LeftTurn], traj: Some(&s.reference) }, &rctx(&sh, &m, &th));
    assert!(b.alignment_violated);
    assert_eq!(b.r_cot, 10.0);
}

#[test]
fn distance_and_penalty_examples() {
    let pts = |ys: &[f64]| {
        let p: Vec<Vec2> = ys.iter().enumerate().map(|(i, &y)| Vec2::new(i as f64, y)).collect();
        Trajectory::from_positions(0.0, &p, 0.5, 0)
    };
    assert_eq!(avg_distance(&pts(&[0.0, 0.0, 0.0]), &pts(&[0.0, 0.0, 0.0])), 0.0);
    assert!((avg_distance(&pts(&[1.0, 1.0, 1.0]), &pts(&[0.0, 0.0, 0.0])) - 1.0).abs() < 1e-12);
    assert!((avg_distance(&pts(&[0.0, 1.0, 2.0]), &pts(&[0.0, 0.0, 0.0])) - 1.0).abs() < 1e-12);
    assert!((reference_match(&pts(&[1.0, 1.0, 1.0]), &pts(&[0.0; 3]), 2.0) - 0.5).abs() < 1e-12);
    assert_eq!(reference_match(&pts(&[3.0, 3.0, 3.0]), &pts(&[0.0; 3]), 2.0), 0.0);
    assert_eq!(cot_penalty(4.0, 4.0, 0.5), 0.5);
    assert!((cot_penalty(14.0f64, 4.0, 0.1) - 0.731_058_578_630_004_9).abs() < 1e-12);
}

#[test]
fn language_loss_examples() {
    // uniform logits over 4 classes
    let (lm, act) = sequence_nll(&Tensor::zeros(3, 4), &[0, 3, 2], 1);
    assert!((lm - 4f64.ln()).abs() < 1e-12 && (act - 4f64.ln()).abs() < 1e-12);
    assert!((lm - 1.3863).abs() < 1e-4);
    // confident and correct
    let mut sharp = Tensor::zeros(3, 4);
    for (r, t) in [0, 3, 2].iter().enumerate() {
        sharp.set(r, *t, 60.0);
    }
    let (lm, act) = sequence_nll(&sharp, &[0, 3, 2], 1);
    assert!(lm < 1e-20 && act < 1e-20);
    // no reasoning: both means cover the same rows
    let logits = Tensor::from_vec(2, 3, vec![0.1, -2.0, 0.7, 1.5, 0.0, -0.3]).unwrap();
    let (lm, act) = sequence_nll(&logits, &[2, 0], 0);
    assert_eq!(lm, act);
}

#[test]
fn flow_loss_with_zero_field_is_mean_squared_offset() {
    let mut m = model(3);
    m.cfg.noise_std = 0.0;
    for name in ["bridge.out.w", "bridge.out.b"] {
        let id = m.store.id(name).unwrap();
        m.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let data: Vec<Scenario> = (0..6).map(|i| generate_scenario(i, Archetype::ALL[i as usize], Label::Positive)).collect();
    let samples = fm_samples(&m, &data).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (loss, _) = fm_loss(&m, &m.store, &data, &refs, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
    let mut want = 0.0;
    for s in &data {
        let target = m.offsets_of(&s.current_pose(), &s.reference);
        let (anchors, _) = m.embed_history(&s.ego_history, None).unwrap();
        want += target.iter().zip(&anchors).map(|(a, h)| (a - h).powi(2)).sum::<f64>();
    }
    want /= data.len() as f64;
    assert!((loss - want).abs() <= 1e-9 * want, "{loss} vs {want}");
}

fn sft_cfg(lm: usize, fm: usize) -> SftConfig {
    SftConfig { lm_steps: lm, fm_steps: fm, batch_size: 4, fm_eval_samples: 8, log_every: 1, ..SftConfig::default() }
}

fn toy_data() -> Vec<Scenario> {
    (0..8).map(|i| generate_scenario(i, Archetype::ALL[i as usize % 7], Label::Positive)).collect()
}

#[test]
fn flow_stage_never_touches_the_token_policy() {
    let mut m = model(1);
    let tok = m.token_policy_params();
    let expert = m.action_expert_params();
    let before = (snapshot(&m.store, &tok), snapshot(&m.store, &expert));
    train_fm(&mut m, &toy_data(), &sft_cfg(0, 5)).unwrap();
    assert_eq!(snapshot(&m.store, &tok), before.0);
    assert_ne!(snapshot(&m.store, &expert), before.1);
}

#[test]
fn supervised_training_is_deterministic() {
    let run = || {
        let mut m = model(2);
        let r = train_sft(&mut m, &toy_data(), &sft_cfg(5, 5)).unwrap();
        (all_bits(&m.store), r)
    };
    assert_eq!(run(), run());
}

#[test]
fn rft_never_touches_the_action_expert() {
    let mut m = model(5);
    let data = toy_data();
    let expert = m.action_expert_params();
    let tok = m.token_policy_params();
    let before = (snapshot(&m.store, &expert), snapshot(&m.store, &tok));
    let stream = RecipeStream { indices: vec![0, 3, 5, 1], warmup: 2, with_replacement: vec![] };
    let (sh, mc, th) = (ShapingConfig::default(), MetricConfig::default(), ManeuverThresholds::default());
    let cfg = GrpoConfig { lr: 1e-2, ..GrpoConfig::default() };
    let logs = run_rft(&mut m, &data, &stream, &cfg, &rctx(&sh, &mc, &th), 0, |_| {}).unwrap();
    assert_eq!(logs.iter().map(|l| l.phase).collect::<Vec<_>>(), [Phase::Warmup, Phase::Warmup, Phase::Mixed, Phase::Mixed]);
    assert_eq!(snapshot(&m.store, &expert), before.0);
    assert_ne!(snapshot(&m.store, &tok), before.1);
    for l in &logs {
        if l.group.skipped.is_none() {
            assert!(l.group.ratios.iter().all(|r| (r - 1.0).abs() <= 1e-6));
        }
    }
}

#[test]
fn zero_advantage_without_kl_leaves_parameters_unchanged() {
    let mut m = model(6);
    let s = undrivable(generate_scenario(4, Archetype::LeadBraking, Label::Positive));
    let sh = ShapingConfig { lambda_c: 0.0, ..ShapingConfig::default() };
    let (mc, th) = (MetricConfig::default(), ManeuverThresholds::default());
    let cfg = GrpoConfig { beta: 0.0, lr: 1e-1, ..GrpoConfig::default() };
    let reference = m.store.clone();
    let mut adam = Adam::new(AdamConfig::default(), &m.store);
    let before = all_bits(&m.store);
    let log = grpo_step(&mut m, &reference, &mut adam, &s, &cfg, &rctx(&sh, &mc, &th), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(log.rewards.iter().all(|&r| r == 0.0));
    assert!(log.advantages.iter().all(|&a| a == 0.0));
    assert_eq!(all_bits(&m.store), before);
}

#[test]
fn group_updates_raise_reference_matching_on_a_toy_task() {
    // reward = reference match against the recovery demonstration only
    let mut m = model(7);
    let s = undrivable(generate_scenario(11, Archetype::LaneChange, Label::Recovery));
    let data = vec![s];
    let sh = ShapingConfig { lambda_r: 1.0, lambda_c: 0.0, delta: 20.0, ..ShapingConfig::default() };
    let (mc, th) = (MetricConfig::default(), ManeuverThresholds::default());
    let cfg = GrpoConfig { lr: 1e-2, ..GrpoConfig::default() };
    let stream = RecipeStream { indices: vec![0; 300], warmup: 0, with_replacement: vec![] };
    let logs = run_rft(&mut m, &data, &stream, &cfg, &rctx(&sh, &mc, &th), 1, |_| {}).unwrap();
    let means: Vec<f64> = logs.iter().map(|l| l.group.mean_reward()).collect();
    let window = |a: usize| means[a..a + 50].iter().sum::<f64>() / 50.0;
    let (first, last) = (window(0), window(250));
    let mut best = f64::NEG_INFINITY;
    let mut best_curve = Vec::new();
    for k in 0..=250 {
        best = best.max(window(k));
        best_curve.push(best);
    }
    assert!(best_curve.windows(2).all(|w| w[1] >= w[0]));
    assert!(last > first + 0.05, "first 50 steps {first:.3}, last 50 steps {last:.3}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reward_routing_and_recompute_audit(
        seed in 0u64..5000,
        arch in 0usize..7,
        label in 0usize..3,
        v in 0.0..14.0f64,
        controls in prop::collection::vec((-3.0..2.0f64, -0.3..0.3f64), 10),
        tags in prop::collection::vec(0usize..5, 0..4),
    ) {
        let l = [Label::Positive, Label::Negative, Label::Recovery][label];
        let s = generate_scenario(seed, Archetype::ALL[arch], l);
        let (sh, m, th) = (ShapingConfig::default(), MetricConfig::default(), ManeuverThresholds::default());
        let t = candidate(&s, v, &controls);
        let tags: Vec<Lateral> = tags.iter().map(|&i| Lateral::ALL[i]).collect();
        let (b, _) = total_reward(&s, &Candidate { tags: &tags, traj: Some(&t) }, &rctx(&sh, &m, &th));
        prop_assert!((b.recompute() - b.total).abs() < 1e-12);
        prop_assert_eq!(b.w_n, if l == Label::Negative { sh.lambda_n } else { 0.0 });
        prop_assert_eq!(b.w_r, if l == Label::Recovery { sh.lambda_r } else { 0.0 });
        if l != Label::Negative { prop_assert_eq!(b.r_negative, 0.0); }
        if l != Label::Recovery { prop_assert_eq!(b.r_recovery, 0.0); }
        prop_assert!((0.0..=1.0).contains(&b.r_driving));
        prop_assert!(b.r_cot == sh.kappa_align || (0.0..=1.0).contains(&b.r_cot));
        prop_assert_eq!(b.alignment_violated, b.r_cot == sh.kappa_align);
    }

    #[test]
    fn advantages_are_shift_scale_invariant_and_permutation_equivariant(
        r in prop::collection::vec(-5.0..5.0f64, 2..16),
        shift in -10.0..10.0f64,
        scale in 0.1..10.0f64,
        rot in 0usize..16,
    ) {
        let a = group_advantage(&r);
        let n = r.len() as f64;
        let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        prop_assert!((a.iter().sum::<f64>() / n).abs() < 1e-10);
        prop_assert!((a.iter().map(|x| x * x).sum::<f64>() / n - 1.0).abs() < 1e-10);
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        for (x, y) in a.iter().zip(group_advantage(&moved)) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        let k = rot % r.len();
        let mut rotated = r.clone();
        rotated.rotate_left(k);
        let mut expect = a.clone();
        expect.rotate_left(k);
        for (x, y) in expect.iter().zip(group_advantage(&rotated)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(a in -30.0..0.0f64, b in -30.0..0.0f64) {
        let k = kl_term(a, b);
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_term(a, a), 0.0);
        if (a - b).abs() > 1e-4 {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn reference_match_is_bounded_and_monotone(d1 in 0.0..10.0f64, d2 in 0.0..10.0f64, delta in 0.1..5.0f64) {
        use flowdrive::training::reference_match_distance as rm;
        prop_assert!((0.0..=1.0).contains(&rm(d1, delta)));
        prop_assert_eq!(rm(0.0, delta), 1.0);
        if d1 <= d2 {
            prop_assert!(rm(d1, delta) >= rm(d2, delta));
        }
    }
}
