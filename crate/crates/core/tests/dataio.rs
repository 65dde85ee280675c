//! Scenario, plan, checkpoint and report files; recipe streams.

use std::io::Cursor;

use flowdrive::config::{CodebookConfig, DataConfig, RunConfig};
use flowdrive::dataio::checkpoint::checkpoint_to_string;
use flowdrive::dataio::{
    dataset_to_string, load_checkpoint, read_dataset, read_dataset_from, read_plans, read_report, sample_recipe,
    save_checkpoint, table_path, write_dataset, write_plans, write_report, Checkpoint, DataError, PlanRecord, Report,
    REPORT_COLUMNS,
};
use flowdrive::metrics::{BenchmarkMode, MetricConfig};
use flowdrive::microworld::scene::{Archetype, Label, Scenario};
use flowdrive::microworld::generate_scenario;
use flowdrive::pipeline::{build_model, gen_data, label_counts};
use flowdrive::policy::PolicyModel;
use flowdrive::training::{evaluate, gradcheck_config, score_row, Planner, RftRecipe};
use proptest::prelude::*;

fn hundred() -> Vec<Scenario> {
    gen_data(&DataConfig { seed: 40, count: 100, ..DataConfig::default() })
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.policy = gradcheck_config();
    cfg.codebook = CodebookConfig { rollouts: 60, ..CodebookConfig::default() };
    cfg
}

#[test]
fn hundred_scenarios_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = hundred();
    write_dataset(&data, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, data);
    // and the bytes are reproducible
    write_dataset(&back, &dir.path().join("e.jsonl")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("e.jsonl")).unwrap());
}

#[test]
fn truncated_file_names_last_complete_record() {
    let data = hundred();
    let text = dataset_to_string(&data).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // header + 37 records, no trailer
    let cut = lines[..38].join("\n") + "\n";
    match read_dataset_from(Cursor::new(cut)) {
        Err(DataError::Truncated { records, last }) => {
            assert_eq!(records, 37);
            assert_eq!(last.as_deref(), Some(data[36].id.as_str()));
        }
        other => panic!("expected truncation, got {other:?}"),
    }
    // a record cut mid-line is malformed at that line
    let half = lines[..10].join("\n") + "\n" + &lines[10][..lines[10].len() / 2] + "\n";
    assert!(matches!(read_dataset_from(Cursor::new(half)), Err(DataError::Malformed { line: 11, .. })));
}

#[test]
fn empty_dataset_is_a_valid_file() {
    let text = dataset_to_string(&[]).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().last().unwrap().contains("\"count\":0"));
    assert_eq!(read_dataset_from(Cursor::new(text)).unwrap(), Vec::<Scenario>::new());
    assert!(matches!(read_dataset_from(Cursor::new("")), Err(DataError::Truncated { records: 0, .. })));
}

#[test]
fn malformed_line_and_unknown_schema_are_rejected() {
    let data = hundred();
    let text = dataset_to_string(&data[..5]).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = "{not json".into();
    let err = read_dataset_from(Cursor::new(lines.join("\n"))).unwrap_err();
    assert!(matches!(err, DataError::Malformed { line: 4, .. }), "{err}");
    assert!(err.to_string().starts_with("line 4:"));

    let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
    assert!(matches!(read_dataset_from(Cursor::new(bumped)), Err(DataError::Schema { line: 1, found: 2, .. })));
    let record_bumped = {
        let mut l: Vec<String> = text.lines().map(String::from).collect();
        l[2] = l[2].replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        l.join("\n")
    };
    assert!(matches!(read_dataset_from(Cursor::new(record_bumped)), Err(DataError::Schema { line: 3, found: 7, .. })));
    let extra_field = text.replacen("\"schema_version\":1,", "\"schema_version\":1,\"colour\":1,", 2);
    assert!(matches!(read_dataset_from(Cursor::new(extra_field)), Err(DataError::Malformed { line: 1, .. })));
}

#[test]
fn checkpoint_round_trip_reproduces_forward_pass_bitwise() {
    let cfg = small_config();
    let m = build_model(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&Checkpoint::new(&m, &cfg, "sft", None), &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let back: PolicyModel = ck.model().unwrap();
    for i in 0..5 {
        let s = generate_scenario(i, Archetype::ALL[i as usize], Label::Positive);
        let ctx = m.context(&s).unwrap();
        let a = m.prefill(&m.store, &ctx).unwrap().1;
        let b = back.prefill(&back.store, &ctx).unwrap().1;
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let (_, cache) = m.encode_context(&s).unwrap();
        let offs = vec![0.5; 2 * m.cfg.future_steps];
        let fa = m.fm_vector_field(&offs, 0.3, &cache, &s.ego_history).unwrap();
        let fb = back.fm_vector_field(&offs, 0.3, &cache, &s.ego_history).unwrap();
        assert_eq!(fa, fb);
    }
    // saving again yields identical bytes
    assert_eq!(checkpoint_to_string(&ck).unwrap(), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn config_hash_mismatch_requires_override() {
    let cfg = small_config();
    let m = build_model(&cfg).unwrap();
    let ck = Checkpoint::new(&m, &cfg, "sft", None);
    assert!(ck.check_config(&cfg, false).is_ok());
    let mut other = cfg.clone();
    other.shaping.lambda_n = 0.9;
    assert!(matches!(ck.check_config(&other, false), Err(DataError::ConfigMismatch { .. })));
    assert!(ck.check_config(&other, true).is_ok());
    // a different architecture is never accepted
    let mut arch = cfg.clone();
    arch.policy.d_model = 16;
    assert!(ck.check_config(&arch, true).is_err());
}

fn labels(data: &[Scenario], idx: &[usize]) -> (usize, usize, usize) {
    idx.iter().fold((0, 0, 0), |(p, n, r), &i| match data[i].label {
        Label::Positive => (p + 1, n, r),
        Label::Negative => (p, n + 1, r),
        Label::Recovery => (p, n, r + 1),
    })
}

#[test]
fn recipe_count_contract() {
    let pool: Vec<Scenario> = (0..10)
        .map(|i| generate_scenario(i, Archetype::CutIn, if i < 7 { Label::Positive } else { Label::Negative }))
        .collect();
    let r = RftRecipe { warmup: 0, positive: 3, negative: 1, recovery: 0, seed: 5 };
    let s = sample_recipe(&pool, &r).unwrap();
    assert_eq!(s.indices.len(), 4);
    assert_eq!(labels(&pool, &s.indices), (3, 1, 0));
    assert!(s.with_replacement.is_empty());
    assert_eq!(sample_recipe(&pool, &r).unwrap(), s);
    // requested label absent
    assert!(sample_recipe(&pool, &RftRecipe { recovery: 1, ..r }).is_err());
    assert!(sample_recipe(&pool, &RftRecipe { positive: 0, negative: 0, ..r }).is_err());
}

#[test]
fn desk_scale_mix_stream() {
    let data = gen_data(&DataConfig::default());
    assert_eq!(labels(&data, &(0..data.len()).collect::<Vec<_>>()), (240, 30, 30));
    let u = 50;
    let r = RftRecipe { warmup: 2 * u, positive: 3 * u, negative: u / 2, recovery: u / 2, seed: 0 };
    let s = sample_recipe(&data, &r).unwrap();
    assert_eq!(s.indices.len(), 300);
    assert_eq!(labels(&data, &s.indices[..100]), (100, 0, 0));
    assert_eq!(labels(&data, &s.indices), (250, 25, 25));
    // 250 positives from a pool of 240
    assert_eq!(s.with_replacement, vec!["positive".to_string()]);
    let other = sample_recipe(&data, &RftRecipe { seed: 1, ..r }).unwrap();
    assert_ne!(other.indices, s.indices);
}

#[test]
fn small_pools_fall_back_to_replacement() {
    let data = gen_data(&DataConfig { count: 20, ..DataConfig::default() });
    let r = RftRecipe { warmup: 0, positive: 4, negative: 10, recovery: 0, seed: 2 };
    let s = sample_recipe(&data, &r).unwrap();
    assert_eq!(labels(&data, &s.indices), (4, 10, 0));
    assert_eq!(s.with_replacement, vec!["negative".to_string()]);
}

#[test]
fn report_columns_and_aggregates() {
    let cfg = small_config();
    let m = build_model(&cfg).unwrap();
    let data = gen_data(&DataConfig { seed: 9, count: 14, ..DataConfig::default() });
    let rows = evaluate(&m, &data, Planner::Token, &MetricConfig::default(), 2.0).unwrap();
    let report = Report::new(&rows, Some(Planner::Token), BenchmarkMode::Pdms);
    assert_eq!(report.columns, REPORT_COLUMNS.to_vec());
    assert_eq!(
        REPORT_COLUMNS.to_vec(),
        ["NC", "DAC", "DDC", "TLC", "EP", "TTC", "LK", "HC", "EC", "C", "PDMS", "EPDMS"].to_vec()
    );
    let mean_pdms = rows.iter().map(|r| r.report.pdms).sum::<f64>() / rows.len() as f64;
    assert!((report.column("PDMS").unwrap() - mean_pdms).abs() < 1e-12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    write_report(&report, &path).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);
    let table = std::fs::read_to_string(table_path(&path)).unwrap();
    assert_eq!(table.lines().count(), 1 + rows.len() + 1);
    assert!(REPORT_COLUMNS.iter().all(|c| table.lines().next().unwrap().contains(c)));
}

#[test]
fn empty_report_is_header_only() {
    let r = Report::new(&[], None, BenchmarkMode::Epdms);
    assert_eq!(r.count, 0);
    assert!(r.mean.is_empty());
    assert_eq!(r.column("PDMS"), None);
    assert_eq!(r.to_table().lines().count(), 1);
}

#[test]
fn generated_label_counts() {
    assert_eq!(label_counts(&DataConfig::default()), (240, 30, 30));
    let data = gen_data(&DataConfig::default());
    assert_eq!(data.len(), 300);
    // every negative and recovery shares its scene with a positive
    for s in data.iter().filter(|s| s.label != Label::Positive) {
        assert!(data.iter().any(|p| p.label == Label::Positive && p.scene == s.scene), "{}", s.id);
    }
}

#[test]
fn plans_round_trip_and_rescore_identically() {
    let data = hundred();
    let metrics = MetricConfig::default();
    let plans: Vec<PlanRecord> = data.iter().take(20).map(|s| PlanRecord { id: s.id.clone(), trajectory: s.reference.clone() }).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plans.jsonl");
    write_plans(&plans, &path).unwrap();
    let back = read_plans(&path).unwrap();
    assert_eq!(back, plans);
    for (p, s) in back.iter().zip(&data) {
        assert_eq!(score_row(s, Some(&p.trajectory), &metrics, 2.0), score_row(s, Some(&s.reference), &metrics, 2.0));
    }
    std::fs::write(&path, "{\"id\":\"x\"}\n").unwrap();
    assert!(matches!(read_plans(&path), Err(DataError::Malformed { line: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn any_generated_scenario_round_trips(seed in 0u64..1_000_000, arch in 0usize..7, label in 0usize..3) {
        let l = [Label::Positive, Label::Negative, Label::Recovery][label];
        let s = generate_scenario(seed, Archetype::ALL[arch], l);
        let text = dataset_to_string(std::slice::from_ref(&s)).unwrap();
        let back = read_dataset_from(Cursor::new(text.clone())).unwrap();
        prop_assert_eq!(&back[0], &s);
        prop_assert_eq!(dataset_to_string(&back).unwrap(), text);
    }

    #[test]
    fn recipe_streams_honour_counts(
        seed in any::<u64>(),
        warmup in 0usize..30,
        positive in 0usize..30,
        negative in 0usize..10,
        recovery in 0usize..10,
    ) {
        prop_assume!(warmup + positive + negative + recovery > 0);
        let data = gen_data(&DataConfig { count: 60, ..DataConfig::default() });
        let r = RftRecipe { warmup, positive, negative, recovery, seed };
        let s = sample_recipe(&data, &r).unwrap();
        prop_assert_eq!(s.indices.len(), r.total());
        prop_assert_eq!(labels(&data, &s.indices[..warmup]), (warmup, 0, 0));
        prop_assert_eq!(labels(&data, &s.indices), (warmup + positive, negative, recovery));
        prop_assert_eq!(sample_recipe(&data, &r).unwrap(), s);
    }
}
