//! `flowdrive`: data generation, training, evaluation, scoring, ablations and
//! the latency benchmark.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use flowdrive::config::RunConfig;
use flowdrive::dataio::{
    load_checkpoint, read_dataset, read_plans, sample_recipe, save_checkpoint, write_atomic, write_dataset, write_plans,
    write_report, Checkpoint, PlanRecord, Report,
};
use flowdrive::metrics::BenchmarkMode;
use flowdrive::microworld::scene::{Archetype, Label, Scenario};
use flowdrive::pipeline::{build_model, gen_data, label_counts, reward_context, run_ablation, AblationKind};
use flowdrive::training::{bench_latency, plan, run_rft, score_row, train_sft, Planner, RftLogLine};

#[derive(Parser)]
#[command(name = "flowdrive", version, about = "Reasoning-conditioned driving policy on a procedural microworld")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pdms,
    Epdms,
}

impl From<ModeArg> for BenchmarkMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pdms => BenchmarkMode::Pdms,
            ModeArg::Epdms => BenchmarkMode::Epdms,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    Token,
    Flow,
}

impl From<PlannerArg> for Planner {
    fn from(p: PlannerArg) -> Self {
        match p {
            PlannerArg::Token => Planner::Token,
            PlannerArg::Flow => Planner::Flow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RecipeArg {
    /// Warm-up, then positives, negatives and recoveries.
    Mixed,
    /// Same budget, positives only.
    PositiveOnly,
    /// Same budget, warm-up replaced by positives in the mix.
    NoWarmup,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Recipe,
    Layers,
    HistoryInit,
    Shaping,
}

impl From<KindArg> for AblationKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Recipe => AblationKind::Recipe,
            KindArg::Layers => AblationKind::Layers,
            KindArg::HistoryInit => AblationKind::HistoryInit,
            KindArg::Shaping => AblationKind::Shaping,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labelled scenario dataset.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated archetype names (default: all).
        #[arg(long, value_delimiter = ',')]
        archetypes: Option<Vec<String>>,
        #[arg(long)]
        neg_frac: Option<f64>,
        #[arg(long)]
        rec_frac: Option<f64>,
        /// Base config; flags override its `[data]` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Language stage, then the flow expert; writes a checkpoint directory.
    TrainSft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write into an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// GRPO fine-tuning of the token policy from a checkpoint.
    TrainRft {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mixed")]
        recipe: RecipeArg,
        /// Defaults to the checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a config whose hash differs from the checkpoint's.
        #[arg(long)]
        allow_config_mismatch: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Plan and score every scenario of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        planner: Option<PlannerArg>,
        /// Also write the plans, one per line.
        #[arg(long)]
        plans: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Score externally supplied plans.
    Score {
        #[arg(long)]
        traj_file: PathBuf,
        #[arg(long)]
        scenario_file: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and compare the arms of one ablation over the configured seeds.
    Ablate {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shared dataset (default: generated from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Time token decoding against flow sampling per horizon.
    BenchLatency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,50")]
        waypoints: Vec<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// JSON table; the text table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { seed, count, out, archetypes, neg_frac, rec_frac, config, force } => {
            let mut cfg = load_config(config.as_deref())?;
            let d = &mut cfg.data;
            if let Some(v) = seed {
                d.seed = v;
            }
            if let Some(v) = count {
                d.count = v;
            }
            if let Some(names) = archetypes {
                d.archetypes = names
                    .iter()
                    .map(|n| Archetype::parse(n.trim()).ok_or_else(|| anyhow!("unknown archetype {n:?}")))
                    .collect::<Result<_>>()?;
            }
            if let Some(v) = neg_frac {
                d.neg_frac = v;
            }
            if let Some(v) = rec_frac {
                d.rec_frac = v;
            }
            cfg.validate()?;
            if out.exists() && !force {
                bail!("{} exists; pass --force to overwrite", out.display());
            }
            let data = gen_data(&cfg.data);
            write_dataset(&data, &out)?;
            write_config(&cfg, &sibling(&out, ".config.toml"))?;
            let (p, n, r) = label_counts(&cfg.data);
            info!("wrote {} scenarios ({p} positive, {n} negative, {r} recovery) to {}", data.len(), out.display());
        }
        Cmd::TrainSft { data, config, out, force } => {
            let cfg = load_config(config.as_deref())?;
            let scenarios = read_dataset(&data)?;
            prepare_out_dir(&out, force)?;
            write_config(&cfg, &out.join("config.toml"))?;
            let mut model = build_model(&cfg)?;
            info!("{} parameters, {} scenarios", model.store.num_scalars(), scenarios.len());
            let report = train_sft(&mut model, &scenarios, &cfg.sft)?;
            let mut log = JsonLines::create(&out.join("metrics.jsonl"))?;
            for (stage, curve) in [("lm", &report.lm_curve), ("fm", &report.fm_curve)] {
                for p in curve {
                    log.line(&serde_json::json!({ "stage": stage, "step": p.step, "loss": p.loss, "aux": p.aux }))?;
                }
            }
            log.finish()?;
            write_atomic(&out.join("sft_report.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
            save_checkpoint(&Checkpoint::new(&model, &cfg, "sft", None), &out.join("checkpoint.json"))?;
            info!("flow-matching loss {:.4} -> {:.4} m^2", report.fm_initial, report.fm_final);
        }
        Cmd::TrainRft { checkpoint, data, recipe, config, allow_config_mismatch, out, force } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = resolve_config(&ck, config.as_deref(), allow_config_mismatch)?;
            let scenarios = read_dataset(&data)?;
            let recipe = match recipe {
                RecipeArg::Mixed => cfg.recipe,
                RecipeArg::PositiveOnly => cfg.recipe.positive_only(),
                RecipeArg::NoWarmup => cfg.recipe.without_warmup(),
            };
            let stream = sample_recipe(&scenarios, &recipe)?;
            for l in &stream.with_replacement {
                warn!("{l} drawn with replacement");
            }
            prepare_out_dir(&out, force)?;
            let mut run_cfg = cfg.clone();
            run_cfg.recipe = recipe;
            write_config(&run_cfg, &out.join("config.toml"))?;
            let mut model = ck.model()?;
            let mut log = JsonLines::create(&out.join("metrics.jsonl"))?;
            let mut err = None;
            let total = stream.indices.len();
            run_rft(&mut model, &scenarios, &stream, &cfg.grpo, &reward_context(&cfg), recipe.seed, |l| {
                let line = RftLogLine::from(l);
                if (l.step + 1) % 50 == 0 || l.step + 1 == total {
                    info!("step {}/{total} reward {:.4}", l.step + 1, line.reward_mean);
                }
                if let Err(e) = log.line(&line) {
                    err.get_or_insert(e);
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            log.finish()?;
            // the checkpoint keeps the config it was trained from so later stages can verify it
            save_checkpoint(&Checkpoint::new(&model, &cfg, "rft", None), &out.join("checkpoint.json"))?;
        }
        Cmd::Eval { checkpoint, data, report, mode, planner, plans, config, allow_config_mismatch } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = resolve_config(&ck, config.as_deref(), allow_config_mismatch)?;
            if let Some(m) = mode {
                cfg.eval.mode = m.into();
            }
            if let Some(p) = planner {
                cfg.eval.planner = p.into();
            }
            let scenarios = read_dataset(&data)?;
            let model = ck.model()?;
            let mut rows = Vec::with_capacity(scenarios.len());
            let mut records = Vec::new();
            for s in &scenarios {
                let p = plan(&model, s, cfg.eval.planner)?;
                rows.push(score_row(s, p.traj.as_ref(), &cfg.metrics, cfg.shaping.delta));
                if let Some(t) = p.traj {
                    records.push(PlanRecord { id: s.id.clone(), trajectory: t });
                }
            }
            let rep = Report::new(&rows, Some(cfg.eval.planner), cfg.eval.mode);
            write_report(&rep, &report)?;
            write_config(&cfg, &sibling(&report, ".config.toml"))?;
            if let Some(p) = plans {
                write_plans(&records, &p)?;
            }
            print_summary(&rep);
        }
        Cmd::Score { traj_file, scenario_file, report, mode, config } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.eval.mode = m.into();
            }
            let scenarios = read_dataset(&scenario_file)?;
            let plans = read_plans(&traj_file)?;
            let rows = score_plans(&scenarios, &plans, &cfg)?;
            let rep = Report::new(&rows, None, cfg.eval.mode);
            write_report(&rep, &report)?;
            write_config(&cfg, &sibling(&report, ".config.toml"))?;
            print_summary(&rep);
        }
        Cmd::Ablate { kind, config, data, out, force } => {
            let cfg = load_config(config.as_deref())?;
            let scenarios = match &data {
                Some(p) => read_dataset(p)?,
                None => gen_data(&cfg.data),
            };
            prepare_out_dir(&out, force)?;
            write_config(&cfg, &out.join("config.toml"))?;
            write_dataset(&scenarios, &out.join("data.jsonl"))?;
            let mut log = JsonLines::create(&out.join("rows.jsonl"))?;
            let mut err = None;
            let table = run_ablation(kind.into(), &cfg, &scenarios, |row| {
                info!("{} seed {}: {:?}", row.arm, row.seed, row.metrics);
                if let Err(e) = log.line(row) {
                    err.get_or_insert(e);
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            log.finish()?;
            write_atomic(&out.join("table.json"), (serde_json::to_string_pretty(&table)? + "\n").as_bytes())?;
            let text = table.to_table();
            write_atomic(&out.join("table.txt"), text.as_bytes())?;
            print!("{text}");
        }
        Cmd::BenchLatency { checkpoint, waypoints, repeats, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = ck.config.clone();
            cfg.bench.waypoints = waypoints;
            if let Some(r) = repeats {
                cfg.bench.repeats = r;
            }
            if cfg.bench.waypoints.is_empty() || cfg.bench.waypoints.contains(&0) {
                bail!("--waypoints needs positive counts");
            }
            let rows = bench_latency(&cfg.policy, &cfg.bench.waypoints, cfg.bench.repeats)?;
            println!("{:>10} {:>14} {:>14} {:>8}", "waypoints", "ar_ms", "flow_ms", "ar/flow");
            for r in &rows {
                println!(
                    "{:>10} {:>14.3} {:>14.3} {:>8.2}",
                    r.waypoints,
                    r.ar_seconds * 1e3,
                    r.flow_seconds * 1e3,
                    r.ar_seconds / r.flow_seconds
                );
            }
            if let Some(p) = out {
                write_atomic(&p, (serde_json::to_string_pretty(&rows)? + "\n").as_bytes())?;
                write_config(&cfg, &sibling(&p, ".config.toml"))?;
            }
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// The given config checked against the checkpoint's, or the checkpoint's own.
fn resolve_config(ck: &Checkpoint, path: Option<&Path>, allow_mismatch: bool) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            ck.check_config(&cfg, allow_mismatch).map_err(|e| anyhow!("{e}; pass --allow-config-mismatch to use it anyway"))?;
            if cfg.hash() != ck.config_hash {
                warn!("config differs from the checkpoint's");
            }
            Ok(cfg)
        }
        None => Ok(ck.config.clone()),
    }
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_atomic(path, cfg.to_toml_string()?.as_bytes())?;
    Ok(())
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            bail!("{} exists and is not a directory", out.display());
        }
        let empty = std::fs::read_dir(out)?.next().is_none();
        if !empty && !force {
            bail!("output directory {} is not empty; pass --force to write into it", out.display());
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn score_plans(scenarios: &[Scenario], plans: &[PlanRecord], cfg: &RunConfig) -> Result<Vec<flowdrive::training::EvalRow>> {
    let mut by_id: HashMap<&str, &PlanRecord> = HashMap::new();
    for p in plans {
        if by_id.insert(p.id.as_str(), p).is_some() {
            bail!("duplicate plan for scenario {:?}", p.id);
        }
    }
    for p in plans {
        if !scenarios.iter().any(|s| s.id == p.id) {
            bail!("plan for unknown scenario {:?}", p.id);
        }
    }
    // scenarios without a plan count as invalid
    Ok(scenarios
        .iter()
        .map(|s| score_row(s, by_id.get(s.id.as_str()).map(|p| &p.trajectory), &cfg.metrics, cfg.shaping.delta))
        .collect())
}

fn print_summary(rep: &Report) {
    let col = |c: &str| rep.column(c).map_or("-".to_string(), |v| format!("{v:.4}"));
    let negatives = rep.rows.iter().filter(|r| r.label == Label::Negative).count();
    println!(
        "{} scenarios ({negatives} negative): PDMS {} EPDMS {} ADE {}",
        rep.count,
        col("PDMS"),
        col("EPDMS"),
        rep.mean_ade.map_or("-".to_string(), |v| format!("{v:.3}"))
    );
}

/// Line-delimited JSON written as it goes.
struct JsonLines {
    w: BufWriter<File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { w: BufWriter::new(f) })
    }

    fn line<T: serde::Serialize>(&mut self, v: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, v)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}
