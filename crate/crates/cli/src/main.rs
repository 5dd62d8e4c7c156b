//! `clfd`: data generation, contrastive training, evaluation and RL from one binary.

mod error;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use clfd_core::data::scene::NUM_CAMERAS;
use clfd_core::data::{generate_dataset, Dataset, GeneratorConfig, Split, Stage, SEEN_VIEWS, UNSEEN_VIEWS};
use clfd_core::eval::{alignment_suite, stage_probe_eval, write_alignment_report, EncoderSource, ProbeConfig};
use clfd_core::rl::{
    evaluate_policy, load_policy, save_policy, train_ddpg, write_episode_log, DdpgConfig, Env, EnvConfig, Policy,
    PolicyMetadata, Task,
};
use clfd_core::train::{self, Objective, TrainConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};

use crate::error::{CliError, Result};

const CONFIG_FILE: &str = "config.json";
const POLICY_FILE: &str = "policy.ckpt";
const EPISODES_FILE: &str = "episodes.csv";

#[derive(Parser, Debug)]
#[command(name = "clfd", version, about = "Multi-view contrastive learning from demonstrations")]
struct Cli {
    /// Worker threads for parallel generation and evaluation (default: all cores).
    #[arg(long, global = true, env = "CLFD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view pick-and-place dataset.
    GenData(GenDataArgs),
    /// Train the encoder with NT-Xent (or the triplet baseline).
    Train(TrainArgs),
    /// Alignment error of an encoder over a dataset split.
    EvalAlign(EvalAlignArgs),
    /// Stage-classification probe on frozen embeddings.
    EvalStage(EvalStageArgs),
    /// Train a DDPG+HER policy for one stage with embedding rewards.
    TrainRl(TrainRlArgs),
    /// Noise-free success rate of a trained policy or a baseline.
    EvalRl(EvalRlArgs),
    /// Split a metrics or episode CSV into per-column (x, y) series.
    PlotExport(PlotExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Generator config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    demos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cameras to draw pairs from: seen, unseen, all or a list like 0,2,4.
    #[arg(long, value_parser = parse_views)]
    views: Option<Views>,
    /// Record elapsed seconds in metrics.csv (makes the log run-dependent).
    #[arg(long)]
    wall_time: bool,
    /// Continue the run stored in this last.ckpt instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "out", "objective", "batch_size", "lr", "seed", "views"])]
    resume: Option<PathBuf>,
    /// Epochs to add when resuming.
    #[arg(long, requires = "resume")]
    extra_epochs: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct EncoderArgs {
    /// Encoder checkpoint (best.ckpt or last.ckpt of a training run).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use an untrained encoder initialized from --init-seed.
    #[arg(long)]
    random_init: bool,
}

impl EncoderArgs {
    fn source(&self, init_seed: u64) -> EncoderSource {
        match &self.checkpoint {
            Some(p) => EncoderSource::Checkpoint(p.display().to_string()),
            None => EncoderSource::RandomInit(init_seed),
        }
    }
}

#[derive(Args, Debug)]
struct EvalAlignArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = 1)]
    init_seed: u64,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value = "all", value_parser = parse_views)]
    views: Views,
    /// Directory for alignment.csv, alignment.json and config.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalStageArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = 1)]
    init_seed: u64,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "seen", value_parser = parse_views)]
    views_train: Views,
    #[arg(long, default_value = "unseen", value_parser = parse_views)]
    views_test: Views,
    /// Control run: permute the training labels.
    #[arg(long)]
    shuffle_labels: bool,
    /// Probe config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    per_class_train: Option<usize>,
    #[arg(long)]
    per_class_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write stage.json and config.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// DDPG and environment settings of an RL run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RlConfig {
    ddpg: DdpgConfig,
    env: EnvConfig,
}

#[derive(Args, Debug)]
struct TrainRlArgs {
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = 1)]
    init_seed: u64,
    #[arg(long)]
    dataset: PathBuf,
    /// RL config JSON with `ddpg` and `env` sections; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalRlArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Evaluate a baseline on the policy's task instead of the policy.
    #[arg(long, value_parser = ["random", "oracle"])]
    baseline: Option<String>,
    /// Dataset override when the recorded path has moved.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Write the report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotExportArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trailing moving-average window; point i becomes the mean of the last
    /// `window` points up to and including i (fewer at the start).
    #[arg(long, default_value_t = 1)]
    window: usize,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse()
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse()
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse()
}

/// Camera indices given on the command line.
#[derive(Clone, Debug)]
struct Views(Vec<usize>);

/// `seen`, `unseen`, `all` or a comma-separated list of camera indices.
fn parse_views(s: &str) -> std::result::Result<Views, String> {
    let views = match s {
        "seen" => SEEN_VIEWS.to_vec(),
        "unseen" => UNSEEN_VIEWS.to_vec(),
        "all" => (0..NUM_CAMERAS).collect(),
        list => list
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad camera `{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    };
    if let Some(bad) = views.iter().find(|&&v| v >= NUM_CAMERAS) {
        return Err(format!("camera {bad} out of range (0..{NUM_CAMERAS})"));
    }
    Ok(Views(views))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Refuse a non-empty `out` unless `force`; with `force`, delete the listed
/// files and directories this command owns so no stale output survives.
fn prepare_out(out: &Path, force: bool, owned: &[&str]) -> Result<()> {
    let non_empty = std::fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(CliError::OutputExists(out.to_path_buf()));
        }
        for name in owned {
            let p = out.join(name);
            let removed = if p.is_dir() {
                std::fs::remove_dir_all(&p)
            } else if p.exists() {
                std::fs::remove_file(&p)
            } else {
                Ok(())
            };
            removed.map_err(|e| CliError::io(&p, e))?;
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    cfg.demos = a.demos.unwrap_or(cfg.demos);
    cfg.frames_per_demo = a.frames.unwrap_or(cfg.frames_per_demo);
    cfg.validate()?;
    prepare_out(&a.out, a.force, &["manifest.json", "frames", "labels", CONFIG_FILE])?;
    let manifest = generate_dataset(&a.out, a.seed, &cfg)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &serde_json::json!({"seed": a.seed, "generator": cfg}),
    )?;
    let s = &manifest.splits;
    println!("manifest hash: {}", manifest.content_hash);
    println!(
        "demos: {} (train {}, val {}, test {})",
        manifest.demo_count,
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    if let Some(ck) = &a.resume {
        let out = train::resume(ck, a.extra_epochs.unwrap_or(0), a.dataset.as_deref())?;
        return report_training(&out);
    }
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    cfg.objective = a.objective.unwrap_or(cfg.objective);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.adam.lr = a.lr.unwrap_or(cfg.adam.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if let Some(Views(v)) = a.views {
        cfg.views = v;
    }
    cfg.record_wall_time |= a.wall_time;
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let out = a.out.expect("clap requires --out without --resume");
    prepare_out(&out, a.force, &[LAST_CHECKPOINT, BEST_CHECKPOINT, METRICS_FILE, CONFIG_FILE])?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let outcome = train::train_on(&cfg, &dataset, &out)?;
    report_training(&outcome)
}

fn report_training(out: &train::TrainOutcome) -> Result<()> {
    let last = out.metrics.last().map(|m| m.train_loss).unwrap_or(f64::NAN);
    println!("epochs: {}  final loss: {last:.4}", out.metrics.last().map_or(0, |m| m.epoch));
    match (out.best_val, out.best_epoch) {
        (Some(v), Some(e)) => println!("best val alignment error: {:.2}% (epoch {e})", v * 100.0),
        _ => println!("best val alignment error: n/a (no validation epoch reached)"),
    }
    println!("last checkpoint: {}", out.last_checkpoint.display());
    Ok(())
}

fn eval_align(a: EvalAlignArgs) -> Result<()> {
    let source = a.encoder.source(a.init_seed);
    let dataset = Dataset::open(&a.dataset)?;
    let encoder = source.build()?;
    prepare_out(&a.out, a.force, &["alignment.csv", "alignment.json", CONFIG_FILE])?;
    let demos = dataset.split(a.split).to_vec();
    let report = alignment_suite(&encoder, &dataset, &demos, &a.views.0)?;
    let config = serde_json::json!({
        "encoder": source,
        "dataset": a.dataset,
        "split": a.split,
        "views": a.views.0,
    });
    write_alignment_report(&report, &a.out, &config)?;
    write_json(&a.out.join(CONFIG_FILE), &config)?;
    println!(
        "alignment error: {:.2}% over {} demos ({} ordered camera pairs each)",
        report.percent(),
        report.count,
        a.views.0.len() * (a.views.0.len() - 1)
    );
    Ok(())
}

fn eval_stage(a: EvalStageArgs) -> Result<()> {
    let source = a.encoder.source(a.init_seed);
    let mut cfg: ProbeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ProbeConfig::default(),
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.per_class_train = a.per_class_train.unwrap_or(cfg.per_class_train);
    cfg.per_class_test = a.per_class_test.unwrap_or(cfg.per_class_test);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.shuffle_labels |= a.shuffle_labels;
    let dataset = Dataset::open(&a.dataset)?;
    let encoder = source.build()?;
    if let Some(out) = &a.out {
        prepare_out(out, a.force, &["stage.json", CONFIG_FILE])?;
    }
    let report = stage_probe_eval(&encoder, &dataset, &cfg, &a.views_train.0, &a.views_test.0)?;
    if let Some(out) = &a.out {
        write_json(&out.join("stage.json"), &report)?;
        write_json(
            &out.join(CONFIG_FILE),
            &serde_json::json!({"encoder": source, "dataset": a.dataset, "probe": cfg}),
        )?;
    }
    println!(
        "stage accuracy: {:.2}% on {} test examples (cameras {:?}; probe trained on {:?}, train accuracy {:.2}%{})",
        report.accuracy * 100.0,
        report.n_test,
        report.views_test,
        report.views_train,
        report.train_accuracy * 100.0,
        if report.shuffled_labels { ", shuffled labels" } else { "" }
    );
    Ok(())
}

fn train_rl(a: TrainRlArgs) -> Result<()> {
    let source = a.encoder.source(a.init_seed);
    let mut cfg: RlConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RlConfig::default(),
    };
    cfg.env.stage = a.stage.unwrap_or(cfg.env.stage);
    cfg.ddpg.episodes = a.episodes.unwrap_or(cfg.ddpg.episodes);
    cfg.ddpg.seed = a.seed.unwrap_or(cfg.ddpg.seed);
    cfg.ddpg.validate()?;
    cfg.env.validate()?;
    let dataset = Dataset::open(&a.dataset)?;
    let encoder = source.build()?;
    prepare_out(&a.out, a.force, &[POLICY_FILE, EPISODES_FILE, CONFIG_FILE])?;

    let mut env = Env::from_dataset(cfg.env.clone(), &encoder, &dataset)?;
    let task = env.task.clone();
    write_json(
        &a.out.join(CONFIG_FILE),
        &serde_json::json!({
            "ddpg": cfg.ddpg,
            "env": cfg.env,
            "encoder": source,
            "dataset": a.dataset,
            "guide_demo": task.guide_demo,
            "success_threshold": task.threshold,
        }),
    )?;
    let mut recent = std::collections::VecDeque::new();
    let outcome = train_ddpg(&cfg.ddpg, &mut env, |row| {
        recent.push_back(row.success);
        if recent.len() > 100 {
            recent.pop_front();
        }
        if row.episode % 100 == 0 {
            let wins = recent.iter().filter(|&&s| s).count();
            log::info!(
                "episode {}: return {:.2}, success over last {}: {wins}",
                row.episode,
                row.accumulated_reward,
                recent.len()
            );
        }
    })?;
    write_episode_log(&a.out.join(EPISODES_FILE), &outcome.log)?;
    let meta = PolicyMetadata {
        kind: "ddpg".into(),
        ddpg: cfg.ddpg.clone(),
        env: cfg.env.clone(),
        task,
        encoder: source,
        dataset: a.dataset.display().to_string(),
    };
    save_policy(&a.out.join(POLICY_FILE), &outcome.agent, &meta)?;
    let tail = &outcome.log[outcome.log.len().saturating_sub(100)..];
    let wins = tail.iter().filter(|r| r.success).count();
    println!(
        "episodes: {}  training success over last {}: {:.2}%",
        outcome.log.len(),
        tail.len(),
        100.0 * wins as f64 / tail.len().max(1) as f64
    );
    println!("policy: {}", a.out.join(POLICY_FILE).display());
    Ok(())
}

fn eval_rl(a: EvalRlArgs) -> Result<()> {
    let (agent, meta) = load_policy(&a.policy)?;
    let dataset_path = a.dataset.clone().unwrap_or_else(|| PathBuf::from(&meta.dataset));
    let dataset = Dataset::open(&dataset_path)?;
    let encoder = meta.encoder.build()?;
    let camera = dataset.manifest.rig.cameras[meta.env.camera];
    let (name, policy) = match a.baseline.as_deref() {
        Some("random") => ("random", Policy::Random),
        Some("oracle") => ("oracle", Policy::Oracle),
        _ => ("policy", Policy::Agent(&agent)),
    };
    let task: &Task = &meta.task;
    let report = evaluate_policy(policy, &meta.env, task, &encoder, camera, a.episodes, a.seed)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        write_json(
            out,
            &serde_json::json!({
                "evaluated": name,
                "policy": a.policy,
                "stage": meta.env.stage,
                "seed": a.seed,
                "report": report,
            }),
        )?;
    }
    println!(
        "{name} success rate: {:.2}% over {} episodes (mean return {:.2})",
        report.success_rate * 100.0,
        report.episodes,
        report.mean_return
    );
    Ok(())
}

fn plot_export(a: PlotExportArgs) -> Result<()> {
    let written = plot::export(&a.metrics, &a.out, a.window)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::EvalAlign(a) => eval_align(a),
        Command::EvalStage(a) => eval_stage(a),
        Command::TrainRl(a) => train_rl(a),
        Command::EvalRl(a) => eval_rl(a),
        Command::PlotExport(a) => plot_export(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(1)
        }
    }
}
