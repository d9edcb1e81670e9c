//! Command-line driver. Every command works inside a run directory and prints
//! a one-line summary; failures print a JSON error object on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, read_csv, read_jsonl, write_csv, write_jsonl, MetricRow, PredictionRow, RunDir};
use crate::logs::{clicked_samples, synth_clicked_log, synth_creative_log, to_item_groups, ClickRecord, CreativeRecord};
use crate::numerics::Adam;
use crate::pipeline::{
    bootstrap, offline_metrics, policy_from_harvest, predict_log, run_metric_rows, run_pipeline, serve_checkpoints,
    ManifestEntry, RoundStats,
};
use crate::prompt::PromptModel;
use crate::reward::RewardModel;
use crate::rng::stream;
use crate::serving::{simulate_traffic, ServingPolicy};
use crate::world::{make_world, World};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ccycle", version, about = "Self-cycling creative generation experiments")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for all inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic marketplace.
    #[command(subcommand)]
    World(WorldCmd),
    /// Synthetic interaction logs.
    #[command(subcommand)]
    Log(LogCmd),
    /// Reward model training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Prompt model initialization.
    #[command(subcommand)]
    Init(InitCmd),
    /// The self-cycling loop.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Serving simulation.
    #[command(subcommand)]
    Serve(ServeCmd),
    /// Offline evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Plot-ready exports.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Debug, Subcommand)]
pub enum WorldCmd {
    /// Build the world and write world.json.
    Gen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogKind {
    Creative,
    Clicked,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum LogCmd {
    /// Write synthetic creative and/or clicked logs under logs/.
    Synth {
        #[arg(long, value_enum, default_value = "both")]
        kind: LogKind,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Train the reward model on a creative log and write predictions.csv.
    Reward(LogArg),
}

#[derive(Debug, Subcommand)]
pub enum InitCmd {
    /// Hard-label training of the prompt model on a clicked log.
    Prompt(LogArg),
}

#[derive(Debug, Args)]
pub struct LogArg {
    /// Input log (JSONL); defaults to the run directory's log, synthesized if absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Bootstrap all models, run every round, serve the checkpoints.
    Run,
}

#[derive(Debug, Subcommand)]
pub enum ServeCmd {
    /// Serve the retained creatives of a manifest (or the original images).
    Sim {
        /// Manifest to serve; defaults to manifests/final.jsonl.
        #[arg(long, conflicts_with = "baseline")]
        manifest: Option<PathBuf>,
        /// Serve each item's original image.
        #[arg(long)]
        baseline: bool,
        /// Output CSV; defaults to traffic_sim.csv in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Top-k CTR uplift and MSE of predictions against a creative log.
    Metrics {
        /// Creative log (JSONL) with observed clicks and impressions.
        #[arg(long)]
        log: PathBuf,
        /// Predictions CSV (item_id, creative_id, score); defaults to scoring
        /// with the run directory's reward checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Cut-offs for the uplift metric.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        k: Vec<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    /// Write rounds.csv and token_freq.csv from report.json and manifests.
    Export,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Json(_) | Error::Csv(_) | Error::UndefinedMetric(_) | Error::Io { .. } => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    serde_json::json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

/// Parses `argv` (program name first), executes, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            eprintln!("{}", error_json("usage", msg.trim(), EXIT_USAGE));
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
            code
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => {
            let mut cfg = RunConfig::default();
            if let Ok(s) = std::env::var(crate::config::SEED_ENV) {
                cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("RUN_SEED={s} is not an integer")))?;
            }
            Ok(cfg)
        }
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("config file not found: {}", p.display())));
            }
            RunConfig::load(p)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli.config.as_deref())?;
    let rd = RunDir::create(&cli.run_dir)?;
    rd.write_config(&cfg)?;
    match &cli.command {
        Command::World(WorldCmd::Gen) => {
            let world = make_world(&cfg.world, cfg.seed)?;
            rd.write_world(&world)?;
            Ok(format!(
                "world: {} items, {} groups, vocab {} -> {}",
                world.items.len(),
                world.user_groups.len(),
                world.vocab_size(),
                rd.world().display()
            ))
        }
        Command::Log(LogCmd::Synth { kind }) => {
            let world = world_for(&rd, &cfg)?;
            let mut parts = Vec::new();
            if matches!(kind, LogKind::Creative | LogKind::Both) {
                let log = synth_creative_log(&world, &cfg.logs, cfg.seed, stream::CREATIVE_LOG);
                write_jsonl(&rd.creative_log(), &log)?;
                parts.push(format!("{} creative records", log.len()));
            }
            if matches!(kind, LogKind::Clicked | LogKind::Both) {
                let log = clicked_log(&world, &cfg)?;
                write_jsonl(&rd.clicked_log(), &log)?;
                parts.push(format!("{} clicked records", log.len()));
            }
            Ok(format!("log synth: {}", parts.join(", ")))
        }
        Command::Train(TrainCmd::Reward(arg)) => {
            let world = world_for(&rd, &cfg)?;
            let records = creative_records(&rd, &cfg, &world, arg.log.as_deref())?;
            let mut reward = RewardModel::new(world.latent_dim(), &cfg.reward, cfg.seed)?;
            let loss = reward.train(&to_item_groups(&records)?, cfg.seed)?;
            rd.save_params("reward", &reward.params)?;
            let preds = predict_log(&reward, &records)?;
            write_csv(&rd.predictions(), &preds)?;
            Ok(format!("train reward: {} creatives, final loss {loss:.6}", records.len()))
        }
        Command::Init(InitCmd::Prompt(arg)) => {
            let world = world_for(&rd, &cfg)?;
            let records: Vec<ClickRecord> = match &arg.log {
                Some(p) => read_jsonl(p)?,
                None if rd.clicked_log().is_file() => read_jsonl(&rd.clicked_log())?,
                None => {
                    let log = clicked_log(&world, &cfg)?;
                    write_jsonl(&rd.clicked_log(), &log)?;
                    log
                }
            };
            if records.is_empty() {
                return Err(Error::Data("clicked log has no records".into()));
            }
            let mut prompt = PromptModel::new(&world, &cfg.prompt, cfg.seed)?;
            let loss = prompt.fit(
                &clicked_samples(&records),
                &mut Adam::new(cfg.prompt.lr),
                cfg.pipeline.init_prompt_epochs,
                0.0,
                cfg.seed,
            )?;
            rd.save_params("prompt_init", &prompt.params)?;
            Ok(format!("init prompt: {} records, final loss {loss:.6}", records.len()))
        }
        Command::Pipeline(PipelineCmd::Run) => pipeline_run(&rd, &cfg),
        Command::Serve(ServeCmd::Sim { manifest, baseline, out }) => {
            let world = world_for(&rd, &cfg)?;
            let per_cell = crate::pipeline::impressions_per_cell(&world, cfg.serving.impressions);
            let (policy, label) = if *baseline {
                (ServingPolicy::baseline(&world), "baseline".to_string())
            } else {
                let path = manifest.clone().unwrap_or_else(|| rd.manifest("final"));
                let entries: Vec<ManifestEntry> = read_jsonl(&path)?;
                if !entries.iter().any(|e| e.retained) {
                    return Err(Error::Data(format!("{}: no retained creatives", path.display())));
                }
                (policy_from_harvest(&world, &entries, cfg.serving.epsilon)?, path.display().to_string())
            };
            let report = simulate_traffic(&world, &policy, per_cell, cfg.seed)?;
            let out = out.clone().unwrap_or_else(|| rd.traffic("sim"));
            report.write_csv(&out)?;
            Ok(format!(
                "serve sim ({label}): {} impressions, CTR {:.6}, oracle CTR {:.6}, revenue {:.3}",
                report.impressions(),
                report.ctr(),
                report.oracle_ctr(),
                report.revenue()
            ))
        }
        Command::Eval(EvalCmd::Metrics { log, predictions, k }) => {
            let records: Vec<CreativeRecord> = read_jsonl(log)?;
            if records.is_empty() {
                return Err(Error::Data(format!("{}: no records", log.display())));
            }
            let preds: Vec<PredictionRow> = match predictions {
                Some(p) => read_csv(p)?,
                None => {
                    let world = world_for(&rd, &cfg)?;
                    let params = rd.load_params("reward")?;
                    predict_log(&RewardModel::from_params(world.latent_dim(), &cfg.reward, params)?, &records)?
                }
            };
            let items = io::join_predictions(&records, &preds)?;
            let rows = offline_metrics(&items, k, cfg.seed)?;
            write_csv(&rd.root.join("eval_metrics.csv"), &rows)?;
            Ok(rows.iter().map(format_metric).collect::<Vec<_>>().join(" "))
        }
        Command::Report(ReportCmd::Export) => {
            let report = rd.read_report()?;
            let rows: Vec<RoundRow> = report.rounds.iter().map(RoundRow::from).collect();
            write_csv(&rd.root.join("rounds.csv"), &rows)?;
            let entries: Vec<ManifestEntry> = read_jsonl(&rd.manifest("final"))?;
            let freq = token_frequencies(&entries);
            write_csv(&rd.root.join("token_freq.csv"), &freq)?;
            Ok(format!("report export: {} rounds, {} prompt tokens", rows.len(), freq.len()))
        }
    }
}

fn format_metric(r: &MetricRow) -> String {
    match r.k {
        Some(k) => format!("{}@{k}={:.6}", r.metric, r.value),
        None => format!("{}={:.6}", r.metric, r.value),
    }
}

fn world_for(rd: &RunDir, cfg: &RunConfig) -> Result<World> {
    if rd.world().is_file() {
        rd.load_world()
    } else {
        let world = make_world(&cfg.world, cfg.seed)?;
        rd.write_world(&world)?;
        Ok(world)
    }
}

fn clicked_log(world: &World, cfg: &RunConfig) -> Result<Vec<ClickRecord>> {
    synth_clicked_log(world, &cfg.logs, cfg.prompt.n_devices, cfg.prompt.n_time_bands, cfg.seed)
}

fn creative_records(rd: &RunDir, cfg: &RunConfig, world: &World, path: Option<&Path>) -> Result<Vec<CreativeRecord>> {
    let records: Vec<CreativeRecord> = match path {
        Some(p) => read_jsonl(p)?,
        None if rd.creative_log().is_file() => read_jsonl(&rd.creative_log())?,
        None => {
            let log = synth_creative_log(world, &cfg.logs, cfg.seed, stream::CREATIVE_LOG);
            write_jsonl(&rd.creative_log(), &log)?;
            log
        }
    };
    if records.is_empty() {
        return Err(Error::Data("creative log has no records".into()));
    }
    Ok(records)
}

fn pipeline_run(rd: &RunDir, cfg: &RunConfig) -> Result<String> {
    let world = make_world(&cfg.world, cfg.seed)?;
    rd.write_world(&world)?;
    let models = bootstrap(&world, cfg)?;
    rd.save_params("reward", &models.reward.params)?;
    let mut outcome = run_pipeline(&world, models, &cfg.pipeline, cfg.seed)?;
    outcome.report.config_hash = cfg.hash()?;
    for (i, m) in outcome.manifests.iter().enumerate() {
        write_jsonl(&rd.round_manifest(i + 1), m)?;
    }
    rd.write_manifest("final", &outcome.final_harvest)?;
    for ck in &outcome.checkpoints {
        rd.save_params(&format!("prompt_{}", ck.label), &ck.prompt)?;
        rd.save_params(&format!("lora_{}", ck.label), &ck.lora)?;
    }
    let (summary, traffic) = serve_checkpoints(&world, &outcome, cfg)?;
    for (label, t) in &traffic {
        t.write_csv(&rd.traffic(label))?;
    }
    let rows = run_metric_rows(&world, &outcome, &summary, cfg)?;
    write_csv(&rd.metrics(), &rows)?;
    outcome.report.serving = Some(summary.clone());
    rd.write_report(&outcome.report)?;
    let o = &summary.oracle_ctr;
    let get = |k: &str| o.get(k).copied().unwrap_or(f64::NAN);
    let status = &outcome.report.status;
    let line = format!(
        "pipeline run: {} rounds {status}, oracle CTR baseline {:.4} initial {:.4} final {:.4}",
        outcome.report.last_good_round,
        get("baseline"),
        get("initial"),
        get("final")
    );
    match &outcome.report.error {
        Some(e) => Err(Error::Contract(format!("{line}; stopped: {e}"))),
        None => Ok(line),
    }
}

/// One row of the per-round series.
#[derive(Debug, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub phase: String,
    pub mean_reward: f64,
    pub mean_retained_reward: f64,
    pub mean_oracle_ctr: f64,
    pub mean_retained_oracle_ctr: f64,
    pub train_loss: Option<f64>,
}

impl From<&RoundStats> for RoundRow {
    fn from(s: &RoundStats) -> Self {
        Self {
            round: s.round,
            phase: match s.phase {
                crate::pipeline::Phase::TrainPrompt => "train_prompt".into(),
                crate::pipeline::Phase::TrainLora => "train_lora".into(),
            },
            mean_reward: s.mean_reward,
            mean_retained_reward: s.mean_retained_reward,
            mean_oracle_ctr: s.mean_oracle_ctr,
            mean_retained_oracle_ctr: s.mean_retained_oracle_ctr,
            train_loss: s.train_loss,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TokenCount {
    pub token: usize,
    pub count: usize,
}

/// Occurrences of each token in the prompts of distinct cells, most frequent
/// first.
pub fn token_frequencies(entries: &[ManifestEntry]) -> Vec<TokenCount> {
    let mut seen = std::collections::BTreeSet::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in entries {
        if seen.insert((e.item_id, e.group_id)) {
            for &t in &e.prompt_tokens {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut out: Vec<TokenCount> = counts.into_iter().map(|(token, count)| TokenCount { token, count }).collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then(a.token.cmp(&b.token)));
    out
}
