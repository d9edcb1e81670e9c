//! The self-cycling loop: per round, choose prompts, generate, score with the
//! frozen reward model, split into retained (G) and rejected (B) creatives,
//! then train either the prompt model or the LoRA adapters.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{DenoiseExample, DiffusionModel};
use crate::error::{Error, Result};
use crate::io::{join_predictions, MetricRow, PredictionRow};
use crate::logs::{clicked_samples, synth_clicked_log, synth_creative_log, to_item_groups, CreativeRecord};
use crate::metrics::{ctr_uplift_k, mse_metric, EvalItem};
use crate::numerics::{Adam, ParamSet};
use crate::prompt::{min_max_normalize, PromptModel, PromptSample, Query};
use crate::reward::{extract_features, select_topk, RewardModel};
use crate::rng::{derive_seed, rng_for, stream};
use crate::serving::{simulate_traffic, Candidate, ServingPolicy, TrafficReport};
use crate::world::World;

pub const REPORT_FORMAT: &str = "ccycle-report";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rounds: usize,
    /// Prompt tokens per generation (`p`).
    pub prompt_tokens: usize,
    /// Creatives generated per (item, group) cell (`q`).
    pub per_cell: usize,
    /// Creatives retained per cell (`k`).
    pub keep: usize,
    /// Per-group prompts; when off, user features are masked and each item
    /// has a single cell.
    pub personalize: bool,
    /// Epochs of the hard-label prompt-model initialization.
    pub init_prompt_epochs: usize,
    /// Share of each prompt-training turn's sample weight carried by the
    /// historical clicked data; 0 trains on G and B alone.
    pub click_replay: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { rounds: 10, prompt_tokens: 4, per_cell: 10, keep: 5, personalize: true, init_prompt_epochs: 10, click_replay: 0.5 }
    }
}

impl PipelineConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("pipeline.rounds must be at least 1".into()));
        }
        if self.keep == 0 || self.keep >= self.per_cell {
            return Err(Error::Config(format!("need 1 <= keep < per_cell, got {} / {}", self.keep, self.per_cell)));
        }
        if self.prompt_tokens == 0 || self.prompt_tokens > vocab_size {
            return Err(Error::Config(format!("prompt_tokens {} outside 1..={vocab_size}", self.prompt_tokens)));
        }
        if !(0.0..1.0).contains(&self.click_replay) {
            return Err(Error::Config(format!("click_replay {} outside [0, 1)", self.click_replay)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TrainPrompt,
    TrainLora,
}

/// Even rounds train the prompt model, odd rounds the adapters.
pub fn alternate_gate(round: usize) -> Result<Phase> {
    match round {
        0 => Err(Error::Contract("rounds are numbered from 1".into())),
        r if r % 2 == 0 => Ok(Phase::TrainPrompt),
        _ => Ok(Phase::TrainLora),
    }
}

#[derive(Clone, Debug)]
pub struct Models {
    pub prompt: PromptModel,
    pub diffusion: DiffusionModel,
    pub reward: RewardModel,
    /// Hard-labelled clicked-log samples the prompt model started from.
    pub clicked: Vec<PromptSample>,
}

/// One generated creative with everything needed to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub round: usize,
    pub item_id: usize,
    /// `None` when user features are masked.
    pub group_id: Option<usize>,
    pub slot: usize,
    pub seed: u64,
    pub prompt_tokens: Vec<usize>,
    pub caption_tokens: Vec<usize>,
    pub reward_score: f64,
    pub retained: bool,
    pub latent: Vec<f64>,
}

fn cells(world: &World, personalize: bool) -> Vec<(usize, Option<usize>)> {
    let groups: Vec<Option<usize>> =
        if personalize { world.user_groups.iter().map(|g| Some(g.id)).collect() } else { vec![None] };
    world.items.iter().flat_map(|it| groups.iter().map(move |&g| (it.id, g))).collect()
}

/// Seed of one generated creative.
pub fn generation_seed(seed: u64, round: usize, item: usize, group: Option<usize>, slot: usize) -> u64 {
    let g = group.map_or(u64::MAX, |g| g as u64);
    derive_seed(seed, &[stream::GENERATE, round as u64, item as u64, g, slot as u64])
}

/// Generates and scores `per_cell` creatives for every cell with the current
/// models, marking the top `keep` of each cell as retained. Pure in `models`.
pub fn harvest(world: &World, models: &Models, cfg: &PipelineConfig, steps: usize, seed: u64, round: usize) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::with_capacity(world.items.len() * cfg.per_cell);
    for (item_id, group) in cells(world, cfg.personalize) {
        let item = world.item(item_id)?;
        let query = Query::for_generation(world, item_id, group)?;
        let prompt = models.prompt.select_top_p(&query, cfg.prompt_tokens)?;
        let seeds: Vec<u64> = (0..cfg.per_cell).map(|s| generation_seed(seed, round, item_id, group, s)).collect();
        let latents = models.diffusion.generate_batch(world, item, &prompt, &seeds, steps)?;
        let captions: Vec<Vec<usize>> = latents.iter().map(|z| world.caption(z)).collect();
        let feats: Vec<_> =
            latents.iter().zip(&captions).map(|(z, c)| extract_features(&item.title_tokens, c, z)).collect();
        let scores = models.reward.predict(&feats.iter().collect::<Vec<_>>())?;
        let scored: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        let (keep, _) = select_topk(&scored, cfg.keep)?;
        let kept: BTreeSet<usize> = keep.iter().map(|x| x.0).collect();
        for (slot, ((latent, caption), score)) in latents.into_iter().zip(captions).zip(scores).enumerate() {
            out.push(ManifestEntry {
                round,
                item_id,
                group_id: group,
                slot,
                seed: seeds[slot],
                prompt_tokens: prompt.clone(),
                caption_tokens: caption,
                reward_score: score,
                retained: kept.contains(&slot),
                latent,
            });
        }
    }
    Ok(out)
}

/// Ground-truth CTR of a manifest entry for its cell (all groups when masked).
pub fn entry_oracle_ctr(world: &World, e: &ManifestEntry) -> Result<f64> {
    let item = world.item(e.item_id)?;
    Ok(match e.group_id {
        Some(g) => world.true_ctr(world.group(g)?, item, &e.latent),
        None => world.mean_true_ctr(item, &e.latent),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub mean_retained_reward: f64,
    pub mean_oracle_ctr: f64,
    pub mean_retained_oracle_ctr: f64,
    pub retained: usize,
    pub rejected: usize,
    pub train_loss: Option<f64>,
    pub prompt_digest: String,
    pub lora_digest: String,
    pub reward_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub label: String,
    pub round: usize,
    pub prompt_digest: String,
    pub lora_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServingSummary {
    pub impressions_per_cell: u64,
    /// Label → impression-weighted expected CTR.
    pub oracle_ctr: BTreeMap<String, f64>,
    /// Label → sampled CTR.
    pub ctr: BTreeMap<String, f64>,
    pub revenue: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub last_good_round: usize,
    pub error: Option<String>,
    pub initial_prompt_digest: String,
    pub initial_lora_digest: String,
    pub reward_digest: String,
    pub rounds: Vec<RoundStats>,
    pub checkpoints: Vec<CheckpointInfo>,
    pub serving: Option<ServingSummary>,
}

/// Model parameters saved at one of the reporting rounds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub label: String,
    pub round: usize,
    pub prompt: ParamSet,
    pub lora: ParamSet,
}

/// Mutable loop state carried between rounds.
pub struct RoundState {
    pub round: usize,
    pub retained: Vec<ManifestEntry>,
    pub rejected: Vec<ManifestEntry>,
    pub manifest: Vec<ManifestEntry>,
    prompt_adam: Adam,
    lora_adam: Adam,
}

impl RoundState {
    pub fn new(models: &Models) -> Self {
        Self {
            round: 0,
            retained: Vec::new(),
            rejected: Vec::new(),
            manifest: Vec::new(),
            prompt_adam: Adam::new(models.prompt.config.lr),
            lora_adam: Adam::new(models.diffusion.config.lora_lr),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn prompt_samples(world: &World, entries: &[ManifestEntry]) -> Result<(Vec<PromptSample>, Vec<PromptSample>)> {
    let mut by_cell: BTreeMap<(usize, Option<usize>), Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        by_cell.entry((e.item_id, e.group_id)).or_default().push(e);
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for ((item, group), cell) in by_cell {
        let query = Query::for_generation(world, item, group)?;
        let soft = min_max_normalize(&cell.iter().map(|e| e.reward_score).collect::<Vec<_>>());
        for (e, s) in cell.into_iter().zip(soft) {
            let sample = PromptSample {
                query,
                tokens: e.caption_tokens.clone(),
                label: if e.retained { 1.0 } else { 0.0 },
                soft_label: Some(s),
                weight: 1.0,
            };
            if e.retained { pos.push(sample) } else { neg.push(sample) }
        }
    }
    Ok((pos, neg))
}

/// Clicked samples rescaled to carry `click_replay` of the turn's total
/// weight next to `n_generated` unit-weight samples. User fields are masked
/// when the run is not personalized.
fn replay_samples(world: &World, clicked: &[PromptSample], cfg: &PipelineConfig, n_generated: usize) -> Vec<PromptSample> {
    let total: f64 = clicked.iter().map(|s| s.weight).sum();
    if cfg.click_replay <= 0.0 || total <= 0.0 {
        return Vec::new();
    }
    let scale = cfg.click_replay / (1.0 - cfg.click_replay) * n_generated as f64 / total;
    clicked
        .iter()
        .map(|s| PromptSample {
            query: if cfg.personalize { s.query } else { s.query.masked(world) },
            weight: s.weight * scale,
            ..s.clone()
        })
        .collect()
}

fn train_lora(world: &World, diffusion: &mut DiffusionModel, adam: &mut Adam, retained: &[ManifestEntry], seed: u64, round: usize) -> Result<Option<f64>> {
    let examples: Vec<DenoiseExample> = retained
        .iter()
        .map(|e| DenoiseExample { item_id: e.item_id, latent: e.latent.clone(), tokens: e.caption_tokens.clone() })
        .collect();
    if examples.is_empty() {
        return diffusion.lora_train_step(world, &[], adam, &mut rng_for(seed, &[]));
    }
    let mut rng = rng_for(seed, &[stream::LORA_TRAIN, round as u64]);
    let (steps, bs) = (diffusion.config.lora_steps.max(1), diffusion.config.lora_batch.max(1));
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<DenoiseExample> =
            (0..bs.min(examples.len())).map(|_| examples[rng.random_range(0..examples.len())].clone()).collect();
        if let Some(l) = diffusion.lora_train_step(world, &batch, adam, &mut rng)? {
            losses.push(l);
        }
    }
    Ok(Some(mean(losses.into_iter())))
}

/// One round: clear G and B, harvest every cell, then train the model picked
/// by [`alternate_gate`]. Models and state change only if the whole round
/// succeeds.
pub fn run_round(state: &mut RoundState, models: &mut Models, world: &World, cfg: &PipelineConfig, seed: u64) -> Result<RoundStats> {
    let round = state.round + 1;
    let phase = alternate_gate(round)?;
    let steps = models.diffusion.config.sample_steps;
    let manifest = harvest(world, models, cfg, steps, seed, round)?;
    let (retained, rejected): (Vec<ManifestEntry>, Vec<ManifestEntry>) =
        manifest.iter().cloned().partition(|e| e.retained);

    let mut oracle = Vec::with_capacity(manifest.len());
    for e in &manifest {
        oracle.push(entry_oracle_ctr(world, e)?);
    }
    let train_seed = derive_seed(seed, &[round as u64]);
    let (loss, prompt, diffusion, prompt_adam, lora_adam) = match phase {
        Phase::TrainPrompt => {
            let (pos, neg) = prompt_samples(world, &manifest)?;
            let history = replay_samples(world, &models.clicked, cfg, pos.len() + neg.len());
            let mut p = models.prompt.clone();
            let mut adam = state.prompt_adam.clone();
            let loss = p.train_prompt(&pos, &neg, &history, &mut adam, train_seed)?;
            (loss, Some(p), None, Some(adam), None)
        }
        Phase::TrainLora => {
            let mut d = models.diffusion.clone();
            let mut adam = state.lora_adam.clone();
            let loss = train_lora(world, &mut d, &mut adam, &retained, train_seed, round)?;
            (loss, None, Some(d), None, Some(adam))
        }
    };
    // commit
    if let Some(p) = prompt {
        models.prompt = p;
    }
    if let Some(d) = diffusion {
        models.diffusion = d;
    }
    if let Some(a) = prompt_adam {
        state.prompt_adam = a;
    }
    if let Some(a) = lora_adam {
        state.lora_adam = a;
    }
    let stats = RoundStats {
        round,
        phase,
        mean_reward: mean(manifest.iter().map(|e| e.reward_score)),
        mean_retained_reward: mean(retained.iter().map(|e| e.reward_score)),
        mean_oracle_ctr: mean(oracle.iter().copied()),
        mean_retained_oracle_ctr: mean(manifest.iter().zip(&oracle).filter(|(e, _)| e.retained).map(|(_, &c)| c)),
        retained: retained.len(),
        rejected: rejected.len(),
        train_loss: loss,
        prompt_digest: models.prompt.params.digest(),
        lora_digest: models.diffusion.lora_params().digest(),
        reward_digest: models.reward.params.digest(),
    };
    state.round = round;
    state.retained = retained;
    state.rejected = rejected;
    state.manifest = manifest;
    Ok(stats)
}

/// Everything a pipeline run produces.
pub struct PipelineOutcome {
    pub report: RunReport,
    pub models: Models,
    pub checkpoints: Vec<Checkpoint>,
    /// Manifest of every completed round, in order.
    pub manifests: Vec<Vec<ManifestEntry>>,
    /// Creatives generated with the final models (round `N + 1` seeds).
    pub final_harvest: Vec<ManifestEntry>,
}

impl PipelineOutcome {
    /// Creatives generated by the models saved at checkpoint `round`.
    pub fn snapshot(&self, round: usize) -> Option<&[ManifestEntry]> {
        if round < self.manifests.len() {
            Some(&self.manifests[round])
        } else if round == self.report.last_good_round {
            Some(&self.final_harvest)
        } else {
            None
        }
    }
}

fn checkpoint_label(round: usize, n: usize) -> Option<&'static str> {
    if round == 0 {
        Some("initial")
    } else if round == n {
        Some("final")
    } else if round == n / 2 {
        Some("middle")
    } else {
        None
    }
}

/// Runs `cfg.rounds` rounds from `models`. A failing round stops the run; the
/// report is then marked failed and the returned models are those of the
/// last good round.
pub fn run_pipeline(world: &World, mut models: Models, cfg: &PipelineConfig, seed: u64) -> Result<PipelineOutcome> {
    cfg.validate(world.vocab_size())?;
    let mut state = RoundState::new(&models);
    let mut report = RunReport {
        format: REPORT_FORMAT.into(),
        version: 1,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config_hash: String::new(),
        status: "ok".into(),
        last_good_round: 0,
        error: None,
        initial_prompt_digest: models.prompt.params.digest(),
        initial_lora_digest: models.diffusion.lora_params().digest(),
        reward_digest: models.reward.params.digest(),
        rounds: Vec::new(),
        checkpoints: Vec::new(),
        serving: None,
    };
    let mut checkpoints = Vec::new();
    let mut save = |models: &Models, round: usize, report: &mut RunReport| {
        if let Some(label) = checkpoint_label(round, cfg.rounds) {
            let (prompt, lora) = (models.prompt.params.clone(), models.diffusion.lora_params());
            report.checkpoints.push(CheckpointInfo {
                label: label.into(),
                round,
                prompt_digest: prompt.digest(),
                lora_digest: lora.digest(),
            });
            checkpoints.push(Checkpoint { label: label.into(), round, prompt, lora });
        }
    };
    save(&models, 0, &mut report);
    let mut manifests = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        match run_round(&mut state, &mut models, world, cfg, seed) {
            Ok(stats) => {
                info!(
                    "round {}: {:?}, mean reward {:.4}, retained oracle CTR {:.4}",
                    stats.round, stats.phase, stats.mean_reward, stats.mean_retained_oracle_ctr
                );
                report.rounds.push(stats);
                report.last_good_round = state.round;
                manifests.push(std::mem::take(&mut state.manifest));
                save(&models, state.round, &mut report);
            }
            Err(e) => {
                report.status = "failed".into();
                report.error = Some(e.to_string());
                break;
            }
        }
    }
    let steps = models.diffusion.config.sample_steps;
    let final_harvest = harvest(world, &models, cfg, steps, seed, report.last_good_round + 1)?;
    Ok(PipelineOutcome { report, models, checkpoints, manifests, final_harvest })
}

/// Round-0 models: reward model trained on a synthetic creative log, prompt
/// model initialized on a synthetic clicked log, generator pretrained on
/// natural images with zero adapters.
pub fn bootstrap(world: &World, cfg: &RunConfig) -> Result<Models> {
    let seed = cfg.seed;
    let log = synth_creative_log(world, &cfg.logs, seed, stream::CREATIVE_LOG);
    let mut reward = RewardModel::new(world.latent_dim(), &cfg.reward, seed)?;
    let loss = reward.train(&to_item_groups(&log)?, seed)?;
    info!("reward model trained, final loss {loss:.5}");

    let clicked = synth_clicked_log(world, &cfg.logs, cfg.prompt.n_devices, cfg.prompt.n_time_bands, seed)?;
    let mut prompt = PromptModel::new(world, &cfg.prompt, seed)?;
    let clicked = clicked_samples(&clicked);
    let loss = prompt.fit(&clicked, &mut Adam::new(cfg.prompt.lr), cfg.pipeline.init_prompt_epochs, 0.0, seed)?;
    info!("prompt model initialized, final loss {loss:.5}");

    let mut diffusion = DiffusionModel::new(world, &cfg.diffusion, seed)?;
    let loss = diffusion.pretrain(world, seed)?;
    info!("generator pretrained, final loss {loss:.5}");
    Ok(Models { prompt, diffusion, reward, clicked })
}

/// Epsilon-greedy policy over the retained creatives of a harvest. Masked
/// (group-less) cells serve the same candidates to every group.
pub fn policy_from_harvest(world: &World, entries: &[ManifestEntry], epsilon: f64) -> Result<ServingPolicy> {
    let mut per_cell: BTreeMap<(usize, usize), Vec<Candidate>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.retained) {
        let groups: Vec<usize> = match e.group_id {
            Some(g) => vec![g],
            None => world.user_groups.iter().map(|g| g.id).collect(),
        };
        for g in groups {
            per_cell.entry((e.item_id, g)).or_default().push(Candidate {
                creative_id: e.slot,
                latent: e.latent.clone(),
                score: e.reward_score,
            });
        }
    }
    let mut policy = ServingPolicy::new(epsilon)?;
    for ((item, group), c) in per_cell {
        policy.insert(item, group, c)?;
    }
    Ok(policy)
}

pub fn impressions_per_cell(world: &World, total: u64) -> u64 {
    (total / (world.items.len() * world.user_groups.len()) as u64).max(1)
}

/// Serves the baseline (original images) and every checkpoint snapshot.
pub fn serve_checkpoints(world: &World, outcome: &PipelineOutcome, cfg: &RunConfig) -> Result<(ServingSummary, BTreeMap<String, TrafficReport>)> {
    let per_cell = impressions_per_cell(world, cfg.serving.impressions);
    let mut reports = BTreeMap::new();
    reports.insert("baseline".to_string(), simulate_traffic(world, &ServingPolicy::baseline(world), per_cell, cfg.seed)?);
    for ck in &outcome.checkpoints {
        let snap = outcome
            .snapshot(ck.round)
            .ok_or_else(|| Error::Contract(format!("no creatives for checkpoint {}", ck.label)))?;
        let policy = policy_from_harvest(world, snap, cfg.serving.epsilon)?;
        reports.insert(ck.label.clone(), simulate_traffic(world, &policy, per_cell, cfg.seed)?);
    }
    let summary = ServingSummary {
        impressions_per_cell: per_cell,
        oracle_ctr: reports.iter().map(|(k, r)| (k.clone(), r.oracle_ctr())).collect(),
        ctr: reports.iter().map(|(k, r)| (k.clone(), r.ctr())).collect(),
        revenue: reports.iter().map(|(k, r)| (k.clone(), r.revenue())).collect(),
    };
    Ok((summary, reports))
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets give 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Mean over items and group pairs of the Jaccard overlap of the prompts
/// chosen for different groups.
pub fn mean_group_jaccard(entries: &[ManifestEntry]) -> f64 {
    let mut prompts: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for e in entries {
        if let Some(g) = e.group_id {
            prompts.entry(e.item_id).or_default().entry(g).or_insert_with(|| e.prompt_tokens.clone());
        }
    }
    let mut vals = Vec::new();
    for per_group in prompts.values() {
        let ps: Vec<&Vec<usize>> = per_group.values().collect();
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                vals.push(jaccard(ps[i], ps[j]));
            }
        }
    }
    mean(vals.into_iter())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub masked_oracle_ctr: f64,
    pub individual_oracle_ctr: f64,
    pub masked_retained_per_item: usize,
    pub individual_retained_per_item: usize,
    pub group_prompt_jaccard: f64,
}

/// Runs the loop with user features masked and with per-group prompts from
/// the same round-0 models, then serves both final harvests.
pub fn personalization_sweep(world: &World, cfg: &RunConfig) -> Result<SweepReport> {
    if world.user_groups.len() < 2 {
        return Err(Error::Config("personalization needs at least two user groups".into()));
    }
    let models = bootstrap(world, cfg)?;
    let per_cell = impressions_per_cell(world, cfg.serving.impressions);
    let serve = |personalize: bool| -> Result<(f64, usize, Vec<ManifestEntry>)> {
        let pc = PipelineConfig { personalize, ..cfg.pipeline.clone() };
        let out = run_pipeline(world, models.clone(), &pc, cfg.seed)?;
        if let Some(e) = &out.report.error {
            return Err(Error::Contract(format!("sweep run failed: {e}")));
        }
        let policy = policy_from_harvest(world, &out.final_harvest, cfg.serving.epsilon)?;
        let report = simulate_traffic(world, &policy, per_cell, cfg.seed)?;
        let per_item = out.final_harvest.iter().filter(|e| e.retained && e.item_id == 0).count();
        Ok((report.oracle_ctr(), per_item, out.final_harvest))
    };
    let (masked, masked_k, _) = serve(false)?;
    let (individual, individual_k, entries) = serve(true)?;
    Ok(SweepReport {
        masked_oracle_ctr: masked,
        individual_oracle_ctr: individual,
        masked_retained_per_item: masked_k,
        individual_retained_per_item: individual_k,
        group_prompt_jaccard: mean_group_jaccard(&entries),
    })
}

/// Scores every creative of `records` with the reward model.
pub fn predict_log(reward: &RewardModel, records: &[CreativeRecord]) -> Result<Vec<PredictionRow>> {
    let feats: Vec<_> =
        records.iter().map(|r| extract_features(&r.title_tokens, &r.caption_tokens, &r.image_feat)).collect();
    let scores = reward.predict(&feats.iter().collect::<Vec<_>>())?;
    Ok(records
        .iter()
        .zip(scores)
        .map(|(r, score)| PredictionRow { item_id: r.item_id, creative_id: r.creative_id, score })
        .collect())
}

/// Predictions that rank by the ground-truth CTR averaged over groups.
pub fn oracle_predictions(world: &World, records: &[CreativeRecord]) -> Result<Vec<PredictionRow>> {
    records
        .iter()
        .map(|r| {
            let item = world.item(r.item_id)?;
            Ok(PredictionRow { item_id: r.item_id, creative_id: r.creative_id, score: world.mean_true_ctr(item, &r.image_feat) })
        })
        .collect()
}

/// Top-k uplift for each `k` plus the MSE of the scores.
pub fn offline_metrics(items: &[EvalItem], ks: &[usize], seed: u64) -> Result<Vec<MetricRow>> {
    let n_creatives = items.iter().map(|i| i.creatives.len()).sum();
    let row = |metric: &str, k: Option<usize>, value: f64| MetricRow {
        metric: metric.into(),
        k,
        value,
        n_items: items.len(),
        n_creatives,
        seed,
    };
    let mut out = Vec::with_capacity(ks.len() + 1);
    for &k in ks {
        out.push(row("ctr_uplift", Some(k), ctr_uplift_k(items, k)?));
    }
    out.push(row("mse", None, mse_metric(items)?));
    Ok(out)
}

/// Reward model and oracle ranker evaluated on a log drawn from the
/// held-out stream.
pub fn holdout_metrics(world: &World, reward: &RewardModel, cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let log = synth_creative_log(world, &cfg.logs, cfg.seed, stream::HOLDOUT);
    let ks: Vec<usize> = (1..=3).filter(|&k| k <= cfg.logs.creatives_per_item).collect();
    let mut rows = offline_metrics(&join_predictions(&log, &predict_log(reward, &log)?)?, &ks, cfg.seed)?;
    for mut r in offline_metrics(&join_predictions(&log, &oracle_predictions(world, &log)?)?, &ks, cfg.seed)? {
        r.metric = format!("oracle_{}", r.metric);
        rows.push(r);
    }
    Ok(rows)
}

/// Metric rows for a finished run: holdout ranking quality, the self-cycling
/// series and the serving comparison.
pub fn run_metric_rows(world: &World, outcome: &PipelineOutcome, summary: &ServingSummary, cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let mut rows = holdout_metrics(world, &outcome.models.reward, cfg)?;
    let n_items = world.items.len();
    for s in &outcome.report.rounds {
        let n = s.retained + s.rejected;
        for (metric, value) in [
            ("round_mean_reward", s.mean_reward),
            ("round_mean_oracle_ctr", s.mean_oracle_ctr),
            ("round_retained_oracle_ctr", s.mean_retained_oracle_ctr),
        ] {
            rows.push(MetricRow { metric: metric.into(), k: Some(s.round), value, n_items, n_creatives: n, seed: cfg.seed });
        }
    }
    let cells = (n_items * world.user_groups.len()) as u64;
    for (label, v) in &summary.oracle_ctr {
        rows.push(MetricRow {
            metric: format!("serve_oracle_ctr_{label}"),
            k: None,
            value: *v,
            n_items,
            n_creatives: (summary.impressions_per_cell * cells) as usize,
            seed: cfg.seed,
        });
    }
    for (label, v) in &summary.revenue {
        rows.push(MetricRow {
            metric: format!("serve_revenue_{label}"),
            k: None,
            value: *v,
            n_items,
            n_creatives: (summary.impressions_per_cell * cells) as usize,
            seed: cfg.seed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_world, WorldConfig};

    fn tiny() -> (World, RunConfig) {
        let mut cfg = RunConfig::default();
        cfg.world.n_items = 4;
        cfg.logs.creatives_per_item = 4;
        cfg.logs.impressions_per_creative = 1000;
        cfg.logs.clicked_creatives_per_cell = 3;
        cfg.reward.epochs = 2;
        cfg.pipeline.init_prompt_epochs = 1;
        cfg.diffusion.pretrain_steps = 20;
        cfg.diffusion.lora_steps = 3;
        cfg.pipeline.rounds = 4;
        let world = make_world(&cfg.world, cfg.seed).unwrap();
        (world, cfg)
    }

    #[test]
    fn gate_parity() {
        assert_eq!(alternate_gate(1).unwrap(), Phase::TrainLora);
        assert_eq!(alternate_gate(2).unwrap(), Phase::TrainPrompt);
        assert_eq!(alternate_gate(10).unwrap(), Phase::TrainPrompt);
        assert!(alternate_gate(0).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[1, 2], &[2, 1]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2, 3], &[3, 4]), 0.25);
    }

    #[test]
    fn config_validation() {
        let c = PipelineConfig::default();
        assert!(c.validate(64).is_ok());
        assert!(PipelineConfig { keep: 10, ..c.clone() }.validate(64).is_err());
        assert!(PipelineConfig { rounds: 0, ..c.clone() }.validate(64).is_err());
        assert!(PipelineConfig { prompt_tokens: 65, ..c }.validate(64).is_err());
    }

    #[test]
    fn rounds_count_alternate_and_replay() {
        let (world, cfg) = tiny();
        let models = bootstrap(&world, &cfg).unwrap();
        let initial = models.clone();
        let out = run_pipeline(&world, models, &cfg.pipeline, cfg.seed).unwrap();
        let r = &out.report;
        assert_eq!(r.status, "ok");
        assert_eq!(r.rounds.len(), 4);
        let (m, u, q, k) = (4, 4, cfg.pipeline.per_cell, cfg.pipeline.keep);
        for s in &r.rounds {
            assert_eq!(s.retained, m * u * k);
            assert_eq!(s.rejected, m * u * (q - k));
            assert_eq!(s.reward_digest, r.reward_digest);
        }
        // exactly one of prompt / adapters changes per round
        let mut prev = (r.initial_prompt_digest.clone(), r.initial_lora_digest.clone());
        for s in &r.rounds {
            let p_changed = s.prompt_digest != prev.0;
            let l_changed = s.lora_digest != prev.1;
            assert!(p_changed ^ l_changed, "round {}", s.round);
            assert_eq!(l_changed, s.phase == Phase::TrainLora);
            prev = (s.prompt_digest.clone(), s.lora_digest.clone());
        }
        let labels: Vec<(&str, usize)> = r.checkpoints.iter().map(|c| (c.label.as_str(), c.round)).collect();
        assert_eq!(labels, vec![("initial", 0), ("middle", 2), ("final", 4)]);
        // product dims and replay of round-1 creatives under the initial models
        for e in out.manifests.iter().flatten() {
            let item = &world.items[e.item_id];
            for j in 0..world.latent_dim() {
                if item.is_product_dim(j) {
                    assert_eq!(e.latent[j], item.base_latent.data()[j]);
                }
            }
        }
        for e in out.manifests[0].iter().take(12) {
            let z = initial
                .diffusion
                .generate_batch(&world, &world.items[e.item_id], &e.prompt_tokens, &[e.seed], 10)
                .unwrap();
            assert_eq!(z[0], e.latent);
        }
        assert_eq!(out.snapshot(0).unwrap(), &out.manifests[0][..]);
        assert_eq!(out.snapshot(4).unwrap(), &out.final_harvest[..]);
    }

    #[test]
    fn runs_are_deterministic() {
        let (world, mut cfg) = tiny();
        cfg.pipeline.rounds = 2;
        let run = || {
            let out = run_pipeline(&world, bootstrap(&world, &cfg).unwrap(), &cfg.pipeline, cfg.seed).unwrap();
            serde_json::to_string(&out.report).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_runs_keep_k_per_item() {
        let (world, mut cfg) = tiny();
        cfg.pipeline.rounds = 1;
        cfg.pipeline.personalize = false;
        let out = run_pipeline(&world, bootstrap(&world, &cfg).unwrap(), &cfg.pipeline, cfg.seed).unwrap();
        let per_item = out.final_harvest.iter().filter(|e| e.retained && e.item_id == 1).count();
        assert_eq!(per_item, cfg.pipeline.keep);
        let policy = policy_from_harvest(&world, &out.final_harvest, 0.1).unwrap();
        assert_eq!(policy.cells.len(), 4 * 4);
    }

    #[test]
    fn single_group_world_rejected_by_sweep() {
        let (mut world, cfg) = tiny();
        world.user_groups.truncate(1);
        assert!(personalization_sweep(&world, &cfg).is_err());
    }

    #[test]
    fn groupless_cells_score_with_mean_ctr() {
        let world = make_world(&WorldConfig { n_items: 2, ..WorldConfig::default() }, 1).unwrap();
        let e = ManifestEntry {
            round: 1,
            item_id: 1,
            group_id: None,
            slot: 0,
            seed: 0,
            prompt_tokens: vec![1],
            caption_tokens: vec![],
            reward_score: 0.0,
            retained: true,
            latent: world.items[1].base_latent.data().to_vec(),
        };
        let direct = world.mean_true_ctr(&world.items[1], &e.latent);
        assert_eq!(entry_oracle_ctr(&world, &e).unwrap(), direct);
    }
}
