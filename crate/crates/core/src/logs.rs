//! Synthetic interaction logs drawn from the world oracle, and their
//! conversions into training sets.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TokenImpressions;
use crate::prompt::{PromptSample, Query};
use crate::reward::{extract_features, ItemGroup, LoggedCreative};
use crate::rng::{derive_seed, rng_for, stream};
use crate::world::{sample_clicks, World};

/// One logged creative (also the ingestion format for external data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreativeRecord {
    pub item_id: usize,
    pub creative_id: usize,
    pub title_tokens: Vec<usize>,
    pub caption_tokens: Vec<usize>,
    pub image_feat: Vec<f64>,
    pub clicks: u64,
    pub impressions: u64,
}

/// Aggregated impressions of one (query, token set) pair. A per-impression
/// record has `impressions = 1` and `clicks` in {0, 1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickRecord {
    pub query: Query,
    pub tokens: Vec<usize>,
    pub clicks: u64,
    pub impressions: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Creatives per item in the reward-model log.
    pub creatives_per_item: usize,
    pub impressions_per_creative: u64,
    /// Historical creatives per (item, group) in the clicked log.
    pub clicked_creatives_per_cell: usize,
    pub clicked_impressions: u64,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            creatives_per_item: 10,
            impressions_per_creative: 10_000,
            clicked_creatives_per_cell: 8,
            clicked_impressions: 200,
        }
    }
}

/// Natural creatives with random prompts, shown to uniformly mixed traffic.
/// `stream_tag` separates independent logs drawn from one seed.
pub fn synth_creative_log(world: &World, cfg: &LogConfig, seed: u64, stream_tag: u64) -> Vec<CreativeRecord> {
    let mut out = Vec::with_capacity(world.items.len() * cfg.creatives_per_item);
    for item in &world.items {
        let mut rng = rng_for(seed, &[stream_tag, item.id as u64]);
        for j in 0..cfg.creatives_per_item {
            let tokens = world.random_prompt(&mut rng);
            let latent = world.natural_latent(item, &tokens, &mut rng);
            let ctr = world.mean_true_ctr(item, &latent);
            let s = derive_seed(seed, &[stream_tag, stream::CLICKS, item.id as u64, j as u64]);
            out.push(CreativeRecord {
                item_id: item.id,
                creative_id: j,
                title_tokens: item.title_tokens.clone(),
                caption_tokens: world.caption(&latent),
                clicks: sample_clicks(ctr, cfg.impressions_per_creative, s),
                impressions: cfg.impressions_per_creative,
                image_feat: latent,
            });
        }
    }
    out
}

/// Groups records by item (ascending id), dropping zero-impression records.
pub fn to_item_groups(records: &[CreativeRecord]) -> Result<Vec<ItemGroup>> {
    let mut by_item: BTreeMap<usize, Vec<LoggedCreative>> = BTreeMap::new();
    for r in records {
        if r.clicks > r.impressions {
            return Err(Error::Data(format!(
                "item {} creative {}: clicks exceed impressions",
                r.item_id, r.creative_id
            )));
        }
        if r.impressions == 0 {
            warn!("item {} creative {} has no impressions; excluded", r.item_id, r.creative_id);
            continue;
        }
        by_item.entry(r.item_id).or_default().push(LoggedCreative {
            creative_id: r.creative_id,
            features: extract_features(&r.title_tokens, &r.caption_tokens, &r.image_feat),
            clicks: r.clicks,
            impressions: r.impressions,
        });
    }
    if by_item.is_empty() {
        return Err(Error::Data("creative log has no usable records".into()));
    }
    Ok(by_item.into_iter().map(|(item_id, creatives)| ItemGroup { item_id, creatives }).collect())
}

/// Historical clicked log: per (item, group), natural creatives with random
/// prompts under random context, labelled by the group's true CTR. Tokens
/// are the creative's caption.
pub fn synth_clicked_log(
    world: &World,
    cfg: &LogConfig,
    n_devices: usize,
    n_time_bands: usize,
    seed: u64,
) -> Result<Vec<ClickRecord>> {
    let mut out = Vec::new();
    for item in &world.items {
        for group in &world.user_groups {
            let mut rng = rng_for(seed, &[stream::CLICKED_LOG, item.id as u64, group.id as u64]);
            for j in 0..cfg.clicked_creatives_per_cell {
                let tokens = world.random_prompt(&mut rng);
                let latent = world.natural_latent(item, &tokens, &mut rng);
                let mut query = Query::for_generation(world, item.id, Some(group.id))?;
                query.device = rng.random_range(0..n_devices.max(1));
                query.time_band = rng.random_range(0..n_time_bands.max(1));
                let ctr = world.true_ctr(group, item, &latent);
                let s = derive_seed(seed, &[stream::CLICKED_LOG, stream::CLICKS, item.id as u64, group.id as u64, j as u64]);
                out.push(ClickRecord {
                    query,
                    tokens: world.caption(&latent),
                    clicks: sample_clicks(ctr, cfg.clicked_impressions, s),
                    impressions: cfg.clicked_impressions,
                    reward_score: None,
                });
            }
        }
    }
    Ok(out)
}

/// Clicked and non-clicked halves of each record as weighted samples.
pub fn clicked_samples(records: &[ClickRecord]) -> Vec<PromptSample> {
    let mut out = Vec::with_capacity(2 * records.len());
    for r in records {
        for (label, weight) in [(1.0, r.clicks), (0.0, r.impressions.saturating_sub(r.clicks))] {
            if weight > 0 {
                out.push(PromptSample {
                    query: r.query,
                    tokens: r.tokens.clone(),
                    label,
                    soft_label: r.reward_score,
                    weight: weight as f64,
                });
            }
        }
    }
    out
}

pub fn token_impressions(records: &[ClickRecord]) -> Vec<TokenImpressions> {
    records
        .iter()
        .map(|r| TokenImpressions { tokens: r.tokens.clone(), clicks: r.clicks, impressions: r.impressions })
        .collect()
}
