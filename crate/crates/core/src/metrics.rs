//! Offline evaluation: top-k CTR uplift, per-item MSE and the historical
//! token CTR uplift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCreative {
    pub creative_id: usize,
    pub clicks: u64,
    pub impressions: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: usize,
    pub creatives: Vec<EvalCreative>,
}

/// Creatives of `item` ordered by descending score, ties by ascending id.
pub fn ranked(item: &EvalItem) -> Vec<&EvalCreative> {
    let mut v: Vec<&EvalCreative> = item.creatives.iter().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.creative_id.cmp(&b.creative_id)));
    v
}

fn ratio(clicks: u64, impressions: u64, what: &str) -> Result<f64> {
    if impressions == 0 {
        return Err(Error::Data(format!("{what}: zero impressions")));
    }
    Ok(clicks as f64 / impressions as f64)
}

/// Pooled CTR of each item's top-`k` creatives divided by the pooled CTR of
/// all creatives, minus one.
pub fn ctr_uplift_k(log: &[EvalItem], k: usize) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::Data("empty evaluation log".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (mut top_c, mut top_i, mut all_c, mut all_i) = (0u64, 0u64, 0u64, 0u64);
    for item in log {
        if item.creatives.len() < k {
            return Err(Error::Config(format!(
                "item {} has {} creatives, fewer than k = {k}",
                item.item_id,
                item.creatives.len()
            )));
        }
        for c in ranked(item).into_iter().take(k) {
            top_c += c.clicks;
            top_i += c.impressions;
        }
        for c in &item.creatives {
            all_c += c.clicks;
            all_i += c.impressions;
        }
    }
    let top = ratio(top_c, top_i, "top-k CTR")?;
    let base = ratio(all_c, all_i, "base CTR")?;
    if base == 0.0 {
        return Err(Error::Data("base CTR is zero".into()));
    }
    Ok(top / base - 1.0)
}

/// Mean over items of the mean squared error between observed CTR and score.
pub fn mse_metric(log: &[EvalItem]) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::Data("empty evaluation log".into()));
    }
    let mut total = 0.0;
    for item in log {
        if item.creatives.is_empty() {
            return Err(Error::Data(format!("item {} has no creatives", item.item_id)));
        }
        let mut s = 0.0;
        for c in &item.creatives {
            let y = ratio(c.clicks, c.impressions, "MSE label")?;
            s += (y - c.score).powi(2);
        }
        total += s / item.creatives.len() as f64;
    }
    Ok(total / log.len() as f64)
}

/// Aggregated impressions of one prompt token set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenImpressions {
    pub tokens: Vec<usize>,
    pub clicks: u64,
    pub impressions: u64,
}

/// CTR over impressions whose prompt contains at least one of the first `k`
/// selected tokens, relative to the overall CTR, minus one.
pub fn historical_ctr_uplift(log: &[TokenImpressions], selected: &[usize], k: usize) -> Result<f64> {
    let chosen = &selected[..k.min(selected.len())];
    if chosen.is_empty() {
        return Err(Error::UndefinedMetric("no selected tokens".into()));
    }
    let (mut mc, mut mi, mut ac, mut ai) = (0u64, 0u64, 0u64, 0u64);
    for r in log {
        ac += r.clicks;
        ai += r.impressions;
        if r.tokens.iter().any(|t| chosen.contains(t)) {
            mc += r.clicks;
            mi += r.impressions;
        }
    }
    if mi == 0 {
        return Err(Error::UndefinedMetric("no impression contains a selected token".into()));
    }
    if ac == 0 {
        return Err(Error::UndefinedMetric("overall CTR is zero".into()));
    }
    Ok((mc as f64 / mi as f64) / (ac as f64 / ai as f64) - 1.0)
}
