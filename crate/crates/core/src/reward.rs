//! Reward model: per-creative CTR from title, caption and image features
//! fused by self-attention, trained with a weighted list-wise plus
//! point-wise loss and frozen afterwards.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{affine, init_weight};
use crate::numerics::{sigmoid, Adam, Binder, Graph, ParamSet, SelfAttention, Tensor, Var};
use crate::rng::{derive_seed, rng_for, stream};

pub const TEXT_FEATURE_DIM: usize = 24;
const HASH_SALT: u64 = 0x7e47_f00d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub reduced_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Creatives per minibatch; whole items are kept together.
    pub batch_size: usize,
    pub lambda_r: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { reduced_dim: 16, heads: 2, hidden: 32, lr: 5e-4, epochs: 30, batch_size: 2048, lambda_r: 0.1 }
    }
}

/// Frozen extractor output for one creative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreativeFeatures {
    pub title: Vec<f64>,
    pub caption: Vec<f64>,
    pub image: Vec<f64>,
}

/// Fixed pseudo-random embedding of a token id.
pub fn hash_embedding(token: usize) -> Vec<f64> {
    let mut rng = rng_for(derive_seed(HASH_SALT, &[token as u64]), &[]);
    Tensor::randn(&[TEXT_FEATURE_DIM], 1.0 / (TEXT_FEATURE_DIM as f64).sqrt(), &mut rng).into_data()
}

/// Mean hash embedding; the empty set maps to the zero vector.
pub fn text_feature(tokens: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; TEXT_FEATURE_DIM];
    if tokens.is_empty() {
        return out;
    }
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    for t in sorted {
        for (o, v) in out.iter_mut().zip(hash_embedding(t)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= tokens.len() as f64);
    out
}

pub fn extract_features(title_tokens: &[usize], caption_tokens: &[usize], latent: &[f64]) -> CreativeFeatures {
    CreativeFeatures { title: text_feature(title_tokens), caption: text_feature(caption_tokens), image: latent.to_vec() }
}

/// A logged creative with its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedCreative {
    pub creative_id: usize,
    pub features: CreativeFeatures,
    pub clicks: u64,
    pub impressions: u64,
}

/// All logged creatives of one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemGroup {
    pub item_id: usize,
    pub creatives: Vec<LoggedCreative>,
}

impl ItemGroup {
    pub fn impressions(&self) -> u64 {
        self.creatives.iter().map(|c| c.impressions).sum()
    }
}

/// `clicks / impressions`.
pub fn real_ctr(clicks: u64, impressions: u64) -> Result<f64> {
    if impressions == 0 {
        return Err(Error::Data("real CTR undefined for zero impressions".into()));
    }
    if clicks > impressions {
        return Err(Error::Data(format!("{clicks} clicks exceed {impressions} impressions")));
    }
    Ok(clicks as f64 / impressions as f64)
}

/// Per-creative impression weights `w_j^i = imp_j^i / Σ imp` and per-item
/// sums `w^i`.
pub fn impression_weights(groups: &[ItemGroup]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let total: u64 = groups.iter().map(ItemGroup::impressions).sum();
    if total == 0 {
        return Err(Error::Data("dataset has no impressions".into()));
    }
    let per: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.creatives.iter().map(|c| c.impressions as f64 / total as f64).collect())
        .collect();
    let item = per.iter().map(|w| w.iter().sum()).collect();
    Ok((per, item))
}

#[derive(Clone, Debug)]
pub struct RewardModel {
    pub config: RewardConfig,
    pub params: ParamSet,
    latent_dim: usize,
    attention: SelfAttention,
}

impl RewardModel {
    pub fn new(latent_dim: usize, config: &RewardConfig, seed: u64) -> Result<Self> {
        let r = config.reduced_dim;
        let attention = SelfAttention::new("rm.attn", r, config.heads)?;
        let mut rng = rng_for(seed, &[stream::REWARD_INIT]);
        let mut params = ParamSet::new();
        for (name, din) in [("t", TEXT_FEATURE_DIM), ("c", TEXT_FEATURE_DIM), ("i", latent_dim)] {
            params.insert(format!("rm.fc_{name}.w"), init_weight(din, r, &mut rng));
            params.insert(format!("rm.fc_{name}.b"), Tensor::zeros(&[1, r]));
        }
        attention.init_params(&mut params, &mut rng);
        params.insert("rm.ctr1.w", init_weight(3 * r, config.hidden, &mut rng));
        params.insert("rm.ctr1.b", Tensor::zeros(&[1, config.hidden]));
        params.insert("rm.ctr2.w", init_weight(config.hidden, 1, &mut rng));
        params.insert("rm.ctr2.b", Tensor::zeros(&[1, 1]));
        Ok(Self { config: config.clone(), params, latent_dim, attention })
    }

    pub fn from_params(latent_dim: usize, config: &RewardConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(latent_dim, config, 0)?;
        for (name, t) in m.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Data(format!("reward checkpoint lacks a matching {name}"))),
            }
        }
        m.params = params;
        Ok(m)
    }

    /// Logits `[n × 1]`, one per creative; creatives are scored independently.
    pub fn logits(&self, g: &mut Graph, binder: &Binder, feats: &[&CreativeFeatures]) -> Result<Var> {
        if feats.is_empty() {
            return Err(Error::EmptySequence("reward batch"));
        }
        let n = feats.len();
        let stack = |get: &dyn Fn(&CreativeFeatures) -> &Vec<f64>, width: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(n * width);
            for f in feats {
                let v = get(f);
                if v.len() != width {
                    return Err(Error::Shape(format!("feature of width {} where {width} expected", v.len())));
                }
                data.extend_from_slice(v);
            }
            Tensor::matrix(n, width, data)
        };
        let mut reduced = Vec::with_capacity(3);
        for (name, t) in [
            ("t", stack(&|f| &f.title, TEXT_FEATURE_DIM)?),
            ("c", stack(&|f| &f.caption, TEXT_FEATURE_DIM)?),
            ("i", stack(&|f| &f.image, self.latent_dim)?),
        ] {
            let x = g.constant(t);
            let w = binder.var(g, &format!("rm.fc_{name}.w"))?;
            let b = binder.var(g, &format!("rm.fc_{name}.b"))?;
            reduced.push(affine(g, x, w, b)?);
        }
        let mut fused = Vec::with_capacity(n);
        for j in 0..n {
            let rows: Vec<Var> =
                reduced.iter().map(|&r| g.slice_rows(r, j, j + 1)).collect::<Result<_>>()?;
            let seq = g.concat_rows(&rows)?;
            let att = self.attention.forward(g, binder, seq)?;
            fused.push(g.reshape(att.out, &[1, 3 * self.config.reduced_dim])?);
        }
        let x = if n == 1 { fused[0] } else { g.concat_rows(&fused)? };
        let w1 = binder.var(g, "rm.ctr1.w")?;
        let b1 = binder.var(g, "rm.ctr1.b")?;
        let h = affine(g, x, w1, b1)?;
        let h = g.tanh(h)?;
        let w2 = binder.var(g, "rm.ctr2.w")?;
        let b2 = binder.var(g, "rm.ctr2.b")?;
        affine(g, h, w2, b2)
    }

    /// Predicted CTR per creative.
    pub fn predict(&self, feats: &[&CreativeFeatures]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let o = self.logits(&mut g, &Binder::frozen(&self.params), feats)?;
        Ok(g.value(o).data().iter().map(|&v| sigmoid(v)).collect())
    }

    /// `(logits, probabilities)` for the creatives of one item.
    pub fn reward_forward(&self, group: &ItemGroup) -> Result<(Vec<f64>, Vec<f64>)> {
        let feats: Vec<&CreativeFeatures> = group.creatives.iter().map(|c| &c.features).collect();
        let mut g = Graph::new();
        let o = self.logits(&mut g, &Binder::frozen(&self.params), &feats)?;
        let logits = g.value(o).data().to_vec();
        let probs = logits.iter().map(|&v| sigmoid(v)).collect();
        Ok((logits, probs))
    }

    pub fn loss(&self, g: &mut Graph, binder: &Binder, groups: &[ItemGroup], lambda_r: f64) -> Result<Var> {
        let feats: Vec<&CreativeFeatures> =
            groups.iter().flat_map(|gr| gr.creatives.iter().map(|c| &c.features)).collect();
        let logits = self.logits(g, binder, &feats)?;
        reward_loss_from_logits(g, logits, groups, lambda_r)
    }

    /// Minibatch Adam training with seeded shuffling of items. Returns the
    /// mean loss of the final epoch.
    pub fn train(&mut self, dataset: &[ItemGroup], seed: u64) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Data("empty reward training set".into()));
        }
        let mut rng = rng_for(seed, &[stream::REWARD_TRAIN]);
        let mut adam = Adam::new(self.config.lr);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut last = 0.0;
        for _ in 0..self.config.epochs.max(1) {
            order.shuffle(&mut rng);
            let (mut total, mut steps) = (0.0, 0);
            let mut start = 0;
            while start < order.len() {
                let mut batch = Vec::new();
                let mut size = 0;
                while start < order.len() && (batch.is_empty() || size + dataset[order[start]].creatives.len() <= self.config.batch_size) {
                    size += dataset[order[start]].creatives.len();
                    batch.push(dataset[order[start]].clone());
                    start += 1;
                }
                let mut g = Graph::new();
                let loss = self.loss(&mut g, &Binder::trainable(&self.params), &batch, self.config.lambda_r)?;
                let grads = g.backward(loss)?.into_params();
                adam.step(&mut self.params, &grads)?;
                total += g.value(loss).item();
                steps += 1;
            }
            last = total / steps as f64;
        }
        Ok(last)
    }
}

/// `(1 - λ_r)·L_list + λ_r·L_point` over items laid out consecutively in
/// `logits`. The list-wise term is ListNet-style: `-Σ_j ŷ_j log softmax(o)_j`
/// within each item. The point-wise term uses `sigmoid(o_j)`.
pub fn reward_loss_from_logits(g: &mut Graph, logits: Var, groups: &[ItemGroup], lambda_r: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_r) {
        return Err(Error::Config(format!("lambda_r = {lambda_r} outside [0, 1]")));
    }
    let n: usize = groups.iter().map(|gr| gr.creatives.len()).sum();
    if g.value(logits).len() != n {
        return Err(Error::Shape(format!("{} logits for {n} creatives", g.value(logits).len())));
    }
    let (_, item_w) = impression_weights(groups)?;
    let w_sum: f64 = item_w.iter().sum();
    let col = g.reshape(logits, &[1, n])?;
    let mut list_terms = Vec::with_capacity(groups.len());
    let mut point_terms = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for (gr, &wi) in groups.iter().zip(&item_w) {
        let m = gr.creatives.len();
        if m == 0 {
            continue;
        }
        let labels: Vec<f64> =
            gr.creatives.iter().map(|c| real_ctr(c.clicks, c.impressions)).collect::<Result<_>>()?;
        let o = g.slice_cols(col, offset, offset + m)?;
        offset += m;
        let y = Tensor::row(labels.clone());
        let scale = wi / w_sum;

        let logq = g.log_softmax_rows(o)?;
        let ylogq = g.mul_const(logq, &y)?;
        let s = g.sum(ylogq)?;
        list_terms.push(g.scale(s, -scale)?);

        let p = g.sigmoid(o)?;
        let neg_y = g.constant(y);
        let diff = g.sub(p, neg_y)?;
        let sq = g.square(diff)?;
        let s = g.sum(sq)?;
        point_terms.push(g.scale(s, scale)?);
    }
    let list = sum_all(g, &list_terms)?;
    let point = sum_all(g, &point_terms)?;
    let a = g.scale(list, 1.0 - lambda_r)?;
    let b = g.scale(point, lambda_r)?;
    g.add(a, b)
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or(Error::EmptySequence("reward loss"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Splits scored creatives into the top `k` (descending score, ties by
/// ascending id) and the rest.
pub fn select_topk(scored: &[(usize, f64)], k: usize) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
    if k == 0 || k > scored.len() {
        return Err(Error::Config(format!("k = {k} outside 1..={}", scored.len())));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let rest = sorted.split_off(k);
    Ok((sorted, rest))
}
