//! Prompt model: DeepFM over query-field embeddings plus an attention-pooled
//! prompt embedding. Scores (query, token set) pairs and picks per-group
//! prompt tokens.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{affine, init_weight, mean_pool};
use crate::numerics::{sigmoid, Adam, Binder, Graph, ParamSet, SelfAttention, Tensor, Var};
use crate::rng::{rng_for, stream};
use crate::world::World;

pub const FIELDS: [&str; 7] = ["group", "age", "gender", "item", "category", "device", "time"];
const GENDER_BANDS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub emb_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub n_devices: usize,
    pub n_time_bands: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_p: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            heads: 2,
            hidden: 32,
            n_devices: 3,
            n_time_bands: 4,
            lr: 1e-3,
            epochs: 2,
            batch_size: 2048,
            lambda_p: 0.1,
        }
    }
}

/// User, item and context attributes. User fields equal to the table's last
/// row mean "unknown" (user features masked).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub group: usize,
    pub age_band: usize,
    pub gender_band: usize,
    pub item: usize,
    pub category: usize,
    pub device: usize,
    pub time_band: usize,
}

impl Query {
    fn fields(&self) -> [usize; 7] {
        [self.group, self.age_band, self.gender_band, self.item, self.category, self.device, self.time_band]
    }

    /// Generation-time query: canonical context (device 0, time band 0).
    /// `group = None` masks every user attribute.
    pub fn for_generation(world: &World, item: usize, group: Option<usize>) -> Result<Self> {
        let it = world.item(item)?;
        let (group, age_band, gender_band) = match group {
            Some(g) => {
                let ug = world.group(g)?;
                (ug.id, ug.age_band, ug.gender_band)
            }
            None => masked_user(world),
        };
        Ok(Self { group, age_band, gender_band, item, category: it.category, device: 0, time_band: 0 })
    }

    /// Same query with the user attributes replaced by "unknown".
    pub fn masked(&self, world: &World) -> Self {
        let (group, age_band, gender_band) = masked_user(world);
        Self { group, age_band, gender_band, ..*self }
    }
}

fn age_bands(world: &World) -> usize {
    world.config.n_groups.div_ceil(2)
}

fn masked_user(world: &World) -> (usize, usize, usize) {
    (world.config.n_groups, age_bands(world), GENDER_BANDS)
}

/// One training example. `label` is the hard target, `soft_label` the
/// reward-model target, `weight` the example's share of the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub query: Query,
    pub tokens: Vec<usize>,
    pub label: f64,
    pub soft_label: Option<f64>,
    pub weight: f64,
}

/// Sorted, de-duplicated tokens so scores depend on the set only.
pub fn canonical_tokens(tokens: &[usize]) -> Vec<usize> {
    let mut t = tokens.to_vec();
    t.sort_unstable();
    t.dedup();
    t
}

/// Maps scores to [0, 1] by min-max scaling; a constant list maps to 0.5.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug)]
pub struct PromptModel {
    pub config: PromptConfig,
    pub params: ParamSet,
    table_sizes: [usize; 7],
    vocab_size: usize,
    attention: SelfAttention,
}

impl PromptModel {
    pub fn new(world: &World, config: &PromptConfig, seed: u64) -> Result<Self> {
        let attention = SelfAttention::new("pm.attn", config.emb_dim, config.heads)?;
        let c = &world.config;
        let table_sizes = [
            c.n_groups + 1,
            age_bands(world) + 1,
            GENDER_BANDS + 1,
            c.n_items,
            c.n_categories,
            config.n_devices.max(1),
            config.n_time_bands.max(1),
        ];
        let d = config.emb_dim;
        let mut rng = rng_for(seed, &[stream::PROMPT_INIT]);
        let mut params = ParamSet::new();
        for (name, &rows) in FIELDS.iter().zip(&table_sizes) {
            params.insert(format!("pm.emb.{name}"), Tensor::randn(&[rows, d], 0.1, &mut rng));
        }
        params.insert("pm.tok", Tensor::randn(&[world.vocab_size(), d], 0.1, &mut rng));
        attention.init_params(&mut params, &mut rng);
        let width = (FIELDS.len() + 1) * d;
        params.insert("pm.deep.w", init_weight(width, config.hidden, &mut rng));
        params.insert("pm.deep.b", Tensor::zeros(&[1, config.hidden]));
        params.insert("pm.head.w", init_weight(config.hidden, 1, &mut rng));
        params.insert("pm.head.fm", Tensor::scalar(0.1));
        params.insert("pm.head.b", Tensor::scalar(0.0));
        Ok(Self { config: config.clone(), params, table_sizes, vocab_size: world.vocab_size(), attention })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn check(&self, query: &Query, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("prompt token set is empty".into()));
        }
        for (i, (&v, &n)) in query.fields().iter().zip(&self.table_sizes).enumerate() {
            if v >= n {
                return Err(Error::Index(format!("query field {} = {v} outside 0..{n}", FIELDS[i])));
            }
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    /// Logits `[n × 1]` for a batch of (query, token set) pairs.
    pub fn logits(&self, g: &mut Graph, binder: &Binder, batch: &[(Query, Vec<usize>)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptySequence("prompt batch"));
        }
        for (q, t) in batch {
            self.check(q, t)?;
        }
        let mut parts = Vec::with_capacity(FIELDS.len() + 1);
        for (f, name) in FIELDS.iter().enumerate() {
            let table = binder.var(g, &format!("pm.emb.{name}"))?;
            let ids: Vec<usize> = batch.iter().map(|(q, _)| q.fields()[f]).collect();
            parts.push(g.gather_rows(table, &ids)?);
        }
        let tok = binder.var(g, "pm.tok")?;
        let mut pooled = Vec::with_capacity(batch.len());
        for (_, tokens) in batch {
            let canon = canonical_tokens(tokens);
            let x = g.gather_rows(tok, &canon)?;
            let att = self.attention.forward(g, binder, x)?;
            pooled.push(mean_pool(g, att.out)?);
        }
        parts.push(if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled)? });

        // second-order FM over the field embeddings
        let mut sum = parts[0];
        let mut sum_sq = g.square(parts[0])?;
        for &p in &parts[1..] {
            sum = g.add(sum, p)?;
            let sq = g.square(p)?;
            sum_sq = g.add(sum_sq, sq)?;
        }
        let sq_sum = g.square(sum)?;
        let diff = g.sub(sq_sum, sum_sq)?;
        let fm = g.sum_cols(diff)?;
        let fm = g.scale(fm, 0.5)?;

        let x = g.concat_cols(&parts)?;
        let w = binder.var(g, "pm.deep.w")?;
        let b = binder.var(g, "pm.deep.b")?;
        let h = affine(g, x, w, b)?;
        let h = g.tanh(h)?;
        let hw = binder.var(g, "pm.head.w")?;
        let deep = g.matmul(h, hw)?;
        let fm_w = binder.var(g, "pm.head.fm")?;
        let fm = g.mul_scalar(fm, fm_w)?;
        let out = g.add(deep, fm)?;
        let bias = binder.var(g, "pm.head.b")?;
        g.add_row(out, bias)
    }

    /// Click probability of `tokens` under `query`.
    pub fn score_prompt(&self, query: &Query, tokens: &[usize]) -> Result<f64> {
        Ok(self.score_batch(&[(*query, tokens.to_vec())])?[0])
    }

    pub fn score_batch(&self, batch: &[(Query, Vec<usize>)]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let o = self.logits(&mut g, &Binder::frozen(&self.params), batch)?;
        Ok(g.value(o).data().iter().map(|&v| sigmoid(v)).collect())
    }

    /// Scores every vocabulary token as a singleton prompt, best first, ties
    /// broken by ascending id.
    pub fn rank_tokens(&self, query: &Query) -> Result<Vec<(usize, f64)>> {
        let batch: Vec<(Query, Vec<usize>)> = (0..self.vocab_size).map(|t| (*query, vec![t])).collect();
        let scores = self.score_batch(&batch)?;
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }

    /// The `p_count` highest-scoring tokens for `query`.
    pub fn select_top_p(&self, query: &Query, p_count: usize) -> Result<Vec<usize>> {
        if p_count == 0 || p_count > self.vocab_size {
            return Err(Error::Config(format!("p = {p_count} outside 1..={}", self.vocab_size)));
        }
        Ok(self.rank_tokens(query)?.into_iter().take(p_count).map(|(t, _)| t).collect())
    }

    /// Builds the mixed hard/soft weighted cross-entropy on `g`.
    pub fn loss(&self, g: &mut Graph, binder: &Binder, batch: &[PromptSample], lambda_p: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&lambda_p) {
            return Err(Error::Config(format!("lambda_p = {lambda_p} outside [0, 1]")));
        }
        let pairs: Vec<(Query, Vec<usize>)> = batch.iter().map(|s| (s.query, s.tokens.clone())).collect();
        let logits = self.logits(g, binder, &pairs)?;
        let hard: Vec<f64> = batch.iter().map(|s| s.label).collect();
        let soft = if lambda_p > 0.0 {
            batch
                .iter()
                .enumerate()
                .map(|(i, s)| s.soft_label.ok_or_else(|| Error::Data(format!("sample {i} has no soft label"))))
                .collect::<Result<Vec<f64>>>()?
        } else {
            vec![0.0; batch.len()]
        };
        let weights: Vec<f64> = batch.iter().map(|s| s.weight).collect();
        prompt_loss_from_logits(g, logits, &hard, &soft, &weights, lambda_p)
    }

    /// Minibatch Adam over `samples` for `epochs` passes. Returns the mean
    /// loss of the last epoch.
    pub fn fit(&mut self, samples: &[PromptSample], adam: &mut Adam, epochs: usize, lambda_p: f64, seed: u64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("no prompt-model training samples".into()));
        }
        let mut rng = rng_for(seed, &[stream::PROMPT_TRAIN]);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let bs = self.config.batch_size.max(1);
        let mut last = 0.0;
        for _ in 0..epochs.max(1) {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0);
            for chunk in order.chunks(bs) {
                let batch: Vec<PromptSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let mut g = Graph::new();
                let loss = self.loss(&mut g, &Binder::trainable(&self.params), &batch, lambda_p)?;
                let grads = g.backward(loss)?.into_params();
                adam.step(&mut self.params, &grads)?;
                total += g.value(loss).item();
                batches += 1;
            }
            last = total / batches as f64;
        }
        Ok(last)
    }

    /// Self-cycling update: retained creatives are positives, the rest
    /// negatives. Soft labels must already be set. `history` samples keep
    /// their own labels; those without a soft label use the hard one. Skips
    /// with a warning when either side is empty.
    pub fn train_prompt(
        &mut self,
        positives: &[PromptSample],
        negatives: &[PromptSample],
        history: &[PromptSample],
        adam: &mut Adam,
        seed: u64,
    ) -> Result<Option<f64>> {
        if positives.is_empty() || negatives.is_empty() {
            warn!("prompt training skipped: G has {} and B has {} samples", positives.len(), negatives.len());
            return Ok(None);
        }
        let samples: Vec<PromptSample> = positives
            .iter()
            .map(|s| PromptSample { label: 1.0, ..s.clone() })
            .chain(negatives.iter().map(|s| PromptSample { label: 0.0, ..s.clone() }))
            .chain(history.iter().map(|s| PromptSample { soft_label: s.soft_label.or(Some(s.label)), ..s.clone() }))
            .collect();
        let (epochs, lambda_p) = (self.config.epochs, self.config.lambda_p);
        self.fit(&samples, adam, epochs, lambda_p, seed).map(Some)
    }
}

/// `(1 - λ)·BCE(o, y) + λ·BCE(o, y_soft)`, each a weighted mean over the
/// batch, with `BCE(o, y) = softplus(o) - y·o`.
pub fn prompt_loss_from_logits(
    g: &mut Graph,
    logits: Var,
    hard: &[f64],
    soft: &[f64],
    weights: &[f64],
    lambda_p: f64,
) -> Result<Var> {
    let n = hard.len();
    if soft.len() != n || weights.len() != n || g.value(logits).len() != n {
        return Err(Error::Shape("prompt loss inputs disagree in length".into()));
    }
    if hard.iter().chain(soft).any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::Data("prompt labels must lie in [0, 1]".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Data("prompt sample weights must be non-negative with a positive sum".into()));
    }
    // the two cross-entropies share softplus(o); only the target mixes
    let target: Vec<f64> = hard.iter().zip(soft).map(|(h, s)| (1.0 - lambda_p) * h + lambda_p * s).collect();
    let sp = g.softplus(logits)?;
    let yo = g.mul_const(logits, &Tensor::new(vec![n, 1], target)?)?;
    let per = g.sub(sp, yo)?;
    let w = Tensor::new(vec![n, 1], weights.iter().map(|w| w / total).collect())?;
    let weighted = g.mul_const(per, &w)?;
    g.sum(weighted)
}
