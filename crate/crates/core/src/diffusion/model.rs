use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::lora_weight;
use super::schedule::{make_schedule, noise_with, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::layers::{affine, init_weight};
use crate::numerics::{Adam, Binder, Graph, ParamSet, Tensor, Var};
use crate::rng::{rng_for, stream};
use crate::world::{Item, World};

pub const LORA_PREFIX: &str = "lora.";
pub const BASE_PREFIX: &str = "eps.";
const LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    /// Bound on each coordinate of the predicted clean latent while sampling;
    /// 0 disables clipping.
    pub clip_sample: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub lora_lr: f64,
    /// Adapter optimizer steps per LoRA training turn.
    pub lora_steps: usize,
    pub lora_batch: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 50,
            beta_min: 1e-3,
            beta_max: 0.2,
            sample_steps: 10,
            clip_sample: 5.0,
            hidden: 64,
            time_dim: 16,
            lora_rank: 4,
            lora_alpha: 4.0,
            pretrain_steps: 1500,
            pretrain_batch: 32,
            pretrain_lr: 2e-3,
            lora_lr: 1e-3,
            lora_steps: 100,
            lora_batch: 32,
        }
    }
}

/// One generated creative. Product dimensions equal the item's original image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Creative {
    pub item_id: usize,
    pub latent: Vec<f64>,
    pub prompt_tokens: Vec<usize>,
    pub seed: u64,
    pub round: usize,
}

/// An (image, conditioning text) pair for the denoising loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseExample {
    pub item_id: usize,
    pub latent: Vec<f64>,
    pub tokens: Vec<usize>,
}

/// Toy latent diffusion generator: frozen orthogonal VAE, frozen prompt
/// encoder, an MLP noise predictor and rank-`r` adapters on each of its
/// linear layers.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub schedule: DiffusionSchedule,
    latent_dim: usize,
    style_dim: usize,
    /// `vae.q`, `tau.w`, `eps.*` and `lora.*`.
    pub params: ParamSet,
}

fn layer_dims(latent: usize, style: usize, c: &DiffusionConfig) -> [(usize, usize); LAYERS] {
    let input = 2 * latent + c.time_dim + style;
    [(input, c.hidden), (c.hidden, c.hidden), (c.hidden, latent)]
}

/// Sinusoidal embedding of integer timesteps, one row per entry.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("sized above")
}

impl DiffusionModel {
    pub fn new(world: &World, config: &DiffusionConfig, seed: u64) -> Result<Self> {
        if config.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        let schedule = make_schedule(config.train_steps, config.beta_min, config.beta_max)?;
        let (d, s) = (world.latent_dim(), world.config.style_dim);
        let mut rng = rng_for(seed, &[stream::DIFFUSION_INIT]);
        let mut params = ParamSet::new();
        params.insert("vae.q", Tensor::random_orthogonal(d, &mut rng));
        params.insert("tau.w", Tensor::random_orthogonal(s, &mut rng));
        for (i, (din, dout)) in layer_dims(d, s, config).into_iter().enumerate() {
            let mut w = init_weight(din, dout, &mut rng);
            if i == LAYERS - 1 {
                w = w.map(|v| 0.1 * v);
            }
            params.insert(format!("eps.l{i}.w"), w);
            params.insert(format!("eps.l{i}.b"), Tensor::zeros(&[1, dout]));
            params.insert(
                format!("lora.l{i}.a"),
                Tensor::randn(&[din, config.lora_rank], 1.0 / (din as f64).sqrt(), &mut rng),
            );
            params.insert(format!("lora.l{i}.b"), Tensor::zeros(&[config.lora_rank, dout]));
        }
        Ok(Self { config: config.clone(), schedule, latent_dim: d, style_dim: s, params })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// The trainable adapter parameters (θ_l).
    pub fn lora_params(&self) -> ParamSet {
        self.params.with_prefix(LORA_PREFIX)
    }

    pub fn base_params(&self) -> ParamSet {
        self.params.with_prefix(BASE_PREFIX)
    }

    pub fn set_lora(&mut self, lora: &ParamSet) {
        self.params.merge(lora);
    }

    /// Resets every adapter to a zero update.
    pub fn zero_lora(&mut self) {
        for i in 0..LAYERS {
            let name = format!("lora.l{i}.b");
            let shape = self.params.get(&name).expect("layer exists").shape().to_vec();
            self.params.insert(name, Tensor::zeros(&shape));
        }
    }

    fn vae(&self) -> &Tensor {
        self.params.get("vae.q").expect("vae present")
    }

    pub fn vae_encode(&self, x: &[f64]) -> Vec<f64> {
        self.vae().matvec(x)
    }

    pub fn vae_decode(&self, z: &[f64]) -> Vec<f64> {
        // orthogonal: the inverse is the transpose
        let q = self.vae();
        let d = self.latent_dim;
        (0..d).map(|j| (0..d).map(|i| q.at(i, j) * z[i]).sum()).collect()
    }

    /// Prompt conditioning: mean token style through the frozen `tau` layer.
    pub fn prompt_condition(&self, world: &World, tokens: &[usize]) -> Vec<f64> {
        let m = world.mean_token_style(tokens);
        let w = self.params.get("tau.w").expect("tau present");
        (0..self.style_dim).map(|j| (0..self.style_dim).map(|i| m[i] * w.at(i, j)).sum()).collect()
    }

    /// Encoded product-only image (background zeroed): the inpainting condition.
    pub fn masked_condition(&self, item: &Item) -> Vec<f64> {
        let masked: Vec<f64> = item
            .base_latent
            .data()
            .iter()
            .zip(&item.saliency_mask)
            .map(|(v, &m)| if m == 1 { *v } else { 0.0 })
            .collect();
        self.vae_encode(&masked)
    }

    /// Noise prediction for a batch. `inpaint` is `[n × 2d]` (noised latent
    /// concatenated with the masked-image latent), `temb` `[n × time_dim]`,
    /// `cond` `[n × style_dim]`.
    pub fn eps_forward(&self, g: &mut Graph, binder: &Binder, inpaint: Var, temb: Var, cond: Var) -> Result<Var> {
        let mut h = g.concat_cols(&[inpaint, temb, cond])?;
        let expected = layer_dims(self.latent_dim, self.style_dim, &self.config)[0].0;
        if g.value(h).cols() != expected {
            return Err(Error::Shape(format!(
                "noise predictor expects {expected} input features, got {}",
                g.value(h).cols()
            )));
        }
        for i in 0..LAYERS {
            let w = binder.var(g, &format!("eps.l{i}.w"))?;
            let b = binder.var(g, &format!("eps.l{i}.b"))?;
            let a_l = binder.var(g, &format!("lora.l{i}.a"))?;
            let b_l = binder.var(g, &format!("lora.l{i}.b"))?;
            let w_eff = lora_weight(g, w, a_l, b_l, self.config.lora_alpha, self.config.lora_rank)?;
            h = affine(g, h, w_eff, b)?;
            if i + 1 < LAYERS {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Plain-tensor wrapper around [`Self::eps_forward`] with frozen weights.
    pub fn eps_predict(&self, inpaint: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(inpaint.clone());
        let t = g.constant(time_embedding(ts, self.config.time_dim));
        let c = g.constant(cond.clone());
        let out = self.eps_forward(&mut g, &Binder::frozen(&self.params), x, t, c)?;
        Ok(g.value(out).clone())
    }

    /// Builds the denoising loss `mean_n ||ε - ε̂||²` for a batch. Timesteps and
    /// noise come from `rng`.
    pub fn denoise_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        binder: &Binder,
        world: &World,
        batch: &[DenoiseExample],
        rng: &mut R,
    ) -> Result<Var> {
        let d = self.latent_dim;
        let n = batch.len();
        let mut inpaint = Vec::with_capacity(n * 2 * d);
        let mut eps_all = Vec::with_capacity(n * d);
        let mut cond = Vec::with_capacity(n * self.style_dim);
        let mut ts = Vec::with_capacity(n);
        for ex in batch {
            let item = world.item(ex.item_id)?;
            let t = rng.random_range(1..=self.schedule.steps());
            let eps = Tensor::randn(&[d], 1.0, rng).into_data();
            let z = self.vae_encode(&ex.latent);
            let zt = noise_with(&z, &eps, self.schedule.alpha_bar(t)?);
            inpaint.extend_from_slice(&zt);
            inpaint.extend(self.masked_condition(item));
            eps_all.extend_from_slice(&eps);
            cond.extend(self.prompt_condition(world, &ex.tokens));
            ts.push(t);
        }
        let x = g.constant(Tensor::matrix(n, 2 * d, inpaint)?);
        let temb = g.constant(time_embedding(&ts, self.config.time_dim));
        let c = g.constant(Tensor::matrix(n, self.style_dim, cond)?);
        let eps_hat = self.eps_forward(g, binder, x, temb, c)?;
        let eps = g.constant(Tensor::matrix(n, d, eps_all)?);
        eps_loss(g, eps, eps_hat)
    }

    /// Trains the base noise predictor on natural images with random prompts.
    /// Adapters stay untouched. Returns the mean loss of the last 50 steps.
    pub fn pretrain(&mut self, world: &World, seed: u64) -> Result<f64> {
        let mut rng = rng_for(seed, &[stream::DIFFUSION_PRETRAIN]);
        let mut adam = Adam::new(self.config.pretrain_lr);
        let mut recent = Vec::new();
        for step in 0..self.config.pretrain_steps {
            let batch: Vec<DenoiseExample> = (0..self.config.pretrain_batch)
                .map(|_| {
                    let item = &world.items[rng.random_range(0..world.items.len())];
                    let tokens = world.random_prompt(&mut rng);
                    DenoiseExample { item_id: item.id, latent: world.natural_latent(item, &tokens, &mut rng), tokens }
                })
                .collect();
            let mut g = Graph::new();
            let loss = {
                let binder = Binder::prefix(&self.params, BASE_PREFIX);
                self.denoise_loss(&mut g, &binder, world, &batch, &mut rng)?
            };
            let grads = g.backward(loss)?.into_params();
            adam.step(&mut self.params, &grads)?;
            if step + 50 >= self.config.pretrain_steps {
                recent.push(g.value(loss).item());
            }
        }
        Ok(recent.iter().sum::<f64>() / recent.len().max(1) as f64)
    }

    /// One adapter update on a batch of retained creatives. Only `lora.*`
    /// parameters are bound as trainable. An empty batch is a no-op.
    pub fn lora_train_step<R: Rng + ?Sized>(
        &mut self,
        world: &World,
        batch: &[DenoiseExample],
        adam: &mut Adam,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        if batch.is_empty() {
            warn!("LoRA training skipped: no retained creatives");
            return Ok(None);
        }
        let mut g = Graph::new();
        let loss = {
            let binder = Binder::prefix(&self.params, LORA_PREFIX);
            self.denoise_loss(&mut g, &binder, world, batch, rng)?
        };
        let grads = g.backward(loss)?.into_params();
        debug_assert!(grads.keys().all(|k| k.starts_with(LORA_PREFIX)));
        adam.step(&mut self.params, &grads)?;
        Ok(Some(g.value(loss).item()))
    }

    /// Deterministic (DDIM, η = 0) inpainting generation of one creative per
    /// seed. Product dimensions are copied from the item's original image.
    pub fn generate_batch(
        &self,
        world: &World,
        item: &Item,
        prompt: &[usize],
        seeds: &[u64],
        steps: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if steps == 0 {
            return Err(Error::Config("generation needs at least one step".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Contract("generation prompt is empty".into()));
        }
        let d = self.latent_dim;
        let n = seeds.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut z: Vec<Vec<f64>> = seeds
            .iter()
            .map(|&s| Tensor::randn(&[d], 1.0, &mut rng_for(s, &[stream::GENERATE])).into_data())
            .collect();
        let masked = self.masked_condition(item);
        let cond_row = self.prompt_condition(world, prompt);
        let cond = Tensor::matrix(n, self.style_dim, cond_row.repeat(n))?;

        let timesteps = self.schedule.sampling_timesteps(steps);
        let clip = self.config.clip_sample;
        for (k, &t) in timesteps.iter().enumerate() {
            let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
            let mut inpaint = Vec::with_capacity(n * 2 * d);
            for zi in &z {
                inpaint.extend_from_slice(zi);
                inpaint.extend_from_slice(&masked);
            }
            let eps_hat = self.eps_predict(&Tensor::matrix(n, 2 * d, inpaint)?, &vec![t; n], &cond)?;
            let (ab, ab_prev) = (self.schedule.alpha_bar(t)?, self.schedule.alpha_bar(t_prev)?);
            for (i, zi) in z.iter_mut().enumerate() {
                let e = eps_hat.row_slice(i);
                for (zj, ej) in zi.iter_mut().zip(e) {
                    let mut x0 = (*zj - (1.0 - ab).sqrt() * ej) / ab.sqrt();
                    if clip > 0.0 {
                        x0 = x0.clamp(-clip, clip);
                    }
                    *zj = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * ej;
                }
            }
        }

        let base = item.base_latent.data();
        Ok(z.iter()
            .map(|zi| {
                let mut x = self.vae_decode(zi);
                for (j, xj) in x.iter_mut().enumerate() {
                    if item.is_product_dim(j) {
                        *xj = base[j];
                    }
                }
                x
            })
            .collect())
    }

    pub fn generate(&self, world: &World, item: &Item, prompt: &[usize], seed: u64, steps: usize) -> Result<Creative> {
        let latent = self.generate_batch(world, item, prompt, &[seed], steps)?.remove(0);
        Ok(Creative { item_id: item.id, latent, prompt_tokens: prompt.to_vec(), seed, round: 0 })
    }
}

/// `mean over rows of ||ε - ε̂||²`.
pub fn eps_loss(g: &mut Graph, eps: Var, eps_hat: Var) -> Result<Var> {
    let n = g.value(eps).rows().max(1);
    let diff = g.sub(eps, eps_hat)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / n as f64)
}
