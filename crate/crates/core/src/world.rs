//! Synthetic marketplace: items, user groups, a style vocabulary and the
//! ground-truth click oracle, plus the deterministic stand-ins for the
//! saliency detector and the captioner.
//!
//! Every creative lives in a `latent_dim`-dimensional "image" space. The
//! first `product_dims` coordinates are the product itself and are fixed by
//! the item; the rest is background. A fixed projector `S` maps an image to
//! a `style_dim`-dimensional style space in which user preferences and token
//! styles live. Ground-truth CTR is `sigmoid(<u_group, S z> + b_item)`.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};
use crate::rng::{rng_for, stream};

pub const CAPTION_LEN: usize = 5;
pub const CTR_FLOOR: f64 = 1e-4;

const FORMAT: &str = "ccycle-world";
const FORMAT_VERSION: u32 = 1;

const SURFACES: [&str; 64] = [
    "minimalistic", "translucent", "electronic", "golden", "pure", "minimal", "realistic", "vivid",
    "pastel", "neon", "rustic", "marble", "floral", "petals", "water", "glossy",
    "matte", "cinematic", "studio", "sunlit", "moody", "vintage", "futuristic", "organic",
    "wooden", "silk", "velvet", "crystal", "metallic", "chrome", "tropical", "autumn",
    "winter", "summer", "urban", "nature", "ocean", "desert", "forest", "bokeh",
    "soft", "bold", "warm", "cool", "airy", "dramatic", "playful", "elegant",
    "luxury", "cozy", "clean", "geometric", "abstract", "retro", "dreamy", "festive",
    "sparkling", "smoky", "sandy", "leafy", "rainy", "bright", "dusk", "linen",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceMode {
    /// Preferences share a common direction plus a group-specific deviation.
    Shared,
    /// Group preferences alternate between `+c` and `-c`.
    Opposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub style_dim: usize,
    pub vocab_size: usize,
    pub n_groups: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub product_dims: usize,
    /// Tokens per generation prompt (`p`).
    pub prompt_len: usize,
    pub title_len: usize,
    pub preference: PreferenceMode,
    /// Weight of the group-specific deviation in `Shared` mode.
    pub group_spread: f64,
    /// How strongly a prompt's mean token style shows up in natural backgrounds.
    pub background_gain: f64,
    /// Standard deviation of background noise in natural images.
    pub background_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            style_dim: 8,
            vocab_size: 64,
            n_groups: 4,
            n_items: 50,
            n_categories: 5,
            product_dims: 8,
            prompt_len: 4,
            title_len: 4,
            preference: PreferenceMode::Shared,
            group_spread: 0.6,
            background_gain: 1.0,
            background_noise: 1.0,
        }
    }
}

impl WorldConfig {
    /// Two groups with exactly opposed preferences.
    pub fn opposed_pair() -> Self {
        Self { n_groups: 2, preference: PreferenceMode::Opposed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("style_dim", self.style_dim),
            ("vocab_size", self.vocab_size),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("product_dims", self.product_dims),
            ("prompt_len", self.prompt_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world.{name} must be positive")));
        }
        if self.n_groups < 2 {
            return Err(Error::Config("world needs at least 2 user groups".into()));
        }
        if self.vocab_size < 2 * self.prompt_len {
            return Err(Error::Config(format!(
                "vocab_size {} < 2 * prompt_len {}",
                self.vocab_size, self.prompt_len
            )));
        }
        if self.vocab_size < CAPTION_LEN || self.title_len > self.vocab_size {
            return Err(Error::Config("vocabulary too small for captions/titles".into()));
        }
        if self.product_dims >= self.latent_dim {
            return Err(Error::Config("need at least one background dimension".into()));
        }
        if self.latent_dim - self.product_dims < self.style_dim {
            return Err(Error::Config("background must span the style space".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub category: usize,
    /// The seller's original image.
    pub base_latent: Tensor,
    /// 1 marks a product dimension, 0 a background dimension.
    pub saliency_mask: Vec<u8>,
    pub popularity: f64,
    pub price_weight: f64,
    pub title_tokens: Vec<usize>,
}

impl Item {
    pub fn is_product_dim(&self, j: usize) -> bool {
        self.saliency_mask[j] == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGroup {
    pub id: usize,
    pub age_band: usize,
    pub gender_band: usize,
    pub preference: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub id: usize,
    pub surface: String,
    pub style: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub items: Vec<Item>,
    pub user_groups: Vec<UserGroup>,
    pub vocab: Vec<Token>,
    /// `style_dim × latent_dim`.
    pub style_projector: Tensor,
    /// `latent_dim × style_dim`; maps a mean token style to a background pattern.
    pub background_map: Tensor,
}

fn unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v = Tensor::randn(&[dim], 1.0, rng).into_data();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn make_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let c = config;
    let mut rng = rng_for(seed, &[stream::WORLD]);

    let style_projector =
        Tensor::randn(&[c.style_dim, c.latent_dim], 1.0 / (c.latent_dim as f64).sqrt(), &mut rng);

    // background_map = gain * pinv(S_bg), zero on product rows, so that
    // S · (background_map · m) = gain · m.
    let bg_dims = c.latent_dim - c.product_dims;
    let mut s_bg = Vec::with_capacity(c.style_dim * bg_dims);
    for r in 0..c.style_dim {
        s_bg.extend_from_slice(&style_projector.row_slice(r)[c.product_dims..]);
    }
    let s_bg = Tensor::matrix(c.style_dim, bg_dims, s_bg)?;
    let gram_inv = s_bg.matmul(&s_bg.transpose())?.inverse()?;
    let pinv = s_bg.transpose().matmul(&gram_inv)?;
    let mut bmap = vec![0.0; c.latent_dim * c.style_dim];
    for i in 0..bg_dims {
        for j in 0..c.style_dim {
            bmap[(c.product_dims + i) * c.style_dim + j] = c.background_gain * pinv.at(i, j);
        }
    }
    let background_map = Tensor::matrix(c.latent_dim, c.style_dim, bmap)?;

    let vocab = (0..c.vocab_size)
        .map(|id| Token {
            id,
            surface: match SURFACES.get(id) {
                Some(s) => (*s).to_string(),
                None => format!("style{id}"),
            },
            style: Tensor::randn(&[c.style_dim], 1.0, &mut rng),
        })
        .collect();

    let common = unit(c.style_dim, &mut rng);
    let user_groups = (0..c.n_groups)
        .map(|id| {
            let pref = match c.preference {
                PreferenceMode::Shared => {
                    let dev = unit(c.style_dim, &mut rng);
                    normalized(common.iter().zip(&dev).map(|(a, b)| a + c.group_spread * b).collect())
                }
                PreferenceMode::Opposed => {
                    let sign = if id % 2 == 0 { 1.0 } else { -1.0 };
                    common.iter().map(|x| sign * x).collect()
                }
            };
            UserGroup { id, age_band: id / 2, gender_band: id % 2, preference: Tensor::vector(pref) }
        })
        .collect();

    let mask: Vec<u8> = (0..c.latent_dim).map(|j| u8::from(j < c.product_dims)).collect();
    let items = (0..c.n_items)
        .map(|id| {
            let mut z = Tensor::randn(&[c.latent_dim], 1.0, &mut rng);
            for j in c.product_dims..c.latent_dim {
                z.data_mut()[j] *= c.background_noise;
            }
            let title_tokens = {
                let mut t = sample(&mut rng, c.vocab_size, c.title_len).into_vec();
                t.sort_unstable();
                t
            };
            Item {
                id,
                category: id % c.n_categories,
                base_latent: z,
                saliency_mask: mask.clone(),
                popularity: rng.random_range(-1.0..=1.0),
                price_weight: rng.random_range(0.5..=2.0),
                title_tokens,
            }
        })
        .collect();

    Ok(World {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        seed,
        config: config.clone(),
        items,
        user_groups,
        vocab,
        style_projector,
        background_map,
    })
}

impl World {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn item(&self, id: usize) -> Result<&Item> {
        self.items.get(id).ok_or_else(|| Error::Index(format!("no item {id}")))
    }

    pub fn group(&self, id: usize) -> Result<&UserGroup> {
        self.user_groups.get(id).ok_or_else(|| Error::Index(format!("no user group {id}")))
    }

    /// `S · z`.
    pub fn style_of(&self, latent: &[f64]) -> Vec<f64> {
        self.style_projector.matvec(latent)
    }

    /// Mean style vector of a token set; zero for an empty set.
    pub fn mean_token_style(&self, tokens: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.config.style_dim];
        if tokens.is_empty() {
            return m;
        }
        for &t in tokens {
            for (o, s) in m.iter_mut().zip(self.vocab[t].style.data()) {
                *o += s;
            }
        }
        m.iter_mut().for_each(|v| *v /= tokens.len() as f64);
        m
    }

    /// Ground-truth click probability of `latent` shown for `item` to `group`.
    pub fn true_ctr(&self, group: &UserGroup, item: &Item, latent: &[f64]) -> f64 {
        let style = self.style_of(latent);
        let affinity: f64 = group.preference.data().iter().zip(&style).map(|(u, s)| u * s).sum();
        sigmoid(affinity + item.popularity).clamp(CTR_FLOOR, 1.0 - CTR_FLOOR)
    }

    /// Click probability averaged over user groups (uniform traffic split).
    pub fn mean_true_ctr(&self, item: &Item, latent: &[f64]) -> f64 {
        let total: f64 = self.user_groups.iter().map(|g| self.true_ctr(g, item, latent)).sum();
        total / self.user_groups.len() as f64
    }

    /// Captioner stand-in: the `CAPTION_LEN` tokens whose style best matches
    /// `S · latent`, best first, ties broken by ascending id.
    pub fn caption(&self, latent: &[f64]) -> Vec<usize> {
        let style = self.style_of(latent);
        let mut scored: Vec<(f64, usize)> =
            self.vocab.iter().map(|t| (t.style.data().iter().zip(&style).map(|(a, b)| a * b).sum(), t.id)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(CAPTION_LEN).map(|(_, id)| id).collect()
    }

    /// Saliency stand-in: the mask ships with the item.
    pub fn saliency_mask<'a>(&self, item: &'a Item) -> &'a [u8] {
        &item.saliency_mask
    }

    /// A natural image of `item` whose background follows `tokens`:
    /// `background_map · mean_style(tokens) + noise`, product dims copied.
    pub fn natural_latent<R: Rng + ?Sized>(&self, item: &Item, tokens: &[usize], rng: &mut R) -> Vec<f64> {
        let m = self.mean_token_style(tokens);
        let pattern = self.background_map.matvec(&m);
        let noise = Tensor::randn(&[self.latent_dim()], self.config.background_noise, rng);
        (0..self.latent_dim())
            .map(|j| {
                if item.is_product_dim(j) {
                    item.base_latent.data()[j]
                } else {
                    pattern[j] + noise.data()[j]
                }
            })
            .collect()
    }

    /// `prompt_len` distinct tokens drawn uniformly.
    pub fn random_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut t = sample(rng, self.vocab_size(), self.config.prompt_len).into_vec();
        t.sort_unstable();
        t
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s)?;
        if w.format != FORMAT || w.version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported world format {} v{}", w.format, w.version)));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Binomial click draw, deterministic given `seed`.
pub fn sample_clicks(ctr: f64, impressions: u64, seed: u64) -> u64 {
    if impressions == 0 || ctr <= 0.0 {
        return 0;
    }
    if ctr >= 1.0 {
        return impressions;
    }
    let mut rng = rng_for(seed, &[stream::CLICKS]);
    Binomial::new(impressions, ctr).expect("ctr in (0,1)").sample(&mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn world() -> World {
        make_world(&WorldConfig::default(), 7).unwrap()
    }

    #[test]
    fn default_dimensions() {
        let w = world();
        assert_eq!(w.latent_dim(), 32);
        assert_eq!(w.config.style_dim, 8);
        assert_eq!(w.vocab_size(), 64);
        assert_eq!(w.user_groups.len(), 4);
        assert_eq!(w.items.len(), 50);
        for g in &w.user_groups {
            assert!((g.preference.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_world_bytes() {
        let a = make_world(&WorldConfig::default(), 3).unwrap();
        let b = make_world(&WorldConfig::default(), 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = make_world(&WorldConfig::default(), 4).unwrap();
        assert_ne!(a.style_projector, c.style_projector);
    }

    #[test]
    fn serialization_roundtrip_is_exact() {
        let w = world();
        let back = World::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn vocab_must_have_slack() {
        let cfg = WorldConfig { vocab_size: 7, prompt_len: 4, ..WorldConfig::default() };
        assert!(matches!(make_world(&cfg, 1), Err(Error::Config(_))));
        let cfg = WorldConfig { n_groups: 1, ..WorldConfig::default() };
        assert!(matches!(make_world(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn background_map_inverts_projector_on_style() {
        let w = world();
        let m = vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.0, -0.3, 0.7];
        let pattern = w.background_map.matvec(&m);
        assert!(pattern[..8].iter().all(|&v| v == 0.0));
        let back = w.style_of(&pattern);
        for (a, b) in back.iter().zip(&m) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn group_with(pref: Vec<f64>) -> UserGroup {
        UserGroup { id: 0, age_band: 0, gender_band: 0, preference: Tensor::vector(pref) }
    }

    #[test]
    fn true_ctr_examples() {
        let mut w = world();
        let mut item = w.items[0].clone();
        item.popularity = 0.0;
        let zero = vec![0.0; 32];
        let g = w.user_groups[0].clone();
        assert_eq!(w.true_ctr(&g, &item, &zero), 0.5);

        // make S the first 8 coordinates so S·latent is easy to set by hand
        let mut s = Tensor::zeros(&[8, 32]);
        for i in 0..8 {
            s.data_mut()[i * 32 + i] = 1.0;
        }
        w.style_projector = s;
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        let g = group_with(e1);
        let mut latent = vec![0.0; 32];
        latent[1] = 3.0;
        assert_eq!(w.true_ctr(&g, &item, &latent), 0.5);
        latent[0] = 2.0;
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((w.true_ctr(&g, &item, &latent) - expect).abs() < 1e-15);
        assert!((expect - 0.880_797_077_977_882_4).abs() < 1e-12);
    }

    #[test]
    fn true_ctr_is_clamped() {
        let w = world();
        let mut item = w.items[0].clone();
        item.popularity = 1e6;
        assert_eq!(w.true_ctr(&w.user_groups[0], &item, &[0.0; 32]), 1.0 - CTR_FLOOR);
        item.popularity = -1e6;
        assert_eq!(w.true_ctr(&w.user_groups[0], &item, &[0.0; 32]), CTR_FLOOR);
    }

    #[test]
    fn true_ctr_monotone_in_aligned_component() {
        let w = world();
        let g = &w.user_groups[1];
        let item = &w.items[3];
        // move the latent along background_map · u, which shifts <u, S z> by the step
        let dir = w.background_map.matvec(g.preference.data());
        let base = w.items[3].base_latent.data().to_vec();
        let mut prev = 0.0;
        for step in 0..10 {
            let z: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + 0.3 * step as f64 * d).collect();
            let ctr = w.true_ctr(g, item, &z);
            assert!(ctr > prev);
            prev = ctr;
        }
    }

    #[test]
    fn click_sampling_edges() {
        assert_eq!(sample_clicks(0.0, 100, 1), 0);
        assert_eq!(sample_clicks(1.0, 100, 1), 100);
        assert_eq!(sample_clicks(0.4, 0, 1), 0);
        assert_eq!(sample_clicks(0.4, 1000, 9), sample_clicks(0.4, 1000, 9));
    }

    #[test]
    fn click_sampling_mean_concentrates() {
        let n = 10_000;
        let mean = (0..100).map(|seed| sample_clicks(0.3, n, seed) as f64 / n as f64).sum::<f64>() / 100.0;
        assert!((0.29..=0.31).contains(&mean), "{mean}");
    }

    #[test]
    fn click_sampling_binomial_mean_within_three_se() {
        let trials = 10_000u64;
        let total: u64 = (0..trials).map(|s| sample_clicks(0.2, 1, 1_000 + s)).sum();
        let mean = total as f64 / trials as f64;
        let se = (0.2 * 0.8 / trials as f64).sqrt();
        assert!((mean - 0.2).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn caption_of_zero_latent_is_first_ids() {
        let w = world();
        assert_eq!(w.caption(&[0.0; 32]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn caption_contains_dominant_token() {
        let mut w = world();
        let dominant = 17;
        let boosted: Vec<f64> = w.vocab[dominant].style.data().iter().map(|v| v * 50.0).collect();
        w.vocab[dominant].style = Tensor::vector(boosted);
        let mut rng = rng_for(5, &[]);
        let item = w.items[0].clone();
        let z = w.natural_latent(&item, &[dominant], &mut rng);
        let style = w.style_of(&z);
        // brute force: dot products for every token
        let mut best = (f64::NEG_INFINITY, 0);
        for t in &w.vocab {
            let d: f64 = t.style.data().iter().zip(&style).map(|(a, b)| a * b).sum();
            if d > best.0 {
                best = (d, t.id);
            }
        }
        assert_eq!(best.1, dominant);
        let cap = w.caption(&z);
        assert!(cap.contains(&dominant));
        assert_eq!(cap, w.caption(&z));
    }

    #[test]
    fn masks_match_default_layout() {
        let w = world();
        for item in &w.items {
            let mask = w.saliency_mask(item);
            assert_eq!(mask, item.saliency_mask.as_slice());
            assert!(mask.contains(&1) && mask.contains(&0));
            assert!(mask[..8].iter().all(|&m| m == 1));
            assert!(mask[8..].iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn opposed_world_has_antipodal_groups() {
        let w = make_world(&WorldConfig::opposed_pair(), 2).unwrap();
        let (a, b) = (&w.user_groups[0].preference, &w.user_groups[1].preference);
        assert!((a.dot(b) + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn caption_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let w = world();
            let mut rng = rng_for(seed, &[]);
            let z = Tensor::randn(&[32], 1.0, &mut rng).into_data();
            let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
            let mut a = w.caption(&z);
            let mut b = w.caption(&scaled);
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
