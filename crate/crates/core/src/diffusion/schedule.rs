use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear β noise schedule with cumulative products `ᾱ_t = Π_{s≤t} (1 - β_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    /// `alphas_bar[0] = 1`; `alphas_bar[t]` for `t = 1..=T`.
    alphas_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alphas_bar = Vec::with_capacity(steps + 1);
    alphas_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    Ok(DiffusionSchedule { betas, alphas_bar })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t = 0..=T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {t} outside 0..={}", self.steps())))
    }

    /// Evenly spaced descending timesteps for deterministic sampling, e.g.
    /// `T = 50, n = 10 → [50, 45, ..., 5]`.
    pub fn sampling_timesteps(&self, n: usize) -> Vec<usize> {
        let n = n.clamp(1, self.steps());
        (1..=n).rev().map(|i| i * self.steps() / n).collect()
    }
}

/// `z_t = √ᾱ_t · z + √(1 - ᾱ_t) · ε`. `t = 0` is the clean latent.
pub fn add_noise(z: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if z.len() != eps.len() {
        return Err(Error::Shape(format!("latent {} vs noise {}", z.len(), eps.len())));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(noise_with(z, eps, ab))
}

pub(crate) fn noise_with(z: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.iter().zip(eps).map(|(zi, ei)| a * zi + b * ei).collect()
}
