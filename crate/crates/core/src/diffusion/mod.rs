//! Toy latent diffusion with inpainting and low-rank adapters.

pub mod lora;
mod model;
pub mod schedule;

pub use lora::{lora_apply, lora_weight};
pub use model::{
    eps_loss, time_embedding, Creative, DenoiseExample, DiffusionConfig, DiffusionModel, BASE_PREFIX, LORA_PREFIX,
};
pub use schedule::{add_noise, make_schedule, DiffusionSchedule};
