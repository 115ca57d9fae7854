//! Guided restoration: two reverse steps under positive and negative prompts
//! fused as `z_pos + λ·(z_pos − z_neg)`, wrapped in encode → sample → decode.

use serde::{Deserialize, Serialize};

use crate::diffusion::{predict_eps, step_from_eps, ChainNoise, NoiseSchedule, Sampler};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::image::Image;
use crate::lora::LoraAdapter;
use crate::net::{ConditioningBundle, Model, NetParams};
use crate::prompt::PromptId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Fuse the two post-step latents.
    #[default]
    Latent,
    /// Fuse noise predictions as `ε_neg + λ·(ε_pos − ε_neg)`, then step once.
    NoisePrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda_cfg: f64,
    pub pos: Vec<PromptId>,
    pub neg: Vec<PromptId>,
    pub steps: usize,
    pub deterministic: bool,
    pub seed: u64,
    #[serde(default)]
    pub fusion: Fusion,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_cfg: 1.0,
            pos: vec![PromptId::HighQuality],
            neg: vec![PromptId::LowQuality],
            steps: 200,
            deterministic: false,
            seed: 0,
            fusion: Fusion::Latent,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("guidance needs at least one sampling step"));
        }
        if !(self.lambda_cfg >= 0.0) || !self.lambda_cfg.is_finite() {
            return Err(Error::config(format!("lambda_cfg must be >= 0, got {}", self.lambda_cfg)));
        }
        if self.pos.is_empty() || self.neg.is_empty() {
            return Err(Error::config("pos and neg prompts must be non-empty"));
        }
        Ok(())
    }

    /// Content words of the positive prompt (all of it when it has none).
    pub fn content(&self) -> Vec<PromptId> {
        let fam: Vec<PromptId> = self.pos.iter().copied().filter(|p| p.is_family()).collect();
        if fam.is_empty() {
            self.pos.clone()
        } else {
            fam
        }
    }
}

/// `z_pos + λ·(z_pos − z_neg)`.
pub fn fuse(z_pos: &Tensor, z_neg: &Tensor, lambda: f64) -> Result<Tensor> {
    z_pos.zip_map(z_neg, |p, n| p + lambda * (p - n))
}

/// One guided reverse step at schedule index `t`. Both branches share the
/// same `noise`.
pub fn cfg_step(
    model: &Model,
    z_t: &Tensor,
    t: usize,
    z_lq: &Tensor,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let bundle = |prompts: &[PromptId]| -> Result<ConditioningBundle> {
        Ok(ConditioningBundle {
            z_lq: z_lq.clone(),
            prompt: prompts.to_vec(),
            prompt_embedding: model.prompt_embedding(prompts)?,
        })
    };
    let sampler = Sampler::from_flag(cfg.deterministic);
    if sampler.needs_noise(t) && noise.is_none() {
        return Err(Error::contract(format!("guided step at t={t} needs a noise draw")));
    }
    let pos = bundle(&cfg.pos)?;
    let eps_pos = predict_eps(model, z_t, t, &pos, sched)?;
    if cfg.lambda_cfg == 0.0 && cfg.fusion == Fusion::Latent {
        return step_from_eps(z_t, &eps_pos, t, sched, sampler, noise);
    }
    let neg = bundle(&cfg.neg)?;
    let eps_neg = predict_eps(model, z_t, t, &neg, sched)?;
    match cfg.fusion {
        Fusion::Latent => {
            let z_pos = step_from_eps(z_t, &eps_pos, t, sched, sampler, noise)?;
            let z_neg = step_from_eps(z_t, &eps_neg, t, sched, sampler, noise)?;
            fuse(&z_pos, &z_neg, cfg.lambda_cfg)
        }
        Fusion::NoisePrediction => {
            let l = cfg.lambda_cfg;
            let eps = eps_neg.zip_map(&eps_pos, |n, p| n + l * (p - n))?;
            step_from_eps(z_t, &eps, t, sched, sampler, noise)
        }
    }
}

/// Encodes `lq`, runs the guided chain over `cfg.steps` respaced steps of
/// `sched`, and decodes to an image clamped to `[0, 1]`.
pub fn restore(
    lq: &Image,
    params: &NetParams,
    adapters: &[LoraAdapter],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Image> {
    cfg.validate()?;
    let model = Model::new(params, adapters, crate::net::Trainable::Nothing);
    model.check_image(&[lq.channels(), lq.height(), lq.width()])?;
    let chain = sched.respace(cfg.steps)?;
    let z_lq = model.condition(lq, &cfg.content())?.z_lq;
    let sampler = Sampler::from_flag(cfg.deterministic);
    let noise = ChainNoise::new(cfg.seed, z_lq.shape());
    let mut z = noise.initial();
    for t in (0..chain.len()).rev() {
        let n = sampler.needs_noise(t).then(|| noise.at(t));
        z = cfg_step(&model, &z, t, &z_lq, cfg, &chain, n.as_ref())?;
    }
    Ok(model.decode(&z)?.clamped())
}

/// [`restore`] over many images; image `i` uses seed `cfg.seed + i`.
pub fn restore_batch(
    images: &[Image],
    params: &NetParams,
    adapters: &[LoraAdapter],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    par: Parallelism,
) -> Result<Vec<Image>> {
    par.try_map(images.len(), |i| {
        let c = GuidanceConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        restore(&images[i], params, adapters, &c, sched)
    })
}
