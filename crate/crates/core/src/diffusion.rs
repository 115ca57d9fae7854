//! DDPM noise schedule, closed-form forward diffusion, the ε-prediction
//! objective, and ancestral / deterministic reverse steps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::{same_shape, Tensor};

/// Schedule parameters as stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviations; `sigma[0] == 0`.
    pub sigma: Vec<f64>,
    /// Model timestep for each schedule index. The identity for a fresh
    /// schedule; a strided subset after [`NoiseSchedule::respace`].
    pub timesteps: Vec<usize>,
}

/// Linear β ramp from `beta_start` to `beta_end` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|t| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let mut s = NoiseSchedule::from_alpha_bar(
        cumulative(&beta),
        ScheduleConfig {
            steps: t_steps,
            beta_start,
            beta_end,
        },
        (0..t_steps).collect(),
    );
    // keep the exact ramp rather than the value recovered from ratios
    s.alpha = beta.iter().map(|b| 1.0 - b).collect();
    s.beta = beta;
    s.sigma = posterior_sigma(&s.beta, &s.alpha_bar);
    Ok(s)
}

fn cumulative(beta: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    beta.iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

fn posterior_sigma(beta: &[f64], alpha_bar: &[f64]) -> Vec<f64> {
    (0..beta.len())
        .map(|t| {
            if t == 0 {
                0.0
            } else {
                (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt()
            }
        })
        .collect()
}

impl NoiseSchedule {
    fn from_alpha_bar(alpha_bar: Vec<f64>, config: ScheduleConfig, timesteps: Vec<usize>) -> Self {
        let beta: Vec<f64> = alpha_bar
            .iter()
            .enumerate()
            .map(|(i, &ab)| if i == 0 { 1.0 - ab } else { 1.0 - ab / alpha_bar[i - 1] })
            .collect();
        let alpha = beta.iter().map(|b| 1.0 - b).collect();
        let sigma = posterior_sigma(&beta, &alpha_bar);
        NoiseSchedule {
            config,
            beta,
            alpha,
            alpha_bar,
            sigma,
            timesteps,
        }
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// A shorter chain over `steps` evenly spaced timesteps of this schedule
    /// (always including the first and last), with β recomputed from the
    /// retained ᾱ values so the marginals are unchanged.
    pub fn respace(&self, steps: usize) -> Result<NoiseSchedule> {
        let n = self.len();
        if steps == 0 || steps > n {
            return Err(Error::config(format!(
                "sampling steps must be in 1..={n}, got {steps}"
            )));
        }
        if steps == n {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = if steps == 1 {
            vec![n - 1]
        } else {
            (0..steps)
                .map(|i| ((i * (n - 1)) as f64 / (steps - 1) as f64).round() as usize)
                .collect()
        };
        let alpha_bar = idx.iter().map(|&i| self.alpha_bar[i]).collect();
        let timesteps = idx.iter().map(|&i| self.timesteps[i]).collect();
        Ok(Self::from_alpha_bar(alpha_bar, self.config, timesteps))
    }

    /// The first `len` steps, unchanged.
    pub fn truncate(&self, len: usize) -> Result<NoiseSchedule> {
        if len == 0 || len > self.len() {
            return Err(Error::config(format!(
                "truncated length must be in 1..={}, got {len}",
                self.len()
            )));
        }
        let mut s = self.clone();
        for v in [&mut s.beta, &mut s.alpha, &mut s.alpha_bar, &mut s.sigma] {
            v.truncate(len);
        }
        s.timesteps.truncate(len);
        Ok(s)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::contract(format!(
                "timestep {t} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(x0, eps, "forward_diffuse")?;
    let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// A noise-prediction network. `Cond` is the caller-facing conditioning
/// bundle; `CondVars` is the same bundle bound into a graph.
pub trait Denoiser {
    type Cond;
    type CondVars;

    fn bind_cond(&self, g: &mut Graph, cond: &Self::Cond) -> Result<Self::CondVars>;

    /// Predicted ε for latent `z_t` at model timestep `t`.
    fn predict_noise(&self, g: &mut Graph, z_t: Var, t: usize, cond: &Self::CondVars) -> Result<Var>;
}

/// `‖ε − ε_θ(z_t, t)‖²` (mean over elements) with `z_t` diffused from `x0`.
pub fn ldm_loss<N: Denoiser>(
    g: &mut Graph,
    net: &N,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: &N::CondVars,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let z_t = forward_diffuse(x0, t, eps, sched)?;
    let z = g.constant(z_t);
    let pred = net.predict_noise(g, z, sched.timesteps[t], cond)?;
    let target = g.constant(eps.clone());
    g.mse(pred, target)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// `z_{t−1} = μ + σ_t·noise`.
    #[default]
    Ancestral,
    /// `z_{t−1} = μ`.
    Deterministic,
}

impl Sampler {
    pub fn from_flag(deterministic: bool) -> Self {
        if deterministic {
            Sampler::Deterministic
        } else {
            Sampler::Ancestral
        }
    }

    pub fn needs_noise(self, t: usize) -> bool {
        self == Sampler::Ancestral && t > 0
    }
}

/// One reverse update from a given noise prediction:
/// `μ = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, plus `σ_t·noise` when ancestral.
pub fn step_from_eps(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    sampler: Sampler,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(z_t, eps_hat, "reverse step")?;
    let coef = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let mu = z_t.zip_map(eps_hat, |z, e| (z - coef * e) * inv_sqrt_alpha)?;
    if !sampler.needs_noise(t) {
        return Ok(mu);
    }
    let noise = noise.ok_or_else(|| {
        Error::contract(format!("ancestral reverse step at t={t} needs a noise draw"))
    })?;
    let s = sched.sigma[t];
    mu.zip_map(noise, |m, n| m + s * n)
}

/// Noise prediction at schedule index `t` outside any training graph.
pub fn predict_eps<N: Denoiser>(
    net: &N,
    z_t: &Tensor,
    t: usize,
    cond: &N::Cond,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let mut g = Graph::new();
    let c = net.bind_cond(&mut g, cond)?;
    let z = g.constant(z_t.clone());
    let eps = net.predict_noise(&mut g, z, sched.timesteps[t], &c)?;
    if g.shape(eps) != z_t.shape() {
        return Err(Error::dim(format!(
            "denoiser returned {:?} for latent {:?}",
            g.shape(eps),
            z_t.shape()
        )));
    }
    Ok(g.value(eps).clone())
}

pub fn reverse_step<N: Denoiser>(
    net: &N,
    z_t: &Tensor,
    t: usize,
    cond: &N::Cond,
    sched: &NoiseSchedule,
    sampler: Sampler,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if sampler.needs_noise(t) && noise.is_none() {
        return Err(Error::contract(format!(
            "ancestral reverse step at t={t} needs a noise draw"
        )));
    }
    let eps = predict_eps(net, z_t, t, cond, sched)?;
    step_from_eps(z_t, &eps, t, sched, sampler, noise)
}

/// Seeded unit-Gaussian start and per-step noise for a sampling chain.
pub struct ChainNoise {
    stream: SeedStream,
    shape: Vec<usize>,
}

impl ChainNoise {
    pub fn new(seed: u64, shape: &[usize]) -> Self {
        ChainNoise {
            stream: SeedStream::new(seed).split("sample"),
            shape: shape.to_vec(),
        }
    }

    pub fn initial(&self) -> Tensor {
        Tensor::randn(&self.shape, 1.0, &mut self.stream.split("start").rng())
    }

    pub fn at(&self, t: usize) -> Tensor {
        Tensor::randn(&self.shape, 1.0, &mut self.stream.index(t as u64).rng())
    }
}

/// Runs the reverse chain from `t = T−1` to `0` starting at seeded noise.
pub fn sample<N: Denoiser>(
    net: &N,
    shape: &[usize],
    cond: &N::Cond,
    sched: &NoiseSchedule,
    seed: u64,
    deterministic: bool,
) -> Result<Tensor> {
    let sampler = Sampler::from_flag(deterministic);
    let noise = ChainNoise::new(seed, shape);
    let mut z = noise.initial();
    for t in (0..sched.len()).rev() {
        let n = sampler.needs_noise(t).then(|| noise.at(t));
        z = reverse_step(net, &z, t, cond, sched, sampler, n.as_ref())?;
    }
    Ok(z)
}
