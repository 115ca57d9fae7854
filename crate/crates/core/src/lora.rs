//! Low-rank adapters `ΔW = A×B` over named network weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::net::{Grads, NetParams};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Parameter-path patterns; `*` matches any run of characters.
    pub targets: Vec<String>,
    pub reg_lambda: f64,
    pub lr: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            targets: default_targets(),
            reg_lambda: 1e-4,
            lr: 1e-4,
        }
    }
}

/// Dense projections and 1×1 convolutions of the denoiser and control
/// branch.
pub fn default_targets() -> Vec<String> {
    ["den.temb.w", "den.pemb.w", "den.temb2.w", "den.sft.w", "ctrl.pemb.w", "ctrl.zero.w"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// Adapter set this belongs to; separates two adapters on one weight.
    pub set: String,
    pub target: String,
    pub rank: usize,
    /// `[d, r]`.
    pub a: Tensor,
    /// `[r, k]`.
    pub b: Tensor,
    pub enabled: bool,
    /// Target weight as it was before [`merge`].
    #[serde(skip)]
    stored: Option<Tensor>,
}

impl LoraAdapter {
    pub fn new(set: &str, target: &str, a: Tensor, b: Tensor) -> Result<Self> {
        let rank = a.shape().get(1).copied().unwrap_or(0);
        if a.shape().len() != 2 || b.shape().len() != 2 || b.shape()[0] != rank {
            return Err(Error::dim(format!(
                "adapter factors {:?} × {:?} do not chain",
                a.shape(),
                b.shape()
            )));
        }
        Ok(LoraAdapter {
            set: set.to_string(),
            target: target.to_string(),
            rank,
            a,
            b,
            enabled: true,
            stored: None,
        })
    }

    /// Graph parameter names of `A` and `B`.
    pub fn var_names(&self) -> (String, String) {
        (
            format!("{}.{}.A", self.set, self.target),
            format!("{}.{}.B", self.set, self.target),
        )
    }

    pub fn delta(&self) -> Result<Tensor> {
        self.a.matmul(&self.b)
    }

    pub fn is_merged(&self) -> bool {
        self.stored.is_some()
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `(d, k)` of a weight viewed as a matrix: 2-D as is, conv kernels as
/// `(out, in·kh·kw)`.
pub fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [d, k] => Some((d, k)),
        [o, i, kh, kw] => Some((o, i * kh * kw)),
        _ => None,
    }
}

pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

pub fn attach(params: &NetParams, config: &LoraConfig, seed: u64) -> Result<Vec<LoraAdapter>> {
    attach_set(params, config, seed, "lora")
}

/// One adapter per parameter matching any target pattern, with
/// `A ~ N(0, 1/r)` and `B = 0`.
pub fn attach_set(params: &NetParams, config: &LoraConfig, seed: u64, set: &str) -> Result<Vec<LoraAdapter>> {
    if config.rank == 0 {
        return Err(Error::config("adapter rank must be at least 1"));
    }
    if !(config.reg_lambda >= 0.0) {
        return Err(Error::config(format!("reg_lambda must be >= 0, got {}", config.reg_lambda)));
    }
    let root = SeedStream::new(seed).split("lora").split(set);
    let mut out = Vec::new();
    for pattern in &config.targets {
        let matched: Vec<&str> = params.names().filter(|n| pattern_matches(pattern, n)).collect();
        if matched.is_empty() {
            return Err(Error::config(format!("adapter target {pattern:?} matches no parameter")));
        }
        for name in matched {
            if out.iter().any(|a: &LoraAdapter| a.target == name) {
                continue;
            }
            let shape = params.get(name)?.shape();
            let (d, k) = matrix_dims(shape).ok_or_else(|| {
                Error::config(format!("adapter target {name} has shape {shape:?}, not a matrix"))
            })?;
            let r = config.rank;
            if r > d.min(k) {
                return Err(Error::config(format!(
                    "rank {r} exceeds min(d, k) = {} for {name}",
                    d.min(k)
                )));
            }
            let a = Tensor::randn(&[d, r], (1.0 / r as f64).sqrt(), &mut root.split(name).rng());
            out.push(LoraAdapter::new(set, name, a, Tensor::zeros(&[r, k]))?);
        }
    }
    Ok(out)
}

/// `x·Wᵀ + (x·Bᵀ)·Aᵀ` without forming `W + A×B`.
pub fn effective_forward_var(g: &mut Graph, x: Var, w: Var, a: Var, b: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let base = g.matmul(x, wt)?;
    let bt = g.transpose(b)?;
    let xb = g.matmul(x, bt)?;
    let at = g.transpose(a)?;
    let low = g.matmul(xb, at)?;
    g.add(base, low)
}

/// Tensor-level [`effective_forward_var`] for `x: [n, k]`, `w: [d, k]`.
pub fn effective_forward(x: &Tensor, w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let a = g.constant(adapter.a.clone());
    let b = g.constant(adapter.b.clone());
    let y = effective_forward_var(&mut g, xv, wv, a, b)?;
    Ok(g.value(y).clone())
}

/// `λ·Σ(‖A‖²_F + ‖B‖²_F)`, sharing leaves with any model already built on
/// `g`.
pub fn reg_loss(g: &mut Graph, adapters: &[LoraAdapter], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("reg_lambda must be >= 0, got {lambda}")));
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for ad in adapters {
        let (an, bn) = ad.var_names();
        for (n, t) in [(an, &ad.a), (bn, &ad.b)] {
            let v = g.param(&n, t, true);
            let f = g.frobenius_norm_sq(v);
            total = g.add(total, f)?;
        }
    }
    Ok(g.scale(total, lambda))
}

pub fn reg_value(adapters: &[LoraAdapter], lambda: f64) -> f64 {
    lambda * adapters.iter().map(|a| a.a.sq_norm() + a.b.sq_norm()).sum::<f64>()
}

/// Folds every adapter into its target weight, keeping a copy of the
/// original for [`unmerge`].
pub fn merge(params: &NetParams, adapters: &mut [LoraAdapter]) -> Result<NetParams> {
    if let Some(a) = adapters.iter().find(|a| a.is_merged() || !a.enabled) {
        return Err(Error::contract(format!(
            "adapter {}.{} is already merged or disabled",
            a.set, a.target
        )));
    }
    let mut out = params.clone();
    for ad in adapters.iter_mut() {
        let w = out.get(&ad.target)?.clone();
        let delta = ad.delta()?.reshaped(w.shape())?;
        out.set(&ad.target, w.zip_map(&delta, |x, d| x + d)?)?;
        ad.stored = Some(w);
        ad.enabled = false;
    }
    Ok(out)
}

/// Restores the stored pre-merge weights and re-enables the adapters.
pub fn unmerge(params: &NetParams, adapters: &mut [LoraAdapter]) -> Result<NetParams> {
    if let Some(a) = adapters.iter().find(|a| !a.is_merged()) {
        return Err(Error::contract(format!("adapter {}.{} is not merged", a.set, a.target)));
    }
    let mut out = params.clone();
    for ad in adapters.iter_mut().rev() {
        out.set(&ad.target, ad.stored.take().expect("checked above"))?;
        ad.enabled = true;
    }
    Ok(out)
}

/// Plain gradient step on `A` and `B`.
pub fn lora_step(adapters: &mut [LoraAdapter], grads: &Grads, lr: f64) -> Result<()> {
    for ad in adapters.iter() {
        let (an, bn) = ad.var_names();
        for (n, t) in [(&an, &ad.a), (&bn, &ad.b)] {
            match grads.get(n) {
                Some(gr) if gr.shape() == t.shape() => {}
                Some(gr) => {
                    return Err(Error::contract(format!(
                        "gradient for {n} has shape {:?}, expected {:?}",
                        gr.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::contract(format!("no gradient for {n}"))),
            }
        }
    }
    for ad in adapters.iter_mut() {
        let (an, bn) = ad.var_names();
        for (n, t) in [(&an, &mut ad.a), (&bn, &mut ad.b)] {
            let gr = &grads[n];
            t.data_mut().iter_mut().zip(gr.data()).for_each(|(p, g)| *p -= lr * g);
        }
    }
    Ok(())
}

pub fn trainable_count(adapters: &[LoraAdapter]) -> usize {
    adapters.iter().map(LoraAdapter::trainable_count).sum()
}
