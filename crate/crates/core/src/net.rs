//! The conditioned denoiser: a pixel-shuffle encoder and decoder, a control
//! branch with a zero-initialized projection, prompt embeddings, and a
//! two-level convolutional noise predictor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lora::LoraAdapter;
use crate::prompt::PromptId;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Spatial reduction between pixels and latents.
pub const DOWNSCALE: usize = 2;

/// Gradients keyed by graph parameter name.
pub type Grads = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub embed_dim: usize,
    /// Fixed factor on encoder outputs, undone before decoding.
    #[serde(default = "unit")]
    pub latent_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_channels: 1,
            latent_channels: 8,
            hidden: 16,
            bottleneck: 32,
            embed_dim: 16,
            latent_scale: 1.0,
        }
    }
}

impl NetConfig {
    /// A reduced network for finite-difference checks.
    pub fn tiny() -> Self {
        NetConfig {
            image_channels: 1,
            latent_channels: 2,
            hidden: 4,
            bottleneck: 6,
            embed_dim: 4,
            latent_scale: 1.0,
        }
    }

    /// Every parameter name with its shape, in construction order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let NetConfig {
            image_channels: ic,
            latent_channels: l,
            hidden: h,
            bottleneck: b,
            embed_dim: e,
            ..

        } = *self;
        let f2 = DOWNSCALE * DOWNSCALE;
        let mut out = Vec::new();
        let mut conv = |name: &str, co: usize, ci: usize, k: usize| {
            out.push((format!("{name}.w"), vec![co, ci, k, k]));
            out.push((format!("{name}.b"), vec![co]));
        };
        conv("enc.conv1", h, f2 * ic, 3);
        conv("enc.conv2", l, h, 3);
        conv("ctrl.conv", l, l, 3);
        conv("ctrl.block", h, l, 3);
        conv("ctrl.zero", l, h, 1);
        conv("den.in", h, 2 * l, 3);
        conv("den.down", b, h, 3);
        conv("den.sft", b, l, 1);
        conv("den.mid", b, b, 3);
        conv("den.mid2", b, b, 3);
        conv("den.up", h, b + h, 3);
        conv("den.out", l, h, 3);
        conv("dec.conv1", h, l, 3);
        conv("dec.out", f2 * ic, h, 3);
        let mut dense = |name: &str, o: usize, i: usize| {
            out.push((format!("{name}.w"), vec![o, i]));
            out.push((format!("{name}.b"), vec![o]));
        };
        dense("ctrl.pemb", h, e);
        dense("den.temb", h, e);
        dense("den.pemb", h, e);
        dense("den.temb2", b, h);
        dense("den.skip", l * 2 * l, h);
        out.push(("prompt.emb.table".into(), vec![PromptId::VOCAB.len(), e]));
        out
    }
}

/// Parameters initialized to exactly zero.
pub fn is_zero_init(name: &str) -> bool {
    name.starts_with("ctrl.zero.") || name.starts_with("den.sft.") || name.starts_with("den.skip.") || name.ends_with(".b")
}

/// Leading path segment: `enc`, `ctrl`, `den`, `dec` or `prompt`.
pub fn component(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    config: NetConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl NetParams {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        if [
            config.latent_channels,
            config.hidden,
            config.bottleneck,
            config.embed_dim,
        ]
        .contains(&0)
            || !(config.image_channels == 1 || config.image_channels == 3)
        {
            return Err(Error::config(format!("invalid network config {config:?}")));
        }
        let root = SeedStream::new(seed).split("init");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if is_zero_init(&name) {
                    Tensor::zeros(&shape)
                } else if name == "prompt.emb.table" {
                    Tensor::randn(&shape, 1.0, &mut root.split(&name).rng())
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    Tensor::randn(&shape, (1.0 / fan_in as f64).sqrt(), &mut root.split(&name).rng())
                };
                (name, t)
            })
            .collect();
        Ok(NetParams { config, tensors })
    }

    /// Rebuilds parameters from stored tensors; names and shapes must match
    /// the layout of `config` exactly.
    pub fn from_tensors(config: NetConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &layout {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        Ok(NetParams { config, tensors })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: cannot replace {:?} with {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Which leaves of a model's graph take gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Conditioning for one denoiser evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub z_lq: Tensor,
    pub prompt: Vec<PromptId>,
    /// Mean of the prompt tokens' embedding rows, shape `[embed_dim]`.
    pub prompt_embedding: Tensor,
}

impl ConditioningBundle {
    /// The same low-quality latent under different prompts.
    pub fn with_prompt(&self, prompt: &[PromptId], params: &NetParams) -> Result<Self> {
        Ok(ConditioningBundle {
            z_lq: self.z_lq.clone(),
            prompt: prompt.to_vec(),
            prompt_embedding: prompt_embedding(prompt, params)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub z_lq: Var,
    /// `[embed_dim, 1]`.
    pub pemb: Var,
}

/// Sinusoidal timestep features as an `[dim, 1]` column.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[dim, 1], v).expect("embedding dims are positive")
}

/// Network forward passes over a parameter set plus optional adapters.
pub struct Model<'a> {
    params: &'a NetParams,
    adapters: &'a [LoraAdapter],
    trainable: Trainable,
}

impl<'a> Model<'a> {
    pub fn new(params: &'a NetParams, adapters: &'a [LoraAdapter], trainable: Trainable) -> Self {
        Model {
            params,
            adapters,
            trainable,
        }
    }

    pub fn frozen(params: &'a NetParams) -> Self {
        Self::new(params, &[], Trainable::Nothing)
    }

    pub fn params(&self) -> &NetParams {
        self.params
    }

    /// Effective weight `W + Σ A×B` over the enabled adapters targeting it.
    pub fn weight(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let base = self.params.get(name)?;
        let mut w = g.param(name, base, self.trainable == Trainable::Base);
        for ad in self.adapters.iter().filter(|a| a.enabled && a.target == name) {
            let train = self.trainable == Trainable::Adapters;
            let (an, bn) = ad.var_names();
            let a = g.param(&an, &ad.a, train);
            let b = g.param(&bn, &ad.b, train);
            let delta = g.matmul(a, b)?;
            let delta = g.reshape(delta, base.shape())?;
            w = g.add(w, delta)?;
        }
        Ok(w)
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: &str) -> Result<Var> {
        let w = self.weight(g, &format!("{layer}.w"))?;
        let pad = g.shape(w)[2] / 2;
        let y = g.conv2d(x, w, pad)?;
        let b = self.weight(g, &format!("{layer}.b"))?;
        g.add_channel_bias(y, b)
    }

    /// `W·v + b` for a column `v`.
    fn dense(&self, g: &mut Graph, v: Var, layer: &str) -> Result<Var> {
        let w = self.weight(g, &format!("{layer}.w"))?;
        let y = g.matmul(w, v)?;
        let b = self.weight(g, &format!("{layer}.b"))?;
        let n = g.shape(b)[0];
        let b = g.reshape(b, &[n, 1])?;
        g.add(y, b)
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        let ic = self.params.config.image_channels;
        match *shape {
            [c, h, w] if c == ic && h % (2 * DOWNSCALE) == 0 && w % (2 * DOWNSCALE) == 0 && h >= 4 * DOWNSCALE && w >= 4 * DOWNSCALE => Ok(()),
            _ => Err(Error::config(format!(
                "network takes {ic}-channel images with sides divisible by {} and at least {}, got {shape:?}",
                2 * DOWNSCALE,
                4 * DOWNSCALE
            ))),
        }
    }

    fn check_latent(&self, g: &Graph, z: Var, what: &str) -> Result<()> {
        let l = self.params.config.latent_channels;
        match *g.shape(z) {
            [c, h, w] if c == l && h % 2 == 0 && w % 2 == 0 => Ok(()),
            ref s => Err(Error::dim(format!(
                "{what}: expected {l}×h×w latent with even sides, got {s:?}"
            ))),
        }
    }

    pub fn encode_var(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.check_image(g.shape(img))?;
        let x = g.space_to_depth(img, DOWNSCALE)?;
        let h = self.conv(g, x, "enc.conv1")?;
        let h = g.silu(h);
        let z = self.conv(g, h, "enc.conv2")?;
        Ok(self.scaled(g, z, self.params.config.latent_scale))
    }

    fn scaled(&self, g: &mut Graph, z: Var, s: f64) -> Var {
        if s == 1.0 {
            z
        } else {
            g.scale(z, s)
        }
    }

    /// Mean embedding of the prompt tokens, as an `[embed_dim, 1]` column.
    pub fn prompt_var(&self, g: &mut Graph, prompts: &[PromptId]) -> Result<Var> {
        if prompts.is_empty() {
            return Err(Error::config("prompt list is empty"));
        }
        let mut pick = vec![0.0; PromptId::VOCAB.len()];
        for p in prompts {
            pick[p.index()] += 1.0 / prompts.len() as f64;
        }
        let pick = g.constant(Tensor::new(&[1, PromptId::VOCAB.len()], pick)?);
        let table = self.weight(g, "prompt.emb.table")?;
        let row = g.matmul(pick, table)?;
        g.transpose(row)
    }

    /// Plain conv path plus the zero-initialized path that also sees the
    /// prompt.
    pub fn control_var(&self, g: &mut Graph, z_enc: Var, pemb: Var) -> Result<Var> {
        self.check_latent(g, z_enc, "control input")?;
        let plain = self.conv(g, z_enc, "ctrl.conv")?;
        let zero = self.zero_branch(g, z_enc, pemb)?;
        g.add(plain, zero)
    }

    pub(crate) fn zero_branch(&self, g: &mut Graph, z_enc: Var, pemb: Var) -> Result<Var> {
        let h = self.conv(g, z_enc, "ctrl.block")?;
        let p = self.dense(g, pemb, "ctrl.pemb")?;
        let h = g.add_channel_bias(h, p)?;
        let h = g.silu(h);
        self.conv(g, h, "ctrl.zero")
    }

    pub fn denoise_var(&self, g: &mut Graph, z_t: Var, t: usize, cond: &CondVars) -> Result<Var> {
        self.check_latent(g, z_t, "denoiser input")?;
        if g.shape(cond.z_lq) != g.shape(z_t) {
            return Err(Error::dim(format!(
                "conditioning latent {:?} does not match z_t {:?}",
                g.shape(cond.z_lq),
                g.shape(z_t)
            )));
        }
        let e = self.params.config.embed_dim;
        let temb = g.constant(timestep_embedding(t, e));
        let temb = self.dense(g, temb, "den.temb")?;
        let temb = g.silu(temb);
        let pemb = self.dense(g, cond.pemb, "den.pemb")?;
        let shift = g.add(temb, pemb)?;

        let x = g.concat_channels(&[z_t, cond.z_lq])?;
        let h0 = self.conv(g, x, "den.in")?;
        let h0 = g.add_channel_bias(h0, shift)?;
        let h0 = g.silu(h0);

        let d = g.avg_pool(h0, 2)?;
        let d = self.conv(g, d, "den.down")?;
        let t2 = self.dense(g, temb, "den.temb2")?;
        let d = g.add_channel_bias(d, t2)?;
        let d = g.silu(d);
        let lq = g.avg_pool(cond.z_lq, 2)?;
        let sft = self.conv(g, lq, "den.sft")?;
        let d = g.add(d, sft)?;

        let m = self.conv(g, d, "den.mid")?;
        let m = g.silu(m);
        let m = self.conv(g, m, "den.mid2")?;
        let m = g.add(d, m)?;

        let u = g.upsample(m, 2)?;
        let u = g.concat_channels(&[u, h0])?;
        let u = self.conv(g, u, "den.up")?;
        let u = g.silu(u);
        let out = self.conv(g, u, "den.out")?;

        // per-timestep 1×1 linear map of [z_t, z_lq]
        let l = self.params.config.latent_channels;
        let k = self.dense(g, temb, "den.skip")?;
        let k = g.reshape(k, &[l, 2 * l, 1, 1])?;
        let skip = g.conv2d(x, k, 0)?;
        g.add(out, skip)
    }

    pub fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_latent(g, z, "decoder input")?;
        let z = self.scaled(g, z, 1.0 / self.params.config.latent_scale);
        let h = self.conv(g, z, "dec.conv1")?;
        let h = g.silu(h);
        let o = self.conv(g, h, "dec.out")?;
        let o = g.depth_to_space(o, DOWNSCALE)?;
        Ok(g.sigmoid(o))
    }

    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let z = self.encode_var(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    pub fn prompt_embedding(&self, prompts: &[PromptId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.prompt_var(&mut g, prompts)?;
        let e = self.params.config.embed_dim;
        g.value(p).reshaped(&[e])
    }

    pub fn control_features(&self, z_enc: &Tensor, pemb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_enc.clone());
        let p = self.pemb_const(&mut g, pemb)?;
        let out = self.control_var(&mut g, z, p)?;
        Ok(g.value(out).clone())
    }

    pub fn denoise(&self, z_t: &Tensor, t: usize, cond: &ConditioningBundle) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = self.bind_cond(&mut g, cond)?;
        let z = g.constant(z_t.clone());
        let out = self.denoise_var(&mut g, z, t, &c)?;
        Ok(g.value(out).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let img = self.decode_var(&mut g, zv)?;
        Image::from_tensor(g.value(img))
    }

    /// Encodes a low-quality image and runs the control branch under
    /// `prompts`.
    pub fn condition(&self, lq: &Image, prompts: &[PromptId]) -> Result<ConditioningBundle> {
        let pemb = self.prompt_embedding(prompts)?;
        let z_enc = self.encode(lq)?;
        Ok(ConditioningBundle {
            z_lq: self.control_features(&z_enc, &pemb)?,
            prompt: prompts.to_vec(),
            prompt_embedding: pemb,
        })
    }

    fn pemb_const(&self, g: &mut Graph, pemb: &Tensor) -> Result<Var> {
        let e = self.params.config.embed_dim;
        if pemb.len() != e {
            return Err(Error::dim(format!(
                "prompt embedding has shape {:?}, expected [{e}]",
                pemb.shape()
            )));
        }
        Ok(g.constant(pemb.reshaped(&[e, 1])?))
    }
}

impl Denoiser for Model<'_> {
    type Cond = ConditioningBundle;
    type CondVars = CondVars;

    fn bind_cond(&self, g: &mut Graph, cond: &ConditioningBundle) -> Result<CondVars> {
        let pemb = self.pemb_const(g, &cond.prompt_embedding)?;
        Ok(CondVars {
            z_lq: g.constant(cond.z_lq.clone()),
            pemb,
        })
    }

    fn predict_noise(&self, g: &mut Graph, z_t: Var, t: usize, cond: &CondVars) -> Result<Var> {
        self.denoise_var(g, z_t, t, cond)
    }
}

pub fn encode(img: &Image, params: &NetParams) -> Result<Tensor> {
    Model::frozen(params).encode(img)
}

pub fn prompt_embedding(prompts: &[PromptId], params: &NetParams) -> Result<Tensor> {
    Model::frozen(params).prompt_embedding(prompts)
}

pub fn control_features(z_enc: &Tensor, pemb: &Tensor, params: &NetParams) -> Result<Tensor> {
    Model::frozen(params).control_features(z_enc, pemb)
}

pub fn denoise(z_t: &Tensor, t: usize, cond: &ConditioningBundle, params: &NetParams) -> Result<Tensor> {
    Model::frozen(params).denoise(z_t, t, cond)
}

pub fn decode(z: &Tensor, params: &NetParams) -> Result<Image> {
    Model::frozen(params).decode(z)
}

/// Reads every named gradient out of a graph after `backward`; names with
/// no gradient path get zeros.
pub fn collect_grads<'n>(g: &Graph, names: impl IntoIterator<Item = (&'n str, &'n [usize])>) -> Grads {
    names
        .into_iter()
        .map(|(n, shape)| {
            let grad = g.param_grad(n).unwrap_or_else(|| Tensor::zeros(shape));
            (n.to_string(), grad)
        })
        .collect()
}
