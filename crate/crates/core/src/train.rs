//! AdamW, the base and adapter training stages, checkpoint resume, held-out
//! loss, and restoration timing.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, Kind, RngState, MOMENT1, MOMENT2};
use crate::dataset::{batches, BatchPosition, DatasetItem};
use crate::degrade::{self, DegradationSpec};
use crate::diffusion::{ldm_loss, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::guidance::{restore, GuidanceConfig};
use crate::image::Image;
use crate::lora::{reg_loss, reg_value, LoraAdapter, LoraConfig};
use crate::net::{collect_grads, CondVars, Grads, Model, NetConfig, NetParams, Trainable};
use crate::prompt::PromptId;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Grads,
    v: Grads,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    config: AdamWConfig,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            m: Grads::new(),
            v: Grads::new(),
        }
    }

    /// One decoupled-weight-decay Adam update with bias correction over the
    /// named tensors. Moments are created on first use.
    pub fn update(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Grads) -> Result<()> {
        for (name, p) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(m) = self.m.get(name) {
                if m.shape() != p.shape() {
                    return Err(Error::contract(format!(
                        "optimizer state for {name} has shape {:?}, parameter {:?}",
                        m.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params {
            let g = &grads[&name];
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((x, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *x -= lr * weight_decay * *x;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let (mh, vh) = (*mi / bc1, *vi / bc2);
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn store(&self, c: &mut Checkpoint) -> Result<()> {
        for (name, m) in &self.m {
            c.push(&format!("{MOMENT1}{name}"), m.clone());
        }
        for (name, v) in &self.v {
            c.push(&format!("{MOMENT2}{name}"), v.clone());
        }
        c.header.optimizer = Some(serde_json::to_value(OptimizerMeta {
            step: self.step,
            config: self.config,
        })?);
        Ok(())
    }

    fn restore(c: &Checkpoint) -> Result<Self> {
        let meta: OptimizerMeta = serde_json::from_value(
            c.header
                .optimizer
                .clone()
                .ok_or_else(|| Error::config("checkpoint has no optimizer state"))?,
        )?;
        let grab = |prefix| {
            c.with_prefix(prefix)
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect::<Grads>()
        };
        Ok(AdamWState {
            config: meta.config,
            step: meta.step,
            m: grab(MOMENT1),
            v: grab(MOMENT2),
        })
    }
}

pub fn adamw_step(params: Vec<(String, &mut Tensor)>, grads: &Grads, state: &mut AdamWState) -> Result<()> {
    state.update(params, grads)
}

fn param_slots(p: &mut NetParams) -> Vec<(String, &mut Tensor)> {
    p.tensors_mut().map(|(n, t)| (n.to_string(), t)).collect()
}

fn adapter_slots(ads: &mut [LoraAdapter]) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for ad in ads.iter_mut() {
        let (an, bn) = ad.var_names();
        out.push((an, &mut ad.a));
        out.push((bn, &mut ad.b));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Weight of the autoencoder reconstruction term.
    pub recon_weight: f64,
    /// Fraction of batches trained toward the degraded latent under the
    /// `low-quality` prompt.
    pub neg_dropout: f64,
    /// Fraction of examples whose family prompt is dropped, leaving only the
    /// quality tags.
    pub content_dropout: f64,
    /// Degradations used round-robin, one per batch.
    pub specs: Vec<DegradationSpec>,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    /// Fill the `wall_ms` log column; off keeps logs byte-reproducible.
    pub record_time: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 16,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            recon_weight: 0.1,
            neg_dropout: 0.1,
            content_dropout: 0.2,
            specs: DegradationSpec::table_recipes().to_vec(),
            schedule: ScheduleConfig::default(),
            net: NetConfig::default(),
            record_time: false,
            parallelism: Parallelism::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lora: LoraConfig,
    pub weight_decay: f64,
    pub spec: DegradationSpec,
    pub neg_dropout: f64,
    pub content_dropout: f64,
    pub record_time: bool,
    pub parallelism: Parallelism,
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        LoraTrainConfig {
            steps: 500,
            batch: 16,
            lora: LoraConfig::default(),
            weight_decay: 0.0,
            spec: "blur:2.0+sr:4".parse().expect("valid spec"),
            neg_dropout: 0.1,
            content_dropout: 0.2,
            record_time: false,
            parallelism: Parallelism::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub reg_loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,reg_loss,wall_ms\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9e},{:.9e},{:.3}", r.step, r.loss, r.reg_loss, r.wall_ms);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Inputs of one training example, all drawn from `stream`.
struct Draw {
    lq: Image,
    t: usize,
    eps_rng: rand_chacha::ChaCha8Rng,
}

fn draw(item: &DatasetItem, spec: &DegradationSpec, stream: SeedStream, sched: &NoiseSchedule) -> Result<Draw> {
    let lq = degrade::apply(spec, &item.clean, stream.split("degrade").key())?;
    let mut rng = stream.split("draw").rng();
    let t = rng.random_range(0..sched.len());
    Ok(Draw { lq, t, eps_rng: rng })
}

/// Diffusion loss of one example (plus the reconstruction term when
/// `recon_weight > 0`) and, when `names` is given, gradients for them.
#[allow(clippy::too_many_arguments)]
fn example(
    model: &Model,
    item: &DatasetItem,
    spec: &DegradationSpec,
    stream: SeedStream,
    low_quality: bool,
    content_dropout: f64,
    sched: &NoiseSchedule,
    recon_weight: f64,
    names: Option<&[(String, Vec<usize>)]>,
) -> Result<(f64, Grads)> {
    let Draw { lq, t, mut eps_rng } = draw(item, spec, stream, sched)?;
    let content: Vec<PromptId> = if stream.split("content").rng().random::<f64>() < content_dropout {
        item.tags.clone()
    } else {
        vec![item.prompt]
    };
    let mut g = Graph::new();
    let x = g.constant(item.clean.to_tensor());
    let z_clean = model.encode_var(&mut g, x)?;
    let y = g.constant(lq.to_tensor());
    let z_enc = model.encode_var(&mut g, y)?;
    let ctrl_prompt = model.prompt_var(&mut g, &content)?;
    let z_lq = model.control_var(&mut g, z_enc, ctrl_prompt)?;
    let (target, words): (_, Vec<PromptId>) = if low_quality {
        (z_enc, vec![PromptId::LowQuality])
    } else {
        let mut w = content.clone();
        w.extend(item.tags.iter().filter(|p| !content.contains(p)));
        (z_clean, w)
    };
    // the diffusion target is data: gradients reach the encoder only through
    // the conditioning path and the reconstruction term
    let x0 = g.value(target).clone();
    let eps = Tensor::randn(x0.shape(), 1.0, &mut eps_rng);
    let pemb = model.prompt_var(&mut g, &words)?;
    let cond = CondVars { z_lq, pemb };
    let mut loss = ldm_loss(&mut g, model, &x0, t, &eps, &cond, sched)?;
    if recon_weight > 0.0 {
        let rec = model.decode_var(&mut g, z_clean)?;
        let r = g.mse(rec, x)?;
        let r = g.scale(r, recon_weight);
        loss = g.add(loss, r)?;
    }
    let value = g.value(loss).item();
    let grads = match names {
        Some(names) if value.is_finite() => {
            g.backward(loss)?;
            collect_grads(&g, names.iter().map(|(n, s)| (n.as_str(), s.as_slice())))
        }
        _ => Grads::new(),
    };
    Ok((value, grads))
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &Model,
    items: &[&DatasetItem],
    spec: &DegradationSpec,
    stream: SeedStream,
    low_quality: bool,
    content_dropout: f64,
    sched: &NoiseSchedule,
    recon_weight: f64,
    names: &[(String, Vec<usize>)],
    par: Parallelism,
) -> Result<(f64, Grads)> {
    let results = par.try_map(items.len(), |i| {
        example(model, items[i], spec, stream.index(i as u64), low_quality, content_dropout, sched, recon_weight, Some(names))
    })?;
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut acc: Grads = names.iter().map(|(k, s)| (k.clone(), Tensor::zeros(s))).collect();
    for (l, grads) in results {
        loss += l;
        for (k, gsum) in acc.iter_mut() {
            if let Some(g) = grads.get(k) {
                gsum.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    for gsum in acc.values_mut() {
        gsum.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, acc))
}

fn check_finite(step: u64, lr: f64, loss: f64, history: &[f64]) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let from = history.len().saturating_sub(10);
    Err(Error::NonFinite {
        step,
        lr,
        loss,
        history: history[from..].to_vec(),
    })
}

fn check_data(data: &[DatasetItem], batch: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("training needs a non-empty dataset"));
    }
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok(())
}

/// Base-stage training state; everything needed to continue bit-exactly.
#[derive(Clone, Debug)]
pub struct BaseTrainer {
    pub config: TrainConfig,
    pub seed: u64,
    pub params: NetParams,
    pub opt: AdamWState,
    pub step: u64,
    pub batches: BatchPosition,
    sched: NoiseSchedule,
    history: Vec<f64>,
}

impl BaseTrainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        if config.specs.is_empty() {
            return Err(Error::config("training needs at least one degradation spec"));
        }
        for (what, p) in [("neg_dropout", config.neg_dropout), ("content_dropout", config.content_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{what} must be in [0, 1], got {p}")));
            }
        }
        let sched = config.schedule.build()?;
        let params = NetParams::init(config.net, seed)?;
        Ok(BaseTrainer {
            opt: AdamWState::new(config.optimizer),
            config,
            seed,
            params,
            step: 0,
            batches: BatchPosition::default(),
            sched,
            history: Vec::new(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Trains until `self.step == until`, appending one log row per step.
    pub fn run(&mut self, data: &[DatasetItem], until: u64, log: &mut TrainLog) -> Result<()> {
        check_data(data, self.config.batch)?;
        let batch = self.config.batch.min(data.len());
        let mut stream = batches(data, batch, self.seed)?;
        stream.seek(self.batches)?;
        let names: Vec<(String, Vec<usize>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let start = Instant::now();
        let root = SeedStream::new(self.seed).split("train");
        while self.step < until {
            let idx = stream.next_indices();
            let items: Vec<&DatasetItem> = idx.iter().map(|&i| &data[i]).collect();
            let step_stream = root.index(self.step);
            let low = step_stream.split("dropout").rng().random::<f64>() < self.config.neg_dropout;
            let spec = &self.config.specs[self.step as usize % self.config.specs.len()];
            let (loss, grads) = {
                let model = Model::new(&self.params, &[], Trainable::Base);
                batch_step(
                    &model,
                    &items,
                    spec,
                    step_stream,
                    low,
                    self.config.content_dropout,
                    &self.sched,
                    self.config.recon_weight,
                    &names,
                    self.config.parallelism,
                )?
            };
            check_finite(self.step, self.opt.config.lr, loss, &self.history)?;
            self.opt.update(param_slots(&mut self.params), &grads)?;
            self.history.push(loss);
            self.step += 1;
            self.batches = stream.position();
            log.rows.push(LogRow {
                step: self.step,
                loss,
                reg_loss: 0.0,
                wall_ms: if self.config.record_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::base(&self.params, self.config.schedule);
        c.header.step = self.step;
        c.header.rng = RngState {
            seed: self.seed,
            batches: self.batches,
        };
        c.header.train = Some(serde_json::to_value(&self.config)?);
        self.opt.store(&mut c)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(
            c.header
                .train
                .clone()
                .ok_or_else(|| Error::config("checkpoint has no training config to resume from"))?,
        )?;
        Ok(BaseTrainer {
            sched: config.schedule.build()?,
            config,
            seed: c.header.rng.seed,
            params: c.params()?,
            opt: AdamWState::restore(c)?,
            step: c.header.step,
            batches: c.header.rng.batches,
            history: Vec::new(),
        })
    }
}

pub fn train_base(data: &[DatasetItem], config: &TrainConfig, seed: u64) -> Result<(NetParams, TrainLog)> {
    let mut t = BaseTrainer::new(config.clone(), seed)?;
    let mut log = TrainLog::default();
    t.run(data, config.steps as u64, &mut log)?;
    Ok((t.params, log))
}

/// Adapter-stage training state. The base parameters are only ever read.
#[derive(Clone, Debug)]
pub struct LoraTrainer {
    pub config: LoraTrainConfig,
    pub seed: u64,
    pub adapters: Vec<LoraAdapter>,
    pub opt: AdamWState,
    pub step: u64,
    pub batches: BatchPosition,
    sched: NoiseSchedule,
    history: Vec<f64>,
}

impl LoraTrainer {
    pub fn new(config: LoraTrainConfig, adapters: Vec<LoraAdapter>, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::config("no adapters to train"));
        }
        if adapters.iter().any(|a| !a.enabled) {
            return Err(Error::contract("cannot train merged or disabled adapters"));
        }
        let opt = AdamWState::new(AdamWConfig {
            lr: config.lora.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(LoraTrainer {
            sched: schedule.build()?,
            config,
            seed,
            adapters,
            opt,
            step: 0,
            batches: BatchPosition::default(),
            history: Vec::new(),
        })
    }

    pub fn run(&mut self, base: &NetParams, data: &[DatasetItem], until: u64, log: &mut TrainLog) -> Result<()> {
        check_data(data, self.config.batch)?;
        let batch = self.config.batch.min(data.len());
        let mut stream = batches(data, batch, self.seed)?;
        stream.seek(self.batches)?;
        let names: Vec<(String, Vec<usize>)> = self
            .adapters
            .iter()
            .flat_map(|a| {
                let (an, bn) = a.var_names();
                [(an, a.a.shape().to_vec()), (bn, a.b.shape().to_vec())]
            })
            .collect();
        let lambda = self.config.lora.reg_lambda;
        let start = Instant::now();
        let root = SeedStream::new(self.seed).split("lora-train");
        while self.step < until {
            let idx = stream.next_indices();
            let items: Vec<&DatasetItem> = idx.iter().map(|&i| &data[i]).collect();
            let step_stream = root.index(self.step);
            let low = step_stream.split("dropout").rng().random::<f64>() < self.config.neg_dropout;
            let (loss, mut grads) = {
                let model = Model::new(base, &self.adapters, Trainable::Adapters);
                batch_step(
                    &model,
                    &items,
                    &self.config.spec,
                    step_stream,
                    low,
                    self.config.content_dropout,
                    &self.sched,
                    0.0,
                    &names,
                    self.config.parallelism,
                )?
            };
            let reg = reg_value(&self.adapters, lambda);
            if lambda > 0.0 {
                let mut g = Graph::new();
                let r = reg_loss(&mut g, &self.adapters, lambda)?;
                g.backward(r)?;
                for (n, total) in grads.iter_mut() {
                    if let Some(gr) = g.param_grad(n) {
                        total.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
            check_finite(self.step, self.opt.config.lr, loss + reg, &self.history)?;
            self.opt.update(adapter_slots(&mut self.adapters), &grads)?;
            self.history.push(loss + reg);
            self.step += 1;
            self.batches = stream.position();
            log.rows.push(LogRow {
                step: self.step,
                loss,
                reg_loss: reg,
                wall_ms: if self.config.record_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, net: NetConfig) -> Result<Checkpoint> {
        let mut c = Checkpoint::lora(&self.adapters, self.sched.config(), net);
        c.header.step = self.step;
        c.header.rng = RngState {
            seed: self.seed,
            batches: self.batches,
        };
        c.header.train = Some(serde_json::to_value(&self.config)?);
        self.opt.store(&mut c)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.kind != Kind::Lora {
            return Err(Error::config("not an adapter checkpoint"));
        }
        let config: LoraTrainConfig = serde_json::from_value(
            c.header
                .train
                .clone()
                .ok_or_else(|| Error::config("checkpoint has no training config to resume from"))?,
        )?;
        Ok(LoraTrainer {
            sched: c.header.schedule.build()?,
            config,
            seed: c.header.rng.seed,
            adapters: c.adapters()?,
            opt: AdamWState::restore(c)?,
            step: c.header.step,
            batches: c.header.rng.batches,
            history: Vec::new(),
        })
    }
}

pub fn train_lora(
    base: &NetParams,
    adapters: Vec<LoraAdapter>,
    data: &[DatasetItem],
    config: &LoraTrainConfig,
    schedule: ScheduleConfig,
    seed: u64,
) -> Result<(Vec<LoraAdapter>, TrainLog)> {
    let mut t = LoraTrainer::new(config.clone(), adapters, schedule, seed)?;
    let mut log = TrainLog::default();
    t.run(base, data, config.steps as u64, &mut log)?;
    Ok((t.adapters, log))
}

/// Mean diffusion loss over `items` × `draws` fixed (degradation, t, ε)
/// draws; the same `seed` gives the same draws for any network.
pub fn held_out_loss(
    params: &NetParams,
    adapters: &[LoraAdapter],
    items: &[DatasetItem],
    spec: &DegradationSpec,
    schedule: &NoiseSchedule,
    seed: u64,
    draws: usize,
    par: Parallelism,
) -> Result<f64> {
    if items.is_empty() || draws == 0 {
        return Err(Error::config("held-out loss needs items and draws"));
    }
    let model = Model::new(params, adapters, Trainable::Nothing);
    let root = SeedStream::new(seed).split("held-out");
    let losses = par.try_map(items.len() * draws, |k| {
        let (i, d) = (k / draws, k % draws);
        example(&model, &items[i], spec, root.index(i as u64).index(d as u64), false, 0.0, schedule, 0.0, None).map(|r| r.0)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// [`restore`] with its wall-clock duration in seconds.
pub fn timed_restore(
    lq: &Image,
    params: &NetParams,
    adapters: &[LoraAdapter],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<(Image, f64)> {
    let start = Instant::now();
    let img = restore(lq, params, adapters, cfg, sched)?;
    Ok((img, start.elapsed().as_secs_f64()))
}
