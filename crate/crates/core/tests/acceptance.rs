//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs as a plain binary (`harness = false`).

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ldrs::checkpoint::Checkpoint;
use ldrs::dataset::{read_dataset, synth_dataset, write_dataset, DatasetItem};
use ldrs::degrade::{apply, DegradationSpec};
use ldrs::diffusion::{forward_diffuse, make_schedule, predict_eps, sample, step_from_eps, ChainNoise, Sampler, ScheduleConfig};
use ldrs::gradcheck::suite;
use ldrs::guidance::{cfg_step, restore, restore_batch, GuidanceConfig};
use ldrs::image::Image;
use ldrs::lora::{attach, effective_forward, merge, trainable_count, LoraAdapter, LoraConfig};
use ldrs::metrics::{evaluate, perceptual_proxy, psnr, ssim, EvalPair, MetricReport, MetricRow};
use ldrs::net::{Model, Trainable};
use ldrs::train::{held_out_loss, timed_restore, train_base, train_lora, LoraTrainConfig, TrainConfig};
use ldrs::{NetConfig, NetParams, Parallelism, PromptId, Result, Tensor};

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_SECS: f64 = 60.0;
const MERGE_TOL: f64 = 1e-9;
const COLLINEAR_TOL: f64 = 1e-9;
const MC_SAMPLES: usize = 40_000;
const MC_SIGMAS: f64 = 3.0;
const PSNR_GAIN_DB: f64 = 2.0;
const TRAIN_RESTORE_SECS: f64 = 600.0;
const HELD_OUT: usize = 64;
const LORA_GAIN: f64 = 0.10;
const LORA_STEPS: usize = 500;
const TIMING_R2: f64 = 0.9;
const CLOSED_FORM_DB: f64 = 48.131;
const SSIM_SELF_TOL: f64 = 1e-12;

const SPEC: &str = "blur:2.0+sr:4";
const TRAIN_SEED: u64 = 0;
const HELD_OUT_SEED: u64 = 1;
const FAMILY_OUT: PromptId = PromptId::Rings;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

/// Mean-only chain, positive prompt only.
fn restore_config() -> GuidanceConfig {
    GuidanceConfig {
        deterministic: true,
        lambda_cfg: 0.0,
        ..GuidanceConfig::default()
    }
}

fn c1_gradcheck() -> Result<Outcome> {
    let start = Instant::now();
    let r = suite(7)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = r.worst().map(|w| w.name.clone()).unwrap_or_default();
    outcome(
        r.max_rel_err() < GRADCHECK_TOL && secs < GRADCHECK_SECS,
        format!(
            "{} checks, max rel err {:.2e} ({worst}) < {GRADCHECK_TOL:.0e}; {secs:.1}s < {GRADCHECK_SECS}s",
            r.checks.len(),
            r.max_rel_err()
        ),
    )
}

fn random_cond(m: &Model, rng: &mut ChaCha8Rng) -> Result<ldrs::net::ConditioningBundle> {
    let lq = Image::from_tensor(&Tensor::randn(&[1, 16, 16], 0.2, rng).map(|v| (v + 0.5).clamp(0.0, 1.0)))?;
    m.condition(&lq, &[PromptId::Disk, PromptId::HighQuality])
}

fn c2_lora_equivalence() -> Result<Outcome> {
    let params = NetParams::init(NetConfig::default(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // fresh adapters are exact no-ops
    let fresh = attach(&params, &LoraConfig::default(), 1)?;
    let plain = Model::new(&params, &[], Trainable::Nothing);
    let adapted = Model::new(&params, &fresh, Trainable::Nothing);
    let mut neutral = true;
    for _ in 0..5 {
        let cond = random_cond(&plain, &mut rng)?;
        let z = Tensor::randn(cond.z_lq.shape(), 1.0, &mut rng);
        neutral &= plain.denoise(&z, 37, &cond)?.bit_eq(&adapted.denoise(&z, 37, &cond)?);
    }

    // merged weights vs runtime delta, plain matrices and the full network
    let mut worst: f64 = 0.0;
    for r in [1usize, 2, 4, 8] {
        let w = Tensor::randn(&[64, 64], 0.1, &mut rng);
        let ad = LoraAdapter::new("s", "w", Tensor::randn(&[64, r], 1.0, &mut rng), Tensor::randn(&[r, 64], 0.1, &mut rng))?;
        let merged_w = w.zip_map(&ad.delta()?, |a, b| a + b)?;
        for _ in 0..20 {
            let x = Tensor::randn(&[3, 64], 1.0, &mut rng);
            let runtime = effective_forward(&x, &w, &ad)?;
            let merged = x.matmul(&merged_w.transpose2()?)?;
            worst = worst.max(runtime.max_abs_diff(&merged));
        }
        let mut ads = attach(&params, &LoraConfig { rank: r, ..LoraConfig::default() }, r as u64)?;
        for a in ads.iter_mut() {
            a.b = Tensor::randn(a.b.shape(), 0.05, &mut rng);
        }
        let runtime = Model::new(&params, &ads, Trainable::Nothing);
        let merged_params = merge(&params, &mut ads.clone())?;
        let merged = Model::new(&merged_params, &[], Trainable::Nothing);
        for _ in 0..20 {
            let cond_r = random_cond(&runtime, &mut rng)?;
            let cond_m = ldrs::net::ConditioningBundle {
                prompt_embedding: merged.prompt_embedding(&cond_r.prompt)?,
                ..cond_r.clone()
            };
            let z = Tensor::randn(cond_r.z_lq.shape(), 1.0, &mut rng);
            let t = 1 + (rng.next_u64() % 199) as usize;
            worst = worst.max(runtime.denoise(&z, t, &cond_r)?.max_abs_diff(&merged.denoise(&z, t, &cond_m)?));
        }
    }

    // parameter-count law
    let ad = LoraAdapter::new("s", "w", Tensor::zeros(&[64, 4]), Tensor::zeros(&[4, 64]))?;
    let law = ad.trainable_count() == 512 && 64 * 64 == 4096;
    let ads = attach(&params, &LoraConfig::default(), 0)?;
    let by_formula: usize = ads
        .iter()
        .map(|a| a.rank * (a.a.shape()[0] + a.b.shape()[1]))
        .sum();
    let law = law && by_formula == trainable_count(&ads);
    outcome(
        neutral && worst < MERGE_TOL && law,
        format!(
            "fresh adapters bit-exact: {neutral}; merged vs runtime max |Δ| {worst:.2e} < {MERGE_TOL:.0e} at r in {{1,2,4,8}}; 64x64 r=4 count 512 vs 4096 dense, network law holds: {law}"
        ),
    )
}

fn c4_cfg_identities(params: &NetParams) -> Result<Outcome> {
    let sched = ScheduleConfig::default().build()?;
    let lq = synth_dataset(HELD_OUT_SEED, 1, 32)?[0].clean.clone();
    let lq = apply(&SPEC.parse()?, &lq, 5)?;
    let model = Model::new(params, &[], Trainable::Nothing);

    // λ = 0 against a hand-rolled positive-only chain
    let cfg0 = GuidanceConfig { lambda_cfg: 0.0, steps: 20, seed: 3, ..GuidanceConfig::default() };
    let via_restore = restore(&lq, params, &[], &cfg0, &sched)?;
    let chain = sched.respace(cfg0.steps)?;
    let bundle = model.condition(&lq, &cfg0.content())?;
    let cond = bundle.with_prompt(&cfg0.pos, params)?;
    let noise = ChainNoise::new(cfg0.seed, bundle.z_lq.shape());
    let mut z = noise.initial();
    for t in (0..chain.len()).rev() {
        let eps = predict_eps(&model, &z, t, &cond, &chain)?;
        let n = Sampler::Ancestral.needs_noise(t).then(|| noise.at(t));
        z = step_from_eps(&z, &eps, t, &chain, Sampler::Ancestral, n.as_ref())?;
    }
    let by_hand = model.decode(&z)?.clamped();
    let lambda0 = via_restore == by_hand;

    // equal prompts: any λ gives the positive-only path
    let same = GuidanceConfig {
        lambda_cfg: 2.5,
        neg: cfg0.pos.clone(),
        ..cfg0.clone()
    };
    let equal_prompts = restore(&lq, params, &[], &same, &sched)? == via_restore;

    // collinearity of one guided step in λ
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z_t = Tensor::randn(bundle.z_lq.shape(), 1.0, &mut rng);
    let n = Tensor::randn(bundle.z_lq.shape(), 1.0, &mut rng);
    let step = |l: f64| -> Result<Tensor> {
        let c = GuidanceConfig { lambda_cfg: l, ..cfg0.clone() };
        cfg_step(&model, &z_t, 10, &bundle.z_lq, &c, &chain, Some(&n))
    };
    let (z0, z1, z2) = (step(0.0)?, step(1.0)?, step(2.0)?);
    let mut worst: f64 = 0.0;
    for i in 0..z0.len() {
        let (a, b, c) = (z0.data()[i], z1.data()[i], z2.data()[i]);
        worst = worst.max(((b - a) - (c - b)).abs());
    }
    outcome(
        lambda0 && equal_prompts && worst < COLLINEAR_TOL,
        format!(
            "λ=0 bit-exact: {lambda0}; pos==neg bit-exact at λ=2.5: {equal_prompts}; collinearity max dev {worst:.2e} < {COLLINEAR_TOL:.0e}"
        ),
    )
}

fn c5_diffusion_consistency(params: &NetParams) -> Result<Outcome> {
    // single-step transitions composed t times on a 1-pixel image, against
    // the closed-form marginal
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = 0.8;
    let mut moments_ok = true;
    let mut worst_z: f64 = 0.0;
    for t_steps in [2usize, 5] {
        let sched = make_schedule(t_steps, 0.1, 0.4)?;
        let singles: Vec<_> = sched.beta.iter().map(|&b| make_schedule(1, b, b)).collect::<Result<_>>()?;
        let mut draws = vec![Vec::with_capacity(MC_SAMPLES); t_steps];
        for _ in 0..MC_SAMPLES {
            let mut x = Tensor::new(&[1], vec![x0])?;
            for (t, one) in singles.iter().enumerate() {
                x = forward_diffuse(&x, 0, &Tensor::randn(&[1], 1.0, &mut rng), one)?;
                draws[t].push(x.data()[0]);
            }
        }
        for (t, d) in draws.iter().enumerate() {
            let ab = sched.alpha_bar[t];
            let n = MC_SAMPLES as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let want_var = 1.0 - ab;
            // standard errors of a Gaussian sample mean and variance
            let zm = (mean - ab.sqrt() * x0).abs() / (want_var / n).sqrt();
            let zv = (var - want_var).abs() / (want_var * (2.0 / (n - 1.0)).sqrt());
            worst_z = worst_z.max(zm).max(zv);
            moments_ok &= zm < MC_SIGMAS && zv < MC_SIGMAS;
        }
    }
    let model = Model::new(params, &[], Trainable::Nothing);
    let lq = synth_dataset(HELD_OUT_SEED, 1, 32)?[0].clean.clone();
    let cond = model.condition(&lq, &[PromptId::HighQuality])?;
    let sched = ScheduleConfig::default().build()?.respace(25)?;
    let a = sample(&model, cond.z_lq.shape(), &cond, &sched, 9, true)?;
    let b = sample(&model, cond.z_lq.shape(), &cond, &sched, 9, true)?;
    let repro = a.bit_eq(&b);
    outcome(
        moments_ok && repro,
        format!("MC moments worst |z| {worst_z:.2} < {MC_SIGMAS} at T in {{2,5}}; deterministic sampling bit-reproducible: {repro}"),
    )
}

struct Trained {
    params: NetParams,
    train_secs: f64,
}

fn train_default() -> Result<Trained> {
    let data = synth_dataset(TRAIN_SEED, 512, 32)?;
    let start = Instant::now();
    let (params, _) = train_base(&data, &TrainConfig::default(), TRAIN_SEED)?;
    Ok(Trained {
        params,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c6_training_improvement(t: &Trained) -> Result<Outcome> {
    let spec: DegradationSpec = SPEC.parse()?;
    let held = synth_dataset(HELD_OUT_SEED, HELD_OUT, 32)?;
    let sched = ScheduleConfig::default().build()?;
    let lqs: Vec<Image> = held
        .iter()
        .enumerate()
        .map(|(i, d)| apply(&spec, &d.clean, 1000 + i as u64))
        .collect::<Result<_>>()?;
    let start = Instant::now();
    let restored = restore_batch(&lqs, &t.params, &[], &restore_config(), &sched, Parallelism::Parallel)?;
    let restore_secs = start.elapsed().as_secs_f64();
    let score = |imgs: &[Image], f: fn(&Image, &Image) -> Result<f64>| -> Result<f64> {
        Ok(mean(&imgs.iter().zip(&held).map(|(a, d)| f(a, &d.clean)).collect::<Result<Vec<_>>>()?))
    };
    let (p_lq, p_re) = (score(&lqs, psnr)?, score(&restored, psnr)?);
    let (s_lq, s_re) = (score(&lqs, ssim)?, score(&restored, ssim)?);
    let secs = t.train_secs + restore_secs;
    outcome(
        p_re >= p_lq + PSNR_GAIN_DB && s_re > s_lq && secs < TRAIN_RESTORE_SECS,
        format!(
            "PSNR {p_re:.3} vs degraded {p_lq:.3} dB (gain {:+.3}, need >= {PSNR_GAIN_DB}); SSIM {s_re:.4} vs {s_lq:.4}; train {:.0}s + restore {restore_secs:.0}s < {TRAIN_RESTORE_SECS}s",
            p_re - p_lq,
            t.train_secs
        ),
    )
}

struct LoraRun {
    base_before: Vec<u8>,
    base_after: Vec<u8>,
    loss_base: f64,
    loss_lora: f64,
    secs: f64,
}

fn lora_run() -> Result<LoraRun> {
    let all = synth_dataset(TRAIN_SEED, 512, 32)?;
    let (family, rest): (Vec<DatasetItem>, Vec<DatasetItem>) = all.into_iter().partition(|d| d.prompt == FAMILY_OUT);
    let start = Instant::now();
    let (base, _) = train_base(&rest, &TrainConfig::default(), TRAIN_SEED)?;
    let sched_cfg = ScheduleConfig::default();
    let base_before = Checkpoint::base(&base, sched_cfg).encode()?;
    let cfg = LoraTrainConfig {
        steps: LORA_STEPS,
        ..LoraTrainConfig::default()
    };
    let adapters = attach(&base, &cfg.lora, TRAIN_SEED)?;
    let (trained, _) = train_lora(&base, adapters, &family, &cfg, sched_cfg, TRAIN_SEED)?;
    let base_after = Checkpoint::base(&base, sched_cfg).encode()?;
    let held: Vec<DatasetItem> = synth_dataset(HELD_OUT_SEED, 128, 32)?
        .into_iter()
        .filter(|d| d.prompt == FAMILY_OUT)
        .collect();
    let sched = sched_cfg.build()?;
    let loss = |ads: &[LoraAdapter]| held_out_loss(&base, ads, &held, &cfg.spec, &sched, 99, 16, Parallelism::Parallel);
    Ok(LoraRun {
        loss_base: loss(&[])?,
        loss_lora: loss(&trained)?,
        base_before,
        base_after,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn c3_frozen_base(r: &LoraRun) -> Result<Outcome> {
    let diff = r.base_before.iter().zip(&r.base_after).filter(|(a, b)| a != b).count()
        + r.base_before.len().abs_diff(r.base_after.len());
    outcome(
        diff == 0,
        format!("{} base checkpoint bytes compared after {LORA_STEPS} LoRA steps, {diff} differ", r.base_before.len()),
    )
}

fn c7_lora_benefit(r: &LoraRun) -> Result<Outcome> {
    let gain = 1.0 - r.loss_lora / r.loss_base;
    let frozen = r.base_before == r.base_after;
    outcome(
        gain >= LORA_GAIN && frozen,
        format!(
            "held-out {} loss {:.5} -> {:.5} ({:.1}% reduction, need >= {:.0}%); base frozen: {frozen}; {:.0}s",
            FAMILY_OUT,
            r.loss_base,
            r.loss_lora,
            100.0 * gain,
            100.0 * LORA_GAIN,
            r.secs
        ),
    )
}

fn c8_timing(params: &NetParams) -> Result<Outcome> {
    let sched = ScheduleConfig::default().build()?;
    let lq = synth_dataset(HELD_OUT_SEED, 1, 32)?[0].clean.clone();
    let steps = [25usize, 50, 100, 200];
    let mut secs = Vec::new();
    for &s in &steps {
        let cfg = GuidanceConfig { steps: s, ..restore_config() };
        let mut runs: Vec<f64> = (0..3)
            .map(|_| timed_restore(&lq, params, &[], &cfg, &sched).map(|r| r.1))
            .collect::<Result<_>>()?;
        runs.sort_by(f64::total_cmp);
        secs.push(runs[1]);
    }
    let xs: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let (mx, my) = (mean(&xs), mean(&secs));
    let sxy: f64 = xs.iter().zip(&secs).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = secs.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    let shown: Vec<String> = secs.iter().map(|s| format!("{:.3}", s)).collect();
    outcome(
        r2 >= TIMING_R2,
        format!("median seconds at steps {steps:?}: [{}]; linear fit r² {r2:.4} >= {TIMING_R2}", shown.join(", ")),
    )
}

fn c9_metrics(params: &NetParams) -> Result<Outcome> {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Image::from_tensor(&Tensor::randn(&[1, 32, 32], 0.2, &mut rng).map(|v| (v + 0.5).clamp(0.02, 0.98)))?;
    checks.push(("psnr(x,x) = inf", psnr(&x, &x)?.is_infinite()));
    let shifted = Image::from_tensor(&x.to_tensor().map(|v| v + 1.0 / 255.0))?;
    checks.push(("uniform 1/255 -> 48.131 dB", (psnr(&x, &shifted)? - CLOSED_FORM_DB).abs() < 5e-4));
    let a = Image::filled(1, 16, 16, 0.5)?;
    let b = Image::filled(1, 16, 16, 0.6)?;
    checks.push(("mse 0.01 -> 20 dB", (psnr(&a, &b)? - 20.0).abs() < 1e-9));
    let noisy = |s: f64| ldrs::degrade::add_noise(&x, s, 3);
    let ladder: Vec<f64> = [2.0, 5.0, 10.0, 20.0, 40.0].iter().map(|&s| psnr(&x, &noisy(s)?)).collect::<Result<_>>()?;
    checks.push(("psnr falls along noise ladder", ladder.windows(2).all(|w| w[1] < w[0])));
    checks.push(("ssim(x,x) = 1", (ssim(&x, &x)? - 1.0).abs() < SSIM_SELF_TOL));
    let pattern = Image::from_fn(1, 32, 32, |_, y, xx| if (y / 4 + xx / 4) % 2 == 0 { 0.3 } else { 0.7 })?;
    let inverted = Image::from_tensor(&pattern.to_tensor().map(|v| 1.0 - v))?;
    checks.push(("ssim(x,1-x) < 0", ssim(&pattern, &inverted)? < 0.0));
    let y = noisy(20.0)?;
    checks.push(("ssim symmetric", (ssim(&x, &y)? - ssim(&y, &x)?).abs() < 1e-12));
    checks.push(("proxy(x,x) = 0", perceptual_proxy(&x, &x, params)? == 0.0));
    checks.push(("proxy symmetric", (perceptual_proxy(&x, &y, params)? - perceptual_proxy(&y, &x, params)?).abs() < 1e-12));
    let clean: Vec<Image> = synth_dataset(HELD_OUT_SEED, 16, 32)?.into_iter().map(|d| d.clean).collect();
    let avg = |sigma: f64| -> Result<f64> {
        Ok(mean(&clean.iter().map(|c| perceptual_proxy(c, &ldrs::degrade::blur(c, sigma)?, params)).collect::<Result<Vec<_>>>()?))
    };
    checks.push(("proxy monotone in blur", avg(3.0)? > avg(1.0)?));
    let flip = |i: &Image| i.flip_horizontal();
    checks.push((
        "flip invariance",
        (psnr(&x, &y)? - psnr(&flip(&x), &flip(&y))?).abs() < 1e-9
            && (ssim(&x, &y)? - ssim(&flip(&x), &flip(&y))?).abs() < 1e-9
            && (perceptual_proxy(&x, &y, params)? - perceptual_proxy(&flip(&x), &flip(&y), params)?).abs() < 1e-12,
    ));
    let pair = EvalPair { id: "p".into(), spec: SPEC.into(), clean: x.clone(), restored: x.clone(), wall_ms: 0.0 };
    let rep = evaluate(std::slice::from_ref(&pair), params, Parallelism::Sequential)?;
    checks.push((
        "identical pair row",
        rep.rows.len() == 1 && rep.rows[0].psnr_db.is_infinite() && rep.rows[0].ssim == 1.0 && rep.rows[0].pproxy == 0.0,
    ));
    let row = |db: f64| MetricRow { id: "r".into(), spec: SPEC.into(), psnr_db: db, ssim: 0.5, pproxy: 0.1, wall_ms: 0.0 };
    let agg = MetricReport::from_rows(vec![row(20.0), row(30.0)])?;
    checks.push(("mean of dB {20,30} = 25", (agg.mean.psnr_db - 25.0).abs() < 1e-12));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{}/{} metric oracles (uniform 1/255 gives {:.3} dB); failed: {:?}",
            checks.len() - failed.len(),
            checks.len(),
            psnr(&x, &shifted)?,
            failed
        ),
    )
}

/// Dataset files, checkpoints, logs, restored images and the metric CSV of a
/// small end-to-end run, written under `dir`.
fn artifacts(dir: &Path) -> Result<()> {
    write_dataset(&dir.join("data"), &synth_dataset(4, 8, 16)?)?;
    let data = read_dataset(&dir.join("data"))?;
    let cfg = TrainConfig {
        steps: 3,
        batch: 4,
        net: NetConfig::tiny(),
        schedule: ScheduleConfig { steps: 20, ..ScheduleConfig::default() },
        ..TrainConfig::default()
    };
    let (params, log) = train_base(&data, &cfg, 8)?;
    Checkpoint::base(&params, cfg.schedule).save(dir.join("base.ldrs"))?;
    fs::write(dir.join("base.csv"), log.to_csv())?;
    let lcfg = LoraTrainConfig {
        steps: 2,
        batch: 2,
        lora: LoraConfig { rank: 1, ..LoraConfig::default() },
        ..LoraTrainConfig::default()
    };
    let (ads, llog) = train_lora(&params, attach(&params, &lcfg.lora, 8)?, &data, &lcfg, cfg.schedule, 8)?;
    Checkpoint::lora(&ads, cfg.schedule, params.config()).save(dir.join("lora.ldrs"))?;
    fs::write(dir.join("lora.csv"), llog.to_csv())?;
    let spec: DegradationSpec = "blur:1.0+noise:5".parse()?;
    let lqs: Vec<Image> = data.iter().enumerate().map(|(i, d)| apply(&spec, &d.clean, i as u64)).collect::<Result<_>>()?;
    let sched = cfg.schedule.build()?;
    let gcfg = GuidanceConfig { steps: 5, ..GuidanceConfig::default() };
    let restored = restore_batch(&lqs, &params, &ads, &gcfg, &sched, Parallelism::Parallel)?;
    let mut pairs = Vec::new();
    for (i, (r, d)) in restored.iter().zip(&data).enumerate() {
        ldrs::image::save_pnm(r, dir.join(format!("{i}.restored.pgm")))?;
        pairs.push(EvalPair { id: i.to_string(), spec: spec.to_string(), clean: d.clean.clone(), restored: r.clone(), wall_ms: 0.0 });
    }
    fs::write(dir.join("eval.csv"), evaluate(&pairs, &params, Parallelism::Parallel)?.to_csv())?;
    Ok(())
}

fn files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).expect("under dir").display().to_string(), fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn c10_reproducibility() -> Result<Outcome> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    artifacts(a.path())?;
    artifacts(b.path())?;
    let (fa, fb) = (files(a.path())?, files(b.path())?);
    let same_names = fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0));
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let bytes: usize = fa.iter().map(|f| f.1.len()).sum();
    outcome(
        same_names && differing.is_empty(),
        format!("{} artifacts ({bytes} bytes) compared across two runs; differing: {differing:?}", fa.len()),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Result<Outcome>)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Result<Outcome>| {
        let r = f();
        let line = match &r {
            Ok(o) => format!("criterion {n:2} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("criterion {n:2} {name}: FAIL | error: {e}"),
        };
        println!("{line}");
        results.push((n, name, r));
    };
    run(1, "gradient correctness", &mut c1_gradcheck);
    run(2, "LoRA neutrality and equivalence", &mut c2_lora_equivalence);
    let trained = train_default();
    let params = match &trained {
        Ok(t) => t.params.clone(),
        Err(_) => NetParams::init(NetConfig::default(), 0).expect("init"),
    };
    let lora = lora_run();
    run(3, "frozen base", &mut || lora.as_ref().map_err(clone_err).and_then(c3_frozen_base));
    run(4, "CFG identities", &mut || c4_cfg_identities(&params));
    run(5, "diffusion consistency", &mut || c5_diffusion_consistency(&params));
    run(6, "training improvement", &mut || trained.as_ref().map_err(clone_err).and_then(c6_training_improvement));
    run(7, "LoRA adaptation benefit", &mut || lora.as_ref().map_err(clone_err).and_then(c7_lora_benefit));
    run(8, "timing linearity", &mut || c8_timing(&params));
    run(9, "metric oracles", &mut || c9_metrics(&params));
    run(10, "reproducibility", &mut c10_reproducibility);
    let passed = results.iter().filter(|r| matches!(r.2, Ok(Outcome { pass: true, .. }))).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0}s", results.len(), started.elapsed().as_secs_f64());
    let strict = std::env::var_os("LDRS_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if passed == results.len() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn clone_err(e: &ldrs::Error) -> ldrs::Error {
    ldrs::Error::Oracle(e.to_string())
}
