use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use ldrs::checkpoint::Checkpoint;
use ldrs::dataset::{read_dataset, synth_dataset, write_dataset, DatasetItem};
use ldrs::degrade::{apply, DegradationSpec};
use ldrs::guidance::{Fusion, GuidanceConfig};
use ldrs::image::{load_pnm, save_pnm};
use ldrs::lora::{attach_set, LoraAdapter, LoraConfig};
use ldrs::metrics::{evaluate, EvalPair};
use ldrs::net::NetConfig;
use ldrs::prompt::parse_prompts;
use ldrs::train::{AdamWConfig, BaseTrainer, LoraTrainConfig, LoraTrainer, TrainConfig, TrainLog};
use ldrs::{Image, Parallelism, PromptId};

use crate::config::{self, require, UsageError};

fn print_config<T: Serialize>(command: &str, cfg: &T) -> anyhow::Result<()> {
    println!("# {command} resolved config");
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse<T: std::str::FromStr<Err = ldrs::Error>>(s: &str, what: &str) -> anyhow::Result<T> {
    s.parse().map_err(|e| usage(format!("bad {what} {s:?}: {e}")))
}

fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn ext(img: &Image) -> &'static str {
    if img.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

/// `(id, role)` of a file named `<id>[.<role>].<ext>`.
fn split_name(p: &Path) -> Option<(String, Option<String>)> {
    let stem = p.file_stem()?.to_str()?;
    Some(match stem.split_once('.') {
        Some((id, role)) => (id.to_string(), Some(role.to_string())),
        None => (stem.to_string(), None),
    })
}

fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file() && is_image(p));
    files.sort();
    Ok(files)
}

pub fn synth_data(cfg: config::SynthData) -> anyhow::Result<()> {
    print_config("synth-data", &cfg)?;
    let out = require(&cfg.out, "out")?;
    let items = synth_dataset(cfg.seed, cfg.n, cfg.size)?;
    write_dataset(&out, &items)?;
    println!("wrote {} images to {}", items.len(), out.display());
    Ok(())
}

pub fn degrade(cfg: config::Degrade) -> anyhow::Result<()> {
    print_config("degrade", &cfg)?;
    let input = require(&cfg.input, "in")?;
    let out = require(&cfg.out, "out")?;
    let spec: DegradationSpec = parse(&cfg.spec, "spec")?;
    if !input.is_dir() {
        let img = load_pnm(&input)?;
        save_pnm(&apply(&spec, &img, cfg.seed)?, &out)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    fs::create_dir_all(&out)?;
    let mut n = 0u64;
    for path in list_images(&input)? {
        let Some((id, role)) = split_name(&path) else { continue };
        if role.as_deref().is_some_and(|r| r != "clean") {
            continue;
        }
        let img = load_pnm(&path)?;
        let lq = apply(&spec, &img, cfg.seed.wrapping_add(n))?;
        save_pnm(&lq, out.join(format!("{id}.lq.{}", ext(&lq))))?;
        save_pnm(&img, out.join(format!("{id}.clean.{}", ext(&img))))?;
        n += 1;
    }
    println!("wrote {n} degraded/clean pairs to {}", out.display());
    Ok(())
}

fn load_data(dir: &Path, keep: impl Fn(&DatasetItem) -> bool) -> anyhow::Result<Vec<DatasetItem>> {
    let data: Vec<DatasetItem> = read_dataset(dir)
        .with_context(|| format!("reading dataset {}", dir.display()))?
        .into_iter()
        .filter(keep)
        .collect();
    if data.is_empty() {
        bail!(usage(format!("no training images selected from {}", dir.display())));
    }
    Ok(data)
}

fn family(name: &str) -> anyhow::Result<PromptId> {
    let p: PromptId = parse(name, "family")?;
    if !p.is_family() {
        bail!(usage(format!("{name} is a quality tag, not an image family")));
    }
    Ok(p)
}

fn write_log(path: Option<&PathBuf>, log: &TrainLog) -> anyhow::Result<()> {
    if let Some(p) = path {
        fs::write(p, log.to_csv())?;
    }
    Ok(())
}

fn last_loss(log: &TrainLog) -> String {
    log.rows
        .last()
        .map_or_else(|| "no steps run".into(), |r| format!("step {} loss {:.6}", r.step, r.loss))
}

pub fn train_base(cfg: config::TrainBase) -> anyhow::Result<()> {
    print_config("train-base", &cfg)?;
    let data_dir = require(&cfg.data, "data")?;
    let out = require(&cfg.out, "out")?;
    let excluded = cfg.exclude_family.as_deref().map(family).transpose()?;
    let data = load_data(&data_dir, |d| Some(d.prompt) != excluded)?;
    let specs = cfg
        .specs
        .iter()
        .map(|s| parse(s, "spec"))
        .collect::<anyhow::Result<Vec<DegradationSpec>>>()?;
    let train = TrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        optimizer: AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        recon_weight: cfg.recon_weight,
        neg_dropout: cfg.neg_dropout,
        content_dropout: cfg.content_dropout,
        specs,
        schedule: ldrs::diffusion::ScheduleConfig {
            steps: cfg.schedule_steps,
            ..Default::default()
        },
        net: NetConfig {
            latent_channels: cfg.latent_channels,
            hidden: cfg.hidden,
            bottleneck: cfg.bottleneck,
            embed_dim: cfg.embed_dim,
            ..NetConfig::default()
        },
        record_time: cfg.record_time,
        parallelism: parallelism(cfg.sequential),
    };
    let mut trainer = match &cfg.resume {
        Some(p) => {
            let mut t = BaseTrainer::from_checkpoint(&Checkpoint::load(p)?)?;
            // the step budget may grow on resume
            t.config.steps = train.steps;
            if t.config != train {
                bail!(usage("--resume checkpoint was trained with a different configuration"));
            }
            t
        }
        None => BaseTrainer::new(train, cfg.seed)?,
    };
    if trainer.seed != cfg.seed {
        bail!(usage(format!("--resume checkpoint was seeded with {}, not {}", trainer.seed, cfg.seed)));
    }
    let mut log = TrainLog::default();
    trainer.run(&data, cfg.steps as u64, &mut log)?;
    write_log(cfg.log.as_ref(), &log)?;
    trainer.to_checkpoint()?.save(&out)?;
    println!("{}; wrote {}", last_loss(&log), out.display());
    Ok(())
}

pub fn train_lora(cfg: config::TrainLora) -> anyhow::Result<()> {
    print_config("train-lora", &cfg)?;
    let base_path = require(&cfg.base, "base")?;
    let data_dir = require(&cfg.data, "data")?;
    let out = require(&cfg.out, "out")?;
    let base_ck = Checkpoint::load(&base_path)?;
    let base = base_ck.params()?;
    let only = cfg.family.as_deref().map(family).transpose()?;
    let data = load_data(&data_dir, |d| only.is_none_or(|f| d.prompt == f))?;
    let lora = LoraConfig {
        rank: cfg.rank,
        targets: cfg.targets.clone(),
        reg_lambda: cfg.reg_lambda,
        lr: cfg.lr,
    };
    let train = LoraTrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lora: lora.clone(),
        weight_decay: cfg.weight_decay,
        spec: parse(&cfg.spec, "spec")?,
        neg_dropout: cfg.neg_dropout,
        content_dropout: cfg.content_dropout,
        record_time: cfg.record_time,
        parallelism: parallelism(cfg.sequential),
    };
    let mut trainer = match &cfg.resume {
        Some(p) => {
            let mut t = LoraTrainer::from_checkpoint(&Checkpoint::load(p)?)?;
            // the step budget may grow on resume
            t.config.steps = train.steps;
            if t.config != train || t.seed != cfg.seed {
                bail!(usage("--resume checkpoint was trained with a different configuration or seed"));
            }
            t
        }
        None => {
            let adapters = attach_set(&base, &lora, cfg.seed, &cfg.set)?;
            LoraTrainer::new(train, adapters, base_ck.header.schedule, cfg.seed)?
        }
    };
    let mut log = TrainLog::default();
    trainer.run(&base, &data, cfg.steps as u64, &mut log)?;
    write_log(cfg.log.as_ref(), &log)?;
    trainer.to_checkpoint(base.config())?.save(&out)?;
    println!(
        "{}; {} adapters, {} trainable values; wrote {}",
        last_loss(&log),
        trainer.adapters.len(),
        ldrs::lora::trainable_count(&trainer.adapters),
        out.display()
    );
    Ok(())
}

fn times_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("id,wall_ms\n");
    for (id, ms) in rows {
        s.push_str(&format!("{id},{ms:.3}\n"));
    }
    s
}

pub fn restore(cfg: config::Restore) -> anyhow::Result<()> {
    print_config("restore", &cfg)?;
    let base_path = require(&cfg.base, "base")?;
    let input = require(&cfg.input, "in")?;
    let out = require(&cfg.out, "out")?;
    let base_ck = Checkpoint::load(&base_path)?;
    let params = base_ck.params()?;
    let sched = base_ck.header.schedule.build()?;
    let mut adapters: Vec<LoraAdapter> = Vec::new();
    for p in &cfg.lora {
        adapters.extend(Checkpoint::load(p)?.adapters()?);
    }
    let fusion: Fusion = serde_json::from_value(serde_json::Value::String(cfg.fusion.clone()))
        .map_err(|_| usage(format!("unknown fusion {:?}; use latent or noise-prediction", cfg.fusion)))?;
    let guidance = GuidanceConfig {
        lambda_cfg: cfg.cfg,
        pos: parse_prompts(&cfg.pos).map_err(|e| usage(e.to_string()))?,
        neg: parse_prompts(&cfg.neg).map_err(|e| usage(e.to_string()))?,
        steps: cfg.steps,
        deterministic: cfg.deterministic,
        seed: cfg.seed,
        fusion,
    };
    guidance.validate().map_err(|e| usage(e.to_string()))?;

    let jobs: Vec<(String, PathBuf, PathBuf)> = if cfg.batch {
        if !input.is_dir() {
            bail!(usage("--batch needs --in to be a directory"));
        }
        fs::create_dir_all(&out)?;
        list_images(&input)?
            .into_iter()
            .filter_map(|p| {
                let (id, role) = split_name(&p)?;
                matches!(role.as_deref(), None | Some("lq")).then(|| {
                    let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("pgm").to_string();
                    let dest = out.join(format!("{id}.restored.{ext}"));
                    (id, p, dest)
                })
            })
            .collect()
    } else {
        let id = split_name(&input).map(|s| s.0).unwrap_or_default();
        vec![(id, input.clone(), out.clone())]
    };
    let results = parallelism(cfg.sequential).try_map(jobs.len(), |i| {
        let (_, src, dest) = &jobs[i];
        let lq = load_pnm(src)?;
        let c = GuidanceConfig {
            seed: guidance.seed.wrapping_add(i as u64),
            ..guidance.clone()
        };
        let (img, secs) = ldrs::train::timed_restore(&lq, &params, &adapters, &c, &sched)?;
        save_pnm(&img, dest)?;
        Ok::<f64, ldrs::Error>(secs)
    })?;
    let rows: Vec<(String, f64)> = jobs.iter().map(|j| j.0.clone()).zip(results.iter().map(|s| s * 1e3)).collect();
    if let Some(t) = &cfg.times {
        fs::write(t, times_csv(&rows))?;
    }
    println!("restored {} image(s) into {}", rows.len(), out.display());
    Ok(())
}

fn read_times(path: &Path) -> anyhow::Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let (id, ms) = line
            .split_once(',')
            .with_context(|| format!("{}:{}: expected id,wall_ms", path.display(), n + 1))?;
        map.insert(id.to_string(), ms.trim().parse::<f64>().with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(map)
}

pub fn eval(cfg: config::Eval) -> anyhow::Result<()> {
    print_config("eval", &cfg)?;
    let dir = require(&cfg.dir, "dir")?;
    let base_path = require(&cfg.base, "base")?;
    let params = Checkpoint::load(&base_path)?.params()?;
    let times = cfg.times.as_deref().map(read_times).transpose()?.unwrap_or_default();
    let mut pairs = Vec::new();
    for path in list_images(&dir)? {
        let Some((id, Some(role))) = split_name(&path) else { continue };
        if role != "clean" {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("pgm");
        let restored = dir.join(format!("{id}.restored.{ext}"));
        if !restored.exists() {
            bail!("{} has no matching {}", path.display(), restored.display());
        }
        pairs.push(EvalPair {
            wall_ms: times.get(&id).copied().unwrap_or(0.0),
            id,
            spec: cfg.spec.clone(),
            clean: load_pnm(&path)?,
            restored: load_pnm(&restored)?,
        });
    }
    if pairs.is_empty() {
        bail!(usage(format!("no <id>.clean.* files in {}", dir.display())));
    }
    let report = evaluate(&pairs, &params, parallelism(cfg.sequential))?;
    match &cfg.out {
        Some(p) => {
            fs::write(p, report.to_csv())?;
            println!(
                "{} pairs: mean psnr {:.3} dB, ssim {:.4}, pproxy {:.5}; wrote {}",
                report.rows.len(),
                report.mean.psnr_db,
                report.mean.ssim,
                report.mean.pproxy,
                p.display()
            );
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

pub fn gradcheck(cfg: config::Gradcheck) -> anyhow::Result<()> {
    print_config("gradcheck", &cfg)?;
    let report = ldrs::gradcheck::suite(cfg.seed)?;
    for c in &report.checks {
        println!("{:<48} {:.3e}", c.name, c.max_rel_err);
    }
    println!("max rel err {:.3e} (tolerance {:.0e})", report.max_rel_err(), ldrs::gradcheck::SUITE_TOLERANCE);
    if !report.passed() {
        let worst = report.worst().map(|w| w.name.as_str()).unwrap_or("");
        bail!("gradient check failed; worst case {worst}");
    }
    Ok(())
}
