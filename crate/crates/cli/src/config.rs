//! Resolved per-command configuration: defaults, then the JSON file, then
//! explicit flags. Keys are the kebab-case flag names.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A configuration problem the user must fix; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Overlays `file` and then `flags` onto the defaults of `T`.
pub fn resolve<T, F>(config: Option<&Path>, flags: &F) -> anyhow::Result<T>
where
    T: Default + Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = match serde_json::to_value(T::default())? {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(file)) => overlay(&mut merged, file),
            Ok(_) => return Err(usage(format!("config {} must hold a JSON object", path.display()))),
            Err(e) => return Err(usage(format!("config {}: {e}", path.display()))),
        }
    }
    if let Value::Object(f) = serde_json::to_value(flags)? {
        overlay(&mut merged, f);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn overlay(base: &mut Map<String, Value>, top: Map<String, Value>) {
    for (k, v) in top {
        if !v.is_null() {
            base.insert(k, v);
        }
    }
}

pub fn require(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    path.clone().ok_or_else(|| usage(format!("--{flag} is required")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SynthData {
    pub out: Option<PathBuf>,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthData {
    fn default() -> Self {
        SynthData {
            out: None,
            n: 512,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Degrade {
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub spec: String,
    pub seed: u64,
}

impl Default for Degrade {
    fn default() -> Self {
        Degrade {
            input: None,
            out: None,
            spec: "blur:2.0+sr:4".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainBase {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub recon_weight: f64,
    pub neg_dropout: f64,
    pub content_dropout: f64,
    pub specs: Vec<String>,
    pub exclude_family: Option<String>,
    pub schedule_steps: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub embed_dim: usize,
    pub record_time: bool,
    pub sequential: bool,
    pub seed: u64,
}

impl Default for TrainBase {
    fn default() -> Self {
        let t = ldrs::train::TrainConfig::default();
        TrainBase {
            data: None,
            out: None,
            log: None,
            resume: None,
            steps: t.steps,
            batch: t.batch,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            recon_weight: t.recon_weight,
            neg_dropout: t.neg_dropout,
            content_dropout: t.content_dropout,
            specs: t.specs.iter().map(|s| s.to_string()).collect(),
            exclude_family: None,
            schedule_steps: t.schedule.steps,
            latent_channels: t.net.latent_channels,
            hidden: t.net.hidden,
            bottleneck: t.net.bottleneck,
            embed_dim: t.net.embed_dim,
            record_time: false,
            sequential: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct TrainLora {
    pub base: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub family: Option<String>,
    pub steps: usize,
    pub batch: usize,
    pub rank: usize,
    pub targets: Vec<String>,
    pub reg_lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub spec: String,
    pub neg_dropout: f64,
    pub content_dropout: f64,
    pub set: String,
    pub record_time: bool,
    pub sequential: bool,
    pub seed: u64,
}

impl Default for TrainLora {
    fn default() -> Self {
        let t = ldrs::train::LoraTrainConfig::default();
        TrainLora {
            base: None,
            data: None,
            out: None,
            log: None,
            resume: None,
            family: None,
            steps: t.steps,
            batch: t.batch,
            rank: t.lora.rank,
            targets: t.lora.targets.clone(),
            reg_lambda: t.lora.reg_lambda,
            lr: t.lora.lr,
            weight_decay: t.weight_decay,
            spec: t.spec.to_string(),
            neg_dropout: t.neg_dropout,
            content_dropout: t.content_dropout,
            set: "lora".into(),
            record_time: false,
            sequential: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Restore {
    pub base: Option<PathBuf>,
    pub lora: Vec<PathBuf>,
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub batch: bool,
    pub times: Option<PathBuf>,
    pub pos: String,
    pub neg: String,
    pub cfg: f64,
    pub steps: usize,
    pub deterministic: bool,
    pub fusion: String,
    pub sequential: bool,
    pub seed: u64,
}

impl Default for Restore {
    fn default() -> Self {
        let g = ldrs::guidance::GuidanceConfig::default();
        Restore {
            base: None,
            lora: Vec::new(),
            input: None,
            out: None,
            batch: false,
            times: None,
            pos: ldrs::prompt::format_prompts(&g.pos),
            neg: ldrs::prompt::format_prompts(&g.neg),
            cfg: g.lambda_cfg,
            steps: g.steps,
            deterministic: g.deterministic,
            fusion: "latent".into(),
            sequential: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Eval {
    pub dir: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub times: Option<PathBuf>,
    pub spec: String,
    pub sequential: bool,
    pub seed: u64,
}

impl Default for Eval {
    fn default() -> Self {
        Eval {
            dir: None,
            base: None,
            out: None,
            times: None,
            spec: "blur:2.0+sr:4".into(),
            sequential: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Gradcheck {
    pub seed: u64,
}
