//! Training configuration, presets and the flat `key = value` mapping.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::guidance::ScaleReduction;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Micro,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Self::Micro),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Micro => "micro",
            Self::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub lr: f64,
    pub warmup_iters: u64,
    pub ramp_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds parameter init, crops and every per-step draw.
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// When false the regression loss gets weight 0 (the guidance network
    /// still trains through the denoising loss).
    pub guidance_loss: bool,
    pub log_every: u64,
    /// Checkpoint period for the CLI; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            iterations: 2000,
            batch_size: 8,
            crop_size: 64,
            lr: 1e-4,
            warmup_iters: 100,
            ramp_iters: 500,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clip_norm: None,
            guidance_loss: true,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Micro => Self {
                model: ModelConfig {
                    ch: 16,
                    guidance_width: 16,
                    ..ModelConfig::default()
                },
                batch_size: 4,
                lr: 2e-3,
                ..Self::default()
            },
            Preset::Paper => Self {
                model: ModelConfig {
                    ch: 64,
                    guidance_width: 64,
                    ..ModelConfig::default()
                },
                iterations: 1_000_000,
                batch_size: 256,
                crop_size: 128,
                warmup_iters: 20_000,
                ramp_iters: 60_000,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 {
            return fail("iterations and batch_size must be positive".into());
        }
        if self.crop_size < 8 || self.crop_size % 8 != 0 {
            return fail(format!("crop_size {} must be a positive multiple of 8", self.crop_size));
        }
        if self.ramp_iters > self.iterations {
            return fail(format!("ramp_iters {} exceeds iterations {}", self.ramp_iters, self.iterations));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} not in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm {c} must be positive"));
            }
        }
        let m = &self.model;
        if m.ch < 2 || m.ch % 2 != 0 || m.guidance_width == 0 || m.num_res_blocks == 0 {
            return fail("ch must be even and >= 2; widths and block counts positive".into());
        }
        if !(m.sigma >= 0.0 && m.sigma.is_finite()) {
            return fail(format!("sigma {} must be finite and non-negative", m.sigma));
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop_size", self.crop_size.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("ramp_iters", self.ramp_iters.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("clip_norm", self.clip_norm.map_or("off".into(), |c| c.to_string())),
            ("guidance_loss", self.guidance_loss.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("ch", m.ch.to_string()),
            ("num_res_blocks", m.num_res_blocks.to_string()),
            ("guidance_width", m.guidance_width.to_string()),
            ("guidance_blocks", m.guidance_blocks.to_string()),
            ("mode", m.mode.to_string()),
            ("sigma", m.sigma.to_string()),
            ("schedule", m.schedule.to_string()),
            (
                "guidance_reduction",
                match m.reduction {
                    ScaleReduction::Sum => "sum".into(),
                    ScaleReduction::Mean => "mean".into(),
                },
            ),
        ]
    }

    pub fn is_key(key: &str) -> bool {
        Self::default().to_pairs().iter().any(|(k, _)| *k == key)
    }

    /// Sets one field from its text form; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "crop_size" => self.crop_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "ramp_iters" => self.ramp_iters = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "clip_norm" => {
                self.clip_norm = match v {
                    "off" | "none" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "guidance_loss" => self.guidance_loss = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "ch" => m.ch = parse(key, v)?,
            "num_res_blocks" => m.num_res_blocks = parse(key, v)?,
            "guidance_width" => m.guidance_width = parse(key, v)?,
            "guidance_blocks" => m.guidance_blocks = parse(key, v)?,
            "mode" => m.mode = v.parse()?,
            "sigma" => m.sigma = parse(key, v)?,
            "schedule" => m.schedule = v.parse()?,
            "guidance_reduction" => {
                m.reduction = match v {
                    "sum" => ScaleReduction::Sum,
                    "mean" => ScaleReduction::Mean,
                    _ => return Err(Error::Config(format!("guidance_reduction must be sum or mean, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {v:?} for key {key:?}")))
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are
/// skipped, and a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Warm-start weight of the denoising loss: `min(1, iter / ramp)`, and 1
/// when `ramp` is 0.
pub fn loss_ramp(iter: u64, ramp_iters: u64) -> f64 {
    if ramp_iters == 0 {
        1.0
    } else {
        (iter as f64 / ramp_iters as f64).min(1.0)
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_iters`, then constant.
pub fn lr_at(iter: u64, warmup_iters: u64, base_lr: f64) -> f64 {
    if iter >= warmup_iters {
        base_lr
    } else {
        base_lr * iter as f64 / warmup_iters as f64
    }
}
