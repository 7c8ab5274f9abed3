//! End-to-end training of the guidance network and denoiser.
//!
//! Every random draw of step `i` comes from a ChaCha stream selected by
//! `(seed, i)`, so a run resumed from a checkpoint replays exactly the draws
//! an uninterrupted run would have made.

mod adam;
mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::Adam;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{loss_ramp, lr_at, parse_kv, Preset, TrainConfig};

use crate::blursynth::Pair;
use crate::error::{Error, Result};
use crate::guidance::NUM_SCALES;
use crate::model::{Example, Model};
use crate::nn::{Tape, Tensor};

/// Stream salt separating crop draws from per-example draws.
const CROP_SALT: u64 = 0x6372_6f70;

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed steps.
    pub iter: u64,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.iter == other.iter
            && self.config == other.config
            && self.adam == other.adam
            && self.model.params.tensors() == other.model.params.tensors()
    }
}

/// Batch means of the loss terms at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub lambda: f64,
    pub lr: f64,
    pub guidance: f64,
    pub denoise: f64,
    pub total: f64,
    pub per_scale: [f64; NUM_SCALES],
    pub grad_norm: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(model.params.tensors(), config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            iter: 0,
            model,
            adam,
            config,
        })
    }
}

fn step_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

/// The batch for step `iter`: pairs taken cyclically from `data`, each
/// cropped to `crop_size` at a random offset.
pub fn batch_for(data: &[Pair], iter: u64, cfg: &TrainConfig) -> Result<Vec<Pair>> {
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut rng = step_rng(cfg.seed ^ CROP_SALT, iter);
    let c = cfg.crop_size;
    (0..cfg.batch_size)
        .map(|j| {
            let idx = ((iter as usize).wrapping_mul(cfg.batch_size) + j) % data.len();
            let p = &data[idx];
            let (h, w) = (p.sharp.height(), p.sharp.width());
            if h < c || w < c {
                return Err(Error::Dimensions {
                    height: h,
                    width: w,
                    reason: format!("smaller than crop size {c}"),
                });
            }
            let y0 = rng.random_range(0..=h - c);
            let x0 = rng.random_range(0..=w - c);
            if (h, w) == (c, c) {
                return Ok(p.clone());
            }
            Ok(Pair {
                sharp: p.sharp.crop(y0, x0, c, c)?,
                blurry: p.blurry.crop(y0, x0, c, c)?,
            })
        })
        .collect()
}

/// One optimizer step on `batch`. Deterministic given the state and batch.
pub fn train_step(state: &mut TrainState, batch: &[Pair]) -> Result<LossRecord> {
    let cfg = state.config.clone();
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    for p in batch {
        if p.sharp.height() != cfg.crop_size || p.sharp.width() != cfg.crop_size {
            return Err(Error::Shape(format!(
                "batch item is {}x{}, config crop size is {}",
                p.sharp.height(),
                p.sharp.width(),
                cfg.crop_size
            )));
        }
    }
    let iter = state.iter;
    let lambda = loss_ramp(iter, cfg.ramp_iters);
    let lr = lr_at(iter, cfg.warmup_iters, cfg.lr);
    let wg = if cfg.guidance_loss { 1.0 } else { 0.0 };

    let mut rng = step_rng(cfg.seed, iter);
    let examples: Vec<Example<f32>> = batch
        .iter()
        .map(|p| state.model.draw_example(p, &mut rng))
        .collect::<Result<_>>()?;

    let model = &state.model;
    let scale = 1.0 / batch.len() as f32;
    let items: Vec<(Vec<Tensor<f32>>, [f64; 3 + NUM_SCALES])> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.params);
            let l = model.objective(&mut tape, ex, lambda, wg)?;
            let root = tape.weighted_sum(&[(l.total, scale)]);
            let mut grads = model.params.zeros_like();
            tape.backward(root, &mut grads);
            let v = |var| tape.value(var).item() as f64;
            let per = l.per_scale.map_or([0.0; NUM_SCALES], |p| p.map(v));
            Ok((grads, [v(l.guidance), v(l.denoise), v(l.total), per[0], per[1], per[2]]))
        })
        .collect::<Result<_>>()?;

    let mut grads = model.params.zeros_like();
    let mut sums = [0.0f64; 3 + NUM_SCALES];
    for (g, vals) in &items {
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi);
        }
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
    }
    let n = batch.len() as f64;
    let means = sums.map(|s| s / n);
    if !means[2].is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "iteration {iter} loss (guidance {}, denoise {}, lambda {lambda})",
                means[0], means[1]
            ),
        });
    }
    let grad_norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            context: format!("iteration {iter} gradient"),
        });
    }
    if let Some(clip) = cfg.clip_norm {
        if grad_norm > clip {
            let s = (clip / grad_norm) as f32;
            for g in &mut grads {
                g.scale_assign(s);
            }
        }
    }
    state.adam.update(state.model.params.tensors_mut(), &grads, lr);
    state.iter += 1;
    Ok(LossRecord {
        iter,
        lambda,
        lr,
        guidance: means[0],
        denoise: means[1],
        total: means[2],
        per_scale: [means[3], means[4], means[5]],
        grad_norm,
    })
}

/// Runs steps until `state.iter == until`, calling `on_step` after each.
pub fn train_until(
    state: &mut TrainState,
    data: &[Pair],
    until: u64,
    mut on_step: impl FnMut(&TrainState, &LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    let mut records = Vec::new();
    while state.iter < until {
        let batch = batch_for(data, state.iter, &state.config)?;
        let rec = train_step(state, &batch)?;
        if state.config.log_every > 0 && rec.iter % state.config.log_every == 0 {
            log::info!(
                "iter {} lambda {:.3} lr {:.2e} total {:.5} guidance {:.5} denoise {:.5}",
                rec.iter,
                rec.lambda,
                rec.lr,
                rec.total,
                rec.guidance,
                rec.denoise
            );
        }
        on_step(state, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Trailing moving averages with the given window (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
