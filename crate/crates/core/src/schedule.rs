//! Continuous noise schedules, the forward diffusion marginal, and their
//! discretization for ancestral sampling.
//!
//! `alpha(t)` is the cumulative signal-retention coefficient: a noisy sample
//! at time `t` is `sqrt(alpha) * x + sqrt(1 - alpha) * eps`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imagecore::ModelImage;
use crate::nn::{Scalar, Tensor};

/// `1 - alpha(0)`.
pub const CLEAN_GAP: f64 = 5e-5;
/// `alpha(1)`.
pub const ALPHA_FLOOR: f64 = 1e-4;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    LinearVariance,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear-in-variance" | "linear" => Ok(Self::LinearVariance),
            other => Err(Error::UnknownSchedule(other.to_string())),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::LinearVariance => "linear-in-variance",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
}

pub fn make_schedule(kind: &str) -> Result<Schedule> {
    Ok(Schedule { kind: kind.parse()? })
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self { kind }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Strictly decreasing on `[0, 1]`, from `1 - CLEAN_GAP` to `ALPHA_FLOOR`.
    pub fn alpha(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let span = 1.0 - CLEAN_GAP - ALPHA_FLOOR;
        match self.kind {
            ScheduleKind::Cosine => {
                let angle = |u: f64| (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                let c = (angle(t).cos() / angle(0.0).cos()).powi(2);
                ALPHA_FLOOR + span * c
            }
            ScheduleKind::LinearVariance => 1.0 - CLEAN_GAP - span * t,
        }
    }

    /// Time at which `alpha(t) = alpha`, by bisection.
    pub fn time_of(&self, alpha: f64) -> Result<f64> {
        let (hi_a, lo_a) = (self.alpha(0.0), self.alpha(1.0));
        if !(alpha <= hi_a && alpha >= lo_a) {
            return Err(Error::Config(format!(
                "alpha {alpha} outside the {} schedule range [{lo_a}, {hi_a}]",
                self.kind
            )));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.alpha(mid) > alpha {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Uniform training time on `[0, 1)`.
pub fn sample_t<R: Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// `sqrt(alpha) * x + sqrt(1 - alpha) * eps` on tensors.
pub fn diffuse<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::lit(alpha.sqrt());
    let b = T::lit((1.0 - alpha).sqrt());
    x.zip_map(eps, |xv, ev| a * xv + b * ev)
}

pub fn forward_diffuse(x: &ModelImage, t: f64, eps: &ModelImage, sched: &Schedule) -> Result<ModelImage> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeRange(t));
    }
    if (x.height(), x.width(), x.channels()) != (eps.height(), eps.width(), eps.channels()) {
        return Err(Error::Shape("noise image must match the signal shape".into()));
    }
    let alpha = sched.alpha(t);
    let out = diffuse::<f64>(&x.to_tensor(), &eps.to_tensor(), alpha);
    ModelImage::from_tensor(&out)
}

/// The inference grid: `(steps, max_var)` combinations that produce usable
/// samples.
pub const SAMPLER_GRID: [(usize, f64); 19] = [
    (20, 0.5),
    (30, 0.5),
    (50, 0.2),
    (50, 0.5),
    (100, 0.1),
    (100, 0.2),
    (100, 0.5),
    (200, 0.05),
    (200, 0.1),
    (200, 0.2),
    (200, 0.5),
    (500, 0.02),
    (500, 0.05),
    (500, 0.1),
    (500, 0.2),
    (1000, 0.01),
    (1000, 0.02),
    (1000, 0.05),
    (1000, 0.1),
];

pub fn enumerate_grid() -> Vec<(usize, f64)> {
    SAMPLER_GRID.to_vec()
}

pub fn in_grid(steps: usize, max_var: f64) -> bool {
    SAMPLER_GRID.iter().any(|&(s, v)| s == steps && v == max_var)
}

/// `steps` cumulative alphas in sampling order reversed: `alphas[0]` is the
/// cleanest level, `alphas[steps - 1] = 1 - max_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    pub max_var: f64,
    pub alphas: Vec<f64>,
}

impl DiscreteSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }
}

/// Restricts `sched` to `[0, t*]` with `alpha(t*) = 1 - max_var` and samples it
/// at `t* * i / steps`, `i = 1..=steps`.
pub fn discretize(sched: &Schedule, steps: usize, max_var: f64) -> Result<DiscreteSchedule> {
    if steps < 1 {
        return Err(Error::Config("sampler steps must be >= 1".into()));
    }
    if !(max_var > 0.0 && max_var < 1.0) {
        return Err(Error::Config(format!("max_var {max_var} not in (0, 1)")));
    }
    if !in_grid(steps, max_var) {
        log::warn!("(steps={steps}, max_var={max_var}) is outside the checked sampler grid");
    }
    let end = 1.0 - max_var;
    let t_end = sched.time_of(end)?;
    let mut alphas: Vec<f64> = (1..steps)
        .map(|i| sched.alpha(t_end * (i as f64 / steps as f64)))
        .collect();
    alphas.push(end);
    Ok(DiscreteSchedule { max_var, alphas })
}
