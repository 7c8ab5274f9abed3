//! Multiscale structure guidance.
//!
//! At scale `k` the blurry input is reduced to `phi_k(y)`: luma, block-average
//! downsampled by `2^k`, plus a small Gaussian perturbation. A per-scale stack
//! of stride-1 residual conv blocks turns `phi_k(y)` into latent features
//! `h_k`, and a single conv layer regresses the clean `phi_k(x)` from them.
//! Nothing inside a stack resamples, so `h_k` and `r_k` keep the spatial
//! dims of `phi_k(y)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{downsample, to_grayscale, DownsampledImage, Image};
use crate::nn::{Conv, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

pub const NUM_SCALES: usize = 3;

/// How per-scale regression losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleReduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Feature width `C_g`.
    pub width: usize,
    /// Residual blocks per scale.
    pub blocks: usize,
    pub reduction: ScaleReduction,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 3,
            reduction: ScaleReduction::Sum,
        }
    }
}

/// `phi_k(y) = downsample_k(luma(y)) + n`, `n ~ N(0, sigma^2)`, in intensity
/// units and not clamped.
pub fn phi<R: Rng>(y: &Image, k: u32, sigma: f64, rng: &mut R) -> Result<DownsampledImage> {
    let gray = to_grayscale(y)?;
    let mut out = downsample(&gray, k)?;
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut out.data {
            *v = (*v as f64 + n.sample(rng)) as f32;
        }
    }
    Ok(out)
}

/// `phi_k` for `k = 1, 2, 3`, drawn in that order from `rng`.
pub fn phi_pyramid<R: Rng>(y: &Image, sigma: f64, rng: &mut R) -> Result<[DownsampledImage; NUM_SCALES]> {
    Ok([phi(y, 1, sigma, rng)?, phi(y, 2, sigma, rng)?, phi(y, 3, sigma, rng)?])
}

/// Intensity units to the centred model range.
pub fn phi_to_model<T: Scalar>(p: &DownsampledImage) -> Tensor<T> {
    p.to_tensor::<T>().map(|v| T::lit(2.0) * v - T::one())
}

#[derive(Debug, Clone)]
struct ScaleStack {
    conv_in: Conv,
    blocks: Vec<(Conv, Conv)>,
    head: Conv,
}

/// Parameter layout of the three per-scale extractor stacks and heads. The
/// stacks share no weights.
#[derive(Debug, Clone)]
pub struct GuidanceNet {
    pub config: GuidanceConfig,
    scales: Vec<ScaleStack>,
}

/// Per-scale tape handles: latent features `h` and regression outputs `r`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars {
    pub h: [Var; NUM_SCALES],
    pub r: [Var; NUM_SCALES],
}

/// Concrete pyramid values.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePyramid<T> {
    pub phi_input: Vec<Tensor<T>>,
    pub features: Vec<Tensor<T>>,
    pub regression: Vec<Tensor<T>>,
}

impl GuidanceNet {
    pub fn build<T: Scalar, R: Rng>(params: &mut ParamSet<T>, config: GuidanceConfig, rng: &mut R) -> Self {
        let c = config.width;
        let scales = (1..=NUM_SCALES)
            .map(|k| {
                let p = format!("guidance.s{k}");
                ScaleStack {
                    conv_in: Conv::build(params, rng, &format!("{p}.conv_in"), 1, c, 3),
                    blocks: (0..config.blocks)
                        .map(|j| {
                            (
                                Conv::build(params, rng, &format!("{p}.block{j}.conv1"), c, c, 3),
                                Conv::build(params, rng, &format!("{p}.block{j}.conv2"), c, c, 3),
                            )
                        })
                        .collect(),
                    head: Conv::build(params, rng, &format!("{p}.head"), c, 1, 3),
                }
            })
            .collect();
        Self { config, scales }
    }

    /// Parameter ids of the regression head at scale `k` (1-based).
    pub fn head_params(&self, k: usize) -> (ParamId, ParamId) {
        let h = self.scales[k - 1].head;
        (h.w, h.b)
    }

    /// Extracts features and regression outputs for the three inputs
    /// `phi_1(y), phi_2(y), phi_3(y)` given as `[1, H/2^k, W/2^k]` tape values.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, inputs: [Var; NUM_SCALES]) -> Result<PyramidVars> {
        let dims: Vec<(usize, usize, usize)> = inputs.iter().map(|&v| tape.value(v).chw()).collect();
        for (k, &(c, h, w)) in dims.iter().enumerate() {
            if c != 1 {
                return Err(Error::Shape(format!("guidance input at scale {} has {c} channels", k + 1)));
            }
            if k > 0 {
                let (_, ph, pw) = dims[k - 1];
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::Shape(format!(
                        "guidance scale {} is {h}x{w}, expected half of {ph}x{pw}",
                        k + 1
                    )));
                }
            }
        }
        let mut h = [inputs[0]; NUM_SCALES];
        let mut r = [inputs[0]; NUM_SCALES];
        for (k, stack) in self.scales.iter().enumerate() {
            let mut x = stack.conv_in.apply(tape, inputs[k]);
            for (c1, c2) in &stack.blocks {
                let a = c1.apply(tape, x);
                let a = tape.silu(a);
                let a = c2.apply(tape, a);
                x = tape.add(x, a);
            }
            h[k] = x;
            r[k] = stack.head.apply(tape, x);
        }
        Ok(PyramidVars { h, r })
    }

    /// Forward-only evaluation returning concrete tensors.
    pub fn evaluate<T: Scalar>(&self, params: &ParamSet<T>, inputs: &[Tensor<T>; NUM_SCALES]) -> Result<GuidancePyramid<T>> {
        let mut tape = Tape::inference(params);
        let vars = inputs.clone().map(|t| tape.constant(t));
        let p = self.forward(&mut tape, vars)?;
        Ok(GuidancePyramid {
            phi_input: inputs.to_vec(),
            features: p.h.iter().map(|&v| tape.value(v).clone()).collect(),
            regression: p.r.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

/// Per-scale MSE between `r_k` and the targets, and their reduction.
pub fn guidance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    regression: &[Var; NUM_SCALES],
    targets: &[Tensor<T>; NUM_SCALES],
    reduction: ScaleReduction,
) -> Result<([Var; NUM_SCALES], Var)> {
    for k in 0..NUM_SCALES {
        if tape.value(regression[k]).shape() != targets[k].shape() {
            return Err(Error::Shape(format!(
                "regression output {:?} vs target {:?} at scale {}",
                tape.value(regression[k]).shape(),
                targets[k].shape(),
                k + 1
            )));
        }
    }
    let per: [Var; NUM_SCALES] = std::array::from_fn(|k| tape.mse(regression[k], &targets[k]));
    let w = match reduction {
        ScaleReduction::Sum => T::one(),
        ScaleReduction::Mean => T::one() / T::lit(NUM_SCALES as f64),
    };
    let total = tape.weighted_sum(&per.map(|v| (v, w)));
    Ok((per, total))
}
