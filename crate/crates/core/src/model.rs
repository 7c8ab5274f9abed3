//! The trainable pair: guidance network plus denoiser, sharing one parameter
//! set, and the per-example training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blursynth::Pair;
use crate::denoiser::{denoising_loss, Denoiser, DenoiserConfig, InjectionMode};
use crate::error::{Error, Result};
use crate::guidance::{
    guidance_loss, phi_pyramid, phi_to_model, GuidanceConfig, GuidanceNet, GuidancePyramid, ScaleReduction, NUM_SCALES,
};
use crate::imagecore::Image;
use crate::nn::{ParamSet, Scalar, Tape, Tensor, Var};
use crate::schedule::{diffuse, sample_t, Schedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub ch: usize,
    pub num_res_blocks: usize,
    pub guidance_width: usize,
    pub guidance_blocks: usize,
    pub mode: InjectionMode,
    /// Std of the perturbation in `phi_k(y)`, intensity units.
    pub sigma: f64,
    pub schedule: ScheduleKind,
    pub reduction: ScaleReduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ch: 32,
            num_res_blocks: 2,
            guidance_width: 32,
            guidance_blocks: 3,
            mode: InjectionMode::Addition,
            sigma: 0.05,
            schedule: ScheduleKind::Cosine,
            reduction: ScaleReduction::Sum,
        }
    }
}

impl ModelConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            width: self.guidance_width,
            blocks: self.guidance_blocks,
            reduction: self.reduction,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            ch: self.ch,
            num_res_blocks: self.num_res_blocks,
            mode: self.mode,
            guidance_width: self.guidance_width,
            ..DenoiserConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub guidance: GuidanceNet,
    pub denoiser: Denoiser,
    pub schedule: Schedule,
    /// Number of leading parameters owned by the guidance network.
    pub guidance_param_count: usize,
}

/// One training draw: clean image, condition, noise, noise level, and the
/// guidance inputs and targets, all in model range.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub x0: Tensor<T>,
    pub y: Tensor<T>,
    pub eps: Tensor<T>,
    pub alpha: f64,
    pub phi_in: [Tensor<T>; NUM_SCALES],
    pub phi_target: [Tensor<T>; NUM_SCALES],
}

/// Handles to the loss scalars of one example.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub guidance: Var,
    pub denoise: Var,
    pub per_scale: Option<[Var; NUM_SCALES]>,
}

pub fn image_to_model<T: Scalar>(img: &Image) -> Tensor<T> {
    img.to_tensor::<T>().map(|v| T::lit(2.0) * v - T::one())
}

pub fn gaussian_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect())
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`; guidance parameters come first.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let guidance = GuidanceNet::build(&mut params, config.guidance(), &mut rng);
        let guidance_param_count = params.len();
        let denoiser = Denoiser::build(&mut params, config.denoiser(), &mut rng)?;
        Ok(Self {
            schedule: Schedule::new(config.schedule),
            config,
            params,
            guidance,
            denoiser,
            guidance_param_count,
        })
    }

    /// Architecture for `config` carrying the given parameter values, which
    /// must match the layout name for name and shape for shape.
    pub fn with_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (name, got)) in model.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match layout entry {want_name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            guidance: self.guidance.clone(),
            denoiser: self.denoiser.clone(),
            schedule: self.schedule,
            guidance_param_count: self.guidance_param_count,
        }
    }

    fn uses_guidance(&self) -> bool {
        self.config.mode != InjectionMode::None
    }

    /// Draws `t`, the noise and the guidance perturbation (in that order) for
    /// one pair.
    pub fn draw_example<R: Rng>(&self, pair: &Pair, rng: &mut R) -> Result<Example<T>> {
        if !pair.sharp.same_shape(&pair.blurry) || pair.sharp.channels() != 3 {
            return Err(Error::Shape("training pair must be two RGB images of equal size".into()));
        }
        let t = sample_t(rng);
        let alpha = self.schedule.alpha(t);
        let x0 = image_to_model::<T>(&pair.sharp);
        let eps = gaussian_tensor(rng, x0.shape());
        let phi_in = phi_pyramid(&pair.blurry, self.config.sigma, rng)?.map(|p| phi_to_model(&p));
        let phi_target = phi_pyramid(&pair.sharp, 0.0, rng)?.map(|p| phi_to_model(&p));
        Ok(Example {
            y: image_to_model(&pair.blurry),
            x0,
            eps,
            alpha,
            phi_in,
            phi_target,
        })
    }

    /// Records `w_g * L_guidance + lambda * L_DPM` for one example. The
    /// guidance loss is left out entirely in `None` mode.
    pub fn objective(&self, tape: &mut Tape<T>, ex: &Example<T>, lambda: f64, guidance_weight: f64) -> Result<LossVars> {
        let x_t = tape.constant(diffuse(&ex.x0, &ex.eps, ex.alpha));
        let y = tape.constant(ex.y.clone());
        let (h, guidance, per_scale) = if self.uses_guidance() {
            let inputs = ex.phi_in.clone().map(|t| tape.constant(t));
            let pyr = self.guidance.forward(tape, inputs)?;
            let (per, total) = guidance_loss(tape, &pyr.r, &ex.phi_target, self.config.reduction)?;
            (Some(pyr.h), total, Some(per))
        } else {
            (None, tape.constant(Tensor::scalar(T::zero())), None)
        };
        let eps_hat = self
            .denoiser
            .forward(tape, x_t, y, h.as_ref(), ex.alpha.sqrt(), self.config.mode)?;
        let denoise = denoising_loss(tape, eps_hat, &ex.eps)?;
        let total = tape.weighted_sum(&[(guidance, T::lit(guidance_weight)), (denoise, T::lit(lambda))]);
        Ok(LossVars {
            total,
            guidance,
            denoise,
            per_scale,
        })
    }

    /// Guidance features and regressions for fixed model-range inputs.
    pub fn guidance_pyramid(&self, phi_in: &[Tensor<T>; NUM_SCALES]) -> Result<GuidancePyramid<T>> {
        self.guidance.evaluate(&self.params, phi_in)
    }

    /// Noise prediction for a single state. `h` is ignored in `None` mode.
    pub fn predict_eps(&self, x_t: &Tensor<T>, y: &Tensor<T>, h: Option<&[Tensor<T>]>, alpha: f64) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let xv = tape.constant(x_t.clone());
        let yv = tape.constant(y.clone());
        let hv = match (self.uses_guidance(), h) {
            (false, _) => None,
            (true, Some(h)) if h.len() == NUM_SCALES => Some(std::array::from_fn(|k| tape.constant(h[k].clone()))),
            (true, _) => return Err(Error::Config("guided model needs three guidance feature maps".into())),
        };
        let out = self
            .denoiser
            .forward(&mut tape, xv, yv, hv.as_ref(), alpha.sqrt(), self.config.mode)?;
        Ok(tape.value(out).clone())
    }
}
