//! Ancestral reverse-process sampling conditioned on a blurry input and its
//! guidance pyramid, plus sample averaging and grid sweeps.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blursynth::Pair;
use crate::error::{Error, Result};
use crate::evalkit::{psnr, ssim, SweepRecord};
use crate::guidance::{phi_pyramid, phi_to_model};
use crate::imagecore::{from_model_range, save_image, Image, ModelImage, DIM_MULTIPLE};
use crate::model::{gaussian_tensor, image_to_model, Model};
use crate::nn::{Scalar, Tensor};
use crate::schedule::{discretize, SAMPLER_GRID};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// `1 - alpha_T`, the noise variance the chain starts from.
    pub max_var: f64,
    pub seed: u64,
    pub n_samples: usize,
    /// Clip every `x0` estimate to `[-1, 1]`.
    pub clip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            max_var: 0.1,
            seed: 0,
            n_samples: 1,
            clip: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if !(self.max_var > 0.0 && self.max_var < 1.0) {
            return Err(Error::Config(format!("max_var {} not in (0, 1)", self.max_var)));
        }
        if self.n_samples < 1 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// The 19 checked `(steps, max_var)` combinations as configs sharing `base`'s
/// seed and clipping.
pub fn default_grid(base: &SamplerConfig) -> Vec<SamplerConfig> {
    SAMPLER_GRID
        .iter()
        .map(|&(steps, max_var)| SamplerConfig {
            steps,
            max_var,
            n_samples: 1,
            ..base.clone()
        })
        .collect()
}

/// Cumulative alphas of the current level and the one it steps to. The last
/// step goes to `alpha_prev = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepAlphas {
    pub alpha: f64,
    pub alpha_prev: f64,
}

impl StepAlphas {
    pub fn is_final(&self) -> bool {
        self.alpha_prev >= 1.0
    }

    /// `1 - alpha / alpha_prev`.
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha / self.alpha_prev
    }

    /// Small posterior variance `(1 - alpha_prev) / (1 - alpha) * beta`.
    pub fn posterior_var(&self) -> f64 {
        (1.0 - self.alpha_prev) / (1.0 - self.alpha) * self.beta()
    }
}

/// Step pairs in sampling order, noisiest first.
pub fn step_alphas(alphas: &[f64]) -> Vec<StepAlphas> {
    (0..alphas.len())
        .rev()
        .map(|i| StepAlphas {
            alpha: alphas[i],
            alpha_prev: if i == 0 { 1.0 } else { alphas[i - 1] },
        })
        .collect()
}

/// `(x_t - sqrt(1 - alpha) * eps) / sqrt(alpha)`.
pub fn predict_x0<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, alpha: f64, clip: bool) -> Tensor<T> {
    let inv = T::lit(1.0 / alpha.sqrt());
    let s = T::lit((1.0 - alpha).sqrt());
    let lo = -T::one();
    let hi = T::one();
    x_t.zip_map(eps_hat, |x, e| {
        let v = (x - s * e) * inv;
        if clip {
            v.max(lo).min(hi)
        } else {
            v
        }
    })
}

/// One ancestral update. Noise is drawn from `rng` only when the step is not
/// the final one.
pub fn ancestral_step<T: Scalar, R: Rng>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    a: StepAlphas,
    clip: bool,
    rng: &mut R,
) -> Tensor<T> {
    let x0 = predict_x0(x_t, eps_hat, a.alpha, clip);
    if a.is_final() {
        return x0;
    }
    let beta = a.beta();
    let c0 = T::lit(a.alpha_prev.sqrt() * beta / (1.0 - a.alpha));
    let ct = T::lit((1.0 - beta).sqrt() * (1.0 - a.alpha_prev) / (1.0 - a.alpha));
    let sd = T::lit(a.posterior_var().sqrt());
    let z = gaussian_tensor::<T, _>(rng, x_t.shape());
    let mean = x0.zip_map(x_t, |p, x| c0 * p + ct * x);
    mean.zip_map(&z, |m, n| m + sd * n)
}

/// Samples from a trained model. Counts guidance pyramid evaluations so the
/// once-per-image contract can be checked.
pub struct Sampler<'m> {
    model: &'m Model<f32>,
    pyramid_evals: AtomicUsize,
}

impl<'m> Sampler<'m> {
    pub fn new(model: &'m Model<f32>) -> Self {
        Self {
            model,
            pyramid_evals: AtomicUsize::new(0),
        }
    }

    pub fn pyramid_evals(&self) -> usize {
        self.pyramid_evals.load(Ordering::Relaxed)
    }

    fn check_input(y: &Image) -> Result<()> {
        if y.channels() != 3 {
            return Err(Error::Channels {
                expected: 3,
                got: y.channels(),
            });
        }
        if y.height() % DIM_MULTIPLE != 0 || y.width() % DIM_MULTIPLE != 0 {
            return Err(Error::Dimensions {
                height: y.height(),
                width: y.width(),
                reason: format!("sampling needs sides divisible by {DIM_MULTIPLE}"),
            });
        }
        Ok(())
    }

    /// The final model-range state for one seed.
    fn chain(&self, y: &Image, cfg: &SamplerConfig, seed: u64) -> Result<Tensor<f32>> {
        let disc = discretize(&self.model.schedule, cfg.steps, cfg.max_var)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let yt = image_to_model::<f32>(y);
        let features = if self.model.config.mode == crate::denoiser::InjectionMode::None {
            None
        } else {
            let phi = phi_pyramid(y, self.model.config.sigma, &mut rng)?.map(|p| phi_to_model::<f32>(&p));
            self.pyramid_evals.fetch_add(1, Ordering::Relaxed);
            Some(self.model.guidance_pyramid(&phi)?.features)
        };
        let mut x = gaussian_tensor::<f32, _>(&mut rng, yt.shape());
        for (i, a) in step_alphas(&disc.alphas).into_iter().enumerate() {
            let eps = self.model.predict_eps(&x, &yt, features.as_deref(), a.alpha)?;
            x = ancestral_step(&x, &eps, a, cfg.clip, &mut rng);
            if !x.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("sampler state at step {} of {}", i + 1, cfg.steps),
                });
            }
        }
        Ok(x)
    }

    fn to_image(x: &Tensor<f32>) -> Result<Image> {
        Ok(from_model_range(&ModelImage::from_tensor(x)?))
    }

    /// One sample from `cfg.seed`.
    pub fn sample(&self, y: &Image, cfg: &SamplerConfig) -> Result<Image> {
        cfg.validate()?;
        Self::check_input(y)?;
        Self::to_image(&self.chain(y, cfg, cfg.seed)?)
    }

    /// `n_samples` independent samples with sub-seeds `seed ^ i`.
    pub fn samples(&self, y: &Image, cfg: &SamplerConfig) -> Result<Vec<Image>> {
        Ok(self
            .chains(y, cfg)?
            .iter()
            .map(Self::to_image)
            .collect::<Result<_>>()?)
    }

    fn chains(&self, y: &Image, cfg: &SamplerConfig) -> Result<Vec<Tensor<f32>>> {
        cfg.validate()?;
        Self::check_input(y)?;
        (0..cfg.n_samples)
            .into_par_iter()
            .map(|i| self.chain(y, cfg, cfg.seed ^ i as u64))
            .collect()
    }

    /// Pixelwise mean of `n_samples` samples, averaged in model range.
    pub fn sample_average(&self, y: &Image, cfg: &SamplerConfig) -> Result<Image> {
        let xs = self.chains(y, cfg)?;
        let mut acc = Tensor::<f64>::zeros(xs[0].shape());
        for x in &xs {
            acc.add_assign(&x.cast());
        }
        acc.scale_assign(1.0 / xs.len() as f64);
        Self::to_image(&acc.cast())
    }

    /// Samples every pair under every config and scores it against the sharp
    /// image. Pair `i` uses seed `cfg.seed ^ (i << 32)`. With `out` set,
    /// samples go to `out/T{steps}_v{max_var}/{i:04}.png`.
    pub fn grid_sweep(&self, pairs: &[Pair], grid: &[SamplerConfig], out: Option<&Path>) -> Result<Vec<SweepRecord>> {
        let tasks: Vec<(&SamplerConfig, usize)> = grid
            .iter()
            .flat_map(|c| (0..pairs.len()).map(move |i| (c, i)))
            .collect();
        tasks
            .into_par_iter()
            .map(|(cfg, i)| {
                let start = Instant::now();
                let per = SamplerConfig {
                    seed: cfg.seed ^ ((i as u64) << 32),
                    ..cfg.clone()
                };
                let img = self.sample_average(&pairs[i].blurry, &per)?;
                let seconds = start.elapsed().as_secs_f64();
                if let Some(dir) = out {
                    let path = dir.join(config_dir_name(cfg)).join(format!("{i:04}.png"));
                    save_image(&img, &path)?;
                }
                Ok(SweepRecord {
                    steps: cfg.steps,
                    max_var: cfg.max_var,
                    image_id: format!("{i:04}"),
                    psnr: psnr(&img, &pairs[i].sharp)?,
                    ssim: ssim(&img, &pairs[i].sharp)?,
                    seconds,
                })
            })
            .collect()
    }
}

/// `T{steps}_v{max_var}`.
pub fn config_dir_name(cfg: &SamplerConfig) -> String {
    format!("T{}_v{}", cfg.steps, cfg.max_var)
}

pub fn sample(model: &Model<f32>, y: &Image, cfg: &SamplerConfig) -> Result<Image> {
    Sampler::new(model).sample(y, cfg)
}

pub fn sample_average(model: &Model<f32>, y: &Image, cfg: &SamplerConfig) -> Result<Image> {
    Sampler::new(model).sample_average(y, cfg)
}

pub fn grid_sweep(model: &Model<f32>, pairs: &[Pair], grid: &[SamplerConfig], out: Option<&Path>) -> Result<Vec<SweepRecord>> {
    Sampler::new(model).grid_sweep(pairs, grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blursynth::{make_pair, BlurConfig};
    use crate::denoiser::InjectionMode;
    use crate::model::ModelConfig;
    use crate::schedule::{diffuse, Schedule, ScheduleKind};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn tiny(mode: InjectionMode) -> Model<f32> {
        let cfg = ModelConfig {
            ch: 4,
            guidance_width: 4,
            guidance_blocks: 1,
            num_res_blocks: 1,
            mode,
            ..ModelConfig::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    fn pair() -> Pair {
        let cfg = BlurConfig {
            size: 16,
            length_max: 4.0,
            ..BlurConfig::train(2)
        };
        make_pair(&cfg, 0).unwrap().0
    }

    fn cfg(steps: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            max_var: 0.5,
            seed: 9,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn x0_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_tensor::<f64, _>(&mut rng, &[3, 4, 4]).map(|v| v.tanh());
        let eps = gaussian_tensor::<f64, _>(&mut rng, &[3, 4, 4]);
        for alpha in [0.999, 0.7, 0.2, 0.01] {
            let xt = diffuse(&x, &eps, alpha);
            let back = predict_x0(&xt, &eps, alpha, false);
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_tensor::<f64, _>(&mut rng, &[3, 4, 4]);
        let e = gaussian_tensor::<f64, _>(&mut rng, &[3, 4, 4]);
        let a = StepAlphas {
            alpha: 0.99,
            alpha_prev: 1.0,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let out1 = ancestral_step(&x, &e, a, true, &mut r1);
        let out2 = ancestral_step(&x, &e, a, true, &mut r2);
        assert_eq!(out1, out2);
        assert_eq!(out1, predict_x0(&x, &e, 0.99, true));
        assert_eq!(a.posterior_var(), 0.0);
    }

    // Unclipped posterior mean written in the noise form
    // (x_t - beta / sqrt(1 - alpha) * eps) / sqrt(1 - beta).
    fn oracle(x: f64, e: f64, alpha: f64, alpha_prev: f64, z: f64) -> f64 {
        let beta = 1.0 - alpha / alpha_prev;
        let mean = (x - beta / (1.0 - alpha).sqrt() * e) / (1.0 - beta).sqrt();
        let var = beta * (1.0 - alpha_prev) / (1.0 - alpha);
        mean + var.sqrt() * z
    }

    #[test]
    fn step_matches_noise_form_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let alpha_prev: f64 = rng.random_range(0.05..0.999);
            let alpha = alpha_prev * rng.random_range(0.3..0.999);
            let x = gaussian_tensor::<f64, _>(&mut rng, &[3, 4, 4]);
            let e = gaussian_tensor::<f64, _>(&mut rng, &[3, 4, 4]);
            let seed = rng.random::<u64>();
            let a = StepAlphas { alpha, alpha_prev };
            let got = ancestral_step(&x, &e, a, false, &mut ChaCha8Rng::seed_from_u64(seed));
            let z = gaussian_tensor::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed), &[3, 4, 4]);
            for i in 0..x.numel() {
                let want = oracle(x.data()[i], e.data()[i], alpha, alpha_prev, z.data()[i]);
                assert!((got.data()[i] - want).abs() < 1e-10, "{} vs {want}", got.data()[i]);
            }
        }
    }

    #[test]
    fn step_order_runs_noisiest_first() {
        let d = discretize(&Schedule::new(ScheduleKind::Cosine), 5, 0.2).unwrap();
        let s = step_alphas(&d.alphas);
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].alpha, 0.8);
        assert!(s.last().unwrap().is_final());
        for w in s.windows(2) {
            assert_eq!(w[0].alpha_prev, w[1].alpha);
            assert!(w[0].alpha < w[0].alpha_prev);
        }
    }

    #[test]
    fn sample_is_deterministic_and_counts_pyramid_once() {
        let m = tiny(InjectionMode::Addition);
        let p = pair();
        let s = Sampler::new(&m);
        let a = s.sample(&p.blurry, &cfg(4)).unwrap();
        assert_eq!(s.pyramid_evals(), 1);
        let b = s.sample(&p.blurry, &cfg(4)).unwrap();
        assert_eq!(s.pyramid_evals(), 2);
        assert_eq!(a, b);
        let c = s
            .sample(
                &p.blurry,
                &SamplerConfig {
                    seed: 10,
                    ..cfg(4)
                },
            )
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_step_chain_is_in_range() {
        for mode in InjectionMode::ALL {
            let m = tiny(mode);
            let out = sample(&m, &pair().blurry, &cfg(1)).unwrap();
            assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn average_of_one_is_a_sample() {
        let m = tiny(InjectionMode::Concat);
        let p = pair();
        assert_eq!(
            sample(&m, &p.blurry, &cfg(3)).unwrap(),
            sample_average(&m, &p.blurry, &cfg(3)).unwrap()
        );
    }

    #[test]
    fn average_uses_xor_sub_seeds() {
        let m = tiny(InjectionMode::AdaNorm);
        let p = pair();
        let c = SamplerConfig {
            n_samples: 3,
            ..cfg(2)
        };
        let s = Sampler::new(&m);
        let all = s.samples(&p.blurry, &c).unwrap();
        assert_eq!(s.pyramid_evals(), 3);
        for (i, img) in all.iter().enumerate() {
            let one = sample(
                &m,
                &p.blurry,
                &SamplerConfig {
                    seed: c.seed ^ i as u64,
                    n_samples: 1,
                    ..c.clone()
                },
            )
            .unwrap();
            assert_eq!(&one, img);
        }
        assert_eq!(s.sample_average(&p.blurry, &c).unwrap(), s.sample_average(&p.blurry, &c).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny(InjectionMode::Addition);
        let gray = Image::filled(16, 16, 1, 0.5).unwrap();
        assert!(sample(&m, &gray, &cfg(2)).is_err());
        let p = pair();
        assert!(sample(&m, &p.blurry, &SamplerConfig { steps: 0, ..cfg(2) }).is_err());
        assert!(sample(&m, &p.blurry, &SamplerConfig { max_var: 1.0, ..cfg(2) }).is_err());
        assert!(sample_average(&m, &p.blurry, &SamplerConfig { n_samples: 0, ..cfg(2) }).is_err());
    }

    #[test]
    fn sweep_counts_and_repeats() {
        let m = tiny(InjectionMode::Addition);
        let pairs = vec![pair(), pair()];
        let grid = vec![cfg(1), SamplerConfig { max_var: 0.2, ..cfg(2) }];
        let s = Sampler::new(&m);
        let a = s.grid_sweep(&pairs, &grid, None).unwrap();
        assert_eq!(a.len(), 4);
        let b = s.grid_sweep(&pairs, &grid, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.steps, x.max_var, &x.image_id, x.psnr, x.ssim), (y.steps, y.max_var, &y.image_id, y.psnr, y.ssim));
        }
        assert!(s.grid_sweep(&[], &grid, None).unwrap().is_empty());
        assert_eq!(default_grid(&SamplerConfig::default()).len(), 19);
    }

    #[test]
    fn sweep_writes_pngs() {
        let m = tiny(InjectionMode::None);
        let dir = tempfile::tempdir().unwrap();
        let recs = grid_sweep(&m, &[pair()], &[cfg(1)], Some(dir.path())).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(dir.path().join("T1_v0.5").join("0000.png").exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clipped_x0_in_range(seed in any::<u64>(), alpha in 0.001f64..0.999) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian_tensor::<f32, _>(&mut rng, &[3, 4, 4]).map(|v| v * 3.0);
            let e = gaussian_tensor::<f32, _>(&mut rng, &[3, 4, 4]);
            let p = predict_x0(&x, &e, alpha, true);
            prop_assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
