//! Image-conditioned UNet noise predictor.
//!
//! The network sees `[x_t, y]` stacked on the channel axis and is told the
//! noise level through a sinusoidal embedding of `sqrt(alpha)`. Encoder
//! levels at 1/2, 1/4 and 1/8 resolution use guided residual blocks: the
//! guidance features `h_k` are projected to the level width by one conv per
//! scale and injected according to [`InjectionMode`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::NUM_SCALES;
use crate::nn::{Conv, GroupNorm, Linear, ParamSet, Scalar, Tape, Tensor, Var};

pub const NUM_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    Addition,
    Concat,
    AdaNorm,
    /// Plain image-conditioned model; the pyramid is ignored.
    None,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 4] = [Self::Addition, Self::Concat, Self::AdaNorm, Self::None];
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" | "add" => Ok(Self::Addition),
            "concat" | "concatenation" => Ok(Self::Concat),
            "adanorm" | "adaptive-group-norm" => Ok(Self::AdaNorm),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown injection mode {s:?}"))),
        }
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Addition => "addition",
            Self::Concat => "concat",
            Self::AdaNorm => "adanorm",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub ch: usize,
    pub mults: [usize; NUM_LEVELS],
    pub num_res_blocks: usize,
    pub mode: InjectionMode,
    /// Width of the guidance features `h_k`.
    pub guidance_width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            ch: 32,
            mults: [1, 2, 2, 4],
            num_res_blocks: 2,
            mode: InjectionMode::Addition,
            guidance_width: 32,
        }
    }
}

/// Sinusoidal embedding of `1000 * sqrt(alpha)` with `dim` features
/// (`dim/2` sines then `dim/2` cosines).
pub fn noise_level_embedding<T: Scalar>(sqrt_alpha: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let pos = 1000.0 * sqrt_alpha;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = T::lit((pos * freq).sin());
        out[half + i] = T::lit((pos * freq).cos());
    }
    Tensor::from_vec(&[dim], out)
}

/// Projected guidance entering a residual block.
#[derive(Debug, Clone, Copy)]
pub enum Guide {
    Unguided,
    Addition(Var),
    Concat(Var),
    /// `[2C, h, w]`: scale in the first `C` channels, shift in the rest.
    AdaNorm(Var),
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub cin: usize,
    pub cout: usize,
    norm1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    /// 1x1 fusion `2C -> C` for concatenation guidance.
    pub fuse: Option<Conv>,
}

impl ResBlock {
    pub fn build<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        concat_guided: bool,
    ) -> Self {
        Self {
            cin,
            cout,
            norm1: GroupNorm::build(params, &format!("{name}.norm1"), cin),
            conv1: Conv::build(params, rng, &format!("{name}.conv1"), cin, cout, 3),
            temb: Linear::build(params, rng, &format!("{name}.temb"), emb_dim, cout),
            norm2: GroupNorm::build(params, &format!("{name}.norm2"), cout),
            conv2: Conv::build(params, rng, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv::build(params, rng, &format!("{name}.skip"), cin, cout, 1)),
            fuse: concat_guided.then(|| Conv::build(params, rng, &format!("{name}.fuse"), 2 * cout, cout, 1)),
        }
    }

    /// `emb` is the activated embedding vector shared by all blocks.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, emb: Var, guide: Guide) -> Result<Var> {
        let (_, hx, wx) = tape.value(x).chw();
        let h = self.norm1.apply(tape, x);
        let h = tape.silu(h);
        let h = self.conv1.apply(tape, h);
        let t = self.temb.apply(tape, emb);
        let mut h = tape.add_channel(h, t);
        if let Guide::Addition(g) | Guide::Concat(g) | Guide::AdaNorm(g) = guide {
            let (gc, gh, gw) = tape.value(g).chw();
            let want = if matches!(guide, Guide::AdaNorm(_)) { 2 * self.cout } else { self.cout };
            if (gh, gw) != (hx, wx) || gc != want {
                return Err(Error::Shape(format!(
                    "guidance {gc}x{gh}x{gw} does not fit block features {}x{hx}x{wx}",
                    self.cout
                )));
            }
        }
        match guide {
            Guide::Addition(g) => h = tape.add(h, g),
            Guide::Concat(g) => {
                let fuse = self
                    .fuse
                    .as_ref()
                    .ok_or_else(|| Error::Config("block has no fusion conv for concat guidance".into()))?;
                let cat = tape.concat(h, g);
                h = fuse.apply(tape, cat);
            }
            _ => {}
        }
        let mut h = self.norm2.apply(tape, h);
        if let Guide::AdaNorm(g) = guide {
            let scale = tape.slice_channels(g, 0, self.cout);
            let shift = tape.slice_channels(g, self.cout, self.cout);
            let hs = tape.mul(h, scale);
            h = tape.add(h, hs);
            h = tape.add(h, shift);
        }
        let h = tape.silu(h);
        let h = self.conv2.apply(tape, h);
        let s = match &self.skip {
            Some(c) => c.apply(tape, x),
            None => x,
        };
        Ok(tape.add(s, h))
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv,
    /// `encoder[l]` holds the residual blocks of level `l`.
    encoder: Vec<Vec<ResBlock>>,
    /// Guidance projection for encoder level `k` (`k = 1..=3`), index `k-1`.
    proj: Vec<Conv>,
    middle: Vec<ResBlock>,
    decoder: Vec<Vec<ResBlock>>,
    /// Post-upsample conv for decoder level `l >= 1`, index `l-1`.
    up: Vec<Conv>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Denoiser {
    pub fn build<T: Scalar, R: Rng>(params: &mut ParamSet<T>, config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        if config.ch < 2 || config.ch % 2 != 0 || config.num_res_blocks == 0 || config.mults.contains(&0) {
            return Err(Error::Config(format!("invalid denoiser config {config:?}")));
        }
        let ch = config.ch;
        let emb_dim = 4 * ch;
        let width = |l: usize| ch * config.mults[l];
        let concat = config.mode == InjectionMode::Concat;

        let emb1 = Linear::build(params, rng, "denoiser.emb1", ch, emb_dim);
        let emb2 = Linear::build(params, rng, "denoiser.emb2", emb_dim, emb_dim);
        let conv_in = Conv::build(params, rng, "denoiser.conv_in", 6, ch, 3);

        let mut skips = vec![ch];
        let mut cur = ch;
        let mut encoder = Vec::with_capacity(NUM_LEVELS);
        for l in 0..NUM_LEVELS {
            let guided = l >= 1 && concat;
            let mut level = Vec::new();
            for j in 0..config.num_res_blocks {
                level.push(ResBlock::build(params, rng, &format!("denoiser.enc{l}.{j}"), cur, width(l), emb_dim, guided));
                cur = width(l);
                skips.push(cur);
            }
            encoder.push(level);
            if l + 1 < NUM_LEVELS {
                skips.push(cur);
            }
        }
        let proj = match config.mode {
            InjectionMode::None => Vec::new(),
            mode => (1..=NUM_SCALES)
                .map(|k| {
                    let out = if mode == InjectionMode::AdaNorm { 2 * width(k) } else { width(k) };
                    Conv::build(params, rng, &format!("denoiser.proj{k}"), config.guidance_width, out, 3)
                })
                .collect(),
        };
        let middle = (0..2)
            .map(|j| ResBlock::build(params, rng, &format!("denoiser.mid.{j}"), cur, cur, emb_dim, false))
            .collect();
        let mut decoder = vec![Vec::new(); NUM_LEVELS];
        let mut up = vec![None; NUM_LEVELS - 1];
        for l in (0..NUM_LEVELS).rev() {
            for j in 0..=config.num_res_blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                decoder[l].push(ResBlock::build(
                    params,
                    rng,
                    &format!("denoiser.dec{l}.{j}"),
                    cur + skip,
                    width(l),
                    emb_dim,
                    false,
                ));
                cur = width(l);
            }
            if l > 0 {
                up[l - 1] = Some(Conv::build(params, rng, &format!("denoiser.up{l}"), cur, cur, 3));
            }
        }
        debug_assert!(skips.is_empty());
        let norm_out = GroupNorm::build(params, "denoiser.norm_out", cur);
        let conv_out = Conv::build(params, rng, "denoiser.conv_out", cur, 3, 3);
        Ok(Self {
            config,
            emb1,
            emb2,
            conv_in,
            encoder,
            proj,
            middle,
            decoder,
            up: up.into_iter().map(|c| c.expect("one up conv per level")).collect(),
            norm_out,
            conv_out,
        })
    }

    /// Projection conv for guidance scale `k` (1-based), if the mode uses one.
    pub fn projection(&self, k: usize) -> Option<&Conv> {
        self.proj.get(k - 1)
    }

    /// First guided residual block of encoder level `k`.
    pub fn encoder_block(&self, level: usize, j: usize) -> &ResBlock {
        &self.encoder[level][j]
    }

    /// Activated noise-level embedding.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, sqrt_alpha: f64) -> Var {
        let e = tape.constant(noise_level_embedding(sqrt_alpha, self.config.ch));
        let e = self.emb1.apply(tape, e);
        let e = tape.silu(e);
        let e = self.emb2.apply(tape, e);
        tape.silu(e)
    }

    /// Predicts the noise in `x_t` given the blurry condition `y`, the guidance
    /// features `h` (ignored when `mode` is `None`) and `sqrt(alpha_t)`.
    ///
    /// `mode` must be the mode the network was built with, or `None`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x_t: Var,
        y: Var,
        h: Option<&[Var; NUM_SCALES]>,
        sqrt_alpha: f64,
        mode: InjectionMode,
    ) -> Result<Var> {
        if mode != InjectionMode::None && mode != self.config.mode {
            return Err(Error::Config(format!(
                "network built for {} guidance cannot run in {mode} mode",
                self.config.mode
            )));
        }
        let (cx, hh, ww) = tape.value(x_t).chw();
        if cx != 3 || tape.value(y).chw() != (3, hh, ww) {
            return Err(Error::Shape(format!(
                "x_t {:?} and y {:?} must both be 3-channel and equal size",
                tape.value(x_t).shape(),
                tape.value(y).shape()
            )));
        }
        if hh % 8 != 0 || ww % 8 != 0 {
            return Err(Error::Dimensions {
                height: hh,
                width: ww,
                reason: "denoiser input must be divisible by 8".into(),
            });
        }
        let guides: [Guide; NUM_SCALES] = if mode == InjectionMode::None {
            [Guide::Unguided; NUM_SCALES]
        } else {
            let h = h.ok_or_else(|| Error::Config(format!("{mode} guidance needs a pyramid")))?;
            let mut out = [Guide::Unguided; NUM_SCALES];
            for k in 0..NUM_SCALES {
                let (gc, gh, gw) = tape.value(h[k]).chw();
                if gc != self.config.guidance_width || (gh << (k + 1), gw << (k + 1)) != (hh, ww) {
                    return Err(Error::Shape(format!(
                        "guidance scale {} is {gc}x{gh}x{gw}, expected {}x{}x{}",
                        k + 1,
                        self.config.guidance_width,
                        hh >> (k + 1),
                        ww >> (k + 1)
                    )));
                }
                let p = self.proj[k].apply(tape, h[k]);
                out[k] = match mode {
                    InjectionMode::Addition => Guide::Addition(p),
                    InjectionMode::Concat => Guide::Concat(p),
                    InjectionMode::AdaNorm => Guide::AdaNorm(p),
                    InjectionMode::None => Guide::Unguided,
                };
            }
            out
        };

        let emb = self.embed(tape, sqrt_alpha);
        let inp = tape.concat(x_t, y);
        let mut x = self.conv_in.apply(tape, inp);
        let mut skips = vec![x];
        for (l, level) in self.encoder.iter().enumerate() {
            let guide = if l == 0 { Guide::Unguided } else { guides[l - 1] };
            for block in level {
                x = block.forward(tape, x, emb, guide)?;
                skips.push(x);
            }
            if l + 1 < NUM_LEVELS {
                x = tape.avg_pool2(x);
                skips.push(x);
            }
        }
        for block in &self.middle {
            x = block.forward(tape, x, emb, Guide::Unguided)?;
        }
        for l in (0..NUM_LEVELS).rev() {
            for block in &self.decoder[l] {
                let s = skips.pop().expect("skip bookkeeping");
                let cat = tape.concat(x, s);
                x = block.forward(tape, cat, emb, Guide::Unguided)?;
            }
            if l > 0 {
                x = tape.upsample2(x);
                x = self.up[l - 1].apply(tape, x);
            }
        }
        let x = self.norm_out.apply(tape, x);
        let x = tape.silu(x);
        Ok(self.conv_out.apply(tape, x))
    }
}

/// Mean absolute error between predicted and true noise.
pub fn denoising_loss<T: Scalar>(tape: &mut Tape<T>, eps_hat: Var, eps: &Tensor<T>) -> Result<Var> {
    if tape.value(eps_hat).shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "eps_hat {:?} vs eps {:?}",
            tape.value(eps_hat).shape(),
            eps.shape()
        )));
    }
    Ok(tape.l1(eps_hat, eps))
}

/// `L_guidance + lambda * L_DPM`.
pub fn total_loss(l_guidance: f64, l_dpm: f64, lambda: f64) -> f64 {
    l_guidance + lambda * l_dpm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect())
    }

    fn micro(mode: InjectionMode, seed: u64) -> (ParamSet<f64>, Denoiser) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let cfg = DenoiserConfig {
            ch: 4,
            mode,
            guidance_width: 4,
            ..DenoiserConfig::default()
        };
        let net = Denoiser::build(&mut p, cfg, &mut rng).unwrap();
        (p, net)
    }

    fn pyramid(rng: &mut ChaCha8Rng, side: usize, width: usize) -> [Tensor<f64>; 3] {
        std::array::from_fn(|k| rand_tensor(rng, &[width, side >> (k + 1), side >> (k + 1)], 1.0))
    }

    fn run(p: &ParamSet<f64>, net: &Denoiser, x: &Tensor<f64>, y: &Tensor<f64>, h: &[Tensor<f64>; 3], mode: InjectionMode) -> Tensor<f64> {
        let mut tape = Tape::inference(p);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let hv = h.clone().map(|t| tape.constant(t));
        let out = net.forward(&mut tape, xv, yv, Some(&hv), 0.7, mode).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn mode_strings() {
        for m in InjectionMode::ALL {
            assert_eq!(m.to_string().parse::<InjectionMode>().unwrap(), m);
        }
        assert!("sum".parse::<InjectionMode>().is_err());
    }

    #[test]
    fn output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, net) = micro(InjectionMode::Addition, 2);
        let x = rand_tensor(&mut rng, &[3, 64, 64], 1.0);
        let y = rand_tensor(&mut rng, &[3, 64, 64], 1.0);
        let h = pyramid(&mut rng, 64, 4);
        assert_eq!(run(&p, &net, &x, &y, &h, InjectionMode::Addition).shape(), &[3, 64, 64]);
    }

    #[test]
    fn projection_widths_match_encoder() {
        for mode in [InjectionMode::Addition, InjectionMode::Concat, InjectionMode::AdaNorm] {
            let (p, net) = micro(mode, 3);
            for k in 1..=3 {
                let w = p.get(net.projection(k).unwrap().w).shape()[0];
                let level = 4 * net.config.mults[k];
                assert_eq!(w, if mode == InjectionMode::AdaNorm { 2 * level } else { level });
                assert_eq!(net.encoder_block(k, 0).cout, level);
            }
        }
        assert!(micro(InjectionMode::None, 3).1.projection(1).is_none());
    }

    #[test]
    fn zero_projection_matches_unguided() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut p, net) = micro(InjectionMode::Addition, 5);
        for k in 1..=3 {
            let c = *net.projection(k).unwrap();
            p.get_mut(c.w).data_mut().fill(0.0);
            p.get_mut(c.b).data_mut().fill(0.0);
        }
        let x = rand_tensor(&mut rng, &[3, 16, 16], 1.0);
        let y = rand_tensor(&mut rng, &[3, 16, 16], 1.0);
        let h = pyramid(&mut rng, 16, 4);
        assert_eq!(
            run(&p, &net, &x, &y, &h, InjectionMode::Addition),
            run(&p, &net, &x, &y, &h, InjectionMode::None)
        );
    }

    #[test]
    fn none_mode_ignores_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in InjectionMode::ALL {
            let (p, net) = micro(mode, 7);
            let x = rand_tensor(&mut rng, &[3, 16, 16], 1.0);
            let y = rand_tensor(&mut rng, &[3, 16, 16], 1.0);
            let a = run(&p, &net, &x, &y, &pyramid(&mut rng, 16, 4), InjectionMode::None);
            let b = run(&p, &net, &x, &y, &pyramid(&mut rng, 16, 4).map(|t| t.map(|v| v * 1e6)), InjectionMode::None);
            assert_eq!(a, b);
            let mut tape = Tape::inference(&p);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let c = net.forward(&mut tape, xv, yv, None, 0.7, InjectionMode::None).unwrap();
            assert_eq!(tape.value(c), &a);
        }
    }

    #[test]
    fn wrong_mode_and_dims_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, net) = micro(InjectionMode::Addition, 9);
        let mut tape = Tape::inference(&p);
        let x = tape.constant(rand_tensor(&mut rng, &[3, 16, 16], 1.0));
        let y = tape.constant(rand_tensor(&mut rng, &[3, 16, 16], 1.0));
        let h = pyramid(&mut rng, 16, 4).map(|t| tape.constant(t));
        assert!(net.forward(&mut tape, x, y, Some(&h), 0.5, InjectionMode::Concat).is_err());
        assert!(net.forward(&mut tape, x, y, None, 0.5, InjectionMode::Addition).is_err());
        let bad = pyramid(&mut rng, 32, 4).map(|t| tape.constant(t));
        assert!(net.forward(&mut tape, x, y, Some(&bad), 0.5, InjectionMode::Addition).is_err());
        let y2 = tape.constant(rand_tensor(&mut rng, &[3, 8, 8], 1.0));
        assert!(net.forward(&mut tape, x, y2, None, 0.5, InjectionMode::None).is_err());
    }

    fn block_case(concat: bool) -> (ParamSet<f64>, ResBlock, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        let b = ResBlock::build(&mut p, &mut rng, "b", 4, 8, 16, concat);
        let x = rand_tensor(&mut rng, &[4, 8, 8], 1.0);
        let emb = rand_tensor(&mut rng, &[16], 1.0);
        (p, b, x, emb)
    }

    fn block_out(p: &ParamSet<f64>, b: &ResBlock, x: &Tensor<f64>, emb: &Tensor<f64>, g: Option<(InjectionMode, Tensor<f64>)>) -> Tensor<f64> {
        let mut tape = Tape::inference(p);
        let xv = tape.constant(x.clone());
        let ev = tape.constant(emb.clone());
        let guide = match g {
            None => Guide::Unguided,
            Some((m, t)) => {
                let v = tape.constant(t);
                match m {
                    InjectionMode::Addition => Guide::Addition(v),
                    InjectionMode::Concat => Guide::Concat(v),
                    _ => Guide::AdaNorm(v),
                }
            }
        };
        let out = b.forward(&mut tape, xv, ev, guide).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn zero_guidance_block_equivalence() {
        let (p, b, x, emb) = block_case(false);
        let plain = block_out(&p, &b, &x, &emb, None);
        assert_eq!(block_out(&p, &b, &x, &emb, Some((InjectionMode::Addition, Tensor::zeros(&[8, 8, 8])))), plain);
        assert_eq!(block_out(&p, &b, &x, &emb, Some((InjectionMode::AdaNorm, Tensor::zeros(&[16, 8, 8])))), plain);

        let (mut p, b, x, emb) = block_case(true);
        let fuse = b.fuse.unwrap();
        let w = p.get_mut(fuse.w).data_mut();
        w.fill(0.0);
        for o in 0..8 {
            w[o * 16 + o] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = rand_tensor(&mut rng, &[8, 8, 8], 1.0);
        assert_eq!(
            block_out(&p, &b, &x, &emb, Some((InjectionMode::Concat, g))),
            block_out(&p, &b, &x, &emb, None)
        );
    }

    #[test]
    fn addition_is_two_path_difference() {
        // Recompute the guided block by hand: the injected term is added to
        // the post-conv1 activations, so replaying everything up to that point
        // and adding `g` must reproduce the block output.
        let (p, b, x, emb) = block_case(false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = rand_tensor(&mut rng, &[8, 8, 8], 0.5);
        let got = block_out(&p, &b, &x, &emb, Some((InjectionMode::Addition, g.clone())));

        let mut tape = Tape::inference(&p);
        let xv = tape.constant(x.clone());
        let ev = tape.constant(emb.clone());
        let h = b.norm1.apply(&mut tape, xv);
        let h = tape.silu(h);
        let h = b.conv1.apply(&mut tape, h);
        let t = b.temb.apply(&mut tape, ev);
        let pre = tape.add_channel(h, t);
        let injected = tape.value(pre).zip_map(&g, |a, b| a + b);
        let iv = tape.constant(injected);
        let h = b.norm2.apply(&mut tape, iv);
        let h = tape.silu(h);
        let h = b.conv2.apply(&mut tape, h);
        let s = b.skip.unwrap().apply(&mut tape, xv);
        let want = tape.value(s).zip_map(tape.value(h), |a, b| a + b);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(got, block_out(&p, &b, &x, &emb, None));
    }

    #[test]
    fn projection_bilinearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (mut p, net) = micro(InjectionMode::Addition, 15);
        let c = *net.projection(1).unwrap();
        p.get_mut(c.b).data_mut().fill(0.0);
        let h = rand_tensor(&mut rng, &[4, 8, 8], 1.0);
        let project = |p: &ParamSet<f64>, h: Tensor<f64>| {
            let mut tape = Tape::inference(p);
            let v = tape.constant(h);
            let o = c.apply(&mut tape, v);
            tape.value(o).clone()
        };
        let base = project(&p, h.map(|v| 2.0 * v));
        let mut half = p.clone();
        half.get_mut(c.w).scale_assign(0.5);
        let scaled = project(&half, h.clone());
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a - 4.0 * b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn finite_outputs_under_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for draw in 0..1000u64 {
            let mode = InjectionMode::ALL[(draw % 4) as usize];
            let (p, net) = micro(mode, 100 + draw);
            let x = rand_tensor(&mut rng, &[3, 8, 8], 3.0);
            let y = rand_tensor(&mut rng, &[3, 8, 8], 3.0);
            let h = pyramid(&mut rng, 8, 4).map(|t| t.map(|v| 3.0 * v));
            assert!(run(&p, &net, &x, &y, &h, mode).all_finite(), "draw {draw}");
        }
    }

    #[test]
    fn loss_helpers() {
        let p = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eps = rand_tensor(&mut rng, &[1, 4, 4], 1.0);
        let mut tape = Tape::new(&p);
        let same = tape.constant(eps.clone());
        let l = denoising_loss(&mut tape, same, &eps).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let off = tape.constant(eps.map(|v| v + 0.3));
        let l = denoising_loss(&mut tape, off, &eps).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-12);
        let other = rand_tensor(&mut rng, &[1, 4, 4], 1.0);
        let ov = tape.constant(other.clone());
        let l = denoising_loss(&mut tape, ov, &eps).unwrap();
        let want: f64 = other.data().iter().zip(eps.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        let wrong = tape.constant(Tensor::zeros(&[1, 2, 8]));
        assert!(denoising_loss(&mut tape, wrong, &eps).is_err());

        assert_eq!(total_loss(0.3, 123.0, 0.0), 0.3);
        assert!((total_loss(0.2, 0.5, 1.0) - 0.7).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 1.0, 0.5), 0.5);
    }
}
