//! Procedural sharp/blurry pair generation.
//!
//! Sharp images are random compositions of anti-aliased shapes over a smooth
//! gradient; blurry counterparts come from linear motion kernels applied with
//! reflect padding plus optional Gaussian pixel noise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, save_image, Image, DIM_MULTIPLE};

/// Largest kernel side produced by [`gen_motion_kernel`].
pub const MAX_KERNEL_SIZE: usize = 31;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# deblur dataset manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    pub length: f64,
    pub angle: f64,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, dy: isize, dx: isize) -> f64 {
        let r = (self.size / 2) as isize;
        self.weights[((dy + r) * self.size as isize + dx + r) as usize]
    }

    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
            length: 1.0,
            angle: 0.0,
        }
    }
}

/// Unit-mass line segment of `length` pixels at `angle` radians, sampled at
/// `round(length)` evenly spaced points and splatted bilinearly.
pub fn gen_motion_kernel(length: f64, angle: f64) -> Result<BlurKernel> {
    if !(length >= 1.0) || !angle.is_finite() {
        return Err(Error::Config(format!("motion length {length} must be >= 1")));
    }
    let n = length.round().max(1.0) as usize;
    let spacing = if n > 1 { length / n as f64 } else { 0.0 };
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    let points: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let s = (i as f64 - (n as f64 - 1.0) / 2.0) * spacing;
            // Snap near-integers so axis-aligned kernels land exactly on taps.
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            (snap(s * dir_x), snap(s * dir_y))
        })
        .collect();
    let radius = points
        .iter()
        .map(|&(x, y)| x.abs().max(y.abs()).ceil() as usize)
        .max()
        .unwrap_or(0);
    let size = 2 * radius + 1;
    if size > MAX_KERNEL_SIZE {
        return Err(Error::Config(format!(
            "motion length {length} needs a {size}px kernel, larger than the {MAX_KERNEL_SIZE}px support"
        )));
    }
    let mut weights = vec![0.0; size * size];
    let mass = 1.0 / n as f64;
    let r = radius as f64;
    for &(x, y) in &points {
        let (gx, gy) = (x + r, y + r);
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - x0, gy - y0);
        for (oy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                let w = mass * wy * wx;
                if w == 0.0 {
                    continue;
                }
                let (ix, iy) = (x0 as usize + ox, y0 as usize + oy);
                weights[iy * size + ix] += w;
            }
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(BlurKernel {
        size,
        weights,
        length,
        angle,
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Per-channel 2-D convolution with reflect padding, optional Gaussian noise,
/// clamped to `[0, 1]`.
pub fn apply_blur<R: Rng>(img: &Image, kern: &BlurKernel, noise_std: f64, rng: &mut R) -> Result<Image> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = (kern.size / 2) as isize;
    if kern.size > h || kern.size > w {
        return Err(Error::Shape(format!(
            "{}px kernel does not fit a {h}x{w} image",
            kern.size
        )));
    }
    let taps: Vec<(isize, isize, f64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (dy, dx, kern.weight(dy, dx)))
        .filter(|t| t.2 != 0.0)
        .collect();
    let noise = if noise_std > 0.0 {
        Some(Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h as isize {
            for x in 0..w as isize {
                // The kernel is point-symmetric, so correlation equals convolution.
                let mut acc = 0.0f64;
                for &(dy, dx, k) in &taps {
                    acc += k * plane[reflect(y - dy, h) * w + reflect(x - dx, w)] as f64;
                }
                if let Some(n) = &noise {
                    acc += n.sample(rng);
                }
                out.push(acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(h, w, c, out)
}

fn smoothstep_coverage(signed_dist: f64) -> f64 {
    // Signed distance in pixels, negative inside; one-pixel linear ramp.
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

enum Shape {
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        rot: f64,
    },
    Disk {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    Stroke {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        half_width: f64,
    },
}

impl Shape {
    fn signed_distance(&self, px: f64, py: f64) -> f64 {
        match *self {
            Shape::Rect { cx, cy, hw, hh, rot } => {
                let (s, c) = rot.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                let (qx, qy) = (u.abs() - hw, v.abs() - hh);
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0)
            }
            Shape::Disk { cx, cy, radius } => ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - radius,
            Shape::Stroke {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (x0 + t * vx - px, y0 + t * vy - py);
                (qx * qx + qy * qy).sqrt() - half_width
            }
        }
    }
}

/// Deterministic synthetic sharp RGB image of side `size`.
pub fn gen_sharp_image(seed: u64, size: usize) -> Result<Image> {
    if size < DIM_MULTIPLE || size % DIM_MULTIPLE != 0 {
        return Err(Error::Dimensions {
            height: size,
            width: size,
            reason: format!("size must be a positive multiple of {DIM_MULTIPLE}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];

    let base = color(&mut rng);
    let gx = color(&mut rng).map(|v| 0.6 * (v - 0.5));
    let gy = color(&mut rng).map(|v| 0.6 * (v - 0.5));
    let n = size * size;
    let mut canvas = vec![0.0f64; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            for c in 0..3 {
                canvas[c * n + y * size + x] = base[c] + gx[c] * u + gy[c] * v;
            }
        }
    }

    let count = rng.random_range(6..=10);
    for i in 0..count {
        let shape = match i % 3 {
            0 => Shape::Rect {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                hw: rng.random_range(0.06..0.25) * s,
                hh: rng.random_range(0.06..0.25) * s,
                rot: rng.random_range(0.0..std::f64::consts::PI),
            },
            1 => Shape::Disk {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                radius: rng.random_range(0.05..0.2) * s,
            },
            _ => Shape::Stroke {
                x0: rng.random_range(0.0..s),
                y0: rng.random_range(0.0..s),
                x1: rng.random_range(0.0..s),
                y1: rng.random_range(0.0..s),
                half_width: rng.random_range(0.6..2.5),
            },
        };
        let fill = color(&mut rng);
        for y in 0..size {
            for x in 0..size {
                let cov = smoothstep_coverage(shape.signed_distance(x as f64 + 0.5, y as f64 + 0.5));
                if cov == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let p = &mut canvas[c * n + y * size + x];
                    *p = (1.0 - cov) * *p + cov * fill[c];
                }
            }
        }
    }
    Image::new(size, size, 3, canvas.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

/// Supervised example: sharp target and its blurry observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub sharp: Image,
    pub blurry: Image,
}

/// Per-pair draw recorded in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub seed: u64,
    pub length: f64,
    pub angle: f64,
    pub noise_std: f64,
}

/// Generation config. `train` and `shifted` ship as named presets.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurConfig {
    pub name: String,
    pub seed: u64,
    pub size: usize,
    pub length_min: f64,
    pub length_max: f64,
    pub noise_std: f64,
}

impl BlurConfig {
    pub fn train(seed: u64) -> Self {
        Self {
            name: "train".into(),
            seed,
            size: 64,
            length_min: 3.0,
            length_max: 9.0,
            noise_std: 0.0,
        }
    }

    /// Out-of-domain analogue: longer kernels plus pixel noise.
    pub fn shifted(seed: u64) -> Self {
        Self {
            name: "shifted".into(),
            seed,
            size: 64,
            length_min: 9.0,
            length_max: 15.0,
            noise_std: 0.02,
        }
    }

    pub fn named(name: &str, seed: u64) -> Result<Self> {
        match name {
            "train" => Ok(Self::train(seed)),
            "shifted" => Ok(Self::shifted(seed)),
            other => Err(Error::Config(format!("unknown dataset config `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < DIM_MULTIPLE || self.size % DIM_MULTIPLE != 0 {
            return Err(Error::Config(format!("size {} must be a multiple of {DIM_MULTIPLE}", self.size)));
        }
        if !(self.length_min >= 1.0 && self.length_min <= self.length_max) {
            return Err(Error::Config(format!(
                "length range [{}, {}] invalid (need 1 <= min <= max)",
                self.length_min, self.length_max
            )));
        }
        if self.length_max > self.size as f64 / 4.0 {
            return Err(Error::Config(format!(
                "length_max {} exceeds size/4 = {}",
                self.length_max,
                self.size as f64 / 4.0
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: BlurConfig,
    pub pairs: Vec<Pair>,
    pub manifest: Vec<PairRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Snap to the 8-bit grid so the dataset survives a PNG round trip exactly.
fn quantize(img: &Image) -> Image {
    let data = img.data().iter().map(|&v| (v * 255.0).round() / 255.0).collect();
    Image::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}

pub fn make_pair(config: &BlurConfig, index: usize) -> Result<(Pair, PairRecord)> {
    let seed = config.seed ^ index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = if config.length_max > config.length_min {
        rng.random_range(config.length_min..=config.length_max)
    } else {
        config.length_min
    };
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let sharp = quantize(&gen_sharp_image(seed, config.size)?);
    let kernel = gen_motion_kernel(length, angle)?;
    let blurry = quantize(&apply_blur(&sharp, &kernel, config.noise_std, &mut rng)?);
    Ok((
        Pair { sharp, blurry },
        PairRecord {
            seed,
            length,
            angle,
            noise_std: config.noise_std,
        },
    ))
}

/// `n` pairs; pair `i` is generated from sub-seed `seed ^ i`.
pub fn make_dataset(config: &BlurConfig, n: usize) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    use rayon::prelude::*;
    let results: Vec<(Pair, PairRecord)> = (0..n)
        .into_par_iter()
        .map(|i| make_pair(config, i))
        .collect::<Result<_>>()?;
    let (pairs, manifest) = results.into_iter().unzip();
    Ok(Dataset {
        config: config.clone(),
        pairs,
        manifest,
    })
}

pub fn pair_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    let pairs = dir.join("pairs");
    (
        pairs.join(format!("{index:04}_sharp.png")),
        pairs.join(format!("{index:04}_blur.png")),
    )
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("pairs")).map_err(|e| Error::io(dir, e))?;
    for (i, pair) in ds.pairs.iter().enumerate() {
        let (sp, bp) = pair_paths(dir, i);
        save_image(&pair.sharp, &sp)?;
        save_image(&pair.blurry, &bp)?;
    }
    let c = &ds.config;
    let mut text = String::new();
    writeln!(text, "{MANIFEST_HEADER}").unwrap();
    writeln!(text, "config={}", c.name).unwrap();
    writeln!(text, "seed={}", c.seed).unwrap();
    writeln!(text, "size={}", c.size).unwrap();
    writeln!(text, "length_min={}", c.length_min).unwrap();
    writeln!(text, "length_max={}", c.length_max).unwrap();
    writeln!(text, "noise_std={}", c.noise_std).unwrap();
    writeln!(text, "count={}", ds.len()).unwrap();
    for (i, r) in ds.manifest.iter().enumerate() {
        writeln!(
            text,
            "pair index={i} seed={} length={} angle={} noise_std={}",
            r.seed, r.length, r.angle, r.noise_std
        )
        .unwrap();
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("manifest: bad value `{v}` for `{key}`")))
}

/// Reads `manifest.txt` back into a config and per-pair records.
pub fn read_manifest(dir: &Path) -> Result<(BlurConfig, Vec<PairRecord>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Config(format!("{}: missing manifest header", path.display())));
    }
    let mut cfg = BlurConfig::train(0);
    let mut count = None;
    let mut records = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("pair ") {
            let mut rec = PairRecord {
                seed: 0,
                length: 0.0,
                angle: 0.0,
                noise_std: 0.0,
            };
            for field in rest.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("manifest: malformed field `{field}`")))?;
                match k {
                    "index" => {
                        let idx: usize = parse(k, v)?;
                        if idx != records.len() {
                            return Err(Error::Config(format!("manifest: pair index {idx} out of order")));
                        }
                    }
                    "seed" => rec.seed = parse(k, v)?,
                    "length" => rec.length = parse(k, v)?,
                    "angle" => rec.angle = parse(k, v)?,
                    "noise_std" => rec.noise_std = parse(k, v)?,
                    _ => return Err(Error::Config(format!("manifest: unknown pair field `{k}`"))),
                }
            }
            records.push(rec);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("manifest: malformed line `{line}`")))?;
        match k {
            "config" => cfg.name = v.to_string(),
            "seed" => cfg.seed = parse(k, v)?,
            "size" => cfg.size = parse(k, v)?,
            "length_min" => cfg.length_min = parse(k, v)?,
            "length_max" => cfg.length_max = parse(k, v)?,
            "noise_std" => cfg.noise_std = parse(k, v)?,
            "count" => count = Some(parse::<usize>(k, v)?),
            _ => return Err(Error::Config(format!("manifest: unknown key `{k}`"))),
        }
    }
    if count != Some(records.len()) {
        return Err(Error::Config(format!(
            "manifest: count {count:?} disagrees with {} pair rows",
            records.len()
        )));
    }
    Ok((cfg, records))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (config, manifest) = read_manifest(dir)?;
    let pairs = (0..manifest.len())
        .map(|i| {
            let (sp, bp) = pair_paths(dir, i);
            Ok(Pair {
                sharp: load_image(&sp)?,
                blurry: load_image(&bp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = pairs.first() {
        if pairs
            .iter()
            .any(|p| !p.sharp.same_shape(&first.sharp) || !p.blurry.same_shape(&first.sharp))
        {
            return Err(Error::Shape("dataset pairs differ in dimensions".into()));
        }
    }
    Ok(Dataset {
        config,
        pairs,
        manifest,
    })
}
