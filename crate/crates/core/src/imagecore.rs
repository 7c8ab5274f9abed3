//! Image representation, colour/resolution transforms, value-range
//! conversions and PNG I/O.
//!
//! Pixels are stored planar (`[channel][row][col]`) so an [`Image`] maps onto
//! a `[c, h, w]` tensor without reshuffling.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Spatial dimensions must be a multiple of this so that downsampling by
/// 2^k for k <= 3 is exact.
pub const DIM_MULTIPLE: usize = 8;

/// Intensity image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Same layout as [`Image`], values centred on `[-1, 1]`. Values outside that
/// range are allowed (sampling overshoot) and are clamped on conversion back.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < DIM_MULTIPLE
        || width < DIM_MULTIPLE
        || height % DIM_MULTIPLE != 0
        || width % DIM_MULTIPLE != 0
    {
        return Err(Error::Dimensions {
            height,
            width,
            reason: format!("height and width must be >= {DIM_MULTIPLE} and divisible by {DIM_MULTIPLE}"),
        });
    }
    Ok(())
}

fn check_channels(channels: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels (expected 1 or 3)")));
    }
    Ok(())
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        check_channels(channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("image pixel {i}"),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Top-left anchored crop; origin and size must keep the crop divisible by 8.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Image::new(height, width, self.channels, data)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }
}

impl ModelImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_channels(channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} model image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw();
        Self::new(h, w, c, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `v -> 2v - 1`.
pub fn to_model_range(img: &Image) -> ModelImage {
    ModelImage {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.data.iter().map(|&v| 2.0 * v - 1.0).collect(),
    }
}

/// `m -> (m + 1) / 2`, clamped to `[0, 1]`. Non-finite input maps to 0.
pub fn from_model_range(m: &ModelImage) -> Image {
    Image {
        height: m.height,
        width: m.width,
        channels: m.channels,
        data: m
            .data
            .iter()
            .map(|&v| {
                let u = (v + 1.0) * 0.5;
                if u.is_nan() {
                    0.0
                } else {
                    u.clamp(0.0, 1.0)
                }
            })
            .collect(),
    }
}

pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Channels {
            expected: 3,
            got: img.channels,
        });
    }
    let n = img.height * img.width;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let data = (0..n).map(|i| wr * r[i] + wg * g[i] + wb * b[i]).collect();
    Ok(Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    })
}

/// Block-average pooling by `2^k` on a raw planar buffer of any size.
pub fn downsample_planar(
    data: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    k: u32,
) -> Result<(Vec<f32>, usize, usize)> {
    let f = 1usize << k;
    if height % f != 0 || width % f != 0 {
        return Err(Error::Dimensions {
            height,
            width,
            reason: format!("not divisible by downsampling factor {f}"),
        });
    }
    let (oh, ow) = (height / f, width / f);
    // Accumulate in f64 so block means are exact to one final rounding.
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0f32; channels * oh * ow];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for y in oy * f..(oy + 1) * f {
                    let row = (c * height + y) * width;
                    for x in ox * f..(ox + 1) * f {
                        acc += data[row + x] as f64;
                    }
                }
                out[(c * oh + oy) * ow + ox] = (acc * inv) as f32;
            }
        }
    }
    Ok((out, oh, ow))
}

/// Block-average downsample by `2^k`, `k` in `1..=3`. Each output pixel is
/// the arithmetic mean of its `2^k x 2^k` block.
pub fn downsample(img: &Image, k: u32) -> Result<DownsampledImage> {
    if !(1..=3).contains(&k) {
        return Err(Error::Config(format!("downsample scale index {k} not in 1..=3")));
    }
    let (data, h, w) = downsample_planar(&img.data, img.channels, img.height, img.width, k)?;
    Ok(DownsampledImage {
        height: h,
        width: w,
        channels: img.channels,
        data,
    })
}

/// Reduced-resolution planar image produced by [`downsample`]; it may be
/// smaller than the 8-pixel minimum of [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampledImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl DownsampledImage {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => {
            check_dims(h, w)?;
            Image::new(h, w, 1, buf.as_raw().iter().map(|&b| b as f32 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(buf) => {
            check_dims(h, w)?;
            let raw = buf.as_raw();
            let n = h * w;
            let mut data = vec![0.0f32; 3 * n];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * n + i] = px[c] as f32 / 255.0;
                }
            }
            Image::new(h, w, 3, data)
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{:?} (need 8-bit grayscale or RGB PNG)",
            other.color()
        ))),
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height as u32, img.width as u32);
    let n = img.height * img.width;
    let dynamic = if img.channels == 1 {
        let buf = GrayImage::from_raw(w, h, img.data.iter().map(|&v| quantize(v)).collect()).expect("buffer size");
        DynamicImage::ImageLuma8(buf)
    } else {
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(quantize(img.data[c * n + i]));
            }
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer size"))
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynamic
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}
