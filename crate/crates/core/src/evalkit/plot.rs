//! Raster line plot of mean PSNR against sampling steps, one series per
//! maximum noise variance. Drawn directly into an RGB buffer.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::MetricReport;
use crate::error::{Error, Result};

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const LEFT: i64 = 70;
const RIGHT: i64 = 150;
const TOP: i64 = 20;
const BOTTOM: i64 = 50;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// 3x5 bitmap glyphs for numeric labels, one row per `u8`, MSB-first in 3 bits.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'v' => [0, 5, 5, 5, 2],
        'T' => [7, 2, 2, 2, 2],
        '=' => [0, 7, 0, 7, 0],
        _ => return None,
    })
}

struct Canvas(RgbImage);

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.0.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let x = x0 + (x1 - x0) * i / steps;
            let y = y0 + (y1 - y0) * i / steps;
            self.put(x, y, c);
        }
    }

    fn square(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                self.put(x + dx, y + dy, c);
            }
        }
    }

    /// Text at scale 2 (6x10 per glyph); unknown characters are skipped.
    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (ry, bits) in rows.iter().enumerate() {
                    for bx in 0..3 {
                        if bits & (4 >> bx) != 0 {
                            for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                                self.put(cx + 2 * bx + ox, y + 2 * ry as i64 + oy, c);
                            }
                        }
                    }
                }
            }
            cx += 8;
        }
    }
}

/// Writes a PNG with x = log(steps), y = mean PSNR, one polyline per
/// `max_var`. Axis ticks carry numeric labels; the legend maps colours to
/// `v=<max_var>`.
pub fn write_psnr_plot(reports: &[MetricReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Plot("no reports to plot".into()));
    }
    let mut series: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for r in reports {
        series.entry(r.max_var.to_bits()).or_default().push((r.steps, r.mean_psnr));
    }
    let lx = |s: usize| (s.max(1) as f64).ln();
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in reports {
        x_lo = x_lo.min(lx(r.steps));
        x_hi = x_hi.max(lx(r.steps));
        y_lo = y_lo.min(r.mean_psnr);
        y_hi = y_hi.max(r.mean_psnr);
    }
    if x_hi - x_lo < 1e-9 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let (pw, ph) = (WIDTH as i64 - LEFT - RIGHT, HEIGHT as i64 - TOP - BOTTOM);
    let px = |x: f64| LEFT + ((x - x_lo) / (x_hi - x_lo) * pw as f64).round() as i64;
    let py = |y: f64| TOP + ph - ((y - y_lo) / (y_hi - y_lo) * ph as f64).round() as i64;

    let mut canvas = Canvas(RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])));
    let axis = [0, 0, 0];
    let grid = [225, 225, 225];
    for i in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        canvas.line((LEFT, py(y)), (LEFT + pw, py(y)), grid);
        canvas.text(4, py(y) - 5, &format!("{y:.1}"), axis);
    }
    let mut ticks: Vec<usize> = reports.iter().map(|r| r.steps).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for &t in &ticks {
        let x = px(lx(t));
        canvas.line((x, TOP), (x, TOP + ph), grid);
        canvas.line((x, TOP + ph), (x, TOP + ph + 5), axis);
        let label = t.to_string();
        canvas.text(x - 4 * label.len() as i64, TOP + ph + 10, &label, axis);
    }
    canvas.text(LEFT + pw / 2 - 4, TOP + ph + 30, "T", axis);
    canvas.line((LEFT, TOP), (LEFT, TOP + ph), axis);
    canvas.line((LEFT, TOP + ph), (LEFT + pw, TOP + ph), axis);

    for (i, (bits, pts)) in series.iter_mut().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        pts.sort_by_key(|p| p.0);
        let mapped: Vec<(i64, i64)> = pts.iter().map(|&(s, v)| (px(lx(s)), py(v))).collect();
        for w in mapped.windows(2) {
            canvas.line(w[0], w[1], color);
        }
        for &(x, y) in &mapped {
            canvas.square(x, y, 3, color);
        }
        let ly = TOP + 10 + 18 * i as i64;
        canvas.square(LEFT + pw + 20, ly + 4, 4, color);
        canvas.text(LEFT + pw + 30, ly, &format!("v={}", f64::from_bits(*bits)), axis);
    }

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    canvas
        .0
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Plot(e.to_string()))
}
