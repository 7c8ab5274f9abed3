//! Distortion metrics (PSNR, SSIM) and sweep aggregation.

mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{to_grayscale, Image};

pub use plot::write_psnr_plot;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub const SWEEP_CSV_HEADER: &str = "steps,max_var,image_id,psnr,ssim,seconds";
pub const SUMMARY_CSV_HEADER: &str = "steps,max_var,mean_psnr,mean_ssim,n_images";

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(total / a.data().len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn luma_f64(img: &Image) -> Result<Vec<f64>> {
    let g = if img.channels() == 3 {
        to_grayscale(img)?
    } else {
        img.clone()
    };
    Ok(g.data().iter().map(|&v| v as f64).collect())
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully-contained 11x11 Gaussian
/// windows (sigma 1.5). RGB inputs are compared on luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let x = luma_f64(a)?;
    let y = luma_f64(b)?;
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let e_xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let e_yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let e_xy = filter_valid(&prod(&x, &y), h, w, &taps);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// One sampled image evaluated under one sampler configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub steps: usize,
    pub max_var: f64,
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

/// Per-config aggregate over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub steps: usize,
    pub max_var: f64,
    pub per_image: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn n_images(&self) -> usize {
        self.per_image.len()
    }
}

/// Groups records by `(steps, max_var)` and averages each group. Records are
/// sorted inside a group before summation so the result does not depend on
/// input order.
pub fn aggregate(records: &[SweepRecord]) -> Vec<MetricReport> {
    let mut groups: BTreeMap<(usize, u64), Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.steps, r.max_var.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((steps, bits), mut rs)| {
            rs.sort_by(|a, b| {
                a.image_id
                    .cmp(&b.image_id)
                    .then(a.psnr.total_cmp(&b.psnr))
                    .then(a.ssim.total_cmp(&b.ssim))
            });
            let n = rs.len() as f64;
            MetricReport {
                steps,
                max_var: f64::from_bits(bits),
                mean_psnr: rs.iter().map(|r| r.psnr).sum::<f64>() / n,
                mean_ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
                per_image: rs.iter().map(|r| (r.image_id.clone(), r.psnr, r.ssim)).collect(),
            }
        })
        .collect()
}

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in records {
        writeln!(s, "{},{},{},{},{},{}", r.steps, r.max_var, r.image_id, r.psnr, r.ssim, r.seconds).unwrap();
    }
    s
}

pub fn summary_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{SUMMARY_CSV_HEADER}\n");
    for r in reports {
        writeln!(s, "{},{},{},{},{}", r.steps, r.max_var, r.mean_psnr, r.mean_ssim, r.n_images()).unwrap();
    }
    s
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(Error::Config("sweep csv: unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!("sweep csv: malformed row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("sweep csv: bad number `{s}`")));
            Ok(SweepRecord {
                steps: f[0].parse().map_err(|_| Error::Config(format!("sweep csv: bad steps `{}`", f[0])))?,
                max_var: num(f[1])?,
                image_id: f[2].to_string(),
                psnr: num(f[3])?,
                ssim: num(f[4])?,
                seconds: num(f[5])?,
            })
        })
        .collect()
}

/// Aggregates `records`, writes `sweep_summary.csv` and `sweep_psnr.png`
/// into `out_dir`.
pub fn sweep_report(records: &[SweepRecord], out_dir: &Path) -> Result<Vec<MetricReport>> {
    if records.is_empty() {
        return Err(Error::Config("sweep report needs at least one record".into()));
    }
    let reports = aggregate(records);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("sweep_summary.csv");
    std::fs::write(&csv, summary_csv(&reports)).map_err(|e| Error::io(&csv, e))?;
    write_psnr_plot(&reports, &out_dir.join("sweep_psnr.png"))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f32) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(16, 16, 3, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(0.0001), 40.0);
        let b = Image::filled(16, 16, 3, 0.4).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &Image::filled(8, 8, 3, 0.5).unwrap()).is_err());
    }

    /// Direct-summation SSIM: for every window position, weighted moments are
    /// accumulated from the 2-D Gaussian without separable filtering or the
    /// `E[x^2] - mu^2` shortcut.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let r = 5i64;
        let mut wts = vec![0.0; 121];
        for dy in -r..=r {
            for dx in -r..=r {
                wts[((dy + r) * 11 + dx + r) as usize] = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = wts.iter().sum();
        wts.iter_mut().for_each(|v| *v /= s);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let at = |img: &[f64], i: usize| img[(y0 + i / 11) * w + x0 + i % 11];
                let mx: f64 = (0..121).map(|i| wts[i] * at(a, i)).sum();
                let my: f64 = (0..121).map(|i| wts[i] * at(b, i)).sum();
                let vx: f64 = (0..121).map(|i| wts[i] * (at(a, i) - mx).powi(2)).sum();
                let vy: f64 = (0..121).map(|i| wts[i] * (at(b, i) - my).powi(2)).sum();
                let cxy: f64 = (0..121).map(|i| wts[i] * (at(a, i) - mx) * (at(b, i) - my)).sum();
                total += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = img(16, 16, 1, |_| rng.random::<f32>());
        let b = Image::new(16, 16, 1, a.data().iter().map(|&v| (v * 0.7 + 0.1 * rng.random::<f32>()).min(1.0)).collect()).unwrap();
        let to64 = |i: &Image| i.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let want = ssim_oracle(&to64(&a), &to64(&b), 16, 16);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = img(16, 24, 3, |i| ((i * 37) % 101) as f32 / 100.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = Image::new(16, 24, 3, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&Image::filled(8, 8, 1, 0.0).unwrap(), &Image::filled(8, 8, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn ssim_bounded_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = img(16, 16, 1, |_| rng.random::<f32>());
            let b = img(16, 16, 1, |_| rng.random::<f32>());
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            assert!(s < 1.0);
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }

    fn rec(steps: usize, v: f64, id: &str, p: f64, s: f64) -> SweepRecord {
        SweepRecord {
            steps,
            max_var: v,
            image_id: id.into(),
            psnr: p,
            ssim: s,
            seconds: 0.0,
        }
    }

    #[test]
    fn aggregation_contracts() {
        let single = [rec(100, 0.1, "a", 25.0, 0.8)];
        let r = aggregate(&single);
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].mean_psnr, r[0].mean_ssim, r[0].n_images()), (25.0, 0.8, 1));

        let recs = vec![
            rec(100, 0.1, "a", 25.1, 0.81),
            rec(100, 0.1, "b", 27.3, 0.71),
            rec(20, 0.5, "a", 22.2, 0.62),
            rec(100, 0.1, "c", 21.9, 0.93),
        ];
        let base = aggregate(&recs);
        let doubled: Vec<_> = recs.iter().chain(&recs).cloned().collect();
        for (x, y) in base.iter().zip(aggregate(&doubled)) {
            assert!((x.mean_psnr - y.mean_psnr).abs() < 1e-12);
            assert!((x.mean_ssim - y.mean_ssim).abs() < 1e-12);
        }
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev), base);
        let g = &base[1];
        assert!((g.mean_psnr - (25.1 + 27.3 + 21.9) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_csv_round_trip_and_report_files() {
        let recs = vec![rec(100, 0.1, "0000", 25.5, 0.75), rec(20, 0.5, "0000", 22.0, 0.6)];
        assert_eq!(parse_sweep_csv(&sweep_csv(&recs)).unwrap(), recs);
        let dir = tempfile::tempdir().unwrap();
        let reports = sweep_report(&recs, dir.path()).unwrap();
        assert_eq!(reports.len(), 2);
        let summary = std::fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
        assert!(summary.starts_with(SUMMARY_CSV_HEADER));
        assert_eq!(summary.lines().count(), 3);
        assert!(dir.path().join("sweep_psnr.png").exists());
        assert!(sweep_report(&[], dir.path()).is_err());
    }
}
