//! Image-quality metrics and the evaluation protocol.

use std::fmt;
use std::path::Path;

use crate::extractors::FeatureExtractor;
use crate::generator::Generator;
use crate::nn::ops::batch_images;
use crate::selector::CandidatePool;
use crate::store::{write_atomic, Dataset, GlyphImage};
use crate::trainer::{generate, GenerateOptions};
use crate::{Error, Result};

fn check_same(a: &GlyphImage, b: &GlyphImage) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn metric_l1(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs()).sum();
    Ok(s / a.pixels().len() as f64)
}

pub fn metric_rmse(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    Ok((s / a.pixels().len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian_1d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` image.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid windows.
pub fn metric_ssim_with(a: &GlyphImage, b: &GlyphImage, p: SsimParams) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < p.window || w < p.window {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {0}x{0} window", p.window)));
    }
    let x: Vec<f64> = a.pixels().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| f64::from(v)).collect();
    let k = gaussian_1d(p.window, p.sigma);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn metric_ssim(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    metric_ssim_with(a, b, SsimParams::default())
}

/// Learned-perceptual-style distance: per layer, features are scaled to
/// unit length along channels at every location, squared differences are
/// averaged over channels and locations, and layers are summed.
pub fn metric_lpips(a: &GlyphImage, b: &GlyphImage, backbone: Option<&dyn FeatureExtractor>) -> Result<f64> {
    check_same(a, b)?;
    let net = backbone.ok_or_else(|| Error::Unavailable("no perceptual backbone configured".into()))?;
    let fa = net.features(&batch_images(&[a])?)?;
    let fb = net.features(&batch_images(&[b])?)?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let unit = |t: &candle_core::Tensor| -> Result<candle_core::Tensor> {
            let n = (t.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            Ok(t.broadcast_div(&n)?)
        };
        total += (unit(x)? - unit(y)?)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected seen or unseen"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub l1: f64,
    pub rmse: f64,
    pub ssim: f64,
    /// `None` when no backbone is available.
    pub lpips: Option<f64>,
    pub count: usize,
    pub skipped: usize,
}

impl MetricReport {
    /// Averages metrics over prediction/ground-truth pairs.
    pub fn from_pairs(split: &str, pairs: &[(GlyphImage, GlyphImage)], backbone: Option<&dyn FeatureExtractor>) -> Result<Self> {
        let mut sums = [0.0f64; 4];
        for (pred, gt) in pairs {
            sums[0] += metric_l1(pred, gt)?;
            sums[1] += metric_rmse(pred, gt)?;
            sums[2] += metric_ssim(pred, gt)?;
            if backbone.is_some() {
                sums[3] += metric_lpips(pred, gt, backbone)?;
            }
        }
        let n = pairs.len().max(1) as f64;
        Ok(MetricReport {
            split: split.to_string(),
            l1: sums[0] / n,
            rmse: sums[1] / n,
            ssim: sums[2] / n,
            lpips: backbone.map(|_| sums[3] / n),
            count: pairs.len(),
            skipped: 0,
        })
    }

    pub fn header() -> String {
        format!("{:<8} | {:>8} | {:>8} | {:>8} | {:>8}", "split", "L1", "RMSE", "SSIM", "LPIPS")
    }

    /// One aligned row under [`MetricReport::header`].
    pub fn row(&self) -> String {
        let lpips = self.lpips.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:<8} | {:>8.4} | {:>8.4} | {:>8.4} | {:>8}",
            self.split, self.l1, self.rmse, self.ssim, lpips
        )
    }

    pub fn table(reports: &[MetricReport]) -> String {
        let mut s = Self::header();
        s.push('\n');
        s.push_str(&"-".repeat(s.len() - 1));
        for r in reports {
            s.push('\n');
            s.push_str(&r.row());
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "split={} l1={:e} rmse={:e} ssim={:e} lpips=", self.split, self.l1, self.rmse, self.ssim)?;
        match self.lpips {
            Some(v) => write!(f, "{v:e}")?,
            None => write!(f, "unavailable")?,
        }
        write!(f, " count={} skipped={}", self.count, self.skipped)
    }
}

/// Generates every non-reference glyph of the split's fonts from that
/// font's reference pool and scores it against the ground truth. Targets
/// without a ground-truth or content glyph are skipped and counted.
pub fn evaluate(
    gen: &Generator,
    dataset: &Dataset,
    pools: &[CandidatePool],
    split: Split,
    opts: GenerateOptions,
    backbone: Option<&dyn FeatureExtractor>,
) -> Result<(MetricReport, Vec<(GlyphImage, GlyphImage)>)> {
    let cat = &dataset.catalog;
    let fonts = match split {
        Split::Seen => &cat.seen,
        Split::Unseen => &cat.unseen,
    };
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for &font in fonts {
        let pool = pools
            .iter()
            .find(|p| p.font_id == font)
            .ok_or_else(|| Error::Config(format!("no reference pool for font {}", cat.fonts[font])))?;
        let refs: Vec<GlyphImage> = pool.members.iter().filter_map(|&c| dataset.glyph(font, c).cloned()).collect();
        if refs.is_empty() {
            skipped += cat.n_chars() - pool.members.len();
            continue;
        }
        let mut targets = Vec::new();
        for ch in (0..cat.n_chars()).filter(|c| !pool.members.contains(c)) {
            if dataset.has(font, ch) && dataset.content_glyph(ch).is_some() {
                targets.push(ch);
            } else {
                skipped += 1;
            }
        }
        let out = generate(gen, dataset, &refs, &targets, opts)?;
        for (g, &ch) in out.into_iter().zip(&targets) {
            pairs.push((g, dataset.glyph(font, ch).expect("checked above").clone()));
        }
    }
    let mut report = MetricReport::from_pairs(split.name(), &pairs, backbone)?;
    report.skipped = skipped;
    Ok((report, pairs))
}

/// Writes pairs as a grid: generated glyphs on one row, ground truth
/// beneath, `per_row` pairs across.
pub fn write_grid(path: &Path, pairs: &[(GlyphImage, GlyphImage)], per_row: usize) -> Result<()> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Config("nothing to draw".into()));
    };
    let (h, w) = (first.height(), first.width());
    let per_row = per_row.max(1);
    let cols = per_row.min(pairs.len());
    let bands = pairs.len().div_ceil(per_row);
    let mut img = image::GrayImage::from_pixel((cols * w) as u32, (bands * 2 * h) as u32, image::Luma([255]));
    for (i, (pred, gt)) in pairs.iter().enumerate() {
        check_same(pred, first)?;
        check_same(gt, first)?;
        let (band, col) = (i / per_row, i % per_row);
        for (k, g) in [pred, gt].into_iter().enumerate() {
            let y0 = (band * 2 + k) * h;
            for r in 0..h {
                for c in 0..w {
                    let v = (g.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((col * w + c) as u32, (y0 + r) as u32, image::Luma([v]));
                }
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    write_atomic(path, &bytes)
}
