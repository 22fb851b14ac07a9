//! Evaluation metrics for intrinsic decompositions: brightness-adjusted MSE,
//! windowed LMSE and DSSIM, plus set-level aggregation and CSV reporting.
//!
//! Sums are accumulated in `f64` in a fixed order, so every score is
//! bit-reproducible run to run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::{Image, IntrinsicSet};
use crate::{Error, Result};

fn check_shapes(pred: &Image, gt: &Image) -> Result<()> {
    if pred.same_shape(gt) {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )))
    }
}

/// Brightness factor minimizing `sum (alpha * pred - gt)^2`; zero when the
/// prediction is all zeros.
fn best_scale(pred: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, usize) {
    let (mut pp, mut pg, mut gg, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (p, g) in pred {
        pp += p * p;
        pg += p * g;
        gg += g * g;
        n += 1;
    }
    let alpha = if pp > 0.0 { pg / pp } else { 0.0 };
    (alpha, pp, gg, n)
}

fn scaled_error<'a>(pairs: impl Iterator<Item = (&'a f32, &'a f32)> + Clone) -> (f64, f64, usize) {
    let as_f64 = |(p, g): (&f32, &f32)| (*p as f64, *g as f64);
    let (alpha, _, gg, n) = best_scale(pairs.clone().map(as_f64));
    let sse: f64 = pairs
        .map(as_f64)
        .map(|(p, g)| {
            let d = alpha * p - g;
            d * d
        })
        .sum();
    (sse, gg, n)
}

/// Mean squared error after scaling `pred` by the single factor (shared by
/// all channels) that minimizes it.
pub fn scaled_mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (sse, _, n) = scaled_error(pred.data().iter().zip(gt.data()));
    Ok(sse / n as f64)
}

/// LMSE window geometry: `k x k` windows at stride `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    k: usize,
}

impl WindowSpec {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 || k % 2 != 0 {
            return Err(Error::Domain(format!(
                "LMSE window must be even and at least 2, got {k}"
            )));
        }
        Ok(WindowSpec { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn step(&self) -> usize {
        self.k / 2
    }

    /// Window origins along an axis of `extent` pixels. The last window is
    /// anchored flush to the far edge when the stride does not land there.
    pub fn anchors(&self, extent: usize) -> Result<Vec<usize>> {
        if extent < self.k {
            return Err(Error::Domain(format!(
                "image extent {extent} is smaller than the LMSE window {}",
                self.k
            )));
        }
        let last = extent - self.k;
        let mut out: Vec<usize> = (0..=last).step_by(self.step()).collect();
        if *out.last().unwrap() != last {
            out.push(last);
        }
        Ok(out)
    }

    pub fn window_count(&self, height: usize, width: usize) -> Result<usize> {
        Ok(self.anchors(height)?.len() * self.anchors(width)?.len())
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { k: 20 }
    }
}

/// Whether LMSE fits one brightness factor per window across all channels,
/// or scores each channel separately and averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmseMode {
    #[default]
    Joint,
    PerChannel,
}

/// Local MSE: windows at stride `k / 2`, each scored by scaled MSE and
/// normalized by the window's mean squared ground truth, so the all-zero
/// prediction scores exactly 1. Windows whose ground truth is all zero score 0.
pub fn lmse(pred: &Image, gt: &Image, window: WindowSpec) -> Result<f64> {
    lmse_with_mode(pred, gt, window, LmseMode::Joint)
}

pub fn lmse_with_mode(pred: &Image, gt: &Image, window: WindowSpec, mode: LmseMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    if mode == LmseMode::PerChannel && pred.channels() > 1 {
        let mut total = 0.0;
        for c in 0..pred.channels() {
            total += lmse_with_mode(&pred.channel(c), &gt.channel(c), window, LmseMode::Joint)?;
        }
        return Ok(total / pred.channels() as f64);
    }
    let rows = window.anchors(pred.height())?;
    let cols = window.anchors(pred.width())?;
    let k = window.k();
    let c = pred.channels();
    let mut total = 0.0;
    for &r0 in &rows {
        for &c0 in &cols {
            let pairs = (r0..r0 + k).flat_map(|i| {
                let start = pred.index(i, c0, 0);
                let end = start + k * c;
                pred.data()[start..end].iter().zip(&gt.data()[start..end])
            });
            let (sse, gg, _) = scaled_error(pairs);
            if gg > 0.0 {
                total += sse / gg;
            }
        }
    }
    Ok(total / (rows.len() * cols.len()) as f64)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`), folded until in range.
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = idx.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - r, w);
                acc += kv * plane[i * w + jj];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - r, h);
                acc += kv * tmp[ii * w + j];
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and reflected borders. The dynamic range is the
/// joint range of both images (floored at 1e-6). Multi-channel inputs score
/// each channel and average.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    let lo = pred.min().min(gt.min()) as f64;
    let hi = pred.max().max(gt.max()) as f64;
    let range = (hi - lo).max(1e-6);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let kernel = gaussian_kernel();
    let (h, w, channels) = pred.shape();

    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = pred.channel(c).data().iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = gt.channel(c).data().iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mu_x = blur(&x, h, w, &kernel);
        let mu_y = blur(&y, h, w, &kernel);
        let s_xx = blur(&xx, h, w, &kernel);
        let s_yy = blur(&yy, h, w, &kernel);
        let s_xy = blur(&xy, h, w, &kernel);
        let mut sum = 0.0;
        for p in 0..h * w {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let vx = s_xx[p] - mx * mx;
            let vy = s_yy[p] - my * my;
            let cov = s_xy[p] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / (h * w) as f64;
    }
    Ok(total / channels as f64)
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn dssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(dssim_from_ssim(ssim(pred, gt)?))
}

pub fn dssim_from_ssim(ssim: f64) -> f64 {
    ((1.0 - ssim) / 2.0).clamp(0.0, 1.0)
}

/// Zeroes pixels outside `mask` (1-channel, zero = excluded) in both images.
pub fn apply_mask(image: &Image, mask: &Image) -> Result<Image> {
    if !image.same_size(mask) || mask.channels() != 1 {
        return Err(Error::Dimension("mask must be 1-channel and match in size".into()));
    }
    let c = image.channels();
    Image::new(
        image.height(),
        image.width(),
        c,
        image
            .data()
            .chunks_exact(c)
            .zip(mask.data())
            .flat_map(|(px, &m)| px.iter().map(move |&v| if m > 0.0 { v } else { 0.0 }))
            .collect(),
    )
}

/// Scores for one image's reflectance and shading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub mse_albedo: f64,
    pub mse_shading: f64,
    pub lmse_albedo: f64,
    pub lmse_shading: f64,
    pub dssim_albedo: f64,
    pub dssim_shading: f64,
}

impl ImageScores {
    pub fn compute(pred: &IntrinsicSet, gt: &IntrinsicSet, window: WindowSpec) -> Result<Self> {
        Self::compute_with(pred, gt, window, LmseMode::Joint, None)
    }

    pub fn compute_with(
        pred: &IntrinsicSet,
        gt: &IntrinsicSet,
        window: WindowSpec,
        mode: LmseMode,
        mask: Option<&Image>,
    ) -> Result<Self> {
        let prep = |p: &Image, g: &Image| -> Result<(Image, Image)> {
            let p = if p.channels() != 1 && g.channels() == 1 {
                p.channel_mean()
            } else {
                p.broadcast_channels(g.channels())?
            };
            match mask {
                Some(m) => Ok((apply_mask(&p, m)?, apply_mask(g, m)?)),
                None => Ok((p, g.clone())),
            }
        };
        let (pr, gr) = prep(&pred.reflectance, &gt.reflectance)?;
        let (ps, gs) = prep(&pred.shading, &gt.shading)?;
        Ok(ImageScores {
            mse_albedo: scaled_mse(&pr, &gr)?,
            mse_shading: scaled_mse(&ps, &gs)?,
            lmse_albedo: lmse_with_mode(&pr, &gr, window, mode)?,
            lmse_shading: lmse_with_mode(&ps, &gs, window, mode)?,
            dssim_albedo: dssim(&pr, &gr)?,
            dssim_shading: dssim(&ps, &gs)?,
        })
    }

    fn columns(&self) -> [f64; 6] {
        [
            self.mse_albedo,
            self.mse_shading,
            self.lmse_albedo,
            self.lmse_shading,
            self.dssim_albedo,
            self.dssim_shading,
        ]
    }
}

/// Per-image scores and their arithmetic means over a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_albedo: f64,
    pub mse_shading: f64,
    pub lmse_albedo: f64,
    pub lmse_shading: f64,
    pub lmse_mean: f64,
    pub dssim_albedo: f64,
    pub dssim_shading: f64,
    pub count: usize,
    pub rows: Vec<(String, ImageScores)>,
}

pub const CSV_HEADER: &str = "image,mse_r,mse_s,lmse_r,lmse_s,dssim_r,dssim_s";

impl MetricReport {
    pub fn from_rows(rows: Vec<(String, ImageScores)>) -> Self {
        let n = rows.len();
        let mut sums = [0.0f64; 6];
        for (_, s) in &rows {
            for (acc, v) in sums.iter_mut().zip(s.columns()) {
                *acc += v;
            }
        }
        let mean = |i: usize| if n == 0 { 0.0 } else { sums[i] / n as f64 };
        MetricReport {
            mse_albedo: mean(0),
            mse_shading: mean(1),
            lmse_albedo: mean(2),
            lmse_shading: mean(3),
            lmse_mean: (mean(2) + mean(3)) / 2.0,
            dssim_albedo: mean(4),
            dssim_shading: mean(5),
            count: n,
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut line = |name: &str, cols: [f64; 6]| {
            out.push_str(name);
            for v in cols {
                let _ = write!(out, ",{v:.8}");
            }
            out.push('\n');
        };
        for (name, s) in &self.rows {
            line(name, s.columns());
        }
        line(
            "MEAN",
            [
                self.mse_albedo,
                self.mse_shading,
                self.lmse_albedo,
                self.lmse_shading,
                self.dssim_albedo,
                self.dssim_shading,
            ],
        );
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Console table in the albedo/shading x MSE/LMSE/DSSIM layout.
    pub fn table(&self) -> String {
        format!(
            "{:<10}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}\n{:<10}{:>12.6}{:>12.6}{:>12.6}{:>12.6}{:>12.6}{:>12.6}\n",
            format!("n={}", self.count),
            "MSE R",
            "MSE S",
            "LMSE R",
            "LMSE S",
            "DSSIM R",
            "DSSIM S",
            "mean",
            self.mse_albedo,
            self.mse_shading,
            self.lmse_albedo,
            self.lmse_shading,
            self.dssim_albedo,
            self.dssim_shading,
        )
    }
}

/// Scores every prediction against its ground truth and averages.
pub fn evaluate_set(
    predictions: &[IntrinsicSet],
    ground_truths: &[IntrinsicSet],
    window: WindowSpec,
) -> Result<MetricReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let rows = predictions
        .iter()
        .zip(ground_truths)
        .enumerate()
        .map(|(i, (p, g))| Ok((format!("{i}"), ImageScores::compute(p, g, window)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}
