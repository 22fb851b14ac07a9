//! Classical Retinex decomposition.
//!
//! Large log-domain derivatives are attributed to reflectance, small ones to
//! shading. The reflectance derivatives are reintegrated with a least-squares
//! Poisson solve (conjugate gradients on the Neumann 5-point Laplacian), and
//! shading follows from the diffuse model.

use serde::{Deserialize, Serialize};

use crate::image::{derive_shading, gradient, GradientField, Image, IntrinsicSet};
use crate::{Error, Result};

/// Pixels are clamped to this value before taking logarithms.
pub const LOG_CLAMP: f32 = 1e-4;

/// How the per-channel additive constant of log-reflectance is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gauge {
    /// Each channel of log-reflectance has zero mean.
    ZeroMean,
    /// Channels are offset so that the implied log-shading has the same mean
    /// in every channel (a gray-world assumption on the light).
    #[default]
    AchromaticShading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetinexParams {
    /// Log-gradient cutoff above which a derivative is attributed to reflectance.
    pub threshold: f32,
    /// Classify on log-chromaticity gradients instead of log-intensity.
    pub use_chromaticity: bool,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    pub gauge: Gauge,
}

impl Default for RetinexParams {
    fn default() -> Self {
        RetinexParams {
            threshold: 0.075,
            use_chromaticity: false,
            solver_tol: 1e-6,
            solver_max_iters: 10_000,
            gauge: Gauge::default(),
        }
    }
}

impl RetinexParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(Error::Domain(format!(
                "threshold must be non-negative, got {}",
                self.threshold
            )));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::Domain("solver_tol must be positive".into()));
        }
        if self.solver_max_iters == 0 {
            return Err(Error::Domain("solver_max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Log-gradients of an image split into reflectance and shading parts.
#[derive(Debug, Clone)]
pub struct GradientSplit {
    pub reflectance: GradientField,
    pub shading: GradientField,
    pub log_gradient: GradientField,
    /// Per-pixel flags (shared across channels): horizontal derivative went to
    /// reflectance.
    pub horizontal: Vec<bool>,
    pub vertical: Vec<bool>,
}

impl GradientSplit {
    /// Pixels where either derivative was attributed to reflectance.
    pub fn edge_mask(&self) -> Vec<bool> {
        self.horizontal
            .iter()
            .zip(&self.vertical)
            .map(|(h, v)| *h || *v)
            .collect()
    }
}

pub fn log_image(image: &Image) -> Image {
    image.map(|v| v.max(LOG_CLAMP).ln())
}

fn with_magnitude(gx: Image, gy: Image) -> GradientField {
    let magnitude = Image::new(
        gx.height(),
        gx.width(),
        gx.channels(),
        gx.data()
            .iter()
            .zip(gy.data())
            .map(|(x, y)| (x * x + y * y).sqrt())
            .collect(),
    )
    .expect("finite gradients");
    GradientField { gx, gy, magnitude }
}

/// Splits the log-image gradient with a hard threshold on the classification
/// statistic: the largest per-channel log-derivative, or the norm of the
/// log-chromaticity derivative when `use_chromaticity` is set. Each
/// derivative direction is classified on its own.
pub fn classify_gradients(image: &Image, params: &RetinexParams) -> Result<GradientSplit> {
    params.validate()?;
    let log = log_image(image);
    let log_gradient = gradient(&log)?;
    let (h, w, c) = log.shape();

    let (stat_x, stat_y): (Vec<f32>, Vec<f32>) = if params.use_chromaticity {
        let mean = log_image(&image.map(|v| v.max(LOG_CLAMP)).channel_mean());
        let chroma = Image::from_fn(h, w, c, |i, j, k| log.get(i, j, k) - mean.get(i, j, 0));
        let g = gradient(&chroma)?;
        let norm = |img: &Image| -> Vec<f32> {
            img.data()
                .chunks_exact(c)
                .map(|px| px.iter().map(|d| d * d).sum::<f32>().sqrt())
                .collect()
        };
        (norm(&g.gx), norm(&g.gy))
    } else {
        let peak = |img: &Image| -> Vec<f32> {
            img.data()
                .chunks_exact(c)
                .map(|px| px.iter().fold(0.0f32, |m, d| m.max(d.abs())))
                .collect()
        };
        (peak(&log_gradient.gx), peak(&log_gradient.gy))
    };
    let horizontal: Vec<bool> = stat_x.iter().map(|&s| s > params.threshold).collect();
    let vertical: Vec<bool> = stat_y.iter().map(|&s| s > params.threshold).collect();

    let split = |g: &Image, mask: &[bool], to_reflectance: bool| {
        Image::from_fn(h, w, c, |i, j, k| {
            if mask[i * w + j] == to_reflectance {
                g.get(i, j, k)
            } else {
                0.0
            }
        })
    };
    let reflectance = with_magnitude(
        split(&log_gradient.gx, &horizontal, true),
        split(&log_gradient.gy, &vertical, true),
    );
    let shading = with_magnitude(
        split(&log_gradient.gx, &horizontal, false),
        split(&log_gradient.gy, &vertical, false),
    );
    Ok(GradientSplit {
        reflectance,
        shading,
        log_gradient,
        horizontal,
        vertical,
    })
}

/// Result of a Poisson reintegration.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub field: Image,
    pub iterations: usize,
    pub relative_residual: f64,
    /// False when `max_iters` was reached before the residual fell below `tol`.
    pub converged: bool,
}

struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    /// `(Dx^T Dx + Dy^T Dy) f` with forward differences and Neumann borders.
    fn apply(&self, f: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut acc = 0.0;
                if j + 1 < w {
                    acc += f[p] - f[p + 1];
                }
                if j > 0 {
                    acc += f[p] - f[p - 1];
                }
                if i + 1 < h {
                    acc += f[p] - f[p + w];
                }
                if i > 0 {
                    acc += f[p] - f[p - w];
                }
                out[p] = acc;
            }
        }
    }

    /// `Dx^T gx + Dy^T gy`.
    fn divergence(&self, gx: &Image, gy: &Image) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut b = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut acc = 0.0;
                if j + 1 < w {
                    acc -= gx.data()[p] as f64;
                }
                if j > 0 {
                    acc += gx.data()[p - 1] as f64;
                }
                if i + 1 < h {
                    acc -= gy.data()[p] as f64;
                }
                if i > 0 {
                    acc += gy.data()[p - w] as f64;
                }
                b[p] = acc;
            }
        }
        b
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares potential of a gradient field.
///
/// Returns `f` minimizing `sum (dx f - gx)^2 + sum (dy f - gy)^2` under the
/// same forward-difference stencil as [`gradient`], with zero mean. `gx` in
/// the last column and `gy` in the last row are ignored.
pub fn poisson_reintegrate(
    gx: &Image,
    gy: &Image,
    tol: f64,
    max_iters: usize,
) -> Result<PoissonSolution> {
    if !gx.same_shape(gy) {
        return Err(Error::Dimension(format!(
            "gx {:?} and gy {:?} differ",
            gx.shape(),
            gy.shape()
        )));
    }
    if gx.channels() != 1 {
        return Err(Error::Dimension(format!(
            "poisson_reintegrate takes one channel, got {}",
            gx.channels()
        )));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::Domain("tol must be positive and max_iters at least 1".into()));
    }
    let grid = Grid {
        h: gx.height(),
        w: gx.width(),
    };
    let n = grid.h * grid.w;
    let b = grid.divergence(gx, gy);
    let b_norm = dot(&b, &b).sqrt();

    let mut f = vec![0.0; n];
    let mut iterations = 0;
    let mut rel = 0.0;
    if b_norm > 0.0 {
        let mut r = b.clone();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr = dot(&r, &r);
        rel = rr.sqrt() / b_norm;
        while rel > tol && iterations < max_iters {
            grid.apply(&p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for k in 0..n {
                f[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            for k in 0..n {
                p[k] = r[k] + beta * p[k];
            }
            rr = rr_next;
            rel = rr.sqrt() / b_norm;
            iterations += 1;
        }
    }
    let mean = f.iter().sum::<f64>() / n as f64;
    let field = Image::new(
        grid.h,
        grid.w,
        1,
        f.iter().map(|v| (v - mean) as f32).collect(),
    )?;
    Ok(PoissonSolution {
        field,
        iterations,
        relative_residual: rel,
        converged: rel <= tol,
    })
}

/// Output of [`retinex_decompose`].
#[derive(Debug, Clone)]
pub struct RetinexResult {
    pub set: IntrinsicSet,
    pub split: GradientSplit,
    /// All per-channel solves reached the requested tolerance.
    pub converged: bool,
}

/// Retinex decomposition: classify log-gradients, reintegrate the reflectance
/// part per channel, exponentiate and normalize so `max(R) = 1`, then
/// `S = I / R`.
pub fn retinex_decompose(image: &Image, params: &RetinexParams) -> Result<RetinexResult> {
    let split = classify_gradients(image, params)?;
    let (h, w, c) = image.shape();
    let log = log_image(image);
    let mut log_r: Vec<Image> = Vec::with_capacity(c);
    let mut converged = true;
    for k in 0..c {
        let sol = poisson_reintegrate(
            &split.reflectance.gx.channel(k),
            &split.reflectance.gy.channel(k),
            params.solver_tol,
            params.solver_max_iters,
        )?;
        converged &= sol.converged;
        log_r.push(sol.field);
    }
    if params.gauge == Gauge::AchromaticShading {
        let offsets: Vec<f64> = (0..c)
            .map(|k| {
                let lr = &log_r[k];
                let li = log.channel(k);
                li.data()
                    .iter()
                    .zip(lr.data())
                    .map(|(a, b)| (*a - *b) as f64)
                    .sum::<f64>()
                    / (h * w) as f64
            })
            .collect();
        let avg = offsets.iter().sum::<f64>() / c as f64;
        for (lr, off) in log_r.iter_mut().zip(&offsets) {
            let shift = (off - avg) as f32;
            *lr = lr.map(|v| v + shift);
        }
    }
    let peak = log_r
        .iter()
        .map(|lr| lr.max())
        .fold(f32::NEG_INFINITY, f32::max);
    let reflectance = Image::from_fn(h, w, c, |i, j, k| (log_r[k].get(i, j, 0) - peak).exp());
    let shading = derive_shading(image, &reflectance, LOG_CLAMP)?;
    Ok(RetinexResult {
        set: IntrinsicSet::new(reflectance, shading)?,
        split,
        converged,
    })
}
