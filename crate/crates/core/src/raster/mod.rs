//! Tile-based differentiable Gaussian rasterizer.
//!
//! Forward: project every Gaussian, bin the splats into 16×16 tiles in global
//! depth order, then alpha-composite color, depth and accumulated weight per
//! pixel. Backward is hand-derived and walks each pixel's contributors back to
//! front. [`render_oracle`] is the slow per-pixel reference.

mod op;
mod oracle;
mod project;
mod tiled;

use serde::{Deserialize, Serialize};

pub use op::{RenderOp, RENDER_CHANNELS};
pub use oracle::{render_oracle, OracleOutput};
pub use project::{project_gaussian, Cull, Projection, Splat2D};
pub use tiled::{render, render_backward, RenderGrads, RenderOutput, RenderStats, TileBinning};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Points with camera z at or below this are culled.
    pub near: f64,
    /// Added to the diagonal of every projected covariance (pixels²).
    pub dilation: f64,
    pub alpha_max: f64,
    /// Contributions with α below this are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance drops below this, so skipped
    /// splats change a pixel by less than this amount; `0` disables it.
    pub min_transmittance: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            near: 0.01,
            dilation: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            min_transmittance: 1e-4,
            background: [0.0; 3],
        }
    }
}

impl RasterConfig {
    /// Same conventions with the transmittance early exit disabled.
    pub fn exhaustive() -> Self {
        RasterConfig { min_transmittance: 0.0, ..Default::default() }
    }
}

/// Per-Gaussian inputs to the rasterizer, already activated.
#[derive(Clone, Copy, Debug)]
pub struct SplatInputs<'a, T> {
    /// `[M, 3]`
    pub mu: &'a Tensor<T>,
    /// `[M, 6]` as `[xx, xy, xz, yy, yz, zz]`
    pub cov: &'a Tensor<T>,
    /// `[M, 3]`
    pub color: &'a Tensor<T>,
    /// `[M, 1]` or `[M]`
    pub opacity: &'a Tensor<T>,
}

impl<'a, T: Real> SplatInputs<'a, T> {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mu.rows();
        let ok = self.mu.cols() == 3
            && self.cov.cols() == 6
            && self.cov.rows() == m
            && self.color.cols() == 3
            && self.color.rows() == m
            && self.opacity.len() == m;
        if !ok {
            return Err(Error::Shape(format!(
                "rasterizer inputs misaligned: mu {:?}, cov {:?}, color {:?}, opacity {:?}",
                self.mu.shape(),
                self.cov.shape(),
                self.color.shape(),
                self.opacity.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn mu(&self, i: usize) -> [T; 3] {
        let r = self.mu.row(i);
        [r[0], r[1], r[2]]
    }

    pub(crate) fn cov(&self, i: usize) -> [T; 6] {
        let r = self.cov.row(i);
        [r[0], r[1], r[2], r[3], r[4], r[5]]
    }

    pub(crate) fn color(&self, i: usize) -> [T; 3] {
        let r = self.color.row(i);
        [r[0], r[1], r[2]]
    }

    pub(crate) fn opacity(&self, i: usize) -> T {
        self.opacity.data()[i]
    }
}

/// Composited values at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelComposite<T> {
    pub rgb: [T; 3],
    /// `Σ d_i α_i T_i`, not normalized.
    pub depth: T,
    /// `Σ α_i T_i`.
    pub weight: T,
    /// Transmittance left after the last contributor.
    pub transmittance: T,
    pub contributors: usize,
}

/// Splat opacity at pixel `p` before clamping: `o · exp(-½ Δᵀ Σ'⁻¹ Δ)`.
#[inline]
pub(crate) fn splat_gaussian<T: Real>(s: &Splat2D<T>, p: [T; 2]) -> (T, T, T) {
    let dx = p[0] - s.mean2d[0];
    let dy = p[1] - s.mean2d[1];
    let power = -T::lit(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy)
        - s.conic[1] * dx * dy;
    (power.exp(), dx, dy)
}

/// Front-to-back compositing of depth-sorted splats at pixel center `p`.
pub fn composite_pixel<T: Real>(
    splats: &[Splat2D<T>],
    p: [T; 2],
    background: [T; 3],
    cfg: &RasterConfig,
) -> PixelComposite<T> {
    let alpha_max = T::lit(cfg.alpha_max);
    let alpha_min = T::lit(cfg.alpha_min);
    let min_t = T::lit(cfg.min_transmittance);
    let mut t = T::one();
    let mut rgb = [T::zero(); 3];
    let mut depth = T::zero();
    let mut weight = T::zero();
    let mut contributors = 0;
    for s in splats {
        let (g, _, _) = splat_gaussian(s, p);
        let alpha = (s.opacity * g).min(alpha_max);
        if alpha < alpha_min {
            continue;
        }
        let w = alpha * t;
        for c in 0..3 {
            rgb[c] += s.color[c] * w;
        }
        depth += s.depth * w;
        weight += w;
        t *= T::one() - alpha;
        contributors += 1;
        if t < min_t {
            break;
        }
    }
    for c in 0..3 {
        rgb[c] += t * background[c];
    }
    PixelComposite { rgb, depth, weight, transmittance: t, contributors }
}

pub fn composite_color<T: Real>(
    splats: &[Splat2D<T>],
    p: [T; 2],
    background: [T; 3],
    cfg: &RasterConfig,
) -> [T; 3] {
    composite_pixel(splats, p, background, cfg).rgb
}

/// Composited depth and accumulated weight.
pub fn composite_depth<T: Real>(splats: &[Splat2D<T>], p: [T; 2], cfg: &RasterConfig) -> (T, T) {
    let r = composite_pixel(splats, p, [T::zero(); 3], cfg);
    (r.depth, r.weight)
}
