use super::project::{project_gaussian, Splat2D};
use super::{composite_pixel, RasterConfig, SplatInputs};
use crate::diffcore::Real;
use crate::error::Result;
use crate::scene::Camera;

/// Maps produced by [`render_oracle`], laid out like [`super::RenderOutput`].
#[derive(Clone, Debug)]
pub struct OracleOutput<T> {
    pub image: Vec<T>,
    pub depth: Vec<T>,
    pub weight: Vec<T>,
}

/// Reference renderer: every pixel composites every projected splat in
/// global depth order. No tiles, no bounding boxes, and no transmittance
/// early exit regardless of `cfg.min_transmittance`.
pub fn render_oracle<T: Real>(
    inputs: &SplatInputs<'_, T>,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<OracleOutput<T>> {
    inputs.validate()?;
    let mut splats: Vec<Splat2D<T>> = (0..inputs.len())
        .filter_map(|i| {
            let p = project_gaussian(inputs.mu(i), &inputs.cov(i), cam, cfg).ok()?;
            Some(Splat2D {
                point_id: i,
                mean2d: p.mean2d,
                cov2d: p.cov2d,
                conic: p.conic,
                depth: p.t[2],
                color: inputs.color(i),
                opacity: inputs.opacity(i),
            })
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.point_id.cmp(&b.point_id))
    });
    let cfg = &RasterConfig { min_transmittance: 0.0, ..cfg.clone() };
    let bg = cfg.background.map(T::lit);
    let (w, h) = (cam.width, cam.height);
    let mut out = OracleOutput {
        image: Vec::with_capacity(w * h * 3),
        depth: Vec::with_capacity(w * h),
        weight: Vec::with_capacity(w * h),
    };
    for py in 0..h {
        for px in 0..w {
            let p = [T::lit(px as f64 + 0.5), T::lit(py as f64 + 0.5)];
            let c = composite_pixel(&splats, p, bg, cfg);
            out.image.extend_from_slice(&c.rgb);
            out.depth.push(c.depth);
            out.weight.push(c.weight);
        }
    }
    Ok(out)
}
