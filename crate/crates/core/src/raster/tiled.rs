use std::fmt::Write as _;

use rayon::prelude::*;

use super::project::{project_backward, project_gaussian, visibility_radius, Cull, Projection, Splat2D};
use super::{splat_gaussian, RasterConfig, SplatInputs};
use crate::diffcore::Real;
use crate::error::Result;
use crate::scene::Camera;

/// Per-tile splat lists, each sorted by ascending depth (ties by point id).
#[derive(Clone, Debug, Default)]
pub struct TileBinning {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Indices into the visible splat list.
    pub lists: Vec<Vec<u32>>,
}

impl TileBinning {
    /// Per-tile splat counts as text, one tile row per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for ty in 0..self.tiles_y {
            let row: Vec<String> =
                (0..self.tiles_x).map(|tx| self.lists[ty * self.tiles_x + tx].len().to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    fn tile_pixels(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled_near: usize,
    pub culled_singular: usize,
    /// Splats whose opacity can never reach the α threshold.
    pub culled_faint: usize,
}

/// Output of the tiled forward pass plus what its backward needs.
#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// `H·W·3`
    pub image: Vec<T>,
    /// `H·W`, `Σ d_i α_i T_i`
    pub depth: Vec<T>,
    /// `H·W`, `Σ α_i T_i`
    pub weight: Vec<T>,
    pub transmittance: Vec<T>,
    /// Tile-list entries traversed per pixel.
    pub(crate) traversed: Vec<u32>,
    pub splats: Vec<Splat2D<T>>,
    pub(crate) projections: Vec<Projection<T>>,
    pub binning: TileBinning,
    pub stats: RenderStats,
}

/// Gradients of the rasterizer inputs.
#[derive(Clone, Debug)]
pub struct RenderGrads<T> {
    pub mu: Vec<T>,
    pub cov: Vec<T>,
    pub color: Vec<T>,
    pub opacity: Vec<T>,
    /// Norm of the gradient wrt the projected center in NDC units, per point
    /// (zero for points not visible in this view).
    pub viewspace: Vec<T>,
    pub visible: Vec<bool>,
}

pub fn render<T: Real>(inputs: &SplatInputs<'_, T>, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput<T>> {
    inputs.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut stats = RenderStats::default();
    let mut splats = Vec::new();
    let mut projections = Vec::new();
    let mut extents = Vec::new();
    for i in 0..inputs.len() {
        let cov = inputs.cov(i);
        let proj = match project_gaussian(inputs.mu(i), &cov, cam, cfg) {
            Ok(p) => p,
            Err(Cull::BehindNear) => {
                stats.culled_near += 1;
                continue;
            }
            Err(Cull::Singular) => {
                stats.culled_singular += 1;
                continue;
            }
        };
        let opacity = inputs.opacity(i);
        let Some(k) = visibility_radius(opacity.f64(), cfg.alpha_min) else {
            stats.culled_faint += 1;
            continue;
        };
        // Axis-aligned bounds of the ellipse where α can reach alpha_min.
        let k = k * (1.0 + 1e-6) + 1e-9;
        extents.push([k * proj.cov2d[0].f64().sqrt(), k * proj.cov2d[2].f64().sqrt()]);
        splats.push(Splat2D {
            point_id: i,
            mean2d: proj.mean2d,
            cov2d: proj.cov2d,
            conic: proj.conic,
            depth: proj.t[2],
            color: inputs.color(i),
            opacity,
        });
        projections.push(proj);
    }
    stats.visible = splats.len();

    let ts = cfg.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(splats[a].point_id.cmp(&splats[b].point_id))
    });
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &si in &order {
        let s = &splats[si];
        let [ex, ey] = extents[si];
        let (mx, my) = (s.mean2d[0].f64(), s.mean2d[1].f64());
        // pixel i has center i + 0.5
        let x_lo = (mx - ex - 0.5).ceil();
        let x_hi = (mx + ex - 0.5).floor();
        let y_lo = (my - ey - 0.5).ceil();
        let y_hi = (my + ey - 0.5).floor();
        if x_hi < 0.0 || y_hi < 0.0 || x_lo > (w - 1) as f64 || y_lo > (h - 1) as f64 || x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        let tx0 = (x_lo.max(0.0) as usize) / ts;
        let tx1 = (x_hi.min((w - 1) as f64) as usize) / ts;
        let ty0 = (y_lo.max(0.0) as usize) / ts;
        let ty1 = (y_hi.min((h - 1) as f64) as usize) / ts;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    let binning = TileBinning { tile_size: ts, tiles_x, tiles_y, lists };

    let bg = cfg.background.map(T::lit);
    let alpha_max = T::lit(cfg.alpha_max);
    let alpha_min = T::lit(cfg.alpha_min);
    let min_t = T::lit(cfg.min_transmittance);

    struct TileOut<T> {
        rgb: Vec<T>,
        depth: Vec<T>,
        weight: Vec<T>,
        trans: Vec<T>,
        traversed: Vec<u32>,
    }

    let tile_outs: Vec<TileOut<T>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = binning.tile_pixels(tile, w, h);
            let list = &binning.lists[tile];
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOut {
                rgb: Vec::with_capacity(n * 3),
                depth: Vec::with_capacity(n),
                weight: Vec::with_capacity(n),
                trans: Vec::with_capacity(n),
                traversed: Vec::with_capacity(n),
            };
            for py in y0..y1 {
                for px in x0..x1 {
                    let p = [T::lit(px as f64 + 0.5), T::lit(py as f64 + 0.5)];
                    let mut t = T::one();
                    let mut rgb = [T::zero(); 3];
                    let mut depth = T::zero();
                    let mut weight = T::zero();
                    let mut traversed = list.len() as u32;
                    for (k, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let (g, _, _) = splat_gaussian(s, p);
                        let alpha = (s.opacity * g).min(alpha_max);
                        if alpha < alpha_min {
                            continue;
                        }
                        let wgt = alpha * t;
                        for c in 0..3 {
                            rgb[c] += s.color[c] * wgt;
                        }
                        depth += s.depth * wgt;
                        weight += wgt;
                        t *= T::one() - alpha ;
                        if t < min_t {
                            traversed = k as u32 + 1;
                            break;
                        }
                    }
                    for c in 0..3 {
                        out.rgb.push(rgb[c] + t * bg[c]);
                    }
                    out.depth.push(depth);
                    out.weight.push(weight);
                    out.trans.push(t);
                    out.traversed.push(traversed);
                }
            }
            out
        })
        .collect();

    let mut image = vec![T::zero(); w * h * 3];
    let mut depth = vec![T::zero(); w * h];
    let mut weight = vec![T::zero(); w * h];
    let mut transmittance = vec![T::one(); w * h];
    let mut traversed = vec![0u32; w * h];
    for (tile, out) in tile_outs.iter().enumerate() {
        let (x0, y0, x1, y1) = binning.tile_pixels(tile, w, h);
        let mut k = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let pix = py * w + px;
                image[pix * 3..pix * 3 + 3].copy_from_slice(&out.rgb[k * 3..k * 3 + 3]);
                depth[pix] = out.depth[k];
                weight[pix] = out.weight[k];
                transmittance[pix] = out.trans[k];
                traversed[pix] = out.traversed[k];
                k += 1;
            }
        }
    }

    Ok(RenderOutput {
        width: w,
        height: h,
        image,
        depth,
        weight,
        transmittance,
        traversed,
        splats,
        projections,
        binning,
        stats,
    })
}

// du, dv, dA, dB, dC, dopacity, dcolor×3, ddepth
const NG: usize = 10;

/// Backward of [`render`] given upstream gradients on the image (`H·W·3`),
/// depth and weight maps (`H·W`).
pub fn render_backward<T: Real>(
    inputs: &SplatInputs<'_, T>,
    cam: &Camera,
    cfg: &RasterConfig,
    fwd: &RenderOutput<T>,
    g_image: &[T],
    g_depth: &[T],
    g_weight: &[T],
) -> RenderGrads<T> {
    let (w, h) = (fwd.width, fwd.height);
    let bin = &fwd.binning;
    let splats = &fwd.splats;
    let bg = cfg.background.map(T::lit);
    let alpha_max = T::lit(cfg.alpha_max);
    let alpha_min = T::lit(cfg.alpha_min);
    let half = T::lit(0.5);

    let partials: Vec<Vec<[T; NG]>> = (0..bin.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = bin.tile_pixels(tile, w, h);
            let list = &bin.lists[tile];
            let mut acc = vec![[T::zero(); NG]; list.len()];
            // (list slot, alpha, G, clamped, T before, dx, dy)
            let mut contrib: Vec<(usize, T, T, bool, T, T, T)> = Vec::new();
            for py in y0..y1 {
                for px in x0..x1 {
                    let pix = py * w + px;
                    let gc = [g_image[pix * 3], g_image[pix * 3 + 1], g_image[pix * 3 + 2]];
                    let gd = g_depth[pix];
                    let gw = g_weight[pix];
                    if gc.iter().all(|v| *v == T::zero()) && gd == T::zero() && gw == T::zero() {
                        continue;
                    }
                    let p = [T::lit(px as f64 + 0.5), T::lit(py as f64 + 0.5)];
                    contrib.clear();
                    let mut t = T::one();
                    for (k, &si) in list[..fwd.traversed[pix] as usize].iter().enumerate() {
                        let s = &splats[si as usize];
                        let (g, dx, dy) = splat_gaussian(s, p);
                        let raw = s.opacity * g;
                        let alpha = raw.min(alpha_max);
                        if alpha < alpha_min {
                            continue;
                        }
                        contrib.push((k, alpha, g, raw > alpha_max, t, dx, dy));
                        t *= T::one() - alpha ;
                    }
                    let t_final = fwd.transmittance[pix];
                    let mut acc_c = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
                    let mut acc_d = T::zero();
                    let mut acc_w = T::zero();
                    for &(k, alpha, g, clamped, ti, dx, dy) in contrib.iter().rev() {
                        let s = &splats[list[k] as usize];
                        let wgt = alpha * ti;
                        let one_m = T::one() - alpha;
                        let a = &mut acc[k];
                        for c in 0..3 {
                            a[6 + c] += gc[c] * wgt;
                        }
                        a[9] += gd * wgt;
                        let mut dalpha = T::zero();
                        for c in 0..3 {
                            dalpha += gc[c] * (s.color[c] * ti - acc_c[c] / one_m);
                        }
                        dalpha += gd * (s.depth * ti - acc_d / one_m);
                        dalpha += gw * (ti - acc_w / one_m);
                        for c in 0..3 {
                            acc_c[c] += s.color[c] * wgt;
                        }
                        acc_d += s.depth * wgt;
                        acc_w += wgt;
                        if clamped {
                            continue;
                        }
                        a[5] += dalpha * g;
                        let dpower = dalpha * s.opacity * g;
                        let [ca, cb, cc] = s.conic;
                        a[0] += dpower * (ca * dx + cb * dy);
                        a[1] += dpower * (cb * dx + cc * dy);
                        a[2] += dpower * (-half * dx * dx);
                        a[3] += dpower * (-dx * dy);
                        a[4] += dpower * (-half * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut per_splat = vec![[T::zero(); NG]; splats.len()];
    for (tile, part) in partials.iter().enumerate() {
        for (slot, &si) in bin.lists[tile].iter().enumerate() {
            let dst = &mut per_splat[si as usize];
            for (d, &v) in dst.iter_mut().zip(&part[slot]) {
                *d += v;
            }
        }
    }

    let m = inputs.len();
    let mut grads = RenderGrads {
        mu: vec![T::zero(); m * 3],
        cov: vec![T::zero(); m * 6],
        color: vec![T::zero(); m * 3],
        opacity: vec![T::zero(); m],
        viewspace: vec![T::zero(); m],
        visible: vec![false; m],
    };
    let half_w = T::lit(w as f64 / 2.0);
    let half_h = T::lit(h as f64 / 2.0);
    for (si, s) in splats.iter().enumerate() {
        let g = &per_splat[si];
        let i = s.point_id;
        let cov = inputs.cov(i);
        let (g_mu, g_cov) =
            project_backward(&cov, cam, &fwd.projections[si], [g[0], g[1]], [g[2], g[3], g[4]], g[9]);
        grads.mu[i * 3..i * 3 + 3].copy_from_slice(&g_mu);
        grads.cov[i * 6..i * 6 + 6].copy_from_slice(&g_cov);
        grads.color[i * 3..i * 3 + 3].copy_from_slice(&g[6..9]);
        grads.opacity[i] = g[5];
        let (nu, nv) = (g[0] * half_w, g[1] * half_h);
        grads.viewspace[i] = (nu * nu + nv * nv).sqrt();
        grads.visible[i] = true;
    }
    grads
}
