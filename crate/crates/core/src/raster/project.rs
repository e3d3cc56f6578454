use crate::diffcore::Real;
use crate::scene::{Camera, Sym3};

use super::RasterConfig;

/// A Gaussian projected onto the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D<T> {
    pub point_id: usize,
    /// Pixel coordinates of the projected center.
    pub mean2d: [T; 2],
    /// Dilated image-space covariance `[xx, xy, yy]`.
    pub cov2d: [T; 3],
    /// Inverse of `cov2d`, `[xx, xy, yy]`.
    pub conic: [T; 3],
    /// Camera-space z.
    pub depth: T,
    pub color: [T; 3],
    pub opacity: T,
}

/// Projection result before color/opacity are attached, plus what the
/// backward pass needs.
#[derive(Clone, Copy, Debug)]
pub struct Projection<T> {
    pub mean2d: [T; 2],
    pub cov2d: [T; 3],
    pub conic: [T; 3],
    /// Camera-space center.
    pub t: [T; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cull {
    BehindNear,
    Singular,
}

pub(crate) fn cam_rot<T: Real>(cam: &Camera) -> [[T; 3]; 3] {
    cam.rot.map(|r| r.map(T::lit))
}

/// Perspective Jacobian of `(u, v)` with respect to camera-space `t`.
pub(crate) fn jacobian<T: Real>(cam: &Camera, t: [T; 3]) -> [[T; 3]; 2] {
    let fx = T::lit(cam.fx);
    let fy = T::lit(cam.fy);
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    [[fx * iz, T::zero(), -fx * t[0] * iz2], [T::zero(), fy * iz, -fy * t[1] * iz2]]
}

/// `Σ' = J W Σ Wᵀ Jᵀ + dilation·I` and the pinhole projection of `μ`.
pub fn project_gaussian<T: Real>(
    mu: [T; 3],
    cov: &Sym3<T>,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<Projection<T>, Cull> {
    let r = cam_rot::<T>(cam);
    let tr = cam.trans.map(T::lit);
    let mut t = [T::zero(); 3];
    for i in 0..3 {
        t[i] = r[i][0] * mu[0] + r[i][1] * mu[1] + r[i][2] * mu[2] + tr[i];
    }
    if t[2].f64() <= cfg.near {
        return Err(Cull::BehindNear);
    }
    let j = jacobian(cam, t);
    // M = J R, 2×3
    let mut m = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            m[a][k] = j[a][0] * r[0][k] + j[a][1] * r[1][k] + j[a][2] * r[2][k];
        }
    }
    let s = crate::scene::sym3_full(cov);
    // M Σ Mᵀ
    let mut ms = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for k in 0..3 {
            ms[a][k] = m[a][0] * s[0][k] + m[a][1] * s[1][k] + m[a][2] * s[2][k];
        }
    }
    let dot = |a: usize, b: usize| ms[a][0] * m[b][0] + ms[a][1] * m[b][1] + ms[a][2] * m[b][2];
    let dil = T::lit(cfg.dilation);
    let cov2d = [dot(0, 0) + dil, dot(0, 1), dot(1, 1) + dil];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if det.f64() < 1e-12 {
        return Err(Cull::Singular);
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let iz = T::one() / t[2];
    let mean2d = [
        T::lit(cam.fx) * t[0] * iz + T::lit(cam.cx),
        T::lit(cam.fy) * t[1] * iz + T::lit(cam.cy),
    ];
    Ok(Projection { mean2d, cov2d, conic, t })
}

/// Mahalanobis radius beyond which `opacity · G < alpha_min`, or `None` if
/// the splat can never reach `alpha_min`.
pub(crate) fn visibility_radius(opacity: f64, alpha_min: f64) -> Option<f64> {
    let r2 = 2.0 * (opacity / alpha_min).ln();
    (r2 > 0.0).then(|| r2.sqrt())
}

/// Pull gradients on the projected quantities back onto `μ` and `Σ`.
///
/// `g_mean`: dL/d(u, v); `g_conic`: dL/d[A, B, C] of the conic with
/// `power = -½(AΔx² + 2BΔxΔy + CΔy²)`; `g_depth`: dL/dz.
pub(crate) fn project_backward<T: Real>(
    cov: &Sym3<T>,
    cam: &Camera,
    proj: &Projection<T>,
    g_mean: [T; 2],
    g_conic: [T; 3],
    g_depth: T,
) -> ([T; 3], Sym3<T>) {
    let r = cam_rot::<T>(cam);
    let t = proj.t;
    let fx = T::lit(cam.fx);
    let fy = T::lit(cam.fy);
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // conic -> cov2d: dL/dΣ' = -K Gk K
    let k = [[proj.conic[0], proj.conic[1]], [proj.conic[1], proj.conic[2]]];
    let gk = [[g_conic[0], g_conic[1] * half], [g_conic[1] * half, g_conic[2]]];
    let mut kg = [[T::zero(); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            kg[a][b] = k[a][0] * gk[0][b] + k[a][1] * gk[1][b];
        }
    }
    let mut gs = [[T::zero(); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            gs[a][b] = -(kg[a][0] * k[0][b] + kg[a][1] * k[1][b]);
        }
    }

    let j = jacobian(cam, t);
    let mut m = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for c in 0..3 {
            m[a][c] = j[a][0] * r[0][c] + j[a][1] * r[1][c] + j[a][2] * r[2][c];
        }
    }
    let s = crate::scene::sym3_full(cov);

    // dL/dΣ = Mᵀ Gs M
    let mut gsm = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for c in 0..3 {
            gsm[a][c] = gs[a][0] * m[0][c] + gs[a][1] * m[1][c];
        }
    }
    let mut gsig = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for c in 0..3 {
            gsig[i][c] = m[0][i] * gsm[0][c] + m[1][i] * gsm[1][c];
        }
    }
    let g_cov = [
        gsig[0][0],
        gsig[0][1] + gsig[1][0],
        gsig[0][2] + gsig[2][0],
        gsig[1][1],
        gsig[1][2] + gsig[2][1],
        gsig[2][2],
    ];

    // dL/dM = 2 Gs M Σ ; dL/dJ = dL/dM Rᵀ
    let mut gm = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for c in 0..3 {
            gm[a][c] = two * (gsm[a][0] * s[0][c] + gsm[a][1] * s[1][c] + gsm[a][2] * s[2][c]);
        }
    }
    let mut gj = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for c in 0..3 {
            gj[a][c] = gm[a][0] * r[c][0] + gm[a][1] * r[c][1] + gm[a][2] * r[c][2];
        }
    }

    let mut gt = [T::zero(); 3];
    // through J
    gt[0] += gj[0][2] * (-fx * iz2);
    gt[1] += gj[1][2] * (-fy * iz2);
    gt[2] += gj[0][0] * (-fx * iz2)
        + gj[0][2] * (two * fx * t[0] * iz3)
        + gj[1][1] * (-fy * iz2)
        + gj[1][2] * (two * fy * t[1] * iz3);
    // through the projected mean
    gt[0] += g_mean[0] * fx * iz;
    gt[1] += g_mean[1] * fy * iz;
    gt[2] += -g_mean[0] * fx * t[0] * iz2 - g_mean[1] * fy * t[1] * iz2;
    gt[2] += g_depth;

    let mut g_mu = [T::zero(); 3];
    for c in 0..3 {
        g_mu[c] = r[0][c] * gt[0] + r[1][c] * gt[1] + r[2][c] * gt[2];
    }
    (g_mu, g_cov)
}
