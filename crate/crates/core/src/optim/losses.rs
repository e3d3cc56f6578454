//! Color (L1 + SSIM), masked depth, edge-aware smoothness and the weighted
//! total.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{CustomOp, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Depth loss only counts pixels whose accumulated weight exceeds this.
pub const DEPTH_MASK_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub smooth: f64,
    /// Edge-awareness of the gradient term.
    pub alpha1: f64,
    /// Edge-awareness of the Laplacian term.
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 0.8, ssim: 0.2, depth: 0.05, smooth: 0.067, alpha1: 0.5, alpha2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.depth, self.smooth, self.alpha1, self.alpha2];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    /// `L_color + λ3·L_depth + λ4·L_smooth`, with `L_color` already weighted.
    pub fn total(&self, color: f64, depth: f64, smooth: f64) -> f64 {
        color + self.depth * depth + self.smooth * smooth
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "same" Gaussian filter with zero padding over an `[H, W, C]`
/// buffer. The window is symmetric, so this is also its own adjoint.
fn blur<T: Real>(x: &[T], h: usize, w: usize, c: usize, g: &[T]) -> Vec<T> {
    let r = g.len() as isize / 2;
    let mut tmp = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            for k in 0..g.len() {
                let sx = xx as isize + k as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let src = (y * w + sx as usize) * c;
                let dst = (y * w + xx) * c;
                for ch in 0..c {
                    tmp[dst + ch] += g[k] * x[src + ch];
                }
            }
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for k in 0..g.len() {
            let sy = y as isize + k as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let gk = g[k];
            let src = sy as usize * w * c;
            let dst = y * w * c;
            for i in 0..w * c {
                out[dst + i] += gk * tmp[src + i];
            }
        }
    }
    out
}

fn image_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(Error::Shape(format!("image losses need equal [H, W, C] shapes, got {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
}

struct SsimMaps<T> {
    mu_a: Vec<T>,
    mu_b: Vec<T>,
    s: Vec<T>,
    /// ∂S/∂μa, ∂S/∂σa², ∂S/∂σab per pixel
    d_mu: Vec<T>,
    d_var: Vec<T>,
    d_cov: Vec<T>,
}

fn ssim_maps<T: Real>(a: &[T], b: &[T], h: usize, w: usize, c: usize) -> SsimMaps<T> {
    let g: Vec<T> = gaussian_window().into_iter().map(T::lit).collect();
    let sq = |x: &[T], y: &[T]| -> Vec<T> { x.iter().zip(y).map(|(&p, &q)| p * q).collect() };
    let mu_a = blur(a, h, w, c, &g);
    let mu_b = blur(b, h, w, c, &g);
    let e_aa = blur(&sq(a, a), h, w, c, &g);
    let e_bb = blur(&sq(b, b), h, w, c, &g);
    let e_ab = blur(&sq(a, b), h, w, c, &g);
    let (c1, c2, two) = (T::lit(SSIM_C1), T::lit(SSIM_C2), T::lit(2.0));
    let n = a.len();
    let mut s = Vec::with_capacity(n);
    let mut d_mu = Vec::with_capacity(n);
    let mut d_var = Vec::with_capacity(n);
    let mut d_cov = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let n1 = two * ma * mb + c1;
        let n2 = two * cov + c2;
        let d1 = ma * ma + mb * mb + c1;
        let d2 = va + vb + c2;
        let si = n1 * n2 / (d1 * d2);
        s.push(si);
        d_mu.push(two * mb * n2 / (d1 * d2) - si * two * ma / d1);
        d_var.push(-si / d2);
        d_cov.push(two * n1 / (d1 * d2));
    }
    SsimMaps { mu_a, mu_b, s, d_mu, d_var, d_cov }
}

/// Mean SSIM over pixels and channels (11×11 Gaussian window, σ = 1.5,
/// zero padding).
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let (h, w, c) = image_dims(a, b)?;
    let m = ssim_maps(a.data(), b.data(), h, w, c);
    Ok(m.s.iter().copied().sum::<T>() / T::lit(m.s.len() as f64))
}

/// Mean SSIM between the input image and a fixed reference.
pub struct SsimOp<T: Real> {
    pub reference: Rc<Tensor<T>>,
}

impl<T: Real> CustomOp<T> for SsimOp<T> {
    fn name(&self) -> &str {
        "ssim"
    }

    fn grad_arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(ssim(inputs[0], &self.reference)?))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let a = inputs[0].data();
        let b = self.reference.data();
        let (h, w, c) = image_dims(inputs[0], &self.reference)?;
        let m = ssim_maps(a, b, h, w, c);
        let scale = grad.data()[0] / T::lit(a.len() as f64);
        let two = T::lit(2.0);
        let g: Vec<T> = gaussian_window().into_iter().map(T::lit).collect();
        let base: Vec<T> = (0..a.len())
            .map(|i| m.d_mu[i] - two * m.mu_a[i] * m.d_var[i] - m.mu_b[i] * m.d_cov[i])
            .collect();
        let base = blur(&base, h, w, c, &g);
        let var = blur(&m.d_var, h, w, c, &g);
        let cov = blur(&m.d_cov, h, w, c, &g);
        let ga: Vec<T> = (0..a.len()).map(|i| scale * (base[i] + two * a[i] * var[i] + b[i] * cov[i])).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), ga)?)])
    }
}

/// `λ1·mean|r − gt| + λ2·(1 − SSIM(r, gt))`, plus the raw L1 and SSIM
/// values.
pub fn loss_color<'t, T: Real>(
    render: Var<'t, T>,
    gt: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, T, T)> {
    let tape = render.tape();
    if render.shape() != gt.shape() {
        return Err(Error::Shape(format!("render {:?} and target {:?} differ", render.shape(), gt.shape())));
    }
    let l1 = render.sub(tape.constant(gt.clone()))?.abs()?.mean()?;
    let s = tape.custom(Rc::new(SsimOp { reference: Rc::new(gt.clone()) }), &[render])?;
    let (l1v, sv) = (l1.value().data()[0], s.value().data()[0]);
    let loss = l1.mul(weights.l1)?.add(s.mul(-weights.ssim)?.add(weights.ssim)?)?;
    Ok((loss, l1v, sv))
}

/// Mean |D − prior| over pixels whose accumulated weight exceeds
/// [`DEPTH_MASK_WEIGHT`]; zero when no pixel qualifies.
pub fn loss_depth<'t, T: Real>(depth: Var<'t, T>, prior: &Tensor<T>, weight: &Tensor<T>) -> Result<Var<'t, T>> {
    if depth.shape() != prior.shape() || prior.len() != weight.len() {
        return Err(Error::Shape(format!(
            "depth {:?}, prior {:?} and weight {:?} must match",
            depth.shape(),
            prior.shape(),
            weight.shape()
        )));
    }
    let tape = depth.tape();
    let mask: Vec<T> = weight.data().iter().map(|&w| if w.f64() > DEPTH_MASK_WEIGHT { T::one() } else { T::zero() }).collect();
    let count = mask.iter().filter(|m| **m == T::one()).count();
    let mask = tape.constant(Tensor::new(prior.shape(), mask)?);
    let diff = depth.sub(tape.constant(prior.clone()))?.mul(mask)?;
    diff.abs()?.sum()?.mul(1.0 / count.max(1) as f64)
}

pub fn luminance<T: Real>(img: &Tensor<T>) -> Vec<T> {
    img.data()
        .chunks(3)
        .map(|p| T::lit(0.299) * p[0] + T::lit(0.587) * p[1] + T::lit(0.114) * p[2])
        .collect()
}

/// Edge-aware smoothness of an `[H, W]` (or `[H, W, 1]`) depth map against
/// fixed image weights, averaged over interior pixels.
pub struct SmoothOp<T: Real> {
    pub height: usize,
    pub width: usize,
    /// `exp(−α1 |∇I|)` per pixel
    pub edge_grad: Vec<T>,
    /// `exp(−α2 |∇²I|)` per pixel
    pub edge_lap: Vec<T>,
}

impl<T: Real> SmoothOp<T> {
    /// `image` is the `[H, W, 3]` reference view.
    pub fn new(image: &Tensor<T>, alpha1: f64, alpha2: f64) -> Result<Self> {
        if image.ndim() != 3 || image.shape()[2] != 3 {
            return Err(Error::Shape(format!("smoothness reference must be [H, W, 3], got {:?}", image.shape())));
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let lum = luminance(image);
        let mut edge_grad = vec![T::zero(); h * w];
        let mut edge_lap = vec![T::zero(); h * w];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                let (gx, gy, lap) = stencil(&lum, w, i);
                edge_grad[i] = (-T::lit(alpha1) * (gx.abs() + gy.abs())).exp();
                edge_lap[i] = (-T::lit(alpha2) * lap.abs()).exp();
            }
        }
        Ok(SmoothOp { height: h, width: w, edge_grad, edge_lap })
    }

    fn interior(&self) -> usize {
        self.height.saturating_sub(2) * self.width.saturating_sub(2)
    }
}

/// Forward differences along x and y and the 4-neighbor Laplacian at `i`.
fn stencil<T: Real>(d: &[T], w: usize, i: usize) -> (T, T, T) {
    let gx = d[i + 1] - d[i];
    let gy = d[i + w] - d[i];
    let lap = d[i + 1] + d[i - 1] + d[i + w] + d[i - w] - T::lit(4.0) * d[i];
    (gx, gy, lap)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> CustomOp<T> for SmoothOp<T> {
    fn name(&self) -> &str {
        "smoothness"
    }

    fn grad_arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let d = inputs[0].data();
        if d.len() != self.height * self.width {
            return Err(Error::Shape(format!("depth {:?} does not match {}x{}", inputs[0].shape(), self.height, self.width)));
        }
        let n = self.interior();
        if n == 0 {
            return Ok(Tensor::scalar(T::zero()));
        }
        let w = self.width;
        let mut acc = T::zero();
        for y in 1..self.height - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                let (gx, gy, lap) = stencil(d, w, i);
                acc += self.edge_grad[i] * (gx.abs() + gy.abs()) + self.edge_lap[i] * lap.abs();
            }
        }
        Ok(Tensor::scalar(acc / T::lit(n as f64)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let d = inputs[0].data();
        let mut gd = vec![T::zero(); d.len()];
        let n = self.interior();
        if n > 0 {
            let s = grad.data()[0] / T::lit(n as f64);
            let w = self.width;
            let four = T::lit(4.0);
            for y in 1..self.height - 1 {
                for x in 1..w - 1 {
                    let i = y * w + x;
                    let (gx, gy, lap) = stencil(d, w, i);
                    let sx = s * self.edge_grad[i] * sign(gx);
                    let sy = s * self.edge_grad[i] * sign(gy);
                    gd[i + 1] += sx;
                    gd[i] -= sx + sy;
                    gd[i + w] += sy;
                    let sl = s * self.edge_lap[i] * sign(lap);
                    gd[i + 1] += sl;
                    gd[i - 1] += sl;
                    gd[i + w] += sl;
                    gd[i - w] += sl;
                    gd[i] -= four * sl;
                }
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), gd)?)])
    }
}

pub fn loss_smooth<'t, T: Real>(depth: Var<'t, T>, image: &Tensor<T>, weights: &LossWeights) -> Result<Var<'t, T>> {
    let op = SmoothOp::new(image, weights.alpha1, weights.alpha2)?;
    depth.tape().custom(Rc::new(op), &[depth])
}

/// Sub-loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Total loss of one rendered view on the tape.
///
/// `render` is `[H, W, 5]` (rgb, depth, weight) as produced by the render op.
pub fn loss_total<'t, T: Real>(
    render: Var<'t, T>,
    gt: &Tensor<T>,
    prior_depth: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let rgb = render.slice_cols(0, 3)?;
    let depth = render.slice_cols(3, 1)?;
    let weight_map = render.value().data().chunks(5).map(|p| p[4]).collect::<Vec<T>>();
    let weight_map = Tensor::new(&depth.shape(), weight_map)?;
    let prior = prior_depth.clone().reshape(&depth.shape())?;
    let (color, l1, s) = loss_color(rgb, gt, weights)?;
    let ld = loss_depth(depth, &prior, &weight_map)?;
    let ls = loss_smooth(depth, gt, weights)?;
    let total = color.add(ld.mul(weights.depth)?)?.add(ls.mul(weights.smooth)?)?;
    let b = LossBreakdown {
        l1: l1.f64(),
        ssim: s.f64(),
        depth: ld.value().data()[0].f64(),
        smooth: ls.value().data()[0].f64(),
        total: total.value().data()[0].f64(),
    };
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use crate::diffcore::gradcheck::{check_gradients, FdOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Per-window evaluation straight from the SSIM definition.
    fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let g1 = gaussian_window();
        let r = SSIM_WINDOW as isize / 2;
        let mut total = 0.0;
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..c {
                    let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let wt = g1[(dy + r) as usize] * g1[(dx + r) as usize];
                            let i = (yy as usize * w + xx as usize) * c + ch;
                            let (pa, pb) = (a.data()[i], b.data()[i]);
                            ma += wt * pa;
                            mb += wt * pb;
                            eaa += wt * pa * pa;
                            ebb += wt * pb * pb;
                            eab += wt * pa * pb;
                        }
                    }
                    let (va, vb, cv) = (eaa - ma * ma, ebb - mb * mb, eab - ma * mb);
                    total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cv + SSIM_C2)
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                }
            }
        }
        total / (h * w * c) as f64
    }

    #[test]
    fn ssim_examples() {
        let a = rand_img(16, 12, 3, 1);
        let b = rand_img(16, 12, 3, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-6);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn color_loss_examples() {
        let w = LossWeights::default();
        let gt = Rc::new(rand_img(8, 8, 3, 3));
        let tape = Tape::new();
        let (l, _, _) = loss_color(tape.constant((*gt).clone()), &gt, &w).unwrap();
        assert!(l.value().data()[0].abs() < 1e-12);

        let black = Rc::new(Tensor::<f64>::zeros(&[8, 8, 3]));
        let white = tape.constant(Tensor::full(&[8, 8, 3], 1.0));
        let (l, l1, s) = loss_color(white, &black, &w).unwrap();
        assert_eq!(l1, 1.0);
        let want = 0.8 + 0.2 * (1.0 - ssim_direct(&Tensor::full(&[8, 8, 3], 1.0), &black));
        assert!((l.value().data()[0] - want).abs() < 1e-9);
        assert!((s - ssim_direct(&Tensor::full(&[8, 8, 3], 1.0), &black)).abs() < 1e-9);
    }

    #[test]
    fn depth_loss_examples() {
        let tape = Tape::new();
        let prior = rand_img(8, 8, 1, 4);
        let ones = Tensor::full(&[8, 8, 1], 1.0);
        let same = loss_depth(tape.constant(prior.clone()), &prior, &ones).unwrap();
        assert_eq!(same.value().data()[0], 0.0);
        let shifted = loss_depth(tape.constant(prior.map(|v| v + 0.3)), &prior, &ones).unwrap();
        assert!((shifted.value().data()[0] - 0.3).abs() < 1e-12);
        let none = loss_depth(tape.constant(prior.map(|v| v + 0.3)), &prior, &Tensor::zeros(&[8, 8, 1])).unwrap();
        assert_eq!(none.value().data()[0], 0.0);
    }

    #[test]
    fn smooth_loss_examples() {
        let w = LossWeights::default();
        let tape = Tape::new();
        let img = rand_img(8, 8, 3, 5);
        let flat = loss_smooth(tape.constant(Tensor::full(&[8, 8], 2.0)), &img, &w).unwrap();
        assert_eq!(flat.value().data()[0], 0.0);
        let gray = Tensor::full(&[8, 8, 3], 0.4);
        let ramp = Tensor::new(&[8, 8], (0..64).map(|i| 0.25 * (i % 8) as f64).collect()).unwrap();
        let l = loss_smooth(tape.constant(ramp), &gray, &w).unwrap();
        assert!((l.value().data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn total_weight_arithmetic() {
        let w = LossWeights::default();
        assert!((w.total(1.0, 1.0, 1.0) - 1.117).abs() < 1e-12);
        assert_eq!(w.total(0.0, 0.0, 0.0), 0.0);
        let no_depth = LossWeights { depth: 0.0, ..w };
        assert!((no_depth.total(1.0, 1.0, 1.0) - 1.067).abs() < 1e-12);
        let no_smooth = LossWeights { smooth: 0.0, ..w };
        assert!((no_smooth.total(1.0, 1.0, 1.0) - 1.05).abs() < 1e-12);
        assert!(LossWeights { depth: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn loss_gradients() {
        let w = LossWeights::default();
        let gt = Rc::new(rand_img(8, 8, 3, 6));
        let render = rand_img(8, 8, 3, 7);
        let r = check_gradients("loss_color", std::slice::from_ref(&render), &[true], |_t, v| Ok(loss_color(v[0], &gt, &w)?.0), FdOptions::default()).unwrap();
        assert!(r.passed(), "{r}");
        let r = check_gradients(
            "ssim",
            &[render],
            &[true],
            |t, v| t.custom(Rc::new(SsimOp { reference: gt.clone() }), &[v[0]]),
            FdOptions { samples_per_input: 40, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed(), "{r}");

        let prior = rand_img(8, 8, 1, 8);
        let depth = rand_img(8, 8, 1, 9);
        let weight = rand_img(8, 8, 1, 10);
        let r = check_gradients("loss_depth", std::slice::from_ref(&depth), &[true], |_t, v| loss_depth(v[0], &prior, &weight), FdOptions::default()).unwrap();
        assert!(r.passed(), "{r}");
        let img = rand_img(8, 8, 3, 11);
        let r = check_gradients(
            "loss_smooth",
            &[depth],
            &[true],
            |_t, v| loss_smooth(v[0], &img, &w),
            FdOptions { samples_per_input: 40, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn total_loss_gradient_through_render_layout() {
        let w = LossWeights::default();
        let gt = Rc::new(rand_img(8, 8, 3, 12));
        let prior = rand_img(8, 8, 1, 13);
        let mut render = rand_img(8, 8, 5, 14);
        // keep the weight channel away from the mask threshold
        for p in render.data_mut().chunks_mut(5) {
            p[4] = if p[4] > 0.5 { 0.9 } else { 0.1 };
        }
        let r = check_gradients(
            "loss_total",
            &[render],
            &[true],
            |_t, v| Ok(loss_total(v[0], &gt, &prior, &w)?.0),
            FdOptions { samples_per_input: 40, ..Default::default() },
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
