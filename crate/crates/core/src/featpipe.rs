//! Multi-scale image features sampled at 3D points and fused across views.
//!
//! Each input view goes through a small convolutional encoder producing maps
//! at full, half and quarter resolution (8, 16 and 32 channels). A point is
//! projected into every view, the maps are sampled bilinearly, and the
//! per-view 56-dim samples are fused by element-wise variance (or mean, as an
//! ablation) over the views that actually see the point.

use std::rc::Rc;

use rand::Rng;

use crate::diffcore::nn::Linear;
use crate::diffcore::{concat_cols, Bound, CustomOp, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{Camera, FEATURE_DIM};

pub const LEVEL_CHANNELS: [usize; 3] = [8, 16, 32];
pub const LEVEL_STRIDES: [usize; 3] = [1, 2, 4];

/// Output rows that are fixed weighted sums of input rows. Used for average
/// pooling and bilinear sampling.
#[derive(Clone, Debug)]
pub struct RowMix {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl<T: Real> CustomOp<T> for RowMix {
    fn name(&self) -> &str {
        "row_mix"
    }

    fn grad_arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let x = inputs[0];
        if x.ndim() != 2 || x.rows() != self.n_in {
            return Err(Error::Shape(format!("row_mix expects [{}, C], got {:?}", self.n_in, x.shape())));
        }
        let c = x.cols();
        let mut out = vec![T::zero(); self.rows.len() * c];
        for (r, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[r * c..(r + 1) * c];
            for &(i, w) in taps {
                let w = T::lit(w);
                for (d, &v) in dst.iter_mut().zip(x.row(i)) {
                    *d += w * v;
                }
            }
        }
        Tensor::new(&[self.rows.len(), c], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let c = inputs[0].cols();
        for (r, taps) in self.rows.iter().enumerate() {
            let g = &grad.data()[r * c..(r + 1) * c];
            for &(i, w) in taps {
                let w = T::lit(w);
                for (d, &v) in gx.row_mut(i).iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

fn avg_pool(h: usize, w: usize, k: usize) -> RowMix {
    let (ho, wo) = (h / k, w / k);
    let wt = 1.0 / (k * k) as f64;
    let rows = (0..ho * wo)
        .map(|p| {
            let (y, x) = (p / wo, p % wo);
            let mut taps = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    taps.push(((y * k + dy) * w + x * k + dx, wt));
                }
            }
            taps
        })
        .collect();
    RowMix { n_in: h * w, rows }
}

/// 3×3 neighborhood indices with replicate padding, row-major by tap.
fn im2col_index(h: usize, w: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(h * w * 9);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    idx.push(yy * w + xx);
                }
            }
        }
    }
    Rc::new(idx)
}

fn conv3x3<'t, T: Real>(
    p: &Bound<'t, T>,
    layer: &Linear,
    x: Var<'t, T>,
    idx: &Rc<Vec<usize>>,
) -> Result<Var<'t, T>> {
    let (n, c) = (x.value().rows(), x.value().cols());
    let cols = x.gather_rows(idx.clone())?.reshape(&[n, 9 * c])?;
    layer.forward(p, cols)
}

/// Per level: average-pool to the level resolution, then conv3×3, ReLU,
/// conv3×3.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub levels: Vec<[Linear; 2]>,
}

impl FeatureEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let levels = LEVEL_CHANNELS
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                [
                    Linear::new(store, &format!("encoder.{l}.conv0"), 27, c, true, rng),
                    Linear::new(store, &format!("encoder.{l}.conv1"), 9 * c, c, false, rng),
                ]
            })
            .collect();
        FeatureEncoder { levels }
    }

    /// `image` is `[H, W, 3]`; returns maps shaped `[H/k · W/k, C_k]`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        image: Var<'t, T>,
    ) -> Result<[Var<'t, T>; 3]> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Shape(format!("encoder expects an [H, W, 3] image, got {shape:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        check_divisible(h, w)?;
        let flat = image.reshape(&[h * w, 3])?;
        let tape = image.tape();
        let mut maps = Vec::with_capacity(3);
        for (l, &k) in LEVEL_STRIDES.iter().enumerate() {
            let (hk, wk) = (h / k, w / k);
            let pooled = if k == 1 { flat } else { tape.custom(Rc::new(avg_pool(h, w, k)), &[flat])? };
            let idx = im2col_index(hk, wk);
            let [c0, c1] = &self.levels[l];
            let hid = conv3x3(p, c0, pooled, &idx)?.relu()?;
            maps.push(conv3x3(p, c1, hid, &idx)?);
        }
        Ok([maps[0], maps[1], maps[2]])
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "feature pyramid needs image height and width divisible by 4, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Concrete feature maps of one view, each `[H/k, W/k, C_k]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub height: usize,
    pub width: usize,
    pub maps: [Tensor<T>; 3],
}

pub fn build_pyramid<T: Real>(
    encoder: &FeatureEncoder,
    store: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<FeaturePyramid<T>> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let maps = encoder.forward(&p, tape.constant(image.clone()))?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = Vec::with_capacity(3);
    for (l, m) in maps.iter().enumerate() {
        let k = LEVEL_STRIDES[l];
        out.push((*m.value()).clone().reshape(&[h / k, w / k, LEVEL_CHANNELS[l]])?);
    }
    let [a, b, c]: [Tensor<T>; 3] = out.try_into().expect("three levels");
    Ok(FeaturePyramid { height: h, width: w, maps: [a, b, c] })
}

/// Bilinear taps into a `w × h` map at continuous level coordinates, with
/// pixel `i` centered at `i + 0.5` and edges clamped.
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Vec<(usize, f64)> {
    let (lx, ly) = (x - 0.5, y - 0.5);
    let (x0, y0) = (lx.floor(), ly.floor());
    let (fx, fy) = (lx - x0, ly - y0);
    let cx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
    let cy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
    let mut taps = Vec::with_capacity(4);
    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
            let wt = wx * wy;
            if wt != 0.0 {
                taps.push((cy(yy) * w + cx(xx), wt));
            }
        }
    }
    taps
}

/// Where every point lands in one view's pyramid.
#[derive(Clone, Debug)]
pub struct ViewSamples {
    pub levels: Vec<RowMix>,
    pub in_view: Vec<bool>,
}

impl ViewSamples {
    pub fn new(cam: &Camera, points: &[[f64; 3]], near: f64) -> Result<Self> {
        check_divisible(cam.height, cam.width)?;
        let proj: Vec<Option<(f64, f64)>> = points
            .iter()
            .map(|&x| {
                let (u, v, _) = cam.project(x, near)?;
                let inside = u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64;
                inside.then_some((u, v))
            })
            .collect();
        let levels = LEVEL_STRIDES
            .iter()
            .map(|&k| {
                let (wk, hk) = (cam.width / k, cam.height / k);
                let k = k as f64;
                RowMix {
                    n_in: wk * hk,
                    rows: proj
                        .iter()
                        .map(|p| p.map_or_else(Vec::new, |(u, v)| bilinear_taps(u / k, v / k, wk, hk)))
                        .collect(),
                }
            })
            .collect();
        Ok(ViewSamples { levels, in_view: proj.iter().map(Option::is_some).collect() })
    }

    /// `[M, 56]` samples on the tape; out-of-view rows are zero.
    pub fn sample<'t, T: Real>(&self, maps: &[Var<'t, T>; 3]) -> Result<Var<'t, T>> {
        let tape = maps[0].tape();
        let parts = maps
            .iter()
            .zip(&self.levels)
            .map(|(m, mix)| tape.custom(Rc::new(mix.clone()), &[*m]))
            .collect::<Result<Vec<_>>>()?;
        concat_cols(&parts)
    }
}

/// Feature of one point in one view and whether the view sees it.
pub fn sample_point_feature<T: Real>(
    pyramid: &FeaturePyramid<T>,
    x: [f64; 3],
    cam: &Camera,
    near: f64,
) -> (Vec<T>, bool) {
    let Some((u, v, _)) = cam.project(x, near) else {
        return (vec![T::zero(); FEATURE_DIM], false);
    };
    if !(u >= 0.0 && v >= 0.0 && u < pyramid.width as f64 && v < pyramid.height as f64) {
        return (vec![T::zero(); FEATURE_DIM], false);
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for (l, map) in pyramid.maps.iter().enumerate() {
        let k = LEVEL_STRIDES[l] as f64;
        let (hk, wk, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let mut acc = vec![T::zero(); c];
        for (i, w) in bilinear_taps(u / k, v / k, wk, hk) {
            for (a, &m) in acc.iter_mut().zip(&map.data()[i * c..(i + 1) * c]) {
                *a += T::lit(w) * m;
            }
        }
        out.extend(acc);
    }
    (out, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Variance,
    Mean,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Fusion::Variance),
            "mean" => Ok(Fusion::Mean),
            _ => Err(Error::Config(format!("unknown fusion '{s}', expected variance or mean"))),
        }
    }
}

fn fuse_row<T: Real>(mode: Fusion, samples: &[&[T]], flags: &[bool], out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    let seen: Vec<&[T]> = samples.iter().zip(flags).filter(|(_, f)| **f).map(|(s, _)| *s).collect();
    let Some(first) = seen.first() else {
        return;
    };
    // work with offsets from the first sample so identical views fuse to
    // exactly their value and exactly zero variance
    let inv = T::one() / T::lit(seen.len() as f64);
    let mut shift = vec![T::zero(); out.len()];
    for s in &seen {
        for ((m, &v), &f) in shift.iter_mut().zip(s.iter()).zip(first.iter()) {
            *m += (v - f) * inv;
        }
    }
    match mode {
        Fusion::Mean => {
            for ((o, &f), &m) in out.iter_mut().zip(first.iter()).zip(&shift) {
                *o = f + m;
            }
        }
        Fusion::Variance => {
            for s in &seen {
                for (((o, &v), &f), &m) in out.iter_mut().zip(s.iter()).zip(first.iter()).zip(&shift) {
                    let d = v - f - m;
                    *o += d * d * inv;
                }
            }
        }
    }
}

/// Population variance over the in-view samples; zero if no view sees it.
pub fn fuse_variance<T: Real>(samples: &[Vec<T>], flags: &[bool]) -> Vec<T> {
    let refs: Vec<&[T]> = samples.iter().map(|s| s.as_slice()).collect();
    let mut out = vec![T::zero(); samples.first().map_or(0, |s| s.len())];
    fuse_row(Fusion::Variance, &refs, flags, &mut out);
    out
}

/// Mean over the in-view samples; zero if no view sees it.
pub fn fuse_mean<T: Real>(samples: &[Vec<T>], flags: &[bool]) -> Vec<T> {
    let refs: Vec<&[T]> = samples.iter().map(|s| s.as_slice()).collect();
    let mut out = vec![T::zero(); samples.first().map_or(0, |s| s.len())];
    fuse_row(Fusion::Mean, &refs, flags, &mut out);
    out
}

/// Fuses `N` per-view `[M, C]` sample tensors into `[M, C]`.
pub struct FuseOp {
    pub mode: Fusion,
    /// `flags[view][point]`
    pub flags: Vec<Vec<bool>>,
}

impl FuseOp {
    fn point_flags(&self, j: usize) -> Vec<bool> {
        self.flags.iter().map(|f| f[j]).collect()
    }
}

impl<T: Real> CustomOp<T> for FuseOp {
    fn name(&self) -> &str {
        "fuse_views"
    }

    fn grad_arity(&self) -> usize {
        self.flags.len()
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = inputs.first().ok_or_else(|| Error::Shape("fusion needs at least one view".into()))?;
        let (m, c) = (first.rows(), first.cols());
        if inputs.iter().any(|t| t.shape() != first.shape()) || self.flags.iter().any(|f| f.len() != m) {
            return Err(Error::Shape("fusion inputs and visibility flags must share [M, C]".into()));
        }
        let mut out = vec![T::zero(); m * c];
        for j in 0..m {
            let rows: Vec<&[T]> = inputs.iter().map(|t| t.row(j)).collect();
            fuse_row(self.mode, &rows, &self.point_flags(j), &mut out[j * c..(j + 1) * c]);
        }
        Tensor::new(&[m, c], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (m, c) = (inputs[0].rows(), inputs[0].cols());
        let mut grads: Vec<Tensor<T>> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut mean = vec![T::zero(); c];
        for j in 0..m {
            let flags = self.point_flags(j);
            let n = flags.iter().filter(|f| **f).count();
            if n == 0 {
                continue;
            }
            let inv = T::one() / T::lit(n as f64);
            let rows: Vec<&[T]> = inputs.iter().map(|t| t.row(j)).collect();
            fuse_row(Fusion::Mean, &rows, &flags, &mut mean);
            let g = grad.row(j);
            for (v, gv) in grads.iter_mut().enumerate() {
                if !flags[v] {
                    continue;
                }
                let dst = gv.row_mut(j);
                for ch in 0..c {
                    dst[ch] = match self.mode {
                        Fusion::Mean => g[ch] * inv,
                        // the mean's own dependence cancels: Σ (f_i - mean) = 0
                        Fusion::Variance => T::lit(2.0) * (rows[v][ch] - mean[ch]) * inv * g[ch],
                    };
                }
            }
        }
        Ok(grads.into_iter().map(Some).collect())
    }
}

/// Fused point features from a fixed set of posed input views.
pub struct MultiViewFeatures<T: Real> {
    pub encoder: FeatureEncoder,
    pub images: Vec<Tensor<T>>,
    pub cameras: Vec<Camera>,
    pub fusion: Fusion,
    pub near: f64,
    plans: Vec<ViewSamples>,
}

impl<T: Real> MultiViewFeatures<T> {
    pub fn new(
        encoder: FeatureEncoder,
        images: Vec<Tensor<T>>,
        cameras: Vec<Camera>,
        fusion: Fusion,
        near: f64,
    ) -> Result<Self> {
        if images.is_empty() || images.len() != cameras.len() {
            return Err(Error::Shape(format!(
                "need one image per camera and at least one view, got {} images and {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        for (img, cam) in images.iter().zip(&cameras) {
            if img.shape() != [cam.height, cam.width, 3] {
                return Err(Error::Shape(format!(
                    "image {:?} does not match camera {} ({}x{})",
                    img.shape(),
                    cam.id,
                    cam.width,
                    cam.height
                )));
            }
        }
        Ok(MultiViewFeatures { encoder, images, cameras, fusion, near, plans: Vec::new() })
    }

    /// Recomputes the sampling plans for new point positions.
    pub fn set_points(&mut self, points: &[[f64; 3]]) -> Result<()> {
        self.plans =
            self.cameras.iter().map(|c| ViewSamples::new(c, points, self.near)).collect::<Result<_>>()?;
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.plans.first().map_or(0, |p| p.in_view.len())
    }

    /// Number of views that see each point.
    pub fn view_counts(&self) -> Vec<usize> {
        (0..self.num_points()).map(|j| self.plans.iter().filter(|p| p.in_view[j]).count()).collect()
    }

    /// Fused `[M, 56]` features on the tape, differentiable wrt the encoder.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        if self.plans.is_empty() {
            return Err(Error::Shape("feature sampling plans not set; call set_points first".into()));
        }
        let mut samples = Vec::with_capacity(self.images.len());
        for (img, plan) in self.images.iter().zip(&self.plans) {
            let maps = self.encoder.forward(p, tape.constant(img.clone()))?;
            samples.push(plan.sample(&maps)?);
        }
        let op = FuseOp { mode: self.fusion, flags: self.plans.iter().map(|p| p.in_view.clone()).collect() };
        tape.custom(Rc::new(op), &samples)
    }

    /// One-shot evaluation outside any training tape.
    pub fn compute(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        Ok((*self.forward(&tape, &p)?.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, FdOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_cam(w: usize, h: usize) -> Camera {
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Camera::new(0, w, h, w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0, r, [0.0; 3]).unwrap()
    }

    /// World point that projects to pixel coordinate (u, v) at depth 1.
    fn point_at(cam: &Camera, u: f64, v: f64) -> [f64; 3] {
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0]
    }

    fn encoder() -> (FeatureEncoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (FeatureEncoder::new(&mut store, &mut rng), store)
    }

    #[test]
    fn pyramid_shapes() {
        let (enc, store) = encoder();
        let img = Tensor::<f64>::full(&[64, 64, 3], 0.3);
        let pyr = build_pyramid(&enc, &store, &img).unwrap();
        assert_eq!(pyr.maps[0].shape(), [64, 64, 8]);
        assert_eq!(pyr.maps[1].shape(), [32, 32, 16]);
        assert_eq!(pyr.maps[2].shape(), [16, 16, 32]);
    }

    #[test]
    fn constant_image_gives_constant_maps() {
        let (enc, store) = encoder();
        let img = Tensor::<f64>::full(&[16, 12, 3], 0.5);
        let pyr = build_pyramid(&enc, &store, &img).unwrap();
        for m in &pyr.maps {
            let c = m.cols();
            for r in 0..m.rows() {
                for ch in 0..c {
                    assert!((m.row(r)[ch] - m.row(0)[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let (enc, store) = encoder();
        let err = build_pyramid(&enc, &store, &Tensor::<f64>::zeros(&[10, 8, 3])).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"));
    }

    fn constant_pyramid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeaturePyramid<f64> {
        let maps: Vec<Tensor<f64>> = LEVEL_STRIDES
            .iter()
            .zip(LEVEL_CHANNELS)
            .map(|(&k, c)| {
                let (hk, wk) = (h / k, w / k);
                let mut d = Vec::new();
                for y in 0..hk {
                    for x in 0..wk {
                        d.extend(std::iter::repeat_n(f(x, y), c));
                    }
                }
                Tensor::new(&[hk, wk, c], d).unwrap()
            })
            .collect();
        let [a, b, c]: [Tensor<f64>; 3] = maps.try_into().unwrap();
        FeaturePyramid { height: h, width: w, maps: [a, b, c] }
    }

    #[test]
    fn sampling_examples() {
        let cam = axis_cam(16, 16);
        let pyr = constant_pyramid(16, 16, |_, _| 0.7);
        let (f, seen) = sample_point_feature(&pyr, point_at(&cam, 4.5, 6.5), &cam, 0.01);
        assert!(seen);
        assert_eq!(f.len(), 56);
        assert!(f.iter().all(|v| (v - 0.7).abs() < 1e-12));

        // level 0: pixels x=4 and x=5 hold 4 and 5; midpoint of their centers
        let ramp = constant_pyramid(16, 16, |x, _| x as f64);
        let (f, _) = sample_point_feature(&ramp, point_at(&cam, 5.0, 6.5), &cam, 0.01);
        assert!((f[0] - 4.5).abs() < 1e-12);

        let (f, seen) = sample_point_feature(&pyr, [0.0, 0.0, -1.0], &cam, 0.01);
        assert!(!seen && f.iter().all(|v| *v == 0.0));
        let (_, seen) = sample_point_feature(&pyr, point_at(&cam, 17.0, 3.0), &cam, 0.01);
        assert!(!seen);
    }

    #[test]
    fn plan_matches_direct_sampling() {
        let (enc, store) = encoder();
        let cam = axis_cam(16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::new(&[12, 16, 3], (0..12 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let pts: Vec<[f64; 3]> = (0..10)
            .map(|_| point_at(&cam, rng.random_range(-2.0..18.0), rng.random_range(0.0..12.0)))
            .collect();
        let pyr = build_pyramid(&enc, &store, &img).unwrap();
        let plan = ViewSamples::new(&cam, &pts, 0.01).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let maps = enc.forward(&p, tape.constant(img)).unwrap();
        let s = plan.sample(&maps).unwrap();
        for (j, x) in pts.iter().enumerate() {
            let (f, seen) = sample_point_feature(&pyr, *x, &cam, 0.01);
            assert_eq!(seen, plan.in_view[j]);
            for (a, b) in f.iter().zip(s.value().row(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let same = vec![vec![0.3, 1.0]; 4];
        assert_eq!(fuse_variance(&same, &[true; 4]), vec![0.0, 0.0]);
        // naive mean-then-deviation leaves ~1e-34 here
        let thirds = vec![vec![0.1, 1.0 / 3.0, 7e5 + 0.7]; 3];
        assert_eq!(fuse_variance(&thirds, &[true; 3]), vec![0.0; 3]);
        assert_eq!(fuse_mean(&thirds, &[true; 3]), thirds[0]);
        assert_eq!(fuse_variance(&[vec![0.0], vec![2.0]], &[true, true]), vec![1.0]);
        assert_eq!(fuse_mean(&[vec![0.0], vec![2.0]], &[true, true]), vec![1.0]);
        assert_eq!(fuse_mean(&[vec![0.25, 3.0]], &[true]), vec![0.25, 3.0]);
        assert_eq!(fuse_variance(&[vec![5.0], vec![1.0]], &[false, false]), vec![0.0]);
        // an out-of-view sample does not change the result
        let a = fuse_variance(&[vec![0.0], vec![2.0]], &[true, true]);
        let b = fuse_variance(&[vec![0.0], vec![2.0], vec![100.0]], &[true, true, false]);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn fusion_is_view_permutation_invariant(
            rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 4), any::<bool>()), 1..6),
            seed in any::<u64>(),
        ) {
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let (s, f): (Vec<Vec<f64>>, Vec<bool>) = rows.iter().cloned().unzip();
            let ps: Vec<Vec<f64>> = perm.iter().map(|&i| s[i].clone()).collect();
            let pf: Vec<bool> = perm.iter().map(|&i| f[i]).collect();
            let (v0, v1) = (fuse_variance(&s, &f), fuse_variance(&ps, &pf));
            let (m0, m1) = (fuse_mean(&s, &f), fuse_mean(&ps, &pf));
            for k in 0..4 {
                prop_assert!(v0[k] >= 0.0);
                prop_assert!((v0[k] - v1[k]).abs() < 1e-12);
                prop_assert!((m0[k] - m1[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_gradient_on_toy_image() {
        let (enc, store) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::new(&[8, 8, 3], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let ids = store.ids();
        let mut inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| store.get(i).clone()).collect();
        inputs.push(img);
        let flags = vec![true; inputs.len()];
        let n = ids.len();
        let r = check_gradients(
            "encoder",
            &inputs,
            &flags,
            |_tape, v| {
                let p = Bound::from_vars(v[..n].to_vec());
                let maps = enc.forward(&p, v[n])?;
                let a = maps[0].square()?.mean()?;
                let b = maps[1].mean()?;
                let c = maps[2].square()?.mean()?;
                a.add(b)?.add(c)
            },
            FdOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn fused_gradient_two_views_three_points() {
        let (enc, store) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cams = vec![
            Camera::look_at(0, [0.3, 0.0, -2.0], [0.0; 3], (8, 8), 8.0).unwrap(),
            Camera::look_at(1, [-0.3, 0.1, -2.0], [0.0; 3], (8, 8), 8.0).unwrap(),
        ];
        let imgs: Vec<Tensor<f64>> = (0..2)
            .map(|_| Tensor::new(&[8, 8, 3], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let pts = [[0.05, 0.02, 0.0], [-0.1, 0.07, 0.1], [0.12, -0.08, -0.05]];
        for fusion in [Fusion::Variance, Fusion::Mean] {
            let mut mv = MultiViewFeatures::new(enc.clone(), imgs.clone(), cams.clone(), fusion, 0.01).unwrap();
            mv.set_points(&pts).unwrap();
            assert_eq!(mv.view_counts(), vec![2, 2, 2]);
            let ids = store.ids();
            let inputs: Vec<Tensor<f64>> = ids.iter().map(|&i| store.get(i).clone()).collect();
            let r = check_gradients(
                "fused features",
                &inputs,
                &vec![true; inputs.len()],
                |_tape, v| {
                    let p = Bound::from_vars(v.to_vec());
                    mv.forward(v[0].tape(), &p)?.sum()
                },
                FdOptions::default(),
            )
            .unwrap();
            assert!(r.passed(), "{fusion:?}: {r}");
        }
    }
}
