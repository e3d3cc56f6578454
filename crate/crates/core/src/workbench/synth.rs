//! Random ground-truth scenes rendered with the reference renderer.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{logit, softplus_inv, Real, Tensor};
use crate::error::{Error, Result};
use crate::optim::{TrainData, TrainView};
use crate::raster::{render_oracle, RasterConfig, SplatInputs};
use crate::scene::{eval_sh, Camera, GaussianCloud, SH_C0};

const MAX_RIG_RETRIES: usize = 8;
/// Minimum fraction of points every camera must see.
pub const MIN_VISIBLE: f64 = 0.8;

/// Forward-facing arc of cameras looking at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub views: usize,
    pub train_views: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub radius: f64,
    /// Focal length in units of the image side.
    pub focal: f64,
    /// Total azimuth span of the arc.
    pub arc_degrees: f64,
    pub elevation_degrees: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec { views: 12, train_views: 3, size: 64, radius: 2.5, focal: 1.1, arc_degrees: 120.0, elevation_degrees: 20.0 }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 || self.train_views == 0 || self.train_views >= self.views {
            return Err(Error::Config(format!(
                "need at least one training and one held-out view, got {} views with {} for training",
                self.views, self.train_views
            )));
        }
        if self.size < 8 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!("image size must be a multiple of 4 and at least 8, got {}", self.size)));
        }
        if !(self.radius > 1.0 && self.focal > 0.0 && self.arc_degrees >= 0.0 && self.arc_degrees < 360.0) {
            return Err(Error::Config(format!("invalid rig geometry: {self:?}")));
        }
        Ok(())
    }

    pub fn cameras(&self, radius: f64) -> Result<Vec<Camera>> {
        let elev = self.elevation_degrees.to_radians();
        (0..self.views)
            .map(|i| {
                let t = if self.views > 1 { i as f64 / (self.views - 1) as f64 - 0.5 } else { 0.0 };
                let az = (t * self.arc_degrees).to_radians();
                let eye = [radius * elev.cos() * az.sin(), -radius * elev.sin(), -radius * elev.cos() * az.cos()];
                Camera::look_at(i, eye, [0.0; 3], (self.size, self.size), self.focal * self.size as f64)
            })
            .collect()
    }

    /// Training views spread evenly over the arc, including both ends.
    pub fn train_indices(&self) -> Vec<usize> {
        let (n, t) = (self.views, self.train_views);
        if t == 1 {
            return vec![n / 2];
        }
        (0..t).map(|i| ((i * (n - 1)) as f64 / (t - 1) as f64).round() as usize).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Degree-0 SH colors, raw (pre-activation) scale and opacity.
    pub cloud: GaussianCloud<f64>,
    pub cameras: Vec<Camera>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn colors(&self) -> Result<Vec<[f64; 3]>> {
        let sh = self.cloud.sh.as_ref().ok_or_else(|| Error::Scene("ground truth needs SH colors".into()))?;
        (0..self.cloud.len()).map(|i| eval_sh(sh.row(i), [0.0, 0.0, 1.0], 0)).collect()
    }

    pub fn opacities(&self) -> Vec<f64> {
        match &self.cloud.raw_opacity {
            Some(o) => o.data().iter().map(|&x| crate::diffcore::sigmoid(x)).collect(),
            None => vec![1.0; self.cloud.len()],
        }
    }

    /// Reference render of `cam`: `[H, W, 3]` image and `[H, W]` composited
    /// depth.
    pub fn render(&self, cam: &Camera) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let m = self.cloud.len();
        let cov = self.cloud.covariances()?;
        let color = Tensor::new(&[m, 3], self.colors()?.into_iter().flatten().collect())?;
        let opacity = Tensor::new(&[m, 1], self.opacities())?;
        let inputs = SplatInputs { mu: &self.cloud.mu, cov: &cov, color: &color, opacity: &opacity };
        let out = render_oracle(&inputs, cam, &RasterConfig::default())?;
        let (h, w) = (cam.height, cam.width);
        Ok((Tensor::new(&[h, w, 3], out.image)?, Tensor::new(&[h, w], out.depth)?))
    }

    pub fn visible_fraction(&self, cam: &Camera) -> f64 {
        let near = RasterConfig::default().near;
        let seen = (0..self.cloud.len()).filter(|&i| cam.in_frustum(self.cloud.center(i), near)).count();
        seen as f64 / self.cloud.len().max(1) as f64
    }
}

/// A rendered view: `[H, W, 3]` image in [0, 1] and `[H, W]` depth prior.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Tensor<f64>,
    pub depth: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub init_points: Vec<[f64; 3]>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.views.len();
        if self.train.is_empty() || self.train.iter().chain(&self.test).any(|&i| i >= n) {
            return Err(Error::Scene(format!("bad split: train {:?}, test {:?} over {n} views", self.train, self.test)));
        }
        if self.train.iter().any(|i| self.test.contains(i)) {
            return Err(Error::Scene("train and test views overlap".into()));
        }
        let c0 = &self.views[0].camera;
        for v in &self.views {
            let c = &v.camera;
            if (c.width, c.height, c.fx, c.fy, c.cx, c.cy) != (c0.width, c0.height, c0.fx, c0.fy, c0.cx, c0.cy) {
                return Err(Error::Camera { id: c.id, msg: "all views must share intrinsics".into() });
            }
        }
        Ok(())
    }

    pub fn train_data<T: Real>(&self) -> TrainData<T> {
        TrainData {
            views: self
                .train
                .iter()
                .map(|&i| {
                    let v = &self.views[i];
                    TrainView { camera: v.camera.clone(), image: v.image.cast(), depth: v.depth.cast() }
                })
                .collect(),
            init_points: self.init_points.clone(),
        }
    }
}

fn random_unit_quat<R: Rng>(rng: &mut R) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return q.map(|v| v / n);
        }
    }
}

/// Sample a ground-truth scene in the unit box, render every view and derive
/// a jittered, subsampled initialization cloud.
pub fn gen_scene(seed: u64, n_gaussians: usize, rig: &RigSpec) -> Result<(SyntheticScene, SceneDataset)> {
    if n_gaussians == 0 {
        return Err(Error::Config("need at least one Gaussian".into()));
    }
    rig.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n_gaussians;
    let mut mu = Vec::with_capacity(m * 3);
    let mut raw_scale = Vec::with_capacity(m * 3);
    let mut raw_quat = Vec::with_capacity(m * 4);
    let mut sh = Vec::with_capacity(m * 3);
    let mut raw_opacity = Vec::with_capacity(m);
    for _ in 0..m {
        mu.extend((0..3).map(|_| rng.random_range(-0.5..0.5)));
        raw_scale.extend((0..3).map(|_| softplus_inv(rng.random_range(0.01..0.1))));
        raw_quat.extend(random_unit_quat(&mut rng));
        sh.extend((0..3).map(|_| (rng.random_range(0.0..1.0) - 0.5) / SH_C0));
        raw_opacity.push(logit(rng.random_range(0.5..0.99)));
    }
    let cloud = GaussianCloud {
        mu: Tensor::new(&[m, 3], mu)?,
        raw_scale: Tensor::new(&[m, 3], raw_scale)?,
        raw_quat: Tensor::new(&[m, 4], raw_quat)?,
        feat: None,
        feat_enh: None,
        sh: Some(Tensor::new(&[m, 3], sh)?),
        sh_degree: 0,
        raw_opacity: Some(Tensor::new(&[m, 1], raw_opacity)?),
    };
    cloud.validate()?;

    let mut scene = SyntheticScene { cloud, cameras: Vec::new(), seed };
    let mut radius = rig.radius;
    for attempt in 0..=MAX_RIG_RETRIES {
        let cams = rig.cameras(radius)?;
        let worst = cams.iter().map(|c| scene.visible_fraction(c)).fold(1.0, f64::min);
        if worst >= MIN_VISIBLE {
            scene.cameras = cams;
            break;
        }
        if attempt == MAX_RIG_RETRIES {
            return Err(Error::Scene(format!(
                "no rig within {MAX_RIG_RETRIES} retries sees {:.0}% of the points (worst view {:.1}%)",
                100.0 * MIN_VISIBLE,
                100.0 * worst
            )));
        }
        radius *= 1.15;
    }

    let views = scene
        .cameras
        .par_iter()
        .map(|c| scene.render(c).map(|(image, depth)| View { camera: c.clone(), image, depth }))
        .collect::<Result<Vec<_>>>()?;

    let train = rig.train_indices();
    let test = (0..rig.views).filter(|i| !train.contains(i)).collect();
    let keep = ((m as f64) * 0.8).round().max(1.0) as usize;
    let mut kept = sample(&mut rng, m, keep).into_vec();
    kept.sort_unstable();
    let jitter = Normal::new(0.0, 0.01).expect("valid jitter");
    let init_points = kept
        .into_iter()
        .map(|i| {
            let c = scene.cloud.center(i);
            [0, 1, 2].map(|k| c[k] + jitter.sample(&mut rng))
        })
        .collect();
    let data = SceneDataset { views, train, test, init_points };
    data.validate()?;
    Ok((scene, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RigSpec {
        RigSpec { views: 6, train_views: 2, size: 32, ..Default::default() }
    }

    #[test]
    fn deterministic_and_split() {
        let (s1, d1) = gen_scene(3, 40, &small()).unwrap();
        let (s2, d2) = gen_scene(3, 40, &small()).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(s1.cloud, s2.cloud);
        assert_eq!(d1.train, vec![0, 5]);
        assert_eq!(d1.test, vec![1, 2, 3, 4]);
        assert_eq!(d1.init_points.len(), 32);
        for c in &s1.cameras {
            assert!(s1.visible_fraction(c) >= MIN_VISIBLE);
        }
        let (_, d3) = gen_scene(4, 40, &small()).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn attribute_ranges() {
        let (s, d) = gen_scene(1, 200, &RigSpec::default()).unwrap();
        assert_eq!(d.views.len(), 12);
        assert_eq!(d.train, vec![0, 6, 11]);
        for i in 0..200 {
            let c = s.cloud.center(i);
            assert!(c.iter().all(|v| v.abs() <= 0.5));
            for &r in s.cloud.raw_scale.row(i) {
                let sc = crate::diffcore::softplus(r);
                assert!((0.01 - 1e-12..=0.1 + 1e-12).contains(&sc));
            }
        }
        assert!(s.opacities().iter().all(|o| (0.5 - 1e-12..=0.99 + 1e-12).contains(o)));
        assert!(s.colors().unwrap().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        for v in &d.views {
            assert!(v.image.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn single_gaussian_blob() {
        let rig = RigSpec { views: 3, train_views: 1, size: 32, arc_degrees: 0.0, elevation_degrees: 0.0, ..Default::default() };
        let (mut s, _) = gen_scene(9, 1, &rig).unwrap();
        s.cloud.mu = Tensor::zeros(&[1, 3]);
        s.cloud.raw_scale = Tensor::full(&[1, 3], softplus_inv(0.1));
        let cam = &s.cameras[0];
        let (img, _) = s.render(cam).unwrap();
        let lum = |x: usize, y: usize| img.data()[(y * 32 + x) * 3..(y * 32 + x) * 3 + 3].iter().sum::<f64>();
        let (cx, cy) = (16, 16);
        assert!(lum(cx, cy) > 0.0);
        let max = (0..32 * 32).map(|p| lum(p % 32, p / 32)).fold(0.0, f64::max);
        assert_eq!(max, lum(cx, cy).max(lum(cx - 1, cy)).max(lum(cx, cy - 1)).max(lum(cx - 1, cy - 1)));
        // falloff along rays from the projected center
        for (dx, dy) in [(1i32, 0i32), (0, 1), (-1, 0), (0, -1), (1, 1)] {
            let mut prev = f64::INFINITY;
            for r in 0..14 {
                let (x, y) = (cx as i32 + dx * r, cy as i32 + dy * r);
                let v = lum(x as usize, y as usize);
                assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn bad_requests() {
        assert!(gen_scene(0, 0, &RigSpec::default()).is_err());
        assert!(gen_scene(0, 5, &RigSpec { train_views: 12, ..Default::default() }).is_err());
        assert!(gen_scene(0, 5, &RigSpec { size: 30, ..Default::default() }).is_err());
    }
}
