//! Dataset directories:
//!
//! ```text
//! images/NNN.png   views in camera order
//! depths/NNN.pfm   depth priors (required for training views)
//! cameras.json
//! init.ply         initialization cloud
//! meta.json        split, generator settings, ground truth when synthetic
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cameras::{load_cameras, save_cameras};
use super::image_io::{read_image, read_pfm, write_image, write_pfm};
use super::ply::{load_pointcloud, write_pointcloud, PointCloud};
use super::synth::{RigSpec, SceneDataset, SyntheticScene, View};
use crate::diffcore::Tensor;
use crate::error::{Error, PathContext, Result};
use crate::scene::{Camera, GaussianCloud};

pub const DATASET_FORMAT: &str = "featsplat-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Raw (pre-activation) attributes of the ground-truth Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mu: Vec<[f64; 3]>,
    pub raw_scale: Vec<[f64; 3]>,
    pub raw_quat: Vec<[f64; 4]>,
    /// Degree-0 SH coefficient per channel.
    pub sh: Vec<[f64; 3]>,
    pub raw_opacity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format: String,
    pub version: u32,
    pub views: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub rig: Option<RigSpec>,
    #[serde(default)]
    pub ground_truth: Option<GroundTruth>,
}

fn rows<const N: usize>(t: &Tensor<f64>) -> Vec<[f64; N]> {
    (0..t.rows()).map(|i| std::array::from_fn(|k| t.row(i)[k])).collect()
}

fn tensor<const N: usize>(rows: &[[f64; N]]) -> Result<Tensor<f64>> {
    Tensor::new(&[rows.len(), N], rows.iter().flatten().copied().collect())
}

impl GroundTruth {
    pub fn from_cloud(c: &GaussianCloud<f64>) -> Result<Self> {
        let sh = c.sh.as_ref().filter(|_| c.sh_degree == 0).ok_or_else(|| Error::Scene("ground truth needs degree-0 SH".into()))?;
        let op = c.raw_opacity.as_ref().ok_or_else(|| Error::Scene("ground truth needs opacities".into()))?;
        Ok(GroundTruth {
            mu: rows(&c.mu),
            raw_scale: rows(&c.raw_scale),
            raw_quat: rows(&c.raw_quat),
            sh: rows(sh),
            raw_opacity: op.data().to_vec(),
        })
    }

    pub fn to_scene(&self, cameras: Vec<Camera>, seed: u64) -> Result<SyntheticScene> {
        let cloud = GaussianCloud {
            mu: tensor(&self.mu)?,
            raw_scale: tensor(&self.raw_scale)?,
            raw_quat: tensor(&self.raw_quat)?,
            feat: None,
            feat_enh: None,
            sh: Some(tensor(&self.sh)?),
            sh_degree: 0,
            raw_opacity: Some(Tensor::new(&[self.raw_opacity.len(), 1], self.raw_opacity.clone())?),
        };
        cloud.validate()?;
        Ok(SyntheticScene { cloud, cameras, seed })
    }
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:03}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("depths").join(format!("{i:03}.pfm"))
}

/// Write a generated dataset. Images are stored as 8-bit PNG.
pub fn save_dataset(dir: &Path, data: &SceneDataset, scene: Option<(&SyntheticScene, &RigSpec)>) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir.join("images")).at(dir)?;
    fs::create_dir_all(dir.join("depths")).at(dir)?;
    for (i, v) in data.views.iter().enumerate() {
        write_image(&image_path(dir, i), &v.image)?;
        write_pfm(&depth_path(dir, i), &v.depth)?;
    }
    let cams: Vec<Camera> = data.views.iter().map(|v| v.camera.clone()).collect();
    save_cameras(&dir.join("cameras.json"), &cams)?;
    write_pointcloud(&dir.join("init.ply"), &PointCloud { points: data.init_points.clone(), colors: None })?;
    let meta = Meta {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        views: data.views.len(),
        train: data.train.clone(),
        test: data.test.clone(),
        seed: scene.map(|(s, _)| s.seed),
        rig: scene.map(|(_, r)| r.clone()),
        ground_truth: scene.map(|(s, _)| GroundTruth::from_cloud(&s.cloud)).transpose()?,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).at(&path)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    if meta.format != DATASET_FORMAT || meta.version != DATASET_VERSION {
        return Err(Error::Scene(format!(
            "{}: unsupported dataset format {} v{}",
            dir.display(),
            meta.format,
            meta.version
        )));
    }
    Ok(meta)
}

/// Load a dataset directory. Missing depth maps are only an error for
/// training views; held-out views get zeros.
pub fn load_dataset(dir: &Path) -> Result<(SceneDataset, Meta)> {
    let meta = load_meta(dir)?;
    let cams = load_cameras(&dir.join("cameras.json"))?;
    if cams.len() != meta.views {
        return Err(Error::Scene(format!("meta.json lists {} views but cameras.json has {}", meta.views, cams.len())));
    }
    let mut views = Vec::with_capacity(cams.len());
    for (i, camera) in cams.into_iter().enumerate() {
        let image = read_image(&image_path(dir, i))?;
        if image.shape() != [camera.height, camera.width, 3] {
            return Err(Error::Camera {
                id: camera.id,
                msg: format!("image {:?} does not match {}x{}", image.shape(), camera.width, camera.height),
            });
        }
        let dp = depth_path(dir, i);
        let depth = if dp.exists() {
            read_pfm(&dp)?
        } else if meta.train.contains(&i) {
            return Err(Error::Scene(format!("training view {i} has no depth prior at {}", dp.display())));
        } else {
            Tensor::zeros(&[camera.height, camera.width])
        };
        if depth.shape() != [camera.height, camera.width] {
            return Err(Error::Camera { id: camera.id, msg: format!("depth map {:?} does not match the image", depth.shape()) });
        }
        views.push(View { camera, image, depth });
    }
    let init_points = load_pointcloud(&dir.join("init.ply"))?.points;
    let data = SceneDataset { views, train: meta.train.clone(), test: meta.test.clone(), init_points };
    data.validate()?;
    Ok((data, meta))
}
