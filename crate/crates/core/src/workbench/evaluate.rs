//! Held-out evaluation and the `metrics.json` report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::psnr;
use super::synth::{SceneDataset, SyntheticScene};
use crate::diffcore::{Real, Tensor};
use crate::error::{PathContext, Result};
use crate::optim::{ssim, Model};
use crate::raster::RasterConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// What was rendered: `"model"` or `"ground_truth"`.
    pub source: String,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    fn new(source: &str, views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        EvalReport { source: source.into(), views, mean_psnr, mean_ssim }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>7}\n", "view", "psnr", "ssim");
        for v in &self.views {
            s += &format!("{:>6} {:>9.3} {:>7.4}\n", v.view, v.psnr, v.ssim);
        }
        s += &format!("{:>6} {:>9.3} {:>7.4}\n", "mean", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").at(path)?;
        Ok(())
    }
}

fn score(view: usize, render: &Tensor<f64>, gt: &Tensor<f64>) -> Result<ViewMetrics> {
    Ok(ViewMetrics { view, psnr: psnr(render, gt)?, ssim: ssim(render, gt)? })
}

/// Render `views` of `data` with `model` and score them against the stored
/// images.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    raster: &RasterConfig,
    data: &SceneDataset,
    views: &[usize],
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(views.len());
    for &i in views {
        let v = &data.views[i];
        let r = model.render(&v.camera, raster)?;
        let img = Tensor::new(&[r.height, r.width, 3], r.image.iter().map(|x| x.f64()).collect())?;
        out.push(score(i, &img, &v.image)?);
    }
    Ok(EvalReport::new("model", out))
}

/// Score the ground-truth scene's own renders, quantized like the stored
/// 8-bit images. A consistent dataset scores the PSNR cap everywhere.
pub fn evaluate_ground_truth(scene: &SyntheticScene, data: &SceneDataset, views: &[usize]) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(views.len());
    for &i in views {
        let v = &data.views[i];
        let (img, _) = scene.render(&v.camera)?;
        let img = img.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        out.push(score(i, &img, &v.image)?);
    }
    Ok(EvalReport::new("ground_truth", out))
}
