//! The trainable point model: per-point centers and features (or SH
//! attributes in the ablation path) plus the shared networks.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{DecoderHeads, DEFAULT_BANDS, INIT_OPACITY};
use crate::diffcore::{logit, softplus_inv, Bound, Group, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::featpipe::{FeatureEncoder, Fusion};
use crate::interact::{knn, AttentionBlock};
use crate::raster::{render, RasterConfig, RenderOp, RenderOutput, SplatInputs};
use crate::scene::{assemble_covariance_var, Camera, CovarianceOp, ShBasis, ShColorOp, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    /// Decoded from point features.
    Features,
    /// Per-point SH coefficients with free opacity, scale and rotation.
    Sh,
}

impl std::str::FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(ColorMode::Features),
            "sh" => Ok(ColorMode::Sh),
            _ => Err(Error::Config(format!("unknown color mode '{s}' (expected features or sh)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub color: ColorMode,
    /// Neighbors per point in the attention block; 0 disables interaction.
    pub k_neighbors: usize,
    pub fusion: Fusion,
    /// Positional-encoding frequency bands of the decoders.
    pub bands: usize,
    pub sh_degree: usize,
    /// Train the image encoder through the fused features. When off, the
    /// fused features are computed once per sampling plan and held fixed.
    pub train_encoder: bool,
    /// Learn a free per-point offset on top of the fused features. Off, the
    /// per-point feature parameter only holds features baked in after
    /// training.
    pub feature_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            color: ColorMode::Features,
            k_neighbors: 3,
            fusion: Fusion::Variance,
            bands: DEFAULT_BANDS,
            sh_degree: 3,
            train_encoder: true,
            feature_residual: false,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Heads {
    Features { feat: ParamId, encoder: FeatureEncoder, attention: Option<AttentionBlock>, decoder: DecoderHeads },
    Sh { sh: ParamId, opacity: ParamId, scale: ParamId, quat: ParamId },
}

/// Per-point render attributes for one camera.
pub struct Attributes<'t, T: Real> {
    pub mu: Var<'t, T>,
    /// `[M, 3]` world-space axis scales.
    pub scale: Var<'t, T>,
    /// `[M, 4]` unit quaternions.
    pub quat: Var<'t, T>,
    pub cov: Var<'t, T>,
    pub rgb: Var<'t, T>,
    pub opacity: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub mu: ParamId,
    pub heads: Heads,
    /// Non-learned per-point multiplier on decoded scales; splitting divides
    /// it. Always 1 in the SH path, where scales are free parameters.
    pub scale_mult: Vec<f64>,
}

impl<T: Real> Model<T> {
    /// New model over `points`. The per-point feature parameter is added to
    /// the fused multi-view features and starts at zero.
    pub fn new<R: Rng>(config: ModelConfig, points: &[[f64; 3]], init_scale: f64, rng: &mut R) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::Config(format!("initial scale must be positive, got {init_scale}")));
        }
        let m = points.len();
        let mut store = ParamStore::new();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let mu = store.add("point.mu", Tensor::from_f64(&[m, 3], &flat)?, Group::Position, true);
        let heads = match config.color {
            ColorMode::Features => {
                let encoder = FeatureEncoder::new(&mut store, rng);
                if !config.train_encoder {
                    for p in store.iter_mut() {
                        if p.name.starts_with("encoder.") {
                            p.group = Group::Frozen;
                        }
                    }
                }
                let attention = (config.k_neighbors > 0).then(|| AttentionBlock::new(&mut store, rng));
                let decoder = DecoderHeads::new(&mut store, config.bands, init_scale, rng)?;
                let group = if config.feature_residual { Group::Feature } else { Group::Frozen };
                let feat = store.add("point.feat", Tensor::zeros(&[m, FEATURE_DIM]), group, true);
                Heads::Features { feat, encoder, attention, decoder }
            }
            ColorMode::Sh => {
                let k = ShBasis::new(config.sh_degree)?.num_coeffs();
                let sh = store.add("point.sh", Tensor::zeros(&[m, 3 * k]), Group::Sh, true);
                let opacity =
                    store.add("point.opacity", Tensor::full(&[m, 1], T::lit(logit(INIT_OPACITY))), Group::Opacity, true);
                let scale =
                    store.add("point.scale", Tensor::full(&[m, 3], T::lit(softplus_inv(init_scale))), Group::Geometry, true);
                let mut q = Tensor::zeros(&[m, 4]);
                for i in 0..m {
                    q.row_mut(i)[0] = T::one();
                }
                let quat = store.add("point.quat", q, Group::Geometry, true);
                Heads::Sh { sh, opacity, scale, quat }
            }
        };
        Ok(Model { config, store, mu, heads, scale_mult: vec![1.0; m], })
    }

    pub fn len(&self) -> usize {
        self.store.get(self.mu).rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        let mu = self.store.get(self.mu);
        (0..mu.rows()).map(|i| {
            let r = mu.row(i);
            [r[0].f64(), r[1].f64(), r[2].f64()]
        }).collect()
    }

    pub fn feature_param(&self) -> Option<ParamId> {
        match &self.heads {
            Heads::Features { feat, .. } => Some(*feat),
            Heads::Sh { .. } => None,
        }
    }

    pub fn encoder(&self) -> Option<&FeatureEncoder> {
        match &self.heads {
            Heads::Features { encoder, .. } => Some(encoder),
            Heads::Sh { .. } => None,
        }
    }

    pub fn per_point_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.per_point).map(|(id, _)| id).collect()
    }

    /// Render attributes of every point as seen from `cam`. `base` holds the
    /// fused multi-view features the feature parameter is added to; `None`
    /// means they are already folded into the parameter.
    pub fn attributes<'t>(
        &self,
        p: &Bound<'t, T>,
        cam: &Camera,
        base: Option<Var<'t, T>>,
    ) -> Result<Attributes<'t, T>> {
        let mu = p[self.mu];
        let tape: &'t Tape<T> = mu.tape();
        let points = self.points();
        let m = points.len();
        let dirs: Vec<[f64; 3]> = points.iter().map(|x| cam.view_dir(*x)).collect();
        match &self.heads {
            Heads::Features { feat, attention, decoder, .. } => {
                let f = match base {
                    Some(b) => p[*feat].add(b)?,
                    None => p[*feat],
                };
                let f = match attention {
                    Some(block) => block.forward(p, f, mu, &knn(&points, self.config.k_neighbors))?,
                    None => f,
                };
                let flat: Vec<f64> = dirs.iter().flatten().copied().collect();
                let view = tape.constant(Tensor::from_f64(&[m, 3], &flat)?);
                let d = decoder.decode(p, mu, view, f)?;
                let mult: Vec<f64> = self.scale_mult.iter().flat_map(|&s| [s; 3]).collect();
                let scale = d.scale.mul(tape.constant(Tensor::from_f64(&[m, 3], &mult)?))?;
                let cov = tape.custom(Rc::new(CovarianceOp), &[scale, d.quat])?;
                Ok(Attributes { mu, scale, quat: d.quat, cov, rgb: d.rgb, opacity: d.opacity })
            }
            Heads::Sh { sh, opacity, scale, quat } => {
                let rgb = tape.custom(Rc::new(ShColorOp::new(self.config.sh_degree, dirs)?), &[p[*sh]])?;
                let opacity = p[*opacity].sigmoid()?;
                let cov = assemble_covariance_var(tape, p[*scale], p[*quat])?;
                let s = p[*scale].softplus()?;
                let q = tape.custom(Rc::new(crate::scene::QuatNormalize { eps: 0.0 }), &[p[*quat]])?;
                Ok(Attributes { mu, scale: s, quat: q, cov, rgb, opacity })
            }
        }
    }

    /// `[H, W, 5]` render on the tape plus the op, whose backward records the
    /// densification signal.
    pub fn render_var<'t>(
        &self,
        p: &Bound<'t, T>,
        cam: &Camera,
        raster: &RasterConfig,
        base: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Rc<RenderOp<T>>, Attributes<'t, T>)> {
        let a = self.attributes(p, cam, base)?;
        let op = Rc::new(RenderOp::new(cam.clone(), raster.clone()));
        let out = a.mu.tape().custom(op.clone(), &[a.mu, a.cov, a.rgb, a.opacity])?;
        Ok((out, op, a))
    }

    /// Forward-only render of a self-contained model.
    pub fn render(&self, cam: &Camera, raster: &RasterConfig) -> Result<RenderOutput<T>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let a = self.attributes(&p, cam, None)?;
        let (mu, cov, rgb, opacity) = (a.mu.value(), a.cov.value(), a.rgb.value(), a.opacity.value());
        render(&SplatInputs { mu: &mu, cov: &cov, color: &rgb, opacity: &opacity }, cam, raster)
    }
}
