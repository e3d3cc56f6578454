use std::cell::RefCell;

use super::tiled::{render, render_backward, RenderOutput};
use super::{RasterConfig, SplatInputs};
use crate::diffcore::{CustomOp, Real, Tensor};
use crate::error::{Error, Result};
use crate::scene::Camera;

/// Number of channels per pixel in the op output: r, g, b, depth, weight.
pub const RENDER_CHANNELS: usize = 5;

/// Rasterization as a tape op.
///
/// Inputs: `mu [M,3]`, `cov [M,6]`, `color [M,3]`, `opacity [M,1]`.
/// Output: `[H, W, 5]` holding rgb, composited depth and accumulated weight.
/// The forward state is kept for the backward pass, which also records the
/// per-point view-space gradient norms used by densification.
pub struct RenderOp<T: Real> {
    pub camera: Camera,
    pub config: RasterConfig,
    state: RefCell<Option<RenderOutput<T>>>,
    viewspace: RefCell<Option<(Vec<T>, Vec<bool>)>>,
}

impl<T: Real> RenderOp<T> {
    pub fn new(camera: Camera, config: RasterConfig) -> Self {
        RenderOp { camera, config, state: RefCell::new(None), viewspace: RefCell::new(None) }
    }

    /// Per-point view-space gradient norm and visibility from the last
    /// backward pass.
    pub fn take_viewspace(&self) -> Option<(Vec<T>, Vec<bool>)> {
        self.viewspace.borrow_mut().take()
    }

    /// Forward state of the last call.
    pub fn last_output(&self) -> std::cell::Ref<'_, Option<RenderOutput<T>>> {
        self.state.borrow()
    }

    fn inputs<'a>(inputs: &[&'a Tensor<T>]) -> Result<SplatInputs<'a, T>> {
        if inputs.len() != 4 {
            return Err(Error::CustomOp { name: "render".into(), msg: format!("expected 4 inputs, got {}", inputs.len()) });
        }
        Ok(SplatInputs { mu: inputs[0], cov: inputs[1], color: inputs[2], opacity: inputs[3] })
    }
}

impl<T: Real> CustomOp<T> for RenderOp<T> {
    fn name(&self) -> &str {
        "render"
    }

    fn grad_arity(&self) -> usize {
        4
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let si = Self::inputs(inputs)?;
        let out = render(&si, &self.camera, &self.config)?;
        let (w, h) = (out.width, out.height);
        let mut data = Vec::with_capacity(w * h * RENDER_CHANNELS);
        for p in 0..w * h {
            data.extend_from_slice(&out.image[p * 3..p * 3 + 3]);
            data.push(out.depth[p]);
            data.push(out.weight[p]);
        }
        *self.state.borrow_mut() = Some(out);
        Tensor::new(&[h, w, RENDER_CHANNELS], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let si = Self::inputs(inputs)?;
        let state = self.state.borrow();
        let fwd = state
            .as_ref()
            .ok_or_else(|| Error::CustomOp { name: "render".into(), msg: "backward before forward".into() })?;
        let n = fwd.width * fwd.height;
        let g = grad.data();
        let mut gi = Vec::with_capacity(n * 3);
        let mut gd = Vec::with_capacity(n);
        let mut gw = Vec::with_capacity(n);
        for p in 0..n {
            let o = p * RENDER_CHANNELS;
            gi.extend_from_slice(&g[o..o + 3]);
            gd.push(g[o + 3]);
            gw.push(g[o + 4]);
        }
        let r = render_backward(&si, &self.camera, &self.config, fwd, &gi, &gd, &gw);
        let m = si.len();
        *self.viewspace.borrow_mut() = Some((r.viewspace, r.visible));
        Ok(vec![
            Some(Tensor::new(&[m, 3], r.mu)?),
            Some(Tensor::new(&[m, 6], r.cov)?),
            Some(Tensor::new(&[m, 3], r.color)?),
            Some(Tensor::new(inputs[3].shape(), r.opacity)?),
        ])
    }
}
