//! Two MLP heads decoding per-Gaussian attributes from positionally encoded
//! centers, view directions and enhanced point features.

use std::rc::Rc;

use rand::Rng;

use crate::diffcore::nn::Mlp;
use crate::diffcore::{concat_cols, logit, softplus_inv, Bound, CustomOp, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{QuatNormalize, FEATURE_DIM};

pub const DEFAULT_BANDS: usize = 4;
pub const HIDDEN: usize = 64;
pub const QUAT_EPS: f64 = 1e-8;
pub const INIT_OPACITY: f64 = 0.1;

pub fn encoded_dim(bands: usize) -> usize {
    3 + 6 * bands
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]`, each
/// entry a 3-vector.
pub fn positional_encode(x: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(bands));
    out.extend_from_slice(&x);
    for l in 0..bands {
        let f = std::f64::consts::PI * (1u64 << l) as f64;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

/// Row-wise [`positional_encode`] on the tape.
pub struct PosEncodeOp {
    pub bands: usize,
}

impl<T: Real> CustomOp<T> for PosEncodeOp {
    fn name(&self) -> &str {
        "positional_encode"
    }

    fn grad_arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let x = inputs[0];
        if x.ndim() != 2 || x.cols() != 3 {
            return Err(Error::Shape(format!("positional encoding needs [M, 3], got {:?}", x.shape())));
        }
        let d = encoded_dim(self.bands);
        let mut out = Vec::with_capacity(x.rows() * d);
        for r in 0..x.rows() {
            let row = x.row(r);
            out.extend_from_slice(row);
            for l in 0..self.bands {
                let f = T::lit(std::f64::consts::PI * (1u64 << l) as f64);
                out.extend(row.iter().map(|&v| (f * v).sin()));
                out.extend(row.iter().map(|&v| (f * v).cos()));
            }
        }
        Tensor::new(&[x.rows(), d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let d = encoded_dim(self.bands);
        let mut gx = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            let g = &grad.data()[r * d..(r + 1) * d];
            let row = x.row(r).to_vec();
            let dst = gx.row_mut(r);
            for a in 0..3 {
                let mut acc = g[a];
                for l in 0..self.bands {
                    let f = T::lit(std::f64::consts::PI * (1u64 << l) as f64);
                    let base = 3 + 6 * l;
                    acc += g[base + a] * f * (f * row[a]).cos();
                    acc -= g[base + 3 + a] * f * (f * row[a]).sin();
                }
                dst[a] = acc;
            }
        }
        Ok(vec![Some(gx)])
    }
}

pub fn positional_encode_var<'t, T: Real>(x: Var<'t, T>, bands: usize) -> Result<Var<'t, T>> {
    if bands == 0 {
        return Ok(x);
    }
    x.tape().custom(Rc::new(PosEncodeOp { bands }), &[x])
}

#[derive(Clone, Debug)]
pub struct DecoderHeads {
    /// rgb and opacity logits.
    pub head_a: Mlp,
    /// 3 raw scales and 4 raw quaternion components.
    pub head_b: Mlp,
    pub bands: usize,
    /// When false the geometry head sees a zero view direction.
    pub geometry_uses_view: bool,
}

/// Decoded attributes for `M` points.
pub struct Decoded<'t, T: Real> {
    /// `[M, 3]` in (0, 1)
    pub rgb: Var<'t, T>,
    /// `[M, 1]` in (0, 1)
    pub opacity: Var<'t, T>,
    /// `[M, 3]`, positive
    pub scale: Var<'t, T>,
    /// `[M, 4]`, unit norm
    pub quat: Var<'t, T>,
}

impl DecoderHeads {
    /// `init_scale` sets the scale bias so untrained Gaussians start at
    /// roughly that world size.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        bands: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::Config(format!("initial scale must be positive, got {init_scale}")));
        }
        let input = encoded_dim(bands) + 3 + FEATURE_DIM;
        let head_a = Mlp::new(store, "decode.a", &[input, HIDDEN, HIDDEN, 4], rng);
        let head_b = Mlp::new(store, "decode.b", &[input, HIDDEN, HIDDEN, 7], rng);
        let ba = store.get_mut(head_a.last().bias);
        ba.data_mut()[3] = T::lit(logit(INIT_OPACITY));
        let bb = store.get_mut(head_b.last().bias).data_mut();
        let s0 = T::lit(softplus_inv(init_scale));
        bb[..3].iter_mut().for_each(|v| *v = s0);
        bb[3] = T::one();
        Ok(DecoderHeads { head_a, head_b, bands, geometry_uses_view: true })
    }

    pub fn input_dim(&self) -> usize {
        encoded_dim(self.bands) + 3 + FEATURE_DIM
    }

    fn input<'t, T: Real>(&self, mu: Var<'t, T>, view_dir: Var<'t, T>, feat: Var<'t, T>) -> Result<Var<'t, T>> {
        let m = mu.shape()[0];
        if mu.shape() != [m, 3] || view_dir.shape() != [m, 3] || feat.shape() != [m, FEATURE_DIM] {
            return Err(Error::Shape(format!(
                "decoder input mismatch: mu {:?}, view_dir {:?}, features {:?}",
                mu.shape(),
                view_dir.shape(),
                feat.shape()
            )));
        }
        concat_cols(&[positional_encode_var(mu, self.bands)?, view_dir, feat])
    }

    /// `(rgb [M,3], opacity [M,1])`
    pub fn decode_appearance<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        mu: Var<'t, T>,
        view_dir: Var<'t, T>,
        feat: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = self.head_a.forward(p, self.input(mu, view_dir, feat)?)?.sigmoid()?;
        Ok((out.slice_cols(0, 3)?, out.slice_cols(3, 1)?))
    }

    /// `(scale [M,3], unit quaternion [M,4])`
    pub fn decode_geometry<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        mu: Var<'t, T>,
        view_dir: Var<'t, T>,
        feat: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape: &'t Tape<T> = mu.tape();
        let vd = if self.geometry_uses_view { view_dir } else { tape.constant(Tensor::zeros(&view_dir.shape())) };
        let out = self.head_b.forward(p, self.input(mu, vd, feat)?)?;
        let scale = out.slice_cols(0, 3)?.softplus()?;
        let quat = tape.custom(Rc::new(QuatNormalize { eps: QUAT_EPS }), &[out.slice_cols(3, 4)?])?;
        Ok((scale, quat))
    }

    pub fn decode<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        mu: Var<'t, T>,
        view_dir: Var<'t, T>,
        feat: Var<'t, T>,
    ) -> Result<Decoded<'t, T>> {
        let (rgb, opacity) = self.decode_appearance(p, mu, view_dir, feat)?;
        let (scale, quat) = self.decode_geometry(p, mu, view_dir, feat)?;
        Ok(Decoded { rgb, opacity, scale, quat })
    }
}
