//! Gaussians, cameras, covariance assembly, and spherical-harmonics color.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{softplus, CustomOp, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Width of the fused point feature: 8 + 16 + 32 channels.
pub const FEATURE_DIM: usize = 56;

/// Symmetric 3×3 matrices are stored as `[xx, xy, xz, yy, yz, zz]`.
pub type Sym3<T> = [T; 6];

pub fn sym3_full<T: Real>(s: &Sym3<T>) -> [[T; 3]; 3] {
    [[s[0], s[1], s[2]], [s[1], s[3], s[4]], [s[2], s[4], s[5]]]
}

/// Pinhole camera with a rigid world-to-camera transform. Camera space looks
/// down +z with x right and y down; pixel `(i, j)` has its center at
/// `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rot: [[f64; 3]; 3],
        trans: [f64; 3],
    ) -> Result<Self> {
        let cam = Camera { id, width, height, fx, fy, cx, cy, rot, trans };
        cam.validate(1e-6)?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; world +y maps to image down.
    pub fn look_at(
        id: usize,
        eye: [f64; 3],
        target: [f64; 3],
        size: (usize, usize),
        focal: f64,
    ) -> Result<Self> {
        let f = normalize3(sub3(target, eye))?;
        let x = normalize3(cross3([0.0, 1.0, 0.0], f))?;
        let y = cross3(f, x);
        let rot = [x, y, f];
        let trans = neg3(mat3_vec(&rot, eye));
        let (w, h) = size;
        Camera::new(id, w, h, focal, focal, w as f64 / 2.0, h as f64 / 2.0, rot, trans)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let err = |msg: String| Error::Camera { id: self.id, msg };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(err(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(err(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let r = &self.rot;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return Err(err(format!("rotation is not orthonormal (RRᵀ[{i}][{j}] = {dot})")));
                }
            }
        }
        let det = det3(r);
        if (det - 1.0).abs() > tol {
            return Err(err(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(())
    }

    pub fn world_to_cam(&self) -> [[f64; 4]; 4] {
        let r = &self.rot;
        let t = &self.trans;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        add3(mat3_vec(&self.rot, p), self.trans)
    }

    /// Camera center in world space.
    pub fn center(&self) -> [f64; 3] {
        let rt = transpose3(&self.rot);
        neg3(mat3_vec(&rt, self.trans))
    }

    /// Optical axis in world space.
    pub fn forward(&self) -> [f64; 3] {
        self.rot[2]
    }

    /// Unit direction from the camera center to `p`.
    pub fn view_dir(&self, p: [f64; 3]) -> [f64; 3] {
        normalize3(sub3(p, self.center())).unwrap_or(self.forward())
    }

    /// Pixel coordinates and camera depth, or `None` at or behind `near`.
    pub fn project(&self, p: [f64; 3], near: f64) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= near {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    pub fn in_frustum(&self, p: [f64; 3], near: f64) -> bool {
        self.project(p, near).is_some_and(|(u, v, _)| {
            u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
        })
    }
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn neg3(a: [f64; 3]) -> [f64; 3] {
    [-a[0], -a[1], -a[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn normalize3(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = norm3(a);
    if n < 1e-12 {
        return Err(Error::Geometry("cannot normalize a zero vector".into()));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

pub(crate) fn mat3_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub(crate) fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Rotation matrix of a quaternion `(w, x, y, z)`, normalized first.
pub fn quat_to_rot<T: Real>(q: [T; 4]) -> Result<[[T; 3]; 3]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n.f64() <= 1e-12 {
        return Err(Error::Geometry("quaternion norm is zero".into()));
    }
    Ok(unit_quat_to_rot([q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
}

pub(crate) fn unit_quat_to_rot<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Pull a rotation gradient `dL/dR` back onto the (unit) quaternion entries.
pub(crate) fn rot_grad_to_quat<T: Real>(q: [T; 4], g: &[[T; 3]; 3]) -> [T; 4] {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    [
        two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]),
        two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
            - four * x * (g[1][1] + g[2][2]),
        two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
            - four * y * (g[0][0] + g[2][2]),
        two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
            - four * z * (g[0][0] + g[1][1]),
    ]
}

/// `Σ = R diag(s)² Rᵀ` from activated scales and a unit quaternion.
pub fn covariance_from_scale_quat<T: Real>(scale: [T; 3], q: [T; 4]) -> Sym3<T> {
    let r = unit_quat_to_rot(q);
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m[i][k] = r[i][k] * scale[k];
        }
    }
    let dot = |i: usize, j: usize| m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
    [dot(0, 0), dot(0, 1), dot(0, 2), dot(1, 1), dot(1, 2), dot(2, 2)]
}

/// Covariance from unconstrained parameters: softplus scales, normalized
/// quaternion.
pub fn assemble_covariance<T: Real>(raw_scale: [T; 3], raw_quat: [T; 4]) -> Result<Sym3<T>> {
    let n = (raw_quat.iter().map(|&v| v * v).sum::<T>()).sqrt();
    if n.f64() <= 1e-12 {
        return Err(Error::Geometry("quaternion norm is zero".into()));
    }
    let q = [raw_quat[0] / n, raw_quat[1] / n, raw_quat[2] / n, raw_quat[3] / n];
    let s = [softplus(raw_scale[0]), softplus(raw_scale[1]), softplus(raw_scale[2])];
    Ok(covariance_from_scale_quat(s, q))
}

/// Row-wise quaternion normalization `q' / |q'|` with `q' = q + eps·e_w`.
pub struct QuatNormalize {
    pub eps: f64,
}

impl<T: Real> CustomOp<T> for QuatNormalize {
    fn name(&self) -> &str {
        "quat_normalize"
    }

    fn grad_arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let q = inputs[0];
        if q.cols() != 4 {
            return Err(Error::Shape(format!("quaternions must be [M, 4], got {:?}", q.shape())));
        }
        let mut out = q.clone();
        let eps = T::lit(self.eps);
        for r in 0..q.rows() {
            let row = out.row_mut(r);
            row[0] += eps;
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.f64() <= 1e-12 {
                return Err(Error::Geometry(format!("quaternion {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let q = inputs[0];
        let eps = T::lit(self.eps);
        let mut gq = Tensor::zeros(q.shape());
        for r in 0..q.rows() {
            let raw = q.row(r);
            let n = ((raw[0] + eps) * (raw[0] + eps) + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3])
                .sqrt();
            let u = output.row(r);
            let g = grad.row(r);
            let dot: T = u.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for (k, o) in gq.row_mut(r).iter_mut().enumerate() {
                *o = (g[k] - u[k] * dot) / n;
            }
        }
        Ok(vec![Some(gq)])
    }
}

/// `[M, 3]` activated scales and `[M, 4]` unit quaternions to `[M, 6]`
/// covariances.
pub struct CovarianceOp;

impl<T: Real> CustomOp<T> for CovarianceOp {
    fn name(&self) -> &str {
        "covariance"
    }

    fn grad_arity(&self) -> usize {
        2
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (s, q) = (inputs[0], inputs[1]);
        if s.cols() != 3 || q.cols() != 4 || s.rows() != q.rows() {
            return Err(Error::Shape(format!(
                "covariance needs [M,3] scales and [M,4] quaternions, got {:?} and {:?}",
                s.shape(),
                q.shape()
            )));
        }
        let m = s.rows();
        let mut data = Vec::with_capacity(m * 6);
        for r in 0..m {
            let sr = s.row(r);
            let qr = q.row(r);
            data.extend_from_slice(&covariance_from_scale_quat(
                [sr[0], sr[1], sr[2]],
                [qr[0], qr[1], qr[2], qr[3]],
            ));
        }
        Tensor::new(&[m, 6], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (s, q) = (inputs[0], inputs[1]);
        let mut gs = Tensor::zeros(s.shape());
        let mut gq = Tensor::zeros(q.shape());
        let half = T::lit(0.5);
        for r in 0..s.rows() {
            let sr = s.row(r);
            let qr = [q.row(r)[0], q.row(r)[1], q.row(r)[2], q.row(r)[3]];
            let rot = unit_quat_to_rot(qr);
            let g6 = grad.row(r);
            // Symmetric G with tr(G Σ) = Σ g6·Σ6.
            let gm = [
                [g6[0], g6[1] * half, g6[2] * half],
                [g6[1] * half, g6[3], g6[4] * half],
                [g6[2] * half, g6[4] * half, g6[5]],
            ];
            let mut mm = [[T::zero(); 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    mm[i][k] = rot[i][k] * sr[k];
                }
            }
            // dL/dM = 2 G M
            let mut dm = [[T::zero(); 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    dm[i][k] = T::lit(2.0) * (0..3).map(|j| gm[i][j] * mm[j][k]).sum::<T>();
                }
            }
            let mut drot = [[T::zero(); 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    drot[i][k] = dm[i][k] * sr[k];
                }
            }
            for (k, o) in gs.row_mut(r).iter_mut().enumerate() {
                *o = (0..3).map(|i| dm[i][k] * rot[i][k]).sum();
            }
            gq.row_mut(r).copy_from_slice(&rot_grad_to_quat(qr, &drot));
        }
        Ok(vec![Some(gs), Some(gq)])
    }
}

/// Differentiable [`assemble_covariance`] over `[M, 3]` raw scales and
/// `[M, 4]` raw quaternions.
pub fn assemble_covariance_var<'t, T: Real>(
    tape: &'t Tape<T>,
    raw_scale: Var<'t, T>,
    raw_quat: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = raw_scale.softplus()?;
    let q = tape.custom(Rc::new(QuatNormalize { eps: 0.0 }), &[raw_quat])?;
    tape.custom(Rc::new(CovarianceOp), &[s, q])
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real spherical-harmonics basis up to degree 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShBasis {
    pub degree: usize,
}

impl ShBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree > 3 {
            return Err(Error::Config(format!("SH degree {degree} unsupported (max 3)")));
        }
        Ok(ShBasis { degree })
    }

    pub fn num_coeffs(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    /// Basis values at a unit direction, in coefficient order.
    pub fn eval(&self, dir: [f64; 3]) -> Vec<f64> {
        let [x, y, z] = dir;
        let mut b = vec![SH_C0];
        if self.degree >= 1 {
            b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
        }
        if self.degree >= 2 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            b.extend([
                SH_C2[0] * x * y,
                SH_C2[1] * y * z,
                SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z,
                SH_C2[4] * (xx - yy),
            ]);
        }
        if self.degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            b.extend([
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ]);
        }
        b
    }
}

fn check_unit(dir: [f64; 3]) -> Result<()> {
    let n = norm3(dir);
    if (n - 1.0).abs() > 1e-4 {
        return Err(Error::Geometry(format!("direction {dir:?} is not unit length (norm {n})")));
    }
    Ok(())
}

/// RGB from SH coefficients laid out `[coeff][channel]`:
/// `clamp(Σ Y_k c_k + 0.5, 0, 1)`.
pub fn eval_sh(coeffs: &[f64], dir: [f64; 3], degree: usize) -> Result<[f64; 3]> {
    let basis = ShBasis::new(degree)?;
    check_unit(dir)?;
    if coeffs.len() != basis.num_coeffs() * 3 {
        return Err(Error::Shape(format!(
            "degree {degree} needs {} coefficients, got {}",
            basis.num_coeffs() * 3,
            coeffs.len()
        )));
    }
    let y = basis.eval(dir);
    let mut rgb = [0.5; 3];
    for (k, yk) in y.iter().enumerate() {
        for c in 0..3 {
            rgb[c] += yk * coeffs[k * 3 + c];
        }
    }
    Ok(rgb.map(|v| v.clamp(0.0, 1.0)))
}

/// Per-point SH color: `[M, 3·K]` coefficients with fixed per-point unit
/// directions to `[M, 3]` RGB.
pub struct ShColorOp {
    pub basis: ShBasis,
    pub dirs: Vec<[f64; 3]>,
}

impl ShColorOp {
    pub fn new(degree: usize, dirs: Vec<[f64; 3]>) -> Result<Self> {
        for d in &dirs {
            check_unit(*d)?;
        }
        Ok(ShColorOp { basis: ShBasis::new(degree)?, dirs })
    }

    fn basis_rows<T: Real>(&self) -> Vec<Vec<T>> {
        self.dirs.iter().map(|d| self.basis.eval(*d).into_iter().map(T::lit).collect()).collect()
    }
}

impl<T: Real> CustomOp<T> for ShColorOp {
    fn name(&self) -> &str {
        "sh_color"
    }

    fn grad_arity(&self) -> usize {
        1
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = inputs[0];
        let k = self.basis.num_coeffs();
        if c.cols() != 3 * k || c.rows() != self.dirs.len() {
            return Err(Error::Shape(format!(
                "SH coefficients {:?} do not match {} points of degree {}",
                c.shape(),
                self.dirs.len(),
                self.basis.degree
            )));
        }
        let basis = self.basis_rows::<T>();
        let mut out = Vec::with_capacity(c.rows() * 3);
        for (r, y) in basis.iter().enumerate() {
            let row = c.row(r);
            for ch in 0..3 {
                let v: T = (0..k).map(|j| y[j] * row[j * 3 + ch]).sum::<T>() + T::lit(0.5);
                out.push(v.max(T::zero()).min(T::one()));
            }
        }
        Tensor::new(&[c.rows(), 3], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let c = inputs[0];
        let k = self.basis.num_coeffs();
        let basis = self.basis_rows::<T>();
        let mut gc = Tensor::zeros(c.shape());
        for (r, y) in basis.iter().enumerate() {
            let row = c.row(r).to_vec();
            let g = grad.row(r).to_vec();
            let out = gc.row_mut(r);
            for ch in 0..3 {
                let raw: T = (0..k).map(|j| y[j] * row[j * 3 + ch]).sum::<T>() + T::lit(0.5);
                if raw < T::zero() || raw > T::one() {
                    continue;
                }
                for j in 0..k {
                    out[j * 3 + ch] = g[ch] * y[j];
                }
            }
        }
        Ok(vec![Some(gc)])
    }
}

/// A set of 3D Gaussians with unconstrained attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T> {
    /// `[M, 3]` centers.
    pub mu: Tensor<T>,
    /// `[M, 3]` scales before softplus.
    pub raw_scale: Tensor<T>,
    /// `[M, 4]` quaternions `(w, x, y, z)` before normalization.
    pub raw_quat: Tensor<T>,
    /// `[M, 56]` fused point features.
    pub feat: Option<Tensor<T>>,
    /// `[M, 56]` features after neighbor interaction.
    pub feat_enh: Option<Tensor<T>>,
    /// `[M, 3·(D+1)²]` SH coefficients.
    pub sh: Option<Tensor<T>>,
    pub sh_degree: usize,
    /// `[M, 1]` opacity before sigmoid.
    pub raw_opacity: Option<Tensor<T>>,
}

impl<T: Real> GaussianCloud<T> {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        let r = self.mu.row(i);
        [r[0].f64(), r[1].f64(), r[2].f64()]
    }

    /// `[M, 6]` covariances.
    pub fn covariances(&self) -> Result<Tensor<T>> {
        let m = self.len();
        let mut data = Vec::with_capacity(m * 6);
        for i in 0..m {
            let s = self.raw_scale.row(i);
            let q = self.raw_quat.row(i);
            data.extend_from_slice(&assemble_covariance([s[0], s[1], s[2]], [q[0], q[1], q[2], q[3]])?);
        }
        Tensor::new(&[m, 6], data)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        let check = |name: &str, t: &Tensor<T>, cols: usize| -> Result<()> {
            if t.rows() != m || t.cols() != cols {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected [{m}, {cols}]",
                    t.shape()
                )));
            }
            Ok(())
        };
        check("mu", &self.mu, 3)?;
        check("raw_scale", &self.raw_scale, 3)?;
        check("raw_quat", &self.raw_quat, 4)?;
        if let Some(f) = &self.feat {
            check("feat", f, FEATURE_DIM)?;
        }
        if let Some(f) = &self.feat_enh {
            check("feat_enh", f, FEATURE_DIM)?;
        }
        if let Some(sh) = &self.sh {
            check("sh", sh, 3 * (self.sh_degree + 1) * (self.sh_degree + 1))?;
        }
        if let Some(o) = &self.raw_opacity {
            check("raw_opacity", o, 1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix3, SymmetricEigen};
    use proptest::prelude::*;

    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, FdOptions};
    use crate::diffcore::softplus_inv;

    fn eigvals(s: &Sym3<f64>) -> Vec<f64> {
        let f = sym3_full(s);
        let m = Matrix3::from_fn(|i, j| f[i][j]);
        let mut e: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    #[test]
    fn identity_quaternion_unit_scales() {
        let raw = softplus_inv(1.0);
        let s = assemble_covariance([raw; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        let want = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn z_rotation_swaps_xy_scales() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (a, b, c) = (0.3, 1.2, 0.7);
        let s = assemble_covariance(
            [softplus_inv(a), softplus_inv(b), softplus_inv(c)],
            [h, 0.0, 0.0, h],
        )
        .unwrap();
        let want = [b * b, 0.0, 0.0, a * a, 0.0, c * c];
        for (x, y) in s.iter().zip(want) {
            assert!((x - y).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn quat_to_rot_examples() {
        let r = quat_to_rot([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let r = quat_to_rot([0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]);
        let q = [0.3, -0.5, 0.8, 0.1];
        assert_eq!(quat_to_rot(q).unwrap(), quat_to_rot(q.map(|v: f64| -v)).unwrap());
        assert!(quat_to_rot([0.0f64; 4]).is_err());
        assert!(assemble_covariance([0.0; 3], [0.0f64; 4]).is_err());
    }

    #[test]
    fn covariance_gradient_matches_finite_differences() {
        let s = Tensor::from_f64(&[2, 3], &[0.2, -0.5, 1.1, -1.3, 0.4, 0.0]).unwrap();
        let q = Tensor::from_f64(&[2, 4], &[0.9, 0.2, -0.3, 0.1, -0.4, 0.7, 0.5, -0.2]).unwrap();
        let r = check_gradients(
            "assemble_covariance",
            &[s, q],
            &[true, true],
            |tape, v| assemble_covariance_var(tape, v[0], v[1]),
            FdOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn sh_examples() {
        let dir = normalize3([0.3, -0.2, 0.9]).unwrap();
        let c = [0.4, -0.2, 1.0];
        let rgb = eval_sh(&c, dir, 0).unwrap();
        for ch in 0..3 {
            assert!((rgb[ch] - (SH_C0 * c[ch] + 0.5).clamp(0.0, 1.0)).abs() < 1e-15);
        }
        assert_eq!(eval_sh(&[0.0; 48], dir, 3).unwrap(), [0.5; 3]);
        assert!(eval_sh(&c, [0.3, 0.3, 0.3], 0).is_err());
    }

    #[test]
    fn odd_bands_are_antisymmetric() {
        let mut coeffs = vec![0.0; 48];
        // bands 1 (k = 1..4) and 3 (k = 9..16) only, small enough to avoid clamping
        for k in (1..4).chain(9..16) {
            for c in 0..3 {
                coeffs[k * 3 + c] = 0.02 * ((k * 3 + c) as f64).sin();
            }
        }
        let d = normalize3([0.4, -0.7, 0.2]).unwrap();
        let a = eval_sh(&coeffs, d, 3).unwrap();
        let b = eval_sh(&coeffs, d.map(|v| -v), 3).unwrap();
        for c in 0..3 {
            assert!(((a[c] - 0.5) + (b[c] - 0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn sh_color_gradient() {
        let dirs = vec![normalize3([0.1, 0.2, 0.9]).unwrap(), normalize3([-0.5, 0.1, 0.3]).unwrap()];
        let coeffs: Vec<f64> = (0..2 * 27).map(|i| 0.03 * ((i as f64) * 0.7).cos()).collect();
        let c = Tensor::new(&[2, 27], coeffs).unwrap();
        let r = check_gradients(
            "sh_color",
            &[c],
            &[true],
            move |tape, v| tape.custom(Rc::new(ShColorOp::new(2, dirs.clone())?), &[v[0]]),
            FdOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn look_at_is_rigid_and_centers_target() {
        let cam = Camera::look_at(0, [1.0, -0.5, -2.5], [0.0, 0.0, 0.0], (64, 48), 60.0).unwrap();
        let (u, v, z) = cam.project([0.0, 0.0, 0.0], 0.01).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        assert!((z - norm3([1.0, -0.5, -2.5])).abs() < 1e-9);
        let c = cam.center();
        assert!(norm3(sub3(c, [1.0, -0.5, -2.5])) < 1e-12);
    }

    proptest! {
        #[test]
        fn covariance_is_psd_with_softplus_eigenvalues(
            s in proptest::array::uniform3(-4.0f64..3.0),
            q in proptest::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let sig = assemble_covariance(s, q).unwrap();
            let e = eigvals(&sig);
            prop_assert!(e[0] >= -1e-6);
            let mut want: Vec<f64> = s.iter().map(|&v| softplus(v).powi(2)).collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in e.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b));
            }
            // sign flip of the quaternion leaves Σ unchanged
            let flipped = assemble_covariance(s, q.map(|v| -v)).unwrap();
            for (a, b) in sig.iter().zip(flipped) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let r = quat_to_rot(q).unwrap();
            let rr = Matrix3::from_fn(|i, j| r[i][j]);
            prop_assert!((rr.transpose() * rr - Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!((rr.determinant() - 1.0).abs() < 1e-6);
        }
    }
}
