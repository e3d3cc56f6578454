//! Built-in differentiable ops.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    /// `exp(-x / 2)`, the Gaussian kernel applied to a squared distance.
    NegExpHalf,
    Abs,
    Sin,
    Cos,
    Square,
}

/// Right-hand operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Rhs<'t, T: Real> {
    Var(Var<'t, T>),
    Scalar(f64),
}

impl<'t, T: Real> From<Var<'t, T>> for Rhs<'t, T> {
    fn from(v: Var<'t, T>) -> Self {
        Rhs::Var(v)
    }
}

impl<T: Real> From<f64> for Rhs<'_, T> {
    fn from(c: f64) -> Self {
        Rhs::Scalar(c)
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::NegExpHalf => (-x * T::lit(0.5)).exp(),
            Activation::Abs => x.abs(),
            Activation::Sin => x.sin(),
            Activation::Cos => x.cos(),
            Activation::Square => x * x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    #[inline]
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::NegExpHalf => -y * T::lit(0.5),
            Activation::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sin => x.cos(),
            Activation::Cos => -x.sin(),
            Activation::Square => x + x,
        }
    }
}

/// `b` broadcasts against `a` when it is a scalar or its shape is a suffix
/// of `a`'s shape. Returns the length of the repeated block.
fn broadcast_block(a: &[usize], b: &[usize]) -> Result<usize> {
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        return Ok(nb);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(nb);
    }
    Err(Error::Shape(format!(
        "cannot broadcast {:?} against {:?} (only scalar or trailing-dimension broadcasting)",
        b, a
    )))
}

fn reduce_blocks<T: Real>(g: &[T], nb: usize) -> Vec<T> {
    let mut out = vec![T::zero(); nb];
    for chunk in g.chunks(nb) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn normalize_axis(axis: isize, ndim: usize) -> Result<usize> {
    let a = if axis < 0 { axis + ndim as isize } else { axis };
    if a < 0 || a as usize >= ndim {
        return Err(Error::Shape(format!("axis {axis} out of range for {ndim}-d tensor")));
    }
    Ok(a as usize)
}

/// (outer, len, inner) strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Which operand of [`gemm`] is read transposed.
#[derive(Clone, Copy)]
enum Layout {
    /// `a [m,k] · b [k,n]`
    Plain,
    /// `a [m,k] · (b [n,k])ᵀ`
    TransB,
    /// `(a [k,m])ᵀ · b [k,n]`
    TransA,
}

fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, layout: Layout) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    let (ki, mi, ni) = (k as isize, m as isize, n as isize);
    let (a_s, b_s) = match layout {
        Layout::Plain => ((ki, 1), (ni, 1)),
        Layout::TransB => ((ki, 1), (1, ki)),
        Layout::TransA => ((1, mi), (ni, 1)),
    };
    // SAFETY: sizes were checked above and every stride pattern addresses
    // exactly the m·k and k·n elements of the operands.
    unsafe { T::gemm_raw(m, k, n, a, a_s, b, b_s, &mut out) };
    out
}

impl<'t, T: Real> Var<'t, T> {
    pub fn elementwise(self, rhs: impl Into<Rhs<'t, T>>, kind: ElemKind) -> Result<Var<'t, T>> {
        match rhs.into() {
            Rhs::Scalar(c) => self.elementwise_scalar(T::lit(c), kind),
            Rhs::Var(b) => self.elementwise_var(b, kind),
        }
    }

    fn elementwise_scalar(self, c: T, kind: ElemKind) -> Result<Var<'t, T>> {
        let a = self.value();
        let f = move |x: T| match kind {
            ElemKind::Add => x + c,
            ElemKind::Sub => x - c,
            ElemKind::Mul => x * c,
            ElemKind::Div => x / c,
        };
        let out = a.map(f);
        self.tape.record(
            "elementwise_scalar",
            out,
            &[self],
            Box::new(move |_ins, _out, g| {
                let ga = match kind {
                    ElemKind::Add | ElemKind::Sub => g.clone(),
                    ElemKind::Mul => g.map(|x| x * c),
                    ElemKind::Div => g.map(|x| x / c),
                };
                Ok(vec![Some(ga)])
            }),
        )
    }

    fn elementwise_var(self, rhs: Var<'t, T>, kind: ElemKind) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let nb = broadcast_block(a.shape(), b.shape())?;
        let bd = b.data();
        let data: Vec<T> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    ElemKind::Add => x + y,
                    ElemKind::Sub => x - y,
                    ElemKind::Mul => x * y,
                    ElemKind::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        self.tape.record(
            "elementwise",
            out,
            &[self, rhs],
            Box::new(move |ins, _out, g| {
                let (a, b) = (&ins[0], &ins[1]);
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let (ga, gb_full): (Vec<T>, Vec<T>) = match kind {
                    ElemKind::Add => (gd.to_vec(), gd.to_vec()),
                    ElemKind::Sub => (gd.to_vec(), gd.iter().map(|&x| -x).collect()),
                    ElemKind::Mul => (
                        gd.iter().enumerate().map(|(i, &x)| x * bd[i % nb]).collect(),
                        gd.iter().zip(ad).map(|(&x, &av)| x * av).collect(),
                    ),
                    ElemKind::Div => (
                        gd.iter().enumerate().map(|(i, &x)| x / bd[i % nb]).collect(),
                        gd.iter()
                            .zip(ad)
                            .enumerate()
                            .map(|(i, (&x, &av))| {
                                let bv = bd[i % nb];
                                -x * av / (bv * bv)
                            })
                            .collect(),
                    ),
                };
                let gb = reduce_blocks(&gb_full, nb);
                Ok(vec![Some(Tensor::new(a.shape(), ga)?), Some(Tensor::new(b.shape(), gb)?)])
            }),
        )
    }

    pub fn add(self, rhs: impl Into<Rhs<'t, T>>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, ElemKind::Add)
    }

    pub fn sub(self, rhs: impl Into<Rhs<'t, T>>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, ElemKind::Sub)
    }

    pub fn mul(self, rhs: impl Into<Rhs<'t, T>>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, ElemKind::Mul)
    }

    pub fn div(self, rhs: impl Into<Rhs<'t, T>>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, ElemKind::Div)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul needs [m,k]x[k,n], got {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(&[m, n], gemm(a.data(), b.data(), m, k, n, Layout::Plain))?;
        self.tape.record(
            "matmul",
            out,
            &[self, rhs],
            Box::new(move |ins, _out, g| {
                let (a, b) = (&ins[0], &ins[1]);
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let ga = gemm(gd, bd, m, n, k, Layout::TransB);
                let gb = gemm(ad, gd, k, m, n, Layout::TransA);
                Ok(vec![Some(Tensor::new(&[m, k], ga)?), Some(Tensor::new(&[k, n], gb)?)])
            }),
        )
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t, T>> {
        let out = self.value().map(|x| kind.apply(x));
        self.tape.record(
            "activation",
            out,
            &[self],
            Box::new(move |ins, out, g| {
                let x = ins[0].data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .zip(out.data())
                    .map(|((&gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                    .collect();
                Ok(vec![Some(Tensor::new(ins[0].shape(), data)?)])
            }),
        )
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.activation(Activation::Softplus)
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.activation(Activation::Abs)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.activation(Activation::Square)
    }

    /// Numerically stable softmax along `axis` (negative counts from the end).
    pub fn softmax(self, axis: isize) -> Result<Var<'t, T>> {
        let x = self.value();
        let ax = normalize_axis(axis, x.ndim())?;
        let (outer, len, inner) = axis_split(x.shape(), ax);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(xd[idx(k)]);
                }
                let mut s = T::zero();
                for k in 0..len {
                    let e = (xd[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[idx(k)] /= s;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.tape.record(
            "softmax",
            out,
            &[self],
            Box::new(move |ins, out, g| {
                let (yd, gd) = (out.data(), g.data());
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(ins[0].shape(), gx)?)])
            }),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.tape.record(
            "sum",
            Tensor::scalar(s),
            &[self],
            Box::new(|ins, _out, g| Ok(vec![Some(Tensor::full(ins[0].shape(), g.data()[0]))])),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().len().max(1);
        self.sum()?.mul(1.0 / n as f64)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: isize) -> Result<Var<'t, T>> {
        let x = self.value();
        let ax = normalize_axis(axis, x.ndim())?;
        let (outer, len, inner) = axis_split(x.shape(), ax);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(ax);
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape.record(
            "sum_axis",
            Tensor::new(&shape, out)?,
            &[self],
            Box::new(move |ins, _out, g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(ins[0].shape(), gx)?)])
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.record(
            "reshape",
            out,
            &[self],
            Box::new(|ins, _out, g| Ok(vec![Some(g.clone().reshape(ins[0].shape())?)])),
        )
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.cols();
        if start + len > c {
            return Err(Error::Shape(format!(
                "column slice {}..{} out of range for shape {:?}",
                start,
                start + len,
                x.shape()
            )));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.tape.record(
            "slice_cols",
            Tensor::new(&shape, data)?,
            &[self],
            Box::new(move |ins, _out, g| {
                let mut gx = Tensor::zeros(ins[0].shape());
                for r in 0..rows {
                    gx.row_mut(r)[start..start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Gather rows of a `[n, c]` tensor.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(Error::Shape(format!("gather_rows needs a 2-d tensor, got {:?}", x.shape())));
        }
        let n = x.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row index {bad} out of range for {n} rows")));
        }
        let out = x.select_rows(&index);
        self.tape.record(
            "gather_rows",
            out,
            &[self],
            Box::new(move |ins, _out, g| {
                let mut gx = Tensor::zeros(ins[0].shape());
                for (k, &i) in index.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }
}

/// Concatenate along the last axis; all inputs share the leading shape.
pub fn concat_cols<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let lead = &values[0].shape()[..values[0].ndim() - 1];
    for v in &values {
        if &v.shape()[..v.ndim() - 1] != lead {
            return Err(Error::Shape(format!(
                "concat leading shapes differ: {:?} vs {:?}",
                values[0].shape(),
                v.shape()
            )));
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
    let total: usize = widths.iter().sum();
    let rows = values[0].rows();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            data.extend_from_slice(v.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    tape.record(
        "concat_cols",
        Tensor::new(&shape, data)?,
        parts,
        Box::new(move |ins, _out, g| {
            let mut grads: Vec<Tensor<T>> = ins.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in 0..rows {
                let grow = g.row(r);
                let mut off = 0;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.row_mut(r).copy_from_slice(&grow[off..off + w]);
                    off += w;
                }
            }
            Ok(grads.into_iter().map(Some).collect())
        }),
    )
}
