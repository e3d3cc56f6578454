use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1 / MSE)` for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(psnr_slices(a.data(), b.data()))
}

pub(crate) fn psnr_slices<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mse = a.iter().zip(b).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}
