//! Training losses with their gradients: Charbonnier, frequency-domain L1 and
//! their weighted sum. Values are accumulated in f64; every loss is a mean
//! over elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2d, ifft2d, ComplexTensor};
use crate::tensor::{same_shape, Tensor};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("loss config", format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("loss config", format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `mean(sqrt((r - y)^2 + eps^2))`.
pub fn charbonnier<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Result<f64> {
    same_shape("charbonnier", r.shape(), y.shape())?;
    // summing the excess over eps keeps r == y exactly at eps
    let excess: f64 = r
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            (d * d + eps * eps).sqrt() - eps
        })
        .sum();
    Ok(excess / r.numel() as f64 + eps)
}

/// Charbonnier value and its gradient with respect to `r`.
pub fn charbonnier_with_grad<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    let value = charbonnier(r, y, eps)?;
    let n = r.numel() as f64;
    let grad = r.zip_map(y, |a, b| {
        let d = (a - b).as_f64();
        T::of(d / (d * d + eps * eps).sqrt() / n)
    })?;
    Ok((value, grad))
}

fn spectrum_diff<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> Result<ComplexTensor<f64>> {
    same_shape("fft_loss", r.shape(), y.shape())?;
    // the transform is linear, so one transform of the difference suffices
    let d = r.zip_map(y, |a, b| a - b)?.cast::<f64>();
    Ok(fft2d(&d))
}

/// `mean(|Re dF| + |Im dF|)` where `dF = F(r) - F(y)`, averaged over all bins.
pub fn fft_loss<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let f = spectrum_diff(r, y)?;
    let total: f64 = f.re.data().iter().chain(f.im.data()).map(|v| v.abs()).sum();
    Ok(total / r.numel() as f64)
}

/// FFT loss and its gradient: the real part of the adjoint transform of the
/// sign pattern `sign(Re dF) + i sign(Im dF)`, over the bin count.
pub fn fft_loss_with_grad<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let f = spectrum_diff(r, y)?;
    let n = r.numel() as f64;
    let total: f64 = f.re.data().iter().chain(f.im.data()).map(|v| v.abs()).sum();
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let s = ComplexTensor::new(f.re.map(sign), f.im.map(sign))?;
    let back = ifft2d(&s);
    let grad = Tensor::from_vec(r.shape(), back.re.data().iter().map(|&v| T::of(v / n)).collect())?;
    Ok((total / n, grad))
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub charbonnier: f64,
    pub fft: f64,
    pub total: f64,
}

/// `charbonnier + lambda * fft_loss`.
pub fn total_loss<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let charbonnier = charbonnier(r, y, cfg.epsilon)?;
    let fft = fft_loss(r, y)?;
    Ok(LossBreakdown {
        charbonnier,
        fft,
        total: combine(charbonnier, fft, cfg.lambda),
    })
}

fn combine(charbonnier: f64, fft: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        charbonnier
    } else {
        charbonnier + lambda * fft
    }
}

/// Total loss and its gradient. With `lambda = 0` the frequency path is
/// skipped entirely, so the gradient equals the Charbonnier gradient bit for bit.
pub fn total_loss_with_grad<T: Scalar>(
    r: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let (charbonnier, mut grad) = charbonnier_with_grad(r, y, cfg.epsilon)?;
    let fft = if cfg.lambda == 0.0 {
        fft_loss(r, y)?
    } else {
        let (fft, gf) = fft_loss_with_grad(r, y)?;
        grad.axpy(T::of(cfg.lambda), &gf)?;
        fft
    };
    let total = combine(charbonnier, fft, cfg.lambda);
    Ok((
        LossBreakdown {
            charbonnier,
            fft,
            total,
        },
        grad,
    ))
}
