//! Un-normalised 2-D discrete Fourier transform of every (n, c) plane.
//!
//! Transforms are computed in f64 with `rustfft` (row pass, then column
//! pass) and converted back to the tensor's scalar type.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::tensor::{same_shape, Shape4, Tensor};
use crate::Scalar;

/// Real and imaginary parts of a spectrum, stored as two same-shape tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T: Scalar> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        same_shape("complex tensor", re.shape(), im.shape())?;
        Ok(Self { re, im })
    }

    pub fn shape(&self) -> Shape4 {
        self.re.shape()
    }

    /// Sum of squared magnitudes over all bins.
    pub fn energy(&self) -> f64 {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r.as_f64().powi(2) + i.as_f64().powi(2))
            .sum()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Direction {
    Forward,
    Inverse,
}

struct Plans {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(h: usize, w: usize, dir: Direction) -> Self {
        let mut planner = FftPlanner::new();
        let plan = |p: &mut FftPlanner<f64>, len| match dir {
            Direction::Forward => p.plan_fft_forward(len),
            Direction::Inverse => p.plan_fft_inverse(len),
        };
        Self {
            rows: plan(&mut planner, w),
            cols: plan(&mut planner, h),
        }
    }

    /// Transforms one row-major `h x w` plane in place.
    fn run(&self, buf: &mut [Complex<f64>], h: usize, w: usize, col: &mut Vec<Complex<f64>>) {
        self.rows.process(buf);
        col.resize(h, Complex::default());
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            self.cols.process(col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
    }
}

fn transform<T: Scalar>(re: &Tensor<T>, im: Option<&Tensor<T>>, dir: Direction) -> ComplexTensor<T> {
    let s = re.shape();
    let plans = Plans::new(s.h, s.w, dir);
    let mut out_re = Tensor::zeros(s);
    let mut out_im = Tensor::zeros(s);
    let mut buf = vec![Complex::default(); s.plane()];
    let mut col = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            let r = re.plane(n, c);
            match im {
                Some(im) => {
                    for ((b, &x), &y) in buf.iter_mut().zip(r).zip(im.plane(n, c)) {
                        *b = Complex::new(x.as_f64(), y.as_f64());
                    }
                }
                None => {
                    for (b, &x) in buf.iter_mut().zip(r) {
                        *b = Complex::new(x.as_f64(), 0.0);
                    }
                }
            }
            plans.run(&mut buf, s.h, s.w, &mut col);
            for (o, b) in out_re.plane_mut(n, c).iter_mut().zip(&buf) {
                *o = T::of(b.re);
            }
            for (o, b) in out_im.plane_mut(n, c).iter_mut().zip(&buf) {
                *o = T::of(b.im);
            }
        }
    }
    crate::instrument::add_flops(fft_flops(s));
    ComplexTensor {
        re: out_re,
        im: out_im,
    }
}

/// Nominal `5 N log2 N` cost per plane.
fn fft_flops(s: Shape4) -> u64 {
    let n = s.plane() as f64;
    ((s.n * s.c) as f64 * 5.0 * n * n.log2().max(1.0)) as u64
}

/// Forward transform `X[u, v] = sum x[i, j] exp(-2 pi i (u i / h + v j / w))`.
pub fn fft2d<T: Scalar>(x: &Tensor<T>) -> ComplexTensor<T> {
    transform(x, None, Direction::Forward)
}

/// Un-normalised inverse transform (the adjoint of [`fft2d`]): `ifft2d(fft2d(x)) = h w x`.
pub fn ifft2d<T: Scalar>(x: &ComplexTensor<T>) -> ComplexTensor<T> {
    transform(&x.re, Some(&x.im), Direction::Inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::<f64>::zeros(Shape4::new(1, 1, 4, 8));
        x.set(0, 0, 0, 0, 1.0);
        let f = fft2d(&x);
        assert!(f.re.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(f.im.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_plane_only_dc() {
        let x = Tensor::<f64>::full(Shape4::new(1, 2, 4, 6), 0.5);
        let f = fft2d(&x);
        for c in 0..2 {
            for (k, &v) in f.re.plane(0, c).iter().enumerate() {
                let expect = if k == 0 { 12.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
        assert!(f.im.max_abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip_scales_by_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(Shape4::new(2, 3, 5, 8), -1.0, 1.0, &mut rng);
        let back = ifft2d(&fft2d(&x));
        assert!(back.re.max_abs_diff(&x.map(|v| v * 40.0)) < 1e-12);
        assert!(back.im.max_abs() < 1e-12);
    }
}
