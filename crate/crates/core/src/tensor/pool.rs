use super::{check_finite, Shape4, Tensor};
use crate::error::{Error, Result};
use crate::{instrument, Scalar};

/// Stride and window length of adaptive pooling along one axis.
///
/// The stride is `floor(input / output)` and the window is
/// `input - (output - 1) * stride`, so the last window always ends at the
/// last input cell. Windows may overlap when `output` does not divide `input`.
pub fn pool_window(input: usize, output: usize) -> (usize, usize) {
    let stride = input / output;
    (stride, input - (output - 1) * stride)
}

fn check_target(x: Shape4, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_h > x.h || out_w == 0 || out_w > x.w {
        return Err(Error::invalid(
            "adaptive_avg_pool2d",
            format!("target {out_h}x{out_w} outside 1..={}x1..={}", x.h, x.w),
        ));
    }
    Ok(())
}

/// Adaptive average pooling to an `out_h x out_w` grid.
pub fn adaptive_avg_pool2d<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check_target(s, out_h, out_w)?;
    let (sv, kv) = pool_window(s.h, out_h);
    let (sh, kh) = pool_window(s.w, out_w);
    let scale = T::one() / T::of((kv * kh) as f64);
    let mut out = Tensor::zeros(s.with_hw(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..out_h {
                for j in 0..out_w {
                    let mut acc = T::zero();
                    for r in i * sv..i * sv + kv {
                        acc += src[r * s.w + j * sh..r * s.w + j * sh + kh].iter().copied().sum::<T>();
                    }
                    dst[i * out_w + j] = acc * scale;
                }
            }
        }
    }
    instrument::add_flops((s.n * s.c * out_h * out_w * (kv * kh + 1)) as u64);
    check_finite(&out, "adaptive_avg_pool2d")?;
    Ok(out)
}

/// Spreads each output gradient uniformly over its pooling window.
pub fn adaptive_avg_pool2d_backward<T: Scalar>(input: Shape4, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let g = gy.shape();
    check_target(input, g.h, g.w)?;
    super::expect_dim_nc("adaptive_avg_pool2d_backward", input, g)?;
    let (sv, kv) = pool_window(input.h, g.h);
    let (sh, kh) = pool_window(input.w, g.w);
    let scale = T::one() / T::of((kv * kh) as f64);
    let mut gx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let src = gy.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for i in 0..g.h {
                for j in 0..g.w {
                    let v = src[i * g.w + j] * scale;
                    for r in i * sv..i * sv + kv {
                        dst[r * input.w + j * sh..r * input.w + j * sh + kh]
                            .iter_mut()
                            .for_each(|d| *d += v);
                    }
                }
            }
        }
    }
    Ok(gx)
}
