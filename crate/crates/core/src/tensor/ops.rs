use super::{check_finite, same_shape, Shape4, Tensor};
use crate::error::{Error, Result};
use crate::{instrument, Scalar};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    instrument::add_flops(x.numel() as u64);
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] from its output; the gradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(gy, |y, g| if y > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    instrument::add_flops(x.numel() as u64);
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward of [`sigmoid`] from its output `s`: `gy * s * (1 - s)`.
pub fn sigmoid_backward<T: Scalar>(s: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    s.zip_map(gy, |s, g| g * s * (T::one() - s))
}

/// Concatenates along the channel axis, preserving order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut c = 0;
    for x in xs {
        let s = x.shape();
        crate::error::expect_dim("concat_channels", "n", first.n, s.n)?;
        crate::error::expect_dim("concat_channels", "h", first.h, s.h)?;
        crate::error::expect_dim("concat_channels", "w", first.w, s.w)?;
        c += s.c;
    }
    let out_shape = first.with_c(c);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for x in xs {
            let per = x.shape().c * first.plane();
            data.extend_from_slice(&x.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: splits into pieces with the given channel counts.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    let total: usize = sizes.iter().sum();
    crate::error::expect_dim("split_channels", "c", s.c, total)?;
    let plane = s.plane();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &c in sizes {
        let shape = Shape4::try_new(s.n, c, s.h, s.w)?;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + c * plane]);
        }
        out.push(Tensor::from_vec(shape, data)?);
        start += c;
    }
    Ok(out)
}

/// Broadcast result shape: each axis must match or be 1 on one side.
fn broadcast_shape(op: &'static str, a: Shape4, b: Shape4) -> Result<Shape4> {
    let axis = |name: &'static str, x: usize, y: usize| -> Result<usize> {
        if x == y || y == 1 {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else {
            Err(Error::Dimension {
                op,
                axis: name,
                expected: x,
                got: y,
            })
        }
    };
    Ok(Shape4 {
        n: axis("n", a.n, b.n)?,
        c: axis("c", a.c, b.c)?,
        h: axis("h", a.h, b.h)?,
        w: axis("w", a.w, b.w)?,
    })
}

/// Element strides of `s` when read against `out`; broadcast axes get stride 0.
fn strides(s: Shape4, out: Shape4) -> [usize; 4] {
    let full = [s.c * s.h * s.w, s.h * s.w, s.w, 1];
    let dims = s.dims();
    let odims = out.dims();
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if dims[i] == 1 && odims[i] != 1 { 0 } else { full[i] };
    }
    st
}

fn for_each_index(out: Shape4, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut k = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out.w {
                    f(k, ba + w * sa[3], bb + w * sb[3]);
                    k += 1;
                }
            }
        }
    }
}

fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let (sa, sb) = (strides(a.shape(), out), strides(b.shape(), out));
    let mut data = vec![T::zero(); out.numel()];
    let (ad, bd) = (a.data(), b.data());
    for_each_index(out, sa, sb, |k, i, j| data[k] = f(ad[i], bd[j]));
    Tensor::from_vec(out, data)
}

/// Elementwise product with broadcasting over size-1 axes.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = binary("mul", a, b, |x, y| x * y)?;
    instrument::add_flops(out.numel() as u64);
    check_finite(&out, "mul")?;
    Ok(out)
}

/// Elementwise sum with broadcasting over size-1 axes.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = binary("add", a, b, |x, y| x + y)?;
    instrument::add_flops(out.numel() as u64);
    check_finite(&out, "add")?;
    Ok(out)
}

/// Sums `gy`-shaped values into `target` following broadcast strides.
fn reduce_into<T: Scalar>(target: Shape4, gy: Shape4, vals: impl Fn(usize, usize) -> T) -> Result<Tensor<T>> {
    let st = strides(target, gy);
    let mut out = Tensor::zeros(target);
    let data = out.data_mut();
    for_each_index(gy, st, st, |k, i, _| data[i] += vals(k, i));
    Ok(out)
}

/// Gradients of [`mul`] w.r.t. both operands.
pub fn mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() == b.shape() {
        same_shape("mul_backward", a.shape(), gy.shape())?;
        return Ok((gy.zip_map(b, |g, y| g * y)?, gy.zip_map(a, |g, x| g * x)?));
    }
    let out = broadcast_shape("mul_backward", a.shape(), b.shape())?;
    same_shape("mul_backward", out, gy.shape())?;
    let (sa, sb) = (strides(a.shape(), out), strides(b.shape(), out));
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    {
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        for_each_index(out, sa, sb, |k, i, j| {
            gad[i] += gd[k] * bd[j];
            gbd[j] += gd[k] * ad[i];
        });
    }
    Ok((ga, gb))
}

/// Gradients of [`add`]: `gy` summed over each operand's broadcast axes.
pub fn add_backward<T: Scalar>(a: Shape4, b: Shape4, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let out = broadcast_shape("add_backward", a, b)?;
    same_shape("add_backward", out, gy.shape())?;
    let gd = gy.data();
    Ok((reduce_into(a, out, |k, _| gd[k])?, reduce_into(b, out, |k, _| gd[k])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = sigmoid(&Tensor::<f64>::zeros(Shape4::new(1, 2, 3, 3)));
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relu_gradient_is_zero_at_and_below_zero() {
        let x = Tensor::<f64>::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let g = relu_backward(&relu(&x), &Tensor::full(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f32>::uniform(Shape4::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(Shape4::new(2, 1, 4, 4), -1.0, 1.0, &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().c, 4);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let parts = split_channels(&cat, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape4::new(1, 1, 4, 4));
        let b = Tensor::<f32>::zeros(Shape4::new(1, 1, 4, 5));
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn per_channel_broadcast_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::uniform(Shape4::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
        let s = Tensor::<f64>::from_fn(Shape4::new(2, 3, 1, 1), |n, c, _, _| (n * 3 + c) as f64);
        let y = mul(&x, &s).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for (a, b) in y.plane(n, c).iter().zip(x.plane(n, c)) {
                    assert_eq!(*a, b * (n * 3 + c) as f64);
                }
            }
        }
        let ones = Tensor::full(x.shape(), 1.0);
        assert_eq!(mul(&x, &ones).unwrap(), x);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let a = Tensor::<f32>::zeros(Shape4::new(1, 2, 4, 4));
        let b = Tensor::<f32>::zeros(Shape4::new(1, 3, 4, 4));
        assert!(mul(&a, &b).is_err());
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn broadcast_backward_sums_over_axes() {
        let a = Tensor::<f64>::full(Shape4::new(1, 2, 3, 3), 2.0);
        let b = Tensor::<f64>::full(Shape4::new(1, 2, 1, 1), 5.0);
        let gy = Tensor::full(a.shape(), 1.0);
        let (ga, gb) = mul_backward(&a, &b, &gy).unwrap();
        assert!(ga.data().iter().all(|&v| v == 5.0));
        assert!(gb.data().iter().all(|&v| v == 18.0));
        let (ga, gb) = add_backward(a.shape(), b.shape(), &gy).unwrap();
        assert!(ga.data().iter().all(|&v| v == 1.0));
        assert!(gb.data().iter().all(|&v| v == 9.0));
    }
}
