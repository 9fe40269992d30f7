use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, for_each_chunk, Shape4, Tensor};
use crate::error::{expect_dim, Error, Result};
use crate::{instrument, Scalar};

/// Geometry of a 2-D convolution (or of its transpose).
///
/// Convolutions are cross-correlations: the kernel is not flipped. For a
/// transposed convolution `in_ch`/`out_ch` describe the transposed operator
/// itself, and the weight is laid out `(in_ch, out_ch / groups, kh, kw)`,
/// which is the weight of the forward convolution it is the adjoint of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub bias: bool,
    pub transposed: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation, one group, with bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            bias: true,
            transposed: false,
        }
    }

    /// Square `k x k` convolution whose padding preserves spatial size at stride 1.
    pub fn same(in_ch: usize, out_ch: usize, k: usize, dilation: usize) -> Self {
        let pad = dilation * (k - 1) / 2;
        Self::new(in_ch, out_ch, (k, k))
            .padding((pad, pad))
            .dilation((dilation, dilation))
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_ch,
            self.out_ch,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
            self.groups,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::invalid("conv spec", format!("zero extent in {self:?}")));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::invalid(
                "conv spec",
                format!(
                    "groups {} must divide channels {}->{}",
                    self.groups, self.in_ch, self.out_ch
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape4 {
        let (kh, kw) = self.kernel;
        if self.transposed {
            Shape4::new(self.in_ch, self.out_ch / self.groups, kh, kw)
        } else {
            Shape4::new(self.out_ch, self.in_ch / self.groups, kh, kw)
        }
    }

    /// Inputs contributing to one output of the (non-transposed) convolution.
    pub fn fan_in(&self) -> usize {
        let ws = self.weight_shape();
        ws.c * ws.h * ws.w
    }

    pub fn num_params(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_ch } else { 0 }
    }

    /// Output spatial size; `None` if the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.transposed {
            let t = |i: usize, k: usize, s: usize, p: usize, d: usize| {
                ((i - 1) * s + d * (k - 1) + 1).checked_sub(2 * p).filter(|&o| o >= 1)
            };
            Some((
                t(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
                t(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
            ))
        } else {
            let f = |i: usize, k: usize, s: usize, p: usize, d: usize| {
                (i + 2 * p).checked_sub(d * (k - 1) + 1).map(|v| v / s + 1)
            };
            Some((
                f(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
                f(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
            ))
        }
    }

    /// Multiply-accumulates of one forward application at input size `h x w`.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> Option<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let taps = (kh * kw) as u64;
        Some(if self.transposed {
            (n * self.in_ch * h * w) as u64 * (self.out_ch / self.groups) as u64 * taps
        } else {
            (n * self.out_ch * oh * ow) as u64 * (self.in_ch / self.groups) as u64 * taps
        })
    }

    /// Nominal FLOPs of one forward application: two per MAC plus one per bias add.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> Option<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        let bias = if self.bias {
            (n * self.out_ch * oh * ow) as u64
        } else {
            0
        };
        Some(2 * self.macs(n, h, w)? + bias)
    }
}

/// Weights and optional bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(spec: ConvSpec, weight: Tensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::invalid(
                "conv params",
                format!("weight {} but spec needs {}", weight.shape(), spec.weight_shape()),
            ));
        }
        match (&bias, spec.bias) {
            (Some(b), true) => expect_dim("conv params", "bias", spec.out_ch, b.len())?,
            (None, false) => {}
            _ => return Err(Error::invalid("conv params", "bias presence disagrees with spec")),
        }
        Ok(Self { spec, weight, bias })
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        spec.validate().expect("invalid conv spec");
        Self {
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            bias: spec.bias.then(|| vec![T::zero(); spec.out_ch]),
        }
    }

    /// Fan-in scaled uniform weights in `±sqrt(1 / fan_in)`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        spec.validate().expect("invalid conv spec");
        let bound = (1.0 / spec.fan_in() as f64).sqrt();
        Self {
            spec,
            weight: Tensor::uniform(spec.weight_shape(), -bound, bound, rng),
            bias: spec.bias.then(|| vec![T::zero(); spec.out_ch]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn set_zero(&mut self) {
        self.weight.fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            spec: self.spec,
            weight: self.weight.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }
}

/// Loop bounds shared by the three convolution kernels, always expressed for
/// the forward direction (input -> output).
#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    groups: usize,
    icg: usize,
    ocg: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
}

impl Geom {
    fn forward(spec: &ConvSpec, n: usize, ih: usize, iw: usize, oh: usize, ow: usize) -> Self {
        let (icg, ocg) = if spec.transposed {
            (spec.out_ch / spec.groups, spec.in_ch / spec.groups)
        } else {
            (spec.in_ch / spec.groups, spec.out_ch / spec.groups)
        };
        Self {
            n,
            groups: spec.groups,
            icg,
            ocg,
            ih,
            iw,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            dh: spec.dilation.0,
            dw: spec.dilation.1,
        }
    }

    fn ic(&self) -> usize {
        self.groups * self.icg
    }

    fn oc(&self) -> usize {
        self.groups * self.ocg
    }
}

/// Output indices `o` in `[lo, hi)` whose input index `o * stride + off` lies in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = in_len as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Unrolled dot product with a fixed summation order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn forward_kernel<T: Scalar>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let g = *g;
    let (oplane, iplane, oc, ic) = (g.oh * g.ow, g.ih * g.iw, g.oc(), g.ic());
    for_each_chunk(out, oplane, |idx, plane| {
        let (b, o) = (idx / oc, idx % oc);
        let grp = o / g.ocg;
        plane.fill(bias.map_or(T::zero(), |bb| bb[o]));
        for icl in 0..g.icg {
            let c = grp * g.icg + icl;
            let xin = &x[(b * ic + c) * iplane..][..iplane];
            let wbase = (o * g.icg + icl) * g.kh * g.kw;
            for ky in 0..g.kh {
                let offy = (ky * g.dh) as isize - g.ph as isize;
                let (y0, y1) = valid_range(g.oh, g.ih, g.sh, offy);
                for kx in 0..g.kw {
                    let wv = w[wbase + ky * g.kw + kx];
                    let offx = (kx * g.dw) as isize - g.pw as isize;
                    let (x0, x1) = valid_range(g.ow, g.iw, g.sw, offx);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = ((oy * g.sh) as isize + offy) as usize;
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &xin[iy * g.iw..(iy + 1) * g.iw];
                        if g.sw == 1 {
                            let i0 = (x0 as isize + offx) as usize;
                            for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[i0..i0 + x1 - x0]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * irow[((ox * g.sw) as isize + offx) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the forward input; overwrites `gx`.
fn input_grad_kernel<T: Scalar>(g: &Geom, gy: &[T], w: &[T], gx: &mut [T]) {
    let g = *g;
    let (oplane, iplane, oc, ic) = (g.oh * g.ow, g.ih * g.iw, g.oc(), g.ic());
    for_each_chunk(gx, iplane, |idx, plane| {
        let (b, c) = (idx / ic, idx % ic);
        let (grp, icl) = (c / g.icg, c % g.icg);
        plane.fill(T::zero());
        for ol in 0..g.ocg {
            let o = grp * g.ocg + ol;
            let gyp = &gy[(b * oc + o) * oplane..][..oplane];
            let wbase = (o * g.icg + icl) * g.kh * g.kw;
            for ky in 0..g.kh {
                let offy = (ky * g.dh) as isize - g.ph as isize;
                let (y0, y1) = valid_range(g.oh, g.ih, g.sh, offy);
                for kx in 0..g.kw {
                    let wv = w[wbase + ky * g.kw + kx];
                    let offx = (kx * g.dw) as isize - g.pw as isize;
                    let (x0, x1) = valid_range(g.ow, g.iw, g.sw, offx);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = ((oy * g.sh) as isize + offy) as usize;
                        let grow = &gyp[oy * g.ow..(oy + 1) * g.ow];
                        let xrow = &mut plane[iy * g.iw..(iy + 1) * g.iw];
                        if g.sw == 1 {
                            let i0 = (x0 as isize + offx) as usize;
                            for (xi, &gv) in xrow[i0..i0 + x1 - x0].iter_mut().zip(&grow[x0..x1]) {
                                *xi += wv * gv;
                            }
                        } else {
                            for ox in x0..x1 {
                                xrow[((ox * g.sw) as isize + offx) as usize] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the forward weight; accumulates into `gw`.
fn weight_grad_kernel<T: Scalar>(g: &Geom, x: &[T], gy: &[T], gw: &mut [T]) {
    let g = *g;
    let (oplane, iplane, oc, ic) = (g.oh * g.ow, g.ih * g.iw, g.oc(), g.ic());
    let per_out = g.icg * g.kh * g.kw;
    for_each_chunk(gw, per_out, |o, chunk| {
        let grp = o / g.ocg;
        for b in 0..g.n {
            let gyp = &gy[(b * oc + o) * oplane..][..oplane];
            for icl in 0..g.icg {
                let c = grp * g.icg + icl;
                let xin = &x[(b * ic + c) * iplane..][..iplane];
                for ky in 0..g.kh {
                    let offy = (ky * g.dh) as isize - g.ph as isize;
                    let (y0, y1) = valid_range(g.oh, g.ih, g.sh, offy);
                    for kx in 0..g.kw {
                        let offx = (kx * g.dw) as isize - g.pw as isize;
                        let (x0, x1) = valid_range(g.ow, g.iw, g.sw, offx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = ((oy * g.sh) as isize + offy) as usize;
                            let grow = &gyp[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &xin[iy * g.iw..(iy + 1) * g.iw];
                            if g.sw == 1 {
                                let i0 = (x0 as isize + offx) as usize;
                                acc += dot(&grow[x0..x1], &irow[i0..i0 + x1 - x0]);
                            } else {
                                for ox in x0..x1 {
                                    acc += grow[ox] * irow[((ox * g.sw) as isize + offx) as usize];
                                }
                            }
                        }
                        chunk[(icl * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
}

fn bias_grad<T: Scalar>(gy: &Tensor<T>, gb: &mut [T]) {
    let s = gy.shape();
    for (o, slot) in gb.iter_mut().enumerate() {
        let mut acc = T::zero();
        for b in 0..s.n {
            acc += gy.plane(b, o).iter().copied().sum::<T>();
        }
        *slot += acc;
    }
}

fn check_forward_input<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    p: &ConvParams<T>,
    transposed: bool,
) -> Result<(usize, usize)> {
    if p.spec.transposed != transposed {
        return Err(Error::invalid(
            op,
            if transposed {
                "expects a transposed conv spec"
            } else {
                "got a transposed conv spec"
            },
        ));
    }
    expect_dim(op, "c", p.spec.in_ch, x.shape().c)?;
    p.spec.output_hw(x.shape().h, x.shape().w).ok_or_else(|| {
        Error::invalid(
            op,
            format!("kernel {:?} does not fit input {}", p.spec.kernel, x.shape()),
        )
    })
}

/// 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (oh, ow) = check_forward_input("conv2d", x, p, false)?;
    let s = x.shape();
    let out_shape = Shape4::new(s.n, p.spec.out_ch, oh, ow);
    let g = Geom::forward(&p.spec, s.n, s.h, s.w, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    forward_kernel(&g, x.data(), p.weight.data(), p.bias.as_deref(), out.data_mut());
    instrument::add_flops(p.spec.flops(s.n, s.h, s.w).unwrap_or(0));
    check_finite(&out, "conv2d")?;
    Ok(out)
}

/// Vector-Jacobian products of [`conv2d`]: `(gx, gw, gb)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Vec<T>>)> {
    let mut grad = ConvParams::zeros(p.spec);
    let gx = conv2d_backward_acc(x, p, gy, &mut grad)?;
    Ok((gx, grad.weight, grad.bias))
}

/// Like [`conv2d_backward`], but adds the parameter gradients into `grad`.
pub fn conv2d_backward_acc<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    gy: &Tensor<T>,
    grad: &mut ConvParams<T>,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_forward_input("conv2d_backward", x, p, false)?;
    let s = x.shape();
    super::same_shape("conv2d_backward", Shape4::new(s.n, p.spec.out_ch, oh, ow), gy.shape())?;
    let g = Geom::forward(&p.spec, s.n, s.h, s.w, oh, ow);
    let mut gx = Tensor::zeros(s);
    input_grad_kernel(&g, gy.data(), p.weight.data(), gx.data_mut());
    weight_grad_kernel(&g, x.data(), gy.data(), grad.weight.data_mut());
    if let Some(gb) = &mut grad.bias {
        bias_grad(gy, gb);
    }
    check_finite(&gx, "conv2d_backward")?;
    Ok(gx)
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same geometry,
/// plus a per-channel bias.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (oh, ow) = check_forward_input("conv_transpose2d", x, p, true)?;
    let s = x.shape();
    // forward-direction geometry: input is our output, output is our input
    let g = Geom::forward(&p.spec, s.n, oh, ow, s.h, s.w);
    let mut out = Tensor::zeros(Shape4::new(s.n, p.spec.out_ch, oh, ow));
    input_grad_kernel(&g, x.data(), p.weight.data(), out.data_mut());
    if let Some(b) = &p.bias {
        for n in 0..s.n {
            for (o, &bv) in b.iter().enumerate() {
                out.plane_mut(n, o).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    instrument::add_flops(p.spec.flops(s.n, s.h, s.w).unwrap_or(0));
    check_finite(&out, "conv_transpose2d")?;
    Ok(out)
}

/// Vector-Jacobian products of [`conv_transpose2d`]: `(gx, gw, gb)`.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Vec<T>>)> {
    let mut grad = ConvParams::zeros(p.spec);
    let gx = conv_transpose2d_backward_acc(x, p, gy, &mut grad)?;
    Ok((gx, grad.weight, grad.bias))
}

pub fn conv_transpose2d_backward_acc<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    gy: &Tensor<T>,
    grad: &mut ConvParams<T>,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_forward_input("conv_transpose2d_backward", x, p, true)?;
    let s = x.shape();
    super::same_shape(
        "conv_transpose2d_backward",
        Shape4::new(s.n, p.spec.out_ch, oh, ow),
        gy.shape(),
    )?;
    let g = Geom::forward(&p.spec, s.n, oh, ow, s.h, s.w);
    // the input gradient of an adjoint is the forward map itself
    let mut gx = Tensor::zeros(s);
    forward_kernel(&g, gy.data(), p.weight.data(), None, gx.data_mut());
    weight_grad_kernel(&g, gy.data(), x.data(), grad.weight.data_mut());
    if let Some(gb) = &mut grad.bias {
        bias_grad(gy, gb);
    }
    check_finite(&gx, "conv_transpose2d_backward")?;
    Ok(gx)
}
