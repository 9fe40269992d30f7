//! Strip-pooling attention: SP, MKSP, AR and the blur-aware attention block.
//!
//! Strip pooling averages features along rows and columns. MKSP repeats this
//! with `n` strips per axis for every `n` in a [`KernelSet`]: the vertical
//! tensor is `h x n`, the horizontal one `n x w`, both pooled with the
//! floor-stride window law of [`pool_window`](crate::tensor::pool_window).
//! After a per-scale convolution the two are fused back to `h x w` by
//! nearest-strip lookup, concatenated over scales, and mapped to a sigmoid
//! mask. BA gates the input with that mask and refines the result with a
//! local (AR) mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{impl_module, join, Block, Factory, Module};
use crate::tensor::{
    adaptive_avg_pool2d, adaptive_avg_pool2d_backward, concat_channels, conv2d,
    conv2d_backward_acc, mul, mul_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    split_channels, ConvParams, ConvSpec, Tensor,
};
use crate::{instrument, Scalar};

/// Strip counts per axis used by MKSP, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct KernelSet(Vec<usize>);

impl KernelSet {
    pub fn new(ns: Vec<usize>) -> Result<Self> {
        if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "kernel set",
                format!("{ns:?} must be non-empty, >= 1 and strictly increasing"),
            ));
        }
        Ok(Self(ns))
    }

    pub fn scales(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn check_fits(&self, h: usize, w: usize) -> Result<()> {
        if self.max() > h.min(w) {
            return Err(Error::invalid(
                "kernel set",
                format!("largest strip count {} exceeds feature size {h}x{w}", self.max()),
            ));
        }
        Ok(())
    }
}

impl Default for KernelSet {
    fn default() -> Self {
        Self(vec![1, 3, 5, 7])
    }
}

impl TryFrom<Vec<usize>> for KernelSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<KernelSet> for Vec<usize> {
    fn from(k: KernelSet) -> Self {
        k.0
    }
}

/// Pools `x` into a vertical `h x n` and a horizontal `n x w` strip tensor.
pub fn strip_pair<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if n == 0 || n > s.h.min(s.w) {
        return Err(Error::invalid(
            "strip_pair",
            format!("strip count {n} outside 1..={}", s.h.min(s.w)),
        ));
    }
    Ok((adaptive_avg_pool2d(x, s.h, n)?, adaptive_avg_pool2d(x, n, s.w)?))
}

/// Fuses strip tensors back to `h x w`:
/// `out[i, j] = vert[i, n*j / w] + horiz[n*i / h, j]` (integer division).
pub fn mksp_fuse<T: Scalar>(vert: &Tensor<T>, horiz: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (v, hz) = (vert.shape(), horiz.shape());
    let n = v.w;
    crate::error::expect_dim("mksp_fuse", "vertical h", h, v.h)?;
    crate::error::expect_dim("mksp_fuse", "horizontal h", n, hz.h)?;
    crate::error::expect_dim("mksp_fuse", "horizontal w", w, hz.w)?;
    crate::tensor::expect_dim_nc("mksp_fuse", v, hz)?;
    if n > h.min(w) {
        return Err(Error::invalid("mksp_fuse", format!("strip count {n} exceeds {h}x{w}")));
    }
    let cols: Vec<usize> = (0..w).map(|j| n * j / w).collect();
    let mut out = Tensor::zeros(v.with_hw(h, w));
    for b in 0..v.n {
        for c in 0..v.c {
            let (vp, hp) = (vert.plane(b, c), horiz.plane(b, c));
            let op = out.plane_mut(b, c);
            for i in 0..h {
                let hrow = &hp[(n * i / h) * w..][..w];
                let vrow = &vp[i * n..][..n];
                for (j, o) in op[i * w..(i + 1) * w].iter_mut().enumerate() {
                    *o = vrow[cols[j]] + hrow[j];
                }
            }
        }
    }
    instrument::add_flops(out.numel() as u64);
    Ok(out)
}

/// Adjoint of [`mksp_fuse`]: gathers each output gradient back to the two strips it read.
pub fn mksp_fuse_backward<T: Scalar>(g: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = g.shape();
    let mut gv = Tensor::zeros(s.with_hw(s.h, n));
    let mut gh = Tensor::zeros(s.with_hw(n, s.w));
    for b in 0..s.n {
        for c in 0..s.c {
            let gp = g.plane(b, c);
            {
                let vp = gv.plane_mut(b, c);
                for i in 0..s.h {
                    for j in 0..s.w {
                        vp[i * n + n * j / s.w] += gp[i * s.w + j];
                    }
                }
            }
            let hp = gh.plane_mut(b, c);
            for i in 0..s.h {
                let r = n * i / s.h;
                for j in 0..s.w {
                    hp[r * s.w + j] += gp[i * s.w + j];
                }
            }
        }
    }
    Ok((gv, gh))
}

/// Per-scale strip convolutions: depthwise, kernel 3 along the strip for
/// `n = 1`, 3x3 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct StripConvs<T: Scalar> {
    pub n: usize,
    pub vert: ConvParams<T>,
    pub horiz: ConvParams<T>,
}

impl<T: Scalar> StripConvs<T> {
    pub fn specs(c: usize, n: usize) -> (ConvSpec, ConvSpec) {
        if n == 1 {
            (
                ConvSpec::new(c, c, (3, 1)).padding((1, 0)).groups(c),
                ConvSpec::new(c, c, (1, 3)).padding((0, 1)).groups(c),
            )
        } else {
            let s = ConvSpec::same(c, c, 3, 1).groups(c);
            (s, s)
        }
    }

    pub fn build(c: usize, n: usize, make: &mut Factory<'_, T>) -> Self {
        let (sv, sh) = Self::specs(c, n);
        Self {
            n,
            vert: make(sv),
            horiz: make(sh),
        }
    }
}

impl_module!(StripConvs { vert, horiz });

/// Pooled strips kept for the backward pass.
#[derive(Debug)]
pub struct StripCache<T: Scalar> {
    vert: Tensor<T>,
    horiz: Tensor<T>,
}

impl<T: Scalar> Block<T> for StripConvs<T> {
    type Cache = StripCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StripCache<T>)> {
        let s = x.shape();
        let (vert, horiz) = strip_pair(x, self.n)?;
        let fused = mksp_fuse(&conv2d(&vert, &self.vert)?, &conv2d(&horiz, &self.horiz)?, s.h, s.w)?;
        Ok((fused, StripCache { vert, horiz }))
    }

    fn backward(&self, x: &Tensor<T>, cache: &StripCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let (gv, gh) = mksp_fuse_backward(gy, self.n)?;
        let gv = conv2d_backward_acc(&cache.vert, &self.vert, &gv, &mut grads.vert)?;
        let gh = conv2d_backward_acc(&cache.horiz, &self.horiz, &gh, &mut grads.horiz)?;
        let mut gx = adaptive_avg_pool2d_backward(x.shape(), &gv)?;
        gx.axpy(T::one(), &adaptive_avg_pool2d_backward(x.shape(), &gh)?)?;
        Ok(gx)
    }
}

/// Single-scale strip pooling: `sigmoid(f1(vert + horiz))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpParams<T: Scalar> {
    pub strips: StripConvs<T>,
    pub f1: ConvParams<T>,
}

impl<T: Scalar> SpParams<T> {
    pub fn build(c: usize, make: &mut Factory<'_, T>) -> Self {
        Self {
            strips: StripConvs::build(c, 1, make),
            f1: make(ConvSpec::new(c, c, (1, 1))),
        }
    }
}

impl_module!(SpParams { strips, f1 });

#[derive(Debug)]
pub struct SpCache<T: Scalar> {
    strips: StripCache<T>,
    fused: Tensor<T>,
}

/// The output of [`SpParams::forward`] is the mask itself.
impl<T: Scalar> Block<T> for SpParams<T> {
    type Cache = SpCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SpCache<T>)> {
        let (fused, strips) = self.strips.forward(x)?;
        let mask = sigmoid(&conv2d(&fused, &self.f1)?);
        Ok((mask, SpCache { strips, fused }))
    }

    fn backward(&self, x: &Tensor<T>, cache: &SpCache<T>, gmask: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        // the mask is recomputed cheaply from the fused map instead of cached
        let mask = sigmoid(&conv2d(&cache.fused, &self.f1)?);
        let gpre = sigmoid_backward(&mask, gmask)?;
        let gfused = conv2d_backward_acc(&cache.fused, &self.f1, &gpre, &mut grads.f1)?;
        self.strips.backward(x, &cache.strips, &gfused, &mut grads.strips)
    }
}

pub fn sp_mask<T: Scalar>(x: &Tensor<T>, p: &SpParams<T>) -> Result<Tensor<T>> {
    Ok(p.forward(x)?.0)
}

/// Multi-kernel strip pooling mask:
/// `sigmoid(conv(relu(conv(concat_n fuse_n))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MkspParams<T: Scalar> {
    pub scales: Vec<StripConvs<T>>,
    pub out1: ConvParams<T>,
    pub out2: ConvParams<T>,
}

impl<T: Scalar> MkspParams<T> {
    pub fn build(c: usize, ks: &KernelSet, make: &mut Factory<'_, T>) -> Self {
        let scales = ks.scales().iter().map(|&n| StripConvs::build(c, n, make)).collect();
        Self {
            scales,
            out1: make(ConvSpec::same(ks.len() * c, c, 3, 1)),
            out2: make(ConvSpec::same(c, c, 3, 1)),
        }
    }

    pub fn kernel_set(&self) -> KernelSet {
        KernelSet(self.scales.iter().map(|s| s.n).collect())
    }
}

impl<T: Scalar> Module<T> for MkspParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>) {
        for s in &self.scales {
            s.collect(&join(prefix, &format!("strip{}", s.n)), out);
        }
        out.push((join(prefix, "out1"), &self.out1));
        out.push((join(prefix, "out2"), &self.out2));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>) {
        for s in &mut self.scales {
            let name = join(prefix, &format!("strip{}", s.n));
            s.collect_mut(&name, out);
        }
        out.push((join(prefix, "out1"), &mut self.out1));
        out.push((join(prefix, "out2"), &mut self.out2));
    }
}

#[derive(Debug)]
pub struct MkspCache<T: Scalar> {
    strips: Vec<StripCache<T>>,
    cat: Tensor<T>,
    hidden: Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Scalar> Block<T> for MkspParams<T> {
    type Cache = MkspCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MkspCache<T>)> {
        self.kernel_set().check_fits(x.shape().h, x.shape().w)?;
        let mut fused = Vec::with_capacity(self.scales.len());
        let mut strips = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let (f, c) = s.forward(x)?;
            fused.push(f);
            strips.push(c);
        }
        let cat = concat_channels(&fused.iter().collect::<Vec<_>>())?;
        drop(fused);
        let hidden = relu(&conv2d(&cat, &self.out1)?);
        let mask = sigmoid(&conv2d(&hidden, &self.out2)?);
        Ok((
            mask.clone(),
            MkspCache {
                strips,
                cat,
                hidden,
                mask,
            },
        ))
    }

    fn backward(&self, x: &Tensor<T>, cache: &MkspCache<T>, gmask: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let g = sigmoid_backward(&cache.mask, gmask)?;
        let g = conv2d_backward_acc(&cache.hidden, &self.out2, &g, &mut grads.out2)?;
        let g = relu_backward(&cache.hidden, &g)?;
        let gcat = conv2d_backward_acc(&cache.cat, &self.out1, &g, &mut grads.out1)?;
        let c = x.shape().c;
        let parts = split_channels(&gcat, &vec![c; self.scales.len()])?;
        let mut gx = Tensor::zeros(x.shape());
        for (((s, sc), gs), gp) in self
            .scales
            .iter()
            .zip(&cache.strips)
            .zip(&mut grads.scales)
            .zip(&parts)
        {
            gx.axpy(T::one(), &s.backward(x, sc, gp, gs)?)?;
        }
        Ok(gx)
    }
}

pub fn mksp_mask<T: Scalar>(x: &Tensor<T>, p: &MkspParams<T>) -> Result<Tensor<T>> {
    Ok(p.forward(x)?.0)
}

/// Attention refinement: a local mask `sigmoid(conv3x3(x))` applied to `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArParams<T: Scalar> {
    pub conv: ConvParams<T>,
}

impl<T: Scalar> ArParams<T> {
    pub fn build(c: usize, make: &mut Factory<'_, T>) -> Self {
        Self {
            conv: make(ConvSpec::same(c, c, 3, 1)),
        }
    }

    pub fn mask(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(sigmoid(&conv2d(x, &self.conv)?))
    }
}

impl_module!(ArParams { conv });

/// Cached AR mask.
#[derive(Debug)]
pub struct ArCache<T: Scalar> {
    pub mask: Tensor<T>,
}

/// Output is the gated input `mask * x`.
impl<T: Scalar> Block<T> for ArParams<T> {
    type Cache = ArCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ArCache<T>)> {
        let mask = self.mask(x)?;
        Ok((mul(&mask, x)?, ArCache { mask }))
    }

    fn backward(&self, x: &Tensor<T>, cache: &ArCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let (gmask, mut gx) = mul_backward(&cache.mask, x, gy)?;
        let gpre = sigmoid_backward(&cache.mask, &gmask)?;
        gx.axpy(T::one(), &conv2d_backward_acc(x, &self.conv, &gpre, &mut grads.conv)?)?;
        Ok(gx)
    }
}

/// Blur-aware attention: `x~ = M_mksp(x) * x`, output `M_ar(x~) * x~`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaParams<T: Scalar> {
    pub mksp: MkspParams<T>,
    pub ar: ArParams<T>,
}

impl<T: Scalar> BaParams<T> {
    pub fn build(c: usize, ks: &KernelSet, make: &mut Factory<'_, T>) -> Self {
        Self {
            mksp: MkspParams::build(c, ks, make),
            ar: ArParams::build(c, make),
        }
    }
}

impl_module!(BaParams { mksp, ar });

#[derive(Debug)]
pub struct BaCache<T: Scalar> {
    pub mksp: MkspCache<T>,
    pub attended: Tensor<T>,
    pub ar: ArCache<T>,
}

impl<T: Scalar> BaCache<T> {
    /// Global (MKSP) mask, before it multiplies the input.
    pub fn mksp_mask(&self) -> &Tensor<T> {
        &self.mksp.mask
    }

    /// Local (AR) mask.
    pub fn ar_mask(&self) -> &Tensor<T> {
        &self.ar.mask
    }
}

impl<T: Scalar> Block<T> for BaParams<T> {
    type Cache = BaCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BaCache<T>)> {
        let (m, mksp) = self.mksp.forward(x)?;
        let attended = mul(&m, x)?;
        drop(m);
        let (out, ar) = self.ar.forward(&attended)?;
        Ok((out, BaCache { mksp, attended, ar }))
    }

    fn backward(&self, x: &Tensor<T>, cache: &BaCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let gatt = self.ar.backward(&cache.attended, &cache.ar, gy, &mut grads.ar)?;
        let (gm, mut gx) = mul_backward(&cache.mksp.mask, x, &gatt)?;
        gx.axpy(T::one(), &self.mksp.backward(x, &cache.mksp, &gm, &mut grads.mksp)?)?;
        Ok(gx)
    }
}

/// Output of [`ba_forward`] with both masks for visualisation.
#[derive(Debug)]
pub struct BaOutput<T: Scalar> {
    pub out: Tensor<T>,
    pub mksp_mask: Tensor<T>,
    pub ar_mask: Tensor<T>,
}

pub fn ba_forward<T: Scalar>(x: &Tensor<T>, p: &BaParams<T>) -> Result<BaOutput<T>> {
    let (out, cache) = p.forward(x)?;
    Ok(BaOutput {
        out,
        mksp_mask: cache.mksp.mask,
        ar_mask: cache.ar.mask,
    })
}

/// Parameter gradients of BA (fresh accumulator) and the input gradient.
pub fn ba_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &BaParams<T>,
    cache: &BaCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, BaParams<T>)> {
    let mut grads = p.zeros_like();
    let gx = p.backward(x, cache, gy, &mut grads)?;
    Ok((gx, grads))
}

/// Reduces a mask to one 8-bit grayscale image per batch item: mean over
/// channels, then min-max normalised (a constant map becomes mid-gray).
pub fn mask_to_gray8<T: Scalar>(mask: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = mask.shape();
    (0..s.n)
        .map(|b| {
            let mut mean = vec![0.0f64; s.plane()];
            for c in 0..s.c {
                for (m, v) in mean.iter_mut().zip(mask.plane(b, c)) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= s.c as f64);
            let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mean.iter()
                .map(|&m| {
                    if hi - lo <= f64::EPSILON {
                        128
                    } else {
                        ((m - lo) / (hi - lo) * 255.0).round() as u8
                    }
                })
                .collect()
        })
        .collect()
}
