//! Dilated-convolution bodies, the blur-aware module and the full network.

mod bam;
mod count;
mod network;

pub use bam::{BamCache, BamParams, Gate, GateCache, GateKind};
pub use count::{count_flops, count_macs, count_network, count_params, Counts};
pub use network::{
    banet_backward, banet_forward, build_network, BanetCache, BanetParams, NetworkConfig, Variant,
};

use crate::error::{Error, Result};
use crate::params::{impl_module, Block, Factory, Module};
use crate::tensor::{concat_channels, conv2d, conv2d_backward_acc, relu, relu_backward, split_channels, ConvParams, ConvSpec, Tensor};
use crate::Scalar;

/// Dilation rates of the three parallel branches.
pub const PDC_DILATIONS: [usize; 3] = [1, 3, 5];

/// Parallel dilated convolutions: three 3x3 branches with dilation 1, 3 and 5,
/// each mapping `C` to `C / 2` channels followed by ReLU, concatenated to `1.5 C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PdcParams<T: Scalar> {
    pub d1: ConvParams<T>,
    pub d3: ConvParams<T>,
    pub d5: ConvParams<T>,
}

impl<T: Scalar> PdcParams<T> {
    pub fn branch_spec(c: usize, dilation: usize) -> ConvSpec {
        ConvSpec::same(c, c / 2, 3, dilation)
    }

    pub fn build(c: usize, make: &mut Factory<'_, T>) -> Result<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(Error::invalid("pdc", format!("channel count {c} must be even")));
        }
        let [a, b, d] = PDC_DILATIONS.map(|d| Self::branch_spec(c, d));
        Ok(Self {
            d1: make(a),
            d3: make(b),
            d5: make(d),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.d1.spec.in_ch
    }

    pub fn out_channels(&self) -> usize {
        3 * self.d1.spec.out_ch
    }

    fn branches(&self) -> [&ConvParams<T>; 3] {
        [&self.d1, &self.d3, &self.d5]
    }
}

impl_module!(PdcParams { d1, d3, d5 });

/// The concatenated output of [`PdcParams::forward`].
impl<T: Scalar> Block<T> for PdcParams<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let outs = self
            .branches()
            .into_iter()
            .map(|p| Ok(relu(&conv2d(x, p)?)))
            .collect::<Result<Vec<_>>>()?;
        let y = concat_channels(&outs.iter().collect::<Vec<_>>())?;
        drop(outs);
        Ok((y.clone(), y))
    }

    fn backward(&self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let half = self.d1.spec.out_ch;
        let ys = split_channels(y, &[half; 3])?;
        let gs = split_channels(gy, &[half; 3])?;
        let mut gx = Tensor::zeros(x.shape());
        let targets = [&mut grads.d1, &mut grads.d3, &mut grads.d5];
        for (k, (p, acc)) in self.branches().into_iter().zip(targets).enumerate() {
            let gpre = relu_backward(&ys[k], &gs[k])?;
            gx.axpy(T::one(), &conv2d_backward_acc(x, p, &gpre, acc)?)?;
        }
        Ok(gx)
    }
}

/// Cascaded PDC: `pdc1 -> relu(bridge) -> pdc2 -> fuse`, channels
/// `C -> 1.5C -> C -> 1.5C -> C`. The fuse output is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct CpdcParams<T: Scalar> {
    pub pdc1: PdcParams<T>,
    pub bridge: ConvParams<T>,
    pub pdc2: PdcParams<T>,
    pub fuse: ConvParams<T>,
}

impl<T: Scalar> CpdcParams<T> {
    pub fn build(c: usize, make: &mut Factory<'_, T>) -> Result<Self> {
        let pdc1 = PdcParams::build(c, make)?;
        let bridge = make(ConvSpec::same(3 * c / 2, c, 3, 1));
        let pdc2 = PdcParams::build(c, make)?;
        let fuse = make(ConvSpec::same(3 * c / 2, c, 3, 1));
        Ok(Self {
            pdc1,
            bridge,
            pdc2,
            fuse,
        })
    }
}

impl_module!(CpdcParams { pdc1, bridge, pdc2, fuse });

#[derive(Debug)]
pub struct CpdcCache<T: Scalar> {
    p1: Tensor<T>,
    b: Tensor<T>,
    p2: Tensor<T>,
}

impl<T: Scalar> Block<T> for CpdcParams<T> {
    type Cache = CpdcCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CpdcCache<T>)> {
        let (p1, _) = self.pdc1.forward(x)?;
        let b = relu(&conv2d(&p1, &self.bridge)?);
        let (p2, _) = self.pdc2.forward(&b)?;
        let y = conv2d(&p2, &self.fuse)?;
        Ok((y, CpdcCache { p1, b, p2 }))
    }

    fn backward(&self, x: &Tensor<T>, c: &CpdcCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let g = conv2d_backward_acc(&c.p2, &self.fuse, gy, &mut grads.fuse)?;
        let g = self.pdc2.backward(&c.b, &c.p2, &g, &mut grads.pdc2)?;
        let g = relu_backward(&c.b, &g)?;
        let g = conv2d_backward_acc(&c.p1, &self.bridge, &g, &mut grads.bridge)?;
        self.pdc1.backward(x, &c.p1, &g, &mut grads.pdc1)
    }
}

/// A single PDC with a linear 3x3 fuse back to `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PdcBody<T: Scalar> {
    pub pdc: PdcParams<T>,
    pub fuse: ConvParams<T>,
}

impl<T: Scalar> PdcBody<T> {
    pub fn build(c: usize, make: &mut Factory<'_, T>) -> Result<Self> {
        Ok(Self {
            pdc: PdcParams::build(c, make)?,
            fuse: make(ConvSpec::same(3 * c / 2, c, 3, 1)),
        })
    }
}

impl_module!(PdcBody { pdc, fuse });

impl<T: Scalar> Block<T> for PdcBody<T> {
    type Cache = Tensor<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (p, _) = self.pdc.forward(x)?;
        Ok((conv2d(&p, &self.fuse)?, p))
    }

    fn backward(&self, x: &Tensor<T>, p: &Tensor<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let g = conv2d_backward_acc(p, &self.fuse, gy, &mut grads.fuse)?;
        self.pdc.backward(x, p, &g, &mut grads.pdc)
    }
}

/// Two PDCs in series (`C -> 1.5C -> 2.25C`) and a linear 3x3 fuse back to `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pdc2Body<T: Scalar> {
    pub pdc1: PdcParams<T>,
    pub pdc2: PdcParams<T>,
    pub fuse: ConvParams<T>,
}

impl<T: Scalar> Pdc2Body<T> {
    pub fn build(c: usize, make: &mut Factory<'_, T>) -> Result<Self> {
        if c % 4 != 0 {
            return Err(Error::invalid("pdc2", format!("channel count {c} must be a multiple of 4")));
        }
        let mid = 3 * c / 2;
        Ok(Self {
            pdc1: PdcParams::build(c, make)?,
            pdc2: PdcParams::build(mid, make)?,
            fuse: make(ConvSpec::same(3 * mid / 2, c, 3, 1)),
        })
    }
}

impl_module!(Pdc2Body { pdc1, pdc2, fuse });

#[derive(Debug)]
pub struct Pdc2Cache<T: Scalar> {
    p1: Tensor<T>,
    p2: Tensor<T>,
}

impl<T: Scalar> Block<T> for Pdc2Body<T> {
    type Cache = Pdc2Cache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Pdc2Cache<T>)> {
        let (p1, _) = self.pdc1.forward(x)?;
        let (p2, _) = self.pdc2.forward(&p1)?;
        Ok((conv2d(&p2, &self.fuse)?, Pdc2Cache { p1, p2 }))
    }

    fn backward(&self, x: &Tensor<T>, c: &Pdc2Cache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let g = conv2d_backward_acc(&c.p2, &self.fuse, gy, &mut grads.fuse)?;
        let g = self.pdc2.backward(&c.p1, &c.p2, &g, &mut grads.pdc2)?;
        self.pdc1.backward(x, &c.p1, &g, &mut grads.pdc1)
    }
}

/// Which dilated-convolution body a module uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BodyKind {
    Pdc,
    Pdc2,
    Cpdc,
}

impl BodyKind {
    pub fn name(self) -> &'static str {
        match self {
            BodyKind::Pdc => "pdc",
            BodyKind::Pdc2 => "pdc2",
            BodyKind::Cpdc => "cpdc",
        }
    }
}

/// The residual branch of a blur-aware module.
#[derive(Clone, Debug, PartialEq)]
pub enum Body<T: Scalar> {
    Pdc(PdcBody<T>),
    Pdc2(Pdc2Body<T>),
    Cpdc(CpdcParams<T>),
}

impl<T: Scalar> Body<T> {
    pub fn build(kind: BodyKind, c: usize, make: &mut Factory<'_, T>) -> Result<Self> {
        Ok(match kind {
            BodyKind::Pdc => Body::Pdc(PdcBody::build(c, make)?),
            BodyKind::Pdc2 => Body::Pdc2(Pdc2Body::build(c, make)?),
            BodyKind::Cpdc => Body::Cpdc(CpdcParams::build(c, make)?),
        })
    }

    pub fn kind(&self) -> BodyKind {
        match self {
            Body::Pdc(_) => BodyKind::Pdc,
            Body::Pdc2(_) => BodyKind::Pdc2,
            Body::Cpdc(_) => BodyKind::Cpdc,
        }
    }

    /// The last linear layer; zeroing it turns the branch off.
    pub fn last_conv_mut(&mut self) -> &mut ConvParams<T> {
        match self {
            Body::Pdc(b) => &mut b.fuse,
            Body::Pdc2(b) => &mut b.fuse,
            Body::Cpdc(b) => &mut b.fuse,
        }
    }
}

impl<T: Scalar> Module<T> for Body<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>) {
        match self {
            Body::Pdc(b) => b.collect(prefix, out),
            Body::Pdc2(b) => b.collect(prefix, out),
            Body::Cpdc(b) => b.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>) {
        match self {
            Body::Pdc(b) => b.collect_mut(prefix, out),
            Body::Pdc2(b) => b.collect_mut(prefix, out),
            Body::Cpdc(b) => b.collect_mut(prefix, out),
        }
    }
}

#[derive(Debug)]
pub enum BodyCache<T: Scalar> {
    Pdc(Tensor<T>),
    Pdc2(Pdc2Cache<T>),
    Cpdc(CpdcCache<T>),
}

impl<T: Scalar> Block<T> for Body<T> {
    type Cache = BodyCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BodyCache<T>)> {
        Ok(match self {
            Body::Pdc(b) => {
                let (y, c) = b.forward(x)?;
                (y, BodyCache::Pdc(c))
            }
            Body::Pdc2(b) => {
                let (y, c) = b.forward(x)?;
                (y, BodyCache::Pdc2(c))
            }
            Body::Cpdc(b) => {
                let (y, c) = b.forward(x)?;
                (y, BodyCache::Cpdc(c))
            }
        })
    }

    fn backward(&self, x: &Tensor<T>, cache: &BodyCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        match (self, cache, grads) {
            (Body::Pdc(b), BodyCache::Pdc(c), Body::Pdc(g)) => b.backward(x, c, gy, g),
            (Body::Pdc2(b), BodyCache::Pdc2(c), Body::Pdc2(g)) => b.backward(x, c, gy, g),
            (Body::Cpdc(b), BodyCache::Cpdc(c), Body::Cpdc(g)) => b.backward(x, c, gy, g),
            _ => Err(Error::invalid("body backward", "cache or gradient of a different body kind")),
        }
    }
}

/// `pdc_forward`: the concatenated branch outputs.
pub fn pdc_forward<T: Scalar>(x: &Tensor<T>, p: &PdcParams<T>) -> Result<Tensor<T>> {
    Ok(p.forward(x)?.0)
}

pub fn cpdc_forward<T: Scalar>(x: &Tensor<T>, p: &CpdcParams<T>) -> Result<Tensor<T>> {
    Ok(p.forward(x)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_factory(seed: u64) -> impl FnMut(ConvSpec) -> ConvParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        move |s| ConvParams::init_uniform(s, &mut rng)
    }

    #[test]
    fn pdc_widens_by_half() {
        let p = PdcParams::<f64>::build(8, &mut random_factory(1)).unwrap();
        let x = Tensor::uniform(Shape4::new(1, 8, 9, 7), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = pdc_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 12, 9, 7));
        assert!(PdcParams::<f64>::build(7, &mut random_factory(1)).is_err());
    }

    #[test]
    fn pdc_equals_three_separate_branches() {
        let p = PdcParams::<f32>::build(4, &mut |s| {
            ConvParams::init_uniform(s, &mut ChaCha8Rng::seed_from_u64(s.dilation.0 as u64))
        })
        .unwrap();
        let x = Tensor::uniform(Shape4::new(2, 4, 11, 6), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let parts: Vec<_> = [&p.d1, &p.d3, &p.d5].iter().map(|c| relu(&conv2d(&x, c).unwrap())).collect();
        let expect = concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(pdc_forward(&x, &p).unwrap(), expect);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = Tensor::<f64>::full(Shape4::new(1, 16, 6, 6), 0.3);
        let p = PdcParams::build(16, &mut ConvParams::zeros).unwrap();
        assert_eq!(pdc_forward(&x, &p).unwrap().max_abs(), 0.0);
        let c = CpdcParams::build(16, &mut ConvParams::zeros).unwrap();
        assert_eq!(cpdc_forward(&x, &c).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn bodies_preserve_channels() {
        for c in [16, 128, 192] {
            let specs = |kind| {
                let mut out = Vec::new();
                Body::<f32>::build(kind, c, &mut |s| {
                    out.push(s);
                    ConvParams::zeros(ConvSpec::new(1, 1, (1, 1)))
                })
                .unwrap();
                out
            };
            for kind in [BodyKind::Pdc, BodyKind::Pdc2, BodyKind::Cpdc] {
                let s = specs(kind);
                assert_eq!(s.first().unwrap().in_ch, c);
                assert_eq!(s.last().unwrap().out_ch, c);
            }
        }
    }
}
