use super::{Body, BodyCache, BodyKind};
use crate::attention::{ArCache, ArParams, BaCache, BaParams, KernelSet, MkspCache, MkspParams, SpCache, SpParams};
use crate::error::{Error, Result};
use crate::params::{join, Block, Factory, Module};
use crate::tensor::{add, mul, mul_backward, ConvParams, Tensor};
use crate::Scalar;

/// Attention applied to a module's input before its body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    None,
    Ar,
    Sp,
    Mksp,
    Ba,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::None => "none",
            GateKind::Ar => "ar",
            GateKind::Sp => "sp",
            GateKind::Mksp => "mksp",
            GateKind::Ba => "ba",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gate<T: Scalar> {
    None,
    Ar(ArParams<T>),
    Sp(SpParams<T>),
    Mksp(MkspParams<T>),
    Ba(BaParams<T>),
}

impl<T: Scalar> Gate<T> {
    pub fn build(kind: GateKind, c: usize, ks: &KernelSet, make: &mut Factory<'_, T>) -> Self {
        match kind {
            GateKind::None => Gate::None,
            GateKind::Ar => Gate::Ar(ArParams::build(c, make)),
            GateKind::Sp => Gate::Sp(SpParams::build(c, make)),
            GateKind::Mksp => Gate::Mksp(MkspParams::build(c, ks, make)),
            GateKind::Ba => Gate::Ba(BaParams::build(c, ks, make)),
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            Gate::None => GateKind::None,
            Gate::Ar(_) => GateKind::Ar,
            Gate::Sp(_) => GateKind::Sp,
            Gate::Mksp(_) => GateKind::Mksp,
            Gate::Ba(_) => GateKind::Ba,
        }
    }
}

impl<T: Scalar> Module<T> for Gate<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>) {
        match self {
            Gate::None => {}
            Gate::Ar(g) => g.collect(prefix, out),
            Gate::Sp(g) => g.collect(prefix, out),
            Gate::Mksp(g) => g.collect(prefix, out),
            Gate::Ba(g) => g.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>) {
        match self {
            Gate::None => {}
            Gate::Ar(g) => g.collect_mut(prefix, out),
            Gate::Sp(g) => g.collect_mut(prefix, out),
            Gate::Mksp(g) => g.collect_mut(prefix, out),
            Gate::Ba(g) => g.collect_mut(prefix, out),
        }
    }
}

#[derive(Debug)]
pub enum GateCache<T: Scalar> {
    None,
    Ar(ArCache<T>),
    Sp(SpCache<T>, Tensor<T>),
    Mksp(MkspCache<T>, Tensor<T>),
    Ba(BaCache<T>),
}

impl<T: Scalar> GateCache<T> {
    /// The (MKSP or SP, AR) masks produced by this gate, where present.
    pub fn masks(&self) -> (Option<&Tensor<T>>, Option<&Tensor<T>>) {
        match self {
            GateCache::None => (None, None),
            GateCache::Ar(c) => (None, Some(&c.mask)),
            GateCache::Sp(_, m) | GateCache::Mksp(_, m) => (Some(m), None),
            GateCache::Ba(c) => (Some(c.mksp_mask()), Some(c.ar_mask())),
        }
    }
}

/// Gated output: `x` itself, `mask * x`, or the BA output.
impl<T: Scalar> Block<T> for Gate<T> {
    type Cache = GateCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GateCache<T>)> {
        Ok(match self {
            Gate::None => (x.clone(), GateCache::None),
            Gate::Ar(g) => {
                let (y, c) = g.forward(x)?;
                (y, GateCache::Ar(c))
            }
            Gate::Sp(g) => {
                let (m, c) = g.forward(x)?;
                (mul(&m, x)?, GateCache::Sp(c, m))
            }
            Gate::Mksp(g) => {
                let (m, c) = g.forward(x)?;
                (mul(&m, x)?, GateCache::Mksp(c, m))
            }
            Gate::Ba(g) => {
                let (y, c) = g.forward(x)?;
                (y, GateCache::Ba(c))
            }
        })
    }

    fn backward(&self, x: &Tensor<T>, cache: &GateCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        match (self, cache, grads) {
            (Gate::None, GateCache::None, Gate::None) => Ok(gy.clone()),
            (Gate::Ar(g), GateCache::Ar(c), Gate::Ar(acc)) => g.backward(x, c, gy, acc),
            (Gate::Sp(g), GateCache::Sp(c, m), Gate::Sp(acc)) => {
                let (gm, mut gx) = mul_backward(m, x, gy)?;
                gx.axpy(T::one(), &g.backward(x, c, &gm, acc)?)?;
                Ok(gx)
            }
            (Gate::Mksp(g), GateCache::Mksp(c, m), Gate::Mksp(acc)) => {
                let (gm, mut gx) = mul_backward(m, x, gy)?;
                gx.axpy(T::one(), &g.backward(x, c, &gm, acc)?)?;
                Ok(gx)
            }
            (Gate::Ba(g), GateCache::Ba(c), Gate::Ba(acc)) => g.backward(x, c, gy, acc),
            _ => Err(Error::invalid("gate backward", "cache or gradient of a different gate kind")),
        }
    }
}

/// Blur-aware module: `x + body(gate(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BamParams<T: Scalar> {
    pub gate: Gate<T>,
    pub body: Body<T>,
}

impl<T: Scalar> BamParams<T> {
    pub fn build(gate: GateKind, body: BodyKind, c: usize, ks: &KernelSet, make: &mut Factory<'_, T>) -> Result<Self> {
        let gate = Gate::build(gate, c, ks, make);
        let body = Body::build(body, c, make)?;
        Ok(Self { gate, body })
    }

    /// Checks that the module holds exactly the components of the given kinds.
    pub fn expect_kinds(&self, gate: GateKind, body: BodyKind) -> Result<()> {
        if self.gate.kind() != gate || self.body.kind() != body {
            return Err(Error::invalid(
                "bam",
                format!(
                    "module has {}+{}, variant needs {}+{}",
                    self.gate.kind().name(),
                    self.body.kind().name(),
                    gate.name(),
                    body.name()
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for BamParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>) {
        self.gate.collect(&join(prefix, self.gate.kind().name()), out);
        self.body.collect(&join(prefix, self.body.kind().name()), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>) {
        let (g, b) = (self.gate.kind().name(), self.body.kind().name());
        self.gate.collect_mut(&join(prefix, g), out);
        self.body.collect_mut(&join(prefix, b), out);
    }
}

#[derive(Debug)]
pub struct BamCache<T: Scalar> {
    pub gate: GateCache<T>,
    gated: Tensor<T>,
    body: BodyCache<T>,
}

impl<T: Scalar> Block<T> for BamParams<T> {
    type Cache = BamCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BamCache<T>)> {
        let (gated, gate) = self.gate.forward(x)?;
        let (r, body) = self.body.forward(&gated)?;
        let y = add(x, &r)?;
        Ok((y, BamCache { gate, gated, body }))
    }

    fn backward(&self, x: &Tensor<T>, c: &BamCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let gg = self.body.backward(&c.gated, &c.body, gy, &mut grads.body)?;
        let mut gx = self.gate.backward(x, &c.gate, &gg, &mut grads.gate)?;
        gx.axpy(T::one(), gy)?;
        Ok(gx)
    }
}
