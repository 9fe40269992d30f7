use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BamCache, BamParams, BodyKind, GateKind};
use crate::attention::KernelSet;
use crate::error::{Error, Result};
use crate::params::{join, Block, Factory, Module};
use crate::tensor::{
    add, conv2d, conv2d_backward_acc, conv_transpose2d, conv_transpose2d_backward_acc, relu,
    relu_backward, ConvParams, ConvSpec, Tensor,
};
use crate::Scalar;

/// Module composition. `Net1`..`Net6` are the component ablations (`Net6` is
/// the full model); `Pdc2` and `Cpdc` are the attention-free body comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Net1,
    Net2,
    Net3,
    Net4,
    Net5,
    Net6,
    Full,
    Pdc2,
    Cpdc,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Net1,
        Variant::Net2,
        Variant::Net3,
        Variant::Net4,
        Variant::Net5,
        Variant::Net6,
        Variant::Full,
        Variant::Pdc2,
        Variant::Cpdc,
    ];

    /// Gate and body of every module in this variant.
    pub fn parts(self) -> (GateKind, BodyKind) {
        match self {
            Variant::Net1 => (GateKind::None, BodyKind::Pdc),
            Variant::Net2 => (GateKind::Ar, BodyKind::Pdc),
            Variant::Net3 => (GateKind::Sp, BodyKind::Pdc),
            Variant::Net4 => (GateKind::Mksp, BodyKind::Pdc),
            Variant::Net5 => (GateKind::Ba, BodyKind::Pdc),
            Variant::Net6 | Variant::Full => (GateKind::Ba, BodyKind::Cpdc),
            Variant::Pdc2 => (GateKind::None, BodyKind::Pdc2),
            Variant::Cpdc => (GateKind::None, BodyKind::Cpdc),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Net1 => "net1",
            Variant::Net2 => "net2",
            Variant::Net3 => "net3",
            Variant::Net4 => "net4",
            Variant::Net5 => "net5",
            Variant::Net6 => "net6",
            Variant::Full => "full",
            Variant::Pdc2 => "pdc2",
            Variant::Cpdc => "cpdc",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid("variant", format!("unknown variant {s:?}")))
    }
}

/// Architecture hyper-parameters and the initialisation seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub num_bams: usize,
    pub kernel_set: KernelSet,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::banet()
    }
}

impl NetworkConfig {
    /// BANet: 128 channels, 10 modules.
    pub fn banet() -> Self {
        Self {
            base_channels: 128,
            num_bams: 10,
            kernel_set: KernelSet::default(),
            variant: Variant::Full,
            seed: 0,
        }
    }

    /// BANet+: 192 channels.
    pub fn banet_plus() -> Self {
        Self {
            base_channels: 192,
            ..Self::banet()
        }
    }

    /// Desk-scale configuration: 16 channels, 2 modules.
    pub fn tiny() -> Self {
        Self {
            base_channels: 16,
            num_bams: 2,
            ..Self::banet()
        }
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 2 || c % 2 != 0 {
            return Err(Error::invalid("network config", format!("base_channels {c} must be even and >= 2")));
        }
        if self.num_bams == 0 {
            return Err(Error::invalid("network config", "num_bams must be >= 1"));
        }
        if self.variant.parts().1 == BodyKind::Pdc2 && c % 4 != 0 {
            return Err(Error::invalid(
                "network config",
                format!("variant pdc2 needs base_channels divisible by 4, got {c}"),
            ));
        }
        Ok(())
    }

    /// Human-readable list of the fields that differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        let mut field = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name}: {a} != {b}"));
            }
        };
        field("base_channels", self.base_channels.to_string(), other.base_channels.to_string());
        field("num_bams", self.num_bams.to_string(), other.num_bams.to_string());
        field(
            "kernel_set",
            format!("{:?}", self.kernel_set.scales()),
            format!("{:?}", other.kernel_set.scales()),
        );
        field("variant", self.variant.to_string(), other.variant.to_string());
        field("seed", self.seed.to_string(), other.seed.to_string());
        out
    }
}

/// Layer specs of the fixed stem and head: `head1, head2, up, tail`.
pub(crate) fn frame_specs(c: usize) -> [ConvSpec; 4] {
    [
        ConvSpec::same(3, c, 3, 1),
        ConvSpec::same(c, c, 3, 1).stride((2, 2)),
        ConvSpec::new(c, c, (4, 4)).stride((2, 2)).padding((1, 1)).transposed(),
        ConvSpec::same(c, 3, 3, 1),
    ]
}

/// Full network: `img + tail(relu(up(bams(relu(head2(relu(head1(img))))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BanetParams<T: Scalar> {
    pub head1: ConvParams<T>,
    pub head2: ConvParams<T>,
    pub bams: Vec<BamParams<T>>,
    pub up: ConvParams<T>,
    pub tail: ConvParams<T>,
}

impl<T: Scalar> BanetParams<T> {
    /// Builds the structure of `cfg`, drawing every layer from `make` in order.
    pub fn build(cfg: &NetworkConfig, make: &mut Factory<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let [h1, h2, up, tail] = frame_specs(c);
        let (gate, body) = cfg.variant.parts();
        let head1 = make(h1);
        let head2 = make(h2);
        let bams = (0..cfg.num_bams)
            .map(|_| BamParams::build(gate, body, c, &cfg.kernel_set, make))
            .collect::<Result<_>>()?;
        Ok(Self {
            head1,
            head2,
            bams,
            up: make(up),
            tail: make(tail),
        })
    }

    pub fn channels(&self) -> usize {
        self.head1.spec.out_ch
    }

    /// Checks that every module holds exactly the components `variant` declares.
    pub fn expect_variant(&self, variant: Variant) -> Result<()> {
        let (g, b) = variant.parts();
        self.bams.iter().try_for_each(|m| m.expect_kinds(g, b))
    }

    /// Zeroes the last linear layer of every residual branch and of the tail,
    /// making the network the identity map.
    pub fn zero_residual_branches(&mut self) {
        for bam in &mut self.bams {
            bam.body.last_conv_mut().set_zero();
        }
        self.tail.set_zero();
    }

    pub fn cast<U: Scalar>(&self) -> BanetParams<U> {
        let mut out = BanetParams::<U> {
            head1: self.head1.cast(),
            head2: self.head2.cast(),
            bams: Vec::new(),
            up: self.up.cast(),
            tail: self.tail.cast(),
        };
        // rebuild module structure, then copy values layer by layer
        let kinds: Vec<_> = self.bams.iter().map(|b| (b.gate.kind(), b.body.kind())).collect();
        let ks = self
            .bams
            .iter()
            .find_map(|b| match &b.gate {
                super::Gate::Mksp(m) => Some(m.kernel_set()),
                super::Gate::Ba(m) => Some(m.mksp.kernel_set()),
                _ => None,
            })
            .unwrap_or_default();
        let src: Vec<_> = self.bams.iter().flat_map(|b| b.named_convs()).map(|(_, c)| c.cast::<U>()).collect();
        let mut it = src.into_iter();
        for (g, b) in kinds {
            let m = BamParams::build(g, b, self.channels(), &ks, &mut |_| it.next().expect("same structure"))
                .expect("structure copied from a valid network");
            out.bams.push(m);
        }
        out
    }

    fn check_input(&self, img: &Tensor<T>) -> Result<()> {
        let s = img.shape();
        crate::error::expect_dim("banet", "c", 3, s.c)?;
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::invalid(
                "banet",
                format!("input is {}x{}; height and width must be even, reflect-pad the image first", s.h, s.w),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for BanetParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams<T>)>) {
        out.push((join(prefix, "head1"), &self.head1));
        out.push((join(prefix, "head2"), &self.head2));
        for (i, b) in self.bams.iter().enumerate() {
            b.collect(&join(prefix, &format!("bam{i}")), out);
        }
        out.push((join(prefix, "up"), &self.up));
        out.push((join(prefix, "tail"), &self.tail));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ConvParams<T>)>) {
        out.push((join(prefix, "head1"), &mut self.head1));
        out.push((join(prefix, "head2"), &mut self.head2));
        for (i, b) in self.bams.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("bam{i}")), out);
        }
        out.push((join(prefix, "up"), &mut self.up));
        out.push((join(prefix, "tail"), &mut self.tail));
    }
}

/// Activations kept for the backward pass.
#[derive(Debug)]
pub struct BanetCache<T: Scalar> {
    a1: Tensor<T>,
    /// Module inputs, followed by the last module's output.
    feats: Vec<Tensor<T>>,
    bams: Vec<BamCache<T>>,
    u: Tensor<T>,
}

impl<T: Scalar> BanetCache<T> {
    pub fn bam_caches(&self) -> &[BamCache<T>] {
        &self.bams
    }
}

impl<T: Scalar> Block<T> for BanetParams<T> {
    type Cache = BanetCache<T>;

    fn forward(&self, img: &Tensor<T>) -> Result<(Tensor<T>, BanetCache<T>)> {
        self.check_input(img)?;
        let a1 = relu(&conv2d(img, &self.head1)?);
        let mut feats = vec![relu(&conv2d(&a1, &self.head2)?)];
        let mut bams = Vec::with_capacity(self.bams.len());
        for b in &self.bams {
            let (y, c) = b.forward(feats.last().expect("non-empty"))?;
            feats.push(y);
            bams.push(c);
        }
        let u = relu(&conv_transpose2d(feats.last().expect("non-empty"), &self.up)?);
        let out = add(img, &conv2d(&u, &self.tail)?)?;
        Ok((out, BanetCache { a1, feats, bams, u }))
    }

    fn backward(&self, img: &Tensor<T>, c: &BanetCache<T>, gy: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let g = conv2d_backward_acc(&c.u, &self.tail, gy, &mut grads.tail)?;
        let g = relu_backward(&c.u, &g)?;
        let mut g = conv_transpose2d_backward_acc(c.feats.last().expect("non-empty"), &self.up, &g, &mut grads.up)?;
        for (k, b) in self.bams.iter().enumerate().rev() {
            g = b.backward(&c.feats[k], &c.bams[k], &g, &mut grads.bams[k])?;
        }
        let g = relu_backward(&c.feats[0], &g)?;
        let g = conv2d_backward_acc(&c.a1, &self.head2, &g, &mut grads.head2)?;
        let g = relu_backward(&c.a1, &g)?;
        let mut gx = conv2d_backward_acc(img, &self.head1, &g, &mut grads.head1)?;
        gx.axpy(T::one(), gy)?;
        Ok(gx)
    }
}

/// Seeded initialisation: fan-in scaled uniform weights, zero biases.
pub fn build_network<T: Scalar>(cfg: &NetworkConfig) -> Result<BanetParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    BanetParams::build(cfg, &mut |s| ConvParams::init_uniform(s, &mut rng))
}

/// Inference pass that releases each module's intermediates as soon as it finishes.
pub fn banet_forward<T: Scalar>(img: &Tensor<T>, p: &BanetParams<T>) -> Result<Tensor<T>> {
    p.check_input(img)?;
    let mut f = relu(&conv2d(&relu(&conv2d(img, &p.head1)?), &p.head2)?);
    for b in &p.bams {
        f = b.forward(&f)?.0;
    }
    let u = relu(&conv_transpose2d(&f, &p.up)?);
    drop(f);
    add(img, &conv2d(&u, &p.tail)?)
}

/// Input gradient and a fresh parameter-gradient accumulator.
pub fn banet_backward<T: Scalar>(
    img: &Tensor<T>,
    p: &BanetParams<T>,
    cache: &BanetCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, BanetParams<T>)> {
    let mut grads = p.zeros_like();
    let gx = p.backward(img, cache, gy, &mut grads)?;
    Ok((gx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape4;

    #[test]
    fn odd_input_asks_for_padding() {
        let p = build_network::<f32>(&NetworkConfig::tiny()).unwrap();
        let err = banet_forward(&Tensor::zeros(Shape4::new(1, 3, 17, 16)), &p).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn lean_forward_matches_caching_forward() {
        use rand::SeedableRng;
        let p = build_network::<f64>(&NetworkConfig::tiny()).unwrap();
        let x = Tensor::uniform(Shape4::new(1, 3, 24, 20), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(banet_forward(&x, &p).unwrap(), p.forward(&x).unwrap().0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network::<f32>(&NetworkConfig::tiny()).unwrap();
        let b = build_network::<f32>(&NetworkConfig::tiny()).unwrap();
        assert_eq!(a, b);
        let c = build_network::<f32>(&NetworkConfig { seed: 1, ..NetworkConfig::tiny() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn net6_and_full_share_structure() {
        let a = build_network::<f32>(&NetworkConfig::tiny().with_variant(Variant::Net6)).unwrap();
        let b = build_network::<f32>(&NetworkConfig::tiny()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cast_round_trip() {
        let a = build_network::<f32>(&NetworkConfig::tiny().with_variant(Variant::Net4)).unwrap();
        assert_eq!(a.cast::<f64>().cast::<f32>(), a);
    }

    #[test]
    fn config_diff_and_parsing() {
        let a = NetworkConfig::tiny();
        let b = NetworkConfig { seed: 9, ..NetworkConfig::banet() };
        let d = a.diff(&b);
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(d[0].starts_with("base_channels"));
        assert_eq!("Net3".parse::<Variant>().unwrap(), Variant::Net3);
        assert!(NetworkConfig { base_channels: 18, ..a.with_variant(Variant::Pdc2) }.validate().is_err());
    }
}
