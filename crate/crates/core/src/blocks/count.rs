//! Analytic parameter and operation counts, derived from layer shapes alone.
//!
//! The walk mirrors the forward pass: every convolution contributes its
//! weights, `2 * MAC` plus one bias add per output, and every pooling,
//! activation, product, sum and strip fusion one operation per element it
//! produces (pooling: one per window cell plus the division).

use super::{BodyKind, GateKind, PdcParams, PDC_DILATIONS};
use super::network::{frame_specs, NetworkConfig};
use crate::attention::{KernelSet, StripConvs};
use crate::error::{Error, Result};
use crate::tensor::{pool_window, ConvSpec};

/// Totals of one analytic walk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

struct Walk {
    counts: Counts,
}

impl Walk {
    /// Applies `spec` to a `c x h x w` input and returns the output size.
    fn conv(&mut self, spec: ConvSpec, h: usize, w: usize) -> (usize, usize) {
        let out = spec.output_hw(h, w).expect("layer fits its input");
        self.counts.params += spec.num_params() as u64;
        self.counts.macs += spec.macs(1, h, w).expect("layer fits");
        self.counts.flops += spec.flops(1, h, w).expect("layer fits");
        out
    }

    fn elementwise(&mut self, elems: usize) {
        self.counts.flops += elems as u64;
    }

    fn pool(&mut self, c: usize, h: usize, w: usize, oh: usize, ow: usize) {
        let (_, kv) = pool_window(h, oh);
        let (_, kh) = pool_window(w, ow);
        self.counts.flops += (c * oh * ow * (kv * kh + 1)) as u64;
    }

    fn strips(&mut self, c: usize, n: usize, h: usize, w: usize) {
        let (sv, sh) = StripConvs::<f32>::specs(c, n);
        self.pool(c, h, w, h, n);
        self.pool(c, h, w, n, w);
        self.conv(sv, h, n);
        self.conv(sh, n, w);
        self.elementwise(c * h * w);
    }

    fn mksp(&mut self, c: usize, ks: &KernelSet, h: usize, w: usize) {
        for &n in ks.scales() {
            self.strips(c, n, h, w);
        }
        self.conv(ConvSpec::same(ks.len() * c, c, 3, 1), h, w);
        self.elementwise(c * h * w);
        self.conv(ConvSpec::same(c, c, 3, 1), h, w);
        self.elementwise(c * h * w);
    }

    fn ar(&mut self, c: usize, h: usize, w: usize) {
        self.conv(ConvSpec::same(c, c, 3, 1), h, w);
        self.elementwise(2 * c * h * w);
    }

    fn gate(&mut self, kind: GateKind, c: usize, ks: &KernelSet, h: usize, w: usize) {
        match kind {
            GateKind::None => {}
            GateKind::Ar => self.ar(c, h, w),
            GateKind::Sp => {
                self.strips(c, 1, h, w);
                self.conv(ConvSpec::new(c, c, (1, 1)), h, w);
                self.elementwise(2 * c * h * w);
            }
            GateKind::Mksp => {
                self.mksp(c, ks, h, w);
                self.elementwise(c * h * w);
            }
            GateKind::Ba => {
                self.mksp(c, ks, h, w);
                self.elementwise(c * h * w);
                self.ar(c, h, w);
            }
        }
    }

    fn pdc(&mut self, c: usize, h: usize, w: usize) {
        for d in PDC_DILATIONS {
            self.conv(PdcParams::<f32>::branch_spec(c, d), h, w);
            self.elementwise(c / 2 * h * w);
        }
    }

    fn body(&mut self, kind: BodyKind, c: usize, h: usize, w: usize) {
        let wide = 3 * c / 2;
        match kind {
            BodyKind::Pdc => {
                self.pdc(c, h, w);
                self.conv(ConvSpec::same(wide, c, 3, 1), h, w);
            }
            BodyKind::Pdc2 => {
                self.pdc(c, h, w);
                self.pdc(wide, h, w);
                self.conv(ConvSpec::same(3 * wide / 2, c, 3, 1), h, w);
            }
            BodyKind::Cpdc => {
                self.pdc(c, h, w);
                self.conv(ConvSpec::same(wide, c, 3, 1), h, w);
                self.elementwise(c * h * w);
                self.pdc(c, h, w);
                self.conv(ConvSpec::same(wide, c, 3, 1), h, w);
            }
        }
    }
}

/// Parameter, MAC and FLOP totals of one forward pass over a `3 x h x w` image.
pub fn count_network(cfg: &NetworkConfig, h: usize, w: usize) -> Result<Counts> {
    cfg.validate()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid("count", format!("resolution {h}x{w} must be even")));
    }
    let c = cfg.base_channels;
    let (gate, body) = cfg.variant.parts();
    if matches!(gate, GateKind::Mksp | GateKind::Ba) {
        cfg.kernel_set.check_fits(h / 2, w / 2)?;
    }
    let [h1, h2, up, tail] = frame_specs(c);
    let mut walk = Walk { counts: Counts::default() };
    let (a, b) = walk.conv(h1, h, w);
    walk.elementwise(c * a * b);
    let (fh, fw) = walk.conv(h2, a, b);
    walk.elementwise(c * fh * fw);
    for _ in 0..cfg.num_bams {
        walk.gate(gate, c, &cfg.kernel_set, fh, fw);
        walk.body(body, c, fh, fw);
        walk.elementwise(c * fh * fw);
    }
    let (uh, uw) = walk.conv(up, fh, fw);
    walk.elementwise(c * uh * uw);
    walk.conv(tail, uh, uw);
    walk.elementwise(3 * h * w);
    Ok(walk.counts)
}

/// Learnable scalars of the network `cfg` describes.
pub fn count_params(cfg: &NetworkConfig) -> Result<u64> {
    // parameter counts do not depend on resolution; use the smallest legal one
    let side = 2 * cfg.kernel_set.max().max(1);
    Ok(count_network(cfg, side, side)?.params)
}

/// Nominal FLOPs of one forward pass at `h x w` (2 per multiply-accumulate).
pub fn count_flops(cfg: &NetworkConfig, h: usize, w: usize) -> Result<u64> {
    Ok(count_network(cfg, h, w)?.flops)
}

pub fn count_macs(cfg: &NetworkConfig, h: usize, w: usize) -> Result<u64> {
    Ok(count_network(cfg, h, w)?.macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_network, Variant};
    use crate::params::Module;

    #[test]
    fn params_match_built_network() {
        for v in Variant::ALL {
            let cfg = NetworkConfig::tiny().with_variant(v);
            let net = build_network::<f32>(&cfg).unwrap();
            assert_eq!(count_params(&cfg).unwrap(), net.num_params() as u64, "{v}");
        }
    }

    #[test]
    fn head_conv_flops_scale_with_area() {
        let cfg = NetworkConfig::tiny().with_variant(Variant::Net1);
        let spec = frame_specs(16)[0];
        assert_eq!(spec.flops(1, 64, 64).unwrap(), 4 * spec.flops(1, 32, 32).unwrap());
        assert!(count_flops(&cfg, 64, 64).unwrap() > count_flops(&cfg, 32, 32).unwrap());
        assert!(count_flops(&cfg, 63, 64).is_err());
    }
}
