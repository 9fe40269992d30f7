//! Synthetic blurred/sharp pairs: procedural patterns blurred by a linear
//! motion kernel.
//!
//! Blurring is a circular convolution, so every output pixel is a convex
//! combination of input pixels under a fixed set of periodic shifts. This
//! keeps values inside `[0, 1]` and guarantees that the periodic total
//! variation never increases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side of the square images.
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    /// Motion length range in pixels.
    pub min_len: f64,
    pub max_len: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 96,
            count: 500,
            seed: 0,
            min_len: 3.0,
            max_len: 15.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::invalid("synth", format!("image size {} too small", self.size)));
        }
        if !(self.min_len >= 1.0 && self.min_len <= self.max_len) {
            return Err(Error::invalid(
                "synth",
                format!("need 1 <= min_len <= max_len, got [{}, {}]", self.min_len, self.max_len),
            ));
        }
        Ok(())
    }
}

/// Normalised point-spread function of a straight motion path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionKernel {
    pub length: f64,
    /// Radians, counter-clockwise from the +x axis.
    pub angle: f64,
    /// Odd side of the square support.
    pub size: usize,
    pub weights: Vec<f64>,
}

impl MotionKernel {
    /// Rasterises a centred segment by integrating along it: dense samples
    /// are splatted bilinearly onto the grid. Lengths up to one pixel give a delta.
    pub fn linear(length: f64, angle: f64) -> Self {
        if length <= 1.0 {
            return Self {
                length,
                angle,
                size: 1,
                weights: vec![1.0],
            };
        }
        let radius = (length / 2.0).ceil() as usize;
        let size = 2 * radius + 1;
        let mut weights = vec![0.0; size * size];
        let samples = (length * 32.0).ceil() as usize;
        let (dx, dy) = (angle.cos(), -angle.sin());
        for k in 0..samples {
            let t = -length / 2.0 + (k as f64 + 0.5) * length / samples as f64;
            let (x, y) = (radius as f64 + t * dx, radius as f64 + t * dy);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                    if wx * wy > 0.0 {
                        weights[yy as usize * size + xx as usize] += wx * wy;
                    }
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self {
            length,
            angle,
            size,
            weights,
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Circular convolution of every plane with `k`.
pub fn blur_circular<T: Scalar>(x: &Tensor<T>, k: &MotionKernel) -> Tensor<T> {
    let s = x.shape();
    let r = (k.size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..k.size)
        .flat_map(|a| (0..k.size).map(move |b| (a, b)))
        .filter_map(|(a, b)| {
            let w = k.weights[a * k.size + b];
            (w != 0.0).then_some((a as isize - r, b as isize - r, w))
        })
        .collect();
    let wrap = |v: isize, n: usize| v.rem_euclid(n as isize) as usize;
    Tensor::from_fn(s, |n, c, i, j| {
        let p = x.plane(n, c);
        let acc: f64 = taps
            .iter()
            .map(|&(di, dj, w)| w * p[wrap(i as isize - di, s.h) * s.w + wrap(j as isize - dj, s.w)].as_f64())
            .sum();
        T::of(acc.clamp(0.0, 1.0))
    })
}

/// Anisotropic total variation with periodic boundary.
pub fn total_variation<T: Scalar>(x: &Tensor<T>) -> f64 {
    let s = x.shape();
    let mut tv = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = p[i * s.w + j].as_f64();
                    tv += (p[((i + 1) % s.h) * s.w + j].as_f64() - v).abs();
                    tv += (p[i * s.w + (j + 1) % s.w].as_f64() - v).abs();
                }
            }
        }
    }
    tv
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Random scene of a shaded background, filled rectangles, disks and
/// pen-like strokes, all with hard edges.
pub fn pattern<T: Scalar, R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<T> {
    let sz = size as f64;
    let mut img = vec![[0.0f64; 3]; size * size];
    let (c0, c1) = (color(rng), color(rng));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for i in 0..size {
        for j in 0..size {
            let t = 0.5 + 0.5 * ((j as f64 / sz - 0.5) * theta.cos() + (i as f64 / sz - 0.5) * theta.sin());
            img[i * size + j] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t);
        }
    }
    for _ in 0..rng.gen_range(3..9) {
        let (h, w) = (rng.gen_range(size / 8..=size / 2 + 1), rng.gen_range(size / 8..=size / 2 + 1));
        let (top, left) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let col = color(rng);
        for i in top..(top + h).min(size) {
            for j in left..(left + w).min(size) {
                img[i * size + j] = col;
            }
        }
    }
    for _ in 0..rng.gen_range(1..4) {
        let (cy, cx) = (rng.gen_range(0.0..sz), rng.gen_range(0.0..sz));
        let rad = rng.gen_range(sz / 16.0..sz / 5.0);
        let col = color(rng);
        for i in 0..size {
            for j in 0..size {
                if (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) <= rad * rad {
                    img[i * size + j] = col;
                }
            }
        }
    }
    // short thick segments, loosely resembling glyph strokes
    for _ in 0..rng.gen_range(4..12) {
        let (y0, x0) = (rng.gen_range(0.0..sz), rng.gen_range(0.0..sz));
        let len = rng.gen_range(sz / 16.0..sz / 4.0);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (y1, x1) = (y0 + len * ang.sin(), x0 + len * ang.cos());
        let half = rng.gen_range(0.5..2.0);
        let col = color(rng);
        for i in 0..size {
            for j in 0..size {
                let (py, px) = (i as f64, j as f64);
                let (vy, vx) = (y1 - y0, x1 - x0);
                let t = (((py - y0) * vy + (px - x0) * vx) / (vy * vy + vx * vx)).clamp(0.0, 1.0);
                let d2 = (py - y0 - t * vy).powi(2) + (px - x0 - t * vx).powi(2);
                if d2 <= half * half {
                    img[i * size + j] = col;
                }
            }
        }
    }
    Tensor::from_fn(Shape4::new(1, 3, size, size), |_, c, i, j| T::of(img[i * size + j][c]))
}

/// One pair: `(blur, sharp, kernel)` with length uniform in
/// `[min_len, max_len]` and angle uniform in `[0, pi)`.
pub fn synth_blur_pair<T: Scalar, R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>, MotionKernel)> {
    cfg.validate()?;
    let sharp = pattern(cfg.size, rng);
    let length = if cfg.max_len > cfg.min_len {
        rng.gen_range(cfg.min_len..=cfg.max_len)
    } else {
        cfg.min_len
    };
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let k = MotionKernel::linear(length, angle);
    Ok((blur_circular(&sharp, &k), sharp, k))
}

/// A named synthetic pair.
#[derive(Clone, Debug)]
pub struct SynthSample<T: Scalar> {
    pub name: String,
    pub blur: Tensor<T>,
    pub sharp: Tensor<T>,
    pub kernel: MotionKernel,
}

/// Generates `cfg.count` pairs; item `i` depends only on `(cfg.seed, i)`.
pub fn synth_dataset<T: Scalar>(cfg: &SynthConfig) -> Result<Vec<SynthSample<T>>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let (blur, sharp, kernel) = synth_blur_pair(cfg, &mut rng)?;
            Ok(SynthSample {
                name: format!("{i:05}.png"),
                blur,
                sharp,
                kernel,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalised() {
        for (l, a) in [(1.0, 0.3), (3.0, 0.0), (7.5, 1.1), (15.0, 3.0), (4.2, std::f64::consts::FRAC_PI_2)] {
            let k = MotionKernel::linear(l, a);
            assert!((k.sum() - 1.0).abs() < 1e-9);
            assert!(k.weights.iter().all(|&w| w >= 0.0));
            assert_eq!(k.size % 2, 1);
        }
    }

    #[test]
    fn horizontal_kernel_stays_on_centre_row() {
        let k = MotionKernel::linear(5.0, 0.0);
        let r = k.size / 2;
        for (idx, &w) in k.weights.iter().enumerate() {
            if idx / k.size != r {
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn unit_length_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sharp = pattern::<f64, _>(24, &mut rng);
        assert_eq!(blur_circular(&sharp, &MotionKernel::linear(1.0, 0.7)), sharp);
    }

    #[test]
    fn blur_reduces_total_variation() {
        let cfg = SynthConfig { size: 32, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (b, s, _) = synth_blur_pair::<f64, _>(&cfg, &mut rng).unwrap();
            assert!(total_variation(&b) <= total_variation(&s) + 1e-9);
        }
    }

    #[test]
    fn dataset_items_are_independent_of_count() {
        let a = synth_dataset::<f32>(&SynthConfig { size: 16, count: 3, ..SynthConfig::default() }).unwrap();
        let b = synth_dataset::<f32>(&SynthConfig { size: 16, count: 5, ..SynthConfig::default() }).unwrap();
        assert_eq!(a[2].blur, b[2].blur);
        assert_ne!(a[0].sharp, a[1].sharp);
    }
}
