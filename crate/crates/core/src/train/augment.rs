use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};
use crate::Scalar;

/// Random crop, flips and rotation by multiples of 90 degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Square crop side; `0` keeps the full image.
    pub crop: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            hflip: true,
            vflip: true,
            rot90: true,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            crop: 0,
            hflip: false,
            vflip: false,
            rot90: false,
        }
    }
}

/// Mirrors columns: `out[i, j] = x[i, w - 1 - j]`.
pub fn hflip<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, i, j| x.get(n, c, i, s.w - 1 - j))
}

/// Mirrors rows: `out[i, j] = x[h - 1 - i, j]`.
pub fn vflip<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, i, j| x.get(n, c, s.h - 1 - i, j))
}

/// Rotates counter-clockwise by `k` quarter turns.
pub fn rot90<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    match k % 4 {
        0 => x.clone(),
        1 => Tensor::from_fn(s.with_hw(s.w, s.h), |n, c, i, j| x.get(n, c, j, s.w - 1 - i)),
        2 => Tensor::from_fn(s, |n, c, i, j| x.get(n, c, s.h - 1 - i, s.w - 1 - j)),
        _ => Tensor::from_fn(s.with_hw(s.w, s.h), |n, c, i, j| x.get(n, c, s.h - 1 - j, i)),
    }
}

pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if top + h > s.h || left + w > s.w || h == 0 || w == 0 {
        return Err(Error::invalid(
            "crop",
            format!("{h}x{w} window at ({top}, {left}) outside {}x{}", s.h, s.w),
        ));
    }
    Ok(Tensor::from_fn(s.with_hw(h, w), |n, c, i, j| x.get(n, c, top + i, left + j)))
}

/// Draws one crop offset, flip decision and rotation per pair and applies
/// it identically to both images.
pub fn augment_pair<T: Scalar, R: Rng + ?Sized>(
    blur: &Tensor<T>,
    sharp: &Tensor<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("augment_pair", blur.shape(), sharp.shape())?;
    let s = blur.shape();
    let (mut b, mut t) = if cfg.crop == 0 {
        (blur.clone(), sharp.clone())
    } else {
        if cfg.crop > s.h.min(s.w) {
            return Err(Error::invalid(
                "augment_pair",
                format!("crop {} larger than image {}x{}", cfg.crop, s.h, s.w),
            ));
        }
        let top = rng.gen_range(0..=s.h - cfg.crop);
        let left = rng.gen_range(0..=s.w - cfg.crop);
        (
            crop(blur, top, left, cfg.crop, cfg.crop)?,
            crop(sharp, top, left, cfg.crop, cfg.crop)?,
        )
    };
    if cfg.hflip && rng.gen_bool(0.5) {
        (b, t) = (hflip(&b), hflip(&t));
    }
    if cfg.vflip && rng.gen_bool(0.5) {
        (b, t) = (vflip(&b), vflip(&t));
    }
    if cfg.rot90 {
        let k = rng.gen_range(0..4);
        (b, t) = (rot90(&b, k), rot90(&t, k));
    }
    Ok((b, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape4::new(1, 2, h, w), |_, c, i, j| (c * 100 + i * w + j) as f64)
    }

    #[test]
    fn hflip_index_map() {
        let x = ramp(4, 4);
        let y = hflip(&x);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.get(0, 1, i, j), x.get(0, 1, i, 3 - j));
            }
        }
    }

    #[test]
    fn four_rotations_are_identity() {
        let x = ramp(3, 5);
        let mut y = x.clone();
        for _ in 0..4 {
            y = rot90(&y, 1);
        }
        assert_eq!(y, x);
        assert_eq!(rot90(&rot90(&x, 1), 1), rot90(&x, 2));
        assert_eq!(rot90(&x, 3), rot90(&rot90(&x, 2), 1));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let (a, b) = (ramp(6, 6), ramp(6, 6).map(|v| v + 1.0));
        let (x, y) = augment_pair(&a, &b, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn pair_stays_aligned() {
        let a = ramp(9, 7);
        let b = a.map(|v| 2.0 * v);
        let cfg = AugmentConfig { crop: 5, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (x, y) = augment_pair(&a, &b, &cfg, &mut rng).unwrap();
            assert_eq!(x.map(|v| 2.0 * v), y);
        }
        assert!(augment_pair(&a, &b, &AugmentConfig { crop: 8, ..cfg }, &mut rng).is_err());
    }
}
