//! Whole-image and tiled inference.
//!
//! The network halves the resolution once, so odd sides are reflect-padded
//! by one pixel before the pass and cropped afterwards.

use crate::blocks::{banet_forward, BanetParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Index of `i` in `0..len + 1` mirrored about the last sample.
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else if len >= 2 {
        2 * len - 2 - i
    } else {
        0
    }
}

/// Pads bottom and right by one reflected row/column where the side is odd.
pub fn pad_to_even<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h + s.h % 2, s.w + s.w % 2);
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    Tensor::from_fn(s.with_hw(h, w), |n, c, i, j| x.get(n, c, reflect(i, s.h), reflect(j, s.w)))
}

pub fn crop_top_left<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    Tensor::from_fn(s.with_hw(h, w), |n, c, i, j| x.get(n, c, i, j))
}

/// Runs the network on an image of any size; output has the input's size.
pub fn infer_image<T: Scalar>(net: &BanetParams<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    let y = banet_forward(&pad_to_even(img), net)?;
    Ok(crop_top_left(&y, s.h, s.w))
}

/// Square tiles of side `tile` whose neighbours share `overlap` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub tile: usize,
    pub overlap: usize,
}

impl Tiling {
    pub fn validate(&self) -> Result<()> {
        if self.tile < 2 || self.overlap >= self.tile {
            return Err(Error::invalid(
                "tiling",
                format!("need tile >= 2 and overlap < tile, got tile {} overlap {}", self.tile, self.overlap),
            ));
        }
        Ok(())
    }

    /// Tile starts along an axis of length `len`; the last tile is flush with the end.
    pub fn starts(&self, len: usize) -> Vec<usize> {
        if len <= self.tile {
            return vec![0];
        }
        let stride = self.tile - self.overlap;
        let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + self.tile < len).collect();
        v.push(len - self.tile);
        v
    }
}

/// Blending weight of offset `i` in a tile of length `len`: ramps linearly
/// across `overlap` pixels on sides that face another tile.
fn ramp(i: usize, len: usize, overlap: usize, open_lo: bool, open_hi: bool) -> f64 {
    let edge = |d: usize| ((d + 1) as f64 / (overlap + 1) as f64).min(1.0);
    let lo = if open_lo { edge(i) } else { 1.0 };
    let hi = if open_hi { edge(len - 1 - i) } else { 1.0 };
    lo * hi
}

/// Runs tiles independently and blends them with separable linear weights.
pub fn infer_tiled<T: Scalar>(net: &BanetParams<T>, img: &Tensor<T>, tiling: Tiling) -> Result<Tensor<T>> {
    tiling.validate()?;
    let s = img.shape();
    let (rows, cols) = (tiling.starts(s.h), tiling.starts(s.w));
    if rows.len() == 1 && cols.len() == 1 {
        return infer_image(net, img);
    }
    let mut acc = vec![0.0f64; s.numel()];
    let mut wsum = vec![0.0f64; s.h * s.w];
    for (ri, &top) in rows.iter().enumerate() {
        let th = tiling.tile.min(s.h);
        for (ci, &left) in cols.iter().enumerate() {
            let tw = tiling.tile.min(s.w);
            let patch = Tensor::from_fn(s.with_hw(th, tw), |n, c, i, j| img.get(n, c, top + i, left + j));
            let out = infer_image(net, &patch)?;
            for i in 0..th {
                let wi = ramp(i, th, tiling.overlap, ri > 0, ri + 1 < rows.len());
                for j in 0..tw {
                    let wgt = wi * ramp(j, tw, tiling.overlap, ci > 0, ci + 1 < cols.len());
                    let pix = (top + i) * s.w + left + j;
                    wsum[pix] += wgt;
                    for n in 0..s.n {
                        for c in 0..s.c {
                            acc[(n * s.c + c) * s.h * s.w + pix] += wgt * out.get(n, c, i, j).as_f64();
                        }
                    }
                }
            }
        }
    }
    let plane = s.h * s.w;
    Tensor::from_vec(s, acc.iter().enumerate().map(|(k, &v)| T::of(v / wsum[k % plane])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_network, NetworkConfig};
    use crate::Shape4;

    #[test]
    fn reflect_padding_mirrors_interior() {
        let x = Tensor::<f64>::from_fn(Shape4::new(1, 1, 3, 1), |_, _, i, _| i as f64);
        let p = pad_to_even(&x);
        assert_eq!(p.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn tile_starts_cover_axis() {
        let t = Tiling { tile: 32, overlap: 16 };
        assert_eq!(t.starts(64), vec![0, 16, 32]);
        assert_eq!(t.starts(20), vec![0]);
        assert_eq!(Tiling { tile: 30, overlap: 4 }.starts(70), vec![0, 26, 40]);
    }

    #[test]
    fn zero_residual_is_identity_at_any_size() {
        let mut net = build_network::<f32>(&NetworkConfig::tiny()).unwrap();
        net.zero_residual_branches();
        let img = Tensor::from_fn(Shape4::new(1, 3, 19, 21), |_, c, i, j| ((c + i * j) % 7) as f32 / 7.0);
        assert_eq!(infer_image(&net, &img).unwrap(), img);
        let tiled = infer_tiled(&net, &img, Tiling { tile: 16, overlap: 4 }).unwrap();
        assert!(tiled.max_abs_diff(&img) < 1e-6);
    }
}
