//! PNG reading and writing. Images are `1 x 3 x h x w` tensors in `[0, 1]`;
//! quantisation to 8 bits happens only here.

use std::io::{Cursor, Write};
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};
use crate::Scalar;

pub fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape4::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// Clamps to `[0, 1]` and rounds to 8 bits. Uses the first batch item.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    crate::error::expect_dim("tensor_to_rgb", "c", 3, s.c)?;
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| quantize(t.get(0, c, y as usize, x as usize).as_f64())))
    }))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_png<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_png(&tensor_to_rgb(t)?)?)
}

pub fn write_gray_png(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::invalid("write_gray_png", "pixel count does not match size"))?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    write_atomic(path, &buf.into_inner())
}

/// Writes to a temporary file in the target directory, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8_bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn(Shape4::new(1, 3, 5, 7), |_, c, y, x| ((c * 35 + y * 7 + x) * 2) as f32 / 255.0);
        let p = dir.path().join("a.png");
        write_png(&p, &t).unwrap();
        let back = read_png::<f32>(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn quantize_clamps() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
    }
}
