//! Evaluation metrics on images in `[0, 1]`: PSNR and Gaussian-window SSIM.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};
use crate::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio for unit peak; `+inf` when the inputs are equal.
pub fn psnr<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape("psnr", r.shape(), y.shape())?;
    let sse: f64 = r
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum();
    let mse = sse / r.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let mut g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    g
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let line = &src[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().zip(&line[j..j + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid window positions, computed per
/// channel and averaged over channels and batch items.
pub fn ssim<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", r.shape(), y.shape())?;
    let s = r.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h, s.w),
        ));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = r.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = y.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
            let f = |v: &[f64]| filter_valid(v, s.h, s.w, &taps);
            let (mu_a, mu_b) = (f(&a), f(&b));
            let (aa, bb, ab) = (f(&prod(&a, &a)), f(&prod(&b, &b)), f(&prod(&a, &b)));
            let mut sum = 0.0;
            for k in 0..mu_a.len() {
                let (ma, mb) = (mu_a[k], mu_b[k]);
                let va = aa[k] - ma * ma;
                let vb = bb[k] - mb * mb;
                let cov = ab[k] - ma * mb;
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += sum / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "filename,psnr_db,ssim";

/// Writes `filename,psnr_db,ssim` rows under a header line.
pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.name, fmt_db(r.psnr_db), r.ssim)?;
    }
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape4;

    #[test]
    fn psnr_closed_forms() {
        let y = Tensor::<f64>::full(Shape4::new(1, 3, 4, 4), 0.5);
        assert_eq!(psnr(&y, &y).unwrap(), f64::INFINITY);
        let r = y.map(|v| v + 0.1);
        assert!((psnr(&r, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let (a, b) = (0.3, 0.8);
        let s = Shape4::new(1, 2, 16, 12);
        let v = ssim(&Tensor::<f64>::full(s, a), &Tensor::full(s, b)).unwrap();
        let c1 = 1e-4;
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let t = Tensor::<f32>::zeros(Shape4::new(1, 1, 10, 40));
        assert!(ssim(&t, &t).is_err());
    }

    #[test]
    fn gaussian_taps_are_normalised_and_symmetric() {
        let g = gaussian_taps(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn csv_rows() {
        let mut out = Vec::new();
        let rows = [MetricRow { name: "a.png".into(), psnr_db: f64::INFINITY, ssim: 1.0 }];
        write_metrics_csv(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "filename,psnr_db,ssim\na.png,inf,1\n");
    }
}
