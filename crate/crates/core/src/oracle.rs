//! Slow reference implementations and the finite-difference gradient checker.
//!
//! Nothing here calls into the optimised operators: the loops below are the
//! textbook definitions, evaluated in f64 whatever the input precision, and
//! serve as ground truth for the test suites.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::ComplexTensor;
use crate::params::Block;
use crate::tensor::{ConvParams, Shape4, Tensor};
use crate::Scalar;

fn check(ok: bool, op: &'static str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(op, msg()))
    }
}

fn non_negative(op: &'static str, len: isize) -> Result<usize> {
    check(len >= 0, op, || "kernel does not fit the input".into())?;
    Ok(len as usize)
}

/// Direct convolution (cross-correlation) with zero padding, stride, dilation and groups.
pub fn naive_conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<f64>> {
    let sp = &p.spec;
    check(!sp.transposed, "naive_conv2d", || "transposed spec".into())?;
    let s = x.shape();
    check(s.c == sp.in_ch, "naive_conv2d", || format!("input has {} channels, spec {}", s.c, sp.in_ch))?;
    let (kh, kw) = sp.kernel;
    let (sh, sw) = sp.stride;
    let (ph, pw) = sp.padding;
    let (dh, dw) = sp.dilation;
    let oh = non_negative("naive_conv2d", (s.h + 2 * ph) as isize - (dh * (kh - 1) + 1) as isize)? / sh + 1;
    let ow = non_negative("naive_conv2d", (s.w + 2 * pw) as isize - (dw * (kw - 1) + 1) as isize)? / sw + 1;
    let icg = sp.in_ch / sp.groups;
    let ocg = sp.out_ch / sp.groups;
    let mut out = Tensor::<f64>::zeros(Shape4::new(s.n, sp.out_ch, oh, ow));
    for n in 0..s.n {
        for o in 0..sp.out_ch {
            let g = o / ocg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b[o].as_f64());
                    for ci in 0..icg {
                        for a in 0..kh {
                            for b in 0..kw {
                                let y = (i * sh + a * dh) as isize - ph as isize;
                                let z = (j * sw + b * dw) as isize - pw as isize;
                                if y < 0 || z < 0 || y >= s.h as isize || z >= s.w as isize {
                                    continue;
                                }
                                acc += x.get(n, g * icg + ci, y as usize, z as usize).as_f64()
                                    * p.weight.get(o, ci, a, b).as_f64();
                            }
                        }
                    }
                    out.set(n, o, i, j, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Direct transposed convolution: every input pixel scatters its kernel into the output.
pub fn naive_conv_transpose2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<f64>> {
    let sp = &p.spec;
    check(sp.transposed, "naive_conv_transpose2d", || "expects a transposed spec".into())?;
    let s = x.shape();
    check(s.c == sp.in_ch, "naive_conv_transpose2d", || {
        format!("input has {} channels, spec {}", s.c, sp.in_ch)
    })?;
    let (kh, kw) = sp.kernel;
    let (sh, sw) = sp.stride;
    let (ph, pw) = sp.padding;
    let (dh, dw) = sp.dilation;
    let oh = non_negative(
        "naive_conv_transpose2d",
        ((s.h - 1) * sh + dh * (kh - 1)) as isize - 2 * ph as isize,
    )? + 1;
    let ow = non_negative(
        "naive_conv_transpose2d",
        ((s.w - 1) * sw + dw * (kw - 1)) as isize - 2 * pw as isize,
    )? + 1;
    let icg = sp.in_ch / sp.groups;
    let ocg = sp.out_ch / sp.groups;
    let mut out = Tensor::<f64>::zeros(Shape4::new(s.n, sp.out_ch, oh, ow));
    for n in 0..s.n {
        for ci in 0..sp.in_ch {
            let g = ci / icg;
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = x.get(n, ci, i, j).as_f64();
                    for ol in 0..ocg {
                        for a in 0..kh {
                            for b in 0..kw {
                                let y = (i * sh + a * dh) as isize - ph as isize;
                                let z = (j * sw + b * dw) as isize - pw as isize;
                                if y < 0 || z < 0 || y >= oh as isize || z >= ow as isize {
                                    continue;
                                }
                                let o = g * ocg + ol;
                                let cur = out.get(n, o, y as usize, z as usize);
                                out.set(n, o, y as usize, z as usize, cur + v * p.weight.get(ci, ol, a, b).as_f64());
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = &p.bias {
        for n in 0..s.n {
            for (o, b) in bias.iter().enumerate() {
                for i in 0..oh {
                    for j in 0..ow {
                        let cur = out.get(n, o, i, j);
                        out.set(n, o, i, j, cur + b.as_f64());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cells covered by output index `k` of an adaptive pool from `input` to `output` cells.
pub fn naive_pool_window(input: usize, output: usize, k: usize) -> std::ops::Range<usize> {
    let stride = input / output;
    let kernel = input - (output - 1) * stride;
    k * stride..k * stride + kernel
}

/// Literal per-window mean.
pub fn naive_adaptive_pool<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let s = x.shape();
    check(
        (1..=s.h).contains(&out_h) && (1..=s.w).contains(&out_w),
        "naive_adaptive_pool",
        || format!("target {out_h}x{out_w} outside the {}x{} input", s.h, s.w),
    )?;
    let mut out = Tensor::<f64>::zeros(s.with_hw(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..out_h {
                for j in 0..out_w {
                    let (mut sum, mut count) = (0.0, 0usize);
                    for y in naive_pool_window(s.h, out_h, i) {
                        for z in naive_pool_window(s.w, out_w, j) {
                            sum += x.get(n, c, y, z).as_f64();
                            count += 1;
                        }
                    }
                    out.set(n, c, i, j, sum / count as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Textbook double-sum DFT of every plane.
pub fn naive_dft2d<T: Scalar>(x: &Tensor<T>) -> ComplexTensor<f64> {
    let s = x.shape();
    let mut re = Tensor::<f64>::zeros(s);
    let mut im = Tensor::<f64>::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for u in 0..s.h {
                for v in 0..s.w {
                    let (mut a, mut b) = (0.0, 0.0);
                    for i in 0..s.h {
                        for j in 0..s.w {
                            // reduce the phase index first to keep the angle small
                            let t = ((u * i) % s.h) as f64 / s.h as f64 + ((v * j) % s.w) as f64 / s.w as f64;
                            let val = x.get(n, c, i, j).as_f64();
                            a += val * (2.0 * PI * t).cos();
                            b -= val * (2.0 * PI * t).sin();
                        }
                    }
                    re.set(n, c, u, v, a);
                    im.set(n, c, u, v, b);
                }
            }
        }
    }
    ComplexTensor { re, im }
}

/// SSIM from an explicit 2-D Gaussian window slid over every valid position.
pub fn naive_ssim<T: Scalar>(r: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let s = r.shape();
    check(s == y.shape(), "naive_ssim", || "shape mismatch".into())?;
    let k = 11usize;
    check(s.h >= k && s.w >= k, "naive_ssim", || "image smaller than window".into())?;
    let sigma = 1.5f64;
    let mut win = vec![0.0f64; k * k];
    for a in 0..k {
        for b in 0..k {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            win[a * k + b] = (-(da * da + db * db) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let mut sum = 0.0;
            let positions = (s.h - k + 1) * (s.w - k + 1);
            for i in 0..=s.h - k {
                for j in 0..=s.w - k {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for a in 0..k {
                        for b in 0..k {
                            let wt = win[a * k + b];
                            ma += wt * r.get(n, c, i + a, j + b).as_f64();
                            mb += wt * y.get(n, c, i + a, j + b).as_f64();
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for a in 0..k {
                        for b in 0..k {
                            let wt = win[a * k + b];
                            let da = r.get(n, c, i + a, j + b).as_f64() - ma;
                            let db = y.get(n, c, i + a, j + b).as_f64() - mb;
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += sum / positions as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

fn eval_finite(f: &mut impl FnMut(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>) -> Result<f64> {
    let v = f(x)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("finite-difference objective".into()))
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at the listed coordinates.
pub fn finite_diff_at(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = eval_finite(&mut f, &probe)?;
            probe.data_mut()[i] = orig - h;
            let down = eval_finite(&mut f, &probe)?;
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Central-difference gradient at every coordinate.
pub fn finite_diff_grad(
    f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    let all: Vec<usize> = (0..x.numel()).collect();
    Tensor::from_vec(x.shape(), finite_diff_at(f, x, h, &all)?)
}

/// Step, tolerance and sampling for a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Absolute differences at or below this count as exact.
    pub abs_floor: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            abs_floor: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    fn coords(&self, len: usize, salt: u64) -> Vec<usize> {
        match self.max_coords {
            Some(m) if m < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    }
}

/// Comparison of analytic and numeric gradients for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradCheckEntry {
    pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64], abs_floor: f64) -> Self {
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (&a, &n) in analytic.iter().zip(numeric) {
            let diff = (a - n).abs();
            max_abs = max_abs.max(diff);
            if diff > abs_floor {
                max_rel = max_rel.max(diff / a.abs().max(n.abs()));
            }
        }
        Self {
            name: name.into(),
            checked: analytic.len(),
            max_rel,
            max_abs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn new(op: impl Into<String>, entries: Vec<GradCheckEntry>, tolerance: f64) -> Self {
        let max_rel = entries.iter().map(|e| e.max_rel).fold(0.0, f64::max);
        let max_abs = entries.iter().map(|e| e.max_abs).fold(0.0, f64::max);
        Self {
            op: op.into(),
            max_rel,
            max_abs,
            entries,
            tolerance,
            pass: max_rel <= tolerance,
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0).max(9);
        writeln!(
            f,
            "{}: max rel {:.3e}, max abs {:.3e}, tol {:.0e} -> {}",
            self.op,
            self.max_rel,
            self.max_abs,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        writeln!(f, "  {:<width$}  {:>7}  {:>10}  {:>10}", "parameter", "checked", "max rel", "max abs")?;
        for e in &self.entries {
            writeln!(f, "  {:<width$}  {:>7}  {:>10.3e}  {:>10.3e}", e.name, e.checked, e.max_rel, e.max_abs)?;
        }
        Ok(())
    }
}

/// Checks a scalar function of one tensor against a supplied analytic gradient.
pub fn check_scalar_fn(
    op: &str,
    f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    check(analytic.shape() == x.shape(), "grad check", || "gradient shape differs from input".into())?;
    let coords = cfg.coords(x.numel(), 0);
    let numeric = finite_diff_at(f, x, cfg.step, &coords)?;
    let picked: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    Ok(GradCheckReport::new(
        op,
        vec![GradCheckEntry::compare("input", &picked, &numeric, cfg.abs_floor)],
        cfg.tolerance,
    ))
}

/// `sum(r * (up - down)) / 2h`, differencing outputs before projecting so the
/// rounding error of the large shared part of `up` and `down` cancels.
fn projected_difference(up: &Tensor<f64>, down: &Tensor<f64>, r: &Tensor<f64>, h: f64) -> f64 {
    let s: f64 = up
        .data()
        .iter()
        .zip(down.data())
        .zip(r.data())
        .map(|((a, b), w)| (a - b) * w)
        .sum();
    s / (2.0 * h)
}

fn finite_output(y: Tensor<f64>, what: impl FnOnce() -> String) -> Result<Tensor<f64>> {
    if y.data().iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Checks a block's input and parameter gradients for the objective
/// `sum(r * block(x))`, with a fixed random projection `r`.
pub fn check_block<B: Block<f64>>(op: &str, block: &B, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (y, cache) = block.forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
    drop(y);
    let mut grads = block.zeros_like();
    let gx = block.backward(x, &cache, &r, &mut grads)?;
    drop(cache);

    let mut entries = Vec::new();
    let coords = cfg.coords(x.numel(), 0);
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.step;
        let up = finite_output(block.forward(&probe)?.0, || "input".into())?;
        probe.data_mut()[i] = orig - cfg.step;
        let down = finite_output(block.forward(&probe)?.0, || "input".into())?;
        probe.data_mut()[i] = orig;
        numeric.push(projected_difference(&up, &down, &r, cfg.step));
    }
    let picked: Vec<f64> = coords.iter().map(|&i| gx.data()[i]).collect();
    entries.push(GradCheckEntry::compare("input", &picked, &numeric, cfg.abs_floor));

    let names: Vec<String> = block.named_convs().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<(Vec<f64>, Option<Vec<f64>>)> = grads
        .named_convs()
        .into_iter()
        .map(|(_, c)| (c.weight.data().to_vec(), c.bias.clone()))
        .collect();
    let mut probe = block.clone();
    let set = |probe: &mut B, k: usize, bias: bool, i: usize, v: Option<f64>| -> f64 {
        let mut convs = probe.named_convs_mut();
        let c = &mut convs[k].1;
        let buf = if bias {
            c.bias.as_mut().expect("bias present").as_mut_slice()
        } else {
            c.weight.data_mut()
        };
        let old = buf[i];
        if let Some(v) = v {
            buf[i] = v;
        }
        old
    };
    for (k, name) in names.iter().enumerate() {
        let (gw, gb) = &analytic[k];
        let parts: [(&str, Option<&Vec<f64>>); 2] = [("weight", Some(gw)), ("bias", gb.as_ref())];
        for (slot, (part, grad)) in parts.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let bias = slot == 1;
            let label = format!("{name}.{part}");
            let coords = cfg.coords(grad.len(), (2 * k + slot + 1) as u64);
            let mut numeric = Vec::with_capacity(coords.len());
            for &i in &coords {
                let orig = set(&mut probe, k, bias, i, None);
                set(&mut probe, k, bias, i, Some(orig + cfg.step));
                let up = finite_output(probe.forward(x)?.0, || label.clone())?;
                set(&mut probe, k, bias, i, Some(orig - cfg.step));
                let down = finite_output(probe.forward(x)?.0, || label.clone())?;
                set(&mut probe, k, bias, i, Some(orig));
                numeric.push(projected_difference(&up, &down, &r, cfg.step));
            }
            let picked: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
            entries.push(GradCheckEntry::compare(label, &picked, &numeric, cfg.abs_floor));
        }
    }
    Ok(GradCheckReport::new(op, entries, cfg.tolerance))
}

/// Draws every bias uniformly in `+-bound`. Zero biases put ReLU inputs
/// exactly on the kink wherever a layer's input vanishes, where central
/// differences are meaningless.
pub fn randomize_biases<T: Scalar, M: crate::params::Module<T>>(m: &mut M, bound: f64, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, c) in m.named_convs_mut() {
        if let Some(b) = &mut c.bias {
            b.iter_mut().for_each(|v| *v = T::of(rng.gen_range(-bound..bound)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    #[test]
    fn two_by_two_ones() {
        let x = Tensor::<f64>::full(Shape4::new(1, 1, 2, 2), 1.0);
        let mut p = ConvParams::zeros(ConvSpec::new(1, 1, (2, 2)));
        p.weight.fill(1.0);
        let y = naive_conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_fn(Shape4::new(1, 2, 3, 3), |_, c, h, w| (c * 9 + h * 3 + w) as f64);
        let mut p = ConvParams::zeros(ConvSpec::same(2, 2, 3, 1));
        p.weight.set(0, 0, 1, 1, 1.0);
        p.weight.set(1, 1, 1, 1, 1.0);
        assert_eq!(naive_conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn pool_windows_seven_into_three() {
        let w: Vec<_> = (0..3).map(|k| naive_pool_window(7, 3, k)).collect();
        assert_eq!(w, vec![0..3, 2..5, 4..7]);
        let x = Tensor::<f64>::from_fn(Shape4::new(1, 1, 4, 5), |_, _, h, w| (h * 5 + w) as f64);
        assert_eq!(naive_adaptive_pool(&x, 4, 5).unwrap(), x);
    }

    #[test]
    fn alternating_row_hits_nyquist_only() {
        let x = Tensor::<f64>::from_vec(Shape4::new(1, 1, 1, 4), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let f = naive_dft2d(&x);
        for (k, &v) in f.re.data().iter().enumerate() {
            assert!((v - if k == 2 { 4.0 } else { 0.0 }).abs() < 1e-12);
        }
        assert!(f.im.max_abs() < 1e-12);
    }

    #[test]
    fn impulse_spectrum_is_flat() {
        let mut x = Tensor::<f64>::zeros(Shape4::new(1, 1, 3, 5));
        x.set(0, 0, 0, 0, 1.0);
        let f = naive_dft2d(&x);
        assert!(f.re.data().iter().all(|&v| v == 1.0));
        assert!(f.im.max_abs() == 0.0);
    }

    #[test]
    fn square_derivative() {
        let x = Tensor::<f64>::full(Shape4::new(1, 1, 1, 1), 3.0);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn central_difference_error_is_second_order() {
        let x = Tensor::<f64>::full(Shape4::new(1, 1, 1, 1), 0.7);
        let cubic = |t: &Tensor<f64>| Ok(t.data()[0].powi(3));
        let exact = 3.0 * 0.49;
        let e1 = (finite_diff_grad(cubic, &x, 1e-2).unwrap().data()[0] - exact).abs();
        let e2 = (finite_diff_grad(cubic, &x, 5e-3).unwrap().data()[0] - exact).abs();
        assert!((e1 / e2 - 4.0).abs() < 1e-3, "ratio {}", e1 / e2);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::<f64>::zeros(Shape4::new(1, 1, 1, 1));
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-6).is_err());
    }

    #[test]
    fn report_flags_wrong_gradient() {
        let e = GradCheckEntry::compare("w", &[1.0, 2.0], &[1.0, 2.1], 1e-8);
        let r = GradCheckReport::new("op", vec![e], 1e-5);
        assert!(!r.pass);
        assert!((r.max_rel - 0.1 / 2.1).abs() < 1e-12);
        assert!(r.to_string().contains("FAIL"));
    }
}
