//! The standard gradient-check suite shared by the acceptance tests and the
//! command-line `test` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{mksp_fuse, mksp_fuse_backward, ArParams, BaParams, KernelSet, MkspParams, SpParams};
use crate::blocks::{build_network, BamParams, BodyKind, CpdcParams, GateKind, NetworkConfig, PdcParams, Variant};
use crate::loss::{charbonnier, charbonnier_with_grad, fft_loss, fft_loss_with_grad};
use crate::oracle::{check_block, check_scalar_fn, randomize_biases, GradCheckConfig, GradCheckReport};
use crate::tensor::{
    adaptive_avg_pool2d, adaptive_avg_pool2d_backward, add, add_backward, concat_channels, mul, mul_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, split_channels,
};
use crate::{ConvParams, ConvSpec, Result, Shape4, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: Shape4, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn factory(seed: u64) -> impl FnMut(ConvSpec) -> ConvParams<f64> {
    let mut r = rng(seed);
    move |s| ConvParams::init_uniform(s, &mut r)
}

fn gc(tol: f64, seed: u64, max_coords: Option<usize>) -> GradCheckConfig {
    GradCheckConfig {
        tolerance: tol,
        seed,
        max_coords,
        ..GradCheckConfig::default()
    }
}

/// Checks `x -> sum(r * op(x))` against the supplied vector-Jacobian product.
fn check_unary(
    name: &str,
    x: &Tensor<f64>,
    op: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    vjp: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    seed: u64,
) -> Result<GradCheckReport> {
    let y = op(x)?;
    let r = rand_t(y.shape(), &mut rng(seed ^ 0xabc));
    let analytic = vjp(&r)?;
    let f = |t: &Tensor<f64>| -> Result<f64> { Ok(op(t)?.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()) };
    check_scalar_fn(name, f, x, &analytic, &gc(1e-5, seed, None))
}

/// Gradient checks of every differentiable operator, composite block, loss
/// and network variant at 64-bit, with inputs and weights drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let op_tol = 1e-5;

    // convolutions, plain, strided, dilated, depthwise and transposed
    let cin = r.gen_range(1..=4);
    let cout = r.gen_range(1..=4);
    let x = rand_t(Shape4::new(2, cin, 8, 8), &mut r);
    let specs = [
        ("conv2d", ConvSpec::same(cin, cout, 3, 1)),
        ("conv2d stride 2", ConvSpec::new(cin, cout, (3, 3)).stride((2, 2)).padding((1, 1))),
        ("conv2d dilation 3", ConvSpec::same(cin, cout, 3, 3)),
        ("conv2d depthwise strip", ConvSpec::new(cin, cin, (3, 1)).padding((1, 0)).groups(cin)),
        ("conv_transpose2d", ConvSpec::new(cin, cout, (4, 4)).stride((2, 2)).padding((1, 1)).transposed()),
    ];
    for (name, spec) in specs {
        let mut p = ConvParams::init_uniform(spec, &mut r);
        randomize_biases(&mut p, 0.5, seed);
        out.push(check_block(name, &p, &x, &gc(op_tol, seed, None))?);
    }

    let x = rand_t(Shape4::new(2, 3, 8, 8), &mut r);
    let s = x.shape();
    for (oh, ow) in [(8, 3), (5, 8), (3, 3)] {
        out.push(check_unary(
            &format!("adaptive_avg_pool2d {oh}x{ow}"),
            &x,
            |t| adaptive_avg_pool2d(t, oh, ow),
            |g| adaptive_avg_pool2d_backward(s, g),
            seed,
        )?);
    }
    let y = relu(&x);
    out.push(check_unary("relu", &x, |t| Ok(relu(t)), |g| relu_backward(&y, g), seed)?);
    let sg = sigmoid(&x);
    out.push(check_unary("sigmoid", &x, |t| Ok(sigmoid(t)), |g| sigmoid_backward(&sg, g), seed)?);
    let b = rand_t(s, &mut r);
    out.push(check_unary("mul", &x, |t| mul(t, &b), |g| Ok(mul_backward(&x, &b, g)?.0), seed)?);
    out.push(check_unary("add", &x, |t| add(t, &b), |g| Ok(add_backward(s, s, g)?.0), seed)?);
    let extra = rand_t(s.with_c(2), &mut r);
    out.push(check_unary(
        "concat_channels",
        &x,
        |t| concat_channels(&[t, &extra]),
        |g| Ok(split_channels(g, &[3, 2])?.remove(0)),
        seed,
    )?);
    for n in [1, 3, 5] {
        let v = rand_t(s.with_hw(8, n), &mut r);
        let hz = rand_t(s.with_hw(n, 8), &mut r);
        out.push(check_unary(
            &format!("mksp_fuse n={n} (vertical)"),
            &v,
            |t| mksp_fuse(t, &hz, 8, 8),
            |g| Ok(mksp_fuse_backward(g, n)?.0),
            seed,
        )?);
        out.push(check_unary(
            &format!("mksp_fuse n={n} (horizontal)"),
            &hz,
            |t| mksp_fuse(&v, t, 8, 8),
            |g| Ok(mksp_fuse_backward(g, n)?.1),
            seed,
        )?);
    }

    let target = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let pred = Tensor::uniform(s, 0.0, 1.0, &mut r);
    let (_, g) = charbonnier_with_grad(&pred, &target, 1e-3)?;
    out.push(check_scalar_fn("charbonnier", |t| charbonnier(t, &target, 1e-3), &pred, &g, &gc(op_tol, seed, None))?);
    let (_, g) = fft_loss_with_grad(&pred, &target)?;
    out.push(check_scalar_fn("fft_loss", |t| fft_loss(t, &target), &pred, &g, &gc(op_tol, seed, None))?);

    // composite blocks at C = 4 on 2x4x8x8
    let c = 4;
    let ks = KernelSet::default();
    let x = rand_t(Shape4::new(2, c, 8, 8), &mut r);
    let blk = gc(op_tol, seed, Some(24));
    macro_rules! block {
        ($name:expr, $build:expr) => {{
            let mut p = $build;
            randomize_biases(&mut p, 0.2, seed);
            out.push(check_block($name, &p, &x, &blk)?);
        }};
    }
    block!("SP", SpParams::build(c, &mut factory(seed)));
    block!("MKSP", MkspParams::build(c, &ks, &mut factory(seed)));
    block!("AR", ArParams::build(c, &mut factory(seed)));
    block!("BA", BaParams::build(c, &ks, &mut factory(seed)));
    block!("PDC", PdcParams::build(c, &mut factory(seed))?);
    block!("CPDC", CpdcParams::build(c, &mut factory(seed))?);
    block!("BAM", BamParams::build(GateKind::Ba, BodyKind::Cpdc, c, &ks, &mut factory(seed))?);

    // full network: tiny frame, feature maps 2x4x4x4
    let cfg = NetworkConfig {
        base_channels: 4,
        num_bams: 2,
        kernel_set: KernelSet::new(vec![1, 3])?,
        seed,
        ..NetworkConfig::tiny()
    };
    let img = Tensor::uniform(Shape4::new(2, 3, 8, 8), 0.0, 1.0, &mut r);
    let variants: &[Variant] = if seed == 0 { &Variant::ALL } else { &[Variant::Full] };
    for &v in variants {
        let mut net = build_network::<f64>(&cfg.clone().with_variant(v))?;
        randomize_biases(&mut net, 0.1, seed);
        out.push(check_block(&format!("BANet {v}"), &net, &img, &gc(1e-4, seed, Some(16)))?);
    }
    Ok(out)
}
