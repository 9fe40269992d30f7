use banet_core::attention::{ba_forward, mksp_mask, ArParams, BaParams, KernelSet, MkspParams, SpParams};
use banet_core::blocks::{banet_forward, build_network, NetworkConfig};
use banet_core::checkpoint::{decode, encode, Checkpoint};
use banet_core::fft::fft2d;
use banet_core::loss::{charbonnier, fft_loss};
use banet_core::metrics::{psnr, ssim};
use banet_core::params::Block;
use banet_core::tensor::{adaptive_avg_pool2d, concat_channels, conv2d, split_channels};
use banet_core::train::{
    augment_pair, cosine_lr, synth_blur_pair, total_variation, AdamState, AugmentConfig, LrSchedule, MotionKernel,
    SynthConfig,
};
use banet_core::{ConvParams, ConvSpec, Shape4, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: Shape4, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn init(spec: ConvSpec, seed: u64) -> ConvParams<f64> {
    ConvParams::init_uniform(spec, &mut rng(seed))
}

fn make(seed: u64) -> impl FnMut(ConvSpec) -> ConvParams<f64> {
    let mut r = rng(seed);
    move |s| ConvParams::init_uniform(s, &mut r)
}

prop_compose! {
    fn conv_case()(cin in 1usize..4, cout in 1usize..4, k in 1usize..4, s in 1usize..3, p in 0usize..2,
                   d in 1usize..3, h in 6usize..10, w in 6usize..10, seed in any::<u64>())
        -> (ConvSpec, Shape4, u64) {
        (ConvSpec::new(cin, cout, (k, k)).stride((s, s)).padding((p, p)).dilation((d, d)).without_bias(),
         Shape4::new(1, cin, h, w), seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_input_and_weight((spec, shape, seed) in conv_case(), alpha in -2.0f64..2.0) {
        let p = init(spec, seed);
        let (x1, x2) = (rand_t(shape, seed ^ 1), rand_t(shape, seed ^ 2));
        let mix = x1.zip_map(&x2, |a, b| alpha * a + b).unwrap();
        let lhs = conv2d(&mix, &p).unwrap();
        let rhs = conv2d(&x1, &p).unwrap().zip_map(&conv2d(&x2, &p).unwrap(), |a, b| alpha * a + b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);

        let q = init(spec, seed ^ 3);
        let mut wsum = p.clone();
        wsum.weight = p.weight.zip_map(&q.weight, |a, b| alpha * a + b).unwrap();
        let lhs = conv2d(&x1, &wsum).unwrap();
        let rhs = conv2d(&x1, &p).unwrap().zip_map(&conv2d(&x1, &q).unwrap(), |a, b| alpha * a + b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn forward_ops_are_deterministic((spec, shape, seed) in conv_case()) {
        let (p, x) = (init(spec, seed), rand_t(shape, seed));
        prop_assert_eq!(conv2d(&x, &p).unwrap(), conv2d(&x, &p).unwrap());
    }

    #[test]
    fn exact_pooling_keeps_the_mean(oh in 1usize..6, ow in 1usize..6, fh in 1usize..5, fw in 1usize..5, seed in any::<u64>()) {
        let x = rand_t(Shape4::new(2, 2, oh * fh, ow * fw), seed);
        let y = adaptive_avg_pool2d(&x, oh, ow).unwrap();
        prop_assert!((x.mean() - y.mean()).abs() <= 1e-12);
    }

    #[test]
    fn concat_and_split_are_inverse(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let parts: Vec<_> = [a, b, c].iter().enumerate().map(|(i, &ch)| rand_t(Shape4::new(2, ch, 3, 5), seed + i as u64)).collect();
        let cat = concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(split_channels(&cat, &[a, b, c]).unwrap(), parts);
    }

    #[test]
    fn masks_lie_strictly_inside_unit_interval(seed in any::<u64>(), c in 1usize..4) {
        let x = rand_t(Shape4::new(1, c, 10, 12), seed);
        let ks = KernelSet::new(vec![1, 3, 5]).unwrap();
        let sp = SpParams::build(c, &mut make(seed)).forward(&x).unwrap().0;
        let mk = mksp_mask(&x, &MkspParams::build(c, &ks, &mut make(seed))).unwrap();
        let ar = ArParams::build(c, &mut make(seed)).mask(&x).unwrap();
        for m in [sp, mk, ar] {
            prop_assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn mksp_commutes_with_batch_permutation(seed in any::<u64>()) {
        let ks = KernelSet::new(vec![1, 3]).unwrap();
        let p = MkspParams::build(2, &ks, &mut make(seed));
        let x = rand_t(Shape4::new(3, 2, 8, 8), seed);
        let perm = [2usize, 0, 1];
        let items: Vec<_> = perm.iter().map(|&i| x.batch_slice(i, 1).unwrap()).collect();
        let xp = Tensor::stack_batch(&items.iter().collect::<Vec<_>>()).unwrap();
        let (m, mp) = (mksp_mask(&x, &p).unwrap(), mksp_mask(&xp, &p).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(mp.batch_slice(k, 1).unwrap(), m.batch_slice(i, 1).unwrap());
        }
    }

    #[test]
    fn blur_aware_attention_never_amplifies(seed in any::<u64>()) {
        let ks = KernelSet::default();
        let p = BaParams::build(3, &ks, &mut make(seed));
        let x = Tensor::uniform(Shape4::new(1, 3, 9, 11), -4.0, 4.0, &mut rng(seed));
        let out = ba_forward(&x, &p).unwrap().out;
        prop_assert!(out.data().iter().zip(x.data()).all(|(o, i)| o.abs() <= i.abs()));
    }

    #[test]
    fn charbonnier_is_bounded_below_by_epsilon(seed in any::<u64>(), eps in 1e-4f64..1e-2) {
        let y = rand_t(Shape4::new(1, 3, 4, 4), seed);
        let r = rand_t(Shape4::new(1, 3, 4, 4), seed ^ 9);
        prop_assert!(charbonnier(&r, &y, eps).unwrap() > eps);
        prop_assert_eq!(charbonnier(&y, &y, eps).unwrap(), eps);
        prop_assert!(fft_loss(&r, &y).unwrap() > 0.0);
        prop_assert_eq!(fft_loss(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn parseval(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let x = rand_t(Shape4::new(1, 2, h, w), seed);
        let e = fft2d(&x).energy();
        let direct = (h * w) as f64 * x.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!((e - direct).abs() <= 1e-6 * direct.max(1e-300));
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), a in 0.01f64..0.2, k in 1.1f64..3.0) {
        let y = Tensor::uniform(Shape4::new(1, 3, 8, 8), 0.0, 1.0, &mut rng(seed));
        let noise = rand_t(y.shape(), seed ^ 5);
        let with = |amp: f64| y.zip_map(&noise, |v, n| v + amp * n).unwrap();
        prop_assert!(psnr(&with(a * k), &y).unwrap() < psnr(&with(a), &y).unwrap());
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let a = Tensor::<f64>::uniform(Shape4::new(1, 3, 14, 13), 0.0, 1.0, &mut rng(seed));
        let b = Tensor::<f64>::uniform(a.shape(), 0.0, 1.0, &mut rng(seed ^ 7));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn adam_update_ignores_gradient_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
        let grads: Vec<Vec<f64>> = (0..3).map(|k| rand_t(Shape4::new(1, 1, 1, 6), seed + k).into_vec()).collect();
        let run = |scale: f64| {
            let mut st = AdamState::<f64>::new(6);
            st.eps = 0.0;
            let mut p = vec![0.25; 6];
            for g in &grads {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                st.update(&mut p, &g, 1e-3).unwrap();
            }
            p
        };
        let (a, b) = (run(1.0), run(c));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-10));
    }

    #[test]
    fn cosine_schedule_never_increases(total in 1u64..5000) {
        let s = LrSchedule::new(total);
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, &s).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn augmentation_keeps_pixels_paired(h in 4usize..12, w in 4usize..12, crop in 0usize..4, seed in any::<u64>()) {
        // channel 0/1 carry source row/column; the sharp image is offset by a constant
        let blur = Tensor::<f64>::from_fn(Shape4::new(1, 3, h, w), |_, c, i, j| [i as f64, j as f64, 0.0][c]);
        let sharp = blur.map(|v| v + 100.0);
        let cfg = AugmentConfig { crop: crop.min(h).min(w), ..AugmentConfig::default() };
        let (b, s) = augment_pair(&blur, &sharp, &cfg, &mut rng(seed)).unwrap();
        prop_assert_eq!(b.map(|v| v + 100.0), s);
    }

    #[test]
    fn motion_kernels_sum_to_one(len in 1.0f64..15.0, angle in 0.0f64..std::f64::consts::PI) {
        let k = MotionKernel::linear(len, angle);
        prop_assert!((k.sum() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn network_preserves_shape(hh in 8usize..=128, hw in 8usize..=128) {
        let cfg = NetworkConfig { base_channels: 4, num_bams: 1, ..NetworkConfig::tiny() };
        let net = build_network::<f32>(&cfg).unwrap();
        let x = Tensor::<f32>::full(Shape4::new(1, 3, 2 * hh, 2 * hw), 0.5);
        prop_assert_eq!(banet_forward(&x, &net).unwrap().shape(), x.shape());
    }

    #[test]
    fn corrupted_manifest_offsets_are_rejected(entry in any::<prop::sample::Index>(), shift in 1u64..1_000_000) {
        let cfg = NetworkConfig { base_channels: 4, num_bams: 1, ..NetworkConfig::tiny() };
        let bytes = encode(&Checkpoint::untrained(cfg.clone(), build_network::<f32>(&cfg).unwrap())).unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        let tensors = header["tensors"].as_array_mut().unwrap();
        let i = entry.index(tensors.len());
        let off = tensors[i]["offset"].as_u64().unwrap();
        tensors[i]["offset"] = (off + shift).into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[20 + hlen..]);
        prop_assert!(decode::<f32>(&out, None).is_err());
    }
}

#[test]
fn output_shape_at_sweep_edges() {
    let net = build_network::<f32>(&NetworkConfig { base_channels: 4, num_bams: 1, ..NetworkConfig::tiny() }).unwrap();
    for (h, w) in [(16, 16), (16, 256), (256, 16), (256, 256)] {
        let x = Tensor::<f32>::full(Shape4::new(1, 3, h, w), 0.25);
        assert_eq!(banet_forward(&x, &net).unwrap().shape(), x.shape());
    }
}

#[test]
fn blur_never_raises_total_variation() {
    let cfg = SynthConfig { size: 32, ..SynthConfig::default() };
    let mut r = rng(17);
    for _ in 0..100 {
        let (b, s, k) = synth_blur_pair::<f64, _>(&cfg, &mut r).unwrap();
        assert!(total_variation(&b) <= total_variation(&s) + 1e-9, "kernel {} at {}", k.length, k.angle);
    }
}
