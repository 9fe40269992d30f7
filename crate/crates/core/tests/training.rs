use std::sync::OnceLock;

use banet_core::blocks::{BanetParams, NetworkConfig};
use banet_core::infer::{infer_image, infer_tiled, Tiling};
use banet_core::train::{load_pairs, AugmentConfig, LogRow, SynthConfig, TrainOptions, Trainer};

struct Run {
    rows: Vec<LogRow>,
    net: BanetParams<f32>,
}

fn trained() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = load_pairs(None, &SynthConfig { size: 48, count: 32, seed: 3, ..SynthConfig::default() }).unwrap();
        let opts = TrainOptions {
            steps: 200,
            batch: 4,
            eta_max: 1e-3,
            augment: AugmentConfig { crop: 32, ..AugmentConfig::default() },
            ..TrainOptions::default()
        };
        let mut t = Trainer::<f32>::new(NetworkConfig::tiny(), opts).unwrap();
        let rows = t.run(&data, 200, |_, _| Ok(())).unwrap();
        Run { rows, net: t.net }
    })
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let rows = &trained().rows;
    assert_eq!(rows.len(), 200);
    let avg = |r: &[LogRow]| r.iter().map(|x| x.l_total).sum::<f64>() / r.len() as f64;
    let (first, last) = (avg(&rows[..20]), avg(&rows[180..]));
    assert!(last < first, "moving average {first} -> {last}");
}

#[test]
fn tiled_inference_tracks_whole_image() {
    let img = load_pairs::<f32>(None, &SynthConfig { size: 64, count: 1, seed: 9, ..SynthConfig::default() })
        .unwrap()
        .remove(0)
        .blur;
    let net = &trained().net;
    let whole = infer_image(net, &img).unwrap();
    let tiled = infer_tiled(net, &img, Tiling { tile: 32, overlap: 16 }).unwrap();
    assert_eq!(whole.shape(), tiled.shape());
    let worst = whole.data().iter().zip(tiled.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 2.0 / 255.0, "max difference {worst}");
}
