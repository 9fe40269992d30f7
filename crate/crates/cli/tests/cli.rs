use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use banet_core::blocks::{build_network, NetworkConfig};
use banet_core::checkpoint::{save_checkpoint, Checkpoint};
use banet_core::io::{read_png, write_png};
use banet_core::metrics::METRICS_HEADER;
use banet_core::train::{TrainOptions, LOG_HEADER};
use banet_core::{Shape4, Tensor};
use tempfile::TempDir;

fn banet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_banet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = banet(args);
    assert!(
        out.status.success(),
        "banet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    banet(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        num_bams: 2,
        ..NetworkConfig::tiny()
    }
}

const SMALL_RUN: &str = "
[network]
base_channels = 4
num_bams = 2

[train]
steps = 6
batch = 2

[train.augment]
crop = 16

[synth]
size = 24
count = 4
";

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, SMALL_RUN).unwrap();
    p
}

fn zero_tail_checkpoint(dir: &Path) -> PathBuf {
    let cfg = small_config();
    let mut net = build_network::<f32>(&cfg).unwrap();
    net.zero_residual_branches();
    let p = dir.join("zero.ckpt");
    save_checkpoint(&p, &Checkpoint::untrained(cfg, net)).unwrap();
    p
}

fn image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape4::new(1, 3, h, w), |_, c, i, j| ((c * 31 + i * 7 + j * 13) % 256) as f32 / 255.0)
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn synth_with_zero_count_writes_empty_dirs_and_manifest() {
    let t = TempDir::new().unwrap();
    ok(&["synth", "--out", s(t.path()), "--count", "0"]);
    assert!(files(&t.path().join("blur")).is_empty());
    assert!(files(&t.path().join("sharp")).is_empty());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["items"].as_array().unwrap().len(), 0);
}

#[test]
fn synth_is_deterministic_and_kernels_are_normalised() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--count", "6", "--size", "32", "--seed", "9"]);
    }
    for sub in ["blur", "sharp"] {
        let names = files(&a.join(sub));
        assert_eq!(names.len(), 6);
        for n in names {
            assert_eq!(fs::read(a.join(sub).join(&n)).unwrap(), fs::read(b.join(sub).join(&n)).unwrap(), "{sub}/{n}");
        }
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for item in m["items"].as_array().unwrap() {
        let sum: f64 = item["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-9, "{}: {sum}", item["name"]);
    }
}

#[test]
fn train_logs_resolved_config_and_reproduces_in_strict_mode() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path());
    let logs: Vec<Vec<String>> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = t.path().join(r);
            ok(&["train", "--config", s(&cfg), "--out", s(&out), "--strict"]);
            assert!(out.join("last.ckpt").exists());
            let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
            assert!(echoed.contains("strict = true") && echoed.contains("steps = 6"), "{echoed}");
            let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
            let mut lines = log.lines();
            assert_eq!(lines.next(), Some(LOG_HEADER));
            lines.map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
        })
        .collect();
    assert_eq!(logs[0].len(), 6);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn train_flags_override_the_file() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path());
    let out = t.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--steps", "2", "--crop", "14"]);
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("steps = 2") && echoed.contains("crop = 14"), "{echoed}");
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap().lines().count(), 3);
}

#[test]
fn resumed_training_continues_the_log() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path());
    let full = t.path().join("full");
    ok(&["train", "--config", s(&cfg), "--out", s(&full)]);
    let part = t.path().join("part");
    ok(&["train", "--config", s(&cfg), "--out", s(&part), "--checkpoint-every", "3"]);
    let resumed = t.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let part_log = fs::read_to_string(part.join("train_log.csv")).unwrap();
    fs::write(resumed.join("train_log.csv"), part_log.lines().take(4).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--checkpoint-every",
        "3",
        "--resume",
        s(&part.join("step_000003.ckpt")),
    ]);
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&resumed.join("train_log.csv")), strip(&full.join("train_log.csv")));
}

#[test]
fn usage_errors_exit_with_1() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["params", "--res", "12"]), 1);
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "[network]\nchanels = 8\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad)]), 1);
    assert_eq!(code(&["params", "--config", s(&bad)]), 1);
    let cfg = write_config(t.path());
    assert_eq!(code(&["train", "--config", s(&cfg), "--batch", "0", "--out", s(&t.path().join("x"))]), 1);
    assert_eq!(code(&["infer", "--ckpt", "x", "--in", "y", "--out", "z", "--tile", "8", "--overlap", "8"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn data_errors_exit_with_2() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path());
    let missing = t.path().join("missing");
    assert_eq!(code(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&t.path().join("o"))]), 2);
    let junk = t.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["infer", "--ckpt", s(&junk), "--in", "x.png", "--out", s(t.path())]), 2);
    let ck = zero_tail_checkpoint(t.path());
    let corrupt = t.path().join("corrupt.png");
    fs::write(&corrupt, b"\x89PNG garbage").unwrap();
    assert_eq!(code(&["infer", "--ckpt", s(&ck), "--in", s(&corrupt), "--out", s(&t.path().join("o"))]), 2);
}

#[test]
fn non_finite_weights_exit_with_3() {
    let t = TempDir::new().unwrap();
    let cfg = small_config();
    let mut net = build_network::<f32>(&cfg).unwrap();
    net.tail.weight.data_mut()[0] = f32::NAN;
    let options = TrainOptions {
        steps: 6,
        batch: 2,
        augment: banet_core::train::AugmentConfig { crop: 16, ..Default::default() },
        ..Default::default()
    };
    let mut ck = Checkpoint::untrained(cfg, net);
    ck.options = Some(options);
    let p = t.path().join("nan.ckpt");
    save_checkpoint(&p, &ck).unwrap();
    let run = write_config(t.path());
    let out = banet(&["train", "--config", s(&run), "--resume", s(&p), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tail.weight"));
}

#[test]
fn zero_tail_inference_reproduces_the_input_at_any_size() {
    let t = TempDir::new().unwrap();
    let ck = zero_tail_checkpoint(t.path());
    let dir = t.path().join("in");
    fs::create_dir_all(&dir).unwrap();
    write_png(&dir.join("even.png"), &image(16, 20)).unwrap();
    write_png(&dir.join("odd.png"), &image(17, 13)).unwrap();
    let out = t.path().join("out");
    ok(&["infer", "--ckpt", s(&ck), "--in", s(&dir), "--out", s(&out)]);
    for n in ["even.png", "odd.png"] {
        let a = read_png::<f32>(&dir.join(n)).unwrap();
        let b = read_png::<f32>(&out.join(n)).unwrap();
        assert_eq!(a, b, "{n}");
    }
    ok(&["infer", "--ckpt", s(&ck), "--in", s(&dir.join("odd.png")), "--out", s(&out), "--tile", "16", "--overlap", "4"]);
    assert_eq!(read_png::<f32>(&out.join("odd.png")).unwrap().shape(), Shape4::new(1, 3, 17, 13));
}

#[test]
fn eval_writes_the_metric_csv() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "3", "--size", "24"]);
    let ck = zero_tail_checkpoint(t.path());
    let stdout = ok(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--baseline"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("00000.png,"));
    let csv = t.path().join("m.csv");
    ok(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&csv)]);
    assert_eq!(fs::read_to_string(csv).unwrap(), stdout);
}

#[test]
fn attn_writes_two_masks_per_module() {
    let t = TempDir::new().unwrap();
    let cfg = small_config();
    let p = t.path().join("net.ckpt");
    save_checkpoint(&p, &Checkpoint::untrained(cfg.clone(), build_network::<f32>(&cfg).unwrap())).unwrap();
    let img = t.path().join("x.png");
    write_png(&img, &image(21, 30)).unwrap();
    let out = t.path().join("masks");
    ok(&["attn", "--ckpt", s(&p), "--in", s(&img), "--out", s(&out)]);
    let names = files(&out);
    assert_eq!(names.len(), cfg.num_bams * 2);
    assert_eq!(names, ["bam01_ar.png", "bam01_mksp.png", "bam02_ar.png", "bam02_mksp.png"]);
    let m = read_png::<f32>(&out.join("bam01_ar.png")).unwrap().shape();
    assert_eq!((m.h, m.w), (11, 15));
}

#[test]
fn params_reports_the_full_network() {
    let out = ok(&["params", "--preset", "banet"]);
    assert!(out.contains("params   18208899"), "{out}");
    assert!(out.contains("at 720x1280"), "{out}");
    let plus = ok(&["params", "--preset", "banet-plus", "--res", "256x256"]);
    assert!(plus.contains("params   40891587"), "{plus}");
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path());
    let small = ok(&["params", "--config", s(&cfg), "--variant", "net1"]);
    let expected = banet_core::blocks::count_params(&small_config().with_variant(banet_core::blocks::Variant::Net1)).unwrap();
    assert!(small.contains(&format!("params   {expected} ")), "{small}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = ok(&["params", "--config", s(&dir.join("desk.toml"))]);
    assert!(desk.contains("params   65043 "), "{desk}");
    let full = ok(&["params", "--config", s(&dir.join("banet.toml"))]);
    assert!(full.contains("params   18208899 "), "{full}");
}

#[test]
fn bench_percentiles_are_ordered() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path());
    let out = ok(&["bench", "--config", s(&cfg), "--res", "16x16", "--iters", "5"]);
    let num = |key: &str| -> f64 {
        let rest = &out[out.find(key).unwrap() + key.len()..];
        rest.trim_start().split(' ').next().unwrap().parse().unwrap()
    };
    let (p50, p95) = (num("p50"), num("p95"));
    assert!(p95 >= p50 && p50 >= 0.0, "{out}");
    assert_eq!(code(&["bench", "--config", s(&cfg), "--iters", "0"]), 1);
}

#[test]
fn gradient_check_command_prints_tables() {
    let out = ok(&["test", "--filter", "relu"]);
    assert!(out.contains("relu") && out.contains("PASS") && out.contains("1 passed, 0 failed"), "{out}");
}
