use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use banet_core::attention::mask_to_gray8;
use banet_core::blocks::{count_flops, count_macs, count_params, BanetParams, GateKind, NetworkConfig, Variant};
use banet_core::checkpoint::{load_checkpoint, load_checkpoint_expecting};
use banet_core::gradcheck::gradient_suite;
use banet_core::infer::{infer_image, infer_tiled, pad_to_even, Tiling};
use banet_core::instrument;
use banet_core::io::{read_png, write_atomic, write_gray_png, write_png};
use banet_core::metrics::write_metrics_csv;
use banet_core::train::{
    evaluate_baseline, evaluate_with, load_pairs, synth_dataset, train_loop_with, DatasetSpec, MotionKernel, RunDir,
    SynthConfig, Trainer,
};
use banet_core::{Block, Shape4, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::exit::{Numeric, Usage};

#[derive(Debug, Parser)]
#[command(name = "banet", version, about = "Blur-aware attention network for single-image motion deblurring")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic blurred/sharp PNG pairs and a kernel manifest
    Synth(SynthArgs),
    /// Train a network from a TOML config; flags override file keys
    Train(TrainArgs),
    /// Deblur an image or every PNG in a directory
    Infer(InferArgs),
    /// Score a checkpoint on a paired directory and print the metric CSV
    Eval(EvalArgs),
    /// Dump the attention masks of every module for one image
    Attn(AttnArgs),
    /// Print parameter count and FLOPs of a configuration
    Params(ParamsArgs),
    /// Time forward passes
    Bench(BenchArgs),
    /// Run the finite-difference gradient checks and print their tables
    #[command(alias = "gradcheck")]
    Test(TestArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Attn(a) => attn(a),
        Command::Params(a) => params(a),
        Command::Bench(a) => bench(a),
        Command::Test(a) => test(a),
    }
}

/// `HxW`, e.g. `720x1280`.
fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("resolution must be positive, got {s:?}"));
    }
    Ok((h, w))
}

fn load_net(path: &Path) -> Result<(NetworkConfig, BanetParams<f32>)> {
    let ck = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ck.config, ck.params))
}

fn tiling(tile: Option<usize>, overlap: usize) -> Result<Option<Tiling>> {
    let Some(tile) = tile else { return Ok(None) };
    let t = Tiling { tile, overlap };
    t.validate()?;
    Ok(Some(t))
}

fn predict(net: &BanetParams<f32>, img: &Tensor<f32>, tiling: Option<Tiling>) -> Result<Tensor<f32>> {
    Ok(match tiling {
        Some(t) => infer_tiled(net, img, t)?,
        None => infer_image(net, img)?,
    })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Side of the square images
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shortest motion length in pixels
    #[arg(long, default_value_t = 3.0)]
    min_len: f64,
    /// Longest motion length in pixels
    #[arg(long, default_value_t = 15.0)]
    max_len: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a SynthConfig,
    items: Vec<ManifestItem<'a>>,
}

#[derive(Serialize)]
struct ManifestItem<'a> {
    name: &'a str,
    #[serde(flatten)]
    kernel: &'a MotionKernel,
    sum: f64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        count: a.count,
        seed: a.seed,
        min_len: a.min_len,
        max_len: a.max_len,
    };
    cfg.validate()?;
    let samples = synth_dataset::<f64>(&cfg)?;
    let (blur, sharp) = (a.out.join("blur"), a.out.join("sharp"));
    fs::create_dir_all(&blur)?;
    fs::create_dir_all(&sharp)?;
    for s in &samples {
        write_png(&blur.join(&s.name), &s.blur)?;
        write_png(&sharp.join(&s.name), &s.sharp)?;
    }
    let manifest = Manifest {
        config: &cfg,
        items: samples
            .iter()
            .map(|s| ManifestItem {
                name: &s.name,
                kernel: &s.kernel,
                sum: s.kernel.sum(),
            })
            .collect(),
    };
    write_atomic(&a.out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    println!("wrote {} pairs of {}x{} to {}", cfg.count, cfg.size, cfg.size, a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Paired training directory (otherwise synthetic pairs from [synth])
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eta_max: Option<f64>,
    #[arg(long)]
    eta_min: Option<f64>,
    /// Square training crop; 0 keeps whole images
    #[arg(long)]
    crop: Option<usize>,
    /// Weight of the frequency-domain loss
    #[arg(long)]
    lambda: Option<f64>,
    /// Seed of batch sampling and augmentation
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Run every loop on one thread
    #[arg(long)]
    strict: bool,
}

impl TrainArgs {
    fn apply(&self, c: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        if self.data.is_some() {
            c.paths.data = self.data.clone();
        }
        if self.resume.is_some() {
            c.paths.resume = self.resume.clone();
        }
        set(&mut c.paths.out, &self.out);
        set(&mut c.train.steps, &self.steps);
        set(&mut c.train.batch, &self.batch);
        set(&mut c.train.eta_max, &self.eta_max);
        set(&mut c.train.eta_min, &self.eta_min);
        set(&mut c.train.augment.crop, &self.crop);
        set(&mut c.train.loss.lambda, &self.lambda);
        set(&mut c.train.seed, &self.seed);
        set(&mut c.train.checkpoint_every, &self.checkpoint_every);
        c.strict |= self.strict;
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    a.apply(&mut cfg);
    cfg.validate()?;
    let text = cfg.to_toml()?;
    eprintln!("resolved config:\n{text}");
    let dir = RunDir::new(&cfg.paths.out);
    fs::create_dir_all(&dir.root)?;
    write_atomic(&dir.root.join("config.toml"), text.as_bytes())?;
    instrument::set_strict(cfg.strict);

    let data = load_pairs::<f32>(cfg.paths.data.as_deref(), &cfg.synth)?;
    let mut trainer = match &cfg.paths.resume {
        Some(p) => {
            let ck = load_checkpoint_expecting::<f32>(p, &cfg.network).with_context(|| format!("resuming {}", p.display()))?;
            let t = Trainer::from_checkpoint(ck)?;
            if t.options != cfg.train {
                bail!(Usage(format!("{} was trained with different [train] options", p.display())));
            }
            t
        }
        None => Trainer::new(cfg.network.clone(), cfg.train)?,
    };
    let first = trainer.step;
    let total = cfg.train.steps;
    let every = (total / 20).max(1);
    let start = Instant::now();
    let rows = train_loop_with(&mut trainer, &data, &dir, |r| {
        if r.step % every == 0 || r.step == total {
            eprintln!(
                "step {:>6}/{total}  lr {:.3e}  L_total {:.5}  {:.0} s",
                r.step,
                r.lr,
                r.l_total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "trained steps {}..{} on {} pairs in {:.1} s; checkpoint {}",
        first + 1,
        trainer.step,
        data.len(),
        start.elapsed().as_secs_f64(),
        dir.last().display()
    );
    if let Some(r) = rows.last() {
        println!("final L_total {}", r.l_total);
    }
    Ok(())
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG image or a directory of them
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tile side for tiled inference
    #[arg(long)]
    tile: Option<usize>,
    /// Overlap between neighbouring tiles
    #[arg(long, default_value_t = 16, requires = "tile")]
    overlap: usize,
}

fn infer(a: InferArgs) -> Result<()> {
    let tiling = tiling(a.tile, a.overlap)?;
    let (_, net) = load_net(&a.ckpt)?;
    let inputs = if a.input.is_dir() { png_files(&a.input)? } else { vec![a.input.clone()] };
    fs::create_dir_all(&a.out)?;
    for path in &inputs {
        let start = Instant::now();
        let img = read_png::<f32>(path)?;
        let out = predict(&net, &img, tiling).with_context(|| format!("deblurring {}", path.display()))?;
        let name = path.file_name().context("input has no file name")?;
        write_png(&a.out.join(name), &out)?;
        let s = img.shape();
        println!("{} {}x{} {:.0} ms", path.display(), s.h, s.w, start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory with blur/ and sharp/ subdirectories
    #[arg(long)]
    data: PathBuf,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long, default_value_t = 16, requires = "tile")]
    overlap: usize,
    /// Also score the blurred inputs themselves
    #[arg(long)]
    baseline: bool,
}

fn eval(a: EvalArgs) -> Result<()> {
    let tiling = tiling(a.tile, a.overlap)?;
    let (_, net) = load_net(&a.ckpt)?;
    let pairs = DatasetSpec::new(&a.data).load::<f32>()?;
    let report = evaluate_with(&pairs, |p| predict(&net, &p.blur, tiling).map_err(to_core))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &report.rows)?;
    match &a.out {
        Some(p) => write_atomic(p, &csv)?,
        None => print!("{}", String::from_utf8(csv)?),
    }
    eprintln!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.rows.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    if a.baseline {
        let b = evaluate_baseline(&pairs)?;
        eprintln!("blurred inputs: mean PSNR {:.3} dB, mean SSIM {:.4}", b.mean_psnr, b.mean_ssim);
    }
    Ok(())
}

/// Recovers the library error inside a closure that must return one.
fn to_core(e: anyhow::Error) -> banet_core::Error {
    match e.downcast::<banet_core::Error>() {
        Ok(e) => e,
        Err(e) => banet_core::Error::Dataset(format!("{e:#}")),
    }
}

// ---------------------------------------------------------------- attn

#[derive(Debug, Args)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn attn(a: AttnArgs) -> Result<()> {
    let (_, net) = load_net(&a.ckpt)?;
    let img = pad_to_even(&read_png::<f32>(&a.input)?);
    let (_, cache) = net.forward(&img)?;
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for (k, (bam, c)) in net.bams.iter().zip(cache.bam_caches()).enumerate() {
        let strip = if bam.gate.kind() == GateKind::Sp { "sp" } else { "mksp" };
        let (global, local) = c.gate.masks();
        for (label, mask) in [(strip, global), ("ar", local)] {
            let Some(mask) = mask else { continue };
            let s = mask.shape();
            let path = a.out.join(format!("bam{:02}_{label}.png", k + 1));
            write_gray_png(&path, s.w, s.h, mask_to_gray8(mask).swap_remove(0))?;
            written += 1;
        }
    }
    println!("wrote {written} masks for {} modules to {}", net.bams.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- params

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Banet,
    BanetPlus,
    Tiny,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// TOML run configuration; its [network] section is used
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the module variant
    #[arg(long)]
    variant: Option<Variant>,
    /// Input resolution HxW
    #[arg(long, default_value = "720x1280", value_parser = parse_res)]
    res: (usize, usize),
}

fn params(a: ParamsArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Some(Preset::Banet) => NetworkConfig::banet(),
        Some(Preset::BanetPlus) => NetworkConfig::banet_plus(),
        Some(Preset::Tiny) => NetworkConfig::tiny(),
        None => RunConfig::load(a.config.as_deref())?.network,
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    let (h, w) = a.res;
    let p = count_params(&cfg)?;
    let flops = count_flops(&cfg, h, w)? as f64 / 1e9;
    let macs = count_macs(&cfg, h, w)? as f64 / 1e9;
    println!(
        "network  base_channels={} num_bams={} kernel_set={:?} variant={}",
        cfg.base_channels,
        cfg.num_bams,
        cfg.kernel_set.scales(),
        cfg.variant
    );
    println!("params   {p} ({:.2} M)", p as f64 / 1e6);
    println!("gflops   {flops:.1} at {h}x{w}");
    println!("gmacs    {macs:.1} at {h}x{w}");
    Ok(())
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, required_unless_present = "config")]
    ckpt: Option<PathBuf>,
    /// Benchmark an untrained network from a run configuration instead
    #[arg(long, conflicts_with = "ckpt")]
    config: Option<PathBuf>,
    #[arg(long, default_value = "256x256", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Untimed passes before measuring
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.iters == 0 {
        bail!(Usage("--iters must be at least 1".into()));
    }
    let net = match &a.ckpt {
        Some(p) => load_net(p)?.1,
        None => {
            let cfg = RunConfig::load(a.config.as_deref())?.network;
            cfg.validate()?;
            banet_core::blocks::build_network(&cfg)?
        }
    };
    let (h, w) = a.res;
    let img = Tensor::<f32>::uniform(Shape4::new(1, 3, h, w), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for _ in 0..a.warmup {
        infer_image(&net, &img)?;
    }
    let mut ms: Vec<f64> = (0..a.iters)
        .map(|_| {
            let t = Instant::now();
            infer_image(&net, &img).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<std::result::Result<_, _>>()?;
    ms.sort_by(f64::total_cmp);
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    println!(
        "{h}x{w}, {} iterations: mean {mean:.2} ms, p50 {:.2} ms, p95 {:.2} ms",
        a.iters,
        percentile(&ms, 0.5),
        percentile(&ms, 0.95)
    );
    Ok(())
}

// ---------------------------------------------------------------- test

#[derive(Debug, Args)]
struct TestArgs {
    /// Seeds 0..N
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Only checks whose name contains this text
    #[arg(long)]
    filter: Option<String>,
}

fn test(a: TestArgs) -> Result<()> {
    let (mut passed, mut failed) = (0, 0);
    for seed in 0..a.seeds {
        for rep in gradient_suite(seed)? {
            if a.filter.as_ref().is_some_and(|f| !rep.op.contains(f.as_str())) {
                continue;
            }
            println!("seed {seed}  {rep}");
            if rep.pass {
                passed += 1;
            } else {
                failed += 1;
            }
        }
    }
    println!("{passed} passed, {failed} failed");
    if failed > 0 {
        bail!(Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_res("720x1280"), Ok((720, 1280)));
        assert_eq!(parse_res("64X32"), Ok((64, 32)));
        assert!(parse_res("720").is_err());
        assert!(parse_res("0x4").is_err());
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.95), 10.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn flags_override_config_keys() {
        let cli = Cli::try_parse_from(["banet", "train", "--steps", "7", "--crop", "32", "--strict"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let mut c = RunConfig::default();
        a.apply(&mut c);
        assert_eq!((c.train.steps, c.train.augment.crop, c.strict), (7, 32, true));
        assert_eq!(c.train.batch, RunConfig::default().train.batch);
    }
}
