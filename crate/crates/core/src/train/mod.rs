//! Optimiser, augmentation, data sources and the training/evaluation loops.

mod augment;
mod data;
mod optim;
mod synth;

pub use augment::{augment_pair, crop, hflip, rot90, vflip, AugmentConfig};
pub use data::{DatasetSpec, Pair};
pub use optim::{adam_step, cosine_lr, AdamState, LrSchedule};
pub use synth::{
    blur_circular, pattern, synth_blur_pair, synth_dataset, total_variation, MotionKernel, SynthConfig, SynthSample,
};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{build_network, BanetParams, NetworkConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::infer::infer_image;
use crate::loss::{total_loss_with_grad, LossConfig};
use crate::metrics::{psnr, ssim, MetricRow};
use crate::params::{Block, Module};
use crate::tensor::Tensor;
use crate::Scalar;

impl<T: Scalar> From<SynthSample<T>> for Pair<T> {
    fn from(s: SynthSample<T>) -> Self {
        Pair {
            name: s.name,
            blur: s.blur,
            sharp: s.sharp,
        }
    }
}

/// Hyper-parameters of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch: usize,
    pub eta_max: f64,
    pub eta_min: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// Seeds batch sampling and augmentation; network init uses the config seed.
    pub seed: u64,
    /// Checkpoint period in steps; `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let s = LrSchedule::new(0);
        Self {
            steps: 2000,
            batch: 4,
            eta_max: s.eta_max,
            eta_min: s.eta_min,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainOptions {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            eta_max: self.eta_max,
            eta_min: self.eta_min,
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("train", "batch must be at least 1"));
        }
        self.schedule().validate()?;
        self.loss.validate()
    }
}

pub const LOG_HEADER: &str = "step,lr,L_char,L_FFT,L_total,wall_ms";

/// One training-log line. `step` counts completed updates, so the first row is step 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub l_char: f64,
    pub l_fft: f64,
    pub l_total: f64,
    pub wall_ms: f64,
}

impl LogRow {
    /// Every column except the wall-clock time; reproducible runs agree on this exactly.
    pub fn deterministic_fields(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.l_char, self.l_fft, self.l_total)
    }

    pub fn csv(&self) -> String {
        format!("{},{:.3}", self.deterministic_fields(), self.wall_ms)
    }
}

/// Name of the first parameter tensor holding a NaN or infinity.
pub fn first_non_finite<T: Scalar, M: Module<T>>(m: &M) -> Option<String> {
    m.named_convs().into_iter().find_map(|(name, c)| {
        if !c.weight.data().iter().all(|v| v.is_finite()) {
            Some(format!("{name}.weight"))
        } else if c.bias.as_ref().is_some_and(|b| !b.iter().all(|v| v.is_finite())) {
            Some(format!("{name}.bias"))
        } else {
            None
        }
    })
}

/// Network, optimiser state and step counter of a run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub config: NetworkConfig,
    pub options: TrainOptions,
    pub net: BanetParams<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: NetworkConfig, options: TrainOptions) -> Result<Self> {
        config.validate()?;
        options.validate()?;
        // A zero tail starts training from the identity map.
        let mut net = build_network(&config)?;
        net.tail.set_zero();
        let adam = AdamState::new(net.num_params());
        Ok(Self {
            config,
            options,
            net,
            adam,
            step: 0,
        })
    }

    /// Resumes from a checkpoint that recorded its training options.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let options = ck
            .options
            .ok_or_else(|| Error::Checkpoint("no training options recorded; cannot resume".into()))?;
        options.validate()?;
        Ok(Self {
            config: ck.config,
            options,
            net: ck.params,
            adam: ck.adam,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.net.clone(),
            adam: self.adam.clone(),
            options: Some(self.options),
        }
    }

    /// The random stream of a step depends only on the seed and the step
    /// index, so a resumed run draws the same batches as an uninterrupted one.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        rng.set_stream(self.step);
        rng
    }

    fn sample_batch(&self, data: &[Pair<T>], rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut blur = Vec::with_capacity(self.options.batch);
        let mut sharp = Vec::with_capacity(self.options.batch);
        for _ in 0..self.options.batch {
            let p = &data[rng.gen_range(0..data.len())];
            let (b, s) = augment_pair(&p.blur, &p.sharp, &self.options.augment, rng)
                .map_err(|e| Error::Dataset(format!("{}: {e}", p.name)))?;
            blur.push(b);
            sharp.push(s);
        }
        Ok((
            Tensor::stack_batch(&blur.iter().collect::<Vec<_>>())?,
            Tensor::stack_batch(&sharp.iter().collect::<Vec<_>>())?,
        ))
    }

    /// One Adam update on a freshly sampled batch.
    pub fn train_step(&mut self, data: &[Pair<T>]) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let start = Instant::now();
        let lr = cosine_lr(self.step, &self.options.schedule())?;
        let mut rng = self.step_rng();
        let (x, y) = self.sample_batch(data, &mut rng)?;
        let blame = |what: String| {
            let culprit = first_non_finite(&self.net).unwrap_or_else(|| "network output".into());
            Error::NonFinite(format!("{culprit} at step {} (detected in {what})", self.step + 1))
        };
        let (pred, cache) = self.net.forward(&x).map_err(|e| match e {
            Error::NonFinite(what) => blame(what),
            e => e,
        })?;
        if !pred.data().iter().all(|v| v.is_finite()) {
            return Err(blame("forward pass".into()));
        }
        let (loss, gr) = total_loss_with_grad(&pred, &y, &self.options.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        let mut grads = self.net.zeros_like();
        self.net.backward(&x, &cache, &gr, &mut grads)?;
        drop(cache);
        if let Some(name) = first_non_finite(&grads) {
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", self.step + 1)));
        }
        adam_step(&mut self.net, &grads, &mut self.adam, lr)?;
        if let Some(name) = first_non_finite(&self.net) {
            return Err(Error::NonFinite(format!("{name} after step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            lr,
            l_char: loss.charbonnier,
            l_fft: loss.fft,
            l_total: loss.total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until `until` steps are complete, calling `on_step` after each one.
    pub fn run(
        &mut self,
        data: &[Pair<T>],
        until: u64,
        mut on_step: impl FnMut(&Self, &LogRow) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        if until > self.options.steps {
            return Err(Error::invalid(
                "train",
                format!("cannot run to step {until}; schedule ends at {}", self.options.steps),
            ));
        }
        let mut rows = Vec::new();
        while self.step < until {
            let row = self.train_step(data)?;
            on_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Output locations of [`train_loop`].
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.root.join(format!("step_{step:06}.ckpt"))
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }
}

/// Runs to the end of the schedule, appending to `train_log.csv` and writing
/// periodic checkpoints plus `last.ckpt`. A resumed trainer continues the log.
pub fn train_loop<T: Scalar>(trainer: &mut Trainer<T>, data: &[Pair<T>], dir: &RunDir) -> Result<Vec<LogRow>> {
    train_loop_with(trainer, data, dir, |_| {})
}

/// [`train_loop`] with a callback after every logged step.
pub fn train_loop_with<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &[Pair<T>],
    dir: &RunDir,
    mut progress: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    std::fs::create_dir_all(&dir.root)?;
    let log_path = dir.log();
    let fresh = trainer.step == 0 || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let every = trainer.options.checkpoint_every;
    let until = trainer.options.steps;
    let rows = trainer.run(data, until, |t, row| {
        writeln!(log, "{}", row.csv())?;
        progress(row);
        if every > 0 && t.step % every == 0 && t.step < until {
            save_checkpoint(&dir.checkpoint_at(t.step), &t.checkpoint())?;
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&dir.last(), &trainer.checkpoint())?;
    Ok(rows)
}

/// Per-image metrics plus their means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Scores `predict(pair)` against each sharp image after clamping to `[0, 1]`.
pub fn evaluate_with<T: Scalar>(
    pairs: &[Pair<T>],
    mut predict: impl FnMut(&Pair<T>) -> Result<Tensor<T>>,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let pred = predict(p)?.map(|v| v.max(T::zero()).min(T::one()));
        rows.push(MetricRow {
            name: p.name.clone(),
            psnr_db: psnr(&pred, &p.sharp)?,
            ssim: ssim(&pred, &p.sharp)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}

pub fn evaluate<T: Scalar>(net: &BanetParams<T>, pairs: &[Pair<T>]) -> Result<EvalReport> {
    evaluate_with(pairs, |p| infer_image(net, &p.blur))
}

/// Scores the blurred inputs themselves.
pub fn evaluate_baseline<T: Scalar>(pairs: &[Pair<T>]) -> Result<EvalReport> {
    evaluate_with(pairs, |p| Ok(p.blur.clone()))
}

/// Loads a paired directory or generates a synthetic set.
pub fn load_pairs<T: Scalar>(root: Option<&Path>, synth: &SynthConfig) -> Result<Vec<Pair<T>>> {
    match root {
        Some(r) => DatasetSpec::new(r).load(),
        None => Ok(synth_dataset(synth)?.into_iter().map(Pair::from).collect()),
    }
}
