//! Denoising score matching and the training loop.
//!
//! For a clean log-image `y0`, a step `k` and a draw `n ~ N(0, I)`, the corrupted
//! state is `y_k = y0 - eta/2 + sqrt(eta) n` and the per-element loss is
//! `(n + sqrt(eta) s(y_k, k))^2`. Its minimizer is the score of the step-`k` marginal.

mod checkpoint;

pub use checkpoint::{
    inspect_header, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, FORMAT_VERSION,
    MAGIC,
};

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::forward::{corrupt_log_with_noise, ImageTensor, LogImage};
use crate::nn::{adam_step, AdamConfig, AdamState, Architecture, NetOutput, Network, Tape, Tensor};
use crate::rng::{streams, RandomSource, RngState};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of diffusion steps K.
    pub steps: usize,
    pub eta_per_step: f64,
    pub seed: u64,
    pub patch_size: usize,
    pub dataset: PathBuf,
    /// Epochs between intermediate checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            steps: NoiseSchedule::DEFAULT_STEPS,
            eta_per_step: NoiseSchedule::DEFAULT_ETA_PER_STEP,
            seed: 0,
            patch_size: 32,
            dataset: PathBuf::new(),
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.steps == 0 {
            return bad("K must be positive".into());
        }
        if !(self.eta_per_step > 0.0 && self.eta_per_step.is_finite()) {
            return bad(format!("eta_per_step must be positive, got {}", self.eta_per_step));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return bad(format!(
                "patch size must be a positive multiple of 4, got {}",
                self.patch_size
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.eta_per_step)
    }

    /// Key/value form used by checkpoint headers and run manifests.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("eta_per_step".into(), self.eta_per_step.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("patch_size".into(), self.patch_size.to_string()),
            ("dataset".into(), self.dataset.to_string_lossy().into_owned()),
            ("checkpoint_interval".into(), self.checkpoint_interval.to_string()),
        ]
    }

    pub fn from_pairs<'a>(mut get: impl FnMut(&str) -> Option<&'a str>) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: Option<&str>) -> Result<T> {
            let v = v.ok_or_else(|| Error::Config(format!("missing '{key}'")))?;
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for '{key}': '{v}'")))
        }
        Ok(Self {
            epochs: num("epochs", get("epochs"))?,
            batch_size: num("batch_size", get("batch_size"))?,
            learning_rate: num("learning_rate", get("learning_rate"))?,
            steps: num("steps", get("steps"))?,
            eta_per_step: num("eta_per_step", get("eta_per_step"))?,
            seed: num("seed", get("seed"))?,
            patch_size: num("patch_size", get("patch_size"))?,
            dataset: PathBuf::from(get("dataset").unwrap_or("")),
            checkpoint_interval: num("checkpoint_interval", get("checkpoint_interval"))?,
        })
    }
}

/// A source of training images, consumed one epoch at a time.
pub trait Dataset {
    /// Items per epoch.
    fn epoch_len(&self) -> usize;
    fn next_item(&mut self) -> Result<ImageTensor>;
}

/// Fixed set of images visited in a fresh random order every epoch.
#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    items: Vec<ImageTensor>,
    order: Vec<usize>,
    pos: usize,
    rng: RandomSource,
}

impl InMemoryDataset {
    pub fn new(items: Vec<ImageTensor>, seed: u64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let order = (0..items.len()).collect();
        Ok(Self {
            pos: items.len(),
            items,
            order,
            rng: RandomSource::new(seed, streams::DATASET),
        })
    }

    pub fn items(&self) -> &[ImageTensor] {
        &self.items
    }
}

impl Dataset for InMemoryDataset {
    fn epoch_len(&self) -> usize {
        self.items.len()
    }

    fn next_item(&mut self) -> Result<ImageTensor> {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        Ok(self.items[self.order[self.pos - 1]].clone())
    }
}

fn check_batch(y0: &[LogImage], ks: &[usize], schedule: &NoiseSchedule) -> Result<()> {
    if y0.len() != ks.len() {
        return Err(Error::Shape {
            op: "loss_batch",
            detail: format!("{} images but {} step indices", y0.len(), ks.len()),
        });
    }
    if y0.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for &k in ks {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "k = 0 has zero variance and carries no training signal".into(),
            ));
        }
        schedule.eta(k)?;
    }
    Ok(())
}

/// Loss for caller-supplied noise draws; `noise[i]` must match `y0_batch[i]`.
pub fn loss_batch_with_noise<M: ScoreModel + ?Sized>(
    model: &M,
    y0_batch: &[LogImage],
    k_batch: &[usize],
    noise: &[Vec<f64>],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_batch(y0_batch, k_batch, schedule)?;
    if noise.len() != y0_batch.len() {
        return Err(Error::Shape {
            op: "loss_batch",
            detail: format!("{} noise draws for {} images", noise.len(), y0_batch.len()),
        });
    }
    let samples = y0_batch
        .iter()
        .zip(k_batch)
        .zip(noise)
        .map(|((y0, &k), n)| corrupt_log_with_noise(y0, k, schedule, n.clone()))
        .collect::<Result<Vec<_>>>()?;
    let states: Vec<LogImage> = samples.iter().map(|s| s.y_k.clone()).collect();
    let scores = model.score_batch(&states, k_batch)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((s, sample), &k) in scores.iter().zip(&samples).zip(k_batch) {
        let sd = schedule.eta(k)?.sqrt();
        if s.len() != sample.noise.len() {
            return Err(Error::Contract(format!(
                "score has {} entries for a state of {}",
                s.len(),
                sample.noise.len()
            )));
        }
        for (&si, &ni) in s.iter().zip(&sample.noise) {
            let r = ni + sd * si;
            total += r * r;
        }
        count += s.len();
    }
    Ok(total / count as f64)
}

/// Draws fresh noise for every item and returns the mean squared residual
/// `(n + sqrt(eta(k)) s(y_k, k))^2` over the batch and all elements.
pub fn loss_batch<M: ScoreModel + ?Sized>(
    model: &M,
    y0_batch: &[LogImage],
    k_batch: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut RandomSource,
) -> Result<f64> {
    check_batch(y0_batch, k_batch, schedule)?;
    let noise: Vec<Vec<f64>> = y0_batch.iter().map(|y| rng.normal_vec(y.len())).collect();
    loss_batch_with_noise(model, y0_batch, k_batch, &noise, schedule)
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Training state: network, optimizer, counters and the batch-sampling stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub network: Network,
    pub adam: AdamState,
    pub epoch: u64,
    pub step: u64,
    pub losses: Vec<f64>,
    rng: RandomSource,
}

impl Trainer {
    pub fn new(config: TrainConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let network = Network::new(arch, config.seed)?;
        let adam = AdamState::new(network.params());
        Ok(Self {
            rng: RandomSource::new(config.seed, streams::TRAIN),
            config,
            schedule,
            network,
            adam,
            epoch: 0,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        c.config.validate()?;
        Ok(Self {
            rng: RandomSource::from_state(c.rng),
            config: c.config,
            schedule: c.schedule,
            network: c.network,
            adam: c.adam,
            epoch: c.epoch,
            step: c.step,
            losses: Vec::new(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            network: self.network.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.state(),
        }
    }

    /// One gradient step on a batch of clean images.
    pub fn train_step(&mut self, batch: &[ImageTensor]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let dims = batch[0].dims();
        if let Some(b) = batch.iter().find(|b| b.dims() != dims) {
            return Err(Error::Shape {
                op: "train_step",
                detail: format!("mixed batch dims {:?} and {:?}", dims, b.dims()),
            });
        }
        let per = dims.len();
        let k_max = self.schedule.steps();
        let mut ks = Vec::with_capacity(batch.len());
        let mut y_k = Vec::with_capacity(batch.len() * per);
        let mut noise = Vec::with_capacity(batch.len() * per);
        let mut sd = Vec::with_capacity(batch.len() * per);
        for x in batch {
            let k = self.rng.uniform_inclusive(1, k_max);
            let n = self.rng.normal_vec(per);
            let sample = corrupt_log_with_noise(&x.to_log(), k, &self.schedule, n)?;
            let s = self.schedule.eta(k)?.sqrt();
            ks.push(k);
            y_k.extend_from_slice(sample.y_k.data());
            noise.extend_from_slice(&sample.noise);
            sd.extend(std::iter::repeat_n(s, per));
        }
        let shape = vec![batch.len(), dims.channels, dims.height, dims.width];

        let mut tape = Tape::new();
        let params = self.network.bind(&mut tape, true);
        let x = tape.constant(Tensor::new(shape.clone(), y_k)?);
        let out = self.network.forward(&mut tape, &params, x, &ks)?;
        let n = tape.constant(Tensor::new(shape.clone(), noise)?);
        let residual = match self.network.output() {
            NetOutput::Score => {
                let sdv = tape.constant(Tensor::new(shape, sd)?);
                let scaled = tape.mul(out, sdv)?;
                tape.add(n, scaled)?
            }
            NetOutput::NoisePrediction => tape.sub(n, out)?,
        };
        let sq = tape.square(residual);
        let loss_var = tape.mean(sq)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            let r = tape.value(residual).data();
            let i = r.chunks(per).position(|c| c.iter().any(|v| !v.is_finite()));
            return Err(Error::NonFiniteLoss {
                step: self.step,
                k: ks[i.unwrap_or(0)],
            });
        }
        tape.backward(loss_var)?;
        let zeros: Vec<Vec<f64>> = self
            .network
            .params()
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        let grads: Vec<&[f64]> = params
            .iter()
            .zip(&zeros)
            .map(|(v, z)| tape.grad(*v).unwrap_or(z))
            .collect();
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let cfg = AdamConfig::new(self.config.learning_rate);
        adam_step(self.network.params_mut(), &grads, &mut self.adam, &cfg)?;
        self.network.round_params_to_f32();
        self.step += 1;
        self.losses.push(loss);
        Ok(StepReport { loss, grad_norm })
    }

    /// One pass over the dataset in batches; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &mut dyn Dataset) -> Result<f64> {
        let n = data.epoch_len();
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let mut done = 0;
        let mut total = 0.0;
        let mut batches = 0;
        while done < n {
            let take = self.config.batch_size.min(n - done);
            let batch = (0..take)
                .map(|_| data.next_item())
                .collect::<Result<Vec<_>>>()?;
            total += self.train_step(&batch)?.loss;
            batches += 1;
            done += take;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }
}

/// Runs the configured number of epochs, calling `on_checkpoint` every
/// `checkpoint_interval` epochs, and returns the final checkpoint.
pub fn train<F>(
    config: TrainConfig,
    arch: Architecture,
    data: &mut dyn Dataset,
    mut on_checkpoint: F,
) -> Result<Checkpoint>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    let mut trainer = Trainer::new(config, arch)?;
    if data.epoch_len() == 0 {
        return Err(Error::Config("dataset is empty".into()));
    }
    while trainer.epoch < trainer.config.epochs {
        let loss = trainer.run_epoch(data)?;
        log::info!(
            "epoch {} / {}: mean loss {loss:.6} (step {})",
            trainer.epoch,
            trainer.config.epochs,
            trainer.step
        );
        let every = trainer.config.checkpoint_interval;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.config.epochs {
            on_checkpoint(&trainer.checkpoint())?;
        }
    }
    Ok(trainer.checkpoint())
}
