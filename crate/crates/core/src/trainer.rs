//! Pretraining loop.
//!
//! One step: augment two views per sample, encode the query view with the
//! query encoder and the positive view with the key encoder, score against a
//! snapshot of the queue, backpropagate the mean loss into the query encoder
//! only, take an SGD step, move the key encoder towards the query encoder and
//! finally enqueue the keys computed at the start of the step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::{two_views, AugmentConfig, Sample, ViewKey};
use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::{Co2Error, Result};
use crate::losses::{self, BatchLoss, ContrastItem, LossHyperParams};
use crate::memory::{init_queue, FeatureQueue, MomentumState};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply by `factor` once for every milestone epoch reached.
    Step { milestones: Vec<u64>, factor: f64 },
    /// Half-cosine from `base_lr` towards zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau_ins: f64,
    pub tau_con: f64,
    pub alpha: f64,
    /// Label smoothing on the instance term; zero for the standard objective.
    pub smoothing_eps: f64,
    pub queue_k: usize,
    pub ema_m: f64,
    /// Seeds the queue, shuffling and augmentation. The encoder initialization
    /// uses `encoder.init_seed`; [`TrainConfig::with_seed`] sets both.
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 32,
            base_lr: 0.003,
            lr_schedule: LrSchedule::Cosine,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            tau_ins: 0.07,
            tau_con: 0.04,
            alpha: 10.0,
            smoothing_eps: 0.0,
            queue_k: 256,
            ema_m: 0.99,
            seed: 0,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the original ImageNet-scale recipe. The default is
    /// the desk-scale benchmark, which keeps the loss settings but uses a
    /// smaller learning rate, queue and EMA coefficient.
    pub fn imagenet_recipe() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            base_lr: 0.03,
            queue_k: 65_536,
            ema_m: 0.999,
            encoder: EncoderConfig {
                embed_dim: 128,
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.init_seed = seed;
        self
    }

    pub fn loss_params(&self) -> LossHyperParams {
        LossHyperParams {
            tau_ins: self.tau_ins,
            tau_con: self.tau_con,
            alpha: self.alpha,
            smoothing_eps: self.smoothing_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_params().validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.queue_k == 0 || !self.queue_k.is_multiple_of(self.batch_size) {
            return Err(Co2Error::IndivisibleCapacity {
                batch: self.batch_size,
                capacity: self.queue_k,
            });
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Co2Error::InvalidConfig(format!(
                "base_lr must be nonnegative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Co2Error::InvalidConfig(format!(
                "ema_m must lie in [0, 1], got {}",
                self.ema_m
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || !(self.weight_decay >= 0.0) {
            return Err(Co2Error::InvalidConfig(
                "sgd_momentum must lie in [0, 1) and weight_decay must be nonnegative".into(),
            ));
        }
        if let LrSchedule::Step { factor, .. } = &self.lr_schedule {
            if !(*factor > 0.0) {
                return Err(Co2Error::InvalidConfig("step factor must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> u64 {
        num_samples.div_ceil(self.batch_size) as u64
    }
}

/// Learning rate for a zero-based step out of `total_steps`.
pub fn lr_at(config: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total - 1);
    match &config.lr_schedule {
        LrSchedule::Cosine => {
            config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        }
        LrSchedule::Step { milestones, factor } => {
            // epoch containing this step, with fractional epochs rounded down
            let epoch = (step as u128 * config.epochs as u128 / total as u128) as u64;
            let passed = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
            config.base_lr * factor.powi(passed)
        }
    }
}

/// Heavy-ball SGD with coupled weight decay:
/// `g = grad + wd * param; v = mu * v + g; param -= lr * v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut [f64],
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Co2Error::ShapeMismatch {
            expected: params.len(),
            actual: if grads.len() != params.len() {
                grads.len()
            } else {
                velocity.len()
            },
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_ins: f64,
    pub l_con: f64,
    pub total: f64,
    pub inst_acc: f64,
}

pub trait MetricsSink {
    fn record(&mut self, metrics: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, metrics: &MetricsRecord) -> Result<()> {
        self.push(*metrics);
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write> {
    writer: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(writer: W) -> Self {
        Self { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, metrics: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(metrics).map_err(|e| Co2Error::SinkFailure(e.to_string()))?;
        writeln!(self.writer, "{line}").map_err(|e| Co2Error::SinkFailure(e.to_string()))
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub query: EncoderParams,
    pub momentum: MomentumState,
    pub queue: FeatureQueue,
    pub velocity: Vec<f64>,
    /// Steps taken so far.
    pub step: u64,
    pub total_steps: u64,
}

impl TrainState {
    /// Fresh state for a dataset of `num_samples` samples.
    pub fn new(config: &TrainConfig, num_samples: usize) -> Result<Self> {
        config.validate()?;
        if num_samples == 0 {
            return Err(Co2Error::EmptyDataset);
        }
        let query = init_params(&config.encoder)?;
        let momentum = MomentumState::new(query.clone(), config.ema_m)?;
        let queue = init_queue(config.queue_k, config.encoder.embed_dim, config.seed)?;
        Ok(Self {
            velocity: vec![0.0; query.len()],
            config: config.clone(),
            query,
            momentum,
            queue,
            step: 0,
            total_steps: config.epochs * config.steps_per_epoch(num_samples),
        })
    }

    pub fn key_params(&self) -> &EncoderParams {
        &self.momentum.key_params
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    /// One optimization step on `batch`, given as `(dataset index, sample)`.
    ///
    /// The returned metrics describe the loss before the update.
    pub fn train_step(&mut self, batch: &[(usize, &Sample)], epoch: u64) -> Result<MetricsRecord> {
        if batch.is_empty() {
            return Err(Co2Error::EmptyDataset);
        }
        let cfg = &self.config;
        let hp = cfg.loss_params();
        let lr = lr_at(cfg, self.step, self.total_steps);

        let mut traces = Vec::with_capacity(batch.len());
        let mut keys = Vec::with_capacity(batch.len());
        for &(index, sample) in batch {
            let view_key = ViewKey {
                seed: cfg.seed,
                epoch,
                sample: index as u64,
            };
            let (xq, xp) = two_views(&sample.features, &cfg.augment, view_key);
            traces.push(self.query.forward_trace(&xq)?);
            keys.push(self.momentum.key_params.forward(&xp)?);
        }
        let negatives = self.queue.snapshot();

        let scale = 1.0 / batch.len() as f64;
        let mut grads = vec![0.0; self.query.len()];
        let mut breakdowns = Vec::with_capacity(batch.len());
        for (trace, key) in traces.iter().zip(&keys) {
            let item = ContrastItem::new(trace.embedding(), key, &negatives)?;
            let (breakdown, grad_q) = losses::evaluate(&item, &hp, true)?;
            let grad_q = grad_q.expect("gradient requested");
            self.query
                .accumulate_backward(trace, &grad_q, scale, &mut grads)?;
            breakdowns.push(breakdown);
        }
        let mean = BatchLoss::mean(&breakdowns);

        sgd_update(
            self.query.values_mut(),
            &grads,
            lr,
            cfg.sgd_momentum,
            cfg.weight_decay,
            &mut self.velocity,
        )?;
        self.momentum.momentum_update(&self.query)?;
        self.queue.enqueue_batch(&keys)?;

        let record = MetricsRecord {
            step: self.step,
            epoch,
            lr,
            l_ins: mean.l_ins,
            l_con: mean.l_con,
            total: mean.total,
            inst_acc: mean.inst_acc,
        };
        self.step += 1;
        Ok(record)
    }

    /// Sample order for `epoch`; the tail is padded from the front so every
    /// batch is full.
    fn epoch_batches(&self, num_samples: usize, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..num_samples).collect();
        order.shuffle(&mut rng::stream(self.config.seed, Domain::Shuffle, epoch, 0));
        let b = self.config.batch_size;
        let steps = self.config.steps_per_epoch(num_samples) as usize;
        (0..steps)
            .map(|s| (0..b).map(|j| order[(s * b + j) % num_samples]).collect())
            .collect()
    }

    /// Trains until `stop_at` steps have been taken (or the run ends),
    /// streaming metrics to `sink` and calling `on_checkpoint` every
    /// `config.checkpoint_every` steps.
    pub fn run(
        &mut self,
        dataset: &[Sample],
        sink: &mut dyn MetricsSink,
        stop_at: Option<u64>,
        on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(Co2Error::EmptyDataset);
        }
        if let Some(bad) = dataset
            .iter()
            .find(|s| s.features.len() != self.config.encoder.input_dim)
        {
            return Err(Co2Error::DimensionMismatch(format!(
                "sample of dimension {} for encoder input {}",
                bad.features.len(),
                self.config.encoder.input_dim
            )));
        }
        let spe = self.config.steps_per_epoch(dataset.len());
        if self.total_steps != self.config.epochs * spe {
            return Err(Co2Error::DimensionMismatch(format!(
                "state expects {} steps but the dataset gives {}",
                self.total_steps,
                self.config.epochs * spe
            )));
        }
        let end = stop_at.unwrap_or(self.total_steps).min(self.total_steps);
        let mut cached_epoch = None;
        while self.step < end {
            let epoch = self.step / spe;
            if cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached_epoch = Some((epoch, self.epoch_batches(dataset.len(), epoch)));
            }
            let (_, batches) = cached_epoch.as_ref().expect("cached");
            let batch: Vec<(usize, &Sample)> = batches[(self.step % spe) as usize]
                .iter()
                .map(|&i| (i, &dataset[i]))
                .collect();
            let record = self.train_step(&batch, epoch)?;
            sink.record(&record)?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) && self.step < self.total_steps {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.query.write_to(w)?;
        write_section(w, b"KEYP", |buf| {
            binio::write_f64s(buf, self.momentum.key_params.values())?;
            Ok(())
        })?;
        write_section(w, b"QUEU", |buf| self.queue.write_to(buf))?;
        write_section(w, b"VELO", |buf| {
            binio::write_f64s(buf, &self.velocity)?;
            Ok(())
        })?;
        write_section(w, b"RNGS", |buf| {
            buf.write_all(&self.config.seed.to_le_bytes())?;
            buf.write_all(&self.step.to_le_bytes())?;
            buf.write_all(&self.total_steps.to_le_bytes())?;
            Ok(())
        })?;
        write_section(w, b"CONF", |buf| {
            serde_json::to_writer(buf, &self.config)
                .map_err(|e| Co2Error::InvalidConfig(e.to_string()))
        })?;
        write_section(w, b"ENDS", |_| Ok(()))?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let query = EncoderParams::read_from(r)?;
        let mut key_values = None;
        let mut queue = None;
        let mut velocity = None;
        let mut counters = None;
        let mut config: Option<TrainConfig> = None;
        loop {
            let (tag, payload) = read_section(r)?;
            let mut p = payload.as_slice();
            match &tag {
                b"KEYP" => key_values = Some(binio::read_f64s(&mut p, payload.len() / 8, "key params")?),
                b"QUEU" => queue = Some(FeatureQueue::read_from(&mut p)?),
                b"VELO" => velocity = Some(binio::read_f64s(&mut p, payload.len() / 8, "velocity")?),
                b"RNGS" => {
                    let seed = binio::read_u64(&mut p, "rng section")?;
                    let step = binio::read_u64(&mut p, "rng section")?;
                    let total = binio::read_u64(&mut p, "rng section")?;
                    counters = Some((seed, step, total));
                }
                b"CONF" => {
                    config = Some(
                        serde_json::from_slice(&payload)
                            .map_err(|e| Co2Error::InvalidConfig(format!("checkpoint config: {e}")))?,
                    )
                }
                b"ENDS" => break,
                _ => {} // unknown sections are skipped
            }
        }
        let missing = |what| Co2Error::TruncatedFile(what);
        let config = config.ok_or(missing("config section"))?;
        let (seed, step, total_steps) = counters.ok_or(missing("rng section"))?;
        if seed != config.seed || &config.encoder != query.config() {
            return Err(Co2Error::DimensionMismatch(
                "checkpoint sections disagree with its config".into(),
            ));
        }
        let key_params =
            EncoderParams::from_values(config.encoder.clone(), key_values.ok_or(missing("key section"))?)?;
        let velocity = velocity.ok_or(missing("velocity section"))?;
        if velocity.len() != query.len() {
            return Err(Co2Error::ShapeMismatch {
                expected: query.len(),
                actual: velocity.len(),
            });
        }
        let queue = queue.ok_or(missing("queue section"))?;
        if queue.capacity() != config.queue_k || queue.dim() != config.encoder.embed_dim {
            return Err(Co2Error::DimensionMismatch("queue shape disagrees with config".into()));
        }
        Ok(Self {
            momentum: MomentumState::new(key_params, config.ema_m)?,
            config,
            query,
            queue,
            velocity,
            step,
            total_steps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_section(
    w: &mut impl Write,
    tag: &[u8; 4],
    body: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    w.write_all(tag)?;
    w.write_all(&(buf.len() as u64).to_le_bytes())?;
    w.write_all(&buf)?;
    Ok(())
}

fn read_section(r: &mut impl Read) -> Result<([u8; 4], Vec<u8>)> {
    let mut tag = [0u8; 4];
    binio::read_exact(r, &mut tag, "section tag")?;
    let len = binio::read_u64(r, "section length")?;
    if len > 1 << 36 {
        return Err(Co2Error::DimensionMismatch(format!("section of {len} bytes")));
    }
    let mut payload = vec![0u8; len as usize];
    binio::read_exact(r, &mut payload, "section payload")?;
    Ok((tag, payload))
}

/// Fresh state trained to completion on `dataset`.
pub fn run_training(
    config: &TrainConfig,
    dataset: &[Sample],
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let mut state = TrainState::new(config, dataset.len())?;
    state.run(dataset, sink, None, &mut |_| Ok(()))?;
    Ok(state)
}
