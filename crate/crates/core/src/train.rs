//! Training loop: per-iteration instance sampling, SGD with momentum and
//! weight decay, step learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use crate::data::{batch_iter, bilinear_resize, AugmentPolicy, Dataset};
use crate::downsample::{enumerate_instances, sdpoint_forward, InstanceCatalog, SDPointInstance};
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, ForwardCtx, LayerStack, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::Tensor4;

// Independent random streams derived from the run seed; augmentation uses
// one stream per epoch.
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// A random instance per mini-batch.
    SdPoint,
    /// The unmodified network every iteration.
    Baseline,
    /// Inputs bilinearly resized to a random square size per mini-batch.
    Multiscale,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdpoint" => Ok(TrainMode::SdPoint),
            "baseline" => Ok(TrainMode::Baseline),
            "multiscale" => Ok(TrainMode::Multiscale),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}`; expected sdpoint, baseline or multiscale"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::SdPoint => "sdpoint",
            TrainMode::Baseline => "baseline",
            TrainMode::Multiscale => "multiscale",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the learning rate is divided by 10.
    pub lr_drop_points: Vec<f64>,
    pub mode: TrainMode,
    pub seed: u64,
    pub ratios: Vec<f64>,
    /// Limits the downsampling points to `1..=points`; `None` uses every block.
    pub points: Option<usize>,
    /// Inclusive input-size range for multiscale training.
    pub multiscale_sizes: (usize, usize),
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_points: vec![0.5, 0.75],
            mode: TrainMode::SdPoint,
            seed: 0,
            ratios: vec![0.5, 0.75],
            points: None,
            multiscale_sizes: (16, 32),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if self.lr_drop_points.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(Error::invalid(
                "lr drop points must lie strictly between 0 and 1",
            ));
        }
        if !(self.base_lr >= 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::invalid("invalid optimiser hyperparameters"));
        }
        let (lo, hi) = self.multiscale_sizes;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(
                "multiscale size range must be non-empty and positive",
            ));
        }
        Ok(())
    }

    /// `base_lr · 10^(−d)` with `d` the number of drop points reached at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let d = self
            .lr_drop_points
            .iter()
            .filter(|&&f| epoch as f64 >= f * self.epochs as f64)
            .count();
        self.base_lr * 10f64.powi(-(d as i32))
    }

    pub fn catalog(&self, spec: &NetworkSpec) -> Result<InstanceCatalog> {
        let n = spec.downsampling_points();
        let points = self.points.unwrap_or(n);
        if points > n {
            return Err(Error::invalid(format!(
                "network has only {n} downsampling points"
            )));
        }
        enumerate_instances(points, &self.ratios)
    }
}

/// SGD with classical momentum: `v ← μv − lr·(g + wd·w)`, `w ← w + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(stack: &LayerStack, momentum: f64, weight_decay: f64) -> Self {
        let velocity = stack
            .params()
            .iter()
            .map(|(_, _, p)| vec![0.0; p.len()])
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn step(&mut self, stack: &mut LayerStack, lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (p, v) in stack.params_mut().into_iter().zip(&mut self.velocity) {
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel - lr * (*g + wd * *w);
                *w += *vel;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean training loss over the epoch.
    pub train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub iteration_losses: Vec<f64>,
    /// Instance id (or `s<size>` in multiscale mode) used at each iteration.
    pub draws: Vec<String>,
}

/// What one iteration runs: an instance, or the full network on resized input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Instance(SDPointInstance),
    InputSize(usize),
}

impl Variant {
    pub fn id(&self) -> String {
        match self {
            Variant::Instance(i) => i.id(),
            Variant::InputSize(s) => format!("s{s}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `p<k>_r<pct>` / `p0` for instances, `s<size>` for input sizes.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(size) = s.strip_prefix('s') {
            return match size.parse::<usize>() {
                Ok(v) if v > 0 => Ok(Variant::InputSize(v)),
                _ => Err(Error::invalid(format!("invalid input-size id `{s}`"))),
            };
        }
        s.parse().map(Variant::Instance)
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub stack: LayerStack,
    pub history: TrainHistory,
    data: &'a Dataset,
    catalog: InstanceCatalog,
    sgd: Sgd,
    sampler: Rng,
    epoch: usize,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters from the config's seed; `data` should already be normalised.
    pub fn new(config: TrainConfig, spec: NetworkSpec, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let stack = LayerStack::new(spec, &mut root.fork(STREAM_INIT))?;
        Self::with_stack(config, stack, data)
    }

    pub fn with_stack(config: TrainConfig, stack: LayerStack, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyData);
        }
        let catalog = config.catalog(stack.spec())?;
        let root = Rng::new(config.seed);
        Ok(Trainer {
            sgd: Sgd::new(&stack, config.momentum, config.weight_decay),
            sampler: root.fork(STREAM_SAMPLER),
            catalog,
            stack,
            config,
            data,
            history: TrainHistory::default(),
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn catalog(&self) -> &InstanceCatalog {
        &self.catalog
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn draw(&mut self) -> Result<Variant> {
        Ok(match self.config.mode {
            TrainMode::SdPoint => Variant::Instance(self.catalog.sample(&mut self.sampler)),
            TrainMode::Baseline => Variant::Instance(SDPointInstance::IDENTITY),
            TrainMode::Multiscale => {
                let (lo, hi) = self.config.multiscale_sizes;
                Variant::InputSize(lo + self.sampler.uniform_choice(hi - lo + 1)?)
            }
        })
    }

    /// One SGD step on a mini-batch; returns the batch loss.
    pub fn step(&mut self, images: &Tensor4, labels: &[usize], lr: f64) -> Result<f64> {
        let variant = self.draw()?;
        let resized;
        let (x, inst) = match variant {
            Variant::Instance(inst) => (images, inst),
            Variant::InputSize(s) => {
                resized = bilinear_resize(images, s, s)?;
                (&resized, SDPointInstance::IDENTITY)
            }
        };
        let mut ctx = ForwardCtx::train();
        let (logits, trace) = sdpoint_forward(&self.stack, x, inst, &mut ctx)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                loss,
            });
        }
        self.stack.zero_grad();
        self.stack.backward(&trace, &grad)?;
        self.stack.apply_running_updates(ctx.moments());
        self.sgd.step(&mut self.stack, lr);
        self.history.iteration_losses.push(loss);
        self.history.draws.push(variant.id());
        self.iteration += 1;
        Ok(loss)
    }

    /// One pass over the training data.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let lr = self.config.lr_at(self.epoch);
        let shuffle =
            self.config.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let iter = batch_iter(self.data, self.config.batch_size, Some(shuffle))?.with_augment(
            self.config.augment,
            Rng::new(self.config.seed).fork(STREAM_AUGMENT << 32 | self.epoch as u64),
        )?;
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in iter {
            let batch = batch?;
            let loss = self.step(&batch.images, &batch.labels, lr)?;
            total += loss * batch.labels.len() as f64;
            count += batch.labels.len();
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss: total / count as f64,
        };
        self.history.epochs.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }

    pub fn finish(self) -> (LayerStack, TrainHistory) {
        (self.stack, self.history)
    }
}

/// Runs every configured epoch.
pub fn train(
    config: &TrainConfig,
    spec: NetworkSpec,
    data: &Dataset,
) -> Result<(LayerStack, TrainHistory)> {
    let mut t = Trainer::new(config.clone(), spec, data)?;
    while !t.is_done() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}
