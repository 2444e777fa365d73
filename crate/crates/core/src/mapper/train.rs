use adadiff_tape::{Adam, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{MapperConfig, TrainMode};
use super::discriminator::PairDiscriminator;
use super::generator::UNetGenerator;
use super::loss::{discriminator_gradients, generator_gradients, l1_gradients, TrainBatch};
use super::{run_discriminator, run_generator, Generator};
use crate::error::{config, contract, Error, Result};
use crate::image::ComplexImage;
use crate::rng;
use crate::schedule::DiffusionSchedule;

/// Epoch means of the training losses. Fields that do not apply to the
/// training mode are zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub generator: f64,
    pub discriminator: f64,
    pub real: f64,
    pub fake: f64,
    pub penalty: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub mode: TrainMode,
    pub epochs_completed: usize,
    pub trace: Vec<EpochStats>,
}

/// Trained (or freshly initialised) generator/discriminator pair together
/// with the schedule it was trained against.
#[derive(Clone, Debug)]
pub struct Prior {
    pub config: MapperConfig,
    pub schedule: DiffusionSchedule,
    pub generator: UNetGenerator,
    pub discriminator: PairDiscriminator,
    pub meta: TrainingMeta,
    pub(crate) opt_g: Adam,
    pub(crate) opt_d: Adam,
}

const EPOCH_TAG: u64 = 0x6570_6f63;

impl Prior {
    /// Seeded initialisation; no training.
    pub fn new(config: MapperConfig, schedule: DiffusionSchedule, mode: TrainMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let generator = UNetGenerator::new(&config, rng::derive_seed(seed, &[1]));
        let discriminator = PairDiscriminator::new(&config, rng::derive_seed(seed, &[2]));
        let opt_g = Adam::new(generator.params(), config.learning_rate, config.adam_beta1, config.adam_beta2);
        let opt_d = Adam::new(
            super::Discriminator::params(&discriminator),
            config.disc_learning_rate,
            config.adam_beta1,
            config.adam_beta2,
        );
        Ok(Self {
            config,
            schedule,
            generator,
            discriminator,
            meta: TrainingMeta {
                seed,
                mode,
                epochs_completed: 0,
                trace: Vec::new(),
            },
            opt_g,
            opt_d,
        })
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.opt_g, &self.opt_d)
    }

    fn check_image(&self, t: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        match t.shape() {
            [_, 2, h, w] if *h == s && *w == s => Ok(()),
            other => Err(contract(format!("expected [N, 2, {s}, {s}] images, got {other:?}"))),
        }
    }

    /// Clean-image estimate `G(x_{t+k}, t+k, z)` for step indices `r` (one per element).
    pub fn generate_x0(&self, x_next: &Tensor, r: &[usize], z: &Tensor) -> Result<Tensor> {
        self.check_image(x_next)?;
        let n = x_next.shape()[0];
        if r.len() != n || z.shape() != [n, self.config.z_dim] {
            return Err(contract(format!(
                "need {n} step indices and [{n}, {}] latents",
                self.config.z_dim
            )));
        }
        if let Some(bad) = r.iter().find(|&&r| r > self.schedule.steps()) {
            return Err(contract(format!("step index {bad} outside 0..={}", self.schedule.steps())));
        }
        let times: Vec<usize> = r.iter().map(|&r| self.schedule.time_index(r)).collect();
        Ok(run_generator(&self.generator, x_next, &times, z))
    }

    /// Discriminator logits for pairs whose upper sample sits at step `r + 1`.
    pub fn discriminate(&self, x_t: &Tensor, x_next: &Tensor, r: &[usize]) -> Result<Vec<f64>> {
        self.check_image(x_t)?;
        if x_t.shape() != x_next.shape() || r.len() != x_t.shape()[0] {
            return Err(contract("pair shapes or step count disagree"));
        }
        if let Some(bad) = r.iter().find(|&&r| r >= self.schedule.steps()) {
            return Err(contract(format!("lower step index {bad} outside 0..{}", self.schedule.steps())));
        }
        let times: Vec<usize> = r.iter().map(|&r| self.schedule.time_index(r + 1)).collect();
        Ok(run_discriminator(&self.discriminator, x_t, x_next, &times))
    }

    /// Trains until `target_epochs` epochs have completed in total. Epoch `e`
    /// draws all randomness from streams keyed by `(seed, e)`, so a run resumed
    /// from a checkpoint reproduces an uninterrupted one exactly.
    pub fn train_until(
        &mut self,
        images: &[ComplexImage],
        target_epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochStats),
    ) -> Result<()> {
        if images.is_empty() {
            return Err(config("training set is empty"));
        }
        let s = self.config.image_size;
        if let Some(bad) = images.iter().find(|im| im.shape() != (s, s)) {
            return Err(config(format!(
                "training image {:?} does not match the configured size {s}x{s}",
                bad.shape()
            )));
        }
        let tensors: Vec<Tensor> = images.iter().map(ComplexImage::to_tensor).collect();
        let bs = self.config.batch_size;
        let seed = self.meta.seed;
        for epoch in self.meta.epochs_completed..target_epochs {
            let mut order: Vec<usize> = (0..tensors.len()).collect();
            order.shuffle(&mut rng::stream(seed, &[EPOCH_TAG, epoch as u64]));
            let mut stats = EpochStats {
                epoch: epoch + 1,
                ..Default::default()
            };
            let mut batches = 0usize;
            for (step, chunk) in order.chunks(bs).enumerate() {
                let items: Vec<Tensor> = chunk.iter().map(|&i| tensors[i].clone()).collect();
                let x0 = Tensor::stack(&items);
                let mut r = rng::stream(seed, &[EPOCH_TAG, epoch as u64, step as u64]);
                self.step(x0, &mut r, &mut stats)?;
                batches += 1;
            }
            let nb = batches as f64;
            for v in [
                &mut stats.generator,
                &mut stats.discriminator,
                &mut stats.real,
                &mut stats.fake,
                &mut stats.penalty,
                &mut stats.l1,
            ] {
                *v /= nb;
            }
            let finite = [stats.generator, stats.discriminator, stats.l1].iter().all(|v| v.is_finite())
                && self.generator.params().tensors().iter().all(Tensor::all_finite);
            if !finite {
                return Err(Error::Divergence {
                    stage: "training",
                    unit: "epoch",
                    index: epoch + 1,
                });
            }
            self.meta.epochs_completed = epoch + 1;
            self.meta.trace.push(stats.clone());
            on_epoch(&stats);
        }
        Ok(())
    }

    fn step(&mut self, x0: Tensor, rng: &mut rand_chacha::ChaCha8Rng, stats: &mut EpochStats) -> Result<()> {
        let steps = self.schedule.steps();
        let zd = self.config.z_dim;
        match self.meta.mode {
            TrainMode::L1 => {
                let batch = TrainBatch::sample(x0, steps, zd, rng);
                let (loss, grads) = l1_gradients(&self.generator, &self.schedule, &batch)?;
                self.opt_g.step(self.generator.params_mut(), &grads);
                stats.l1 += loss;
            }
            TrainMode::Adversarial => {
                let d_batch = TrainBatch::sample(x0.clone(), steps, zd, rng);
                let (d_loss, d_grads) = discriminator_gradients(
                    &self.generator,
                    &self.discriminator,
                    &self.schedule,
                    &d_batch,
                    self.config.r1_weight,
                )?;
                self.opt_d.step(super::Discriminator::params_mut(&mut self.discriminator), &d_grads);
                let g_batch = TrainBatch::sample(x0, steps, zd, rng);
                let (g_loss, g_grads) = generator_gradients(&self.generator, &self.discriminator, &self.schedule, &g_batch)?;
                self.opt_g.step(self.generator.params_mut(), &g_grads);
                stats.discriminator += d_loss.total;
                stats.real += d_loss.real;
                stats.fake += d_loss.fake;
                stats.penalty += d_loss.penalty;
                stats.generator += g_loss;
            }
        }
        Ok(())
    }
}

/// Initialises a prior from `seed` and trains it for `config.epochs` epochs.
pub fn train(
    images: &[ComplexImage],
    config: MapperConfig,
    schedule: DiffusionSchedule,
    mode: TrainMode,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Prior> {
    if images.is_empty() {
        return Err(crate::error::config("training set is empty"));
    }
    let epochs = config.epochs;
    let mut prior = Prior::new(config, schedule, mode, seed)?;
    prior.train_until(images, epochs, on_epoch)?;
    Ok(prior)
}
