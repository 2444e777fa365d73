//! Adversarial reverse-step mapper: a time- and latent-conditioned generator
//! predicting the clean image from a noisy sample, a pair-conditioned
//! discriminator, their losses and the training loop.

mod checkpoint;
mod config;
mod discriminator;
mod generator;
mod layers;
mod loss;
mod train;

pub use checkpoint::PRIOR_FORMAT;
pub use config::{MapperConfig, Resample, TrainMode};
pub use discriminator::PairDiscriminator;
pub use generator::UNetGenerator;
pub use loss::{
    discriminator_gradients, generator_gradients, l1_gradients, loss_discriminator, loss_generator, DiscriminatorLoss,
    TrainBatch,
};
pub use train::{train, EpochStats, Prior, TrainingMeta};

use adadiff_tape::{Bound, Graph, ParamStore, Tensor, Var};

/// Maps a noisy sample at step `t + k` to an estimate of the clean image.
pub trait Generator {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn z_dim(&self) -> usize;
    /// Records the forward pass: `x_next: [N, 2, H, W]`, one time index per
    /// batch element, `z: [N, z_dim]`; returns `[N, 2, H, W]`.
    fn forward(&self, g: &mut Graph, p: &Bound, x_next: Var, times: &[usize], z: Var) -> Var;
}

/// Scores a pair `(x_t, x_{t+k})` at time `t + k`; returns `[N]` logits.
pub trait Discriminator {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, g: &mut Graph, p: &Bound, x_t: Var, x_next: Var, times: &[usize]) -> Var;
}

/// Evaluates the generator without recording gradients.
pub fn run_generator<G: Generator + ?Sized>(gen: &G, x_next: &Tensor, times: &[usize], z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = g.bind(gen.params(), false);
    let x = g.constant(x_next.clone());
    let z = g.constant(z.clone());
    let out = gen.forward(&mut g, &p, x, times, z);
    g.value(out).clone()
}

/// Evaluates the discriminator without recording gradients.
pub fn run_discriminator<D: Discriminator + ?Sized>(disc: &D, x_t: &Tensor, x_next: &Tensor, times: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let p = g.bind(disc.params(), false);
    let a = g.constant(x_t.clone());
    let b = g.constant(x_next.clone());
    let out = disc.forward(&mut g, &p, a, b, times);
    g.value(out).data().to_vec()
}
