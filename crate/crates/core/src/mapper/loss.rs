//! Discriminator and generator objectives.
//!
//! Real pairs are `x_t ~ q(x_t | x_0)`, `x_{t+k} ~ q(x_{t+k} | x_t)`; fake
//! samples `x̂_t` are drawn from the closed-form posterior around the
//! generator's clean estimate. The discriminator minimises
//! `softplus(−D(real)) + softplus(D(fake)) + w·½‖∇_{x_t} D(real)‖²`, the
//! generator the non-saturating `softplus(−D(fake))`, all averaged over the batch.

use adadiff_tape::{Graph, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use super::{run_generator, Discriminator, Generator};
use crate::error::{contract, Result};
use crate::rng::gaussian_tensor;
use crate::schedule::DiffusionSchedule;

/// One minibatch of training draws. `r[n]` is the lower step index of pair `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub r: Vec<usize>,
    pub noise_a: Tensor,
    pub noise_b: Tensor,
    /// Noise for sampling the fake `x̂_t` from the posterior.
    pub noise_post: Tensor,
    pub z: Tensor,
}

impl TrainBatch {
    /// Draws step indices uniformly from `0..steps` plus all noise and latents.
    pub fn sample(x0: Tensor, steps: usize, z_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = x0.shape()[0];
        let r = (0..n).map(|_| rng.random_range(0..steps)).collect();
        let noise_a = gaussian_tensor(rng, x0.shape());
        let noise_b = gaussian_tensor(rng, x0.shape());
        let noise_post = gaussian_tensor(rng, x0.shape());
        let z = gaussian_tensor(rng, &[n, z_dim]);
        Self {
            x0,
            r,
            noise_a,
            noise_b,
            noise_post,
            z,
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn validate(&self, schedule: &DiffusionSchedule, z_dim: usize) -> Result<()> {
        let s = self.x0.shape();
        if s.len() != 4 || s[1] != 2 || s[0] != self.r.len() || s[0] == 0 {
            return Err(contract(format!(
                "batch images {s:?} do not match {} step indices",
                self.r.len()
            )));
        }
        for t in [&self.noise_a, &self.noise_b, &self.noise_post] {
            if t.shape() != s {
                return Err(contract(format!("noise shape {:?} differs from images {s:?}", t.shape())));
            }
        }
        if self.z.shape() != [s[0], z_dim] {
            return Err(contract(format!("latent shape {:?}, expected [{}, {z_dim}]", self.z.shape(), s[0])));
        }
        if let Some(r) = self.r.iter().find(|&&r| r >= schedule.steps()) {
            return Err(contract(format!("step index {r} outside 0..{}", schedule.steps())));
        }
        Ok(())
    }

    /// Time index of the upper sample of every pair.
    pub fn next_times(&self, schedule: &DiffusionSchedule) -> Vec<usize> {
        self.r.iter().map(|&r| schedule.time_index(r + 1)).collect()
    }

    /// Real pairs `(x_t, x_{t+k})`.
    pub fn pairs(&self, schedule: &DiffusionSchedule) -> Result<(Tensor, Tensor)> {
        let mut xt = Vec::with_capacity(self.len());
        let mut xn = Vec::with_capacity(self.len());
        for (n, &r) in self.r.iter().enumerate() {
            let item = |t: &Tensor| Tensor::from_vec(&t.shape()[1..], t.batch_item(n).to_vec());
            let a = schedule.forward_diffuse(&item(&self.x0), r, &item(&self.noise_a))?;
            let b = schedule.forward_step(&a, r + 1, &item(&self.noise_b))?;
            xt.push(a);
            xn.push(b);
        }
        Ok((stack(&xt), stack(&xn)))
    }

    /// Per-element posterior coefficients `(x0, x_next, std)`.
    fn posterior(&self, schedule: &DiffusionSchedule) -> Result<Vec<(f64, f64, f64)>> {
        self.r
            .iter()
            .map(|&r| {
                let c = schedule.posterior_coefficients(r)?;
                Ok((c.x0, c.x_next, c.var.sqrt()))
            })
            .collect()
    }

    /// The part of `x̂_t` that does not depend on the clean estimate:
    /// `b·x_{t+k} + σ·noise`.
    fn posterior_offset(&self, coeffs: &[(f64, f64, f64)], x_next: &Tensor) -> Tensor {
        let mut out = x_next.clone();
        let stride = out.len() / self.len();
        for (n, &(_, b, s)) in coeffs.iter().enumerate() {
            let noise = self.noise_post.batch_item(n);
            for (v, e) in out.data_mut()[n * stride..(n + 1) * stride].iter_mut().zip(noise) {
                *v = b * *v + s * e;
            }
        }
        out
    }
}

fn stack(items: &[Tensor]) -> Tensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

/// Batch means of the three discriminator terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub total: f64,
    /// `softplus(−D(real))`, i.e. `−log σ(D(real))`.
    pub real: f64,
    /// `softplus(D(fake))`, i.e. `−log(1 − σ(D(fake)))`.
    pub fake: f64,
    /// `½‖∇_{x_t} D(real)‖²`.
    pub penalty: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fake samples `x̂_t` for every pair, with the generator held fixed.
fn fake_samples<G: Generator + ?Sized>(
    gen: &G,
    schedule: &DiffusionSchedule,
    batch: &TrainBatch,
    x_next: &Tensor,
) -> Result<Tensor> {
    let coeffs = batch.posterior(schedule)?;
    let x0_tilde = run_generator(gen, x_next, &batch.next_times(schedule), &batch.z);
    let mut out = batch.posterior_offset(&coeffs, x_next);
    let stride = out.len() / batch.len();
    for (n, &(a, _, _)) in coeffs.iter().enumerate() {
        let est = x0_tilde.batch_item(n);
        for (v, e) in out.data_mut()[n * stride..(n + 1) * stride].iter_mut().zip(est) {
            *v += a * e;
        }
    }
    Ok(out)
}

/// Sum of real logits and its gradients: `(logits, ∇_{x_t} Σ D, ∇_θ Σ D)`.
fn real_logit_sum<D: Discriminator + ?Sized>(
    disc: &D,
    x_t: &Tensor,
    x_next: &Tensor,
    times: &[usize],
    want_params: bool,
) -> (Vec<f64>, Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let p = g.bind(disc.params(), want_params);
    let xt = g.leaf(x_t.clone(), true);
    let xn = g.constant(x_next.clone());
    let logits = disc.forward(&mut g, &p, xt, xn, times);
    let values = g.value(logits).data().to_vec();
    let mut grads = g.backward_with(logits, Tensor::full(&[times.len()], 1.0));
    let input = grads.take(xt).unwrap_or_else(|| Tensor::zeros(x_t.shape()));
    let params = if want_params {
        grads.collect(&p, disc.params())
    } else {
        Vec::new()
    };
    (values, input, params)
}

/// Discriminator loss value with its diagnostics.
pub fn loss_discriminator<G, D>(
    gen: &G,
    disc: &D,
    schedule: &DiffusionSchedule,
    batch: &TrainBatch,
    r1_weight: f64,
) -> Result<DiscriminatorLoss>
where
    G: Generator + ?Sized,
    D: Discriminator + ?Sized,
{
    batch.validate(schedule, gen.z_dim())?;
    let (x_t, x_next) = batch.pairs(schedule)?;
    let times = batch.next_times(schedule);
    let fake = fake_samples(gen, schedule, batch, &x_next)?;
    let (real_logits, input_grad, _) = real_logit_sum(disc, &x_t, &x_next, &times, false);
    let fake_logits = super::run_discriminator(disc, &fake, &x_next, &times);
    let n = batch.len() as f64;
    let real = real_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / n;
    let fake = fake_logits.iter().map(|&l| softplus(l)).sum::<f64>() / n;
    let penalty = 0.5 * input_grad.norm_sq() / n;
    Ok(DiscriminatorLoss {
        total: real + fake + r1_weight * penalty,
        real,
        fake,
        penalty,
    })
}

/// Discriminator loss and its parameter gradient.
///
/// The penalty's parameter gradient `∂θ ½‖∇ₓD‖²` is a mixed second
/// derivative; it is evaluated as the central difference of `∇θ Σ D` along
/// the input-gradient direction, which is exact to `O(ε²)`.
pub fn discriminator_gradients<G, D>(
    gen: &G,
    disc: &D,
    schedule: &DiffusionSchedule,
    batch: &TrainBatch,
    r1_weight: f64,
) -> Result<(DiscriminatorLoss, Vec<Tensor>)>
where
    G: Generator + ?Sized,
    D: Discriminator + ?Sized,
{
    batch.validate(schedule, gen.z_dim())?;
    let (x_t, x_next) = batch.pairs(schedule)?;
    let times = batch.next_times(schedule);
    let fake = fake_samples(gen, schedule, batch, &x_next)?;
    let n = batch.len() as f64;

    let mut g = Graph::new();
    let p = g.bind(disc.params(), true);
    let xt = g.leaf(x_t.clone(), true);
    let xn = g.constant(x_next.clone());
    let real_logits = disc.forward(&mut g, &p, xt, xn, &times);
    let input_grad = g
        .backward_with(real_logits, Tensor::full(&[batch.len()], 1.0))
        .take(xt)
        .unwrap_or_else(|| Tensor::zeros(x_t.shape()));
    let xf = g.constant(fake);
    let fake_logits = disc.forward(&mut g, &p, xf, xn, &times);
    let neg = g.scale(real_logits, -1.0);
    let real_sp = g.softplus(neg);
    let real_term = g.mean(real_sp);
    let fake_sp = g.softplus(fake_logits);
    let fake_term = g.mean(fake_sp);
    let total = g.add(real_term, fake_term);
    let (real, fake) = (g.value(real_term).item(), g.value(fake_term).item());
    let mut grads = if g.requires_grad(total) {
        g.backward(total).collect(&p, disc.params())
    } else {
        disc.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
    };

    let penalty = 0.5 * input_grad.norm_sq() / n;
    let peak = input_grad.max_abs();
    if r1_weight > 0.0 && peak > 0.0 && !disc.params().is_empty() {
        let eps = 1e-5 * x_t.max_abs().max(1.0) / peak;
        let shifted = |sign: f64| x_t.zip_map(&input_grad, |x, d| x + sign * eps * d);
        let (_, _, plus) = real_logit_sum(disc, &shifted(1.0), &x_next, &times, true);
        let (_, _, minus) = real_logit_sum(disc, &shifted(-1.0), &x_next, &times, true);
        let factor = r1_weight / (2.0 * eps * n);
        for ((g, a), b) in grads.iter_mut().zip(&plus).zip(&minus) {
            for ((v, x), y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *v += factor * (x - y);
            }
        }
    }
    Ok((
        DiscriminatorLoss {
            total: real + fake + r1_weight * penalty,
            real,
            fake,
            penalty,
        },
        grads,
    ))
}

/// Records `softplus(−D(x̂_t))` with the generator trainable and the discriminator fixed.
fn generator_objective<G, D>(
    gen: &G,
    disc: &D,
    schedule: &DiffusionSchedule,
    batch: &TrainBatch,
    g: &mut Graph,
) -> Result<(adadiff_tape::Bound, adadiff_tape::Var)>
where
    G: Generator + ?Sized,
    D: Discriminator + ?Sized,
{
    batch.validate(schedule, gen.z_dim())?;
    let (_, x_next) = batch.pairs(schedule)?;
    let times = batch.next_times(schedule);
    let coeffs = batch.posterior(schedule)?;
    let p = g.bind(gen.params(), true);
    let xn = g.constant(x_next.clone());
    let z = g.constant(batch.z.clone());
    let x0_tilde = gen.forward(g, &p, xn, &times, z);
    let scaled = g.scale_batch(x0_tilde, coeffs.iter().map(|c| c.0).collect());
    let offset = g.constant(batch.posterior_offset(&coeffs, &x_next));
    let fake = g.add(scaled, offset);
    let dp = g.bind(disc.params(), false);
    let logits = disc.forward(g, &dp, fake, xn, &times);
    let neg = g.scale(logits, -1.0);
    let sp = g.softplus(neg);
    let loss = g.mean(sp);
    Ok((p, loss))
}

/// Non-saturating generator loss `mean softplus(−D(x̂_t, x_{t+k}))`.
pub fn loss_generator<G, D>(gen: &G, disc: &D, schedule: &DiffusionSchedule, batch: &TrainBatch) -> Result<f64>
where
    G: Generator + ?Sized,
    D: Discriminator + ?Sized,
{
    let mut g = Graph::new();
    let (_, loss) = generator_objective(gen, disc, schedule, batch, &mut g)?;
    Ok(g.value(loss).item())
}

/// Generator loss and its gradient with respect to the generator parameters only.
pub fn generator_gradients<G, D>(
    gen: &G,
    disc: &D,
    schedule: &DiffusionSchedule,
    batch: &TrainBatch,
) -> Result<(f64, Vec<Tensor>)>
where
    G: Generator + ?Sized,
    D: Discriminator + ?Sized,
{
    let mut g = Graph::new();
    let (p, loss) = generator_objective(gen, disc, schedule, batch, &mut g)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss).collect(&p, gen.params());
    Ok((value, grads))
}

/// Mean absolute error between the generator's clean estimate and `x0`, and its gradient.
pub fn l1_gradients<G: Generator + ?Sized>(
    gen: &G,
    schedule: &DiffusionSchedule,
    batch: &TrainBatch,
) -> Result<(f64, Vec<Tensor>)> {
    batch.validate(schedule, gen.z_dim())?;
    let (_, x_next) = batch.pairs(schedule)?;
    let times = batch.next_times(schedule);
    let mut g = Graph::new();
    let p = g.bind(gen.params(), true);
    let xn = g.constant(x_next);
    let z = g.constant(batch.z.clone());
    let out = gen.forward(&mut g, &p, xn, &times, z);
    let diff = g.value(out).zip_map(&batch.x0, |a, b| a - b);
    let count = diff.len() as f64;
    let value = diff.data().iter().map(|d| d.abs()).sum::<f64>() / count;
    let seed = diff.map(|d| d.signum() * f64::from(d != 0.0) / count);
    let grads = g.backward_with(out, seed).collect(&p, gen.params());
    Ok((value, grads))
}
