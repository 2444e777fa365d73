//! Two-phase reconstruction: rapid diffusion with interleaved data-consistency
//! projections, then per-slice adaptation of the generator to the acquired
//! k-space.

use std::fs;
use std::path::Path;
use std::time::Instant;

use adadiff_tape::{Adam, Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, data, Error, Result};
use crate::image::ComplexImage;
use crate::mapper::{run_generator, Generator, Prior, UNetGenerator};
use crate::operator::{ImagingOperator, KSpace};
use crate::phantom::{read_slice, write_slice};
use crate::rng;
use crate::schedule::{sample_posterior, DiffusionSchedule};

pub const RESULT_FORMAT: &str = "adadiff-recon-v1";

const RAPID_TAG: u64 = 0x7261_7069;
const ADAPT_TAG: u64 = 0x6164_6170;
const INIT_TAG: u64 = 0x696e_6974;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Rapid diffusion followed by prior adaptation.
    #[default]
    Full,
    /// Rapid diffusion only.
    NoAdapt,
    /// Adaptation of a randomly initialised generator, starting from the zero-filled image.
    NoTrain,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoAdapt => "no_adapt",
            Variant::NoTrain => "no_train",
        })
    }
}

/// How latents are drawn within a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentPolicy {
    /// One seeded draw reused for the whole phase.
    Fixed,
    /// A new seeded draw per reverse step or per iteration.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    /// Adaptation iterations `J`.
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub variant: Variant,
    pub seed: u64,
    pub rapid_latent: LatentPolicy,
    pub adapt_latent: LatentPolicy,
    /// Keep the adapted generator parameters in the result.
    pub keep_params: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            variant: Variant::Full,
            seed: 0,
            rapid_latent: LatentPolicy::Fresh,
            adapt_latent: LatentPolicy::Fixed,
            keep_params: false,
        }
    }
}

impl ReconConfig {
    pub fn paper() -> Self {
        Self {
            iterations: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2);
        if !ok {
            return Err(config("recon learning rate must be positive and Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Work actually performed, counted as it happens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub dc_projections: usize,
    pub reverse_steps: usize,
    pub adaptation_updates: usize,
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub x_init: ComplexImage,
    pub x_fin: ComplexImage,
    /// `dc_loss_trace[i]` is the loss evaluated before update `i`.
    pub dc_loss_trace: Vec<f64>,
    pub adapted_params: Option<ParamStore>,
    pub wall_time_seconds: f64,
    pub counts: PhaseCounts,
    pub config: ReconConfig,
}

/// Output of [`adapt_prior`].
#[derive(Clone, Debug)]
pub struct Adapted {
    pub x_fin: ComplexImage,
    pub dc_loss_trace: Vec<f64>,
    pub params: ParamStore,
}

fn check_operator(op: &ImagingOperator, y: &KSpace, size: (usize, usize)) -> Result<()> {
    if op.shape() != size {
        return Err(config(format!(
            "operator shape {:?} does not match the prior's image size {size:?}",
            op.shape()
        )));
    }
    let (c, h, w) = y.shape();
    if (c, (h, w)) != (op.num_coils(), op.shape()) {
        return Err(config(format!(
            "k-space {:?} does not match the operator ({} coils, {:?})",
            y.shape(),
            op.num_coils(),
            op.shape()
        )));
    }
    Ok(())
}

fn latent(seed: u64, tags: &[u64], z_dim: usize) -> Tensor {
    rng::gaussian_tensor(&mut rng::stream(seed, tags), &[1, z_dim])
}

/// Starts from unit Gaussian noise at step `T/k` and, for `r = T/k … 1`,
/// projects onto the acquired data, predicts the clean image at step `r` and
/// samples step `r − 1` from the posterior. The last sample is returned
/// without a trailing projection.
pub fn rapid_diffusion<G: Generator + ?Sized>(
    gen: &G,
    schedule: &DiffusionSchedule,
    y: &KSpace,
    op: &ImagingOperator,
    seed: u64,
    policy: LatentPolicy,
    counts: &mut PhaseCounts,
) -> Result<ComplexImage> {
    check_operator(op, y, op.shape())?;
    let (h, w) = op.shape();
    let steps = schedule.steps();
    let mut x = rng::gaussian_tensor(&mut rng::stream(seed, &[RAPID_TAG]), &[1, 2, h, w]);
    let fixed_z = latent(seed, &[RAPID_TAG, u64::MAX], gen.z_dim());
    for r in (1..=steps).rev() {
        let projected = op.dc_projection(&ComplexImage::from_tensor(&x)?, y)?.to_tensor();
        counts.dc_projections += 1;
        let mut s = rng::stream(seed, &[RAPID_TAG, r as u64]);
        let z = match policy {
            LatentPolicy::Fresh => rng::gaussian_tensor(&mut s, &[1, gen.z_dim()]),
            LatentPolicy::Fixed => fixed_z.clone(),
        };
        let x0 = run_generator(gen, &projected, &[schedule.time_index(r)], &z);
        if x0.shape() != projected.shape() {
            return Err(config(format!(
                "generator returned {:?} for a {:?} input",
                x0.shape(),
                projected.shape()
            )));
        }
        let (mean, var) = schedule.posterior_params(&x0, &projected, r - 1)?;
        let noise = rng::gaussian_tensor(&mut s, &[1, 2, h, w]);
        x = sample_posterior(&mean, var, &noise)?;
        counts.reverse_steps += 1;
    }
    ComplexImage::from_tensor(&x)
}

/// Adapts a working copy of the generator to minimise the ℓ1 data-consistency
/// loss of `G(x_init, 0, z)` by Adam, holding `x_init` fixed. The generator
/// passed in is not modified.
pub fn adapt_prior<G: Generator + Clone>(
    gen: &G,
    x_init: &ComplexImage,
    y: &KSpace,
    op: &ImagingOperator,
    cfg: &ReconConfig,
    counts: &mut PhaseCounts,
) -> Result<Adapted> {
    cfg.validate()?;
    check_operator(op, y, x_init.shape())?;
    let mut work = gen.clone();
    let mut opt = Adam::new(work.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let input = x_init.to_tensor();
    let fixed_z = latent(cfg.seed, &[ADAPT_TAG], gen.z_dim());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let z = match cfg.adapt_latent {
            LatentPolicy::Fixed => fixed_z.clone(),
            LatentPolicy::Fresh => latent(cfg.seed, &[ADAPT_TAG, i as u64], gen.z_dim()),
        };
        let mut g = Graph::new();
        let p = g.bind(work.params(), true);
        let xv = g.constant(input.clone());
        let zv = g.constant(z);
        let out = work.forward(&mut g, &p, xv, &[0], zv);
        let estimate = ComplexImage::from_tensor(g.value(out))?;
        let (loss, grad) = op.dc_loss_grad(&estimate, y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "adaptation",
                unit: "iteration",
                index: i,
            });
        }
        trace.push(loss);
        let grads = g.backward_with(out, grad.to_tensor()).collect(&p, work.params());
        opt.step(work.params_mut(), &grads);
        counts.adaptation_updates += 1;
    }
    let z = match cfg.adapt_latent {
        LatentPolicy::Fixed => fixed_z,
        LatentPolicy::Fresh => latent(cfg.seed, &[ADAPT_TAG, cfg.iterations as u64], gen.z_dim()),
    };
    let x_fin = ComplexImage::from_tensor(&run_generator(&work, &input, &[0], &z))?;
    if x_fin.data().iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Divergence {
            stage: "adaptation",
            unit: "iteration",
            index: cfg.iterations,
        });
    }
    Ok(Adapted {
        x_fin,
        dc_loss_trace: trace,
        params: work.params().clone(),
    })
}

/// Runs the configured variant for one slice.
pub fn reconstruct(prior: &Prior, y: &KSpace, op: &ImagingOperator, cfg: &ReconConfig) -> Result<ReconResult> {
    cfg.validate()?;
    let s = prior.image_size();
    check_operator(op, y, (s, s))?;
    let start = Instant::now();
    let mut counts = PhaseCounts::default();
    let rapid = |counts: &mut PhaseCounts| {
        rapid_diffusion(&prior.generator, &prior.schedule, y, op, cfg.seed, cfg.rapid_latent, counts)
    };
    let (x_init, adapted) = match cfg.variant {
        Variant::Full => {
            let x_init = rapid(&mut counts)?;
            let adapted = adapt_prior(&prior.generator, &x_init, y, op, cfg, &mut counts)?;
            (x_init, Some(adapted))
        }
        Variant::NoAdapt => (rapid(&mut counts)?, None),
        Variant::NoTrain => {
            let fresh = UNetGenerator::new(&prior.config, rng::derive_seed(cfg.seed, &[INIT_TAG]));
            let x_init = op.zero_filled(y)?;
            let adapted = adapt_prior(&fresh, &x_init, y, op, cfg, &mut counts)?;
            (x_init, Some(adapted))
        }
    };
    let (x_fin, trace, params) = match adapted {
        Some(a) => (a.x_fin, a.dc_loss_trace, cfg.keep_params.then_some(a.params)),
        None => (x_init.clone(), Vec::new(), None),
    };
    Ok(ReconResult {
        x_init,
        x_fin,
        dc_loss_trace: trace,
        adapted_params: params,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        counts,
        config: cfg.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultFile {
    format: String,
    shape: [usize; 2],
    config: ReconConfig,
    counts: PhaseCounts,
    dc_loss_trace: Vec<f64>,
}

pub const X_INIT_FILE: &str = "xinit.cfl";
pub const X_FIN_FILE: &str = "xfin.cfl";
pub const RESULT_FILE: &str = "result.json";

impl ReconResult {
    /// Writes the images (dataset slice format), the loss trace, the config
    /// and the phase counts. Wall time is left out so that reruns are
    /// byte-identical.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_slice(&dir.join(X_INIT_FILE), &self.x_init)?;
        write_slice(&dir.join(X_FIN_FILE), &self.x_fin)?;
        let file = ResultFile {
            format: RESULT_FORMAT.into(),
            shape: [self.x_fin.height(), self.x_fin.width()],
            config: self.config.clone(),
            counts: self.counts,
            dc_loss_trace: self.dc_loss_trace.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("result serializes");
        fs::write(dir.join(RESULT_FILE), json + "\n")?;
        Ok(())
    }

    /// Reads an archive written by [`ReconResult::save`]. Images come back at
    /// single precision; adapted parameters and wall time are not stored.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
        let file: ResultFile =
            serde_json::from_str(&text).map_err(|e| data(format!("malformed {}: {e}", path.display())))?;
        if file.format != RESULT_FORMAT {
            return Err(data(format!("{} is not a {RESULT_FORMAT} archive", path.display())));
        }
        let shape = (file.shape[0], file.shape[1]);
        Ok(Self {
            x_init: read_slice(&dir.join(X_INIT_FILE), shape)?,
            x_fin: read_slice(&dir.join(X_FIN_FILE), shape)?,
            dc_loss_trace: file.dc_loss_trace,
            adapted_params: None,
            wall_time_seconds: 0.0,
            counts: file.counts,
            config: file.config,
        })
    }
}
