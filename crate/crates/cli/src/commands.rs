use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adadiff_core::mapper::{EpochStats, Prior};
use adadiff_core::metrics::{magnitude_scores, MetricReport, SliceScore};
use adadiff_core::operator::{make_coil_maps, make_mask, CoilMaps, ImagingOperator, KSpace};
use adadiff_core::phantom::{make_dataset, simulate_acquisition, Contrast, Dataset, SliceEntry, Split, SubjectEntry};
use adadiff_core::recon::{reconstruct, ReconConfig, ReconResult, Variant, X_FIN_FILE};
use adadiff_core::rng::derive_seed;
use adadiff_core::{ComplexImage, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainVariant};
use crate::export::{save_magnitude_png, save_mask_png};

pub const PRIOR_FILE: &str = "prior.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const RECON_INDEX: &str = "recon.json";
pub const PNG_INIT: &str = "xinit.png";
pub const PNG_FIN: &str = "xfin.png";
pub const PNG_REF: &str = "reference.png";

const COIL_TAG: u64 = 0x636f_696c;

/// Settings shared by every command after config resolution.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out_flag: Option<&Path>, workers: Option<usize>, reproducible: bool) -> Result<Self> {
        let out = cfg.output_root(out_flag);
        let workers = if reproducible {
            1
        } else {
            workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        };
        if workers == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        Ok(Self { cfg, out, pool })
    }

    fn dataset(&self) -> Result<Dataset> {
        Dataset::open(&self.cfg.dataset_dir(&self.out))
    }

    pub fn prior_dir(&self, variant: TrainVariant) -> PathBuf {
        self.out.join(format!("prior-{}", variant.name()))
    }
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let d = &ctx.cfg.data;
    let dir = ctx.cfg.dataset_dir(&ctx.out);
    let manifest = make_dataset(d.subjects, &d.contrasts, (d.size, d.size), d.slices_per_subject, d.seed, &dir)?;
    ctx.cfg.echo(&dir)?;
    eprintln!("wrote {} slices to {}", manifest.slice_count(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct MaskInfo {
    shape: [usize; 2],
    accel: f64,
    kind: adadiff_core::operator::MaskKind,
    sampled: usize,
    sampled_fraction: f64,
    calibration: [usize; 2],
    seed: u64,
}

pub fn mask(ctx: &Context) -> Result<()> {
    let o = &ctx.cfg.operator;
    let s = ctx.cfg.data.size;
    let m = make_mask((s, s), o.accel, o.mask, o.calib_fraction, o.seed)?;
    let dir = ctx.out.join("mask");
    ctx.cfg.echo(&dir)?;
    save_mask_png(&dir.join("mask.png"), m.pattern(), m.shape())?;
    let (ch, cw) = m.calib_region();
    let info = MaskInfo {
        shape: [s, s],
        accel: m.accel(),
        kind: m.kind(),
        sampled: m.sampled_count(),
        sampled_fraction: m.sampled_fraction(),
        calibration: [ch, cw],
        seed: o.seed,
    };
    fs::write(dir.join("mask.json"), serde_json::to_string_pretty(&info).expect("serializes") + "\n")?;
    eprintln!("mask with {} samples written to {}", m.sampled_count(), dir.display());
    Ok(())
}

fn trace_csv(trace: &[EpochStats]) -> String {
    let mut s = String::from("epoch,generator,discriminator,real,fake,penalty,l1\n");
    for e in trace {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.generator, e.discriminator, e.real, e.fake, e.penalty, e.l1
        );
    }
    s
}

/// Trains (or resumes) the prior of `variant` into `dir`.
fn train_into(ctx: &Context, data: &Dataset, variant: TrainVariant, dir: &Path, resume: bool) -> Result<Prior> {
    let cfg = &ctx.cfg;
    let schedule = cfg.schedule.build()?;
    let mapper = variant.mapper_config(&cfg.mapper);
    let path = dir.join(PRIOR_FILE);
    let mut prior = if resume && path.exists() {
        let p = Prior::load(&path)?;
        let same = adadiff_core::mapper::MapperConfig {
            epochs: mapper.epochs,
            ..p.config.clone()
        } == mapper;
        if !same || p.schedule != schedule || p.meta.mode != variant.mode() || p.meta.seed != cfg.train.seed {
            return Err(Error::Config(format!(
                "{} was trained with different settings; only the epoch count may change on resume",
                path.display()
            )));
        }
        eprintln!("resuming {} at epoch {}", path.display(), p.meta.epochs_completed);
        p
    } else {
        Prior::new(mapper.clone(), schedule, variant.mode(), cfg.train.seed)?
    };
    prior.config.epochs = mapper.epochs;
    let images = data.load_split(Split::Train)?;
    let start = Instant::now();
    prior.train_until(&images, mapper.epochs, &mut |s| {
        eprintln!(
            "[{}] epoch {} G {:.4} D {:.4} l1 {:.4} ({:.0}s)",
            variant.name(),
            s.epoch,
            s.generator,
            s.discriminator,
            s.l1,
            start.elapsed().as_secs_f64()
        )
    })?;
    fs::create_dir_all(dir)?;
    prior.save(&path)?;
    fs::write(dir.join(TRACE_FILE), trace_csv(&prior.meta.trace))?;
    ctx.cfg.echo(dir)?;
    Ok(prior)
}

pub fn train(ctx: &Context, resume: bool) -> Result<()> {
    let data = ctx.dataset()?;
    let variant = ctx.cfg.train.variant;
    let dir = ctx.prior_dir(variant);
    train_into(ctx, &data, variant, &dir, resume)?;
    eprintln!("prior written to {}", dir.join(PRIOR_FILE).display());
    Ok(())
}

fn contrast_index(c: Contrast) -> u64 {
    Contrast::ALL.iter().position(|&x| x == c).expect("known contrast") as u64
}

/// Operator and simulated acquisition of one slice; both are seeded by the
/// slice identity so every command sees the same measurement.
pub fn acquire(cfg: &ExperimentConfig, subject: &SubjectEntry, entry: &SliceEntry, x: &ComplexImage) -> Result<(ImagingOperator, KSpace)> {
    let o = &cfg.operator;
    let key = [subject.seed, entry.slice as u64, contrast_index(entry.contrast)];
    let mask = make_mask(x.shape(), o.accel, o.mask, o.calib_fraction, derive_seed(o.seed, &key))?;
    let coils = if o.coils == 1 {
        CoilMaps::unit(x.height(), x.width())
    } else {
        make_coil_maps(x.shape(), o.coils, derive_seed(o.seed, &[COIL_TAG, subject.seed]))?
    };
    let op = ImagingOperator::new(mask, coils)?;
    let y = simulate_acquisition(x, &op, cfg.data.noise_sigma, derive_seed(cfg.data.seed, &key))?;
    Ok((op, y))
}

fn slice_dir(entry: &SliceEntry) -> PathBuf {
    Path::new(&entry.file).with_extension("")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconIndex {
    split: Split,
    variant: Variant,
    slices: usize,
}

/// Reconstructs every slice of `split` into `dir` and scores `x_fin` against
/// the reference.
fn reconstruct_split(
    ctx: &Context,
    data: &Dataset,
    split: Split,
    prior: &Prior,
    recon: &ReconConfig,
    dir: &Path,
    method: &str,
) -> Result<Vec<SliceScore>> {
    let schedule = ctx.cfg.schedule.build()?;
    if prior.schedule != schedule {
        return Err(Error::Config(
            "the prior was trained against a different diffusion schedule than the one configured".into(),
        ));
    }
    let slices = data.manifest().split_slices(split);
    if slices.is_empty() {
        return Err(Error::Data(format!("the {split:?} split is empty")));
    }
    fs::create_dir_all(dir)?;
    ctx.cfg.echo(dir)?;
    let index = ReconIndex {
        split,
        variant: recon.variant,
        slices: slices.len(),
    };
    fs::write(dir.join(RECON_INDEX), serde_json::to_string_pretty(&index).expect("serializes") + "\n")?;
    let start = Instant::now();
    let results: Vec<Result<SliceScore>> = ctx.pool.install(|| {
        slices
            .par_iter()
            .map(|(subject, entry)| {
                let x = data.load(entry)?;
                let (op, y) = acquire(&ctx.cfg, subject, entry, &x)?;
                let cfg = ReconConfig {
                    seed: derive_seed(recon.seed, &[subject.seed, entry.slice as u64, contrast_index(entry.contrast)]),
                    ..recon.clone()
                };
                let r = reconstruct(prior, &y, &op, &cfg)?;
                let out = dir.join(slice_dir(entry));
                r.save(&out)?;
                save_magnitude_png(&out.join(PNG_INIT), &r.x_init)?;
                save_magnitude_png(&out.join(PNG_FIN), &r.x_fin)?;
                save_magnitude_png(&out.join(PNG_REF), &x)?;
                let (psnr, ssim) = magnitude_scores(&x, &r.x_fin)?;
                eprintln!(
                    "[{method}] {} PSNR {psnr:.2} dB SSIM {:.2}% ({:.1}s)",
                    entry.file,
                    100.0 * ssim,
                    r.wall_time_seconds
                );
                Ok(SliceScore {
                    method: method.to_string(),
                    contrast: entry.contrast,
                    subject: subject.id,
                    slice: entry.slice,
                    psnr,
                    ssim,
                })
            })
            .collect()
    });
    eprintln!("[{method}] {} slices in {:.0}s", slices.len(), start.elapsed().as_secs_f64());
    results.into_iter().collect()
}

pub fn reconstruct_cmd(ctx: &Context, prior_path: Option<&Path>, split: Split) -> Result<()> {
    let data = ctx.dataset()?;
    let default = ctx.prior_dir(ctx.cfg.train.variant).join(PRIOR_FILE);
    let prior = Prior::load(prior_path.unwrap_or(&default))?;
    let variant = ctx.cfg.recon.variant;
    let dir = ctx.out.join(format!("recon-{variant}"));
    reconstruct_split(ctx, &data, split, &prior, &ctx.cfg.recon, &dir, &variant.to_string())?;
    eprintln!("reconstructions written to {}", dir.display());
    Ok(())
}

fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    fs::write(dir.join("scores.csv"), report.scores_csv())?;
    fs::write(dir.join("comparisons.csv"), report.comparisons_csv())?;
    fs::write(dir.join("report.json"), report.to_json())?;
    Ok(())
}

fn print_summary(report: &MetricReport) {
    println!("method,contrast,samples,psnr_mean,psnr_std,ssim_mean_pct,ssim_std_pct");
    for s in &report.summaries {
        println!(
            "{},{},{},{:.2},{:.2},{:.2},{:.2}",
            s.method,
            s.contrast,
            s.samples,
            s.psnr_mean,
            s.psnr_std,
            100.0 * s.ssim_mean,
            100.0 * s.ssim_std
        );
    }
}

pub fn eval(ctx: &Context, recon_dirs: &[PathBuf]) -> Result<()> {
    let data = ctx.dataset()?;
    let mut scores = Vec::new();
    for dir in recon_dirs {
        let index_path = dir.join(RECON_INDEX);
        let text = fs::read_to_string(&index_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", index_path.display())))?;
        let index: ReconIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed {}: {e}", index_path.display())))?;
        let method = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| index.variant.to_string());
        for (subject, entry) in data.manifest().split_slices(index.split) {
            let x = data.load(entry)?;
            let r = ReconResult::load(&dir.join(slice_dir(entry)))
                .map_err(|e| Error::Data(format!("{}: {e}", dir.join(slice_dir(entry)).join(X_FIN_FILE).display())))?;
            let (psnr, ssim) = magnitude_scores(&x, &r.x_fin)?;
            scores.push(SliceScore {
                method: method.clone(),
                contrast: entry.contrast,
                subject: subject.id,
                slice: entry.slice,
                psnr,
                ssim,
            });
        }
    }
    let report = MetricReport::build(scores, ctx.cfg.metrics.aggregation);
    let out = ctx.out.join("eval");
    ctx.cfg.echo(&out)?;
    write_report(&report, &out)?;
    print_summary(&report);
    Ok(())
}

/// Reconstruction variants compared by `ablate`: method name, prior, recon variant.
pub const ABLATIONS: [(&str, TrainVariant, Variant); 5] = [
    ("full", TrainVariant::Adversarial, Variant::Full),
    ("no_adapt", TrainVariant::Adversarial, Variant::NoAdapt),
    ("no_train", TrainVariant::Adversarial, Variant::NoTrain),
    ("l1", TrainVariant::L1, Variant::Full),
    ("no_z", TrainVariant::NoZ, Variant::Full),
];

pub fn ablate(ctx: &Context, priors: Option<&Path>, split: Split) -> Result<()> {
    let data = ctx.dataset()?;
    let root = ctx.out.join("ablate");
    ctx.cfg.echo(&root)?;
    let mut trained: Vec<(TrainVariant, Prior)> = Vec::new();
    for v in TrainVariant::ALL {
        let supplied = priors.map(|d| d.join(format!("prior-{}", v.name())).join(PRIOR_FILE));
        let prior = match supplied {
            Some(p) if p.exists() => Prior::load(&p)?,
            _ => train_into(ctx, &data, v, &root.join(format!("prior-{}", v.name())), false)?,
        };
        trained.push((v, prior));
    }
    let mut scores = Vec::new();
    for (method, tv, variant) in ABLATIONS {
        let prior = &trained.iter().find(|(v, _)| *v == tv).expect("all priors trained").1;
        let recon = ReconConfig {
            variant,
            ..ctx.cfg.recon.clone()
        };
        scores.extend(reconstruct_split(ctx, &data, split, prior, &recon, &root.join(method), method)?);
    }
    let report = MetricReport::build(scores, ctx.cfg.metrics.aggregation);
    write_report(&report, &root)?;
    print_summary(&report);
    Ok(())
}
