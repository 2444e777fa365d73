//! Multi-contrast elliptical head phantoms and k-space acquisition simulation.
//!
//! A subject is a set of ellipsoids; a slice cuts them at an axial position so
//! the in-plane ellipses shrink or vanish away from their centers. Geometry is
//! drawn from a contrast-independent stream, tissue intensities from per-contrast
//! streams, so every contrast of one seed shares exactly the same support.

mod dataset;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    make_dataset, read_slice, write_slice, Dataset, DatasetManifest, SliceEntry, Split, SubjectEntry, DATASET_VERSION,
    MANIFEST_FILE,
};

use crate::error::{config, Result};
use crate::image::ComplexImage;
use crate::operator::{ImagingOperator, KSpace};
use crate::rng;

pub const MIN_PHANTOM_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T1,
    T2,
    PD,
}

impl Contrast {
    pub const ALL: [Contrast; 3] = [Contrast::T1, Contrast::T2, Contrast::PD];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Contrast::T1 => "T1",
            Contrast::T2 => "T2",
            Contrast::PD => "PD",
        })
    }
}

impl FromStr for Contrast {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Contrast::T1),
            "T2" => Ok(Contrast::T2),
            "PD" => Ok(Contrast::PD),
            other => Err(config(format!("unknown contrast {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tissue {
    Scalp,
    GrayMatter,
    WhiteMatter,
    Csf,
    Lesion,
}

impl Tissue {
    /// Intensity range per contrast (T1, T2, PD). Within a contrast the ranges
    /// of different tissues do not overlap.
    pub fn intensity_range(self, contrast: Contrast) -> (f64, f64) {
        const TABLE: [[(f64, f64); 3]; 5] = [
            [(0.90, 1.00), (0.50, 0.60), (0.60, 0.70)],
            [(0.45, 0.55), (0.65, 0.75), (0.88, 0.98)],
            [(0.70, 0.80), (0.30, 0.40), (0.46, 0.56)],
            [(0.05, 0.15), (0.90, 1.00), (0.74, 0.84)],
            [(0.25, 0.35), (0.78, 0.88), (0.32, 0.42)],
        ];
        TABLE[self as usize][contrast.index()]
    }
}

/// Ellipsoid in normalized coordinates (`[-1, 1]` across the field of view).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
    /// Axial center and half-depth of the ellipsoid.
    pub depth: (f64, f64),
    pub tissue: Tissue,
    /// Intensity for T1, T2, PD.
    pub intensity: [f64; 3],
}

impl Ellipse {
    /// In-plane scale of the cross-section at axial position `z`, if it exists.
    fn section_scale(&self, z: f64) -> Option<f64> {
        let u = (z - self.depth.0) / self.depth.1;
        (u.abs() < 1.0).then(|| (1.0 - u * u).sqrt())
    }

    fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = (self.axes.0 * scale, self.axes.1 * scale);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: ComplexImage,
    pub contrast: Contrast,
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
    /// Index of the ellipse painted last at each pixel, `-1` for background.
    pub labels: Vec<i32>,
}

impl Phantom {
    /// Pixels inside the head.
    pub fn support(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l >= 0).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Subject geometry: outer scalp, brain, and 8–15 interior ellipsoids.
fn subject_geometry(seed: u64) -> (Vec<Ellipse>, [f64; 6]) {
    let mut g = rng::stream(seed, &[0x6765_6f6d]);
    let mut ellipses = Vec::new();
    let head = (uniform(&mut g, 0.80, 0.90), uniform(&mut g, 0.68, 0.78));
    let head_center = (uniform(&mut g, -0.04, 0.04), uniform(&mut g, -0.04, 0.04));
    let head_angle = uniform(&mut g, -0.15, 0.15);
    let thickness = uniform(&mut g, 0.06, 0.10);
    ellipses.push(Ellipse {
        center: head_center,
        axes: (head.1, head.0),
        angle: head_angle,
        depth: (0.0, 1.6),
        tissue: Tissue::Scalp,
        intensity: [0.0; 3],
    });
    ellipses.push(Ellipse {
        center: head_center,
        axes: (head.1 - thickness, head.0 - thickness),
        angle: head_angle,
        depth: (0.0, 1.5),
        tissue: Tissue::GrayMatter,
        intensity: [0.0; 3],
    });
    let count = g.random_range(8..=15);
    let interior = [
        (Tissue::WhiteMatter, 0.40),
        (Tissue::Csf, 0.25),
        (Tissue::GrayMatter, 0.20),
        (Tissue::Lesion, 0.15),
    ];
    for _ in 0..count {
        let pick = uniform(&mut g, 0.0, 1.0);
        let mut acc = 0.0;
        let mut tissue = Tissue::WhiteMatter;
        for (t, p) in interior {
            acc += p;
            if pick < acc {
                tissue = t;
                break;
            }
        }
        let radius = uniform(&mut g, 0.0, 0.55);
        let phi = uniform(&mut g, 0.0, 2.0 * PI);
        let max_axis = match tissue {
            Tissue::Lesion => 0.10,
            Tissue::Csf => 0.20,
            _ => 0.32,
        };
        ellipses.push(Ellipse {
            center: (
                head_center.0 + radius * (head.0 - thickness) * phi.sin(),
                head_center.1 + radius * (head.1 - thickness) * phi.cos(),
            ),
            axes: (uniform(&mut g, 0.04, max_axis), uniform(&mut g, 0.04, max_axis)),
            angle: uniform(&mut g, 0.0, PI),
            depth: (uniform(&mut g, -0.6, 0.6), uniform(&mut g, 0.4, 1.2)),
            tissue,
            intensity: [0.0; 3],
        });
    }
    let phase = [
        uniform(&mut g, -PI, PI),
        uniform(&mut g, -0.8, 0.8),
        uniform(&mut g, -0.8, 0.8),
        uniform(&mut g, -0.4, 0.4),
        uniform(&mut g, -0.4, 0.4),
        uniform(&mut g, -0.4, 0.4),
    ];
    for (idx, e) in ellipses.iter_mut().enumerate() {
        for contrast in Contrast::ALL {
            let mut s = rng::stream(seed, &[0x696e_7465, contrast.index() as u64, idx as u64]);
            let (lo, hi) = e.tissue.intensity_range(contrast);
            e.intensity[contrast.index()] = uniform(&mut s, lo, hi);
        }
    }
    (ellipses, phase)
}

/// Central slice of the subject generated from `seed`.
pub fn make_phantom(contrast: Contrast, shape: (usize, usize), seed: u64) -> Result<Phantom> {
    make_phantom_slice(contrast, shape, seed, 0.0)
}

/// Cross-section at axial position `z` (roughly `[-0.5, 0.5]` spans the brain).
pub fn make_phantom_slice(contrast: Contrast, shape: (usize, usize), seed: u64, z: f64) -> Result<Phantom> {
    let (h, w) = shape;
    if h < MIN_PHANTOM_SIZE || w < MIN_PHANTOM_SIZE {
        return Err(config(format!(
            "phantom shape {h}x{w} is below the {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE} minimum"
        )));
    }
    let (ellipses, phase) = subject_geometry(seed);
    let scales: Vec<Option<f64>> = ellipses.iter().map(|e| e.section_scale(z)).collect();
    let mut labels = vec![-1i32; h * w];
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
            let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            let mut label = -1;
            for (idx, (e, s)) in ellipses.iter().zip(&scales).enumerate() {
                if let Some(s) = s {
                    if e.contains(y, x, *s) {
                        label = idx as i32;
                    }
                }
            }
            labels[i * w + j] = label;
            if label >= 0 {
                let mag = ellipses[label as usize].intensity[contrast.index()].clamp(0.0, 1.0);
                let ph = phase[0]
                    + phase[1] * x
                    + phase[2] * y
                    + phase[3] * x * y
                    + phase[4] * x * x
                    + phase[5] * y * y;
                data[i * w + j] = Complex64::from_polar(mag, ph);
            }
        }
    }
    Ok(Phantom {
        image: ComplexImage::from_vec(h, w, data)?,
        contrast,
        seed,
        ellipses,
        labels,
    })
}

/// `y = A·x + σ·n` with independent `N(0, σ²)` real and imaginary noise on the
/// acquired entries.
pub fn simulate_acquisition(x: &ComplexImage, op: &ImagingOperator, noise_sigma: f64, seed: u64) -> Result<KSpace> {
    if !(noise_sigma >= 0.0) {
        return Err(config(format!("noise level must be non-negative, got {noise_sigma}")));
    }
    let mut y = op.apply(x)?;
    if noise_sigma > 0.0 {
        let mut r = rng::stream(seed, &[0x6e6f_6973]);
        let (_, h, w) = y.shape();
        let hw = h * w;
        let mask = op.mask().pattern().to_vec();
        for (idx, v) in y.data_mut().iter_mut().enumerate() {
            if mask[idx % hw] {
                let n = rng::gaussian_vec(&mut r, 2);
                *v += Complex64::new(noise_sigma * n[0], noise_sigma * n[1]);
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrasts_share_geometry() {
        for seed in 0..10 {
            let a = make_phantom(Contrast::T1, (48, 48), seed).unwrap();
            let b = make_phantom(Contrast::T2, (48, 48), seed).unwrap();
            let c = make_phantom(Contrast::PD, (48, 48), seed).unwrap();
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.labels, c.labels);
            assert_ne!(a.image, b.image);
        }
    }

    #[test]
    fn magnitudes_stay_in_unit_interval() {
        for seed in 0..1000 {
            let contrast = Contrast::ALL[(seed % 3) as usize];
            let p = make_phantom(contrast, (32, 32), seed).unwrap();
            assert!(p.image.magnitude().iter().all(|&m| (0.0..=1.0).contains(&m)));
        }
    }

    #[test]
    fn interior_ellipse_count() {
        for seed in 0..50 {
            let p = make_phantom(Contrast::T1, (32, 32), seed).unwrap();
            let interior = p.ellipses.len() - 2;
            assert!((8..=15).contains(&interior));
        }
    }

    #[test]
    fn contrast_intensities_are_separated() {
        let mut total = [0.0; 3];
        for seed in 0..100 {
            let imgs: Vec<Vec<f64>> = Contrast::ALL
                .iter()
                .map(|&c| make_phantom(c, (32, 32), seed).unwrap().image.magnitude())
                .collect();
            let support = make_phantom(Contrast::T1, (32, 32), seed).unwrap().support();
            let n = support.iter().filter(|&&s| s).count() as f64;
            for (k, (a, b)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                let diff: f64 = (0..support.len())
                    .filter(|&p| support[p])
                    .map(|p| (imgs[a][p] - imgs[b][p]).abs())
                    .sum();
                total[k] += diff / n;
            }
        }
        for t in total {
            assert!(t / 100.0 > 0.1, "mean separation {}", t / 100.0);
        }
    }

    #[test]
    fn phase_is_smooth() {
        let p = make_phantom(Contrast::PD, (64, 64), 3).unwrap();
        let d = p.image.data();
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            for j in 0..63 {
                let (a, b) = (d[i * 64 + j], d[i * 64 + j + 1]);
                if a.norm() > 0.0 && b.norm() > 0.0 {
                    worst = worst.max((b / a).arg().abs());
                }
            }
        }
        assert!(worst < 0.2, "phase step {worst}");
    }

    #[test]
    fn rejects_small_shapes() {
        assert!(matches!(make_phantom(Contrast::T1, (16, 64), 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn parses_contrast_labels() {
        assert_eq!("pd".parse::<Contrast>().unwrap(), Contrast::PD);
        assert!("flair".parse::<Contrast>().is_err());
    }

    fn acquisition_operator(mask: crate::operator::Mask) -> ImagingOperator {
        ImagingOperator::new(mask, crate::operator::CoilMaps::unit(64, 64)).unwrap()
    }

    #[test]
    fn noiseless_acquisition_is_the_forward_operator() {
        let x = make_phantom(Contrast::T2, (64, 64), 3).unwrap().image;
        let op = acquisition_operator(
            crate::operator::make_mask((64, 64), 4.0, crate::operator::MaskKind::VariableDensity2d, 1.0 / 64.0, 2)
                .unwrap(),
        );
        assert_eq!(simulate_acquisition(&x, &op, 0.0, 9).unwrap(), op.apply(&x).unwrap());
        let empty = acquisition_operator(crate::operator::Mask::empty(64, 64));
        assert!(simulate_acquisition(&x, &empty, 0.01, 9).unwrap().data().iter().all(|v| v.norm() == 0.0));
        assert!(simulate_acquisition(&x, &op, -1.0, 9).is_err());
    }

    #[test]
    fn acquisition_noise_has_the_requested_level() {
        let x = make_phantom(Contrast::PD, (64, 64), 4).unwrap().image;
        let op = acquisition_operator(crate::operator::Mask::full(64, 64));
        let clean = op.apply(&x).unwrap();
        let mut residuals = Vec::new();
        for seed in 0..13 {
            let y = simulate_acquisition(&x, &op, 0.01, seed).unwrap();
            for (a, b) in y.data().iter().zip(clean.data()) {
                let d = a - b;
                residuals.extend([d.re, d.im]);
            }
        }
        assert!(residuals.len() >= 100_000);
        let n = residuals.len() as f64;
        let std = (residuals.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((std - 0.01).abs() < 0.05 * 0.01, "{std}");
    }
}
