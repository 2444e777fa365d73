//! Synthetic receive-coil sensitivity maps, normalized so that `Σ_c |B_c|² = 1`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::image::ComplexImage;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoilMaps {
    height: usize,
    width: usize,
    /// `C·H·W` samples, coil-major.
    maps: Vec<Complex64>,
}

impl CoilMaps {
    /// One coil with unit sensitivity everywhere.
    pub fn unit(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            maps: vec![Complex64::new(1.0, 0.0); height * width],
        }
    }

    pub fn from_images(images: &[ComplexImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| config("need at least one coil map"))?;
        let (height, width) = first.shape();
        let mut maps = Vec::with_capacity(images.len() * height * width);
        for img in images {
            if img.shape() != (height, width) {
                return Err(config("coil maps must share one shape"));
            }
            maps.extend_from_slice(img.data());
        }
        Ok(Self { height, width, maps })
    }

    pub fn coils(&self) -> usize {
        self.maps.len() / (self.height * self.width)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let hw = self.height * self.width;
        &self.maps[c * hw..(c + 1) * hw]
    }

    pub fn coil_image(&self, c: usize) -> ComplexImage {
        ComplexImage::from_vec(self.height, self.width, self.coil(c).to_vec()).expect("shape")
    }

    /// `Σ_c |B_c(p)|²` at every pixel.
    pub fn sum_of_squares(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| (0..self.coils()).map(|c| self.maps[c * hw + p].norm_sqr()).sum())
            .collect()
    }
}

/// `C` Gaussian-lobe sensitivities centered at evenly spaced positions near
/// the image border, each with a smooth linear phase ramp.
pub fn make_coil_maps(shape: (usize, usize), coils: usize, seed: u64) -> Result<CoilMaps> {
    let (h, w) = shape;
    if coils == 0 {
        return Err(config("coil count must be at least 1"));
    }
    if h == 0 || w == 0 {
        return Err(config("coil map shape must be non-empty"));
    }
    let mut rng = rng::stream(seed, &[0x636f_696c]);
    let hw = h * w;
    let mut maps = vec![Complex64::new(0.0, 0.0); coils * hw];
    let offset: f64 = rng.random_range(0.0..2.0 * PI);
    for c in 0..coils {
        let theta = offset + 2.0 * PI * c as f64 / coils as f64;
        let (cy, cx) = (0.5 + 0.45 * theta.sin(), 0.5 + 0.45 * theta.cos());
        let width: f64 = rng.random_range(0.3..0.45);
        let ramp_dir: f64 = rng.random_range(0.0..2.0 * PI);
        let ramp_cycles: f64 = rng.random_range(0.05..0.25);
        let phase0: f64 = rng.random_range(-PI..PI);
        for i in 0..h {
            for j in 0..w {
                let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = phase0 + 2.0 * PI * ramp_cycles * (x * ramp_dir.cos() + y * ramp_dir.sin());
                maps[c * hw + i * w + j] = Complex64::from_polar(mag, phase);
            }
        }
    }
    for p in 0..hw {
        let norm = (0..coils).map(|c| maps[c * hw + p].norm_sqr()).sum::<f64>().sqrt();
        for c in 0..coils {
            maps[c * hw + p] /= norm;
        }
    }
    Ok(CoilMaps { height: h, width: w, maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_coil_has_unit_magnitude() {
        let m = make_coil_maps((16, 20), 1, 4).unwrap();
        assert!(m.coil(0).iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sensitivities_are_normalized() {
        for coils in [1, 2, 4, 8] {
            let m = make_coil_maps((32, 32), coils, 17).unwrap();
            assert_eq!(m.coils(), coils);
            assert!(m.sum_of_squares().iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn maps_are_spatially_smooth() {
        let (h, w) = (64, 64);
        for seed in 0..5 {
            let m = make_coil_maps((h, w), 8, seed).unwrap();
            let mut worst: f64 = 0.0;
            for c in 0..m.coils() {
                let b = m.coil(c);
                for i in 0..h {
                    for j in 0..w {
                        if i + 1 < h {
                            worst = worst.max((b[(i + 1) * w + j] - b[i * w + j]).norm());
                        }
                        if j + 1 < w {
                            worst = worst.max((b[i * w + j + 1] - b[i * w + j]).norm());
                        }
                    }
                }
            }
            assert!(worst < 0.2, "seed {seed}: max gradient {worst}");
        }
    }

    #[test]
    fn zero_coils_rejected() {
        assert!(make_coil_maps((8, 8), 0, 0).is_err());
    }
}
