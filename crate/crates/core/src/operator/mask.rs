//! Variable-density random Cartesian undersampling masks.
//!
//! A fully sampled calibration block is always kept. The remaining budget is
//! drawn without replacement with weights from a centered Gaussian density
//! `exp(−d²/2σ²)` (d in normalized k-space units, peak weight 1), where σ is
//! bisected until the expected number of drawn points matches the budget.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Independent k-space points over both phase-encode axes.
    #[serde(rename = "2d")]
    VariableDensity2d,
    /// Whole columns; the density varies along the width axis only.
    #[serde(rename = "1d")]
    VariableDensity1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    pattern: Vec<bool>,
    accel: f64,
    calib: (usize, usize),
    kind: MaskKind,
    sigma: f64,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pattern: vec![true; height * width],
            accel: 1.0,
            calib: (height, width),
            kind: MaskKind::VariableDensity2d,
            sigma: f64::INFINITY,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pattern: vec![false; height * width],
            accel: f64::INFINITY,
            calib: (0, 0),
            kind: MaskKind::VariableDensity2d,
            sigma: 0.0,
        }
    }

    pub fn from_pattern(height: usize, width: usize, pattern: Vec<bool>) -> Result<Self> {
        if pattern.len() != height * width {
            return Err(config("mask pattern length does not match its shape"));
        }
        let count = pattern.iter().filter(|&&b| b).count();
        Ok(Self {
            height,
            width,
            accel: (height * width) as f64 / count.max(1) as f64,
            pattern,
            calib: (0, 0),
            kind: MaskKind::VariableDensity2d,
            sigma: f64::NAN,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pattern(&self) -> &[bool] {
        &self.pattern
    }

    pub fn is_sampled(&self, i: usize, j: usize) -> bool {
        self.pattern[i * self.width + j]
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn calib_region(&self) -> (usize, usize) {
        self.calib
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// Bisected density width in normalized k-space units.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sampled_count(&self) -> usize {
        self.pattern.iter().filter(|&&b| b).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_count() as f64 / self.pattern.len() as f64
    }
}

fn centered_block(len: usize, size: usize) -> std::ops::Range<usize> {
    let start = len / 2 - size / 2;
    start..start + size
}

/// Squared normalized distance of index `i` from the center of an axis of `len` samples.
fn axis_d2(i: usize, len: usize) -> f64 {
    let d = (i as f64 - (len / 2) as f64) / len as f64;
    d * d
}

/// σ such that `Σ exp(−d²/2σ²) = target` over the candidate distances.
fn bisect_sigma(d2: &[f64], target: f64) -> f64 {
    let expected = |sigma: f64| d2.iter().map(|d| (-d / (2.0 * sigma * sigma)).exp()).sum::<f64>();
    let (mut lo, mut hi) = (1e-6_f64, 1e3_f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Draws `count` distinct candidates with probability proportional to their
/// weights by ranking exponential keys `ln(u)/w` (ties keep index order).
fn weighted_choice(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(idx, &w)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, idx)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(count);
    keyed.into_iter().map(|(_, idx)| idx).collect()
}

/// Builds a seeded undersampling mask with `⌊H·W/R⌋` points (or `⌊W/R⌋` full
/// columns for the 1D kind). The calibration block spans `√calib_fraction` of
/// each axis and counts toward the budget.
pub fn make_mask(
    shape: (usize, usize),
    accel: f64,
    kind: MaskKind,
    calib_fraction: f64,
    seed: u64,
) -> Result<Mask> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(config("mask shape must be non-empty"));
    }
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(config(format!("acceleration must be >= 1, got {accel}")));
    }
    if !(0.0..=1.0).contains(&calib_fraction) {
        return Err(config(format!("calibration fraction must lie in [0, 1], got {calib_fraction}")));
    }
    let side = calib_fraction.sqrt();
    let calib_w = ((w as f64 * side).round() as usize).min(w);
    let mut rng = rng::stream(seed, &[0x6d61_736b]);
    let mut pattern = vec![false; h * w];

    let (calib, sigma) = match kind {
        MaskKind::VariableDensity2d => {
            let calib_h = ((h as f64 * side).round() as usize).min(h);
            let budget = ((h * w) as f64 / accel).floor() as usize;
            let calib_count = calib_h * calib_w;
            if calib_count > budget {
                return Err(config(format!(
                    "calibration block {calib_h}x{calib_w} exceeds the sampling budget of {budget} points"
                )));
            }
            for i in centered_block(h, calib_h) {
                for j in centered_block(w, calib_w) {
                    pattern[i * w + j] = true;
                }
            }
            let candidates: Vec<usize> = (0..h * w).filter(|&p| !pattern[p]).collect();
            let d2: Vec<f64> = candidates.iter().map(|&p| axis_d2(p / w, h) + axis_d2(p % w, w)).collect();
            let remaining = budget - calib_count;
            let sigma = draw(&candidates, &d2, remaining, &mut rng, |p| pattern[p] = true);
            ((calib_h, calib_w), sigma)
        }
        MaskKind::VariableDensity1d => {
            let budget = (w as f64 / accel).floor() as usize;
            if calib_w > budget {
                return Err(config(format!(
                    "{calib_w} calibration lines exceed the sampling budget of {budget} lines"
                )));
            }
            let mut lines = vec![false; w];
            for j in centered_block(w, calib_w) {
                lines[j] = true;
            }
            let candidates: Vec<usize> = (0..w).filter(|&j| !lines[j]).collect();
            let d2: Vec<f64> = candidates.iter().map(|&j| axis_d2(j, w)).collect();
            let sigma = draw(&candidates, &d2, budget - calib_w, &mut rng, |j| lines[j] = true);
            for i in 0..h {
                for j in 0..w {
                    pattern[i * w + j] = lines[j];
                }
            }
            ((h, calib_w), sigma)
        }
    };
    Ok(Mask {
        height: h,
        width: w,
        pattern,
        accel,
        calib,
        kind,
        sigma,
    })
}

fn draw(
    candidates: &[usize],
    d2: &[f64],
    count: usize,
    rng: &mut impl Rng,
    mut mark: impl FnMut(usize),
) -> f64 {
    if count == 0 {
        return 0.0;
    }
    if count >= candidates.len() {
        candidates.iter().for_each(|&c| mark(c));
        return f64::INFINITY;
    }
    let sigma = bisect_sigma(d2, count as f64);
    let weights: Vec<f64> = d2.iter().map(|d| (-d / (2.0 * sigma * sigma)).exp()).collect();
    for idx in weighted_choice(&weights, count, rng) {
        mark(candidates[idx]);
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_and_calibration_at_r4() {
        let m = make_mask((64, 64), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, 3).unwrap();
        assert_eq!(m.sampled_count(), 1024);
        assert_eq!(m.calib_region(), (8, 8));
        for i in 28..36 {
            for j in 28..36 {
                assert!(m.is_sampled(i, j));
            }
        }
    }

    #[test]
    fn unit_acceleration_samples_everything() {
        for kind in [MaskKind::VariableDensity2d, MaskKind::VariableDensity1d] {
            let m = make_mask((32, 48), 1.0, kind, 1.0 / 64.0, 1).unwrap();
            assert!(m.pattern().iter().all(|&b| b));
        }
    }

    #[test]
    fn line_masks_sample_whole_columns() {
        let m = make_mask((32, 64), 4.0, MaskKind::VariableDensity1d, 1.0 / 64.0, 9).unwrap();
        assert_eq!(m.sampled_count(), 16 * 32);
        for j in 0..64 {
            let col: Vec<bool> = (0..32).map(|i| m.is_sampled(i, j)).collect();
            assert!(col.iter().all(|&b| b == col[0]));
        }
    }

    #[test]
    fn infeasible_calibration_is_rejected() {
        let err = make_mask((16, 16), 8.0, MaskKind::VariableDensity2d, 0.25, 0).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        assert!(make_mask((16, 16), 0.5, MaskKind::VariableDensity2d, 0.0, 0).is_err());
    }

    #[test]
    fn seeded_determinism() {
        let a = make_mask((32, 32), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, 11).unwrap();
        let b = make_mask((32, 32), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, 11).unwrap();
        let c = make_mask((32, 32), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pattern(), c.pattern());
    }

    #[test]
    fn fraction_tracks_acceleration() {
        for r in [2.0, 4.0, 8.0, 12.0] {
            for kind in [MaskKind::VariableDensity2d, MaskKind::VariableDensity1d] {
                let m = make_mask((64, 64), r, kind, 1.0 / 256.0, 5).unwrap();
                assert!((m.sampled_fraction() - 1.0 / r).abs() <= 0.02, "R={r} {kind:?}");
            }
        }
    }

    #[test]
    fn sampling_density_decreases_radially() {
        let (h, w) = (32, 32);
        let bins = 8;
        let max_r = ((h / 2) as f64).hypot((w / 2) as f64);
        let bin_of = |i: usize, j: usize| {
            let r = (i as f64 - (h / 2) as f64).hypot(j as f64 - (w / 2) as f64);
            ((r / max_r * bins as f64) as usize).min(bins - 1)
        };
        let mut hits = vec![0.0; bins];
        let mut area = vec![0.0; bins];
        for i in 0..h {
            for j in 0..w {
                area[bin_of(i, j)] += 1.0;
            }
        }
        for seed in 0..1000 {
            let m = make_mask((h, w), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, seed).unwrap();
            for i in 0..h {
                for j in 0..w {
                    if m.is_sampled(i, j) {
                        hits[bin_of(i, j)] += 1.0;
                    }
                }
            }
        }
        let density: Vec<f64> = hits.iter().zip(&area).map(|(n, a)| n / a).collect();
        for pair in density.windows(2) {
            assert!(pair[0] > pair[1], "{density:?}");
        }
    }
}
