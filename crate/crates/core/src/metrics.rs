//! Image-quality metrics on magnitude images and paired significance testing.
//!
//! Both images are divided by their own means before PSNR or SSIM is taken,
//! so every metric is invariant to a positive global scale of either input.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::phantom::Contrast;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Largest sample size that gets the exact null distribution.
pub const EXACT_LIMIT: usize = 12;

fn evaluation(msg: impl Into<String>) -> Error {
    Error::Evaluation(msg.into())
}

/// Divides by the mean; a zero or non-finite mean is an evaluation error.
pub fn normalize_unity_mean(img: &[f64]) -> Result<Vec<f64>> {
    if img.is_empty() {
        return Err(evaluation("cannot normalize an empty image"));
    }
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    if mean == 0.0 || !mean.is_finite() {
        return Err(evaluation(format!("image mean is {mean}; unity-mean normalization undefined")));
    }
    Ok(img.iter().map(|v| v / mean).collect())
}

fn check_pair(reference: &[f64], recon: &[f64]) -> Result<()> {
    if reference.len() != recon.len() {
        return Err(evaluation(format!(
            "image sizes differ: {} vs {}",
            reference.len(),
            recon.len()
        )));
    }
    Ok(())
}

/// PSNR in dB with peak = max of the normalized reference. Normalized images
/// that agree to within the rounding bound of the mean (`n·ε·peak` per pixel)
/// count as identical and return `+∞`.
pub fn psnr(reference: &[f64], recon: &[f64]) -> Result<f64> {
    check_pair(reference, recon)?;
    let x = normalize_unity_mean(reference)?;
    let y = normalize_unity_mean(recon)?;
    let peak = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mse = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let floor = x.len() as f64 * f64::EPSILON * peak.abs();
    if mse <= floor * floor {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &[f64], (h, w): (usize, usize), k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 7×7 Gaussian windows, with dynamic
/// range = max of the normalized reference.
pub fn ssim(reference: &[f64], recon: &[f64], shape: (usize, usize)) -> Result<f64> {
    check_pair(reference, recon)?;
    let (h, w) = shape;
    if h * w != reference.len() {
        return Err(evaluation(format!("shape {h}x{w} does not match {} pixels", reference.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(evaluation(format!("image {h}x{w} is smaller than the SSIM window")));
    }
    let x = normalize_unity_mean(reference)?;
    let y = normalize_unity_mean(recon)?;
    let range = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, shape, &k);
    let my = filter_valid(&y, shape, &k);
    let mxx = filter_valid(&prod(&x, &x), shape, &k);
    let myy = filter_valid(&prod(&y, &y), shape, &k);
    let mxy = filter_valid(&prod(&x, &y), shape, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += (2.0 * ux * uy + c1) * (2.0 * cxy + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// PSNR and SSIM of the magnitudes of two complex images.
pub fn magnitude_scores(reference: &ComplexImage, recon: &ComplexImage) -> Result<(f64, f64)> {
    reference.ensure_shape(recon)?;
    let (a, b) = (reference.magnitude(), recon.magnitude());
    Ok((psnr(&a, &b)?, ssim(&a, &b, reference.shape())?))
}

/// Midranks of `values` (1-based; ties share their average rank).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped. Up to [`EXACT_LIMIT`] remaining pairs use the
/// exact permutation distribution of the positive-rank sum (midranks for
/// ties); larger samples use the tie-corrected normal approximation.
pub fn signed_rank_test(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(evaluation("signed-rank test needs finite samples"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(evaluation(format!("signed-rank test needs at least 5 nonzero differences, got {n}")));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_LIMIT {
        // Midranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w = (2.0 * w_plus).round() as usize;
        let total = (1u64 << n) as f64;
        let lower = counts[..=w].iter().sum::<u64>() as f64 / total;
        let upper = counts[w..].iter().sum::<u64>() as f64 / total;
        Ok((2.0 * lower.min(upper)).min(1.0))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let p = erfc(z.abs() / std::f64::consts::SQRT_2);
        Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
    }
}

/// How per-slice scores are reduced before summaries and tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Average each subject's slices first; statistics run across subjects.
    #[default]
    SubjectMeans,
    /// Every slice is one sample.
    SlicePooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub method: String,
    pub contrast: Contrast,
    pub subject: usize,
    pub slice: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub contrast: Contrast,
    pub samples: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub contrast: Contrast,
    pub method_a: String,
    pub method_b: String,
    pub pairs: usize,
    /// `None` when fewer than five pairs differ.
    pub psnr_p: Option<f64>,
    pub ssim_p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregation: Aggregation,
    pub scores: Vec<SliceScore>,
    pub summaries: Vec<Summary>,
    pub comparisons: Vec<Comparison>,
}

/// Mean and sample standard deviation (zero for a single sample).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn build(scores: Vec<SliceScore>, aggregation: Aggregation) -> Self {
        let mut methods: Vec<String> = Vec::new();
        let mut contrasts: Vec<Contrast> = Vec::new();
        for s in &scores {
            if !methods.contains(&s.method) {
                methods.push(s.method.clone());
            }
            if !contrasts.contains(&s.contrast) {
                contrasts.push(s.contrast);
            }
        }
        let mut report = Self {
            aggregation,
            scores,
            summaries: Vec::new(),
            comparisons: Vec::new(),
        };
        for &contrast in &contrasts {
            let units: Vec<BTreeMap<(usize, usize), (f64, f64)>> =
                methods.iter().map(|m| report.units(m, contrast)).collect();
            for (m, u) in methods.iter().zip(&units) {
                if u.is_empty() {
                    continue;
                }
                let psnrs: Vec<f64> = u.values().map(|v| v.0).collect();
                let ssims: Vec<f64> = u.values().map(|v| v.1).collect();
                let (psnr_mean, psnr_std) = mean_std(&psnrs);
                let (ssim_mean, ssim_std) = mean_std(&ssims);
                report.summaries.push(Summary {
                    method: m.clone(),
                    contrast,
                    samples: u.len(),
                    psnr_mean,
                    psnr_std,
                    ssim_mean,
                    ssim_std,
                });
            }
            for i in 0..methods.len() {
                for j in i + 1..methods.len() {
                    let keys: Vec<_> = units[i].keys().filter(|k| units[j].contains_key(k)).collect();
                    if keys.is_empty() {
                        continue;
                    }
                    let pick = |u: &BTreeMap<_, (f64, f64)>, f: fn(&(f64, f64)) -> f64| -> Vec<f64> {
                        keys.iter().map(|k| f(&u[*k])).collect()
                    };
                    let test = |f: fn(&(f64, f64)) -> f64| signed_rank_test(&pick(&units[i], f), &pick(&units[j], f)).ok();
                    report.comparisons.push(Comparison {
                        contrast,
                        method_a: methods[i].clone(),
                        method_b: methods[j].clone(),
                        pairs: keys.len(),
                        psnr_p: test(|v| v.0),
                        ssim_p: test(|v| v.1),
                    });
                }
            }
        }
        report
    }

    /// Samples of one method and contrast keyed by (subject, slice), with
    /// slice = 0 for every entry under subject-mean aggregation.
    fn units(&self, method: &str, contrast: Contrast) -> BTreeMap<(usize, usize), (f64, f64)> {
        let rows = self.scores.iter().filter(|s| s.method == method && s.contrast == contrast);
        match self.aggregation {
            Aggregation::SlicePooled => rows.map(|s| ((s.subject, s.slice), (s.psnr, s.ssim))).collect(),
            Aggregation::SubjectMeans => {
                let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
                for s in rows {
                    let e = acc.entry(s.subject).or_insert((0.0, 0.0, 0));
                    e.0 += s.psnr;
                    e.1 += s.ssim;
                    e.2 += 1;
                }
                acc.into_iter()
                    .map(|(k, (p, q, n))| ((k, 0), (p / n as f64, q / n as f64)))
                    .collect()
            }
        }
    }

    pub fn summary(&self, method: &str, contrast: Contrast) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.method == method && s.contrast == contrast)
    }

    pub fn comparison(&self, a: &str, b: &str, contrast: Contrast) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| {
            c.contrast == contrast && ((c.method_a == a && c.method_b == b) || (c.method_a == b && c.method_b == a))
        })
    }

    /// Summary table as comma-separated text; SSIM in percent.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,contrast,samples,psnr_mean,psnr_std,ssim_pct_mean,ssim_pct_std\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4},{:.4}",
                s.method,
                s.contrast,
                s.samples,
                s.psnr_mean,
                s.psnr_std,
                100.0 * s.ssim_mean,
                100.0 * s.ssim_std
            );
        }
        out
    }

    /// Per-slice scores as comma-separated text with full precision.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("method,contrast,subject,slice,psnr,ssim\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{},{},{},{}", s.method, s.contrast, s.subject, s.slice, s.psnr, s.ssim);
        }
        out
    }

    pub fn comparisons_csv(&self) -> String {
        let fmt = |p: Option<f64>| p.map_or_else(|| "NA".to_string(), |v| format!("{v:.6e}"));
        let mut out = String::from("contrast,method_a,method_b,pairs,psnr_p,ssim_p\n");
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.contrast,
                c.method_a,
                c.method_b,
                c.pairs,
                fmt(c.psnr_p),
                fmt(c.ssim_p)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(0.05..1.0)).collect()
    }

    #[test]
    fn psnr_of_identical_or_scaled_images_is_infinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(64 * 64, &mut rng);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        for c in [0.3, 1.7, 1e4, 3.0e-3] {
            let y: Vec<f64> = x.iter().map(|v| v * c).collect();
            assert_eq!(psnr(&x, &y).unwrap(), f64::INFINITY, "c = {c}");
        }
    }

    #[test]
    fn psnr_single_flipped_pixel_matches_formula() {
        let n = 64 * 64;
        let x = vec![1.0; n];
        let mut y = x.clone();
        y[100] = 0.0;
        // Normalized: x stays 1; y becomes y / ((n-1)/n).
        let s = n as f64 / (n as f64 - 1.0);
        let mse = ((n as f64 - 1.0) * (1.0 - s).powi(2) + 1.0) / n as f64;
        let expected = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&x, &y).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn zero_mean_reference_is_an_error() {
        let x = vec![0.0; 64];
        let y = vec![1.0; 64];
        assert!(matches!(psnr(&x, &y), Err(Error::Evaluation(_))));
        assert!(matches!(ssim(&x, &y, (8, 8)), Err(Error::Evaluation(_))));
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(32 * 40, &mut rng);
        assert_eq!(ssim(&x, &x, (32, 40)).unwrap(), 1.0);
        let c = vec![0.4; 16 * 16];
        assert_eq!(ssim(&c, &c, (16, 16)).unwrap(), 1.0);
    }

    /// Direct per-window evaluation with centered moments and 2D weights.
    fn ssim_oracle(x: &[f64], y: &[f64], (h, w): (usize, usize)) -> f64 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(x), mean(y));
        let x: Vec<f64> = x.iter().map(|v| v / mx).collect();
        let y: Vec<f64> = y.iter().map(|v| v / my).collect();
        let l = x.iter().cloned().fold(f64::MIN, f64::max);
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut k = vec![vec![0.0; 7]; 7];
        let mut ks = 0.0;
        for a in 0..7 {
            for b in 0..7 {
                let r2 = ((a as f64 - 3.0).powi(2) + (b as f64 - 3.0).powi(2)) / (2.0 * 1.5 * 1.5);
                k[a][b] = (-r2).exp();
                ks += k[a][b];
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - 7 {
            for j in 0..=w - 7 {
                let at = |v: &[f64], a: usize, b: usize| v[(i + a) * w + j + b];
                let (mut ux, mut uy) = (0.0, 0.0);
                for a in 0..7 {
                    for b in 0..7 {
                        ux += k[a][b] / ks * at(&x, a, b);
                        uy += k[a][b] / ks * at(&y, a, b);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for a in 0..7 {
                    for b in 0..7 {
                        let (dx, dy) = (at(&x, a, b) - ux, at(&y, a, b) - uy);
                        vx += k[a][b] / ks * dx * dx;
                        vy += k[a][b] / ks * dy * dy;
                        cxy += k[a][b] / ks * dx * dy;
                    }
                }
                total += (2.0 * ux * uy + c1) * (2.0 * cxy + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(16, 16), (20, 13), (32, 32), (9, 24), (7, 7)] {
            let x = random_image(h * w, &mut rng);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            let got = ssim(&x, &y, (h, w)).unwrap();
            let want = ssim_oracle(&x, &y, (h, w));
            assert!((got - want).abs() < 1e-10, "{h}x{w}: {got} vs {want}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    /// Brute-force two-sided p over all 2^n sign assignments.
    fn enumeration_p(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        let ranks = midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let observed: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let n = d.len();
        let (mut le, mut ge) = (0usize, 0usize);
        for mask in 0u32..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= observed + 1e-9 {
                le += 1;
            }
            if w >= observed - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64) / total).min(1.0)
    }

    #[test]
    fn six_pair_case_matches_enumeration() {
        let a = [1.83, 0.50, 1.62, 2.48, 1.68, 1.88];
        let b = [0.878, 0.647, 0.598, 2.05, 1.06, 1.29];
        let p = signed_rank_test(&a, &b).unwrap();
        assert!((p - enumeration_p(&a, &b)).abs() < 1e-15);
        // Five of six positive with the negative at rank 1: P(W+ >= 20) = 2/64.
        assert!((p - 4.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn all_positive_differences() {
        let a = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [0.0; 6];
        assert!((signed_rank_test(&a, &b).unwrap() - 2.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(signed_rank_test(&a, &a).unwrap(), 1.0);
        let b = [1.0, 2.0, 3.0, 4.5, 5.5];
        assert!(matches!(signed_rank_test(&a, &b), Err(Error::Evaluation(_))));
        assert!(signed_rank_test(&a, &b[..4]).is_err());
    }

    #[test]
    fn normal_approximation_is_close_to_exact_tail() {
        // Large-sample mode against the exact distribution at n = 20.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.5)).collect();
        let b = vec![0.0; 20];
        let p = signed_rank_test(&a, &b).unwrap();
        let exact = enumeration_p(&a, &b);
        assert!((p - exact).abs() < 0.02, "{p} vs {exact}");
    }

    #[test]
    fn report_summaries_recompute_from_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scores = Vec::new();
        for method in ["full", "no_adapt"] {
            for subject in 0..6 {
                for slice in 0..3 {
                    scores.push(SliceScore {
                        method: method.into(),
                        contrast: Contrast::T1,
                        subject,
                        slice,
                        psnr: rng.random_range(20.0..40.0),
                        ssim: rng.random_range(0.5..1.0),
                    });
                }
            }
        }
        for agg in [Aggregation::SubjectMeans, Aggregation::SlicePooled] {
            let r = MetricReport::build(scores.clone(), agg);
            let s = r.summary("full", Contrast::T1).unwrap();
            let rows: Vec<&SliceScore> = scores.iter().filter(|s| s.method == "full").collect();
            let values: Vec<f64> = match agg {
                Aggregation::SlicePooled => rows.iter().map(|s| s.psnr).collect(),
                Aggregation::SubjectMeans => (0..6)
                    .map(|sub| rows.iter().filter(|s| s.subject == sub).map(|s| s.psnr).sum::<f64>() / 3.0)
                    .collect(),
            };
            let (m, sd) = mean_std(&values);
            assert!((s.psnr_mean - m).abs() < 1e-12 && (s.psnr_std - sd).abs() < 1e-12);
            assert_eq!(s.samples, values.len());
            let c = r.comparison("no_adapt", "full", Contrast::T1).unwrap();
            assert_eq!(c.pairs, values.len());
            assert!(c.psnr_p.is_some());
        }
        let r = MetricReport::build(scores, Aggregation::SubjectMeans);
        assert_eq!(r.summary_csv().lines().count(), 3);
        assert_eq!(r.scores_csv().lines().count(), 37);
        assert!(r.to_json().contains("subject-means"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn metrics_are_scale_invariant(seed in 0u64..10_000, c in 0.01f64..100.0, d in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_image(16 * 16, &mut rng);
            let y: Vec<f64> = x.iter().map(|v| v * rng.random_range(0.7..1.3)).collect();
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * d).collect();
            let (p0, p1) = (psnr(&x, &y).unwrap(), psnr(&xs, &ys).unwrap());
            prop_assert!((p0 - p1).abs() < 1e-9);
            let (s0, s1) = (ssim(&x, &y, (16, 16)).unwrap(), ssim(&xs, &ys, (16, 16)).unwrap());
            prop_assert!((s0 - s1).abs() < 1e-12);
        }

        #[test]
        fn signed_rank_matches_enumeration_and_is_symmetric(
            values in proptest::collection::vec((-5i32..6, -5i32..6), 5..=12)
        ) {
            // Integer-valued samples give frequent ties and zero differences.
            let a: Vec<f64> = values.iter().map(|v| v.0 as f64).collect();
            let b: Vec<f64> = values.iter().map(|v| v.1 as f64).collect();
            let nonzero = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            prop_assume!(nonzero == 0 || nonzero >= 5);
            let p = signed_rank_test(&a, &b).unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
            prop_assert_eq!(p, signed_rank_test(&b, &a).unwrap());
            if nonzero > 0 {
                prop_assert!((p - enumeration_p(&a, &b)).abs() < 1e-12);
            }
        }
    }
}
