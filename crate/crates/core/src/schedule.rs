//! Strided variance-preserving noise schedule, forward diffusion and the
//! closed-form reverse-step posterior.
//!
//! Step indices `r` count strided steps: `r = 0` is the clean image and
//! `r = T/k` the terminal (near-isotropic) sample. The continuous time of step
//! `r` is `τ = r·k/T` and
//!
//! ```text
//! ᾱ(τ) = exp(−β_min·τ − ½(β_max − β_min)·τ²),   γ_r = 1 − ᾱ_r / ᾱ_{r−1}.
//! ```

use serde::{Deserialize, Serialize};

use adadiff_tape::Tensor;

use crate::error::{config, contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    total_steps: usize,
    stride: usize,
    beta_min: f64,
    beta_max: f64,
    /// Indexed by strided step; entry 0 is a placeholder (γ₀ = 0).
    gamma: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Coefficients of `q(x_t | x_{t+k}, x̃₀) = N(a·x̃₀ + b·x_{t+k}, var)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub x0: f64,
    pub x_next: f64,
    pub var: f64,
}

impl DiffusionSchedule {
    pub fn new(total_steps: usize, stride: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if stride == 0 || total_steps == 0 || !total_steps.is_multiple_of(stride) {
            return Err(config(format!(
                "step count {total_steps} is not a positive multiple of stride {stride}"
            )));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(config(format!(
                "noise-rate endpoints must satisfy 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        let steps = total_steps / stride;
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|r| {
                if r == 0 {
                    1.0
                } else {
                    let tau = (r * stride) as f64 / total_steps as f64;
                    (-beta_min * tau - 0.5 * (beta_max - beta_min) * tau * tau).exp()
                }
            })
            .collect();
        let mut gamma = vec![0.0; steps + 1];
        for r in 1..=steps {
            gamma[r] = 1.0 - alpha_bar[r] / alpha_bar[r - 1];
        }
        Ok(Self {
            total_steps,
            stride,
            beta_min,
            beta_max,
            gamma,
            alpha_bar,
        })
    }

    /// Schedule with the desk defaults: T = 1000, k = 125, β ∈ [0.1, 20].
    pub fn standard() -> Self {
        Self::new(1000, 125, 0.1, 20.0).expect("default schedule is valid")
    }

    /// Test fixture with explicit per-step noise variances (`gammas[r-1]` is γ_r).
    pub fn from_gammas(gammas: &[f64]) -> Result<Self> {
        if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(config("step variances must lie in (0, 1)"));
        }
        let mut gamma = vec![0.0];
        gamma.extend_from_slice(gammas);
        let mut alpha_bar = vec![1.0];
        for g in gammas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - g));
        }
        Ok(Self {
            total_steps: gammas.len(),
            stride: 1,
            beta_min: f64::NAN,
            beta_max: f64::NAN,
            gamma,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    /// Number of strided steps `T/k`.
    pub fn steps(&self) -> usize {
        self.gamma.len() - 1
    }

    /// Original time index `t = r·k` of strided step `r`.
    pub fn time_index(&self, r: usize) -> usize {
        r * self.stride
    }

    pub fn gamma(&self, r: usize) -> f64 {
        self.gamma[r]
    }

    pub fn alpha(&self, r: usize) -> f64 {
        1.0 - self.gamma[r]
    }

    pub fn alpha_bar(&self, r: usize) -> f64 {
        self.alpha_bar[r]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma[1..]
    }

    fn check_step(&self, r: usize, lo: usize, hi: usize) -> Result<()> {
        if r < lo || r > hi {
            return Err(contract(format!("step index {r} outside {lo}..={hi}")));
        }
        Ok(())
    }

    /// `x_r = √ᾱ_r·x₀ + √(1−ᾱ_r)·noise`.
    pub fn forward_diffuse(&self, x0: &Tensor, r: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(r, 0, self.steps())?;
        same_shape(x0, noise)?;
        let (a, b) = (self.alpha_bar[r].sqrt(), (1.0 - self.alpha_bar[r]).sqrt());
        Ok(x0.zip_map(noise, |x, n| a * x + b * n))
    }

    /// One strided hop onto step `r`: `√α_r·x + √γ_r·noise`.
    pub fn forward_step(&self, x: &Tensor, r: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(r, 1, self.steps())?;
        same_shape(x, noise)?;
        let (a, b) = (self.alpha(r).sqrt(), self.gamma[r].sqrt());
        Ok(x.zip_map(noise, |x, n| a * x + b * n))
    }

    /// Posterior of the lower step `r` given the sample at `r + 1` and a clean
    /// estimate. Both mean terms use the variance γ_{r+1} of the transition
    /// between the two steps.
    pub fn posterior_coefficients(&self, r: usize) -> Result<PosteriorCoefficients> {
        self.check_step(r, 0, self.steps() - 1)?;
        let (ab, ab_next) = (self.alpha_bar[r], self.alpha_bar[r + 1]);
        let g_next = self.gamma[r + 1];
        let denom = 1.0 - ab_next;
        Ok(PosteriorCoefficients {
            x0: ab.sqrt() * g_next / denom,
            x_next: self.alpha(r + 1).sqrt() * (1.0 - ab) / denom,
            var: (1.0 - ab) / denom * g_next,
        })
    }

    pub fn posterior_params(&self, x0_tilde: &Tensor, x_next: &Tensor, r: usize) -> Result<(Tensor, f64)> {
        same_shape(x0_tilde, x_next)?;
        let c = self.posterior_coefficients(r)?;
        let mean = x0_tilde.zip_map(x_next, |a, b| c.x0 * a + c.x_next * b);
        Ok((mean, c.var))
    }
}

/// `mean + √var·noise`.
pub fn sample_posterior(mean: &Tensor, var: f64, noise: &Tensor) -> Result<Tensor> {
    if !(var >= 0.0) {
        return Err(contract(format!("posterior variance must be non-negative, got {var}")));
    }
    same_shape(mean, noise)?;
    let s = var.sqrt();
    Ok(mean.zip_map(noise, |m, n| m + s * n))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_has_eight_steps() {
        let s = DiffusionSchedule::standard();
        assert_eq!(s.steps(), 8);
        assert_eq!(s.alpha_bar(0), 1.0);
        let terminal = s.alpha_bar(8);
        assert!((terminal - (-10.05f64).exp()).abs() < 1e-12);
        assert!((terminal - 4.32e-5).abs() < 1e-7);
        assert!(terminal < 1e-3);
    }

    #[test]
    fn invariants_hold() {
        let s = DiffusionSchedule::standard();
        let mut prod = 1.0;
        for r in 1..=s.steps() {
            assert!(s.gamma(r) > 0.0 && s.gamma(r) < 1.0);
            assert!(s.alpha_bar(r) < s.alpha_bar(r - 1));
            prod *= s.alpha(r);
            assert!(((prod - s.alpha_bar(r)) / s.alpha_bar(r)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(DiffusionSchedule::new(1000, 300, 0.1, 20.0), Err(crate::Error::Config(_))));
        assert!(matches!(DiffusionSchedule::new(1000, 125, 20.0, 0.1), Err(crate::Error::Config(_))));
        assert!(matches!(DiffusionSchedule::new(1000, 125, 1.0, 1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_step_is_identity_and_zero_noise_scales() {
        let s = DiffusionSchedule::standard();
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        let n = Tensor::from_vec(&[3], vec![0.3, 0.1, -0.2]);
        assert_eq!(s.forward_diffuse(&x, 0, &n).unwrap(), x);
        let zero = Tensor::zeros(&[3]);
        let out = s.forward_diffuse(&x, 4, &zero).unwrap();
        let expect = x.map(|v| v * s.alpha_bar(4).sqrt());
        assert_eq!(out, expect);
        let step = s.forward_step(&x, 3, &zero).unwrap();
        assert_eq!(step, x.map(|v| v * s.alpha(3).sqrt()));
    }

    #[test]
    fn vanishing_step_variance_is_identity_scaling() {
        let s = DiffusionSchedule::from_gammas(&[1e-15, 0.5]).unwrap();
        let x = Tensor::from_vec(&[2], vec![1.5, -0.25]);
        let n = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let out = s.forward_step(&x, 1, &n).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_posterior_at_first_step() {
        let s = DiffusionSchedule::standard();
        let x0 = Tensor::from_vec(&[2], vec![0.7, -0.1]);
        let xn = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let (mean, var) = s.posterior_params(&x0, &xn, 0).unwrap();
        assert_eq!(mean, x0);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn contract_errors() {
        let s = DiffusionSchedule::standard();
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(s.forward_diffuse(&a, 9, &a).is_err());
        assert!(s.forward_diffuse(&a, 1, &b).is_err());
        assert!(s.forward_step(&a, 0, &a).is_err());
        assert!(s.posterior_params(&a, &a, 8).is_err());
        assert!(sample_posterior(&a, -1e-3, &a).is_err());
        assert_eq!(sample_posterior(&a, 0.0, &a).unwrap(), a);
    }

    const DRAWS: usize = 100_000;

    fn normals(seed: u64) -> Tensor {
        Tensor::from_vec(&[DRAWS], crate::rng::gaussian_vec(&mut crate::rng::stream(seed, &[]), DRAWS))
    }

    /// Sample mean and variance agree with the targets within three standard errors.
    fn assert_moments(t: &Tensor, mean: f64, var: f64) {
        let n = t.data().len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        assert!((m - mean).abs() < 3.0 * (var / n).sqrt(), "mean {m} vs {mean}");
        assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1.0)).sqrt(), "var {v} vs {var}");
    }

    #[test]
    fn forward_diffuse_moments() {
        let s = DiffusionSchedule::standard();
        let x0 = 0.8;
        for r in [1, 4, 8] {
            let xr = s.forward_diffuse(&Tensor::full(&[DRAWS], x0), r, &normals(r as u64)).unwrap();
            assert_moments(&xr, s.alpha_bar(r).sqrt() * x0, 1.0 - s.alpha_bar(r));
        }
    }

    #[test]
    fn iterated_steps_match_closed_form_moments() {
        let s = DiffusionSchedule::standard();
        let x0 = -0.6;
        for target in [2, 5, 8] {
            let mut x = Tensor::full(&[DRAWS], x0);
            for r in 1..=target {
                x = s.forward_step(&x, r, &normals(100 + r as u64)).unwrap();
            }
            assert_moments(&x, s.alpha_bar(target).sqrt() * x0, 1.0 - s.alpha_bar(target));
        }
    }

    #[test]
    fn posterior_sample_moments() {
        let mean = Tensor::full(&[DRAWS], 0.3);
        let x = sample_posterior(&mean, 0.04, &normals(7)).unwrap();
        assert_moments(&x, 0.3, 0.04);
        assert_eq!(sample_posterior(&mean, 0.04, &Tensor::zeros(&[DRAWS])).unwrap(), mean);
    }

    /// Conditions `x_r ~ N(√ā_r·x₀, 1−ā_r)` on one Gaussian hop
    /// `x_{r+1} ~ N(√a·x_r, 1−a)` by multiplying the two densities in `x_r`.
    fn conditioning_oracle(bar_r: f64, bar_next: f64, x0: f64, x_next: f64) -> (f64, f64) {
        let a = bar_next / bar_r;
        let prior_prec = 1.0 / (1.0 - bar_r);
        let lik_prec = a / (1.0 - a);
        let prec = prior_prec + lik_prec;
        let mean = (prior_prec * bar_r.sqrt() * x0 + lik_prec * x_next / a.sqrt()) / prec;
        (mean, 1.0 / prec)
    }

    fn closed_form_bar(r: usize) -> f64 {
        let tau = r as f64 * 125.0 / 1000.0;
        (-0.1 * tau - 0.5 * (20.0 - 0.1) * tau * tau).exp()
    }

    #[test]
    fn posterior_matches_conditioning_oracle() {
        let s = DiffusionSchedule::standard();
        for r in 1..s.steps() {
            for (x0, xn) in [(0.7, -0.2), (-1.3, 2.5), (0.0, 1.0)] {
                let (mean, var) = s
                    .posterior_params(&Tensor::from_vec(&[1], vec![x0]), &Tensor::from_vec(&[1], vec![xn]), r)
                    .unwrap();
                let (om, ov) = conditioning_oracle(closed_form_bar(r), closed_form_bar(r + 1), x0, xn);
                assert!(((mean.data()[0] - om) / om.abs().max(1e-300)).abs() < 1e-10, "r={r}");
                assert!(((var - ov) / ov).abs() < 1e-10, "r={r}");
            }
        }
    }

    #[test]
    fn lower_step_variance_in_the_clean_coefficient_fails_the_oracle() {
        let s = DiffusionSchedule::standard();
        let r = 3;
        let c = s.posterior_coefficients(r).unwrap();
        let printed = s.alpha_bar(r).sqrt() * s.gamma(r) / (1.0 - s.alpha_bar(r + 1));
        let (om, _) = conditioning_oracle(s.alpha_bar(r), s.alpha_bar(r + 1), 1.0, 0.0);
        assert!(((c.x0 - om) / om).abs() < 1e-10);
        assert!(((printed - om) / om).abs() > 1e-2);
    }

    #[test]
    fn coefficient_sum_matches_oracle_on_constant_step_fixture() {
        let s = DiffusionSchedule::from_gammas(&[0.3, 0.3, 0.3]).unwrap();
        for r in 1..s.steps() {
            let c = s.posterior_coefficients(r).unwrap();
            let (om, _) = conditioning_oracle(s.alpha_bar(r), s.alpha_bar(r + 1), 1.0, 1.0);
            assert!(((c.x0 + c.x_next - om) / om).abs() < 1e-10);
        }
    }
}
