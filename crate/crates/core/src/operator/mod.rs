//! Simulated multi-coil Cartesian imaging operator `A = Ω·F·B`, its adjoint,
//! and the data-consistency tools built on them.

mod coils;
mod fft;
mod mask;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use coils::{make_coil_maps, CoilMaps};
pub use fft::Fft2;
pub use mask::{make_mask, Mask, MaskKind};

use crate::error::{config, contract, Result};
use crate::image::ComplexImage;

/// Masked multi-coil k-space, coil-major `C×H×W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSpace {
    coils: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl KSpace {
    pub fn zeros(coils: usize, height: usize, width: usize) -> Self {
        Self {
            coils,
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); coils * height * width],
        }
    }

    pub fn from_vec(coils: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != coils * height * width {
            return Err(contract("k-space data length does not match its shape"));
        }
        Ok(Self { coils, height, width, data })
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.coils, self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Inner product `Σ conj(self)·other`.
    pub fn inner(&self, other: &KSpace) -> Complex64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &KSpace) -> KSpace {
        KSpace {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }
}

/// Serialized description of an operator; plans are rebuilt on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub fourier: String,
    pub mask: Mask,
    pub coils: CoilMaps,
}

pub const FOURIER_CONVENTION: &str = "centered-orthonormal";

#[derive(Clone, Debug)]
pub struct ImagingOperator {
    mask: Mask,
    coils: CoilMaps,
    fft: Fft2,
}

impl ImagingOperator {
    pub fn new(mask: Mask, coils: CoilMaps) -> Result<Self> {
        if mask.shape() != coils.shape() {
            return Err(config(format!(
                "mask shape {:?} does not match coil shape {:?}",
                mask.shape(),
                coils.shape()
            )));
        }
        let (h, w) = mask.shape();
        Ok(Self {
            mask,
            coils,
            fft: Fft2::new(h, w),
        })
    }

    pub fn from_spec(spec: OperatorSpec) -> Result<Self> {
        if spec.fourier != FOURIER_CONVENTION {
            return Err(config(format!("unsupported Fourier convention {}", spec.fourier)));
        }
        Self::new(spec.mask, spec.coils)
    }

    pub fn spec(&self) -> OperatorSpec {
        OperatorSpec {
            fourier: FOURIER_CONVENTION.into(),
            mask: self.mask.clone(),
            coils: self.coils.clone(),
        }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn coils(&self) -> &CoilMaps {
        &self.coils
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn num_coils(&self) -> usize {
        self.coils.coils()
    }

    /// Number of acquired complex samples, `C·|Ω|`.
    pub fn sampled_entries(&self) -> usize {
        self.num_coils() * self.mask.sampled_count()
    }

    fn check_image(&self, x: &ComplexImage) -> Result<()> {
        if x.shape() != self.shape() {
            return Err(contract(format!(
                "image shape {:?} does not match operator shape {:?}",
                x.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    fn check_kspace(&self, y: &KSpace) -> Result<()> {
        let (h, w) = self.shape();
        if y.shape() != (self.num_coils(), h, w) {
            return Err(contract(format!(
                "k-space shape {:?} does not match operator ({}, {h}, {w})",
                y.shape(),
                self.num_coils()
            )));
        }
        Ok(())
    }

    /// `y_c = Ω ⊙ F(B_c ⊙ x)`.
    pub fn apply(&self, x: &ComplexImage) -> Result<KSpace> {
        self.check_image(x)?;
        let (h, w) = self.shape();
        let hw = h * w;
        let mut out = KSpace::zeros(self.num_coils(), h, w);
        for c in 0..self.num_coils() {
            let buf = &mut out.data[c * hw..(c + 1) * hw];
            for ((o, b), v) in buf.iter_mut().zip(self.coils.coil(c)).zip(x.data()) {
                *o = b * v;
            }
            self.fft.forward(buf);
            for (o, &m) in buf.iter_mut().zip(self.mask.pattern()) {
                if !m {
                    *o = Complex64::new(0.0, 0.0);
                }
            }
        }
        Ok(out)
    }

    /// `x = Σ_c conj(B_c) ⊙ F⁻¹(Ω ⊙ y_c)`.
    pub fn adjoint(&self, y: &KSpace) -> Result<ComplexImage> {
        self.check_kspace(y)?;
        let (h, w) = self.shape();
        let hw = h * w;
        let mut out = ComplexImage::zeros(h, w);
        let mut buf = vec![Complex64::new(0.0, 0.0); hw];
        for c in 0..self.num_coils() {
            for ((b, &v), &m) in buf.iter_mut().zip(y.coil(c)).zip(self.mask.pattern()) {
                *b = if m { v } else { Complex64::new(0.0, 0.0) };
            }
            self.fft.inverse(&mut buf);
            for ((o, b), s) in out.data_mut().iter_mut().zip(&buf).zip(self.coils.coil(c)) {
                *o += s.conj() * b;
            }
        }
        Ok(out)
    }

    /// `x + Aᴴ(y − A·x)`.
    pub fn dc_projection(&self, x: &ComplexImage, y: &KSpace) -> Result<ComplexImage> {
        let residual = y.sub(&self.apply(x)?);
        let correction = self.adjoint(&residual)?;
        let mut out = x.clone();
        for (o, c) in out.data_mut().iter_mut().zip(correction.data()) {
            *o += c;
        }
        Ok(out)
    }

    /// Zero-filled baseline `Aᴴy`.
    pub fn zero_filled(&self, y: &KSpace) -> Result<ComplexImage> {
        self.adjoint(y)
    }

    /// `‖A·x − y‖₁` over real and imaginary parts, divided by the number of
    /// acquired complex samples.
    pub fn dc_loss(&self, x: &ComplexImage, y: &KSpace) -> Result<f64> {
        self.check_kspace(y)?;
        Ok(self.dc_loss_and_grad(x, y, false)?.0)
    }

    /// Loss plus its gradient with respect to the (real, imaginary) parts of `x`,
    /// packed as a complex image. At a zero residual component the subgradient 0 is used.
    pub fn dc_loss_grad(&self, x: &ComplexImage, y: &KSpace) -> Result<(f64, ComplexImage)> {
        self.check_kspace(y)?;
        let (loss, grad) = self.dc_loss_and_grad(x, y, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn dc_loss_and_grad(&self, x: &ComplexImage, y: &KSpace, want_grad: bool) -> Result<(f64, Option<ComplexImage>)> {
        let count = self.sampled_entries();
        if count == 0 {
            let (h, w) = self.shape();
            return Ok((0.0, want_grad.then(|| ComplexImage::zeros(h, w))));
        }
        let ax = self.apply(x)?;
        let hw = self.shape().0 * self.shape().1;
        let mut loss = 0.0;
        let mut signs = KSpace::zeros(self.num_coils(), self.shape().0, self.shape().1);
        for c in 0..self.num_coils() {
            for p in 0..hw {
                if !self.mask.pattern()[p] {
                    continue;
                }
                let idx = c * hw + p;
                let r = ax.data[idx] - y.data[idx];
                loss += r.re.abs() + r.im.abs();
                signs.data[idx] = Complex64::new(sign(r.re), sign(r.im));
            }
        }
        let scale = 1.0 / count as f64;
        let grad = if want_grad {
            Some(self.adjoint(&signs)?.scaled(scale))
        } else {
            None
        };
        Ok((loss * scale, grad))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut r = rng::stream(seed, &[]);
        let re = rng::gaussian_vec(&mut r, h * w);
        let im = rng::gaussian_vec(&mut r, h * w);
        ComplexImage::from_vec(h, w, re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect()).unwrap()
    }

    fn single_coil_full(h: usize, w: usize) -> ImagingOperator {
        ImagingOperator::new(Mask::full(h, w), CoilMaps::unit(h, w)).unwrap()
    }

    #[test]
    fn full_single_coil_is_unitary() {
        let op = single_coil_full(8, 6);
        let x = random_image(8, 6, 1);
        let y = op.apply(&x).unwrap();
        let back = op.adjoint(&y).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let op = ImagingOperator::new(
            make_mask((16, 16), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, 1).unwrap(),
            make_coil_maps((16, 16), 4, 2).unwrap(),
        )
        .unwrap();
        let y = op.apply(&ComplexImage::zeros(16, 16)).unwrap();
        assert!(y.data().iter().all(|c| c.norm() == 0.0));
        let x = op.adjoint(&KSpace::zeros(4, 16, 16)).unwrap();
        assert!(x.data().iter().all(|c| c.norm() == 0.0));
        assert!(op.zero_filled(&KSpace::zeros(4, 16, 16)).unwrap().data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn empty_mask_projection_is_identity() {
        let op = ImagingOperator::new(Mask::empty(8, 8), CoilMaps::unit(8, 8)).unwrap();
        let x = random_image(8, 8, 3);
        let y = KSpace::zeros(1, 8, 8);
        assert_eq!(op.dc_projection(&x, &y).unwrap(), x);
        assert_eq!(op.dc_loss(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn full_mask_projection_returns_inverse_transform() {
        let op = single_coil_full(8, 8);
        let truth = random_image(8, 8, 4);
        let y = op.apply(&truth).unwrap();
        let out = op.dc_projection(&random_image(8, 8, 5), &y).unwrap();
        for (a, b) in out.data().iter().zip(truth.data()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn dc_loss_matches_brute_force_sum() {
        let (h, w) = (4, 4);
        let mask = Mask::from_pattern(h, w, (0..16).map(|p| p % 3 != 0).collect()).unwrap();
        let op = ImagingOperator::new(mask.clone(), make_coil_maps((h, w), 2, 8).unwrap()).unwrap();
        let x = random_image(h, w, 6);
        let y = op.apply(&random_image(h, w, 7)).unwrap();
        // Oracle: explicit per-coil products and a direct centered DFT.
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..2 {
            let coil = op.coils().coil(c);
            for u in 0..h {
                for v in 0..w {
                    if !mask.is_sampled(u, v) {
                        continue;
                    }
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..h {
                        for j in 0..w {
                            let ph = -2.0
                                * std::f64::consts::PI
                                * ((u as f64 - 2.0) * (i as f64 - 2.0) / 4.0 + (v as f64 - 2.0) * (j as f64 - 2.0) / 4.0);
                            acc += coil[i * w + j] * x.data()[i * w + j] * Complex64::from_polar(0.25, ph);
                        }
                    }
                    let r = acc - y.coil(c)[u * w + v];
                    total += r.re.abs() + r.im.abs();
                    count += 1;
                }
            }
        }
        let expected = total / count as f64;
        assert!((op.dc_loss(&x, &y).unwrap() - expected).abs() < 1e-12);
        assert_eq!(op.dc_loss(&x, &op.apply(&x).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn dc_loss_gradient_matches_finite_differences() {
        let (h, w) = (6, 6);
        let op = ImagingOperator::new(
            make_mask((h, w), 2.0, MaskKind::VariableDensity2d, 0.1, 3).unwrap(),
            make_coil_maps((h, w), 3, 1).unwrap(),
        )
        .unwrap();
        let x = random_image(h, w, 10);
        let y = op.apply(&random_image(h, w, 11)).unwrap();
        let (_, grad) = op.dc_loss_grad(&x, &y).unwrap();
        let eps = 1e-7;
        for p in [0, 7, 20, 35] {
            for imag in [false, true] {
                let bump = if imag { Complex64::new(0.0, eps) } else { Complex64::new(eps, 0.0) };
                let mut xp = x.clone();
                xp.data_mut()[p] += bump;
                let mut xm = x.clone();
                xm.data_mut()[p] -= bump;
                let fd = (op.dc_loss(&xp, &y).unwrap() - op.dc_loss(&xm, &y).unwrap()) / (2.0 * eps);
                let an = if imag { grad.data()[p].im } else { grad.data()[p].re };
                assert!((fd - an).abs() < 1e-6, "pixel {p}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let op = single_coil_full(8, 8);
        assert!(matches!(op.apply(&ComplexImage::zeros(4, 8)), Err(crate::Error::Contract(_))));
        assert!(matches!(op.adjoint(&KSpace::zeros(2, 8, 8)), Err(crate::Error::Contract(_))));
        assert!(ImagingOperator::new(Mask::full(8, 8), CoilMaps::unit(4, 4)).is_err());
    }

    fn random_kspace(op: &ImagingOperator, seed: u64) -> KSpace {
        let (h, w) = op.shape();
        let c = op.num_coils();
        let data = (0..c).flat_map(|k| random_image(h, w, seed * 16 + k as u64).data().to_vec()).collect();
        KSpace::from_vec(c, h, w, data).unwrap()
    }

    fn operator(coils: usize, kind: MaskKind, accel: f64, seed: u64) -> ImagingOperator {
        let shape = (16, 16);
        ImagingOperator::new(
            make_mask(shape, accel, kind, 1.0 / 64.0, seed).unwrap(),
            make_coil_maps(shape, coils, seed + 1).unwrap(),
        )
        .unwrap()
    }

    fn inner(a: &ComplexImage, b: &ComplexImage) -> Complex64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x.conj() * y).sum()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn adjoint_identity(
            seed in 0u64..1000,
            coils in proptest::sample::select(vec![1usize, 4]),
            kind in proptest::sample::select(vec![MaskKind::VariableDensity1d, MaskKind::VariableDensity2d]),
            accel in proptest::sample::select(vec![1.0, 4.0, 8.0]),
        ) {
            let op = operator(coils, kind, accel, seed);
            let x = random_image(16, 16, seed + 7);
            let y = random_kspace(&op, seed + 9);
            let lhs = op.apply(&x).unwrap().inner(&y);
            let rhs = inner(&x, &op.adjoint(&y).unwrap());
            proptest::prop_assert!((lhs - rhs).norm() <= 1e-5 * lhs.norm().max(1e-12));
        }

        #[test]
        fn projection_never_increases_the_residual(seed in 0u64..1000, coils in 1usize..5) {
            let op = operator(coils, MaskKind::VariableDensity2d, 4.0, seed);
            let x = random_image(16, 16, seed + 3);
            let y = random_kspace(&op, seed + 5);
            let before = op.apply(&x).unwrap().sub(&y).norm();
            let out = op.dc_projection(&x, &y).unwrap();
            let after = op.apply(&out).unwrap().sub(&y).norm();
            proptest::prop_assert!(after <= before * (1.0 + 1e-12));
        }
    }

    #[test]
    fn single_coil_projection_matches_sampled_entries() {
        let op = ImagingOperator::new(
            make_mask((16, 16), 4.0, MaskKind::VariableDensity2d, 1.0 / 64.0, 4).unwrap(),
            CoilMaps::unit(16, 16),
        )
        .unwrap();
        let y = op.apply(&random_image(16, 16, 20)).unwrap();
        let out = op.dc_projection(&random_image(16, 16, 21), &y).unwrap();
        let ay = op.apply(&out).unwrap();
        for (p, &m) in op.mask().pattern().iter().enumerate() {
            if m {
                assert!((ay.data()[p] - y.data()[p]).norm() < 1e-6);
            }
        }
    }
}
