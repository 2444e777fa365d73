//! Centered, orthonormal 2D discrete Fourier transform.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Precomputed row/column plans for one image shape.
#[derive(Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fft2({}x{})", self.height, self.width)
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// k-space of an image, DC at `(H/2, W/2)`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "FFT buffer does not match plan shape");
        // Centered transform: ifftshift, DFT, fftshift.
        shift(data, h, w, h / 2, w / 2, true);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = data[i * w + j];
            }
            col.process(&mut column);
            for i in 0..h {
                data[i * w + j] = column[i];
            }
        }
        shift(data, h, w, h / 2, w / 2, false);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        data.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Circular shift moving index `c` to 0 (`undo = true`, ifftshift) or 0 to `c` (fftshift).
fn shift(data: &mut [Complex64], h: usize, w: usize, ch: usize, cw: usize, undo: bool) {
    let src = data.to_vec();
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = if undo {
                ((i + ch) % h, (j + cw) % w)
            } else {
                ((i + h - ch) % h, (j + w - cw) % w)
            };
            data[i * w + j] = src[si * w + sj];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_centered_dft(x: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        let ph = -2.0
                            * std::f64::consts::PI
                            * ((u as f64 - ch) * (i as f64 - ch) / h as f64
                                + (v as f64 - cw) * (j as f64 - cw) / w as f64);
                        acc += x[i * w + j] * Complex64::from_polar(1.0, ph);
                    }
                }
                out[u * w + v] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn matches_direct_centered_dft() {
        for (h, w) in [(4, 6), (5, 3), (8, 8)] {
            let x: Vec<Complex64> = (0..h * w)
                .map(|p| Complex64::new((p as f64 * 0.7).sin(), (p as f64 * 0.3).cos()))
                .collect();
            let mut fast = x.clone();
            Fft2::new(h, w).forward(&mut fast);
            let slow = naive_centered_dft(&x, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10, "{h}x{w}");
            }
        }
    }

    #[test]
    fn inverse_recovers_input_and_preserves_energy() {
        let (h, w) = (6, 5);
        let x: Vec<Complex64> = (0..h * w).map(|p| Complex64::new(p as f64, -(p as f64) * 0.5)).collect();
        let fft = Fft2::new(h, w);
        let mut k = x.clone();
        fft.forward(&mut k);
        let e_x: f64 = x.iter().map(|c| c.norm_sqr()).sum();
        let e_k: f64 = k.iter().map(|c| c.norm_sqr()).sum();
        assert!((e_x - e_k).abs() < 1e-9 * e_x);
        fft.inverse(&mut k);
        for (a, b) in k.iter().zip(&x) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn dc_lands_at_center() {
        let mut x = vec![Complex64::new(1.0, 0.0); 16];
        Fft2::new(4, 4).forward(&mut x);
        assert!((x[2 * 4 + 2].re - 4.0).abs() < 1e-12);
        let off: f64 = x.iter().enumerate().filter(|(p, _)| *p != 10).map(|(_, c)| c.norm()).sum();
        assert!(off < 1e-12);
    }
}
