use num_complex::Complex64;

use adadiff_tape::Tensor;

use crate::error::{contract, Result};

/// Complex `H×W` image stored row-major. Network code sees it as a
/// `[2, H, W]` tensor of (real, imaginary) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(contract(format!(
                "image data has {} samples, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        let data = (0..height * width).map(|p| f(p / width, p % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn ensure_shape(&self, other: &ComplexImage) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(contract(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `[1, 2, H, W]` tensor of real and imaginary channels.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.data.len();
        let mut buf = vec![0.0; 2 * hw];
        for (p, c) in self.data.iter().enumerate() {
            buf[p] = c.re;
            buf[hw + p] = c.im;
        }
        Tensor::from_vec(&[1, 2, self.height, self.width], buf)
    }

    /// Reads a `[2, H, W]` or `[1, 2, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [2, h, w] | [1, 2, h, w] => (*h, *w),
            _ => return Err(contract(format!("expected a [2, H, W] image tensor, got {s:?}"))),
        };
        Ok(Self::from_channels(h, w, t.data()))
    }

    /// Image `n` of an `[N, 2, H, W]` batch.
    pub fn from_batch(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 2 || n >= s[0] {
            return Err(contract(format!("cannot take image {n} of batch {s:?}")));
        }
        Ok(Self::from_channels(s[2], s[3], t.batch_item(n)))
    }

    fn from_channels(h: usize, w: usize, buf: &[f64]) -> Self {
        let hw = h * w;
        let data = (0..hw).map(|p| Complex64::new(buf[p], buf[hw + p])).collect();
        Self { height: h, width: w, data }
    }

    /// `[N, 2, H, W]` batch tensor.
    pub fn batch_tensor(images: &[ComplexImage]) -> Tensor {
        let items: Vec<Tensor> = images.iter().map(ComplexImage::to_tensor).collect();
        Tensor::stack(&items)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn l1_distance(&self, other: &ComplexImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.re - b.re).abs() + (a.im - b.im).abs())
            .sum::<f64>()
            / (2 * self.data.len()) as f64
    }
}
