//! Display-only PNG export of magnitude images.

use std::path::Path;

use adadiff_core::{ComplexImage, Error, Result};

/// 99th percentile of `values` (nearest rank).
pub fn percentile99(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Maps `values` to 8-bit grey with the window `[0, p99]`.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let top = percentile99(values);
    values
        .iter()
        .map(|&v| {
            if top > 0.0 {
                (v / top * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

fn write_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

pub fn save_magnitude_png(path: &Path, img: &ComplexImage) -> Result<()> {
    write_gray(path, img.width(), img.height(), to_gray(&img.magnitude()))
}

/// Sampled points white, the rest black.
pub fn save_mask_png(path: &Path, pattern: &[bool], (height, width): (usize, usize)) -> Result<()> {
    write_gray(path, width, height, pattern.iter().map(|&s| if s { 255 } else { 0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_saturates_top_percent() {
        let values: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(percentile99(&values), 198.0);
        let g = to_gray(&values);
        assert_eq!(g[197], 255);
        assert_eq!(g[199], 255);
        assert_eq!(g[98], (99.0 / 198.0 * 255.0_f64).round() as u8);
        assert!(to_gray(&[0.0, 0.0]).iter().all(|&v| v == 0));
    }
}
