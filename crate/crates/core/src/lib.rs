//! Adaptive diffusion prior for accelerated MRI reconstruction: noise schedule,
//! imaging operator, synthetic phantoms, image-quality metrics, the adversarial
//! reverse-step mapper and the reconstruction pipeline.

pub mod error;
pub mod image;
pub mod mapper;
pub mod metrics;
pub mod operator;
pub mod phantom;
pub mod recon;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use image::ComplexImage;
