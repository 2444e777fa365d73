use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Up/downsampling used inside residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    /// Average pooling down, nearest-neighbour up.
    Nearest,
    /// Learnable separable 4-tap filters initialised to `[1, 3, 3, 1] / 8`.
    Fir,
}

/// Training objective of the reverse-step mapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Adversarial,
    /// Pixel-wise ℓ1 between the generator's clean estimate and the true image; no discriminator.
    L1,
}

/// Architecture and optimisation settings of the generator/discriminator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Channel multiplier per encoder stage; its length is the stage count.
    pub channel_mult: Vec<usize>,
    /// Flat residual blocks per encoder stage (decoder stages use one more).
    pub blocks_per_stage: usize,
    /// Encoder stages (by index) followed by self-attention.
    pub attention_stages: Vec<usize>,
    /// Decoder stages, indexed by their matching encoder resolution, followed by self-attention.
    pub decoder_attention_stages: Vec<usize>,
    pub max_norm_groups: usize,
    pub z_dim: usize,
    pub z_embed_dim: usize,
    pub z_mlp_layers: usize,
    pub time_embed_dim: usize,
    pub resample: Resample,
    /// Feed zeros to the latent MLP so normalisation is non-adaptive.
    pub z_ablation: bool,
    pub disc_channels: Vec<usize>,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of `½‖∇ₓ D‖²` on real pairs.
    pub r1_weight: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MapperConfig {
    /// Reduced four-stage layout for 64×64 single-core training.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            base_channels: 8,
            channel_mult: vec![1, 2, 2, 2],
            blocks_per_stage: 1,
            attention_stages: vec![2, 3],
            decoder_attention_stages: vec![2],
            max_norm_groups: 4,
            z_dim: 16,
            z_embed_dim: 32,
            z_mlp_layers: 4,
            time_embed_dim: 32,
            resample: Resample::Nearest,
            z_ablation: false,
            disc_channels: vec![8, 16, 16, 16],
            learning_rate: 1e-3,
            disc_learning_rate: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch_size: 8,
            epochs: 50,
            r1_weight: 1.0,
        }
    }

    /// Six-stage 256×256 layout with the published training hyperparameters.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            base_channels: 64,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            blocks_per_stage: 2,
            attention_stages: vec![4, 5],
            decoder_attention_stages: vec![4],
            max_norm_groups: 32,
            z_dim: 100,
            z_embed_dim: 256,
            z_mlp_layers: 8,
            time_embed_dim: 256,
            resample: Resample::Fir,
            z_ablation: false,
            disc_channels: vec![64, 128, 256, 512, 512, 512],
            learning_rate: 6e-3,
            disc_learning_rate: 6e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch_size: 4,
            epochs: 500,
            r1_weight: 1.0,
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stages();
        if stages < 2 {
            return Err(config(format!("generator needs at least 2 encoder stages, got {stages}")));
        }
        let factor = 1usize << (stages - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(config(format!(
                "image size {} is not divisible by 2^(stages-1) = {factor}",
                self.image_size
            )));
        }
        if self.z_dim == 0 || self.z_embed_dim == 0 || self.z_mlp_layers == 0 {
            return Err(config("latent dimension, embedding width and MLP depth must be positive"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(config("time embedding width must be an even number >= 2"));
        }
        if self.base_channels == 0 || self.channel_mult.contains(&0) || self.blocks_per_stage == 0 {
            return Err(config("channel counts and blocks per stage must be positive"));
        }
        if let Some(s) = self
            .attention_stages
            .iter()
            .chain(&self.decoder_attention_stages)
            .find(|&&s| s >= stages)
        {
            return Err(config(format!("attention stage {s} does not exist (stages: {stages})")));
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return Err(config("discriminator needs at least one stage with positive width"));
        }
        if self.image_size >> self.disc_channels.len() == 0 {
            return Err(config("discriminator downsamples below one pixel"));
        }
        if self.max_norm_groups == 0 {
            return Err(config("max_norm_groups must be positive"));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("disc_learning_rate", self.disc_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        if !(self.r1_weight >= 0.0) {
            return Err(config("r1_weight must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        MapperConfig::desk().validate().unwrap();
        MapperConfig::paper().validate().unwrap();
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut c = MapperConfig::desk();
        c.channel_mult = vec![1];
        assert!(c.validate().is_err());
        let mut c = MapperConfig::desk();
        c.image_size = 60;
        assert!(c.validate().is_err());
        let mut c = MapperConfig::desk();
        c.z_dim = 0;
        assert!(c.validate().is_err());
        let mut c = MapperConfig::desk();
        c.attention_stages = vec![7];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<MapperConfig>(r#"{"image_size": 32, "bogus": 1}"#);
        assert!(err.is_err());
        let c: MapperConfig = serde_json::from_str(r#"{"image_size": 32}"#).unwrap();
        assert_eq!(c.base_channels, MapperConfig::desk().base_channels);
    }
}
