//! Experiment configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use adadiff_core::mapper::{MapperConfig, TrainMode};
use adadiff_core::metrics::Aggregation;
use adadiff_core::operator::MaskKind;
use adadiff_core::phantom::Contrast;
use adadiff_core::recon::ReconConfig;
use adadiff_core::schedule::DiffusionSchedule;
use adadiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ADADIFF_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Output root; falls back to `$ADADIFF_OUT`, then `runs`.
    pub output: Option<PathBuf>,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub mapper: MapperConfig,
    pub operator: OperatorSection,
    pub recon: ReconConfig,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: None,
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            mapper: MapperConfig::desk(),
            operator: OperatorSection::default(),
            recon: ReconConfig::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory; defaults to `<output>/data`.
    pub path: Option<PathBuf>,
    pub subjects: usize,
    pub contrasts: Vec<Contrast>,
    pub size: usize,
    pub slices_per_subject: usize,
    pub seed: u64,
    /// Standard deviation of complex Gaussian noise added to acquired samples.
    pub noise_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            subjects: 10,
            contrasts: Contrast::ALL.to_vec(),
            size: 64,
            slices_per_subject: 4,
            seed: 0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub stride: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            stride: 125,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.total_steps, self.stride, self.beta_min, self.beta_max)
    }
}

/// Prior variants that the `train` command can produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    Adversarial,
    L1,
    /// Adversarial training without latent inputs.
    NoZ,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 3] = [TrainVariant::Adversarial, TrainVariant::L1, TrainVariant::NoZ];

    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::Adversarial => "adversarial",
            TrainVariant::L1 => "l1",
            TrainVariant::NoZ => "no-z",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            TrainVariant::L1 => TrainMode::L1,
            _ => TrainMode::Adversarial,
        }
    }

    pub fn mapper_config(self, base: &MapperConfig) -> MapperConfig {
        MapperConfig {
            z_ablation: base.z_ablation || self == TrainVariant::NoZ,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variant: TrainVariant,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            variant: TrainVariant::Adversarial,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub accel: f64,
    pub mask: MaskKind,
    pub calib_fraction: f64,
    pub coils: usize,
    pub seed: u64,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            accel: 4.0,
            mask: MaskKind::VariableDensity2d,
            calib_fraction: 1.0 / 64.0,
            coils: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub aggregation: Aggregation,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides
    /// with dotted keys and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mapper.validate()?;
        self.recon.validate()?;
        self.schedule.build()?;
        if self.data.contrasts.is_empty() {
            return Err(Error::Config("data.contrasts must not be empty".into()));
        }
        if self.operator.coils == 0 {
            return Err(Error::Config("operator.coils must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn dataset_dir(&self, out: &Path) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| out.join("data"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ECHO_FILE), self.to_toml())?;
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} descends into a non-table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Parses a TOML value, treating anything unparseable as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "mapper.epochs=3".into(),
                "operator.accel = 8".into(),
                "recon.variant=no_adapt".into(),
                "data.contrasts=[\"T2\"]".into(),
                "train.variant=l1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.mapper.epochs, 3);
        assert_eq!(cfg.operator.accel, 8.0);
        assert_eq!(cfg.recon.variant, adadiff_core::recon::Variant::NoAdapt);
        assert_eq!(cfg.data.contrasts, vec![Contrast::T2]);
        assert_eq!(cfg.train.variant, TrainVariant::L1);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        for bad in ["mapper.bogus=1", "nosuch.key=1", "operator.accel", "mapper..epochs=1", "mapper.epochs=-1"] {
            assert!(
                matches!(ExperimentConfig::load(None, &[bad.into()]), Err(Error::Config(_))),
                "{bad}"
            );
        }
        assert!(ExperimentConfig::load(None, &["mapper.channel_mult=[1, 2, 2]".into(), "mapper.attention_stages=[5]".into()]).is_err());
    }

    #[test]
    fn output_root_precedence() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.output_root(Some(Path::new("flag"))), PathBuf::from("flag"));
        cfg.output = Some("fromcfg".into());
        assert_eq!(cfg.output_root(None), PathBuf::from("fromcfg"));
    }
}
