//! Flat `section.key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Preset keys
//! (`model.preset`, `scene.preset`) are applied before any other key, so
//! individual settings always refine the chosen preset regardless of order.

use std::fs;
use std::path::Path;

use pcreg::icp::IcpConfig;
use pcreg::model::ModelConfig;
use pcreg::scenes::SceneConfig;
use pcreg::training::TrainConfig;
use pcreg::{Error, PipelineConfig, Result};

/// Every tunable of the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    /// Fraction of a training dataset (taken from its end) held out for validation.
    pub validation_fraction: f64,
    pub pipeline: PipelineConfig,
    /// ICP settings used when `--icp` is given.
    pub icp: IcpConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            scene: SceneConfig::compact(),
            train: TrainConfig {
                batch_size: 2,
                ..TrainConfig::default()
            },
            validation_fraction: 0.1,
            pipeline: PipelineConfig::default(),
            icp: IcpConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Settings {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut s = Settings::default();
        let is_preset = |k: &str| k == "model.preset" || k == "scene.preset";
        for (k, v) in entries.iter().filter(|(k, _)| is_preset(k)) {
            s.set(k, v)?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| !is_preset(k)) {
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        self.pipeline.ransac.validate()?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("train.validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        if let Some(rest) = key.strip_prefix("encoder.sa") {
            let (layer, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            let l: usize = parse(key, layer)?;
            if !(1..=4).contains(&l) {
                return Err(Error::Config(format!("unknown key {key}")));
            }
            let sa = &mut self.model.sa[l - 1];
            match field {
                "num_samples" => sa.num_samples = parse(key, v)?,
                "radius" => sa.radius = parse(key, v)?,
                "widths" => sa.widths = parse_list(key, v)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
            return Ok(());
        }
        let sensor = &mut self.scene.sensor;
        match key {
            "model.preset" => {
                self.model = match v {
                    "full" => ModelConfig::full(),
                    "desk" => ModelConfig::desk(),
                    "tiny" => ModelConfig::tiny(),
                    _ => return Err(Error::Config(format!("{key}: unknown preset {v:?}"))),
                }
            }
            "encoder.fp.widths" => self.model.fp_widths = parse_list(key, v)?,
            "encoder.max_neighbors" => self.model.max_neighbors = parse(key, v)?,
            "attention.k" => self.model.k = parse(key, v)?,

            "scene.preset" => {
                self.scene = match v {
                    "default" => SceneConfig::default(),
                    "compact" => SceneConfig::compact(),
                    _ => return Err(Error::Config(format!("{key}: unknown preset {v:?}"))),
                }
            }
            "scene.extent" => self.scene.extent = parse(key, v)?,
            "scene.ground" => self.scene.ground = parse(key, v)?,
            "scene.tile_size" => self.scene.tile_size = parse(key, v)?,
            "scene.boxes" => self.scene.boxes = parse(key, v)?,
            "scene.cylinders" => self.scene.cylinders = parse(key, v)?,
            "scene.walls" => self.scene.walls = parse(key, v)?,
            "scene.max_sensor_separation" => self.scene.max_sensor_separation = parse(key, v)?,
            "scene.max_relative_yaw_deg" => self.scene.max_relative_yaw_deg = parse(key, v)?,
            "scene.occlusion" => self.scene.occlusion = parse(key, v)?,
            "scene.noise_sigma" => self.scene.noise_sigma = parse(key, v)?,
            "scene.min_points" => self.scene.min_points = parse(key, v)?,
            "sensor.fans" => sensor.fans = parse(key, v)?,
            "sensor.fan_min_deg" => sensor.fan_min_deg = parse(key, v)?,
            "sensor.fan_max_deg" => sensor.fan_max_deg = parse(key, v)?,
            "sensor.horizontal_resolution_deg" => sensor.horizontal_resolution_deg = parse(key, v)?,
            "sensor.max_range" => sensor.max_range = parse(key, v)?,
            "sensor.height" => sensor.height = parse(key, v)?,

            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.lr_halving_period" => self.train.lr_halving_period = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.lambda" => self.train.loss.lambda = parse(key, v)?,
            "train.temperature" => self.train.loss.temperature = parse(key, v)?,
            "train.label_radius" => self.train.loss.label_radius = parse(key, v)?,
            "train.voxel_size" => self.train.voxel_size = parse(key, v)?,
            "train.augment" => self.train.augment = parse(key, v)?,
            "train.validation_fraction" => self.validation_fraction = parse(key, v)?,

            "pipeline.voxel_size" => self.pipeline.voxel_size = parse(key, v)?,
            "pipeline.temperature" => self.pipeline.temperature = parse(key, v)?,
            "ransac.kappa" => self.pipeline.ransac.inlier_threshold = parse(key, v)?,
            "ransac.confidence" => self.pipeline.ransac.confidence = parse(key, v)?,
            "ransac.max_iterations" => self.pipeline.ransac.max_iterations = parse(key, v)?,
            "icp.max_correspondence_distance" => self.icp.max_correspondence_distance = parse(key, v)?,
            "icp.max_iterations" => self.icp.max_iterations = parse(key, v)?,
            "icp.relative_tolerance" => self.icp.relative_tolerance = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_presets() {
        let s = Settings::parse(
            "# comment\n\nencoder.sa1.radius = 0.5\nmodel.preset = full\nransac.kappa=0.4\nencoder.sa2.widths = 8, 16\n",
        )
        .unwrap();
        assert_eq!(s.model.sa[0].radius, 0.5);
        assert_eq!(s.model.sa[0].num_samples, ModelConfig::full().sa[0].num_samples);
        assert_eq!(s.model.sa[1].widths, vec![8, 16]);
        assert_eq!(s.pipeline.ransac.inlier_threshold, 0.4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Settings::parse("scene.gravity = 9.8\n").unwrap_err().to_string();
        assert!(err.contains("scene.gravity"), "{err}");
        let err = Settings::parse("encoder.sa7.radius = 1\n").unwrap_err().to_string();
        assert!(err.contains("encoder.sa7.radius"), "{err}");
    }

    #[test]
    fn malformed_values_are_rejected() {
        assert!(Settings::parse("train.epochs = many\n").is_err());
        assert!(Settings::parse("no equals sign\n").is_err());
        assert!(Settings::parse("scene.max_sensor_separation = 1000\n").is_err());
    }
}
