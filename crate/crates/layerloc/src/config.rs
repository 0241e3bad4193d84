//! Experiment configuration: one TOML file, unknown keys rejected, plus two
//! shipped presets. Flags given on the command line override file values.

use layerloc_core::detect::{DetectConfig, LossWeights};
use layerloc_core::explain::{LimeConfig, Method};
use layerloc_core::rng::derive_seed;
use layerloc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ShapeSpec;

pub const PRESET_LOCALISE: &str = include_str!("../presets/preset-localise.toml");
pub const PRESET_DETECT: &str = include_str!("../presets/preset-detect.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("config: cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_owned(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: String,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub explain: ExplainSection,
    pub detect: DetectSection,
    #[serde(default)]
    pub granulometry: GranulometrySection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_images: usize,
    pub classes: usize,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    /// Use the small-box size range instead of `shape.size_min/size_max`.
    #[serde(default)]
    pub small_box: bool,
    pub shape: ShapeSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optim {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub patience: usize,
}

impl Optim {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
            patience: self.patience,
        }
    }

    fn validate(&self, key: &str) -> Result<(), ConfigError> {
        self.to_train_config(0)
            .validate()
            .map_err(|e| invalid(key, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Cascade split count.
    pub k: usize,
    pub e2e: Optim,
    pub cl: Optim,
    /// Per-tap probe classifiers.
    pub probe: Optim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    /// A probe trained at the explained tap.
    Probe,
    /// The network's own classifier.
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimeSection {
    pub samples: usize,
    pub ridge_lambda: f64,
    pub keep_prob: f64,
    pub top_k: usize,
    pub patch: usize,
}

impl LimeSection {
    pub fn to_lime_config(&self) -> LimeConfig {
        LimeConfig {
            samples: self.samples,
            ridge_lambda: self.ridge_lambda,
            keep_prob: self.keep_prob,
            top_k: self.top_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub methods: Vec<String>,
    pub taps: Vec<usize>,
    pub percentile: f64,
    /// Gaussian smoothing width in pixels; 0 disables smoothing.
    pub sigma: f64,
    /// How many test images to explain (the first ones by id).
    pub images: usize,
    pub scorer: ScorerKind,
    pub lime: LimeSection,
}

impl ExplainSection {
    pub fn methods(&self) -> Vec<Method> {
        self.methods.iter().filter_map(|m| Method::parse(m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    pub grid: usize,
    pub boxes: usize,
    pub taps: Vec<usize>,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// Number of head seeds in the mean/std table.
    pub seeds: usize,
    pub optim: Optim,
}

impl DetectSection {
    pub fn to_detect_config(&self, seed: u64) -> DetectConfig {
        DetectConfig {
            grid: self.grid,
            boxes: self.boxes,
            weights: LossWeights {
                coord: self.lambda_coord,
                noobj: self.lambda_noobj,
            },
            train: self.optim.to_train_config(seed),
            cache_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranulometrySection {
    pub max_size: usize,
}

impl Default for GranulometrySection {
    fn default() -> Self {
        Self { max_size: 8 }
    }
}

/// Named seeds derived from the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubSeeds {
    pub data: u64,
    pub splits: u64,
    pub init: u64,
    pub lime: u64,
    pub detect: u64,
}

impl SubSeeds {
    pub fn from_global(seed: u64) -> Self {
        Self {
            data: derive_seed(seed, "data"),
            splits: derive_seed(seed, "splits"),
            init: derive_seed(seed, "init"),
            lime: derive_seed(seed, "lime"),
            detect: derive_seed(seed, "detect"),
        }
    }

    pub fn header(&self) -> String {
        format!(
            "data={} splits={} init={} lime={} detect={}",
            self.data, self.splits, self.init, self.lime, self.detect
        )
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(source: &str) -> Result<Self, ConfigError> {
        match source {
            "preset-localise" => Self::parse(PRESET_LOCALISE),
            "preset-detect" => Self::parse(PRESET_DETECT),
            path => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_owned(),
                    source,
                })?;
                Self::parse(&text)
            }
        }
    }

    pub fn seeds(&self) -> SubSeeds {
        SubSeeds::from_global(self.seed)
    }

    pub fn shape_spec(&self) -> ShapeSpec {
        if self.dataset.small_box {
            ShapeSpec {
                channels: self.dataset.shape.channels,
                noise: self.dataset.shape.noise,
                distractors: self.dataset.shape.distractors,
                intensity_min: self.dataset.shape.intensity_min,
                intensity_max: self.dataset.shape.intensity_max,
                ..ShapeSpec::small_box(self.dataset.shape.edge)
            }
        } else {
            self.dataset.shape.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Short hash of the canonical serialisation, recorded in every report.
    /// The output directory is left out: it does not affect any result.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out.clear();
        crate::weights::sha256_hex(c.to_toml().as_bytes())[..16].to_owned()
    }

    pub fn tap_count(&self) -> usize {
        self.model.widths.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.classes == 0 || d.classes > crate::data::ShapeKind::ALL.len() {
            return Err(invalid("dataset.classes", format!("must lie in 1..={}", crate::data::ShapeKind::ALL.len())));
        }
        if d.fractions.iter().any(|f| !(*f >= 0.0)) || (d.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("dataset.fractions", "must be non-negative and sum to 1"));
        }
        self.shape_spec()
            .validate()
            .map_err(|e| invalid("dataset.shape", e.to_string()))?;
        if self.model.widths.len() != 6 || self.model.widths.contains(&0) {
            return Err(invalid("model.widths", "expected six positive conv widths"));
        }
        let taps = self.tap_count();
        if self.train.k == 0 || self.train.k > taps {
            return Err(invalid("train.k", format!("must lie in 1..={taps}")));
        }
        self.train.e2e.validate("train.e2e")?;
        self.train.cl.validate("train.cl")?;
        self.train.probe.validate("train.probe")?;
        let e = &self.explain;
        if let Some(m) = e.methods.iter().find(|m| Method::parse(m).is_none()) {
            return Err(invalid("explain.methods", format!("unknown method `{m}` (saliency, gradcam, lime)")));
        }
        if let Some(t) = e.taps.iter().find(|&&t| t == 0 || t > taps) {
            return Err(invalid("explain.taps", format!("tap {t} outside 1..={taps}")));
        }
        if !(e.percentile > 0.0 && e.percentile < 100.0) {
            return Err(invalid("explain.percentile", "must lie in (0, 100)"));
        }
        if !(e.sigma >= 0.0 && e.sigma.is_finite()) {
            return Err(invalid("explain.sigma", "must be finite and non-negative"));
        }
        let l = &e.lime;
        if l.samples < 2 || !(0.0..=1.0).contains(&l.keep_prob) || l.ridge_lambda < 0.0 {
            return Err(invalid("explain.lime", "needs samples >= 2, keep_prob in [0, 1], ridge_lambda >= 0"));
        }
        let edge = self.shape_spec().edge;
        if l.patch == 0 || l.patch > edge {
            return Err(invalid("explain.lime.patch", format!("must lie in 1..={edge}")));
        }
        let patches = (edge / l.patch).pow(2);
        if l.top_k > patches {
            return Err(invalid("explain.lime.top_k", format!("exceeds the {patches} patches")));
        }
        let det = &self.detect;
        if det.grid == 0 || det.boxes == 0 || det.seeds == 0 {
            return Err(invalid("detect", "grid, boxes and seeds must be positive"));
        }
        if let Some(t) = det.taps.iter().find(|&&t| t == 0 || t > taps) {
            return Err(invalid("detect.taps", format!("tap {t} outside 1..={taps}")));
        }
        if !(0.0..=1.0).contains(&det.conf_threshold) || !(0.0..=1.0).contains(&det.nms_threshold) {
            return Err(invalid("detect", "thresholds must lie in [0, 1]"));
        }
        det.optim.validate("detect.optim")?;
        if self.granulometry.max_size == 0 {
            return Err(invalid("granulometry.max_size", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let l = ExperimentConfig::load("preset-localise").unwrap();
        let d = ExperimentConfig::load("preset-detect").unwrap();
        assert_eq!(l.tap_count(), 6);
        assert_eq!(d.tap_count(), 6);
        assert_eq!(ExperimentConfig::parse(&l.to_toml()).unwrap(), l);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = PRESET_LOCALISE.replace("[model]", "[model]\nwidht = 3");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("widht"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let text = PRESET_LOCALISE.replace("k = 6", "k = 9");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("train.k"), "{err}");
    }

    #[test]
    fn sub_seeds_differ() {
        let s = SubSeeds::from_global(1);
        let all = [s.data, s.splits, s.init, s.lime, s.detect];
        for i in 0..all.len() {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
