//! Run configuration: a flat `key=value` text format covering every
//! network, detection, training, and evaluation constant. Unknown keys are
//! rejected so typos cannot silently fall back to defaults, and the
//! effective configuration can be echoed back as a manifest that parses to
//! the same values.

use crate::evalmatch::{DetectionParams, MetricsOptions};
use crate::geometry::TrainingRanges;
use crate::network::NetworkConfig;
use crate::train::{AdamOptions, TrainOptions};
use crate::{Error, Result};

/// Every tunable constant of a run, parseable from `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub detection: DetectionParams,
    pub adam: AdamOptions,
    pub lambda_peak: f32,
    pub peak_block: usize,
    pub margin: f32,
    pub triplet_k: usize,
    pub ranges: TrainingRanges,
    pub exposure_jitter: bool,
    pub seed: u64,
    pub epochs: usize,
    pub sample_count: usize,
    pub image_size: usize,
    pub adaptation_rounds: usize,
    pub metrics: MetricsOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            detection: DetectionParams::default(),
            adam: AdamOptions::default(),
            lambda_peak: 0.1,
            peak_block: 5,
            margin: 1.0,
            triplet_k: 32,
            ranges: TrainingRanges::default(),
            exposure_jitter: true,
            seed: 0,
            epochs: 5,
            sample_count: 500,
            image_size: 64,
            adaptation_rounds: 25,
            metrics: MetricsOptions::default(),
        }
    }
}

/// Key order used by the manifest; also the authoritative list of
/// recognized keys.
const KEYS: &[&str] = &[
    "stem_channels",
    "block_channels",
    "aggregate_channels",
    "descriptor_dim",
    "detector_mid_channels",
    "width_multiplier",
    "threshold",
    "nms_radius",
    "max_keypoints",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "lambda_peak",
    "peak_block",
    "margin",
    "triplet_k",
    "perspective_range",
    "rotation_range",
    "scale_range",
    "translation_range",
    "exposure_jitter",
    "seed",
    "epochs",
    "sample_count",
    "image_size",
    "adaptation_rounds",
    "eps_repeatability",
    "eps_homography",
    "ransac_iters",
    "ransac_seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("invalid value {other:?} for key {key:?} (expected true/false)"))),
    }
}

fn parse_blocks(value: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "block_channels needs exactly 4 comma-separated values, got {value:?}"
        )));
    }
    let mut out = [0usize; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = parse_num("block_channels", part)?;
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stem_channels" => self.network.stem_channels = parse_num(key, value)?,
            "block_channels" => self.network.block_channels = parse_blocks(value)?,
            "aggregate_channels" => self.network.aggregate_channels = parse_num(key, value)?,
            "descriptor_dim" => self.network.descriptor_dim = parse_num(key, value)?,
            "detector_mid_channels" => self.network.detector_mid_channels = parse_num(key, value)?,
            "width_multiplier" => self.network.width_multiplier = parse_num(key, value)?,
            "threshold" => self.detection.threshold = parse_num(key, value)?,
            "nms_radius" => self.detection.nms_radius = parse_num(key, value)?,
            "max_keypoints" => self.detection.max_keypoints = parse_num(key, value)?,
            "learning_rate" => self.adam.lr = parse_num(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam.eps = parse_num(key, value)?,
            "lambda_peak" => self.lambda_peak = parse_num(key, value)?,
            "peak_block" => self.peak_block = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "triplet_k" => self.triplet_k = parse_num(key, value)?,
            "perspective_range" => self.ranges.perspective = parse_num(key, value)?,
            "rotation_range" => self.ranges.rotation = parse_num(key, value)?,
            "scale_range" => self.ranges.scale = parse_num(key, value)?,
            "translation_range" => self.ranges.translation = parse_num(key, value)?,
            "exposure_jitter" => self.exposure_jitter = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "sample_count" => self.sample_count = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "adaptation_rounds" => self.adaptation_rounds = parse_num(key, value)?,
            "eps_repeatability" => self.metrics.eps_rep = parse_num(key, value)?,
            "eps_homography" => self.metrics.eps_hom = parse_num(key, value)?,
            "ransac_iters" => self.metrics.ransac_iters = parse_num(key, value)?,
            "ransac_seed" => self.metrics.ransac_seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Reads one value back as text (manifest form).
    fn get(&self, key: &str) -> String {
        match key {
            "stem_channels" => self.network.stem_channels.to_string(),
            "block_channels" => {
                let b = self.network.block_channels;
                format!("{},{},{},{}", b[0], b[1], b[2], b[3])
            }
            "aggregate_channels" => self.network.aggregate_channels.to_string(),
            "descriptor_dim" => self.network.descriptor_dim.to_string(),
            "detector_mid_channels" => self.network.detector_mid_channels.to_string(),
            "width_multiplier" => self.network.width_multiplier.to_string(),
            "threshold" => self.detection.threshold.to_string(),
            "nms_radius" => self.detection.nms_radius.to_string(),
            "max_keypoints" => self.detection.max_keypoints.to_string(),
            "learning_rate" => self.adam.lr.to_string(),
            "adam_beta1" => self.adam.beta1.to_string(),
            "adam_beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "lambda_peak" => self.lambda_peak.to_string(),
            "peak_block" => self.peak_block.to_string(),
            "margin" => self.margin.to_string(),
            "triplet_k" => self.triplet_k.to_string(),
            "perspective_range" => self.ranges.perspective.to_string(),
            "rotation_range" => self.ranges.rotation.to_string(),
            "scale_range" => self.ranges.scale.to_string(),
            "translation_range" => self.ranges.translation.to_string(),
            "exposure_jitter" => self.exposure_jitter.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "sample_count" => self.sample_count.to_string(),
            "image_size" => self.image_size.to_string(),
            "adaptation_rounds" => self.adaptation_rounds.to_string(),
            "eps_repeatability" => self.metrics.eps_rep.to_string(),
            "eps_homography" => self.metrics.eps_hom.to_string(),
            "ransac_iters" => self.metrics.ransac_iters.to_string(),
            "ransac_seed" => self.metrics.ransac_seed.to_string(),
            other => unreachable!("key {other:?} is in KEYS but not handled"),
        }
    }

    /// Parses a whole configuration text. Lines are `key=value`; blank
    /// lines and lines starting with `#` are skipped; later assignments
    /// override earlier ones. Unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply(text)?;
        Ok(config)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Full `key=value` echo of the effective configuration, one key per
    /// line in a fixed order. `parse(manifest())` reproduces the config.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key));
            out.push('\n');
        }
        out
    }

    /// Training knobs assembled from the relevant fields.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            adam: self.adam,
            lambda_peak: self.lambda_peak,
            peak_block: self.peak_block,
            margin: self.margin,
            triplet_k: self.triplet_k,
            detection: self.detection,
            ranges: self.ranges.clone(),
            exposure_jitter: self.exposure_jitter,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_component_defaults() {
        let config = RunConfig::default();
        assert_eq!(config.network.descriptor_dim, 256);
        assert_eq!(config.detection.nms_radius, 4);
        assert!((config.adam.lr - 1e-3).abs() < 1e-12);
        assert!((config.metrics.eps_rep - 3.0).abs() < 1e-12);
        assert!((config.metrics.eps_hom - 5.0).abs() < 1e-12);
    }

    #[test]
    fn parse_applies_values_and_skips_comments() {
        let text = "\n# detector settings\nthreshold=0.25\nnms_radius = 2\n\nwidth_multiplier=0.5\nblock_channels=8, 16, 32, 64\nexposure_jitter=false\n";
        let config = RunConfig::parse(text).unwrap();
        assert!((config.detection.threshold - 0.25).abs() < 1e-7);
        assert_eq!(config.detection.nms_radius, 2);
        assert!((config.network.width_multiplier - 0.5).abs() < 1e-12);
        assert_eq!(config.network.block_channels, [8, 16, 32, 64]);
        assert!(!config.exposure_jitter);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("thresold=0.3\n").unwrap_err();
        let message = err.to_string();
        assert!(message.contains("thresold"), "error should name the bad key: {message}");
    }

    #[test]
    fn malformed_values_are_rejected() {
        assert!(RunConfig::parse("threshold=abc\n").is_err());
        assert!(RunConfig::parse("block_channels=1,2,3\n").is_err());
        assert!(RunConfig::parse("exposure_jitter=yes\n").is_err());
        assert!(RunConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn later_assignments_override_earlier_ones() {
        let config = RunConfig::parse("seed=1\nseed=2\n").unwrap();
        assert_eq!(config.seed, 2);
    }

    #[test]
    fn manifest_round_trips() {
        let mut config = RunConfig::default();
        config.set("width_multiplier", "0.25").unwrap();
        config.set("epochs", "7").unwrap();
        config.set("eps_homography", "4.5").unwrap();
        config.set("exposure_jitter", "false").unwrap();
        let echoed = RunConfig::parse(&config.manifest()).unwrap();
        assert_eq!(echoed, config);
    }

    #[test]
    fn manifest_lists_every_key_once() {
        let manifest = RunConfig::default().manifest();
        for key in KEYS {
            let hits = manifest.lines().filter(|l| l.starts_with(&format!("{key}="))).count();
            assert_eq!(hits, 1, "key {key} should appear exactly once");
        }
        assert_eq!(manifest.lines().count(), KEYS.len());
    }
}
