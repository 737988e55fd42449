//! Flat `key = value` run configuration.
//!
//! One document carries every knob of every stage (dataset, model,
//! training, evaluation) so that artifacts can embed the exact resolved
//! configuration. Unknown keys are rejected; `#` starts a comment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
        line: usize,
    },
    #[error("line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractMode {
    Index,
    Bilinear,
    Gauss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    Same,
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMode {
    Default,
    Rand,
    Exhaust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeciesSplit {
    /// Test species disjoint from training species.
    Unseen,
    /// Shared species, disjoint images (70/30 by default).
    Seen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTypes {
    Novel,
    Base,
}

/// Resolved configuration for a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // dataset
    pub dataset_seed: u64,
    pub species_count: usize,
    pub images_per_species: usize,
    /// Square padded image edge length l0.
    pub image_size: usize,
    pub novel_types: Vec<String>,
    pub species_split: SpeciesSplit,
    /// Fraction of species held out as unseen test species.
    pub test_species_fraction: f64,
    /// Fraction of images held out for testing in the seen-species split.
    pub holdout_fraction: f64,
    pub leave_one_out: bool,
    pub data_dir: String,
    pub split_file: String,

    // model
    pub model_seed: u64,
    pub patch_size: usize,
    pub channels: usize,
    pub descriptor_dim: usize,
    /// Pooled side r of the descriptor extractor.
    pub descriptor_pool: usize,
    pub head_hidden: usize,
    pub sd_hidden: usize,
    pub group_hidden: usize,
    /// Latent columns d of the per-keypoint covariance factor.
    pub latent_dim: usize,
    pub epsilon: f64,
    pub scales: Vec<usize>,
    pub extract_mode: ExtractMode,
    /// Gaussian pooling width is xi_scale * downsize factor.
    pub xi_scale: f64,
    pub normalize_pooling: bool,

    // training
    pub train_seed: u64,
    pub train_episodes: usize,
    pub learning_rate: f64,
    pub k_shots: usize,
    pub episode_mode: EpisodeMode,
    pub uncertainty: bool,
    pub aux_keypoints: bool,
    /// Keypoints per group (1 disables the group loss).
    pub group_size: usize,
    pub path_mode: PathMode,
    pub interp_nodes: Vec<f64>,
    /// Paths drawn per episode in `rand` mode.
    pub rand_paths: usize,
    pub beta: f64,
    pub alpha_uc: f64,
    pub alpha_cls: f64,
    pub gamma_main: f64,
    pub gamma_aux: f64,
    pub gamma_group: f64,
    pub val_every: usize,
    pub val_episodes: usize,

    // evaluation
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub eval_types: EvalTypes,
    pub tau: f64,
    pub bin_width: f64,
    pub overlay_count: usize,
    pub ukp_episodes: usize,

    // output
    pub out_root: String,
    pub run_name: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_seed: 7,
            species_count: 10,
            images_per_species: 200,
            image_size: 96,
            novel_types: ["knee_fl", "knee_fr", "knee_bl", "knee_br"]
                .map(String::from)
                .to_vec(),
            species_split: SpeciesSplit::Unseen,
            test_species_fraction: 0.2,
            holdout_fraction: 0.3,
            leave_one_out: false,
            data_dir: "data/creatures".into(),
            split_file: "split.json".into(),

            model_seed: 1,
            patch_size: 12,
            channels: 64,
            descriptor_dim: 128,
            descriptor_pool: 2,
            head_hidden: 64,
            sd_hidden: 16,
            group_hidden: 64,
            latent_dim: 8,
            epsilon: 1e-6,
            scales: vec![4, 6, 8],
            extract_mode: ExtractMode::Gauss,
            xi_scale: 14.0,
            normalize_pooling: false,

            train_seed: 3,
            train_episodes: 3000,
            learning_rate: 1e-3,
            k_shots: 1,
            episode_mode: EpisodeMode::Same,
            uncertainty: true,
            aux_keypoints: true,
            group_size: 3,
            path_mode: PathMode::Default,
            interp_nodes: vec![0.25, 0.5, 0.75],
            rand_paths: 6,
            beta: 1.0,
            alpha_uc: 1.0,
            alpha_cls: 1.0,
            gamma_main: 1.0,
            gamma_aux: 1.0,
            gamma_group: 1.0,
            val_every: 1000,
            val_episodes: 20,

            eval_seed: 11,
            eval_episodes: 200,
            eval_types: EvalTypes::Novel,
            tau: 0.1,
            bin_width: 0.05,
            overlay_count: 4,
            ukp_episodes: 1000,

            out_root: "runs".into(),
            run_name: "run".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
    line: usize,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
        line,
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "bool",
            line,
        }),
    }
}

fn parse_list<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
    line: usize,
) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s, expected, line))
        .collect()
}

impl RunConfig {
    /// Parse a `key = value` document on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::BadLine { line });
            };
            config.set(key.trim(), value.trim(), line)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply a single `key=value` override (CLI arguments).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value, 0)?;
        self.validate()
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "dataset_seed" => self.dataset_seed = parse(key, value, "u64", line)?,
            "species_count" => self.species_count = parse(key, value, "usize", line)?,
            "images_per_species" => self.images_per_species = parse(key, value, "usize", line)?,
            "image_size" => self.image_size = parse(key, value, "usize", line)?,
            "novel_types" => {
                self.novel_types = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "species_split" => {
                self.species_split = match value {
                    "unseen" => SpeciesSplit::Unseen,
                    "seen" => SpeciesSplit::Seen,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "unseen|seen",
                            line,
                        })
                    }
                }
            }
            "test_species_fraction" => {
                self.test_species_fraction = parse(key, value, "f64", line)?
            }
            "holdout_fraction" => self.holdout_fraction = parse(key, value, "f64", line)?,
            "leave_one_out" => self.leave_one_out = parse_bool(key, value, line)?,
            "data_dir" => self.data_dir = value.to_string(),
            "split_file" => self.split_file = value.to_string(),

            "model_seed" => self.model_seed = parse(key, value, "u64", line)?,
            "patch_size" => self.patch_size = parse(key, value, "usize", line)?,
            "channels" => self.channels = parse(key, value, "usize", line)?,
            "descriptor_dim" => self.descriptor_dim = parse(key, value, "usize", line)?,
            "descriptor_pool" => self.descriptor_pool = parse(key, value, "usize", line)?,
            "head_hidden" => self.head_hidden = parse(key, value, "usize", line)?,
            "sd_hidden" => self.sd_hidden = parse(key, value, "usize", line)?,
            "group_hidden" => self.group_hidden = parse(key, value, "usize", line)?,
            "latent_dim" => self.latent_dim = parse(key, value, "usize", line)?,
            "epsilon" => self.epsilon = parse(key, value, "f64", line)?,
            "scales" => self.scales = parse_list(key, value, "usize", line)?,
            "extract_mode" => {
                self.extract_mode = match value {
                    "index" => ExtractMode::Index,
                    "bilinear" => ExtractMode::Bilinear,
                    "gauss" => ExtractMode::Gauss,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "index|bilinear|gauss",
                            line,
                        })
                    }
                }
            }
            "xi_scale" => self.xi_scale = parse(key, value, "f64", line)?,
            "normalize_pooling" => self.normalize_pooling = parse_bool(key, value, line)?,

            "train_seed" => self.train_seed = parse(key, value, "u64", line)?,
            "train_episodes" => self.train_episodes = parse(key, value, "usize", line)?,
            "learning_rate" => self.learning_rate = parse(key, value, "f64", line)?,
            "k_shots" => self.k_shots = parse(key, value, "usize", line)?,
            "episode_mode" => {
                self.episode_mode = match value {
                    "same" => EpisodeMode::Same,
                    "mix" => EpisodeMode::Mix,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "same|mix",
                            line,
                        })
                    }
                }
            }
            "uncertainty" => self.uncertainty = parse_bool(key, value, line)?,
            "aux_keypoints" => self.aux_keypoints = parse_bool(key, value, line)?,
            "group_size" => self.group_size = parse(key, value, "usize", line)?,
            "path_mode" => {
                self.path_mode = match value {
                    "default" => PathMode::Default,
                    "rand" => PathMode::Rand,
                    "exhaust" => PathMode::Exhaust,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "default|rand|exhaust",
                            line,
                        })
                    }
                }
            }
            "interp_nodes" => self.interp_nodes = parse_list(key, value, "f64", line)?,
            "rand_paths" => self.rand_paths = parse(key, value, "usize", line)?,
            "beta" => self.beta = parse(key, value, "f64", line)?,
            "alpha_uc" => self.alpha_uc = parse(key, value, "f64", line)?,
            "alpha_cls" => self.alpha_cls = parse(key, value, "f64", line)?,
            "gamma_main" => self.gamma_main = parse(key, value, "f64", line)?,
            "gamma_aux" => self.gamma_aux = parse(key, value, "f64", line)?,
            "gamma_group" => self.gamma_group = parse(key, value, "f64", line)?,
            "val_every" => self.val_every = parse(key, value, "usize", line)?,
            "val_episodes" => self.val_episodes = parse(key, value, "usize", line)?,

            "eval_seed" => self.eval_seed = parse(key, value, "u64", line)?,
            "eval_episodes" => self.eval_episodes = parse(key, value, "usize", line)?,
            "eval_types" => {
                self.eval_types = match value {
                    "novel" => EvalTypes::Novel,
                    "base" => EvalTypes::Base,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            expected: "novel|base",
                            line,
                        })
                    }
                }
            }
            "tau" => self.tau = parse(key, value, "f64", line)?,
            "bin_width" => self.bin_width = parse(key, value, "f64", line)?,
            "overlay_count" => self.overlay_count = parse(key, value, "usize", line)?,
            "ukp_episodes" => self.ukp_episodes = parse(key, value, "usize", line)?,

            "out_root" => self.out_root = value.to_string(),
            "run_name" => self.run_name = value.to_string(),

            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let side = self.feature_side();
        if !side.is_multiple_of(self.descriptor_pool) {
            return fail(format!(
                "feature side {side} must be divisible by descriptor_pool {}",
                self.descriptor_pool
            ));
        }
        if self.scales.is_empty() {
            return fail("scales must be non-empty".into());
        }
        if !(1..=3).contains(&self.group_size) {
            return fail(format!("group_size {} must be 1, 2 or 3", self.group_size));
        }
        if self.latent_dim < 2 {
            return fail(format!("latent_dim {} must be at least 2", self.latent_dim));
        }
        if self.epsilon <= 0.0 {
            return fail(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.k_shots == 0 {
            return fail("k_shots must be at least 1".into());
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if !self.bin_width.is_finite() || self.bin_width <= 0.0 {
            return fail(format!("bin_width {} must be positive", self.bin_width));
        }
        for &t in &self.interp_nodes {
            if !(0.0 < t && t < 1.0) {
                return fail(format!("interpolation node {t} must lie in (0, 1)"));
            }
        }
        if !(0.0 < self.holdout_fraction && self.holdout_fraction < 1.0) {
            return fail(format!(
                "holdout_fraction {} must lie in (0, 1)",
                self.holdout_fraction
            ));
        }
        if !(0.0 < self.test_species_fraction && self.test_species_fraction < 1.0) {
            return fail(format!(
                "test_species_fraction {} must lie in (0, 1)",
                self.test_species_fraction
            ));
        }
        Ok(())
    }

    /// Feature map side l = l0 / patch.
    pub fn feature_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Feature downsize factor f = l / l0.
    pub fn downsize_factor(&self) -> f64 {
        self.feature_side() as f64 / self.image_size as f64
    }

    /// Gaussian pooling width in feature-grid units.
    pub fn pooling_xi(&self) -> f64 {
        self.xi_scale * self.downsize_factor()
    }

    /// Output root honoring the environment override.
    pub fn resolved_out_root(&self) -> String {
        std::env::var("FSKD_OUT_ROOT").unwrap_or_else(|_| self.out_root.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "\n# comment\nscales = 8, 12 , 16\nuncertainty = off\nlearning_rate = 1e-3 # inline\n";
        let c = RunConfig::parse_str(text).unwrap();
        assert_eq!(c.scales, vec![8, 12, 16]);
        assert!(!c.uncertainty);
        assert_eq!(c.learning_rate, 1e-3);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse_str("frobnicator = 3\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { key, line } => {
                assert_eq!(key, "frobnicator");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let err = RunConfig::parse_str("\ntau = soon\n").unwrap_err();
        match err {
            ConfigError::BadValue { key, line, .. } => {
                assert_eq!(key, "tau");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(RunConfig::parse_str("patch_size = 13\n").is_err());
        assert!(RunConfig::parse_str("group_size = 4\n").is_err());
    }

    #[test]
    fn derived_quantities() {
        let c = RunConfig::default();
        assert_eq!(c.feature_side(), 8);
        assert!((c.downsize_factor() - 1.0 / 12.0).abs() < 1e-15);
        assert!((c.pooling_xi() - 14.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}
