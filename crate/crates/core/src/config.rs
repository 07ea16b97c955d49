//! Pipeline thresholds.
//!
//! Every numeric threshold used by the filtering, selection, ROI and
//! evaluation stages lives in [`PipelineConfig`]. Values are layered:
//! built-in defaults, then an optional TOML document, then CLI flags
//! (see [`ConfigOverlay`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Effective thresholds for one run. Immutable once loaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Lower edge of the stem orientation band, degrees (inclusive).
    pub slope_band_low_deg: f64,
    /// Upper edge of the stem orientation band, degrees (inclusive).
    pub slope_band_high_deg: f64,
    /// Segments closer than this to the image border count as "near the border".
    pub boundary_min_px: f64,
    /// Width of the orientation bins used for the mode.
    pub orientation_bin_deg: f64,
    /// Algorithm-vs-manual differences strictly above this are outliers.
    pub outlier_threshold_deg: f64,
    /// Instances scoring below this are ignored.
    pub min_instance_score: f64,
    /// ROI sharpness below this raises the `low_sharpness` flag.
    pub sharpness_warn_threshold: f64,
    /// Padding added around the mask bounding box when cropping the ROI.
    pub roi_padding_px: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            slope_band_low_deg: 80.0,
            slope_band_high_deg: 90.0,
            boundary_min_px: 100.0,
            orientation_bin_deg: 1.0,
            outlier_threshold_deg: 8.0,
            min_instance_score: 0.5,
            sharpness_warn_threshold: 100.0,
            roi_padding_px: 10,
        }
    }
}

/// A partial config: every key optional. Used both for the TOML document and
/// for CLI flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverlay {
    pub slope_band_low_deg: Option<f64>,
    pub slope_band_high_deg: Option<f64>,
    pub boundary_min_px: Option<f64>,
    pub orientation_bin_deg: Option<f64>,
    pub outlier_threshold_deg: Option<f64>,
    pub min_instance_score: Option<f64>,
    pub sharpness_warn_threshold: Option<f64>,
    pub roi_padding_px: Option<u32>,
}

impl ConfigOverlay {
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(source)?)
    }
}

impl PipelineConfig {
    /// Returns a copy with every key present in `overlay` replaced. Does not validate.
    pub fn overlaid(mut self, overlay: &ConfigOverlay) -> Self {
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = overlay.$field { self.$field = v; })*
            };
        }
        apply!(
            slope_band_low_deg,
            slope_band_high_deg,
            boundary_min_px,
            orientation_bin_deg,
            outlier_threshold_deg,
            min_instance_score,
            sharpness_warn_threshold,
            roi_padding_px
        );
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
            ConfigError::Invalid {
                key,
                reason: reason.into(),
            }
        }
        let finite = [
            ("slope_band_low_deg", self.slope_band_low_deg),
            ("slope_band_high_deg", self.slope_band_high_deg),
            ("boundary_min_px", self.boundary_min_px),
            ("orientation_bin_deg", self.orientation_bin_deg),
            ("outlier_threshold_deg", self.outlier_threshold_deg),
            ("min_instance_score", self.min_instance_score),
            ("sharpness_warn_threshold", self.sharpness_warn_threshold),
        ];
        for (key, value) in finite {
            if !value.is_finite() {
                return Err(invalid(key, "must be a finite number"));
            }
        }
        if self.slope_band_low_deg < 0.0 {
            return Err(invalid("slope_band_low_deg", "must be >= 0"));
        }
        if self.slope_band_high_deg > 90.0 {
            return Err(invalid("slope_band_high_deg", "must be <= 90"));
        }
        if self.slope_band_low_deg >= self.slope_band_high_deg {
            let reason = if self.slope_band_low_deg > 90.0 {
                "must be <= 90".to_string()
            } else {
                format!(
                    "must be below slope_band_high_deg ({})",
                    self.slope_band_high_deg
                )
            };
            return Err(invalid("slope_band_low_deg", reason));
        }
        if self.boundary_min_px < 0.0 {
            return Err(invalid("boundary_min_px", "must be >= 0"));
        }
        if self.orientation_bin_deg <= 0.0 {
            return Err(invalid("orientation_bin_deg", "must be > 0"));
        }
        if self.outlier_threshold_deg <= 0.0 {
            return Err(invalid("outlier_threshold_deg", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.min_instance_score) {
            return Err(invalid("min_instance_score", "must lie in [0, 1]"));
        }
        if self.sharpness_warn_threshold < 0.0 {
            return Err(invalid("sharpness_warn_threshold", "must be >= 0"));
        }
        Ok(())
    }

    /// Applies overlays in order (later wins) on top of the defaults and validates.
    pub fn layered(overlays: &[ConfigOverlay]) -> Result<Self, ConfigError> {
        let config = overlays
            .iter()
            .fold(Self::default(), |acc, overlay| acc.overlaid(overlay));
        config.validate()?;
        Ok(config)
    }
}

/// Loads a config from an optional TOML document. Unknown keys are rejected.
pub fn load_config(source: Option<&str>) -> Result<PipelineConfig, ConfigError> {
    let overlay = match source {
        Some(text) => ConfigOverlay::from_toml(text)?,
        None => ConfigOverlay::default(),
    };
    PipelineConfig::layered(&[overlay])
}
