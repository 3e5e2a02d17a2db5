//! End-to-end run configuration and the named presets.
//!
//! A run is described by one TOML document. Unknown keys are rejected and
//! every seed must be given explicitly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageConfig, Roi};
use crate::error::{Error, ParseError, Result};
use crate::fixedpoint::FixedFormat;
use crate::polymlp::PolyMlpConfig;
use crate::threshold::{DEFAULT_ROI_HEIGHT, DEFAULT_ROI_WIDTH};
use crate::timingsim::{
    DnnLatencyProfile, TimingConfig, CALIBRATED_SLOTS, DEFAULT_EXPOSURE_S, DEFAULT_FPGA_CLOCK_HZ,
    DEFAULT_FRAME_TRANSFER_S, DEFAULT_PIXEL_CLOCK_HZ,
};
use crate::vit::VitConfig;

pub const PRESET_NAMES: [&str; 2] = ["paper-1qubit", "paper-3qubit"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSettings {
    pub roi_width: usize,
    pub roi_height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSettings {
    /// `T.F` descriptor.
    pub format: FixedFormat,
}

/// Camera-link and FPGA clocking; the frame size comes from `dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSettings {
    pub pixel_clock_hz: u64,
    pub slots_per_line: u32,
    pub exposure_s: f64,
    pub frame_transfer_s: f64,
    pub fpga_clock_hz: u64,
    pub fifo_stall_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset label in reports.
    pub name: String,
    /// Dataset seed.
    pub seed: u64,
    pub n_images: usize,
    /// Fraction of images in the training split.
    pub split_ratio: f64,
    /// Training images given to the neural trainers, taken from the front
    /// of the training split; 0 uses all of it.
    pub dnn_train_images: usize,
    pub dataset: ImageConfig,
    pub threshold: ThresholdSettings,
    pub mlp: PolyMlpConfig,
    pub vit: VitConfig,
    pub fixed: FixedSettings,
    pub timing: TimingSettings,
}

impl Default for TimingSettings {
    fn default() -> Self {
        TimingSettings {
            pixel_clock_hz: DEFAULT_PIXEL_CLOCK_HZ,
            slots_per_line: CALIBRATED_SLOTS,
            exposure_s: DEFAULT_EXPOSURE_S,
            frame_transfer_s: DEFAULT_FRAME_TRANSFER_S,
            fpga_clock_hz: DEFAULT_FPGA_CLOCK_HZ,
            fifo_stall_cycles: 0,
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        let (label, seed, n_images, dataset, vit) = match name {
            "paper-1qubit" => ("1-qubit", 0x1_0B17, 6_500, ImageConfig::one_qubit(), VitConfig::one_qubit()),
            "paper-3qubit" => ("3-qubit", 0x3_0B17, 100_000, ImageConfig::three_qubit(), VitConfig::three_qubit()),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(RunConfig {
            name: label.into(),
            seed,
            n_images,
            split_ratio: 0.9,
            dnn_train_images: 0,
            dataset,
            threshold: ThresholdSettings {
                roi_width: DEFAULT_ROI_WIDTH,
                roi_height: DEFAULT_ROI_HEIGHT,
            },
            mlp: PolyMlpConfig::default(),
            vit,
            fixed: FixedSettings {
                format: FixedFormat::Q16_8,
            },
            timing: TimingSettings::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.n_images < 10 {
            return Err(Error::Config(format!("n_images {} is below 10", self.n_images)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio {} must lie in (0, 1)", self.split_ratio)));
        }
        if self.threshold.roi_width == 0 || self.threshold.roi_height == 0 {
            return Err(Error::Config("ROI sides must be positive".into()));
        }
        let (h, w) = (self.dataset.height, self.dataset.width);
        self.mlp.validate(h * w, self.dataset.n_classes())?;
        self.vit.validate()?;
        if (self.vit.height, self.vit.width) != (h, w) {
            return Err(Error::Config(format!(
                "vit expects {}x{} images, dataset makes {h}x{w}",
                self.vit.height, self.vit.width
            )));
        }
        if self.vit.n_classes != self.dataset.n_classes() {
            return Err(Error::Config(format!(
                "vit has {} classes, dataset has {}",
                self.vit.n_classes,
                self.dataset.n_classes()
            )));
        }
        self.timing_config(&DnnLatencyProfile::mlp())?.validate()
    }

    pub fn rois(&self) -> Vec<Roi> {
        let cfg = &self.dataset;
        cfg.ion_centers
            .iter()
            .map(|&c| Roi::centered(c, self.threshold.roi_width, self.threshold.roi_height, (cfg.height, cfg.width)))
            .collect()
    }

    /// The transformer latency profile matching the ion count.
    pub fn vit_profile(&self) -> DnnLatencyProfile {
        if self.dataset.n_ions() == 1 {
            DnnLatencyProfile::vit_one_qubit()
        } else {
            DnnLatencyProfile::vit_three_qubit()
        }
    }

    pub fn timing_config(&self, profile: &DnnLatencyProfile) -> Result<TimingConfig> {
        let t = &self.timing;
        let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Config(format!("image side {v} too large")));
        Ok(TimingConfig {
            pixel_clock_hz: t.pixel_clock_hz,
            slots_per_line: t.slots_per_line,
            height: dim(self.dataset.height)?,
            width: dim(self.dataset.width)?,
            exposure_s: t.exposure_s,
            frame_transfer_s: t.frame_transfer_s,
            fpga_clock_hz: t.fpga_clock_hz,
            dnn_cycles: profile.cycles,
            fifo_stall_cycles: t.fifo_stall_cycles,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Parses and validates a configuration document.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            Error::Parse(ParseError::Malformed {
                what: "run config",
                detail: e.message().to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESET_NAMES {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn presets_use_module_defaults() {
        let c3 = RunConfig::preset("paper-3qubit").unwrap();
        assert_eq!(c3.dataset, ImageConfig::three_qubit());
        assert_eq!(c3.vit, VitConfig::three_qubit());
        assert_eq!(c3.mlp, PolyMlpConfig::default());
        assert_eq!(c3.n_images, 100_000);
        assert_eq!(c3.fixed.format.to_string(), "16.8");
        let c1 = RunConfig::preset("paper-1qubit").unwrap();
        assert_eq!(c1.n_images, 6_500);
        assert_eq!(c1.vit_profile().cycles, 4054);
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let mut text = RunConfig::preset("paper-1qubit").unwrap().to_toml();
        text = text.replacen("split_ratio", "bogus_key = 1\nsplit_ratio", 1);
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn missing_seed_is_rejected() {
        let text = RunConfig::preset("paper-1qubit").unwrap().to_toml();
        let without: String = text.lines().filter(|l| !l.starts_with("seed =")).map(|l| format!("{l}\n")).collect();
        let err = RunConfig::from_toml_str(&without).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut cfg = RunConfig::preset("paper-3qubit").unwrap();
        cfg.vit = VitConfig::one_qubit();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::preset("paper-1qubit").unwrap();
        cfg.timing.slots_per_line = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_format_descriptor_is_rejected() {
        let text = RunConfig::preset("paper-1qubit")
            .unwrap()
            .to_toml()
            .replace("format = \"16.8\"", "format = \"16-8\"");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }
}
