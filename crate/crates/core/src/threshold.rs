//! ROI photon-count thresholding, the conventional baseline.
//!
//! Each ion gets its own region of interest and a cutoff calibrated on
//! labeled training images; an ion reads bright when its ROI sum is at or
//! above the cutoff.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageConfig, IonImage, QubitState, Roi};
use crate::error::{Error, ParseError, Result};

pub const DEFAULT_ROI_WIDTH: usize = 4;
pub const DEFAULT_ROI_HEIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonThreshold {
    pub index: usize,
    pub roi: Roi,
    pub threshold: u64,
    pub calibration_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdModel {
    #[serde(rename = "ion")]
    pub ions: Vec<IonThreshold>,
}

/// Balanced per-class accuracy of cutoff `t` over sorted populations.
fn fidelity_at(t: u64, bright: &[u64], dark: &[u64]) -> f64 {
    let bright_hits = bright.len() - bright.partition_point(|&c| c < t);
    let dark_hits = dark.partition_point(|&c| c < t);
    (bright_hits as f64 / bright.len() as f64 + dark_hits as f64 / dark.len() as f64) / 2.0
}

/// Cutoff maximizing `(p(c >= t | bright) + p(c < t | dark)) / 2`, smallest
/// such cutoff on ties, with its fidelity.
///
/// The objective only changes at an observed count `c` (bright side) or at
/// `c + 1` (dark side), so those are the candidates.
pub fn calibrate(bright_counts: &[u64], dark_counts: &[u64]) -> Result<(u64, f64)> {
    if bright_counts.is_empty() || dark_counts.is_empty() {
        return Err(Error::Calibration(format!(
            "need both populations, got {} bright and {} dark",
            bright_counts.len(),
            dark_counts.len()
        )));
    }
    let mut bright = bright_counts.to_vec();
    let mut dark = dark_counts.to_vec();
    bright.sort_unstable();
    dark.sort_unstable();
    let mut candidates: Vec<u64> = bright
        .iter()
        .chain(&dark)
        .flat_map(|&c| [c, c.saturating_add(1)])
        .collect();
    candidates.sort_unstable();
    candidates.dedup();

    let mut best = (candidates[0], f64::NEG_INFINITY);
    for t in candidates {
        let f = fidelity_at(t, &bright, &dark);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

/// Default 4-wide, 8-tall ROIs around every ion of `cfg`.
pub fn default_rois(cfg: &ImageConfig) -> Vec<Roi> {
    cfg.ion_centers
        .iter()
        .map(|&c| Roi::centered(c, DEFAULT_ROI_WIDTH, DEFAULT_ROI_HEIGHT, (cfg.height, cfg.width)))
        .collect()
}

/// Calibrates one cutoff per ROI from labeled images.
pub fn calibrate_model(images: &[IonImage], rois: &[Roi]) -> Result<ThresholdModel> {
    let mut ions = Vec::with_capacity(rois.len());
    for (index, &roi) in rois.iter().enumerate() {
        let (mut bright, mut dark) = (Vec::new(), Vec::new());
        for img in images {
            if img.label.n_ions() != rois.len() {
                return Err(Error::Calibration(format!(
                    "image labeled for {} ions, {} ROIs given",
                    img.label.n_ions(),
                    rois.len()
                )));
            }
            let sum = img.roi_sum(roi)?;
            if img.label.is_bright(index) {
                bright.push(sum);
            } else {
                dark.push(sum);
            }
        }
        let (threshold, calibration_fidelity) = calibrate(&bright, &dark)
            .map_err(|e| Error::Calibration(format!("ion {index}: {e}")))?;
        ions.push(IonThreshold {
            index,
            roi,
            threshold,
            calibration_fidelity,
        });
    }
    Ok(ThresholdModel { ions })
}

impl ThresholdModel {
    pub fn n_ions(&self) -> usize {
        self.ions.len()
    }

    /// Ion `i` is bright iff its ROI sum is at least its cutoff.
    pub fn classify(&self, image: &IonImage) -> Result<QubitState> {
        if image.label.n_ions() != self.n_ions() {
            return Err(Error::Classification(format!(
                "model has {} ROIs, image carries {} ions",
                self.n_ions(),
                image.label.n_ions()
            )));
        }
        let mut bits = 0u32;
        for (i, ion) in self.ions.iter().enumerate() {
            let sum = image
                .roi_sum(ion.roi)
                .map_err(|e| Error::Classification(e.to_string()))?;
            if sum >= ion.threshold {
                bits |= 1 << i;
            }
        }
        QubitState::new(self.n_ions(), bits)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("threshold model serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ParseError> {
        let model: ThresholdModel = toml::from_str(text).map_err(|e| ParseError::Malformed {
            what: "threshold model",
            detail: e.message().to_string(),
        })?;
        if model.ions.is_empty() || model.ions.len() > 8 {
            return Err(ParseError::Malformed {
                what: "threshold model",
                detail: format!("1..=8 ions supported, got {}", model.ions.len()),
            });
        }
        for (i, ion) in model.ions.iter().enumerate() {
            if ion.index != i {
                return Err(ParseError::Malformed {
                    what: "threshold model",
                    detail: format!("ion entry {i} carries index {}", ion.index),
                });
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_toml_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset_with_threads, roi_sums};
    use proptest::prelude::*;

    #[test]
    fn separated_populations_pick_smallest_perfect_cutoff() {
        assert_eq!(calibrate(&[100, 110], &[10, 20]).unwrap(), (21, 1.0));
    }

    #[test]
    fn identical_populations_give_half() {
        let (_, f) = calibrate(&[50], &[50]).unwrap();
        assert_eq!(f, 0.5);
    }

    #[test]
    fn empty_population_fails() {
        assert!(matches!(calibrate(&[], &[1]), Err(Error::Calibration(_))));
        assert!(matches!(calibrate(&[1], &[]), Err(Error::Calibration(_))));
    }

    fn sweep_oracle(bright: &[u64], dark: &[u64]) -> (u64, f64) {
        let lo = *bright.iter().chain(dark).min().unwrap();
        let hi = *bright.iter().chain(dark).max().unwrap() + 1;
        let mut best = (lo, f64::NEG_INFINITY);
        for t in lo..=hi {
            let b = bright.iter().filter(|&&c| c >= t).count() as f64 / bright.len() as f64;
            let d = dark.iter().filter(|&&c| c < t).count() as f64 / dark.len() as f64;
            let f = (b + d) / 2.0;
            if f > best.1 {
                best = (t, f);
            }
        }
        best
    }

    #[test]
    fn synthetic_three_qubit_matches_exhaustive_sweep() {
        let cfg = ImageConfig::three_qubit();
        let ds = build_dataset_with_threads(&cfg, 4000, 0.9, 21, 0).unwrap();
        for (i, roi) in default_rois(&cfg).into_iter().enumerate() {
            let sums = roi_sums(&ds.train, roi).unwrap();
            let (bright, dark): (Vec<_>, Vec<_>) = ds
                .train
                .iter()
                .zip(&sums)
                .partition(|(img, _)| img.label.is_bright(i));
            let bright: Vec<u64> = bright.into_iter().map(|(_, &s)| s).collect();
            let dark: Vec<u64> = dark.into_iter().map(|(_, &s)| s).collect();
            let got = calibrate(&bright, &dark).unwrap();
            let want = sweep_oracle(&bright, &dark);
            assert_eq!(got.0, want.0);
            assert_eq!(got.1, want.1);
        }
    }

    fn image(sums_at: &[(usize, u16)], n_ions: usize) -> IonImage {
        let mut pixels = vec![0u16; 12 * 24];
        for &(col, v) in sums_at {
            pixels[6 * 24 + col] = v;
        }
        IonImage {
            height: 12,
            width: 24,
            pixels,
            label: QubitState::new(n_ions, 0).unwrap(),
        }
    }

    fn model(thresholds: &[u64]) -> ThresholdModel {
        let rois = default_rois(&ImageConfig::three_qubit());
        ThresholdModel {
            ions: thresholds
                .iter()
                .zip(rois)
                .enumerate()
                .map(|(index, (&threshold, roi))| IonThreshold {
                    index,
                    roi,
                    threshold,
                    calibration_fidelity: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn classify_examples() {
        let m = model(&[1, 1, 1]);
        assert_eq!(m.classify(&image(&[], 3)).unwrap().bits(), 0);

        let m = model(&[100, 100, 100]);
        let s = m.classify(&image(&[(7, 500), (17, 500)], 3)).unwrap();
        assert_eq!(s.to_string(), "101");

        assert!(matches!(m.classify(&image(&[], 1)), Err(Error::Classification(_))));
    }

    #[test]
    fn model_text_round_trip_and_rejections() {
        let m = model(&[10, 20, 30]);
        let text = m.to_toml();
        assert!(text.contains("threshold = 20"));
        assert_eq!(ThresholdModel::from_toml_str(&text).unwrap(), m);
        assert!(ThresholdModel::from_toml_str(&text.replace("threshold =", "thresh =")).is_err());
        assert!(ThresholdModel::from_toml_str("").is_err());
    }

    proptest! {
        #[test]
        fn calibration_is_optimal_over_candidates(
            bright in prop::collection::vec(0u64..300, 1..40),
            dark in prop::collection::vec(0u64..300, 1..40),
        ) {
            let (t, f) = calibrate(&bright, &dark).unwrap();
            let (ot, of) = sweep_oracle(&bright, &dark);
            prop_assert_eq!((t, f), (ot, of));
        }

        #[test]
        fn brightening_a_bright_roi_keeps_it_bright(
            base in 0u16..200, boost in 0u16..200, t in 0u64..3000,
        ) {
            let m = model(&[t, t, t]);
            let mut img = image(&[], 3);
            img.pixels.iter_mut().for_each(|p| *p = base);
            let before = m.classify(&img).unwrap();
            let roi = m.ions[1].roi;
            for r in roi.row0..roi.row0 + roi.height {
                for c in roi.col0..roi.col0 + roi.width {
                    img.pixels[r * 24 + c] += boost;
                }
            }
            let after = m.classify(&img).unwrap();
            if before.is_bright(1) {
                prop_assert!(after.is_bright(1));
            }
        }
    }
}
