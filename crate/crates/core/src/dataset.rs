//! Synthetic EMCCD ion images: rendering, labeling, persistence and ROI
//! photon-count histograms.
//!
//! Each image is built in three steps. Bright ions contribute a Gaussian
//! point-spread function; every pixel of that signal is scaled by an
//! independent unit-mean shot-noise factor `k / λ` with `k ~ Poisson(λ)`;
//! finally additive Gaussian background is applied to every pixel and the
//! result is rounded half away from zero and clamped to the pixel depth.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, VecWrite};
use crate::error::{Error, ParseError, Result};
use crate::parallel::{configured_threads, derive_seed, map_indexed};

pub const DATASET_MAGIC: &[u8; 4] = b"QIMG";
pub const DATASET_VERSION: u16 = 1;

/// Center-to-center ion spacing, in pixels, of the canonical chain layout.
pub const ION_SPACING: f64 = 5.0;

const LABEL_STREAM: u64 = 1;
const IMAGE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    /// `(row, col)` of each ion, sub-pixel allowed.
    pub ion_centers: Vec<(f64, f64)>,
    pub psf_sigma: f64,
    pub psf_amplitude: f64,
    pub poisson_lambda: f64,
    pub bg_mean: f64,
    pub bg_sigma: f64,
    pub pixel_depth: u8,
}

impl ImageConfig {
    /// Chain of `n_ions` on the middle row, `ION_SPACING` apart and centered
    /// on the middle column, with the default noise parameters. Centers that
    /// would fall outside a small image are pulled onto its border.
    pub fn canonical(height: usize, width: usize, n_ions: usize) -> Self {
        let row = (height / 2) as f64;
        let mid = (width / 2) as f64;
        let ion_centers = (0..n_ions)
            .map(|k| {
                let col = mid + ION_SPACING * (k as f64 - (n_ions as f64 - 1.0) / 2.0);
                (
                    row.clamp(0.0, height.saturating_sub(1) as f64),
                    col.clamp(0.0, width.saturating_sub(1) as f64),
                )
            })
            .collect();
        ImageConfig {
            height,
            width,
            ion_centers,
            psf_sigma: 0.4,
            psf_amplitude: 35.0,
            poisson_lambda: 0.5,
            bg_mean: 50.0,
            bg_sigma: 20.0,
            pixel_depth: 16,
        }
    }

    /// 10x10 frame, one centered ion.
    pub fn one_qubit() -> Self {
        Self::canonical(10, 10, 1)
    }

    /// 12x24 frame, three ions at columns 7, 12, 17 of row 6.
    pub fn three_qubit() -> Self {
        Self::canonical(12, 24, 3)
    }

    pub fn n_ions(&self) -> usize {
        self.ion_centers.len()
    }

    pub fn n_classes(&self) -> usize {
        1 << self.n_ions()
    }

    pub fn max_pixel(&self) -> u16 {
        ((1u32 << self.pixel_depth) - 1) as u16
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return fail(format!("image must be non-empty, got {}x{}", self.height, self.width));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return fail("image dimensions must fit in 16 bits".into());
        }
        if self.ion_centers.is_empty() || self.ion_centers.len() > 8 {
            return fail(format!("1..=8 ions supported, got {}", self.ion_centers.len()));
        }
        for &(r, c) in &self.ion_centers {
            check_center((r, c), (self.height, self.width))?;
        }
        if !(self.psf_sigma > 0.0) || !self.psf_sigma.is_finite() {
            return fail(format!("psf_sigma must be > 0, got {}", self.psf_sigma));
        }
        if !(self.poisson_lambda > 0.0) || !self.poisson_lambda.is_finite() {
            return fail(format!("poisson_lambda must be > 0, got {}", self.poisson_lambda));
        }
        if !(self.bg_sigma >= 0.0) || !self.bg_sigma.is_finite() {
            return fail(format!("bg_sigma must be >= 0, got {}", self.bg_sigma));
        }
        if !self.psf_amplitude.is_finite() || !self.bg_mean.is_finite() {
            return fail("psf_amplitude and bg_mean must be finite".into());
        }
        if !(1..=16).contains(&self.pixel_depth) {
            return fail(format!("pixel_depth must be 1..=16, got {}", self.pixel_depth));
        }
        Ok(())
    }
}

fn check_center((row, col): (f64, f64), (h, w): (usize, usize)) -> Result<()> {
    let inside = row.is_finite()
        && col.is_finite()
        && (0.0..=(h as f64 - 1.0)).contains(&row)
        && (0.0..=(w as f64 - 1.0)).contains(&col);
    if !inside {
        return Err(Error::Config(format!(
            "ion center ({row}, {col}) lies outside the {h}x{w} image"
        )));
    }
    Ok(())
}

/// Bit `i` set means ion `i` is bright.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QubitState {
    n_ions: u8,
    bits: u32,
}

impl QubitState {
    pub fn new(n_ions: usize, bits: u32) -> Result<Self> {
        if n_ions == 0 || n_ions > 8 {
            return Err(Error::Labeling(format!("1..=8 ions supported, got {n_ions}")));
        }
        if bits >= 1 << n_ions {
            return Err(Error::Labeling(format!(
                "state bits {bits:#b} out of range for {n_ions} ions"
            )));
        }
        Ok(QubitState {
            n_ions: n_ions as u8,
            bits,
        })
    }

    /// State for class index `class`; class index and bitmask coincide.
    pub fn from_class(n_ions: usize, class: usize) -> Result<Self> {
        Self::new(n_ions, u32::try_from(class).unwrap_or(u32::MAX))
    }

    pub fn n_ions(self) -> usize {
        self.n_ions as usize
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn class_index(self) -> usize {
        self.bits as usize
    }

    pub fn is_bright(self, ion: usize) -> bool {
        self.bits >> ion & 1 == 1
    }
}

impl fmt::Display for QubitState {
    /// Ion 0 first, e.g. `101`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n_ions() {
            f.write_str(if self.is_bright(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IonImage {
    pub height: usize,
    pub width: usize,
    /// Row-major counts.
    pub pixels: Vec<u16>,
    pub label: QubitState,
}

impl IonImage {
    pub fn pixel(&self, row: usize, col: usize) -> u16 {
        self.pixels[row * self.width + col]
    }

    pub fn roi_sum(&self, roi: Roi) -> Result<u64> {
        roi.check((self.height, self.width))?;
        let mut sum = 0u64;
        for r in roi.row0..roi.row0 + roi.height {
            let row = &self.pixels[r * self.width..(r + 1) * self.width];
            sum += row[roi.col0..roi.col0 + roi.width].iter().map(|&p| p as u64).sum::<u64>();
        }
        Ok(sum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ImageConfig,
    pub train: Vec<IonImage>,
    pub test: Vec<IonImage>,
    pub seed: u64,
}

impl Dataset {
    pub fn n_images(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn n_ions(&self) -> usize {
        self.config.n_ions()
    }

    pub fn images(&self) -> impl Iterator<Item = &IonImage> {
        self.train.iter().chain(self.test.iter())
    }

    /// Keeps the first `n_train` training images, e.g. for reduced-scale runs.
    pub fn with_train_prefix(&self, n_train: usize) -> Dataset {
        Dataset {
            config: self.config.clone(),
            train: self.train[..n_train.min(self.train.len())].to_vec(),
            test: self.test.clone(),
            seed: self.seed,
        }
    }
}

/// Rectangular region: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub row0: usize,
    pub col0: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    /// `width x height` box around `center`, clipped to the image.
    pub fn centered(center: (f64, f64), width: usize, height: usize, shape: (usize, usize)) -> Roi {
        let place = |c: f64, extent: usize, limit: usize| {
            let start = (c.round() as i64 - (extent / 2) as i64).max(0) as usize;
            let extent = extent.min(limit);
            (start.min(limit - extent), extent)
        };
        let (row0, height) = place(center.0, height, shape.0);
        let (col0, width) = place(center.1, width, shape.1);
        Roi {
            row0,
            col0,
            width,
            height,
        }
    }

    pub fn check(&self, (h, w): (usize, usize)) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.row0 + self.height > h
            || self.col0 + self.width > w
        {
            return Err(Error::Config(format!(
                "ROI {:?} does not fit inside a {h}x{w} image",
                self
            )));
        }
        Ok(())
    }
}

/// Noise-free Gaussian spot: `amplitude * exp(-d^2 / (2 sigma^2))`.
pub fn render_psf(
    center: (f64, f64),
    sigma: f64,
    amplitude: f64,
    shape: (usize, usize),
) -> Result<Array2<f64>> {
    check_center(center, shape)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("psf sigma must be > 0, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(Array2::from_shape_fn(shape, |(r, c)| {
        let dr = r as f64 - center.0;
        let dc = c as f64 - center.1;
        amplitude * (-(dr * dr + dc * dc) / denom).exp()
    }))
}

/// Pixel-wise sum of the spots of every bright ion, before any noise.
pub fn noiseless_signal(cfg: &ImageConfig, state: QubitState) -> Result<Array2<f64>> {
    let shape = (cfg.height, cfg.width);
    let mut signal = Array2::zeros(shape);
    for (i, &center) in cfg.ion_centers.iter().enumerate() {
        if state.is_bright(i) {
            signal += &render_psf(center, cfg.psf_sigma, cfg.psf_amplitude, shape)?;
        }
    }
    Ok(signal)
}

pub fn synthesize_image(cfg: &ImageConfig, state: QubitState, seed: u64) -> Result<IonImage> {
    cfg.validate()?;
    if state.n_ions() != cfg.n_ions() {
        return Err(Error::Labeling(format!(
            "state has {} ions but the configuration places {}",
            state.n_ions(),
            cfg.n_ions()
        )));
    }
    let signal = noiseless_signal(cfg, state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shot = Poisson::new(cfg.poisson_lambda)
        .map_err(|e| Error::Config(format!("poisson_lambda: {e}")))?;
    let background = Normal::new(cfg.bg_mean, cfg.bg_sigma)
        .map_err(|e| Error::Config(format!("background: {e}")))?;
    let max = cfg.max_pixel() as f64;
    let pixels = signal
        .iter()
        .map(|&s| {
            let k: f64 = shot.sample(&mut rng);
            let bg = background.sample(&mut rng);
            let value = s * (k / cfg.poisson_lambda) + bg;
            value.round().clamp(0.0, max) as u16
        })
        .collect();
    Ok(IonImage {
        height: cfg.height,
        width: cfg.width,
        pixels,
        label: state,
    })
}

/// Balanced label sequence (every class `floor` or `ceil` of `n / classes`
/// times) in seeded random order.
fn balanced_labels(n: usize, n_classes: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LABEL_STREAM, 0));
    labels.shuffle(&mut rng);
    labels
}

pub fn build_dataset(cfg: &ImageConfig, n_images: usize, split_ratio: f64, seed: u64) -> Result<Dataset> {
    build_dataset_with_threads(cfg, n_images, split_ratio, seed, configured_threads())
}

/// As [`build_dataset`] with an explicit worker count (0 = calling thread).
pub fn build_dataset_with_threads(
    cfg: &ImageConfig,
    n_images: usize,
    split_ratio: f64,
    seed: u64,
    threads: usize,
) -> Result<Dataset> {
    cfg.validate()?;
    if n_images < 2 {
        return Err(Error::Config(format!("need at least 2 images, got {n_images}")));
    }
    if n_images > u32::MAX as usize {
        return Err(Error::Config("image count must fit in 32 bits".into()));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {split_ratio}")));
    }
    let n_train = ((n_images as f64 * split_ratio).round() as usize).clamp(1, n_images - 1);
    let labels = balanced_labels(n_images, cfg.n_classes(), seed);
    let n_ions = cfg.n_ions();
    let mut images = map_indexed(n_images, threads, |i| {
        let state = QubitState::from_class(n_ions, labels[i])?;
        synthesize_image(cfg, state, derive_seed(seed, IMAGE_STREAM, i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let test = images.split_off(n_train);
    Ok(Dataset {
        config: cfg.clone(),
        train: images,
        test,
        seed,
    })
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.config;
        cfg.validate()?;
        let n = self.n_images();
        if n > u32::MAX as usize {
            return Err(Error::Config("too many images for the dataset format".into()));
        }
        let mut out = Vec::with_capacity(28 + n * (1 + 2 * cfg.height * cfg.width));
        out.extend_from_slice(DATASET_MAGIC);
        out.put_u16(DATASET_VERSION);
        out.put_u32(n as u32);
        out.put_u16(cfg.height as u16);
        out.put_u16(cfg.width as u16);
        out.put_u8(cfg.n_ions() as u8);
        out.put_u8(cfg.pixel_depth);
        out.put_u64(self.seed);
        out.put_u32(self.train.len() as u32);
        for img in self.images() {
            if img.height != cfg.height || img.width != cfg.width || img.pixels.len() != cfg.height * cfg.width {
                return Err(Error::Shape(format!(
                    "image is {}x{} but the dataset is {}x{}",
                    img.height, img.width, cfg.height, cfg.width
                )));
            }
            out.put_u8(img.label.bits() as u8);
            for &p in &img.pixels {
                out.put_u16(p);
            }
        }
        Ok(out)
    }

    /// Decodes a dataset file. Generation parameters other than geometry,
    /// ion count and pixel depth are not stored; they come back as the
    /// canonical defaults.
    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, ParseError> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let n_images = r.u32("n_images")? as usize;
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let n_ions = r.u8("n_ions")? as usize;
        let pixel_depth = r.u8("pixel_depth")?;
        let seed = r.u64("seed")?;
        let split = r.u32("split boundary")? as usize;
        if height == 0 || width == 0 {
            return Err(r.malformed(format!("empty image geometry {height}x{width}")));
        }
        if !(1..=8).contains(&n_ions) {
            return Err(r.malformed(format!("ion count {n_ions} outside 1..=8")));
        }
        if !(1..=16).contains(&pixel_depth) {
            return Err(r.malformed(format!("pixel depth {pixel_depth} outside 1..=16")));
        }
        if split > n_images {
            return Err(r.malformed(format!("split boundary {split} beyond {n_images} images")));
        }
        let per_image = 1 + 2 * height * width;
        let available = r.remaining() / per_image;
        if available < n_images {
            return Err(ParseError::Truncated {
                what: r.what(),
                detail: format!("header declares {n_images} images, body holds {available}"),
            });
        }
        let mut config = ImageConfig::canonical(height, width, n_ions);
        config.pixel_depth = pixel_depth;
        let max = config.max_pixel();
        let mut images = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let bits = r.u8("label")? as u32;
            let label = QubitState::new(n_ions, bits)
                .map_err(|_| r.malformed(format!("image {i}: label {bits} out of range")))?;
            let pixels = r.u16_vec(height * width, "pixels")?;
            if let Some(p) = pixels.iter().find(|&&p| p > max) {
                return Err(r.malformed(format!("image {i}: pixel {p} exceeds {pixel_depth}-bit depth")));
            }
            images.push(IonImage {
                height,
                width,
                pixels,
                label,
            });
        }
        r.finish()?;
        let test = images.split_off(split);
        Ok(Dataset {
            config,
            train: images,
            test,
            seed,
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    Ok(Dataset::from_bytes(&bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Bright,
    Dark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub bin_counts: Vec<u64>,
    pub population: Population,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bin_counts.iter().sum()
    }

    /// Shared probability mass with `other` (same edges required).
    pub fn overlap(&self, other: &Histogram) -> Result<f64> {
        if self.bin_edges != other.bin_edges {
            return Err(Error::Shape("histograms use different bin edges".into()));
        }
        let (a, b) = (self.total() as f64, other.total() as f64);
        Ok(self
            .bin_counts
            .iter()
            .zip(&other.bin_counts)
            .map(|(&x, &y)| (x as f64 / a).min(y as f64 / b))
            .sum())
    }
}

/// Bins `values` into `[e_i, e_{i+1})`; the last bin also takes its upper
/// edge. Values outside the edges are not counted.
pub fn histogram_with_edges(values: &[u64], edges: &[f64], population: Population) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("histogram edges must be strictly increasing, at least two".into()));
    }
    let mut counts = vec![0u64; edges.len() - 1];
    let last = counts.len() - 1;
    for &v in values {
        let x = v as f64;
        if x < edges[0] || x > edges[last + 1] {
            continue;
        }
        let bin = edges.partition_point(|&e| e <= x).saturating_sub(1).min(last);
        counts[bin] += 1;
    }
    Ok(Histogram {
        bin_edges: edges.to_vec(),
        bin_counts: counts,
        population,
    })
}

/// Evenly spaced edges over `[min, max + 1]` of `values`.
pub fn even_edges(values: &[u64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let lo = values.iter().copied().min().unwrap_or(0) as f64;
    let hi = values.iter().copied().max().unwrap_or(0) as f64 + 1.0;
    let step = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..n_bins).map(|i| lo + step * i as f64).collect();
    edges.push(hi);
    Ok(edges)
}

pub fn roi_sums<'a>(images: impl IntoIterator<Item = &'a IonImage>, roi: Roi) -> Result<Vec<u64>> {
    images.into_iter().map(|img| img.roi_sum(roi)).collect()
}

/// One entry per image: the summed counts inside `roi`.
pub fn roi_histogram(images: &[IonImage], roi: Roi, n_bins: usize, population: Population) -> Result<Histogram> {
    let sums = roi_sums(images, roi)?;
    histogram_with_edges(&sums, &even_edges(&sums, n_bins)?, population)
}
