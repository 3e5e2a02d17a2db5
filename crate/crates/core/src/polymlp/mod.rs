//! Sparse polynomial MLP with quantized activations, compiled to truth tables.
//!
//! Every neuron reads `fan_in` wires from the previous layer per sub-neuron.
//! A sub-neuron expands its inputs into all monomials of total degree at
//! most `poly_degree` and takes a full-precision weighted sum. Because each
//! wire carries a `beta`-bit code, a sub-neuron is a pure function of
//! `beta * fan_in` bits and can be enumerated into a table; with more than
//! one sub-neuron the `(beta + 1)`-bit sub-neuron outputs meet in a second
//! adder table.
//!
//! Quantized signals live on `[-1, 1)`: a `b`-bit code `c` stands for
//! `(c - h) / h` with `h = 2^(b-1)`, so zero is representable and every
//! level is a dyadic rational. Hidden activations are hard-tanh followed by the
//! `beta`-bit quantizer. The output layer skips the final activation; its
//! logit is the exact sum of the sub-neuron outputs.

mod io;
pub mod lut;
pub mod train;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{IonImage, QubitState};
use crate::error::{Error, Result};
use crate::parallel::derive_seed;

pub use io::{MLP_MAGIC, MLP_VERSION};
pub use lut::{compile_truth_tables, EquivalenceReport, LutNetwork, Mismatch, VerifyMode};
pub use train::{train, train_with_progress, train_with_threads, QuantMode};

const CONNECTIVITY_STREAM: u64 = 10;
const INIT_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyMlpConfig {
    /// Widths of the hidden layers; the output layer is appended.
    pub hidden_widths: Vec<usize>,
    /// Use a 10-wide output layer and read the first `n_classes` logits.
    pub literal_head: bool,
    pub fan_in: usize,
    pub activation_bits: u8,
    pub poly_degree: usize,
    pub subneurons: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Return the epoch whose quantized model scores the best mean
    /// fidelity on the training images rather than the last one.
    #[serde(default = "yes")]
    pub keep_best_epoch: bool,
    pub optimizer: AdamW,
}

fn yes() -> bool {
    true
}

impl Default for PolyMlpConfig {
    fn default() -> Self {
        PolyMlpConfig {
            hidden_widths: vec![256, 100, 100, 100],
            literal_head: false,
            fan_in: 4,
            activation_bits: 2,
            poly_degree: 2,
            subneurons: 2,
            seed: 0x5EED_0001,
            learning_rate: 0.008,
            epochs: 10,
            batch_size: 1024,
            keep_best_epoch: true,
            optimizer: AdamW::default(),
        }
    }
}

pub const LITERAL_HEAD_WIDTH: usize = 10;

impl PolyMlpConfig {
    /// All layer widths for an input of `n_classes` states.
    pub fn layer_widths(&self, n_classes: usize) -> Vec<usize> {
        let mut w = self.hidden_widths.clone();
        w.push(if self.literal_head { LITERAL_HEAD_WIDTH } else { n_classes });
        w
    }

    pub fn validate(&self, n_inputs: usize, n_classes: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.fan_in == 0 || self.activation_bits == 0 || self.poly_degree == 0 || self.subneurons == 0 {
            return fail("fan_in, activation_bits, poly_degree and subneurons must all be >= 1".into());
        }
        if self.activation_bits > 7 {
            return fail(format!("activation_bits {} exceeds 7", self.activation_bits));
        }
        if n_classes < 2 {
            return fail(format!("need at least two classes, got {n_classes}"));
        }
        if self.literal_head && n_classes > LITERAL_HEAD_WIDTH {
            return fail(format!("literal 10-wide head cannot hold {n_classes} classes"));
        }
        let mut prev = n_inputs;
        for (l, &w) in self.layer_widths(n_classes).iter().enumerate() {
            if w == 0 {
                return fail(format!("layer {l} has zero width"));
            }
            if self.fan_in > prev {
                return fail(format!("fan_in {} exceeds the {prev} inputs of layer {l}", self.fan_in));
            }
            prev = w;
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return fail("learning_rate must be > 0 and batch_size >= 1".into());
        }
        Ok(())
    }
}

/// Uniform `bits`-bit quantizer on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantizer {
    bits: u8,
}

impl Quantizer {
    pub fn new(bits: u8) -> Self {
        Quantizer { bits }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn max_code(self) -> u16 {
        (1u16 << self.bits) - 1
    }

    fn half(self) -> f64 {
        (1u32 << (self.bits - 1)) as f64
    }

    pub fn value(self, code: u16) -> f64 {
        (code as f64 - self.half()) / self.half()
    }

    /// Nearest code, saturating at both ends.
    pub fn code(self, v: f64) -> u16 {
        let h = self.half();
        ((v * h).round().clamp(-h, h - 1.0) + h) as u16
    }

    pub fn quantize(self, v: f64) -> f64 {
        self.value(self.code(v))
    }
}

pub fn hardtanh(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Monomials of total degree `<= degree` in `n_vars` variables, graded by
/// degree and lexicographic within a degree, constant term first. Each
/// monomial is the non-decreasing list of its variable indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomials {
    n_vars: usize,
    terms: Vec<Vec<usize>>,
}

impl Monomials {
    pub fn new(n_vars: usize, degree: usize) -> Self {
        let mut terms = vec![Vec::new()];
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..degree {
            let mut next = Vec::new();
            for t in &frontier {
                let start = t.last().copied().unwrap_or(0);
                for v in start..n_vars {
                    let mut m = t.clone();
                    m.push(v);
                    next.push(m);
                }
            }
            terms.extend(next.iter().cloned());
            frontier = next;
        }
        Monomials { n_vars, terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Vec<usize>] {
        &self.terms
    }

    pub fn expand_into(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.n_vars);
        out.clear();
        out.extend(self.terms.iter().map(|t| t.iter().map(|&i| x[i]).product::<f64>()));
    }
}

/// Feature vector `[1, x1, ..., xF, x1^2, x1 x2, ...]` of `x`.
pub fn expand_monomials(x: &[f64], degree: usize) -> Vec<f64> {
    let mut out = Vec::new();
    Monomials::new(x.len(), degree).expand_into(x, &mut out);
    out
}

/// Input wires of every sub-neuron, flat per layer as
/// `[neuron][subneuron][fan_in]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connectivity {
    pub fan_in: usize,
    pub subneurons: usize,
    pub layers: Vec<Vec<u32>>,
}

impl Connectivity {
    pub fn inputs(&self, layer: usize, neuron: usize, sub: usize) -> &[u32] {
        let start = (neuron * self.subneurons + sub) * self.fan_in;
        &self.layers[layer][start..start + self.fan_in]
    }
}

/// Seeded uniform choice of distinct wires; each `(layer, neuron, sub)`
/// draws from its own derived stream.
pub fn select_connectivity(cfg: &PolyMlpConfig, n_inputs: usize, n_classes: usize) -> Result<Connectivity> {
    cfg.validate(n_inputs, n_classes)?;
    let mut layers = Vec::new();
    let mut prev = n_inputs;
    for (l, &width) in cfg.layer_widths(n_classes).iter().enumerate() {
        let mut wires = Vec::with_capacity(width * cfg.subneurons * cfg.fan_in);
        for j in 0..width {
            for a in 0..cfg.subneurons {
                let key = ((l as u64) << 40) | ((j as u64) << 8) | a as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, CONNECTIVITY_STREAM, key));
                wires.extend(sample(&mut rng, prev, cfg.fan_in).into_iter().map(|i| i as u32));
            }
        }
        layers.push(wires);
        prev = width;
    }
    Ok(Connectivity {
        fan_in: cfg.fan_in,
        subneurons: cfg.subneurons,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyMlpModel {
    pub config: PolyMlpConfig,
    pub n_inputs: usize,
    pub n_classes: usize,
    pub connectivity: Connectivity,
    /// Per layer, flat `[neuron][subneuron][monomial]`.
    pub coefficients: Vec<Vec<f64>>,
    /// Pixel range mapped onto the input codes.
    pub input_range: (f64, f64),
    monomials: Monomials,
}

impl PolyMlpModel {
    /// Freshly initialized model: coefficients uniform in `+-1/sqrt(M)` for
    /// `M` monomials.
    pub fn init(cfg: &PolyMlpConfig, n_inputs: usize, n_classes: usize, input_range: (f64, f64)) -> Result<Self> {
        let connectivity = select_connectivity(cfg, n_inputs, n_classes)?;
        let monomials = Monomials::new(cfg.fan_in, cfg.poly_degree);
        let m = monomials.len();
        let bound = 1.0 / (m as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, 0));
        let coefficients = cfg
            .layer_widths(n_classes)
            .iter()
            .map(|&w| (0..w * cfg.subneurons * m).map(|_| rng.random_range(-bound..bound)).collect())
            .collect();
        Self::from_parts(cfg.clone(), n_inputs, n_classes, connectivity, coefficients, input_range)
    }

    pub fn from_parts(
        config: PolyMlpConfig,
        n_inputs: usize,
        n_classes: usize,
        connectivity: Connectivity,
        coefficients: Vec<Vec<f64>>,
        input_range: (f64, f64),
    ) -> Result<Self> {
        config.validate(n_inputs, n_classes)?;
        let monomials = Monomials::new(config.fan_in, config.poly_degree);
        let widths = config.layer_widths(n_classes);
        if connectivity.layers.len() != widths.len() || coefficients.len() != widths.len() {
            return Err(Error::Shape("layer count disagrees with the configuration".into()));
        }
        if connectivity.fan_in != config.fan_in || connectivity.subneurons != config.subneurons {
            return Err(Error::Shape("connectivity geometry disagrees with the configuration".into()));
        }
        let mut prev = n_inputs;
        for (l, &w) in widths.iter().enumerate() {
            let subs = w * config.subneurons;
            if connectivity.layers[l].len() != subs * config.fan_in {
                return Err(Error::Shape(format!("layer {l}: wrong connectivity length")));
            }
            if coefficients[l].len() != subs * monomials.len() {
                return Err(Error::Shape(format!(
                    "layer {l}: expected {} coefficients, got {}",
                    subs * monomials.len(),
                    coefficients[l].len()
                )));
            }
            for chunk in connectivity.layers[l].chunks(config.fan_in) {
                if chunk.iter().any(|&i| i as usize >= prev) {
                    return Err(Error::Shape(format!("layer {l}: wire index beyond {prev} inputs")));
                }
                let mut sorted = chunk.to_vec();
                sorted.sort_unstable();
                if sorted.windows(2).any(|p| p[0] == p[1]) {
                    return Err(Error::Shape(format!("layer {l}: repeated wire inside one sub-neuron")));
                }
            }
            prev = w;
        }
        if !(input_range.0.is_finite() && input_range.1.is_finite()) {
            return Err(Error::Shape("input range must be finite".into()));
        }
        Ok(PolyMlpModel {
            config,
            n_inputs,
            n_classes,
            connectivity,
            coefficients,
            input_range,
            monomials,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.config.layer_widths(self.n_classes)
    }

    pub fn n_layers(&self) -> usize {
        self.coefficients.len()
    }

    pub fn monomials(&self) -> &Monomials {
        &self.monomials
    }

    pub fn activation(&self) -> Quantizer {
        Quantizer::new(self.config.activation_bits)
    }

    /// Quantizer of sub-neuron outputs that feed an adder or the logits.
    pub fn sub_output(&self) -> Quantizer {
        Quantizer::new(self.config.activation_bits + 1)
    }

    pub fn is_output(&self, layer: usize) -> bool {
        layer + 1 == self.n_layers()
    }

    /// Whether sub-neuron outputs of `layer` are wide `(beta + 1)`-bit codes
    /// (adder input or logit) rather than final `beta`-bit activations.
    pub fn sub_is_wide(&self, layer: usize) -> bool {
        self.config.subneurons > 1 || self.is_output(layer)
    }

    pub fn sub_coefficients(&self, layer: usize, neuron: usize, sub: usize) -> &[f64] {
        let m = self.monomials.len();
        let start = (neuron * self.config.subneurons + sub) * m;
        &self.coefficients[layer][start..start + m]
    }

    /// Full-precision polynomial of one sub-neuron on real inputs.
    pub fn polynomial(&self, layer: usize, neuron: usize, sub: usize, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        self.monomials.expand_into(x, scratch);
        self.sub_coefficients(layer, neuron, sub)
            .iter()
            .zip(scratch.iter())
            .map(|(w, m)| w * m)
            .sum()
    }

    /// Output code of one sub-neuron given the codes on its wires. This is
    /// the function each sub-neuron table enumerates.
    pub fn sub_neuron_code(&self, layer: usize, neuron: usize, sub: usize, codes: &[u16], scratch: &mut Vec<f64>) -> u16 {
        let q_in = self.activation();
        let x: Vec<f64> = codes.iter().map(|&c| q_in.value(c)).collect();
        let p = self.polynomial(layer, neuron, sub, &x, scratch);
        let q_out = if self.sub_is_wide(layer) { self.sub_output() } else { self.activation() };
        q_out.code(hardtanh(p))
    }

    /// Real value of a sum of wide sub-neuron codes.
    pub fn code_sum_value(&self, code_sum: u32) -> f64 {
        let h = (1u32 << self.config.activation_bits) as f64;
        (code_sum as f64 - self.config.subneurons as f64 * h) / h
    }

    /// What the adder table holds for a given sum of sub-neuron codes: the
    /// neuron's `beta`-bit activation on hidden layers, the sum itself on the
    /// output layer.
    pub fn adder_code(&self, layer: usize, code_sum: u32) -> u16 {
        if self.is_output(layer) {
            code_sum as u16
        } else {
            self.activation().code(hardtanh(self.code_sum_value(code_sum)))
        }
    }

    pub fn quantize_input(&self, image: &IonImage) -> Result<Vec<u16>> {
        if image.pixels.len() != self.n_inputs {
            return Err(Error::Shape(format!(
                "image has {} pixels, model expects {}",
                image.pixels.len(),
                self.n_inputs
            )));
        }
        Ok(quantize_pixels(&image.pixels, self.input_range, self.activation()))
    }

    /// Layer-by-layer evaluation on input codes; returns logits.
    pub fn forward_codes(&self, input: &[u16]) -> Result<Vec<f64>> {
        if input.len() != self.n_inputs {
            return Err(Error::Shape(format!(
                "{} input codes for {} inputs",
                input.len(),
                self.n_inputs
            )));
        }
        let a_count = self.config.subneurons;
        let mut scratch = Vec::new();
        let mut wire_codes = Vec::with_capacity(self.config.fan_in);
        let mut codes: Vec<u16> = input.to_vec();
        let widths = self.widths();
        for (l, &width) in widths.iter().enumerate() {
            let mut next_codes = Vec::with_capacity(width);
            let mut logits = Vec::new();
            for j in 0..width {
                let mut code_sum = 0u32;
                let mut single = 0u16;
                for a in 0..a_count {
                    wire_codes.clear();
                    wire_codes.extend(self.connectivity.inputs(l, j, a).iter().map(|&i| codes[i as usize]));
                    let c = self.sub_neuron_code(l, j, a, &wire_codes, &mut scratch);
                    code_sum += c as u32;
                    single = c;
                }
                if self.is_output(l) {
                    logits.push(if a_count == 1 { self.sub_output().value(single) } else { self.code_sum_value(code_sum) });
                } else {
                    next_codes.push(if a_count == 1 { single } else { self.adder_code(l, code_sum) });
                }
            }
            if self.is_output(l) {
                return Ok(logits);
            }
            codes = next_codes;
        }
        unreachable!("network has an output layer")
    }

    pub fn forward(&self, image: &IonImage) -> Result<Vec<f64>> {
        self.forward_codes(&self.quantize_input(image)?)
    }

    /// Argmax over the class logits, lowest index on ties.
    pub fn predict(&self, image: &IonImage) -> Result<QubitState> {
        let logits = self.forward(image)?;
        QubitState::from_class(image.label.n_ions(), argmax(&logits[..self.n_classes]))
    }
}

/// Affine map of `[lo, hi]` onto the codes `0..=max` of `q`, clamped.
pub fn quantize_pixels(pixels: &[u16], (lo, hi): (f64, f64), q: Quantizer) -> Vec<u16> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let top = q.max_code() as f64;
    pixels
        .iter()
        .map(|&p| ((p as f64 - lo) / span * top).round().clamp(0.0, top) as u16)
        .collect()
}

/// Index of the largest entry; the first wins on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
