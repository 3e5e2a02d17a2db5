//! Truth-table form of a trained network: compilation, lookup evaluation,
//! equivalence checking, the binary artifact and a netlist dump.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmax, quantize_pixels, PolyMlpModel, Quantizer};
use crate::binio::{Reader, VecWrite};
use crate::dataset::{IonImage, QubitState};
use crate::error::{Error, ParseError, Result};

pub const LUT_MAGIC: &[u8; 4] = b"QLUT";
pub const LUT_VERSION: u16 = 1;
/// Largest table address width compiled or accepted.
pub const MAX_TABLE_BITS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTable {
    pub inputs: Vec<u32>,
    pub entries: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronTables {
    pub subs: Vec<SubTable>,
    /// Present when a neuron has more than one sub-neuron.
    pub adder: Option<Vec<u16>>,
}

impl NeuronTables {
    pub fn entry_count(&self) -> usize {
        self.subs.iter().map(|s| s.entries.len()).sum::<usize>() + self.adder.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutNetwork {
    pub n_inputs: usize,
    pub n_classes: usize,
    pub beta: u8,
    pub fan_in: usize,
    pub subneurons: usize,
    pub input_range: (f64, f64),
    pub layers: Vec<Vec<NeuronTables>>,
}

/// Which table of a neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableId {
    Sub(usize),
    Adder,
}

impl std::fmt::Display for TableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TableId::Sub(a) => write!(f, "sub{a}"),
            TableId::Adder => f.write_str("adder"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub layer: usize,
    pub neuron: usize,
    pub table: TableId,
    pub code: u32,
    pub table_value: u16,
    pub reference: u16,
}

impl From<Mismatch> for Error {
    fn from(m: Mismatch) -> Self {
        Error::Equivalence {
            layer: m.layer,
            neuron: m.neuron,
            table: m.table.to_string(),
            code: m.code as usize,
            table_value: m.table_value,
            reference: m.reference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    Exhaustive,
    /// Random addresses per table.
    Sampled { per_table: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceReport {
    pub tables_checked: usize,
    pub entries_checked: usize,
}

fn table_bits(beta: u8, fan_in: usize) -> u32 {
    beta as u32 * fan_in as u32
}

fn adder_bits(beta: u8, subneurons: usize) -> u32 {
    (beta as u32 + 1) * subneurons as u32
}

fn check_geometry(beta: u8, fan_in: usize, subneurons: usize) -> std::result::Result<(), String> {
    if !(1..=7).contains(&beta) || fan_in == 0 || subneurons == 0 {
        return Err(format!("unsupported geometry beta={beta} fan_in={fan_in} subneurons={subneurons}"));
    }
    if table_bits(beta, fan_in) > MAX_TABLE_BITS {
        return Err(format!(
            "sub-neuron table would need 2^{} entries",
            table_bits(beta, fan_in)
        ));
    }
    if subneurons > 1 && adder_bits(beta, subneurons) > MAX_TABLE_BITS {
        return Err(format!(
            "adder table would need 2^{} entries",
            adder_bits(beta, subneurons)
        ));
    }
    Ok(())
}

fn unpack(address: u32, width: u32, count: usize, out: &mut Vec<u16>) {
    out.clear();
    let mask = (1u32 << width) - 1;
    out.extend((0..count).map(|i| ((address >> (width * i as u32)) & mask) as u16));
}

/// Address of a table given the codes on its inputs, input 0 in the low bits.
pub fn pack(codes: &[u16], width: u32) -> u32 {
    codes
        .iter()
        .enumerate()
        .fold(0, |acc, (i, &c)| acc | ((c as u32) << (width * i as u32)))
}

fn reference_sub(model: &PolyMlpModel, l: usize, j: usize, a: usize, address: u32, scratch: &mut Vec<f64>, codes: &mut Vec<u16>) -> u16 {
    unpack(address, model.config.activation_bits as u32, model.config.fan_in, codes);
    model.sub_neuron_code(l, j, a, codes, scratch)
}

fn reference_adder(model: &PolyMlpModel, l: usize, address: u32, codes: &mut Vec<u16>) -> u16 {
    unpack(address, model.config.activation_bits as u32 + 1, model.config.subneurons, codes);
    model.adder_code(l, codes.iter().map(|&c| c as u32).sum())
}

/// Enumerates every sub-neuron over all `2^(beta F)` input codes and every
/// adder over all `2^(A (beta + 1))` sub-neuron code combinations.
pub fn compile_truth_tables(model: &PolyMlpModel) -> Result<LutNetwork> {
    let cfg = &model.config;
    check_geometry(cfg.activation_bits, cfg.fan_in, cfg.subneurons).map_err(Error::Config)?;
    let sub_size = 1u32 << table_bits(cfg.activation_bits, cfg.fan_in);
    let add_size = 1u32 << adder_bits(cfg.activation_bits, cfg.subneurons);
    let mut scratch = Vec::new();
    let mut codes = Vec::new();
    let mut layers = Vec::new();
    for (l, &width) in model.widths().iter().enumerate() {
        let mut neurons = Vec::with_capacity(width);
        for j in 0..width {
            let subs = (0..cfg.subneurons)
                .map(|a| SubTable {
                    inputs: model.connectivity.inputs(l, j, a).to_vec(),
                    entries: (0..sub_size)
                        .map(|addr| reference_sub(model, l, j, a, addr, &mut scratch, &mut codes))
                        .collect(),
                })
                .collect();
            let adder = (cfg.subneurons > 1)
                .then(|| (0..add_size).map(|addr| reference_adder(model, l, addr, &mut codes)).collect());
            neurons.push(NeuronTables { subs, adder });
        }
        layers.push(neurons);
    }
    Ok(LutNetwork {
        n_inputs: model.n_inputs,
        n_classes: model.n_classes,
        beta: cfg.activation_bits,
        fan_in: cfg.fan_in,
        subneurons: cfg.subneurons,
        input_range: model.input_range,
        layers,
    })
}

impl LutNetwork {
    pub fn n_ions(&self) -> usize {
        self.n_classes.trailing_zeros() as usize
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn table_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|n| n.subs.len() + n.adder.is_some() as usize)
            .sum()
    }

    /// Table reads per inference; the same for every input.
    pub fn lookups_per_inference(&self) -> usize {
        self.table_count()
    }

    pub fn quantize(&self, image: &IonImage) -> Result<Vec<u16>> {
        if image.pixels.len() != self.n_inputs {
            return Err(Error::Shape(format!(
                "image has {} pixels, network expects {}",
                image.pixels.len(),
                self.n_inputs
            )));
        }
        Ok(quantize_pixels(&image.pixels, self.input_range, Quantizer::new(self.beta)))
    }

    /// Codes leaving the last layer and the number of table reads made.
    pub fn eval_codes(&self, input: &[u16]) -> Result<(Vec<u16>, usize)> {
        if input.len() != self.n_inputs {
            return Err(Error::Shape(format!(
                "{} input codes for {} inputs",
                input.len(),
                self.n_inputs
            )));
        }
        let sub_w = self.beta as u32;
        let add_w = sub_w + 1;
        let mut lookups = 0;
        let mut codes = input.to_vec();
        let mut wire = Vec::with_capacity(self.fan_in);
        let mut sub_codes = Vec::with_capacity(self.subneurons);
        for layer in &self.layers {
            let mut next = Vec::with_capacity(layer.len());
            for n in layer {
                sub_codes.clear();
                for s in &n.subs {
                    wire.clear();
                    wire.extend(s.inputs.iter().map(|&i| codes[i as usize]));
                    sub_codes.push(s.entries[pack(&wire, sub_w) as usize]);
                    lookups += 1;
                }
                next.push(match &n.adder {
                    Some(t) => {
                        lookups += 1;
                        t[pack(&sub_codes, add_w) as usize]
                    }
                    None => sub_codes[0],
                });
            }
            codes = next;
        }
        Ok((codes, lookups))
    }

    /// Argmax over the first `n_classes` output codes.
    pub fn eval_lut(&self, input: &[u16]) -> Result<QubitState> {
        let (codes, _) = self.eval_codes(input)?;
        QubitState::from_class(self.n_ions(), argmax(&codes[..self.n_classes]))
    }

    pub fn classify(&self, image: &IonImage) -> Result<QubitState> {
        self.eval_lut(&self.quantize(image)?)
    }

    fn check_topology(&self, model: &PolyMlpModel) -> Result<()> {
        let same = self.n_inputs == model.n_inputs
            && self.n_classes == model.n_classes
            && self.beta == model.config.activation_bits
            && self.fan_in == model.config.fan_in
            && self.subneurons == model.config.subneurons
            && self.widths() == model.widths();
        if !same {
            return Err(Error::Shape("LUT network and model topologies differ".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, n) in layer.iter().enumerate() {
                for (a, s) in n.subs.iter().enumerate() {
                    if s.inputs != model.connectivity.inputs(l, j, a) {
                        return Err(Error::Shape(format!("layer {l} neuron {j} sub {a}: wiring differs")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every table entry that disagrees with the model's arithmetic over the
    /// addresses selected by `mode`.
    pub fn find_mismatches(&self, model: &PolyMlpModel, mode: VerifyMode) -> Result<(Vec<Mismatch>, EquivalenceReport)> {
        self.check_topology(model)?;
        let mut scratch = Vec::new();
        let mut codes = Vec::new();
        let mut found = Vec::new();
        let mut report = EquivalenceReport {
            tables_checked: 0,
            entries_checked: 0,
        };
        let mut rng = match mode {
            VerifyMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            VerifyMode::Exhaustive => None,
        };
        let mut addresses = |size: usize| -> Vec<u32> {
            match (&mut rng, mode) {
                (Some(r), VerifyMode::Sampled { per_table, .. }) => {
                    (0..per_table).map(|_| r.random_range(0..size as u32)).collect()
                }
                _ => (0..size as u32).collect(),
            }
        };
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, n) in layer.iter().enumerate() {
                for (a, s) in n.subs.iter().enumerate() {
                    for addr in addresses(s.entries.len()) {
                        let want = reference_sub(model, l, j, a, addr, &mut scratch, &mut codes);
                        let got = s.entries[addr as usize];
                        report.entries_checked += 1;
                        if got != want {
                            found.push(Mismatch {
                                layer: l,
                                neuron: j,
                                table: TableId::Sub(a),
                                code: addr,
                                table_value: got,
                                reference: want,
                            });
                        }
                    }
                    report.tables_checked += 1;
                }
                if let Some(t) = &n.adder {
                    for addr in addresses(t.len()) {
                        let want = reference_adder(model, l, addr, &mut codes);
                        report.entries_checked += 1;
                        if t[addr as usize] != want {
                            found.push(Mismatch {
                                layer: l,
                                neuron: j,
                                table: TableId::Adder,
                                code: addr,
                                table_value: t[addr as usize],
                                reference: want,
                            });
                        }
                    }
                    report.tables_checked += 1;
                }
            }
        }
        Ok((found, report))
    }

    /// Fails with the first mismatching entry, if any.
    pub fn verify_equivalence(&self, model: &PolyMlpModel, mode: VerifyMode) -> Result<EquivalenceReport> {
        let (found, report) = self.find_mismatches(model, mode)?;
        match found.into_iter().next() {
            Some(m) => Err(m.into()),
            None => Ok(report),
        }
    }

    /// Number of inputs on which lookup evaluation and the model's argmax
    /// agree.
    pub fn end_to_end_agreement(&self, model: &PolyMlpModel, inputs: &[Vec<u16>]) -> Result<usize> {
        let mut agree = 0;
        for x in inputs {
            let logits = model.forward_codes(x)?;
            let (codes, _) = self.eval_codes(x)?;
            agree += (argmax(&logits[..self.n_classes]) == argmax(&codes[..self.n_classes])) as usize;
        }
        Ok(agree)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LUT_MAGIC);
        out.put_u16(LUT_VERSION);
        out.put_u32(self.n_inputs as u32);
        out.put_u16(self.n_classes as u16);
        out.put_u8(self.beta);
        out.put_u8(self.fan_in as u8);
        out.put_u8(self.subneurons as u8);
        out.put_u16(self.layers.len() as u16);
        out.put_f64(self.input_range.0);
        out.put_f64(self.input_range.1);
        for layer in &self.layers {
            out.put_u32(layer.len() as u32);
        }
        for n in self.layers.iter().flatten() {
            for s in &n.subs {
                s.inputs.iter().for_each(|&i| out.put_u32(i));
                s.entries.iter().for_each(|&e| out.put_u16(e));
            }
            if let Some(t) = &n.adder {
                t.iter().for_each(|&e| out.put_u16(e));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LutNetwork, ParseError> {
        let mut r = Reader::new(bytes, "LUT network");
        r.magic(LUT_MAGIC)?;
        r.version(LUT_VERSION)?;
        let n_inputs = r.u32("n_inputs")? as usize;
        let n_classes = r.u16("n_classes")? as usize;
        let beta = r.u8("beta")?;
        let fan_in = r.u8("fan_in")? as usize;
        let subneurons = r.u8("subneurons")? as usize;
        let n_layers = r.u16("n_layers")? as usize;
        let input_range = (r.f64("input_min")?, r.f64("input_max")?);
        check_geometry(beta, fan_in, subneurons).map_err(|e| r.malformed(e))?;
        if n_inputs == 0 || n_layers == 0 {
            return Err(r.malformed("network needs inputs and at least one layer"));
        }
        if !(input_range.0.is_finite() && input_range.1.is_finite()) {
            return Err(r.malformed("input range is not finite"));
        }
        let mut widths = Vec::new();
        for l in 0..n_layers {
            let w = r.u32("layer width")? as usize;
            if w == 0 {
                return Err(r.malformed(format!("layer {l} has zero width")));
            }
            widths.push(w);
        }
        let last = *widths.last().expect("n_layers >= 1");
        if n_classes < 2 || !n_classes.is_power_of_two() || n_classes > 256 || n_classes > last {
            return Err(r.malformed(format!("class count {n_classes} unusable with a {last}-wide output")));
        }
        let sub_size = 1usize << table_bits(beta, fan_in);
        let add_size = 1usize << adder_bits(beta, subneurons);
        let narrow = (1u16 << beta) - 1;
        let wide = (1u16 << (beta + 1)) - 1;
        let mut layers = Vec::new();
        let mut prev = n_inputs;
        for (l, &w) in widths.iter().enumerate() {
            let output = l + 1 == n_layers;
            let sub_max = if subneurons > 1 || output { wide } else { narrow };
            let add_max = if output { wide * subneurons as u16 } else { narrow };
            let mut neurons = Vec::new();
            for j in 0..w {
                let mut subs = Vec::new();
                for a in 0..subneurons {
                    let mut inputs = Vec::new();
                    for _ in 0..fan_in {
                        let i = r.u32("wire index")?;
                        if i as usize >= prev {
                            return Err(r.malformed(format!(
                                "layer {l} neuron {j} sub {a}: wire {i} beyond {prev} inputs"
                            )));
                        }
                        inputs.push(i);
                    }
                    let entries = r.u16_vec(sub_size, "sub-neuron table")?;
                    if entries.iter().any(|&e| e > sub_max) {
                        return Err(r.malformed(format!("layer {l} neuron {j} sub {a}: entry exceeds {sub_max}")));
                    }
                    subs.push(SubTable { inputs, entries });
                }
                let adder = if subneurons > 1 {
                    let t = r.u16_vec(add_size, "adder table")?;
                    if t.iter().any(|&e| e > add_max) {
                        return Err(r.malformed(format!("layer {l} neuron {j} adder: entry exceeds {add_max}")));
                    }
                    Some(t)
                } else {
                    None
                };
                neurons.push(NeuronTables { subs, adder });
            }
            layers.push(neurons);
            prev = w;
        }
        r.finish()?;
        Ok(LutNetwork {
            n_inputs,
            n_classes,
            beta,
            fan_in,
            subneurons,
            input_range,
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    /// One block per table with its input wiring and entries, 16 per row.
    pub fn netlist(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# lut netlist inputs={} classes={} beta={} fan_in={} subneurons={} layers={:?}",
            self.n_inputs,
            self.n_classes,
            self.beta,
            self.fan_in,
            self.subneurons,
            self.widths()
        );
        let dump = |s: &mut String, entries: &[u16]| {
            for (row, chunk) in entries.chunks(16).enumerate() {
                let vals: Vec<String> = chunk.iter().map(u16::to_string).collect();
                let _ = writeln!(s, "  {:05x}: {}", row * 16, vals.join(" "));
            }
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let source = if l == 0 { "in".to_string() } else { format!("l{}", l - 1) };
            for (j, n) in layer.iter().enumerate() {
                for (a, t) in n.subs.iter().enumerate() {
                    let wires: Vec<String> = t.inputs.iter().map(|i| format!("{source}.{i}")).collect();
                    let _ = writeln!(s, "table l{l}.n{j}.sub{a} inputs [{}] entries {}", wires.join(", "), t.entries.len());
                    dump(&mut s, &t.entries);
                }
                if let Some(t) = &n.adder {
                    let wires: Vec<String> = (0..n.subs.len()).map(|a| format!("l{l}.n{j}.sub{a}")).collect();
                    let _ = writeln!(s, "table l{l}.n{j}.adder inputs [{}] entries {}", wires.join(", "), t.len());
                    dump(&mut s, t);
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polymlp::PolyMlpConfig;

    fn model(fan_in: usize, subneurons: usize, seed: u64) -> PolyMlpModel {
        let cfg = PolyMlpConfig {
            hidden_widths: vec![6, 4],
            fan_in,
            subneurons,
            seed,
            ..PolyMlpConfig::default()
        };
        let mut m = PolyMlpModel::init(&cfg, 10, 4, (0.0, 100.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.coefficients.iter_mut().flatten().for_each(|c| *c = rng.random_range(-2.0..2.0));
        m
    }

    #[test]
    fn per_neuron_entry_counts() {
        let net = compile_truth_tables(&model(2, 2, 1)).unwrap();
        assert!(net.layers.iter().flatten().all(|n| n.entry_count() == 96));
        let net = compile_truth_tables(&model(4, 2, 1)).unwrap();
        for n in net.layers.iter().flatten() {
            assert_eq!(n.subs[0].entries.len(), 256);
            assert_eq!(n.adder.as_ref().unwrap().len(), 64);
            assert_eq!(n.entry_count(), 576);
        }
    }

    #[test]
    fn fresh_compile_has_no_mismatch() {
        for subs in [1, 2] {
            let m = model(3, subs, 2);
            let net = compile_truth_tables(&m).unwrap();
            let rep = net.verify_equivalence(&m, VerifyMode::Exhaustive).unwrap();
            assert_eq!(rep.tables_checked, net.table_count());
            assert!(net
                .verify_equivalence(&m, VerifyMode::Sampled { per_table: 10, seed: 1 })
                .is_ok());
        }
    }

    #[test]
    fn flipped_entry_is_the_only_one_reported() {
        let m = model(3, 2, 3);
        let mut net = compile_truth_tables(&m).unwrap();
        let e = &mut net.layers[1][2].subs[1].entries[37];
        *e = (*e + 1) % 8;
        let (found, _) = net.find_mismatches(&m, VerifyMode::Exhaustive).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!((found[0].layer, found[0].neuron, found[0].table, found[0].code), (1, 2, TableId::Sub(1), 37));
        match net.verify_equivalence(&m, VerifyMode::Exhaustive) {
            Err(Error::Equivalence { layer: 1, neuron: 2, code: 37, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lookup_evaluation_agrees_with_model() {
        for subs in [1, 2] {
            let m = model(3, subs, 4);
            let net = compile_truth_tables(&m).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let inputs: Vec<Vec<u16>> = (0..1000).map(|_| (0..10).map(|_| rng.random_range(0..4)).collect()).collect();
            assert_eq!(net.end_to_end_agreement(&m, &inputs).unwrap(), 1000);
            for x in &inputs[..50] {
                assert_eq!(net.eval_codes(x).unwrap().1, net.lookups_per_inference());
            }
        }
    }

    #[test]
    fn identity_network_passes_codes_through() {
        let net = LutNetwork {
            n_inputs: 2,
            n_classes: 2,
            beta: 2,
            fan_in: 1,
            subneurons: 1,
            input_range: (0.0, 3.0),
            layers: vec![vec![
                NeuronTables {
                    subs: vec![SubTable { inputs: vec![0], entries: vec![0, 1, 2, 3] }],
                    adder: None,
                },
                NeuronTables {
                    subs: vec![SubTable { inputs: vec![1], entries: vec![0, 1, 2, 3] }],
                    adder: None,
                },
            ]],
        };
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(net.eval_codes(&[a, b]).unwrap().0, vec![a, b]);
            }
        }
        assert_eq!(net.eval_lut(&[1, 3]).unwrap().bits(), 1);
        assert_eq!(LutNetwork::from_bytes(&net.to_bytes()).unwrap(), net);
    }

    #[test]
    fn three_qubit_decode_covers_all_states() {
        let cfg = PolyMlpConfig {
            hidden_widths: vec![4],
            fan_in: 2,
            ..PolyMlpConfig::default()
        };
        let m = PolyMlpModel::init(&cfg, 6, 8, (0.0, 1.0)).unwrap();
        let net = compile_truth_tables(&m).unwrap();
        assert_eq!(net.n_ions(), 3);
        for c in 0..8 {
            assert_eq!(QubitState::from_class(3, c).unwrap().class_index(), c);
        }
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let m = model(2, 2, 5);
        let net = compile_truth_tables(&m).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(LutNetwork::from_bytes(&bytes).unwrap(), net);
        assert!(matches!(LutNetwork::from_bytes(&bytes[..bytes.len() - 1]), Err(ParseError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(LutNetwork::from_bytes(&bad), Err(ParseError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(LutNetwork::from_bytes(&bad), Err(ParseError::TrailingBytes { .. })));
        let text = net.netlist();
        assert!(text.contains("table l0.n0.sub0 inputs [in."));
        assert!(text.contains("table l2.n3.adder inputs [l2.n3.sub0, l2.n3.sub1] entries 64"));
    }

    #[test]
    fn oversized_tables_are_refused() {
        let cfg = PolyMlpConfig {
            hidden_widths: vec![6],
            fan_in: 6,
            activation_bits: 4,
            ..PolyMlpConfig::default()
        };
        let m = PolyMlpModel::init(&cfg, 8, 2, (0.0, 1.0)).unwrap();
        assert!(matches!(compile_truth_tables(&m), Err(Error::Config(_))));
    }
}
