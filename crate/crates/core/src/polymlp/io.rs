//! Binary model file for trained polynomial networks.

use std::path::Path;

use super::{AdamW, Connectivity, Monomials, PolyMlpConfig, PolyMlpModel};
use crate::binio::{Reader, VecWrite};
use crate::error::{ParseError, Result};

pub const MLP_MAGIC: &[u8; 4] = b"QMLP";
pub const MLP_VERSION: u16 = 1;

impl PolyMlpModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MLP_MAGIC);
        out.put_u16(MLP_VERSION);
        out.put_u32(self.n_inputs as u32);
        out.put_u16(self.n_classes as u16);
        out.put_u16(c.hidden_widths.len() as u16);
        c.hidden_widths.iter().for_each(|&w| out.put_u32(w as u32));
        out.put_u8(c.literal_head as u8);
        out.put_u8(c.fan_in as u8);
        out.put_u8(c.activation_bits);
        out.put_u8(c.poly_degree as u8);
        out.put_u8(c.subneurons as u8);
        out.put_u64(c.seed);
        out.put_f64(c.learning_rate);
        out.put_u32(c.epochs as u32);
        out.put_u32(c.batch_size as u32);
        out.put_u8(c.keep_best_epoch as u8);
        for v in [c.optimizer.beta1, c.optimizer.beta2, c.optimizer.epsilon, c.optimizer.weight_decay] {
            out.put_f64(v);
        }
        out.put_f64(self.input_range.0);
        out.put_f64(self.input_range.1);
        for (wires, coeffs) in self.connectivity.layers.iter().zip(&self.coefficients) {
            wires.iter().for_each(|&i| out.put_u32(i));
            coeffs.iter().for_each(|&w| out.put_f64(w));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PolyMlpModel, ParseError> {
        let mut r = Reader::new(bytes, "MLP model");
        r.magic(MLP_MAGIC)?;
        r.version(MLP_VERSION)?;
        let n_inputs = r.u32("n_inputs")? as usize;
        let n_classes = r.u16("n_classes")? as usize;
        let n_hidden = r.u16("hidden layer count")? as usize;
        let mut hidden_widths = Vec::new();
        for _ in 0..n_hidden {
            hidden_widths.push(r.u32("hidden width")? as usize);
        }
        let literal_head = match r.u8("literal_head")? {
            0 => false,
            1 => true,
            v => return Err(r.malformed(format!("literal_head flag {v}"))),
        };
        let fan_in = r.u8("fan_in")? as usize;
        let activation_bits = r.u8("activation_bits")?;
        let poly_degree = r.u8("poly_degree")? as usize;
        let subneurons = r.u8("subneurons")? as usize;
        let seed = r.u64("seed")?;
        let learning_rate = r.f64("learning_rate")?;
        let epochs = r.u32("epochs")? as usize;
        let batch_size = r.u32("batch_size")? as usize;
        let keep_best_epoch = match r.u8("keep_best_epoch")? {
            0 => false,
            1 => true,
            v => return Err(r.malformed(format!("keep_best_epoch flag {v}"))),
        };
        let optimizer = AdamW {
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            epsilon: r.f64("epsilon")?,
            weight_decay: r.f64("weight_decay")?,
        };
        let input_range = (r.f64("input_min")?, r.f64("input_max")?);
        let config = PolyMlpConfig {
            hidden_widths,
            literal_head,
            fan_in,
            activation_bits,
            poly_degree,
            subneurons,
            seed,
            learning_rate,
            epochs,
            batch_size,
            keep_best_epoch,
            optimizer,
        };
        config.validate(n_inputs, n_classes).map_err(|e| r.malformed(e.to_string()))?;
        if poly_degree > 8 {
            return Err(r.malformed(format!("poly_degree {poly_degree} exceeds 8")));
        }
        let n_mono = Monomials::new(fan_in, poly_degree).len();
        let mut layers = Vec::new();
        let mut coefficients = Vec::new();
        for w in config.layer_widths(n_classes) {
            let subs = w
                .checked_mul(subneurons)
                .ok_or_else(|| r.malformed("layer size overflows"))?;
            let n_wires = subs.checked_mul(fan_in).ok_or_else(|| r.malformed("layer size overflows"))?;
            let bytes = r.take(n_wires.checked_mul(4).ok_or_else(|| r.malformed("layer size overflows"))?, "wires")?;
            layers.push(bytes.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect());
            let n_coeff = subs.checked_mul(n_mono).ok_or_else(|| r.malformed("layer size overflows"))?;
            coefficients.push(r.f64_vec(n_coeff, "coefficients")?);
        }
        r.finish()?;
        let connectivity = Connectivity {
            fan_in,
            subneurons,
            layers,
        };
        PolyMlpModel::from_parts(config, n_inputs, n_classes, connectivity, coefficients, input_range)
            .map_err(|e| ParseError::Malformed {
                what: "MLP model",
                detail: e.to_string(),
            })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_and_rejections() {
        let cfg = PolyMlpConfig {
            hidden_widths: vec![5, 3],
            fan_in: 3,
            ..PolyMlpConfig::default()
        };
        let m = PolyMlpModel::init(&cfg, 12, 8, (3.0, 250.0)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(PolyMlpModel::from_bytes(&bytes).unwrap(), m);
        assert!(matches!(PolyMlpModel::from_bytes(&bytes[..40]), Err(ParseError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(PolyMlpModel::from_bytes(&bad), Err(ParseError::UnsupportedVersion { .. })));
    }
}
