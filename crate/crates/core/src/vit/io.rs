//! Binary model files for float and fixed-point transformers.

use std::path::Path;

use super::fixed::{CodeMatrix, FixedBatchNorm, FixedClassifier, FixedHead, FixedLayer, FixedVitModel};
use super::{HeadMode, VitConfig, VitModel, VitParams};
use crate::binio::{Reader, VecWrite};
use crate::error::{ParseError, Result};
use crate::fixedpoint::FixedFormat;

pub const VIT_MAGIC: &[u8; 4] = b"QVIT";
pub const VIT_VERSION: u16 = 1;

const KIND_FLOAT: u8 = 0;
const KIND_FIXED: u8 = 1;
/// Upper bound on any single config dimension accepted from a file.
const MAX_DIM: usize = 4096;

fn write_header(out: &mut Vec<u8>, kind: u8, cfg: &VitConfig, input_scale: f64) {
    out.extend_from_slice(VIT_MAGIC);
    out.put_u16(VIT_VERSION);
    out.put_u8(kind);
    for v in [cfg.height, cfg.width, cfg.patch_size, cfg.latent_dim, cfg.n_heads, cfg.n_layers] {
        out.put_u16(v as u16);
    }
    out.put_u8(match cfg.head_mode {
        HeadMode::Split => 0,
        HeadMode::Literal => 1,
    });
    out.put_u16(cfg.n_classes as u16);
    out.put_f64(cfg.learning_rate);
    out.put_u32(cfg.batch_size as u32);
    out.put_u32(cfg.epochs as u32);
    out.put_u64(cfg.seed);
    out.put_u8(cfg.keep_best_epoch as u8);
    out.put_f64(input_scale);
}

fn read_header(r: &mut Reader<'_>) -> Result<(u8, VitConfig, f64), ParseError> {
    r.magic(VIT_MAGIC)?;
    r.version(VIT_VERSION)?;
    let kind = r.u8("model kind")?;
    if kind != KIND_FLOAT && kind != KIND_FIXED {
        return Err(r.malformed(format!("unknown model kind {kind}")));
    }
    let mut dims = [0usize; 6];
    for (d, name) in dims.iter_mut().zip(["height", "width", "patch_size", "latent_dim", "n_heads", "n_layers"]) {
        *d = r.u16(name)? as usize;
        if *d > MAX_DIM {
            return Err(r.malformed(format!("{name} {} exceeds {MAX_DIM}", *d)));
        }
    }
    let head_mode = match r.u8("head_mode")? {
        0 => HeadMode::Split,
        1 => HeadMode::Literal,
        v => return Err(r.malformed(format!("unknown head mode {v}"))),
    };
    let cfg = VitConfig {
        height: dims[0],
        width: dims[1],
        patch_size: dims[2],
        latent_dim: dims[3],
        n_heads: dims[4],
        n_layers: dims[5],
        head_mode,
        n_classes: r.u16("n_classes")? as usize,
        learning_rate: r.f64("learning_rate")?,
        batch_size: r.u32("batch_size")? as usize,
        epochs: r.u32("epochs")? as usize,
        seed: r.u64("seed")?,
        keep_best_epoch: match r.u8("keep_best_epoch")? {
            0 => false,
            1 => true,
            v => return Err(r.malformed(format!("keep_best_epoch flag {v}"))),
        },
    };
    let input_scale = r.f64("input_scale")?;
    cfg.validate().map_err(|e| r.malformed(e.to_string()))?;
    if !(input_scale.is_finite() && input_scale > 0.0) {
        return Err(r.malformed(format!("input scale {input_scale} must be positive")));
    }
    Ok((kind, cfg, input_scale))
}

/// Shapes of every stored tensor, in file order. Float models carry the
/// four batch-norm vectors per site; fixed models carry mean, scale and
/// offset.
fn tensor_shapes(cfg: &VitConfig, fixed: bool) -> Vec<(usize, usize)> {
    let d = cfg.latent_dim;
    let hd = cfg.head_dim();
    let cw = match cfg.head_mode {
        HeadMode::Split => cfg.n_heads * hd,
        HeadMode::Literal => d,
    };
    let bn_vectors = if fixed { 3 } else { 4 };
    let mut s = vec![(cfg.patch_len(), d), (cfg.n_tokens(), d), (1, d)];
    for _ in 0..cfg.n_layers {
        for _ in 0..cfg.n_heads {
            s.extend([(d, hd); 3]);
        }
        s.push((cw, d));
        s.extend(std::iter::repeat_n((1, d), bn_vectors));
        s.push((d, d));
        s.push((1, d));
    }
    s.extend(std::iter::repeat_n((1, d), bn_vectors));
    s.push((d, cfg.n_classes));
    s.push((1, cfg.n_classes));
    s
}

fn total_len(r: &Reader<'_>, shapes: &[(usize, usize)], width: usize) -> Result<usize, ParseError> {
    let mut total = 0usize;
    for &(a, b) in shapes {
        total = a
            .checked_mul(b)
            .and_then(|n| total.checked_add(n))
            .ok_or_else(|| r.malformed("parameter count overflows"))?;
    }
    if total.checked_mul(width) != Some(r.remaining()) {
        return Err(ParseError::Truncated {
            what: r.what(),
            detail: format!("config implies {total} parameters, {} bytes remain", r.remaining()),
        });
    }
    Ok(total)
}

impl VitModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, KIND_FLOAT, &self.config, self.input_scale);
        self.params.visit(&mut |_, data, _| data.iter().for_each(|&v| out.put_f64(v)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VitModel, ParseError> {
        let mut r = Reader::new(bytes, "ViT model");
        let (kind, config, input_scale) = read_header(&mut r)?;
        if kind != KIND_FLOAT {
            return Err(r.malformed("file holds a fixed-point model"));
        }
        total_len(&r, &tensor_shapes(&config, false), 8)?;
        let mut params = VitParams::zeros(&config);
        let mut failure = None;
        params.visit_mut(&mut |name, data, _| {
            if failure.is_some() {
                return;
            }
            match r.f64_vec(data.len(), "tensor") {
                Ok(v) => {
                    if name.ends_with("running_var") && v.iter().any(|&x| !(x > 0.0)) {
                        failure = Some(r.malformed(format!("{name} must be strictly positive")));
                    }
                    data.copy_from_slice(&v);
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        r.finish()?;
        Ok(VitModel {
            config,
            params,
            input_scale,
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

impl FixedVitModel {
    /// Codes are stored as 16-bit words for formats of at most 16 bits and
    /// as 64-bit words otherwise.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, KIND_FIXED, &self.config, self.input_scale);
        let desc = self.format.to_string();
        out.put_u8(desc.len() as u8);
        out.extend_from_slice(desc.as_bytes());
        out.put_u32(self.saturated as u32);
        let narrow = self.format.total_bits() <= 16;
        self.visit_codes(&mut |codes| {
            for &c in codes {
                if narrow {
                    out.put_i16(c as i16);
                } else {
                    out.put_u64(c as u64);
                }
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FixedVitModel, ParseError> {
        let mut r = Reader::new(bytes, "ViT model");
        let (kind, config, input_scale) = read_header(&mut r)?;
        if kind != KIND_FIXED {
            return Err(r.malformed("file holds a float model"));
        }
        let n = r.u8("format descriptor length")? as usize;
        let desc = r.take(n, "format descriptor")?;
        let desc = std::str::from_utf8(desc).map_err(|_| r.malformed("format descriptor is not text"))?;
        let format: FixedFormat = desc.parse().map_err(|e: crate::Error| r.malformed(e.to_string()))?;
        let saturated = r.u32("saturation count")? as usize;
        let narrow = format.total_bits() <= 16;
        let shapes = tensor_shapes(&config, true);
        total_len(&r, &shapes, if narrow { 2 } else { 8 })?;
        let mut blocks = Vec::with_capacity(shapes.len());
        for &(rows, cols) in &shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(if narrow { r.i16("code")? as i64 } else { r.u64("code")? as i64 });
            }
            blocks.push(CodeMatrix { rows, cols, data });
        }
        r.finish()?;
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("shape list matches");
        let embedding = next();
        let pos = next();
        let cls = next().data;
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|_| FixedHead {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                })
                .collect();
            layers.push(FixedLayer {
                heads,
                wo: next(),
                bn: FixedBatchNorm {
                    mean: next().data,
                    scale: next().data,
                    beta: next().data,
                },
                lin_w: next(),
                lin_b: next().data,
            });
        }
        let head = FixedClassifier {
            bn: FixedBatchNorm {
                mean: next().data,
                scale: next().data,
                beta: next().data,
            },
            w: next(),
            b: next().data,
        };
        FixedVitModel::from_parts(config, format, input_scale, embedding, pos, cls, layers, head, saturated)
            .map_err(|e| ParseError::Malformed {
                what: "ViT model",
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

/// Either kind of transformer model file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVitModel {
    Float(VitModel),
    Fixed(FixedVitModel),
}

impl AnyVitModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<AnyVitModel, ParseError> {
        // kind byte follows the 4-byte magic and 2-byte version
        match bytes.get(6) {
            Some(&KIND_FIXED) if bytes.starts_with(VIT_MAGIC) => FixedVitModel::from_bytes(bytes).map(AnyVitModel::Fixed),
            _ => VitModel::from_bytes(bytes).map(AnyVitModel::Float),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}
