//! Integer-only evaluation of a trained transformer in a `T.F` format.
//!
//! Batch norm keeps its running mean apart from the scale, so that tiny
//! running variances do not push a folded offset out of range. Every matrix
//! product accumulates exactly at double width and rounds once per output
//! element. Softmax reads exponentials from a 256-entry table indexed by
//! the max-subtracted score and normalizes through one reciprocal per row.

use ndarray::{Array1, Array2};

use super::{BatchNorm, FixedOnlyGuard, HeadMode, VitConfig, VitModel};
use crate::dataset::{IonImage, QubitState};
use crate::error::{Error, Result};
use crate::fixedpoint::{round_shift, FixedFormat, Rounding};
use crate::polymlp::argmax;

pub const EXP_TABLE_LEN: usize = 256;
/// Extra fraction bits carried by the softmax reciprocal.
const RECIP_GUARD_BITS: u32 = 16;

/// Row-major matrix of codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl CodeMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CodeMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedHead {
    pub wq: CodeMatrix,
    pub wk: CodeMatrix,
    pub wv: CodeMatrix,
}

/// Infer-mode batch norm: `(x - mean) * scale + beta`, where `scale`
/// already includes `gamma / sqrt(var + eps)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedBatchNorm {
    pub mean: Vec<i64>,
    pub scale: Vec<i64>,
    pub beta: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedLayer {
    pub heads: Vec<FixedHead>,
    pub wo: CodeMatrix,
    pub bn: FixedBatchNorm,
    pub lin_w: CodeMatrix,
    pub lin_b: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedClassifier {
    pub bn: FixedBatchNorm,
    pub w: CodeMatrix,
    pub b: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedVitModel {
    pub config: VitConfig,
    pub format: FixedFormat,
    pub input_scale: f64,
    pub embedding: CodeMatrix,
    pub pos: CodeMatrix,
    pub cls: Vec<i64>,
    pub layers: Vec<FixedLayer>,
    pub head: FixedClassifier,
    /// Parameters clipped to the format range during quantization.
    pub saturated: usize,
    attn_scale: i64,
    exp_table: Vec<i64>,
}

struct Quantizer {
    format: FixedFormat,
    saturated: usize,
}

impl Quantizer {
    fn scalar(&mut self, x: f64) -> Result<i64> {
        let code = self.format.quantize_code(x, Rounding::NearestEven)?;
        let exact = x * (self.format.fraction_bits() as f64).exp2();
        if exact.round_ties_even() != code as f64 {
            self.saturated += 1;
        }
        Ok(code)
    }

    fn vec(&mut self, v: &Array1<f64>) -> Result<Vec<i64>> {
        v.iter().map(|&x| self.scalar(x)).collect()
    }

    fn bn(&mut self, bn: &BatchNorm) -> Result<FixedBatchNorm> {
        Ok(FixedBatchNorm {
            mean: self.vec(&bn.running_mean)?,
            scale: self.vec(&bn.scale())?,
            beta: self.vec(&bn.beta)?,
        })
    }

    fn mat(&mut self, m: &Array2<f64>) -> Result<CodeMatrix> {
        Ok(CodeMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().map(|&x| self.scalar(x)).collect::<Result<_>>()?,
        })
    }
}

/// Code of `exp(-k * 2^s / 2^F)` for entry `k`, where `2^s` score codes
/// share one entry.
pub fn exp_table(format: FixedFormat) -> Vec<i64> {
    let shift = exp_shift(format);
    (0..EXP_TABLE_LEN)
        .map(|k| {
            let x = -(((k as u64) << shift) as f64) * format.ulp();
            format
                .quantize_code(x.exp(), Rounding::NearestEven)
                .expect("exponential is finite")
        })
        .collect()
}

fn exp_shift(format: FixedFormat) -> u32 {
    (format.fraction_bits() as u32).saturating_sub(5)
}

/// Converts a float model. Values beyond the format range saturate and are
/// counted in [`FixedVitModel::saturated`].
pub fn quantize_vit(model: &VitModel, format: FixedFormat) -> Result<FixedVitModel> {
    model.config.validate()?;
    let mut q = Quantizer { format, saturated: 0 };
    let p = &model.params;
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        layers.push(FixedLayer {
            heads: l
                .heads
                .iter()
                .map(|h| {
                    Ok(FixedHead {
                        wq: q.mat(&h.wq)?,
                        wk: q.mat(&h.wk)?,
                        wv: q.mat(&h.wv)?,
                    })
                })
                .collect::<Result<_>>()?,
            wo: q.mat(&l.wo)?,
            bn: q.bn(&l.bn)?,
            lin_w: q.mat(&l.lin_w)?,
            lin_b: q.vec(&l.lin_b)?,
        });
    }
    let head = FixedClassifier {
        bn: q.bn(&p.head.bn)?,
        w: q.mat(&p.head.w)?,
        b: q.vec(&p.head.b)?,
    };
    let embedding = q.mat(&p.embedding)?;
    let pos = q.mat(&p.pos)?;
    let cls = q.vec(&p.cls)?;
    let saturated = q.saturated;
    FixedVitModel::from_parts(
        model.config.clone(),
        format,
        model.input_scale,
        embedding,
        pos,
        cls,
        layers,
        head,
        saturated,
    )
}

/// `a * b (+ bias)`, exact at double width, one rounding per element.
fn matmul(a: &CodeMatrix, b: &CodeMatrix, bias: Option<&[i64]>, f: FixedFormat) -> CodeMatrix {
    debug_assert_eq!(a.cols, b.rows);
    let frac = f.fraction_bits() as u32;
    let mut out = CodeMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc: i128 = bias.map_or(0, |bs| (bs[j] as i128) << frac);
            for k in 0..a.cols {
                acc += a.at(i, k) as i128 * b.at(k, j) as i128;
            }
            out.data[i * b.cols + j] = f.saturate(round_shift(acc, frac, Rounding::NearestEven));
        }
    }
    out
}

fn add(a: &CodeMatrix, b: &CodeMatrix, f: FixedFormat) -> CodeMatrix {
    CodeMatrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f.saturate(x as i128 + y as i128))
            .collect(),
    }
}

/// `(x - mean) * scale + beta` per column, one rounding.
fn batch_norm(x: &CodeMatrix, bn: &FixedBatchNorm, f: FixedFormat) -> CodeMatrix {
    let frac = f.fraction_bits() as u32;
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % x.cols;
        let centered = x.data[i] as i128 - bn.mean[c] as i128;
        let acc = centered * bn.scale[c] as i128 + ((bn.beta[c] as i128) << frac);
        *v = f.saturate(round_shift(acc, frac, Rounding::NearestEven));
    }
    out
}

/// Softmax of each row of `scores`, as codes. Rows sum to exactly one.
pub fn softmax_codes(scores: &CodeMatrix, table: &[i64], f: FixedFormat) -> CodeMatrix {
    let frac = f.fraction_bits() as u32;
    let shift = exp_shift(f);
    let mut out = CodeMatrix::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let row = scores.row(r);
        let max = *row.iter().max().expect("non-empty row");
        let e: Vec<i128> = row
            .iter()
            .map(|&s| {
                let idx = ((max as i128 - s as i128) >> shift) as u128;
                if idx < table.len() as u128 {
                    table[idx as usize] as i128
                } else {
                    0
                }
            })
            .collect();
        let sum: i128 = e.iter().sum::<i128>().max(1);
        let recip = (1i128 << (2 * frac + RECIP_GUARD_BITS)) / sum;
        let mut cumulative = 0i128;
        let mut previous = 0i128;
        for (c, &ei) in e.iter().enumerate() {
            cumulative += ei;
            let level = round_shift(cumulative * recip, frac + RECIP_GUARD_BITS, Rounding::NearestEven);
            out.data[r * scores.cols + c] = f.saturate(level - previous);
            previous = level;
        }
    }
    out
}

impl FixedVitModel {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: VitConfig,
        format: FixedFormat,
        input_scale: f64,
        embedding: CodeMatrix,
        pos: CodeMatrix,
        cls: Vec<i64>,
        layers: Vec<FixedLayer>,
        head: FixedClassifier,
        saturated: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let hd = config.head_dim();
        let cw = match config.head_mode {
            HeadMode::Split => config.n_heads * hd,
            HeadMode::Literal => d,
        };
        let shape = |m: &CodeMatrix, r: usize, c: usize, what: &str| -> Result<()> {
            if m.rows != r || m.cols != c || m.data.len() != r * c {
                return Err(Error::Shape(format!("{what} is {}x{}, expected {r}x{c}", m.rows, m.cols)));
            }
            Ok(())
        };
        let len = |v: &[i64], n: usize, what: &str| -> Result<()> {
            if v.len() != n {
                return Err(Error::Shape(format!("{what} has {} entries, expected {n}", v.len())));
            }
            Ok(())
        };
        shape(&embedding, config.patch_len(), d, "embedding")?;
        shape(&pos, config.n_tokens(), d, "position embedding")?;
        len(&cls, d, "class token")?;
        if layers.len() != config.n_layers {
            return Err(Error::Shape(format!("{} layers, expected {}", layers.len(), config.n_layers)));
        }
        for l in &layers {
            if l.heads.len() != config.n_heads {
                return Err(Error::Shape(format!("{} heads, expected {}", l.heads.len(), config.n_heads)));
            }
            for h in &l.heads {
                shape(&h.wq, d, hd, "W_Q")?;
                shape(&h.wk, d, hd, "W_K")?;
                shape(&h.wv, d, hd, "W_V")?;
            }
            shape(&l.wo, cw, d, "W_O")?;
            len(&l.bn.mean, d, "BN mean")?;
            len(&l.bn.scale, d, "BN scale")?;
            len(&l.bn.beta, d, "BN offset")?;
            shape(&l.lin_w, d, d, "linear weight")?;
            len(&l.lin_b, d, "linear bias")?;
        }
        len(&head.bn.mean, d, "head BN mean")?;
        len(&head.bn.scale, d, "head BN scale")?;
        len(&head.bn.beta, d, "head BN offset")?;
        shape(&head.w, d, config.n_classes, "head weight")?;
        len(&head.b, config.n_classes, "head bias")?;
        let attn_scale = format.quantize_code(1.0 / (hd as f64).sqrt(), Rounding::NearestEven)?;
        let model = FixedVitModel {
            exp_table: exp_table(format),
            attn_scale,
            config,
            format,
            input_scale,
            embedding,
            pos,
            cls,
            layers,
            head,
            saturated,
        };
        let (lo, hi) = (format.min_code(), format.max_code());
        let mut bad = false;
        model.visit_codes(&mut |codes| bad |= codes.iter().any(|&c| c < lo || c > hi));
        if bad {
            return Err(Error::Shape(format!("code outside the {format} range")));
        }
        Ok(model)
    }

    /// Every parameter code block in declaration order.
    pub fn visit_codes(&self, f: &mut dyn FnMut(&[i64])) {
        f(&self.embedding.data);
        f(&self.pos.data);
        f(&self.cls);
        for l in &self.layers {
            for h in &l.heads {
                f(&h.wq.data);
                f(&h.wk.data);
                f(&h.wv.data);
            }
            f(&l.wo.data);
            f(&l.bn.mean);
            f(&l.bn.scale);
            f(&l.bn.beta);
            f(&l.lin_w.data);
            f(&l.lin_b);
        }
        f(&self.head.bn.mean);
        f(&self.head.bn.scale);
        f(&self.head.bn.beta);
        f(&self.head.w.data);
        f(&self.head.b);
    }

    pub fn exp_table(&self) -> &[i64] {
        &self.exp_table
    }

    /// Input patches as codes; the last step that uses floating point.
    pub fn quantize_input(&self, image: &IonImage) -> Result<CodeMatrix> {
        let cfg = &self.config;
        if image.height != cfg.height || image.width != cfg.width || image.pixels.len() != cfg.height * cfg.width {
            return Err(Error::Shape(format!(
                "{}x{} image for a {}x{} model",
                image.height, image.width, cfg.height, cfg.width
            )));
        }
        let p = cfg.patch_size;
        let cols = cfg.width / p;
        let mut out = CodeMatrix::zeros(cfg.n_patches(), p * p);
        for n in 0..cfg.n_patches() {
            let (r0, c0) = ((n / cols) * p, (n % cols) * p);
            for i in 0..p {
                for j in 0..p {
                    let px = image.pixels[(r0 + i) * cfg.width + c0 + j] as f64 / self.input_scale;
                    out.data[n * p * p + i * p + j] = self.format.quantize_code(px, Rounding::NearestEven)?;
                }
            }
        }
        Ok(out)
    }

    /// Logit codes from input codes, integer arithmetic only.
    pub fn logit_codes(&self, patches: &CodeMatrix) -> Result<Vec<i64>> {
        let cfg = &self.config;
        if patches.rows != cfg.n_patches() || patches.cols != cfg.patch_len() {
            return Err(Error::Shape("patch matrix does not match the model".into()));
        }
        let _guard = FixedOnlyGuard::enter();
        let f = self.format;
        let frac = f.fraction_bits() as u32;
        let t = cfg.n_tokens();
        let d = cfg.latent_dim;
        let hd = cfg.head_dim();

        let xe = matmul(patches, &self.embedding, None, f);
        let mut z = CodeMatrix::zeros(t, d);
        z.data[..d].copy_from_slice(&self.cls);
        z.data[d..].copy_from_slice(&xe.data);
        z = add(&z, &self.pos, f);

        for l in &self.layers {
            let mut combined = CodeMatrix::zeros(t, l.wo.rows);
            for (h, w) in l.heads.iter().enumerate() {
                let q = matmul(&z, &w.wq, None, f);
                let k = matmul(&z, &w.wk, None, f);
                let v = matmul(&z, &w.wv, None, f);
                let mut scores = CodeMatrix::zeros(t, t);
                for i in 0..t {
                    for j in 0..t {
                        let mut acc = 0i128;
                        for c in 0..hd {
                            acc += q.at(i, c) as i128 * k.at(j, c) as i128;
                        }
                        let scaled = round_shift(acc * self.attn_scale as i128, 2 * frac, Rounding::NearestEven);
                        scores.data[i * t + j] = f.saturate(scaled);
                    }
                }
                let attn = softmax_codes(&scores, &self.exp_table, f);
                let o = matmul(&attn, &v, None, f);
                for i in 0..t {
                    for c in 0..hd {
                        let col = match cfg.head_mode {
                            HeadMode::Split => h * hd + c,
                            HeadMode::Literal => c,
                        };
                        let dst = &mut combined.data[i * combined.cols + col];
                        *dst = f.saturate(*dst as i128 + o.at(i, c) as i128);
                    }
                }
            }
            let s2 = add(&matmul(&combined, &l.wo, None, f), &z, f);
            let u = batch_norm(&s2, &l.bn, f);
            let mut pre = matmul(&u, &l.lin_w, Some(&l.lin_b), f);
            pre.data.iter_mut().for_each(|x| *x = (*x).max(0));
            z = add(&pre, &s2, f);
        }

        let class_row = CodeMatrix {
            rows: 1,
            cols: d,
            data: z.row(0).to_vec(),
        };
        let u = batch_norm(&class_row, &self.head.bn, f);
        Ok(matmul(&u, &self.head.w, Some(&self.head.b), f).data)
    }

    pub fn logits(&self, image: &IonImage) -> Result<Vec<f64>> {
        let codes = self.logit_codes(&self.quantize_input(image)?)?;
        Ok(codes.iter().map(|&c| self.format.to_real(c)).collect())
    }

    pub fn predict(&self, image: &IonImage) -> Result<QubitState> {
        let codes = self.logit_codes(&self.quantize_input(image)?)?;
        QubitState::from_class(image.label.n_ions(), argmax(&codes))
    }
}
