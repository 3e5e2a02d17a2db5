//! Quantization-aware training with a straight-through estimator.
//!
//! The backward pass treats every quantizer as the identity and hard-tanh as
//! the identity inside `(-1, 1)` and flat outside.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, hardtanh, quantize_pixels, PolyMlpConfig, PolyMlpModel, Quantizer};
use crate::dataset::IonImage;
use crate::eval::class_mean_fidelity;
use crate::error::{Error, Result};
use crate::parallel::{configured_threads, derive_seed, map_indexed};

const SHUFFLE_STREAM: u64 = 12;
const CHUNK: usize = 16;

/// How quantizers behave in the training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Quantize as at inference.
    Quantized,
    /// Skip every quantizer, leaving a piecewise-smooth network.
    PassThrough,
}

struct Trace {
    /// Values entering each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every sub-neuron, `[neuron * A + a]`.
    pre: Vec<Vec<f64>>,
    /// Sum of sub-neuron outputs per neuron (only used when `A > 1`).
    sums: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn quant(mode: QuantMode, q: Quantizer, v: f64) -> f64 {
    match mode {
        QuantMode::Quantized => q.quantize(v),
        QuantMode::PassThrough => v,
    }
}

fn forward_trace(m: &PolyMlpModel, input: &[u16], mode: QuantMode) -> Trace {
    let q_in = m.activation();
    let a_count = m.config.subneurons;
    let mut x: Vec<f64> = input.iter().map(|&c| q_in.value(c)).collect();
    let mut scratch = Vec::new();
    let mut wires = Vec::with_capacity(m.config.fan_in);
    let mut trace = Trace {
        inputs: Vec::new(),
        pre: Vec::new(),
        sums: Vec::new(),
        logits: Vec::new(),
    };
    for (l, &width) in m.widths().iter().enumerate() {
        let sub_q = if m.sub_is_wide(l) { m.sub_output() } else { m.activation() };
        let mut pre = Vec::with_capacity(width * a_count);
        let mut sums = Vec::with_capacity(width);
        let mut out = Vec::with_capacity(width);
        for j in 0..width {
            let mut sum = 0.0;
            for a in 0..a_count {
                wires.clear();
                wires.extend(m.connectivity.inputs(l, j, a).iter().map(|&i| x[i as usize]));
                let p = m.polynomial(l, j, a, &wires, &mut scratch);
                pre.push(p);
                sum += quant(mode, sub_q, hardtanh(p));
            }
            sums.push(sum);
            out.push(if m.is_output(l) || a_count == 1 {
                sum
            } else {
                quant(mode, m.activation(), hardtanh(sum))
            });
        }
        trace.inputs.push(std::mem::replace(&mut x, out));
        trace.pre.push(pre);
        trace.sums.push(sums);
    }
    trace.logits = x;
    trace
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Adds the gradient of one sample's loss to `grad`; returns the loss.
fn accumulate_sample(m: &PolyMlpModel, input: &[u16], label: usize, mode: QuantMode, grad: &mut [Vec<f64>]) -> f64 {
    let t = forward_trace(m, input, mode);
    let (loss, dlogits) = cross_entropy(&t.logits[..m.n_classes], label);
    let a_count = m.config.subneurons;
    let fan_in = m.config.fan_in;
    let n_mono = m.monomials().len();
    let terms = m.monomials().terms();

    let mut g_out = vec![0.0; m.widths()[m.n_layers() - 1]];
    g_out[..m.n_classes].copy_from_slice(&dlogits);
    let mut mono = Vec::with_capacity(n_mono);
    let mut wires = vec![0.0; fan_in];
    for l in (0..m.n_layers()).rev() {
        let x = &t.inputs[l];
        let mut g_in = vec![0.0; x.len()];
        for (j, &g_y) in g_out.iter().enumerate() {
            if g_y == 0.0 {
                continue;
            }
            let g_sum = if !m.is_output(l) && a_count > 1 && t.sums[l][j].abs() >= 1.0 {
                0.0
            } else {
                g_y
            };
            if g_sum == 0.0 {
                continue;
            }
            for a in 0..a_count {
                let p = t.pre[l][j * a_count + a];
                if p.abs() >= 1.0 {
                    continue;
                }
                let idx = m.connectivity.inputs(l, j, a);
                for (w, &i) in wires.iter_mut().zip(idx) {
                    *w = x[i as usize];
                }
                m.monomials().expand_into(&wires, &mut mono);
                let base = (j * a_count + a) * n_mono;
                let coeffs = &m.coefficients[l][base..base + n_mono];
                for (g, mk) in grad[l][base..base + n_mono].iter_mut().zip(&mono) {
                    *g += g_sum * mk;
                }
                if l == 0 {
                    continue;
                }
                // d p / d x_i, product rule over the factor list of each monomial
                for (k, term) in terms.iter().enumerate().skip(1) {
                    for pos in 0..term.len() {
                        let mut d = coeffs[k];
                        for (q, &v) in term.iter().enumerate() {
                            if q != pos {
                                d *= wires[v];
                            }
                        }
                        g_in[idx[term[pos]] as usize] += g_sum * d;
                    }
                }
            }
        }
        g_out = g_in;
    }
    loss
}

/// Mean loss over a batch and the gradient with respect to every
/// coefficient, laid out like `model.coefficients`.
pub fn loss_and_gradient(
    m: &PolyMlpModel,
    inputs: &[Vec<u16>],
    labels: &[usize],
    mode: QuantMode,
    threads: usize,
) -> (f64, Vec<Vec<f64>>) {
    let zero = || m.coefficients.iter().map(|l| vec![0.0; l.len()]).collect::<Vec<_>>();
    let n_chunks = inputs.len().div_ceil(CHUNK);
    let parts = map_indexed(n_chunks, threads, |c| {
        let mut g = zero();
        let mut loss = 0.0;
        for i in c * CHUNK..((c + 1) * CHUNK).min(inputs.len()) {
            loss += accumulate_sample(m, &inputs[i], labels[i], mode, &mut g);
        }
        (loss, g)
    });
    let mut grad = zero();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (acc, part) in grad.iter_mut().zip(g) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / inputs.len().max(1) as f64;
    grad.iter_mut().flatten().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Logits of the training forward pass.
pub fn forward_train(m: &PolyMlpModel, input: &[u16], mode: QuantMode) -> Vec<f64> {
    forward_trace(m, input, mode).logits
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

fn adamw_step(model: &mut PolyMlpModel, grad: &[Vec<f64>], st: &mut AdamState) {
    let opt = model.config.optimizer.clone();
    let lr = model.config.learning_rate;
    st.step += 1;
    let c1 = 1.0 - opt.beta1.powi(st.step);
    let c2 = 1.0 - opt.beta2.powi(st.step);
    for (l, layer) in model.coefficients.iter_mut().enumerate() {
        for (i, w) in layer.iter_mut().enumerate() {
            let g = grad[l][i];
            let m = &mut st.m[l][i];
            let v = &mut st.v[l][i];
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            *w -= lr * ((*m / c1) / ((*v / c2).sqrt() + opt.epsilon) + opt.weight_decay * *w);
        }
    }
}

/// Pixel range of a set of images.
pub fn pixel_range(images: &[IonImage]) -> (f64, f64) {
    let mut lo = u16::MAX;
    let mut hi = 0u16;
    for p in images.iter().flat_map(|i| &i.pixels) {
        lo = lo.min(*p);
        hi = hi.max(*p);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo as f64, hi as f64)
    }
}

pub fn train(cfg: &PolyMlpConfig, train_images: &[IonImage]) -> Result<PolyMlpModel> {
    train_with_progress(cfg, train_images, |_, _| {})
}

/// Trains on `train_images`; `progress` sees `(epoch, mean loss)` after each
/// epoch. Deterministic for a fixed seed and any worker count.
pub fn train_with_progress(
    cfg: &PolyMlpConfig,
    train_images: &[IonImage],
    progress: impl FnMut(usize, f64),
) -> Result<PolyMlpModel> {
    train_with_threads(cfg, train_images, configured_threads(), progress)
}

/// As [`train_with_progress`] with an explicit worker count (0 = calling
/// thread).
pub fn train_with_threads(
    cfg: &PolyMlpConfig,
    train_images: &[IonImage],
    threads: usize,
    mut progress: impl FnMut(usize, f64),
) -> Result<PolyMlpModel> {
    let first = train_images
        .first()
        .ok_or_else(|| Error::Training { epoch: 0, detail: "empty training set".into() })?;
    let n_inputs = first.pixels.len();
    let n_ions = first.label.n_ions();
    let n_classes = 1usize << n_ions;
    if train_images.iter().any(|i| i.pixels.len() != n_inputs || i.label.n_ions() != n_ions) {
        return Err(Error::Shape("training images disagree in shape or ion count".into()));
    }
    let range = pixel_range(train_images);
    let mut model = PolyMlpModel::init(cfg, n_inputs, n_classes, range)?;
    let q = model.activation();
    let inputs: Vec<Vec<u16>> = train_images.iter().map(|i| quantize_pixels(&i.pixels, range, q)).collect();
    let labels: Vec<usize> = train_images.iter().map(|i| i.label.class_index()).collect();
    let mut st = AdamState {
        m: model.coefficients.iter().map(|l| vec![0.0; l.len()]).collect(),
        v: model.coefficients.iter().map(|l| vec![0.0; l.len()]).collect(),
        step: 0,
    };
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<u16>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = loss_and_gradient(&model, &bx, &by, QuantMode::Quantized, threads);
            if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
            adamw_step(&mut model, &grad, &mut st);
            if model.coefficients.iter().flatten().any(|w| !w.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    detail: "coefficients overflowed".into(),
                });
            }
        }
        progress(epoch, total / inputs.len() as f64);
        if cfg.keep_best_epoch {
            let predicted = map_indexed(inputs.len(), threads, |i| {
                model.forward_codes(&inputs[i]).map(|logits| argmax(&logits))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let score = class_mean_fidelity(&predicted, &labels, n_classes);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, model.coefficients.clone()));
            }
        }
    }
    if let Some((_, coefficients)) = best {
        model.coefficients = coefficients;
    }
    Ok(model)
}
