//! Mini-batch SGD with hand-written backpropagation.
//!
//! A batch is carried as one stacked `(B * T) x D` matrix so that batch
//! norm and the dense layers act on every token of every image at once;
//! attention runs per image on its `T` rows.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_norm_stats, patchify, softmax_rows, BatchNorm, HeadMode, VitConfig, VitModel, VitParams, BN_EPS, BN_MOMENTUM};
use crate::dataset::IonImage;
use crate::eval::class_mean_fidelity;
use crate::error::{Error, Result};
use crate::parallel::derive_seed;
use crate::polymlp::argmax;

const SHUFFLE_STREAM: u64 = 21;
const EVAL_CHUNK: usize = 512;

/// Batch-norm behavior during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the batch itself.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
}

struct LayerCache {
    z_in: Array2<f64>,
    heads: Vec<Vec<HeadCache>>,
    combined: Array2<f64>,
    xhat: Array2<f64>,
    u: Array2<f64>,
    pre: Array2<f64>,
    mean: Array1<f64>,
    inv_std: Array1<f64>,
}

struct BatchCache {
    patches: Array2<f64>,
    layers: Vec<LayerCache>,
    head_xhat: Array2<f64>,
    head_u: Array2<f64>,
    head_mean: Array1<f64>,
    head_inv_std: Array1<f64>,
    logits: Array2<f64>,
}

fn normalize(x: &Array2<f64>, bn: &BatchNorm, mode: BnMode) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    match mode {
        BnMode::Train => batch_norm_stats(x),
        BnMode::Infer => {
            let inv = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            ((x - &bn.running_mean) * &inv, bn.running_mean.clone(), inv)
        }
    }
}

fn forward(cfg: &VitConfig, p: &VitParams, patches: Array2<f64>, batch: usize, mode: BnMode) -> BatchCache {
    let t = cfg.n_tokens();
    let n = cfg.n_patches();
    let d = cfg.latent_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let xe = patches.dot(&p.embedding);
    let mut z = Array2::zeros((batch * t, d));
    for b in 0..batch {
        let mut zb = z.slice_mut(s![b * t..(b + 1) * t, ..]);
        zb.row_mut(0).assign(&p.cls);
        zb.slice_mut(s![1.., ..]).assign(&xe.slice(s![b * n..(b + 1) * n, ..]));
        zb += &p.pos;
    }

    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let mut combined = Array2::zeros((batch * t, layer.wo.nrows()));
        let mut heads = Vec::with_capacity(batch);
        for b in 0..batch {
            let zb = z.slice(s![b * t..(b + 1) * t, ..]);
            let mut per_head = Vec::with_capacity(layer.heads.len());
            for (h, w) in layer.heads.iter().enumerate() {
                let q = zb.dot(&w.wq);
                let k = zb.dot(&w.wk);
                let v = zb.dot(&w.wv);
                let mut attn = q.dot(&k.t()) * scale;
                softmax_rows(&mut attn);
                let o = attn.dot(&v);
                let mut dst = match cfg.head_mode {
                    HeadMode::Split => combined.slice_mut(s![b * t..(b + 1) * t, h * hd..(h + 1) * hd]),
                    HeadMode::Literal => combined.slice_mut(s![b * t..(b + 1) * t, ..]),
                };
                dst += &o;
                per_head.push(HeadCache { q, k, v, attn });
            }
            heads.push(per_head);
        }
        let s2 = combined.dot(&layer.wo) + &z;
        let (xhat, mean, inv_std) = normalize(&s2, &layer.bn, mode);
        let u = &xhat * &layer.bn.gamma + &layer.bn.beta;
        let pre = u.dot(&layer.lin_w) + &layer.lin_b;
        let z_out = pre.mapv(|x| x.max(0.0)) + &s2;
        layers.push(LayerCache {
            z_in: std::mem::replace(&mut z, z_out),
            heads,
            combined,
            xhat,
            u,
            pre,
            mean,
            inv_std,
        });
    }

    let class_rows = z.slice(s![..;t, ..]).to_owned();
    let (head_xhat, head_mean, head_inv_std) = normalize(&class_rows, &p.head.bn, mode);
    let head_u = &head_xhat * &p.head.bn.gamma + &p.head.bn.beta;
    let logits = head_u.dot(&p.head.w) + &p.head.b;
    BatchCache {
        patches,
        layers,
        head_xhat,
        head_u,
        head_mean,
        head_inv_std,
        logits,
    }
}

/// Backward through `BN` given the gradient at its output; accumulates
/// `gamma`/`beta` gradients and returns the gradient at its input.
fn bn_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    bn: &BatchNorm,
    grad: &mut BatchNorm,
    mode: BnMode,
) -> Array2<f64> {
    grad.gamma += &(dy * xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &bn.gamma;
    match mode {
        BnMode::Infer => dxhat * inv_std,
        BnMode::Train => {
            let m = dy.nrows() as f64;
            let sum = dxhat.sum_axis(Axis(0));
            let dot = (&dxhat * xhat).sum_axis(Axis(0));
            (dxhat * m - &sum - &(xhat * &dot)) * &(inv_std / m)
        }
    }
}

fn backward(cfg: &VitConfig, p: &VitParams, c: &BatchCache, dlogits: &Array2<f64>, mode: BnMode) -> VitParams {
    let batch = dlogits.nrows();
    let t = cfg.n_tokens();
    let n = cfg.n_patches();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = VitParams::zeros(cfg);
    g.visit_mut(&mut |_, d, _| d.fill(0.0));

    g.head.w = c.head_u.t().dot(dlogits);
    g.head.b = dlogits.sum_axis(Axis(0));
    let du = dlogits.dot(&p.head.w.t());
    let dclass = bn_backward(&du, &c.head_xhat, &c.head_inv_std, &p.head.bn, &mut g.head.bn, mode);

    let mut dz = Array2::zeros((batch * t, cfg.latent_dim));
    dz.slice_mut(s![..;t, ..]).assign(&dclass);

    for (l, (layer, lc)) in p.layers.iter().zip(&c.layers).enumerate().rev() {
        let gl = &mut g.layers[l];
        let mut ds2 = dz.clone();
        let dpre = &dz * &lc.pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        gl.lin_w = lc.u.t().dot(&dpre);
        gl.lin_b = dpre.sum_axis(Axis(0));
        let du = dpre.dot(&layer.lin_w.t());
        ds2 += &bn_backward(&du, &lc.xhat, &lc.inv_std, &layer.bn, &mut gl.bn, mode);

        gl.wo = lc.combined.t().dot(&ds2);
        let dcombined = ds2.dot(&layer.wo.t());
        let mut dz_in = ds2;
        for b in 0..batch {
            let rows = b * t..(b + 1) * t;
            let zb = lc.z_in.slice(s![rows.clone(), ..]);
            let mut dzb = Array2::<f64>::zeros((t, cfg.latent_dim));
            for (h, (w, hc)) in layer.heads.iter().zip(&lc.heads[b]).enumerate() {
                let d_o: ArrayView2<f64> = match cfg.head_mode {
                    HeadMode::Split => dcombined.slice(s![rows.clone(), h * hd..(h + 1) * hd]),
                    HeadMode::Literal => dcombined.slice(s![rows.clone(), ..]),
                };
                let dv = hc.attn.t().dot(&d_o);
                let da = d_o.dot(&hc.v.t());
                let row_dot = (&da * &hc.attn).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = &hc.attn * &(da - &row_dot) * scale;
                let dq = ds.dot(&hc.k);
                let dk = ds.t().dot(&hc.q);
                let gh = &mut gl.heads[h];
                gh.wq += &zb.t().dot(&dq);
                gh.wk += &zb.t().dot(&dk);
                gh.wv += &zb.t().dot(&dv);
                dzb += &dq.dot(&w.wq.t());
                dzb += &dk.dot(&w.wk.t());
                dzb += &dv.dot(&w.wv.t());
            }
            let mut dst = dz_in.slice_mut(s![rows, ..]);
            dst += &dzb;
        }
        dz = dz_in;
    }

    let mut dpatch_rows = Array2::zeros((batch * n, cfg.latent_dim));
    for b in 0..batch {
        let dzb = dz.slice(s![b * t..(b + 1) * t, ..]);
        g.cls += &dzb.row(0);
        g.pos += &dzb;
        dpatch_rows.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&dzb.slice(s![1.., ..]));
    }
    g.embedding = c.patches.t().dot(&dpatch_rows);
    g
}

fn stack_patches(cfg: &VitConfig, images: &[&IonImage], input_scale: f64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len() * cfg.n_patches(), cfg.patch_len()));
    for (b, img) in images.iter().enumerate() {
        if img.height != cfg.height || img.width != cfg.width {
            return Err(Error::Shape(format!(
                "{}x{} image for a {}x{} model",
                img.height, img.width, cfg.height, cfg.width
            )));
        }
        let x = patchify(img, cfg.patch_size, input_scale)?;
        let n = cfg.n_patches();
        out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&x);
    }
    Ok(out)
}

/// Mean cross-entropy of a batch and the gradient at the logits.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows() as f64;
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[y];
        probs[[i, y]] -= 1.0;
    }
    (loss / batch, probs / batch)
}

/// Batch logits under the given batch-norm mode.
pub fn batch_logits(model: &VitModel, images: &[&IonImage], mode: BnMode) -> Result<Array2<f64>> {
    let x = stack_patches(&model.config, images, model.input_scale)?;
    Ok(forward(&model.config, &model.params, x, images.len(), mode).logits)
}

/// Mean loss over a batch and the gradient for every tensor, laid out like
/// the parameters (running-statistic slots stay zero).
pub fn loss_and_gradient(model: &VitModel, images: &[&IonImage], mode: BnMode) -> Result<(f64, VitParams)> {
    let x = stack_patches(&model.config, images, model.input_scale)?;
    let labels: Vec<usize> = images.iter().map(|i| i.label.class_index()).collect();
    let cache = forward(&model.config, &model.params, x, images.len(), mode);
    let (loss, dlogits) = cross_entropy(&cache.logits, &labels);
    Ok((loss, backward(&model.config, &model.params, &cache, &dlogits, mode)))
}

fn update_running(bn: &mut BatchNorm, mean: &Array1<f64>, inv_std: &Array1<f64>, rows: usize) {
    let m = rows as f64;
    let unbias = if rows > 1 { m / (m - 1.0) } else { 1.0 };
    let var = inv_std.mapv(|s| (1.0 / (s * s) - BN_EPS).max(0.0) * unbias);
    bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
    bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + var * BN_MOMENTUM;
}

/// Largest pixel of the training split, the divisor applied to inputs.
pub fn input_scale(images: &[IonImage]) -> f64 {
    images
        .iter()
        .flat_map(|i| i.pixels.iter())
        .copied()
        .max()
        .map_or(1.0, |m| m.max(1) as f64)
}

pub fn train_vit(cfg: &VitConfig, train_images: &[IonImage]) -> Result<VitModel> {
    train_vit_with_progress(cfg, train_images, |_, _| {})
}

/// Plain SGD over shuffled mini-batches; `progress` sees `(epoch, mean
/// loss)` after each epoch.
pub fn train_vit_with_progress(
    cfg: &VitConfig,
    train_images: &[IonImage],
    mut progress: impl FnMut(usize, f64),
) -> Result<VitModel> {
    if train_images.is_empty() {
        return Err(Error::Training {
            epoch: 0,
            detail: "empty training set".into(),
        });
    }
    if let Some(bad) = train_images.iter().find(|i| i.label.class_index() >= cfg.n_classes) {
        return Err(Error::Shape(format!("label {} beyond {} classes", bad.label, cfg.n_classes)));
    }
    let mut model = VitModel::init(cfg.clone(), input_scale(train_images))?;
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    let labels: Vec<usize> = train_images.iter().map(|i| i.label.class_index()).collect();
    let mut best: Option<(f64, VitParams)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&IonImage> = chunk.iter().map(|&i| &train_images[i]).collect();
            let x = stack_patches(cfg, &images, model.input_scale)?;
            let labels: Vec<usize> = images.iter().map(|i| i.label.class_index()).collect();
            let cache = forward(cfg, &model.params, x, images.len(), BnMode::Train);
            let (loss, dlogits) = cross_entropy(&cache.logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            total += loss * images.len() as f64;
            let grad = backward(cfg, &model.params, &cache, &dlogits, BnMode::Train);
            let rows = images.len() * cfg.n_tokens();
            for (layer, lc) in model.params.layers.iter_mut().zip(&cache.layers) {
                update_running(&mut layer.bn, &lc.mean, &lc.inv_std, rows);
            }
            update_running(&mut model.params.head.bn, &cache.head_mean, &cache.head_inv_std, images.len());
            sgd_step(&mut model.params, &grad, cfg.learning_rate);
        }
        progress(epoch, total / train_images.len() as f64);
        if cfg.keep_best_epoch {
            let mut predicted = Vec::with_capacity(train_images.len());
            for chunk in train_images.chunks(EVAL_CHUNK) {
                let refs: Vec<&IonImage> = chunk.iter().collect();
                let logits = batch_logits(&model, &refs, BnMode::Infer)?;
                predicted.extend(logits.rows().into_iter().map(|r| argmax(&r.to_vec())));
            }
            let score = class_mean_fidelity(&predicted, &labels, cfg.n_classes);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, model.params.clone()));
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}

fn sgd_step(params: &mut VitParams, grad: &VitParams, lr: f64) {
    let grads = grad.flatten();
    let mut i = 0;
    params.visit_mut(&mut |_, data, trainable| {
        if trainable {
            data.iter_mut().zip(&grads[i]).for_each(|(w, g)| *w -= lr * g);
        }
        i += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QubitState;
    use rand::Rng;

    fn tiny_cfg(mode: HeadMode) -> VitConfig {
        VitConfig {
            height: 2,
            width: 4,
            patch_size: 2,
            latent_dim: 4,
            n_heads: 1,
            n_layers: 1,
            head_mode: mode,
            n_classes: 2,
            learning_rate: 0.05,
            batch_size: 4,
            epochs: 1,
            seed: 3,
            keep_best_epoch: false,
        }
    }

    fn random_images(cfg: &VitConfig, n: usize, seed: u64) -> Vec<IonImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_ions = cfg.n_classes.trailing_zeros() as usize;
        (0..n)
            .map(|i| IonImage {
                height: cfg.height,
                width: cfg.width,
                pixels: (0..cfg.height * cfg.width).map(|_| rng.random_range(0..200)).collect(),
                label: QubitState::from_class(n_ions, i % cfg.n_classes).unwrap(),
            })
            .collect()
    }

    fn randomize(model: &mut VitModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params.visit_mut(&mut |name, data, _| {
            for x in data.iter_mut() {
                *x = if name.ends_with("running_var") || name.ends_with("gamma") {
                    rng.random_range(0.5..1.5)
                } else {
                    rng.random_range(-0.8..0.8)
                };
            }
        });
    }

    fn check_gradients(cfg: VitConfig, mode: BnMode) {
        let mut model = VitModel::init(cfg.clone(), 200.0).unwrap();
        randomize(&mut model, 17);
        let imgs = random_images(&cfg, 4, 5);
        let refs: Vec<&IonImage> = imgs.iter().collect();
        let (_, grad) = loss_and_gradient(&model, &refs, mode).unwrap();
        let analytic = grad.flatten();
        let mut names = Vec::new();
        model.params.visit(&mut |n, _, trainable| names.push((n, trainable)));
        let h = 1e-6;
        for (ti, (name, trainable)) in names.iter().enumerate() {
            if !trainable {
                continue;
            }
            for i in 0..analytic[ti].len() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut k = 0;
                    m.params.visit_mut(&mut |_, d, _| {
                        if k == ti {
                            d[i] += delta;
                        }
                        k += 1;
                    });
                    loss_and_gradient(&m, &refs, mode).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = analytic[ti][i];
                assert!(
                    (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-4),
                    "{name}[{i}] fd {fd} vs analytic {g}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(tiny_cfg(HeadMode::Split), BnMode::Train);
        check_gradients(tiny_cfg(HeadMode::Split), BnMode::Infer);
        let two_heads = VitConfig {
            n_heads: 2,
            n_layers: 2,
            ..tiny_cfg(HeadMode::Split)
        };
        check_gradients(two_heads.clone(), BnMode::Train);
        check_gradients(
            VitConfig {
                head_mode: HeadMode::Literal,
                ..two_heads
            },
            BnMode::Train,
        );
    }

    #[test]
    fn infer_mode_batch_matches_single_image_path() {
        let cfg = VitConfig::three_qubit();
        let mut model = VitModel::init(cfg.clone(), 300.0).unwrap();
        randomize(&mut model, 2);
        let imgs = random_images(&cfg, 5, 9);
        let refs: Vec<&IonImage> = imgs.iter().collect();
        let batch = batch_logits(&model, &refs, BnMode::Infer).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let single = model.logits(img).unwrap();
            for (a, b) in batch.row(i).iter().zip(single.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn train_mode_bn_standardizes_features() {
        let cfg = tiny_cfg(HeadMode::Split);
        let mut model = VitModel::init(cfg.clone(), 200.0).unwrap();
        randomize(&mut model, 4);
        let imgs = random_images(&cfg, 6, 1);
        let refs: Vec<&IonImage> = imgs.iter().collect();
        let x = stack_patches(&cfg, &refs, 200.0).unwrap();
        let c = forward(&cfg, &model.params, x, refs.len(), BnMode::Train);
        let xhat = &c.layers[0].xhat;
        let m = xhat.nrows() as f64;
        for col in xhat.columns() {
            let mean = col.sum() / m;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
    }

    #[test]
    fn constant_label_task_is_learned() {
        let cfg = VitConfig {
            epochs: 40,
            batch_size: 8,
            ..tiny_cfg(HeadMode::Split)
        };
        let mut imgs = random_images(&cfg, 32, 8);
        for img in &mut imgs {
            img.label = QubitState::new(1, 1).unwrap();
        }
        let mut losses = Vec::new();
        let m = train_vit_with_progress(&cfg, &imgs, |_, l| losses.push(l)).unwrap();
        assert!(losses.last().unwrap() < &0.05, "{losses:?}");
        assert!(imgs.iter().all(|i| m.predict(i).unwrap().bits() == 1));
    }

    #[test]
    fn kept_epoch_scores_at_least_the_last() {
        let last = VitConfig {
            epochs: 6,
            batch_size: 4,
            learning_rate: 0.3,
            ..tiny_cfg(HeadMode::Split)
        };
        let best = VitConfig {
            keep_best_epoch: true,
            ..last.clone()
        };
        let imgs = random_images(&last, 24, 2);
        let labels: Vec<usize> = imgs.iter().map(|i| i.label.class_index()).collect();
        let score = |m: &VitModel| {
            let p: Vec<usize> = imgs.iter().map(|i| m.predict(i).unwrap().class_index()).collect();
            class_mean_fidelity(&p, &labels, 2)
        };
        assert!(score(&train_vit(&best, &imgs).unwrap()) >= score(&train_vit(&last, &imgs).unwrap()));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = VitConfig {
            epochs: 2,
            batch_size: 8,
            ..tiny_cfg(HeadMode::Split)
        };
        let imgs = random_images(&cfg, 20, 8);
        assert_eq!(train_vit(&cfg, &imgs).unwrap(), train_vit(&cfg, &imgs).unwrap());
    }

    #[test]
    fn diverging_run_reports_epoch() {
        let cfg = VitConfig {
            epochs: 5,
            learning_rate: 1e300,
            ..tiny_cfg(HeadMode::Split)
        };
        let imgs = random_images(&cfg, 16, 8);
        match train_vit(&cfg, &imgs) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 5),
            other => panic!("expected a training error, got {other:?}"),
        }
    }
}
