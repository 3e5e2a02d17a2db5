//! Small Vision Transformer with batch norm and ReLU in place of layer norm
//! and GELU.
//!
//! The image is cut into `P x P` patches, each flattened patch is projected
//! by `E`, a class token is prepended and position embeddings added. Each
//! encoder layer computes
//!
//! ```text
//! s2 = MSA(z) + z
//! z' = ReLU(Linear(BN(s2))) + s2
//! ```
//!
//! and the logits are `Linear(BN(z_L[0]))` on the class-token row.
//!
//! Float evaluation lives here; training is in [`train`] and the
//! fixed-point evaluator in [`fixed`].

pub mod fixed;
mod io;
pub mod train;

use std::cell::Cell;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{IonImage, QubitState};
use crate::error::{Error, Result};
use crate::parallel::derive_seed;

pub use fixed::{quantize_vit, FixedBatchNorm, FixedVitModel};
pub use io::{AnyVitModel, VIT_MAGIC, VIT_VERSION};
pub use train::{train_vit, train_vit_with_progress};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const INIT_STREAM: u64 = 20;

/// How attention heads are shaped and combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// `D / H` features per head, outputs concatenated.
    #[default]
    Split,
    /// `D` features per head, outputs summed.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub latent_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub head_mode: HeadMode,
    pub n_classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Return the epoch whose model scores the best mean fidelity on the
    /// training images rather than the last one.
    #[serde(default = "yes")]
    pub keep_best_epoch: bool,
}

fn yes() -> bool {
    true
}

impl VitConfig {
    /// One layer, 8 heads, 16 latent features, SGD at 0.05 with batches of 128.
    pub fn standard(height: usize, width: usize, patch_size: usize, n_classes: usize) -> Self {
        VitConfig {
            height,
            width,
            patch_size,
            latent_dim: 16,
            n_heads: 8,
            n_layers: 1,
            head_mode: HeadMode::Split,
            n_classes,
            learning_rate: 0.05,
            batch_size: 128,
            epochs: 30,
            seed: 0x5EED_0002,
            keep_best_epoch: true,
        }
    }

    pub fn one_qubit() -> Self {
        Self::standard(10, 10, 5, 2)
    }

    pub fn three_qubit() -> Self {
        Self::standard(12, 24, 6, 8)
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        match self.head_mode {
            HeadMode::Split => self.latent_dim / self.n_heads.max(1),
            HeadMode::Literal => self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let p = self.patch_size;
        if p == 0 || self.height == 0 || self.width == 0 {
            return fail("image and patch sizes must be positive".into());
        }
        if !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return fail(format!(
                "{}x{} image does not tile into {p}x{p} patches",
                self.height, self.width
            ));
        }
        if self.latent_dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("latent_dim, n_heads and n_layers must be positive".into());
        }
        if self.head_mode == HeadMode::Split && !self.latent_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "latent_dim {} not divisible by {} heads",
                self.latent_dim, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least two classes, got {}", self.n_classes));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return fail("learning_rate must be > 0 and batch_size >= 1".into());
        }
        Ok(())
    }
}

thread_local! {
    static FIXED_ONLY: Cell<bool> = const { Cell::new(false) };
}

/// While alive, float evaluation helpers on this thread panic. The fixed
/// evaluator holds one between input quantization and the logits.
pub struct FixedOnlyGuard {
    previous: bool,
}

impl FixedOnlyGuard {
    pub fn enter() -> Self {
        FixedOnlyGuard {
            previous: FIXED_ONLY.with(|f| f.replace(true)),
        }
    }
}

impl Drop for FixedOnlyGuard {
    fn drop(&mut self) {
        FIXED_ONLY.with(|f| f.set(self.previous));
    }
}

fn float_allowed() {
    if FIXED_ONLY.with(Cell::get) {
        panic!("floating-point evaluation inside fixed-point inference");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn identity(n: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }

    /// `gamma / sqrt(running_var + eps)`.
    pub fn scale(&self) -> Array1<f64> {
        &self.gamma / &self.running_var.mapv(|v| (v + BN_EPS).sqrt())
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        float_allowed();
        let inv = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (x - &self.running_mean) * &inv * &self.gamma + &self.beta
    }
}

/// Rows normalized with their own mean and biased variance, before the
/// affine step; also returns the mean and `1 / sqrt(var + eps)`.
pub fn batch_norm_stats(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let m = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / m;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / m;
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    (centered * &inv_std, mean, inv_std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub heads: Vec<AttentionHead>,
    pub wo: Array2<f64>,
    pub bn: BatchNorm,
    pub lin_w: Array2<f64>,
    pub lin_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub bn: BatchNorm,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    pub embedding: Array2<f64>,
    pub pos: Array2<f64>,
    pub cls: Array1<f64>,
    pub layers: Vec<EncoderLayer>,
    pub head: ClassifierHead,
}

/// Running statistics are the only non-trainable tensors.
pub type TensorVisitor<'a, 'b> = &'b mut dyn FnMut(String, &'a [f64], bool);
pub type TensorVisitorMut<'a, 'b> = &'b mut dyn FnMut(String, &'a mut [f64], bool);

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn concat_width(cfg: &VitConfig) -> usize {
    match cfg.head_mode {
        HeadMode::Split => cfg.n_heads * cfg.head_dim(),
        HeadMode::Literal => cfg.latent_dim,
    }
}

impl VitParams {
    pub fn zeros(cfg: &VitConfig) -> Self {
        let d = cfg.latent_dim;
        let hd = cfg.head_dim();
        let layer = || EncoderLayer {
            heads: (0..cfg.n_heads)
                .map(|_| AttentionHead {
                    wq: Array2::zeros((d, hd)),
                    wk: Array2::zeros((d, hd)),
                    wv: Array2::zeros((d, hd)),
                })
                .collect(),
            wo: Array2::zeros((concat_width(cfg), d)),
            bn: BatchNorm::identity(d),
            lin_w: Array2::zeros((d, d)),
            lin_b: Array1::zeros(d),
        };
        VitParams {
            embedding: Array2::zeros((cfg.patch_len(), d)),
            pos: Array2::zeros((cfg.n_tokens(), d)),
            cls: Array1::zeros(d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            head: ClassifierHead {
                bn: BatchNorm::identity(d),
                w: Array2::zeros((d, cfg.n_classes)),
                b: Array1::zeros(cfg.n_classes),
            },
        }
    }

    /// Visits every tensor in declaration order with its name and whether
    /// it is trained by gradient descent.
    pub fn visit<'a>(&'a self, f: TensorVisitor<'a, '_>) {
        f("embedding".into(), slice(&self.embedding), true);
        f("pos".into(), slice(&self.pos), true);
        f("cls".into(), slice(&self.cls), true);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                f(format!("layer{l}.head{h}.wq"), slice(&head.wq), true);
                f(format!("layer{l}.head{h}.wk"), slice(&head.wk), true);
                f(format!("layer{l}.head{h}.wv"), slice(&head.wv), true);
            }
            f(format!("layer{l}.wo"), slice(&layer.wo), true);
            visit_bn(&format!("layer{l}.bn"), &layer.bn, f);
            f(format!("layer{l}.lin_w"), slice(&layer.lin_w), true);
            f(format!("layer{l}.lin_b"), slice(&layer.lin_b), true);
        }
        visit_bn("head.bn", &self.head.bn, f);
        f("head.w".into(), slice(&self.head.w), true);
        f("head.b".into(), slice(&self.head.b), true);
    }

    pub fn visit_mut<'a>(&'a mut self, f: TensorVisitorMut<'a, '_>) {
        f("embedding".into(), slice_mut(&mut self.embedding), true);
        f("pos".into(), slice_mut(&mut self.pos), true);
        f("cls".into(), slice_mut(&mut self.cls), true);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                f(format!("layer{l}.head{h}.wq"), slice_mut(&mut head.wq), true);
                f(format!("layer{l}.head{h}.wk"), slice_mut(&mut head.wk), true);
                f(format!("layer{l}.head{h}.wv"), slice_mut(&mut head.wv), true);
            }
            f(format!("layer{l}.wo"), slice_mut(&mut layer.wo), true);
            visit_bn_mut(&format!("layer{l}.bn"), &mut layer.bn, f);
            f(format!("layer{l}.lin_w"), slice_mut(&mut layer.lin_w), true);
            f(format!("layer{l}.lin_b"), slice_mut(&mut layer.lin_b), true);
        }
        visit_bn_mut("head.bn", &mut self.head.bn, f);
        f("head.w".into(), slice_mut(&mut self.head.w), true);
        f("head.b".into(), slice_mut(&mut self.head.b), true);
    }

    /// Flat copies of all tensors, in visiting order.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit(&mut |_, d, _| out.push(d.to_vec()));
        out
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weight matrices, position
    /// embeddings and class token; zero biases and offsets; unit BN scales.
    pub fn init(cfg: &VitConfig) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, 0));
        let mut fill = |a: &mut [f64], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            a.iter_mut().for_each(|x| *x = rng.random_range(-b..b));
        };
        let d = cfg.latent_dim;
        fill(slice_mut(&mut p.embedding), cfg.patch_len());
        fill(slice_mut(&mut p.pos), d);
        fill(slice_mut(&mut p.cls), d);
        for layer in &mut p.layers {
            for h in &mut layer.heads {
                fill(slice_mut(&mut h.wq), d);
                fill(slice_mut(&mut h.wk), d);
                fill(slice_mut(&mut h.wv), d);
            }
            let fan = layer.wo.nrows();
            fill(slice_mut(&mut layer.wo), fan);
            fill(slice_mut(&mut layer.lin_w), d);
        }
        fill(slice_mut(&mut p.head.w), d);
        p
    }
}

fn visit_bn<'a>(prefix: &str, bn: &'a BatchNorm, f: TensorVisitor<'a, '_>) {
    f(format!("{prefix}.gamma"), slice(&bn.gamma), true);
    f(format!("{prefix}.beta"), slice(&bn.beta), true);
    f(format!("{prefix}.running_mean"), slice(&bn.running_mean), false);
    f(format!("{prefix}.running_var"), slice(&bn.running_var), false);
}

fn visit_bn_mut<'a>(prefix: &str, bn: &'a mut BatchNorm, f: TensorVisitorMut<'a, '_>) {
    f(format!("{prefix}.gamma"), slice_mut(&mut bn.gamma), true);
    f(format!("{prefix}.beta"), slice_mut(&mut bn.beta), true);
    f(format!("{prefix}.running_mean"), slice_mut(&mut bn.running_mean), false);
    f(format!("{prefix}.running_var"), slice_mut(&mut bn.running_var), false);
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: VitConfig,
    pub params: VitParams,
    /// Pixels are divided by this before patching.
    pub input_scale: f64,
}

/// Patch matrix of an image: patches in row-major order, pixels row-major
/// inside a patch, each divided by `input_scale`.
pub fn patchify(image: &IonImage, patch_size: usize, input_scale: f64) -> Result<Array2<f64>> {
    float_allowed();
    let (h, w, p) = (image.height, image.width, patch_size);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}x{w} image does not tile into {p}x{p} patches")));
    }
    if image.pixels.len() != h * w {
        return Err(Error::Shape(format!("{h}x{w} image carries {} pixels", image.pixels.len())));
    }
    let cols = w / p;
    let mut out = Array2::zeros(((h / p) * cols, p * p));
    for (n, mut row) in out.outer_iter_mut().enumerate() {
        let (r0, c0) = ((n / cols) * p, (n % cols) * p);
        for i in 0..p {
            for j in 0..p {
                row[i * p + j] = image.pixels[(r0 + i) * w + c0 + j] as f64 / input_scale;
            }
        }
    }
    Ok(out)
}

/// `[x_class; X E] + E_pos`.
pub fn embed(patches: &Array2<f64>, params: &VitParams) -> Result<Array2<f64>> {
    float_allowed();
    let (n, plen) = patches.dim();
    if plen != params.embedding.nrows() || n + 1 != params.pos.nrows() {
        return Err(Error::Shape(format!(
            "{n} patches of {plen} values do not fit a {}-token, {}-pixel embedding",
            params.pos.nrows(),
            params.embedding.nrows()
        )));
    }
    let mut z = Array2::zeros((n + 1, params.cls.len()));
    z.row_mut(0).assign(&params.cls);
    z.slice_mut(s![1.., ..]).assign(&patches.dot(&params.embedding));
    Ok(z + &params.pos)
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(x: &mut Array2<f64>) {
    float_allowed();
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `softmax(Q K^T / sqrt(d)) V` for one head.
pub fn self_attention(z: &Array2<f64>, head: &AttentionHead) -> Array2<f64> {
    float_allowed();
    let q = z.dot(&head.wq);
    let k = z.dot(&head.wk);
    let v = z.dot(&head.wv);
    let mut scores = q.dot(&k.t()) / (head.wq.ncols() as f64).sqrt();
    softmax_rows(&mut scores);
    scores.dot(&v)
}

/// Head outputs combined per `mode`, then projected by `W_O`.
pub fn msa(z: &Array2<f64>, layer: &EncoderLayer, mode: HeadMode) -> Array2<f64> {
    float_allowed();
    let outs: Vec<Array2<f64>> = layer.heads.iter().map(|h| self_attention(z, h)).collect();
    let combined = match mode {
        HeadMode::Split => {
            let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("heads share a row count")
        }
        HeadMode::Literal => outs.iter().fold(Array2::zeros(outs[0].dim()), |acc, o| acc + o),
    };
    combined.dot(&layer.wo)
}

/// One encoder layer with batch norm in infer mode.
pub fn transformer_block(z: &Array2<f64>, layer: &EncoderLayer, mode: HeadMode) -> Array2<f64> {
    float_allowed();
    let s2 = msa(z, layer, mode) + z;
    let v = layer.bn.infer(&s2).dot(&layer.lin_w) + &layer.lin_b;
    v.mapv(|x| x.max(0.0)) + &s2
}

/// `Linear(BN(z_L[0]))`, batch norm in infer mode.
pub fn classify_head(class_row: &Array1<f64>, head: &ClassifierHead) -> Array1<f64> {
    float_allowed();
    let x = class_row.view().insert_axis(Axis(0)).to_owned();
    let y = head.bn.infer(&x).dot(&head.w) + &head.b;
    y.row(0).to_owned()
}

impl VitModel {
    pub fn init(config: VitConfig, input_scale: f64) -> Result<Self> {
        config.validate()?;
        let params = VitParams::init(&config);
        Ok(VitModel {
            config,
            params,
            input_scale,
        })
    }

    fn check_image(&self, image: &IonImage) -> Result<()> {
        if image.height != self.config.height || image.width != self.config.width {
            return Err(Error::Shape(format!(
                "{}x{} image for a {}x{} model",
                image.height, image.width, self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    /// Infer-mode logits.
    pub fn logits(&self, image: &IonImage) -> Result<Array1<f64>> {
        self.check_image(image)?;
        let x = patchify(image, self.config.patch_size, self.input_scale)?;
        self.logits_from_patches(&x)
    }

    pub fn logits_from_patches(&self, patches: &Array2<f64>) -> Result<Array1<f64>> {
        let mut z = embed(patches, &self.params)?;
        for layer in &self.params.layers {
            z = transformer_block(&z, layer, self.config.head_mode);
        }
        Ok(classify_head(&z.row(0).to_owned(), &self.params.head))
    }

    pub fn predict(&self, image: &IonImage) -> Result<QubitState> {
        let y = self.logits(image)?;
        QubitState::from_class(image.label.n_ions(), crate::polymlp::argmax(y.as_slice().expect("contiguous")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> u16) -> IonImage {
        IonImage {
            height: h,
            width: w,
            pixels: (0..h * w).map(|i| f(i / w, i % w)).collect(),
            label: QubitState::new(1, 0).unwrap(),
        }
    }

    #[test]
    fn patch_counts_and_order() {
        let x = patchify(&img(10, 10, |_, _| 1), 5, 1.0).unwrap();
        assert_eq!(x.dim(), (4, 25));
        let x = patchify(&img(12, 24, |r, c| (r * 24 + c) as u16), 6, 1.0).unwrap();
        assert_eq!(x.dim(), (8, 36));
        // second patch starts at column 6 of row 0, then row 1
        assert_eq!(x[[1, 0]], 6.0);
        assert_eq!(x[[1, 6]], 30.0);
        // first patch of the second patch row
        assert_eq!(x[[4, 0]], (6 * 24) as f64);
        let c = patchify(&img(12, 24, |_, _| 7), 6, 2.0).unwrap();
        assert!(c.rows().into_iter().all(|r| r == c.row(0)));
        assert_eq!(c[[0, 0]], 3.5);
        assert!(matches!(patchify(&img(10, 10, |_, _| 0), 3, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_examples() {
        let cfg = VitConfig::one_qubit();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = VitParams::zeros(&cfg);
        p.cls = Array1::from_shape_fn(16, |i| i as f64);
        let x = rand_mat(&mut rng, 4, 25);
        let z = embed(&x, &p).unwrap();
        assert_eq!(z.row(0), p.cls);
        assert!(z.slice(s![1.., ..]).iter().all(|&v| v == 0.0));

        p.cls.fill(0.0);
        p.embedding = rand_mat(&mut rng, 25, 16);
        let mut single = Array2::zeros((4, 25));
        single.row_mut(2).assign(&x.row(2));
        let z = embed(&single, &p).unwrap();
        let nonzero: Vec<usize> = (0..5).filter(|&r| z.row(r).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(nonzero, vec![3]);
        let want = x.row(2).dot(&p.embedding);
        assert!(z.row(3).iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        // dense oracle
        p.cls = Array1::from_shape_fn(16, |_| rng.random_range(-1.0..1.0));
        p.pos = rand_mat(&mut rng, 5, 16);
        let z = embed(&x, &p).unwrap();
        for t in 0..5 {
            for j in 0..16 {
                let mut want = p.pos[[t, j]];
                if t == 0 {
                    want += p.cls[j];
                } else {
                    for k in 0..25 {
                        want += x[[t - 1, k]] * p.embedding[[k, j]];
                    }
                }
                assert!((z[[t, j]] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
        assert!(matches!(embed(&rand_mat(&mut rng, 3, 25), &p), Err(Error::Shape(_))));
    }

    fn brute_attention(z: &Array2<f64>, h: &AttentionHead) -> Array2<f64> {
        let (t, d) = (z.nrows(), h.wq.ncols());
        let proj = |w: &Array2<f64>| {
            Array2::from_shape_fn((t, d), |(i, j)| (0..z.ncols()).map(|k| z[[i, k]] * w[[k, j]]).sum::<f64>())
        };
        let (q, k, v) = (proj(&h.wq), proj(&h.wk), proj(&h.wv));
        Array2::from_shape_fn((t, d), |(i, j)| {
            let score = |m: usize| (0..d).map(|c| q[[i, c]] * k[[m, c]]).sum::<f64>() / (d as f64).sqrt();
            let denom: f64 = (0..t).map(|m| score(m).exp()).sum();
            (0..t).map(|m| score(m).exp() / denom * v[[m, j]]).sum()
        })
    }

    fn rand_head(rng: &mut ChaCha8Rng, d: usize, hd: usize) -> AttentionHead {
        AttentionHead {
            wq: rand_mat(rng, d, hd),
            wk: rand_mat(rng, d, hd),
            wv: rand_mat(rng, d, hd),
        }
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_mat(&mut rng, 4, 6);
        let mut h = rand_head(&mut rng, 6, 3);
        h.wq.fill(0.0);
        let out = self_attention(&z, &h);
        let mean = z.dot(&h.wv).mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let h = rand_head(&mut rng, 6, 3);
        let one = rand_mat(&mut rng, 1, 6);
        assert_eq!(self_attention(&one, &h), one.dot(&h.wv));
        let z3 = rand_mat(&mut rng, 3, 6);
        let got = self_attention(&z3, &h);
        let want = brute_attention(&z3, &h);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    fn rand_layer(rng: &mut ChaCha8Rng, cfg: &VitConfig) -> EncoderLayer {
        let d = cfg.latent_dim;
        EncoderLayer {
            heads: (0..cfg.n_heads).map(|_| rand_head(rng, d, cfg.head_dim())).collect(),
            wo: rand_mat(rng, concat_width(cfg), d),
            bn: BatchNorm {
                gamma: Array1::from_shape_fn(d, |_| rng.random_range(0.5..1.5)),
                beta: Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5)),
                running_mean: Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5)),
                running_var: Array1::from_shape_fn(d, |_| rng.random_range(0.5..1.5)),
            },
            lin_w: rand_mat(rng, d, d),
            lin_b: Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5)),
        }
    }

    #[test]
    fn msa_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = VitConfig {
            n_heads: 1,
            ..VitConfig::three_qubit()
        };
        let mut layer = rand_layer(&mut rng, &one);
        layer.wo = Array2::eye(16);
        let z = rand_mat(&mut rng, 9, 16);
        assert_eq!(msa(&z, &layer, HeadMode::Split), self_attention(&z, &layer.heads[0]));

        let cfg = VitConfig::three_qubit();
        let mut layer = rand_layer(&mut rng, &cfg);
        let got = msa(&z, &layer, HeadMode::Split);
        let mut concat = Array2::zeros((9, 16));
        for (h, head) in layer.heads.iter().enumerate() {
            concat.slice_mut(s![.., h * 2..h * 2 + 2]).assign(&brute_attention(&z, head));
        }
        let want = concat.dot(&layer.wo);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        layer.heads.iter_mut().for_each(|h| h.wv.fill(0.0));
        assert!(msa(&z, &layer, HeadMode::Split).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = VitConfig::three_qubit();
        let mut layer = rand_layer(&mut rng, &cfg);
        layer.heads.iter_mut().for_each(|h| h.wv.fill(0.0));
        layer.lin_w.fill(0.0);
        layer.lin_b.fill(0.0);
        let z = rand_mat(&mut rng, 9, 16);
        assert_eq!(transformer_block(&z, &layer, HeadMode::Split), z);

        // one token, one feature, one head: attention returns V
        let tiny = VitConfig {
            latent_dim: 1,
            n_heads: 1,
            ..VitConfig::one_qubit()
        };
        let mut l = rand_layer(&mut rng, &tiny);
        l.heads[0].wv[[0, 0]] = 2.0;
        l.wo[[0, 0]] = 0.5;
        l.bn = BatchNorm {
            gamma: Array1::from_elem(1, 3.0),
            beta: Array1::from_elem(1, 1.0),
            running_mean: Array1::from_elem(1, 1.0),
            running_var: Array1::from_elem(1, 4.0 - BN_EPS),
        };
        l.lin_w[[0, 0]] = -1.0;
        l.lin_b[0] = 0.25;
        let z = Array2::from_elem((1, 1), 1.5);
        // msa = 1.5 * 2 * 0.5 = 1.5; s2 = 3; bn = (3 - 1)/2 * 3 + 1 = 4
        // pre = -4 + 0.25 -> relu 0; out = 3
        assert_eq!(transformer_block(&z, &l, HeadMode::Split)[[0, 0]], 3.0);
        l.lin_w[[0, 0]] = 1.0;
        assert_eq!(transformer_block(&z, &l, HeadMode::Split)[[0, 0]], 3.0 + 4.25);
    }

    #[test]
    fn head_examples() {
        let mut head = ClassifierHead {
            bn: BatchNorm {
                running_var: Array1::from_elem(4, 1.0 - BN_EPS),
                ..BatchNorm::identity(4)
            },
            w: Array2::eye(4).slice(s![.., ..2]).to_owned(),
            b: Array1::zeros(2),
        };
        let z = Array1::from(vec![0.5, -2.0, 3.0, 1.0]);
        assert_eq!(classify_head(&z, &head).to_vec(), vec![0.5, -2.0]);
        head.w = Array2::zeros((4, 8));
        head.w[[2, 5]] = 1.0;
        head.b = Array1::zeros(8);
        let y = classify_head(&z, &head);
        let idx = crate::polymlp::argmax(y.as_slice().unwrap());
        assert_eq!(QubitState::from_class(3, idx).unwrap().to_string(), "101");
    }

    #[test]
    fn patch_permutation_with_position_rows_leaves_logits_unchanged() {
        let cfg = VitConfig::three_qubit();
        let mut m = VitModel::init(cfg.clone(), 300.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        m.params.layers[0] = rand_layer(&mut rng, &cfg);
        let x = rand_mat(&mut rng, 8, 36);
        let base = m.logits_from_patches(&x).unwrap();
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let mut px = x.clone();
        let mut pm = m.clone();
        for (i, &p) in perm.iter().enumerate() {
            px.row_mut(i).assign(&x.row(p));
            pm.params.pos.row_mut(i + 1).assign(&m.params.pos.row(p + 1));
        }
        let permuted = pm.logits_from_patches(&px).unwrap();
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert_eq!(base, m.logits_from_patches(&x).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::one_qubit().validate().is_ok());
        assert_eq!(VitConfig::one_qubit().n_patches(), 4);
        assert_eq!(VitConfig::three_qubit().head_dim(), 2);
        let bad = VitConfig {
            n_heads: 3,
            ..VitConfig::one_qubit()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let mut m = Array2::from_shape_vec((1, v.len()), v).unwrap();
            softmax_rows(&mut m);
            prop_assert!((m.sum() - 1.0).abs() < 1e-12);
            prop_assert!(m.iter().all(|&p| p >= 0.0));
        }
    }
}
