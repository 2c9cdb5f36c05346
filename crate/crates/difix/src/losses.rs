//! Training losses over a pluggable multi-layer feature extractor.
//!
//! The extractor is a stack of fixed strided convolutions. Weights come
//! from a seeded initializer by default (random conv features are a usable
//! perceptual-distance proxy at this scale) or from an externally supplied
//! parameter container. It is bias-free so that a zero image produces zero
//! features, and immutable after construction.
//!
//! Reduction convention, fixed project-wide: norms are mean-reduced over
//! their elements (`||x||_2 := sqrt(mean(x^2))`, `||x||_1 := mean(|x|)`),
//! making loss values resolution-independent. Gram matrices themselves are
//! unreduced sums over spatial positions.

use crate::container::{Container, ContainerError};
use crate::img::Image;
use crate::nn::{Graph, Tensor, Var};
use crate::seeds;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} too small for a {2}-stage extractor (needs >= {3} per side)")]
    InputTooSmall(usize, usize, usize, usize),
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error("extractor weights: {0}")]
    Weights(#[from] ContainerError),
}

/// One conv stage: 3x3, stride 2, no bias.
#[derive(Debug, Clone)]
struct Stage {
    weight: Tensor,
}

/// Fixed convolutional feature pyramid shared by the training losses, the
/// perceptual metric, and the Fréchet-distance features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    /// Per-layer weights for the perceptual (L1) loss.
    pub alpha: Vec<f64>,
    /// Per-layer weights for the Gram loss.
    pub beta: Vec<f64>,
    source: String,
}

pub const EXTRACTOR_KIND: &str = "feature-extractor";

impl FeatureExtractor {
    /// Seeded He-style initialization; `widths` are the per-stage output
    /// channel counts (inputs are RGB).
    pub fn from_seed(seed: u64, widths: &[usize]) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut rng = seeds::rng(seed, "feature-extractor");
        let mut c_in = 3usize;
        for &c_out in widths {
            let n = c_out * c_in * 9;
            let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
            let data: Vec<f64> = (0..n).map(|_| seeds::sample_normal(&mut rng) * std).collect();
            stages.push(Stage { weight: Tensor::from_vec(&[c_out, c_in, 3, 3], data) });
            c_in = c_out;
        }
        let l = widths.len();
        Self {
            stages,
            alpha: vec![1.0; l],
            beta: vec![1.0; l],
            source: format!("seed:{seed}"),
        }
    }

    /// Default extractor: 4 stages with doubling widths.
    pub fn default_from_seed(seed: u64) -> Self {
        Self::from_seed(seed, &[8, 16, 32, 64])
    }

    /// Loads pretrained stage weights (`stage0.w`, `stage1.w`, ...) from a
    /// parameter container.
    pub fn from_container(c: &Container) -> Result<Self, LossError> {
        c.expect_kind(EXTRACTOR_KIND)?;
        let mut stages = Vec::new();
        let mut i = 0;
        while let Ok(block) = c.block(&format!("stage{i}.w")) {
            assert_eq!(block.shape.len(), 4, "extractor stage weights must be 4-d");
            stages.push(Stage {
                weight: Tensor::from_vec(
                    &block.shape,
                    block.data.iter().map(|&v| v as f64).collect(),
                ),
            });
            i += 1;
        }
        if stages.is_empty() {
            return Err(LossError::Weights(ContainerError::MissingBlock("stage0.w".into())));
        }
        let l = stages.len();
        Ok(Self { stages, alpha: vec![1.0; l], beta: vec![1.0; l], source: "container".into() })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            EXTRACTOR_KIND,
            serde_json::json!({"stages": self.stages.len(), "source": self.source}),
        );
        for (i, s) in self.stages.iter().enumerate() {
            c.push_f64(&format!("stage{i}.w"), &s.weight.shape, &s.weight.data);
        }
        c
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn min_input_side(&self) -> usize {
        1 << self.stages.len()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<(), LossError> {
        let min = self.min_input_side();
        if h < min || w < min {
            return Err(LossError::InputTooSmall(h, w, self.stages.len(), min));
        }
        Ok(())
    }

    /// Runs the pyramid on an already-inserted graph variable of shape
    /// [B, 3, H, W], returning one feature var per stage.
    pub fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            let w = g.leaf(stage.weight.clone());
            let conv = g.conv2d(cur, w, 2, 1);
            cur = g.relu(conv);
            feats.push(cur);
        }
        feats
    }

    /// Feature maps of an image, value-only path.
    pub fn features_of_image(&self, img: &Image) -> Result<Vec<Tensor>, LossError> {
        self.check_input(img.height, img.width)?;
        let mut g = Graph::new();
        let x = g.leaf(image_to_tensor(img));
        let feats = self.features(&mut g, x);
        Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Globally average-pooled feature vector (all stages concatenated),
    /// used as the distribution embedding for Fréchet distances.
    pub fn pooled_features(&self, img: &Image) -> Result<Vec<f64>, LossError> {
        let feats = self.features_of_image(img)?;
        let mut out = Vec::new();
        for f in feats {
            let (_, c, h, w) = f.dims4();
            let hw = h * w;
            for ci in 0..c {
                let s: f64 = f.data[ci * hw..(ci + 1) * hw].iter().sum();
                out.push(s / hw as f64);
            }
        }
        Ok(out)
    }
}

/// [H, W, 3] image into a [1, 3, H, W] tensor.
pub fn image_to_tensor(img: &Image) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(y, x);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c];
            }
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Inverse of [`image_to_tensor`] for a [1, 3, H, W] (or [V, 3, H, W],
/// taking batch entry `b`) tensor.
pub fn tensor_to_image(t: &Tensor, b: usize) -> Image {
    let (bs, c, h, w) = t.dims4();
    assert!(b < bs && c == 3);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for ci in 0..3 {
                px[ci] = t.data[((b * 3 + ci) * h + y) * w + x];
            }
            img.set(y, x, px);
        }
    }
    img
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch(a.height, a.width, b.height, b.width));
    }
    Ok(())
}

/// Graph-side RMSE between two [B, 3, H, W] vars.
pub fn recon_loss_var(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let m = g.mean_all(sq);
    g.sqrt_guard(m)
}

/// Graph-side perceptual loss: (1/L) sum_l alpha_l * mean|phi_l(a) - phi_l(b)|.
pub fn perceptual_loss_var(
    g: &mut Graph,
    extractor: &FeatureExtractor,
    pred: Var,
    target: Var,
) -> Var {
    let fa = extractor.features(g, pred);
    let fb = extractor.features(g, target);
    let mut total: Option<Var> = None;
    for ((a, b), &alpha) in fa.iter().zip(&fb).zip(&extractor.alpha) {
        let d = g.sub(*a, *b);
        let ab = g.abs(d);
        let m = g.mean_all(ab);
        let term = g.scale(m, alpha);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let t = total.expect("extractor has at least one stage");
    g.scale(t, 1.0 / extractor.num_stages() as f64)
}

/// Graph-side Gram (style) loss: (1/L) sum_l beta_l * ||G_l(a) - G_l(b)||_2
/// with G_l = phi_l^T phi_l over spatially flattened features and the
/// mean-reduced Frobenius norm.
pub fn gram_loss_var(
    g: &mut Graph,
    extractor: &FeatureExtractor,
    pred: Var,
    target: Var,
) -> Var {
    let fa = extractor.features(g, pred);
    let fb = extractor.features(g, target);
    let mut total: Option<Var> = None;
    for ((a, b), &beta) in fa.iter().zip(&fb).zip(&extractor.beta) {
        let ta = g.tokens_from_bchw(*a);
        let tb = g.tokens_from_bchw(*b);
        let ga = g.matmul_tn(ta, ta);
        let gb = g.matmul_tn(tb, tb);
        let d = g.sub(ga, gb);
        let sq = g.square(d);
        let m = g.mean_all(sq);
        let norm = g.sqrt_guard(m);
        let term = g.scale(norm, beta);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let t = total.expect("extractor has at least one stage");
    g.scale(t, 1.0 / extractor.num_stages() as f64)
}

/// Loss weights (reconstruction, perceptual, Gram). Default (1, 1, 0.5).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub perceptual: f64,
    pub gram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon: 1.0, perceptual: 1.0, gram: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for w in [self.recon, self.perceptual, self.gram] {
            if w < 0.0 {
                return Err(LossError::NegativeWeight(w));
            }
        }
        Ok(())
    }
}

/// Individual loss components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub perceptual: f64,
    pub gram: f64,
    pub total: f64,
}

/// Graph-side weighted total; also returns the component vars so callers
/// can log them.
pub fn total_loss_var(
    g: &mut Graph,
    extractor: &FeatureExtractor,
    pred: Var,
    target: Var,
    weights: &LossWeights,
) -> (Var, [Var; 3]) {
    let r = recon_loss_var(g, pred, target);
    let p = perceptual_loss_var(g, extractor, pred, target);
    let gr = gram_loss_var(g, extractor, pred, target);
    let rw = g.scale(r, weights.recon);
    let pw = g.scale(p, weights.perceptual);
    let gw = g.scale(gr, weights.gram);
    let rp = g.add(rw, pw);
    let total = g.add(rp, gw);
    (total, [r, p, gr])
}

/// Value-only reconstruction loss between images.
pub fn recon_loss(pred: &Image, target: &Image) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(pred.mse(target).sqrt())
}

/// Value-only perceptual loss between images.
pub fn perceptual_loss(
    pred: &Image,
    target: &Image,
    extractor: &FeatureExtractor,
) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    extractor.check_input(pred.height, pred.width)?;
    let mut g = Graph::new();
    let a = g.leaf(image_to_tensor(pred));
    let b = g.leaf(image_to_tensor(target));
    let v = perceptual_loss_var(&mut g, extractor, a, b);
    Ok(g.value(v).item())
}

/// Value-only Gram loss between images.
pub fn gram_loss(
    pred: &Image,
    target: &Image,
    extractor: &FeatureExtractor,
) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    extractor.check_input(pred.height, pred.width)?;
    let mut g = Graph::new();
    let a = g.leaf(image_to_tensor(pred));
    let b = g.leaf(image_to_tensor(target));
    let v = gram_loss_var(&mut g, extractor, a, b);
    Ok(g.value(v).item())
}

/// Value-only weighted total with components.
pub fn total_loss(
    pred: &Image,
    target: &Image,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let recon = recon_loss(pred, target)?;
    let perceptual = perceptual_loss(pred, target, extractor)?;
    let gram = gram_loss(pred, target, extractor)?;
    Ok(LossBreakdown {
        recon,
        perceptual,
        gram,
        total: weights.recon * recon + weights.perceptual * perceptual + weights.gram * gram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(h, w);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::from_seed(99, &[4, 8])
    }

    #[test]
    fn identical_images_zero_losses() {
        let img = random_image(1, 16, 16);
        let ex = extractor();
        assert_eq!(recon_loss(&img, &img).unwrap(), 0.0);
        assert_eq!(perceptual_loss(&img, &img, &ex).unwrap(), 0.0);
        assert_eq!(gram_loss(&img, &img, &ex).unwrap(), 0.0);
        let total = total_loss(&img, &img, &ex, &LossWeights::default()).unwrap();
        assert_eq!(total.total, 0.0);
    }

    #[test]
    fn recon_loss_constant_offset() {
        // Constant images differing by 0.5 everywhere: RMSE = 0.5 under the
        // mean-of-squares-then-sqrt convention.
        let a = Image::filled(8, 8, [0.2, 0.2, 0.2]);
        let b = Image::filled(8, 8, [0.7, 0.7, 0.7]);
        assert_relative_eq!(recon_loss(&a, &b).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(recon_loss(&a, &b).unwrap(), recon_loss(&b, &a).unwrap());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Image::new(8, 8);
        let b = Image::new(8, 10);
        assert!(matches!(recon_loss(&a, &b), Err(LossError::ShapeMismatch(..))));
    }

    #[test]
    fn perceptual_loss_matches_external_recombination() {
        // Brute-force oracle: compute per-layer feature maps separately and
        // recombine the mean L1 distances outside the loss code.
        let ex = extractor();
        let a = random_image(2, 16, 16);
        let b = random_image(3, 16, 16);
        let fa = ex.features_of_image(&a).unwrap();
        let fb = ex.features_of_image(&b).unwrap();
        let mut expect = 0.0;
        for (l, (x, y)) in fa.iter().zip(&fb).enumerate() {
            let m = x
                .data
                .iter()
                .zip(&y.data)
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
                / x.numel() as f64;
            expect += ex.alpha[l] * m;
        }
        expect /= ex.num_stages() as f64;
        let got = perceptual_loss(&a, &b, &ex).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn gram_of_zero_image_is_zero() {
        // Bias-free extractor: zero image -> zero features -> zero Gram.
        let ex = extractor();
        let zero = Image::new(16, 16);
        let feats = ex.features_of_image(&zero).unwrap();
        for f in feats {
            assert!(f.data.iter().all(|&v| v == 0.0));
        }
        let other = random_image(4, 16, 16);
        assert!(gram_loss(&zero, &other, &ex).unwrap() > 0.0);
    }

    #[test]
    fn gram_matrix_hand_example() {
        // Single layer producing constant 2-channel features [1, 2] at each
        // of N positions: G = N * [[1, 2], [2, 4]], and the loss against
        // zero features is the mean-reduced Frobenius norm of G.
        let t = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let mut g = Graph::new();
        let v = g.leaf(t);
        let tok = g.tokens_from_bchw(v);
        let gram = g.matmul_tn(tok, tok);
        let n = 4.0;
        assert_eq!(g.value(gram).data, vec![n, 2.0 * n, 2.0 * n, 4.0 * n]);
        // Mean-reduced norm: sqrt(mean(G^2)) = N * sqrt((1+4+4+16)/4) = 2.5 N.
        let sq = g.square(gram);
        let m = g.mean_all(sq);
        let norm = g.sqrt_guard(m);
        assert_relative_eq!(g.value(norm).item(), 2.5 * n, epsilon = 1e-12);
    }

    #[test]
    fn gram_matrices_are_symmetric_psd() {
        let ex = extractor();
        for seed in 0..5 {
            let img = random_image(100 + seed, 16, 16);
            let feats = ex.features_of_image(&img).unwrap();
            for f in feats {
                let (_, c, h, w) = f.dims4();
                let mut g = Graph::new();
                let v = g.leaf(f.clone());
                let tok = g.tokens_from_bchw(v);
                let gram_v = g.matmul_tn(tok, tok);
                let gram = g.value(gram_v).clone();
                let m = nalgebra::DMatrix::from_row_slice(c, c, &gram.data);
                // Symmetry.
                for i in 0..c {
                    for j in 0..c {
                        assert!((m[(i, j)] - m[(j, i)]).abs() < 1e-9);
                    }
                }
                // PSD up to round-off.
                let eig = m.symmetric_eigenvalues();
                let scale = eig.iter().cloned().fold(1.0f64, f64::max);
                assert!(
                    eig.iter().all(|&e| e > -1e-7 * scale),
                    "negative eigenvalue in {h}x{w} gram"
                );
            }
        }
    }

    #[test]
    fn total_loss_recombines_components() {
        let ex = extractor();
        let a = random_image(5, 16, 16);
        let b = random_image(6, 16, 16);
        let w = LossWeights::default();
        let breakdown = total_loss(&a, &b, &ex, &w).unwrap();
        let manual = w.recon * recon_loss(&a, &b).unwrap()
            + w.perceptual * perceptual_loss(&a, &b, &ex).unwrap()
            + w.gram * gram_loss(&a, &b, &ex).unwrap();
        assert_relative_eq!(breakdown.total, manual, epsilon = 1e-9);

        let recon_only = LossWeights { recon: 1.0, perceptual: 0.0, gram: 0.0 };
        let r = total_loss(&a, &b, &ex, &recon_only).unwrap();
        assert_eq!(r.total, r.recon);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights { recon: -1.0, perceptual: 1.0, gram: 0.5 };
        assert!(w.validate().is_err());
    }

    #[test]
    fn losses_differentiable_fd_check() {
        // Finite-difference check of d(total)/d(pred pixel) at 10 pixels.
        let ex = extractor();
        let a = random_image(7, 16, 16);
        let b = random_image(8, 16, 16);
        let weights = LossWeights::default();
        let ta = image_to_tensor(&a);
        let tb = image_to_tensor(&b);

        let mut g = Graph::new();
        let va = g.leaf(ta.clone());
        let vb = g.leaf(tb.clone());
        let (total, _) = total_loss_var(&mut g, &ex, va, vb, &weights);
        let grad = g.backward(total, &[va]).pop().unwrap();

        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let va = g.leaf(t.clone());
            let vb = g.leaf(tb.clone());
            let (total, _) = total_loss_var(&mut g, &ex, va, vb, &weights);
            g.value(total).item()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let h = 1e-5;
        for _ in 0..10 {
            let i = rng.gen_range(0..ta.numel());
            let mut plus = ta.clone();
            plus.data[i] += h;
            let mut minus = ta.clone();
            minus.data[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grad.data[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < 1e-3,
                "loss grad mismatch at {i}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn extractor_container_round_trip() {
        let ex = extractor();
        let c = ex.to_container();
        let back = FeatureExtractor::from_container(&c).unwrap();
        let img = random_image(9, 16, 16);
        let f1 = ex.features_of_image(&img).unwrap();
        let f2 = back.features_of_image(&img).unwrap();
        // f32 storage quantizes; features agree to f32 precision.
        for (a, b) in f1.iter().zip(&f2) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn too_small_input_is_error() {
        let ex = FeatureExtractor::from_seed(1, &[4, 8, 16, 32]);
        let img = Image::new(8, 8);
        assert!(matches!(
            ex.features_of_image(&img),
            Err(LossError::InputTooSmall(..))
        ));
    }

    #[test]
    fn same_seed_same_features() {
        let a = FeatureExtractor::from_seed(42, &[4, 8]);
        let b = FeatureExtractor::from_seed(42, &[4, 8]);
        let img = random_image(10, 16, 16);
        let fa = a.features_of_image(&img).unwrap();
        let fb = b.features_of_image(&img).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.data, y.data);
        }
    }
}
