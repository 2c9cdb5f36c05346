//! Differentiable 3D scene representations: a trilinear voxel radiance
//! field and a Gaussian particle cloud, sharing one front-to-back
//! compositor and one fitting loop.
//!
//! Parameterization keeps invariants under unconstrained gradient steps:
//! densities are softplus of a raw grid, colors and opacities are sigmoids,
//! scales are softplus plus a floor. Renders march rays at a fixed stride
//! (scene diagonal / 256 by default) or depth-sort per-ray Gaussian
//! contributions; both paths hand back analytic gradients.

pub mod field;
pub mod gaussians;
pub mod optimize;

pub use field::RadianceFieldGrid;
pub use gaussians::{gaussian_alpha, GaussianCloud, GaussianParticle};
pub use optimize::{optimize_scene, OptimizeConfig, TrainView};

use crate::container::{Container, ContainerError};
use crate::geometry::Camera;
use crate::img::Image;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("negative input: {0}")]
    NegativeInput(String),
    #[error("non-finite loss at iteration {iter}: {diagnostic}")]
    NonFiniteLoss { iter: usize, diagnostic: String },
    #[error("no training views")]
    NoViews,
    #[error("view {index} image is {got_h}x{got_w} but camera is {want_h}x{want_w}")]
    ViewResolutionMismatch { index: usize, got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] ContainerError),
    #[error("unknown scene checkpoint kind {0}")]
    UnknownKind(String),
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        assert!(min.x < max.x && min.y < max.y && min.z < max.z, "degenerate box");
        Self { min, max }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    /// Ray parameter interval clipped to the box, if any.
    pub fn ray_interval(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let (o, d) = (origin[i], dir[i]);
            if d.abs() < 1e-15 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[i] - o) * inv, (self.max[i] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Rendering knobs shared by both representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Background color composited behind unsaturated rays.
    pub background: [f64; 3],
    /// Ray-march stride is (scene diagonal) / stride_divisor.
    pub stride_divisor: usize,
    /// Optional per-render jitter seed for stratified sample offsets.
    /// Off by default: deterministic fixed-stride marching.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { background: [0.5, 0.5, 0.5], stride_divisor: 256, jitter_seed: None }
    }
}

/// Per-pixel render products.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Expected depth: sum of per-sample weights times depth (world units),
    /// zero where nothing was hit.
    pub depth: Vec<f64>,
    /// Total composited opacity in [0, 1].
    pub accumulation: Vec<f64>,
}

/// Opacity of one quadrature step: 1 - exp(-sigma * delta).
pub fn field_alpha(sigma: f64, delta: f64) -> Result<f64, SceneError> {
    if sigma < 0.0 {
        return Err(SceneError::NegativeInput(format!("sigma = {sigma}")));
    }
    if delta <= 0.0 {
        return Err(SceneError::NegativeInput(format!("delta = {delta}")));
    }
    Ok(1.0 - (-sigma * delta).exp())
}

/// Front-to-back compositing of ordered (alpha, color) samples. Returns
/// the composited color (before any background) and the accumulation.
pub fn composite(alphas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], f64) {
    assert_eq!(alphas.len(), colors.len(), "alpha/color length mismatch");
    let mut rgb = [0.0; 3];
    let mut transmittance = 1.0;
    let mut accumulation = 0.0;
    for (&a, c) in alphas.iter().zip(colors) {
        let w = a * transmittance;
        rgb[0] += w * c[0];
        rgb[1] += w * c[1];
        rgb[2] += w * c[2];
        accumulation += w;
        transmittance *= 1.0 - a;
    }
    (rgb, accumulation)
}

/// A renderable, fittable scene.
#[derive(Debug, Clone)]
pub enum SceneRepresentation {
    Field(RadianceFieldGrid),
    Gaussians(GaussianCloud),
}

impl SceneRepresentation {
    pub fn render(&self, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
        match self {
            SceneRepresentation::Field(f) => f.render(camera, cfg),
            SceneRepresentation::Gaussians(g) => g.render(camera, cfg),
        }
    }

    pub fn bounds(&self) -> Aabb {
        match self {
            SceneRepresentation::Field(f) => f.bounds,
            SceneRepresentation::Gaussians(g) => g.bounds,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SceneRepresentation::Field(_) => "field",
            SceneRepresentation::Gaussians(_) => "gaussians",
        }
    }

    pub fn to_container(&self) -> Container {
        match self {
            SceneRepresentation::Field(f) => f.to_container(),
            SceneRepresentation::Gaussians(g) => g.to_container(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, SceneError> {
        match c.kind.as_str() {
            field::FIELD_KIND => Ok(SceneRepresentation::Field(RadianceFieldGrid::from_container(c)?)),
            gaussians::GAUSSIANS_KIND => {
                Ok(SceneRepresentation::Gaussians(GaussianCloud::from_container(c)?))
            }
            other => Err(SceneError::UnknownKind(other.to_string())),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SceneError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SceneError> {
        Self::from_container(&Container::load(path)?)
    }

    /// Round trip through the f32 checkpoint encoding without touching
    /// disk. Run-state passes through this at round boundaries so that a
    /// resumed run sees bit-identical parameters to an uninterrupted one.
    pub fn quantize_to_checkpoint_precision(&mut self) {
        let c = self.to_container();
        *self = Self::from_container(&c).expect("self round trip");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force transmittance recursion: T_0 = 1, T_i = T_{i-1}(1-a_i).
    fn composite_oracle(alphas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], f64) {
        let n = alphas.len();
        let mut t = vec![1.0; n + 1];
        for i in 0..n {
            t[i + 1] = t[i] * (1.0 - alphas[i]);
        }
        let mut rgb = [0.0; 3];
        let mut acc = 0.0;
        for i in 0..n {
            let w = alphas[i] * t[i];
            for ch in 0..3 {
                rgb[ch] += w * colors[i][ch];
            }
            acc += w;
        }
        (rgb, acc)
    }

    #[test]
    fn field_alpha_closed_forms() {
        assert_eq!(field_alpha(0.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            field_alpha(1.0, 1.0).unwrap(),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-15
        );
        // Monotone approach to 1.
        let mut last = 0.0;
        for k in 1..12 {
            let a = field_alpha(k as f64 * 3.0, 1.0).unwrap();
            assert!(a > last && a < 1.0 + 1e-15);
            last = a;
        }
        assert!(field_alpha(-1.0, 1.0).is_err());
        assert!(field_alpha(1.0, 0.0).is_err());
    }

    #[test]
    fn composite_single_opaque_sample() {
        let (rgb, acc) = composite(&[1.0], &[[0.3, 0.6, 0.9]]);
        assert_eq!(rgb, [0.3, 0.6, 0.9]);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn composite_hand_example() {
        // alpha = [0.5, 0.5], scalar colors [1, 0]:
        // C = 0.5*1 + 0.5*0.5*0 = 0.5, acc = 0.75.
        let (rgb, acc) = composite(&[0.5, 0.5], &[[1.0; 3], [0.0; 3]]);
        assert_eq!(rgb[0], 0.5);
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn composite_empty_and_transparent() {
        let (rgb, acc) = composite(&[], &[]);
        assert_eq!(rgb, [0.0; 3]);
        assert_eq!(acc, 0.0);
        let (rgb, acc) = composite(&[0.0, 0.0], &[[1.0; 3], [1.0; 3]]);
        assert_eq!(rgb, [0.0; 3]);
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn composite_matches_recursion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..2000 {
            let n = rng.gen_range(0..32);
            let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let colors: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect();
            let (rgb, acc) = composite(&alphas, &colors);
            let (rgb_o, acc_o) = composite_oracle(&alphas, &colors);
            for ch in 0..3 {
                assert!((rgb[ch] - rgb_o[ch]).abs() < 1e-12);
            }
            assert!((acc - acc_o).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&acc));
        }
    }

    #[test]
    fn aabb_ray_interval() {
        let b = Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0));
        let (t0, t1) = b
            .ray_interval(&Vector3::new(0.0, 0.0, -5.0), &Vector3::new(0.0, 0.0, 1.0))
            .unwrap();
        assert_relative_eq!(t0, 4.0);
        assert_relative_eq!(t1, 6.0);
        assert!(b
            .ray_interval(&Vector3::new(0.0, 5.0, -5.0), &Vector3::new(0.0, 0.0, 1.0))
            .is_none());
    }
}
