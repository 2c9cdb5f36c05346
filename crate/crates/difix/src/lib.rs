//! Desk-scale novel-view-synthesis playground built around a single-step
//! learned artifact fixer.
//!
//! The crate is organized around a data flow:
//!
//! 1. [`procgen`] generates procedural scenes with exact ground truth and
//!    manufactures paired (degraded, clean, reference) training data from
//!    four corruption strategies.
//! 2. [`scene`] holds two differentiable 3D representations (a trilinear
//!    voxel radiance field and a Gaussian particle cloud) with a shared
//!    front-to-back compositor and a gradient-based fitting loop.
//! 3. [`fixer`] is a small U-Net with a reference-mixing attention layer
//!    that maps a degraded render plus clean reference views to a fixed
//!    image in one forward pass.
//! 4. [`pipeline`] distills fixed views back into the scene through
//!    progressive pose perturbation, and optionally re-applies the fixer
//!    as a post-render enhancement step.
//! 5. [`metrics`] scores everything: PSNR, SSIM, a perceptual distance
//!    over the shared feature extractor, a Fréchet feature distance, and
//!    thresholded symmetric epipolar distance with visibility masking.
//!
//! [`geometry`] (cameras, poses, rays, epipolar algebra) and [`losses`]
//! (reconstruction / perceptual / Gram losses over a pluggable feature
//! extractor) are shared by several stages. Everything is `f64` internally,
//! single-threaded, and deterministic given a root seed.

pub mod container;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod nn;
pub mod procgen;
pub mod scene;
pub mod seeds;
