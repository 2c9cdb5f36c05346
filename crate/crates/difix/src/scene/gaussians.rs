//! Gaussian particle cloud.
//!
//! Each particle carries position, rotation (unit quaternion), per-axis
//! scale, opacity, and color, with covariance Sigma = R S S^T R^T. Rays
//! evaluate every particle within 3 sigma (Mahalanobis) of the line,
//! depth-sort the contributions at their closest-approach parameter, and
//! composite front-to-back. Gradients flow to all five parameter groups;
//! the closest-approach parameter is a minimizer, so its implicit
//! dependence drops out of the chain rule.

use super::{Aabb, RenderConfig, RenderOutput};
use crate::container::Container;
use crate::geometry::{pixel_center_ray, Camera};
use crate::img::Image;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};

pub const GAUSSIANS_KIND: &str = "scene/gaussians";

/// Mahalanobis-squared cutoff: contributions beyond 3 sigma are dropped.
const Q_CUTOFF: f64 = 9.0;
const EARLY_STOP_T: f64 = 1e-7;
/// Scale floor keeping Sigma comfortably invertible.
pub const SCALE_FLOOR: f64 = 1e-3;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).max(1e-300).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Activated view of one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParticle {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianParticle {
    /// Covariance Sigma = R S S^T R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.map(|v| v * v));
        r.matrix() * s2 * r.matrix().transpose()
    }

    pub fn covariance_inverse(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let s2_inv = Matrix3::from_diagonal(&self.scale.map(|v| 1.0 / (v * v).max(1e-12)));
        r.matrix() * s2_inv * r.matrix().transpose()
    }
}

/// Opacity of a particle evaluated at a world point (Mahalanobis falloff).
pub fn gaussian_alpha(g: &GaussianParticle, p: &Vector3<f64>) -> f64 {
    let v = p - g.position;
    let a = g.covariance_inverse();
    let q = (v.transpose() * a * v)[(0, 0)];
    g.opacity * (-0.5 * q).exp()
}

/// Particle cloud stored in raw (unconstrained) parameterization:
/// positions direct, rotations as unnormalized quaternions, scales as
/// softplus pre-activations, opacity and color as logits.
#[derive(Debug, Clone)]
pub struct GaussianCloud {
    pub bounds: Aabb,
    pub positions: Vec<f64>,
    pub rot_raw: Vec<f64>,
    pub scale_raw: Vec<f64>,
    pub opacity_raw: Vec<f64>,
    pub color_raw: Vec<f64>,
}

/// Cached per-particle activated state for rendering.
struct ParticleCache {
    mu: Vector3<f64>,
    a: Matrix3<f64>,
    opacity: f64,
    color: [f64; 3],
    radius: f64,
}

/// One ray-particle contribution recorded for the backward pass.
#[derive(Clone, Copy)]
struct Contribution {
    particle: usize,
    t_star: f64,
    alpha: f64,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.opacity_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_raw.is_empty()
    }

    pub fn from_particles(bounds: Aabb, particles: &[GaussianParticle]) -> Self {
        let mut cloud = GaussianCloud {
            bounds,
            positions: Vec::with_capacity(particles.len() * 3),
            rot_raw: Vec::with_capacity(particles.len() * 4),
            scale_raw: Vec::with_capacity(particles.len() * 3),
            opacity_raw: Vec::with_capacity(particles.len()),
            color_raw: Vec::with_capacity(particles.len() * 3),
        };
        for p in particles {
            cloud.positions.extend_from_slice(p.position.as_slice());
            let q = p.rotation.into_inner();
            cloud.rot_raw.extend_from_slice(&[q.w, q.i, q.j, q.k]);
            for i in 0..3 {
                cloud.scale_raw.push(softplus_inv((p.scale[i] - SCALE_FLOOR).max(1e-9)));
            }
            cloud.opacity_raw.push(logit(p.opacity));
            for c in p.color {
                cloud.color_raw.push(logit(c));
            }
        }
        cloud
    }

    pub fn particle(&self, i: usize) -> GaussianParticle {
        let q = nalgebra::Quaternion::new(
            self.rot_raw[i * 4],
            self.rot_raw[i * 4 + 1],
            self.rot_raw[i * 4 + 2],
            self.rot_raw[i * 4 + 3],
        );
        GaussianParticle {
            position: Vector3::new(
                self.positions[i * 3],
                self.positions[i * 3 + 1],
                self.positions[i * 3 + 2],
            ),
            rotation: UnitQuaternion::from_quaternion(q),
            scale: Vector3::new(
                softplus(self.scale_raw[i * 3]) + SCALE_FLOOR,
                softplus(self.scale_raw[i * 3 + 1]) + SCALE_FLOOR,
                softplus(self.scale_raw[i * 3 + 2]) + SCALE_FLOOR,
            ),
            opacity: sigmoid(self.opacity_raw[i]),
            color: [
                sigmoid(self.color_raw[i * 3]),
                sigmoid(self.color_raw[i * 3 + 1]),
                sigmoid(self.color_raw[i * 3 + 2]),
            ],
        }
    }

    fn cache(&self) -> Vec<ParticleCache> {
        (0..self.len())
            .map(|i| {
                let p = self.particle(i);
                ParticleCache {
                    mu: p.position,
                    a: p.covariance_inverse(),
                    opacity: p.opacity,
                    color: p.color,
                    radius: 3.0 * p.scale.max(),
                }
            })
            .collect()
    }

    /// Ordered contributions of all particles along one ray.
    fn ray_contributions(
        cache: &[ParticleCache],
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        out: &mut Vec<Contribution>,
    ) {
        out.clear();
        for (i, pc) in cache.iter().enumerate() {
            let om = pc.mu - origin;
            // Cheap euclidean prefilter on the line distance.
            let along = om.dot(dir);
            let perp2 = om.norm_squared() - along * along;
            if perp2 > pc.radius * pc.radius {
                continue;
            }
            let a_d = pc.a * dir;
            let denom = dir.dot(&a_d);
            if denom <= 1e-12 {
                continue;
            }
            let t_star = om.dot(&a_d) / denom;
            if t_star <= 1e-4 {
                continue;
            }
            let v = origin + t_star * dir - pc.mu;
            let q = v.dot(&(pc.a * v));
            if q > Q_CUTOFF {
                continue;
            }
            let alpha = pc.opacity * (-0.5 * q).exp();
            out.push(Contribution { particle: i, t_star, alpha });
        }
        out.sort_by(|a, b| a.t_star.partial_cmp(&b.t_star).expect("finite depths"));
    }

    pub fn render(&self, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
        let (h, w) = (camera.height() as usize, camera.width() as usize);
        let cache = self.cache();
        let mut rgb = Image::new(h, w);
        let mut depth = vec![0.0; h * w];
        let mut accumulation = vec![0.0; h * w];
        let mut contribs = Vec::with_capacity(64);
        for y in 0..h {
            for x in 0..w {
                let ray = pixel_center_ray(camera, x as u32, y as u32);
                Self::ray_contributions(&cache, &ray.origin, &ray.direction, &mut contribs);
                let mut px = [0.0; 3];
                let mut transmittance = 1.0;
                let mut acc = 0.0;
                let mut d = 0.0;
                for c in &contribs {
                    let wgt = c.alpha * transmittance;
                    let col = &cache[c.particle].color;
                    for ch in 0..3 {
                        px[ch] += wgt * col[ch];
                    }
                    d += wgt * c.t_star;
                    acc += wgt;
                    transmittance *= 1.0 - c.alpha;
                    if transmittance < EARLY_STOP_T {
                        break;
                    }
                }
                for ch in 0..3 {
                    px[ch] += transmittance * cfg.background[ch];
                }
                rgb.set(y, x, px);
                depth[y * w + x] = d;
                accumulation[y * w + x] = acc;
            }
        }
        RenderOutput { rgb, depth, accumulation }
    }

    /// Photometric backward over the listed pixels; accumulates gradients
    /// into flat buffers laid out like the raw parameter vectors. Returns
    /// the summed per-pixel loss (weight * mean-channel squared error).
    #[allow(clippy::too_many_arguments)]
    pub fn backprop_pixels(
        &self,
        camera: &Camera,
        target: &Image,
        pixels: &[(usize, usize)],
        weight: f64,
        cfg: &RenderConfig,
        grads: &mut CloudGrads,
    ) -> f64 {
        let cache = self.cache();
        let mut contribs = Vec::with_capacity(64);
        let mut kept: Vec<Contribution> = Vec::with_capacity(64);
        let mut loss_sum = 0.0;
        for &(y, x) in pixels {
            let ray = pixel_center_ray(camera, x as u32, y as u32);
            Self::ray_contributions(&cache, &ray.origin, &ray.direction, &mut contribs);
            // Forward, keeping only the samples actually composited.
            kept.clear();
            let mut px = [0.0; 3];
            let mut transmittance = 1.0;
            let mut t_weights = Vec::with_capacity(contribs.len());
            for c in &contribs {
                let wgt = c.alpha * transmittance;
                let col = &cache[c.particle].color;
                for ch in 0..3 {
                    px[ch] += wgt * col[ch];
                }
                t_weights.push(transmittance);
                kept.push(*c);
                transmittance *= 1.0 - c.alpha;
                if transmittance < EARLY_STOP_T {
                    break;
                }
            }
            for ch in 0..3 {
                px[ch] += transmittance * cfg.background[ch];
            }

            let tgt = target.get(y, x);
            let mut dl_dc = [0.0; 3];
            for ch in 0..3 {
                let e = px[ch] - tgt[ch];
                loss_sum += weight * e * e / 3.0;
                dl_dc[ch] = weight * 2.0 * e / 3.0;
            }

            let mut suffix = [
                transmittance * cfg.background[0],
                transmittance * cfg.background[1],
                transmittance * cfg.background[2],
            ];
            for (k, c) in kept.iter().enumerate().rev() {
                let t_w = t_weights[k];
                let wgt = c.alpha * t_w;
                let pc = &cache[c.particle];
                let one_minus = (1.0 - c.alpha).max(1e-12);
                let mut dl_dalpha = 0.0;
                for ch in 0..3 {
                    dl_dalpha += dl_dc[ch] * (t_w * pc.color[ch] - suffix[ch] / one_minus);
                    // Color chain: sigmoid on raw.
                    let col = pc.color[ch];
                    grads.color_raw[c.particle * 3 + ch] +=
                        dl_dc[ch] * wgt * col * (1.0 - col);
                    suffix[ch] += wgt * pc.color[ch];
                }
                self.scatter_alpha_grad(c, pc, &ray.origin, &ray.direction, dl_dalpha, grads);
            }
        }
        loss_sum
    }

    /// Chains d(loss)/d(alpha) of one contribution into the raw parameter
    /// gradients of its particle.
    fn scatter_alpha_grad(
        &self,
        c: &Contribution,
        pc: &ParticleCache,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        dl_dalpha: f64,
        grads: &mut CloudGrads,
    ) {
        let i = c.particle;
        let x = origin + c.t_star * dir;
        let v = x - pc.mu;
        let av = pc.a * v;
        // alpha = eta * exp(-q/2)
        let exp_term = if pc.opacity > 0.0 { c.alpha / pc.opacity } else { 0.0 };
        // Opacity: sigmoid chain.
        let eta = pc.opacity;
        grads.opacity_raw[i] += dl_dalpha * exp_term * eta * (1.0 - eta);
        let dl_dq = dl_dalpha * (-0.5) * c.alpha;

        // q = v^T A v at the per-ray minimizer t*: envelope theorem makes
        // dq/dt* vanish, so only explicit dependences remain.
        // d q / d mu = -2 A v.
        let dq_dmu = -2.0 * av;
        for k in 0..3 {
            grads.positions[i * 3 + k] += dl_dq * dq_dmu[k];
        }

        // d q / d Sigma = -(A v)(A v)^T; chain into scales and rotation.
        let particle = self.particle(i);
        let r = particle.rotation.to_rotation_matrix().into_inner();
        let u = r.transpose() * av; // A v expressed in particle frame
        for k in 0..3 {
            // d q / d s_k = -2 s_k u_k^2, then softplus chain.
            let dq_ds = -2.0 * particle.scale[k] * u[k] * u[k];
            let dsoft = sigmoid(self.scale_raw[i * 3 + k]);
            grads.scale_raw[i * 3 + k] += dl_dq * dq_ds * dsoft;
        }

        // d q / d R = 2 M R S^2 with M = -(Av)(Av)^T.
        let s2 = Matrix3::from_diagonal(&particle.scale.map(|s| s * s));
        let m = -av * av.transpose();
        let dq_dr = 2.0 * m * r * s2;
        // Chain through quaternion -> rotation matrix & normalization.
        let qn = particle.rotation.into_inner();
        let (w, xq, yq, zq) = (qn.w, qn.i, qn.j, qn.k);
        let dr_dq = [
            // dR/dw
            Matrix3::new(0.0, -zq, yq, zq, 0.0, -xq, -yq, xq, 0.0) * 2.0,
            // dR/dx
            Matrix3::new(0.0, yq, zq, yq, -2.0 * xq, -w, zq, w, -2.0 * xq) * 2.0,
            // dR/dy
            Matrix3::new(-2.0 * yq, xq, w, xq, 0.0, zq, -w, zq, -2.0 * yq) * 2.0,
            // dR/dz
            Matrix3::new(-2.0 * zq, -w, xq, w, -2.0 * zq, yq, xq, yq, 0.0) * 2.0,
        ];
        let mut dq_dquat = [0.0; 4];
        for (k, drk) in dr_dq.iter().enumerate() {
            dq_dquat[k] = dq_dr.component_mul(drk).sum();
        }
        // Normalization jacobian: q_hat = q / |q|.
        let raw = nalgebra::Vector4::new(
            self.rot_raw[i * 4],
            self.rot_raw[i * 4 + 1],
            self.rot_raw[i * 4 + 2],
            self.rot_raw[i * 4 + 3],
        );
        let norm = raw.norm().max(1e-12);
        let unit = raw / norm;
        let dq_vec = nalgebra::Vector4::new(dq_dquat[0], dq_dquat[1], dq_dquat[2], dq_dquat[3]);
        let proj = dq_vec - unit * unit.dot(&dq_vec);
        for k in 0..4 {
            grads.rot_raw[i * 4 + k] += dl_dq * proj[k] / norm;
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            GAUSSIANS_KIND,
            serde_json::json!({
                "count": self.len(),
                "bounds_min": [self.bounds.min.x, self.bounds.min.y, self.bounds.min.z],
                "bounds_max": [self.bounds.max.x, self.bounds.max.y, self.bounds.max.z],
            }),
        );
        c.push_f64("positions", &[self.positions.len()], &self.positions);
        c.push_f64("rot_raw", &[self.rot_raw.len()], &self.rot_raw);
        c.push_f64("scale_raw", &[self.scale_raw.len()], &self.scale_raw);
        c.push_f64("opacity_raw", &[self.opacity_raw.len()], &self.opacity_raw);
        c.push_f64("color_raw", &[self.color_raw.len()], &self.color_raw);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, super::SceneError> {
        c.expect_kind(GAUSSIANS_KIND)?;
        let bmin: [f64; 3] =
            serde_json::from_value(c.meta["bounds_min"].clone()).expect("bounds_min");
        let bmax: [f64; 3] =
            serde_json::from_value(c.meta["bounds_max"].clone()).expect("bounds_max");
        Ok(Self {
            bounds: Aabb::new(Vector3::from(bmin), Vector3::from(bmax)),
            positions: c.block_f64("positions")?,
            rot_raw: c.block_f64("rot_raw")?,
            scale_raw: c.block_f64("scale_raw")?,
            opacity_raw: c.block_f64("opacity_raw")?,
            color_raw: c.block_f64("color_raw")?,
        })
    }
}

/// Gradient buffers matching the raw parameter layout of a cloud.
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub positions: Vec<f64>,
    pub rot_raw: Vec<f64>,
    pub scale_raw: Vec<f64>,
    pub opacity_raw: Vec<f64>,
    pub color_raw: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        Self {
            positions: vec![0.0; cloud.positions.len()],
            rot_raw: vec![0.0; cloud.rot_raw.len()],
            scale_raw: vec![0.0; cloud.scale_raw.len()],
            opacity_raw: vec![0.0; cloud.opacity_raw.len()],
            color_raw: vec![0.0; cloud.color_raw.len()],
        }
    }
}
