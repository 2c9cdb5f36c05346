//! Trilinear voxel radiance field.
//!
//! Density is softplus of a raw grid (non-negative by construction), color
//! is sigmoid of a raw grid (in [0,1] at query time). Rays march at a fixed
//! stride through the grid bounds and composite front-to-back; the backward
//! pass scatters gradients into the eight trilinear corners per sample.

use super::{Aabb, RenderConfig, RenderOutput};
use crate::container::Container;
use crate::geometry::{pixel_center_ray, Camera};
use crate::img::Image;
use crate::seeds;
use nalgebra::Vector3;
use rand::Rng;

pub const FIELD_KIND: &str = "scene/field";

/// Transmittance below which marching stops; remaining contributions are
/// below render precision.
const EARLY_STOP_T: f64 = 1e-7;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
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

#[derive(Debug, Clone)]
pub struct RadianceFieldGrid {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    /// Raw density grid, softplus-activated at query time, x-fastest layout.
    pub density_raw: Vec<f64>,
    /// Raw color grid, 3 channels per node, sigmoid-activated at query time.
    pub color_raw: Vec<f64>,
}

/// Eight corner indices and weights of a trilinear lookup.
struct Trilinear {
    idx: [usize; 8],
    w: [f64; 8],
}

impl RadianceFieldGrid {
    /// Empty grid: density raw deep in the softplus tail (sigma ~ 2e-9,
    /// optically void), colors raw at zero (mid-gray).
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Self {
        Self::with_density_init(resolution, bounds, -20.0)
    }

    /// Grid primed for fitting: a mild initial fog keeps density gradients
    /// alive everywhere. The default raw value -2 gives sigma ~ 0.13.
    pub fn fit_ready(resolution: [usize; 3], bounds: Aabb) -> Self {
        Self::with_density_init(resolution, bounds, -2.0)
    }

    pub fn with_density_init(resolution: [usize; 3], bounds: Aabb, raw_density: f64) -> Self {
        let n = resolution[0] * resolution[1] * resolution[2];
        Self {
            resolution,
            bounds,
            density_raw: vec![raw_density; n],
            color_raw: vec![0.0; n * 3],
        }
    }

    pub fn node_count(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    fn trilinear(&self, p: &Vector3<f64>) -> Option<Trilinear> {
        let [nx, ny, nz] = self.resolution;
        let ext = self.bounds.max - self.bounds.min;
        let mut g = [0.0; 3];
        for i in 0..3 {
            let u = (p[i] - self.bounds.min[i]) / ext[i];
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            let n = self.resolution[i];
            g[i] = u * (n as f64 - 1.0);
        }
        let fx = g[0].floor().min(nx as f64 - 2.0).max(0.0);
        let fy = g[1].floor().min(ny as f64 - 2.0).max(0.0);
        let fz = g[2].floor().min(nz as f64 - 2.0).max(0.0);
        let (tx, ty, tz) = (g[0] - fx, g[1] - fy, g[2] - fz);
        let (x0, y0, z0) = (fx as usize, fy as usize, fz as usize);
        let at = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        let idx = [
            at(x0, y0, z0),
            at(x0 + 1, y0, z0),
            at(x0, y0 + 1, z0),
            at(x0 + 1, y0 + 1, z0),
            at(x0, y0, z0 + 1),
            at(x0 + 1, y0, z0 + 1),
            at(x0, y0 + 1, z0 + 1),
            at(x0 + 1, y0 + 1, z0 + 1),
        ];
        let w = [
            (1.0 - tx) * (1.0 - ty) * (1.0 - tz),
            tx * (1.0 - ty) * (1.0 - tz),
            (1.0 - tx) * ty * (1.0 - tz),
            tx * ty * (1.0 - tz),
            (1.0 - tx) * (1.0 - ty) * tz,
            tx * (1.0 - ty) * tz,
            (1.0 - tx) * ty * tz,
            tx * ty * tz,
        ];
        Some(Trilinear { idx, w })
    }

    /// Activated (sigma, rgb) at a world point; zero density outside bounds.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let Some(tri) = self.trilinear(p) else {
            return (0.0, [0.0; 3]);
        };
        let mut raw_d = 0.0;
        let mut raw_c = [0.0; 3];
        for k in 0..8 {
            let (i, w) = (tri.idx[k], tri.w[k]);
            raw_d += w * self.density_raw[i];
            for ch in 0..3 {
                raw_c[ch] += w * self.color_raw[i * 3 + ch];
            }
        }
        (softplus(raw_d), [sigmoid(raw_c[0]), sigmoid(raw_c[1]), sigmoid(raw_c[2])])
    }

    pub fn stride(&self, cfg: &RenderConfig) -> f64 {
        self.bounds.diagonal() / cfg.stride_divisor as f64
    }

    pub fn render(&self, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
        let (h, w) = (camera.height() as usize, camera.width() as usize);
        let mut rgb = Image::new(h, w);
        let mut depth = vec![0.0; h * w];
        let mut accumulation = vec![0.0; h * w];
        let delta = self.stride(cfg);
        let mut jitter_rng = cfg.jitter_seed.map(|s| seeds::rng(s, "field-jitter"));
        for y in 0..h {
            for x in 0..w {
                let ray = pixel_center_ray(camera, x as u32, y as u32);
                let jitter = jitter_rng.as_mut().map_or(0.5, |r| r.gen::<f64>());
                let (c, d, a) = self.trace(&ray.origin, &ray.direction, delta, jitter, cfg);
                rgb.set(y, x, c);
                depth[y * w + x] = d;
                accumulation[y * w + x] = a;
            }
        }
        RenderOutput { rgb, depth, accumulation }
    }

    fn trace(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        delta: f64,
        jitter: f64,
        cfg: &RenderConfig,
    ) -> ([f64; 3], f64, f64) {
        let Some((t0, t1)) = self.bounds.ray_interval(origin, dir) else {
            return (cfg.background, 0.0, 0.0);
        };
        let t0 = t0.max(1e-6);
        let mut rgb = [0.0; 3];
        let mut depth = 0.0;
        let mut acc = 0.0;
        let mut transmittance = 1.0;
        let mut t = t0 + jitter * delta;
        while t < t1 {
            let p = origin + t * dir;
            let (sigma, c) = self.query(&p);
            if sigma > 0.0 {
                let alpha = 1.0 - (-sigma * delta).exp();
                let wgt = alpha * transmittance;
                for ch in 0..3 {
                    rgb[ch] += wgt * c[ch];
                }
                depth += wgt * t;
                acc += wgt;
                transmittance *= 1.0 - alpha;
                if transmittance < EARLY_STOP_T {
                    break;
                }
            }
            t += delta;
        }
        for ch in 0..3 {
            rgb[ch] += transmittance.max(0.0) * cfg.background[ch];
        }
        (rgb, depth, acc)
    }

    /// Renders the pixels listed in `pixels` for one camera and accumulates
    /// photometric-loss gradients into the raw grids.
    ///
    /// Per-pixel loss is `weight * mean_ch (C_ch - target_ch)^2`; the caller
    /// divides by the ray count. Returns the summed per-pixel loss.
    #[allow(clippy::too_many_arguments)]
    pub fn backprop_pixels(
        &self,
        camera: &Camera,
        target: &Image,
        pixels: &[(usize, usize)],
        weight: f64,
        cfg: &RenderConfig,
        grad_density: &mut [f64],
        grad_color: &mut [f64],
    ) -> f64 {
        let delta = self.stride(cfg);
        let mut loss_sum = 0.0;
        // Per-sample forward record for the backward sweep.
        struct Sample {
            tri_idx: [usize; 8],
            tri_w: [f64; 8],
            raw_d: f64,
            alpha: f64,
            c: [f64; 3],
            t_weight: f64,
        }
        let mut samples: Vec<Sample> = Vec::with_capacity(300);
        for &(y, x) in pixels {
            samples.clear();
            let ray = pixel_center_ray(camera, x as u32, y as u32);
            let (mut rgb, mut transmittance) = ([0.0; 3], 1.0);
            if let Some((t0, t1)) = self.bounds.ray_interval(&ray.origin, &ray.direction) {
                let t0 = t0.max(1e-6);
                let mut t = t0 + 0.5 * delta;
                while t < t1 {
                    let p = ray.origin + t * ray.direction;
                    if let Some(tri) = self.trilinear(&p) {
                        let mut raw_d = 0.0;
                        let mut raw_c = [0.0; 3];
                        for k in 0..8 {
                            raw_d += tri.w[k] * self.density_raw[tri.idx[k]];
                            for ch in 0..3 {
                                raw_c[ch] += tri.w[k] * self.color_raw[tri.idx[k] * 3 + ch];
                            }
                        }
                        let sigma = softplus(raw_d);
                        let alpha = (1.0 - (-sigma * delta).exp()).min(1.0 - 1e-12);
                        let c = [sigmoid(raw_c[0]), sigmoid(raw_c[1]), sigmoid(raw_c[2])];
                        let wgt = alpha * transmittance;
                        for ch in 0..3 {
                            rgb[ch] += wgt * c[ch];
                        }
                        samples.push(Sample {
                            tri_idx: tri.idx,
                            tri_w: tri.w,
                            raw_d,
                            alpha,
                            c,
                            t_weight: transmittance,
                        });
                        transmittance *= 1.0 - alpha;
                        if transmittance < EARLY_STOP_T {
                            break;
                        }
                    }
                    t += delta;
                }
            }
            for ch in 0..3 {
                rgb[ch] += transmittance * cfg.background[ch];
            }

            let tgt = target.get(y, x);
            let mut dl_dc = [0.0; 3];
            for ch in 0..3 {
                let e = rgb[ch] - tgt[ch];
                loss_sum += weight * e * e / 3.0;
                dl_dc[ch] = weight * 2.0 * e / 3.0;
            }

            // Suffix sums S_ch(i) = sum_{k>i} w_k c_k and the background
            // term share the 1/(1-alpha_i) factor.
            let mut suffix = [
                transmittance * cfg.background[0],
                transmittance * cfg.background[1],
                transmittance * cfg.background[2],
            ];
            for s in samples.iter().rev() {
                let wgt = s.alpha * s.t_weight;
                let mut dl_dalpha = 0.0;
                for ch in 0..3 {
                    dl_dalpha +=
                        dl_dc[ch] * (s.t_weight * s.c[ch] - suffix[ch] / (1.0 - s.alpha));
                    // d color channel
                    let dl_dcch = dl_dc[ch] * wgt;
                    let dsig = s.c[ch] * (1.0 - s.c[ch]);
                    let dl_draw_c = dl_dcch * dsig;
                    for k in 0..8 {
                        grad_color[s.tri_idx[k] * 3 + ch] += dl_draw_c * s.tri_w[k];
                    }
                    suffix[ch] += wgt * s.c[ch];
                }
                // alpha = 1 - exp(-sigma delta): d alpha/d sigma = delta (1 - alpha)
                let dalpha_dsigma = delta * (1.0 - s.alpha);
                let dsigma_draw = sigmoid(s.raw_d);
                let dl_draw_d = dl_dalpha * dalpha_dsigma * dsigma_draw;
                for k in 0..8 {
                    grad_density[s.tri_idx[k]] += dl_draw_d * s.tri_w[k];
                }
            }
        }
        loss_sum
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            FIELD_KIND,
            serde_json::json!({
                "resolution": self.resolution,
                "bounds_min": [self.bounds.min.x, self.bounds.min.y, self.bounds.min.z],
                "bounds_max": [self.bounds.max.x, self.bounds.max.y, self.bounds.max.z],
            }),
        );
        c.push_f64("density_raw", &[self.density_raw.len()], &self.density_raw);
        c.push_f64("color_raw", &[self.color_raw.len()], &self.color_raw);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, super::SceneError> {
        c.expect_kind(FIELD_KIND)?;
        let res: [usize; 3] = serde_json::from_value(c.meta["resolution"].clone())
            .expect("field checkpoint resolution");
        let bmin: [f64; 3] =
            serde_json::from_value(c.meta["bounds_min"].clone()).expect("bounds_min");
        let bmax: [f64; 3] =
            serde_json::from_value(c.meta["bounds_max"].clone()).expect("bounds_max");
        Ok(Self {
            resolution: res,
            bounds: Aabb::new(Vector3::from(bmin), Vector3::from(bmax)),
            density_raw: c.block_f64("density_raw")?,
            color_raw: c.block_f64("color_raw")?,
        })
    }
}
