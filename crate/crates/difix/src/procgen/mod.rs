//! Procedural ground-truth scenes with exact analytic rendering.
//!
//! Scenes are colored spheres and boxes over a checkered ground plane,
//! lit by one fixed directional light. Rendering is exact ray intersection,
//! so "clean" images are bit-reproducible and every curation artifact is
//! attributable to the fitted representation, never the data.
//!
//! World convention follows [`crate::geometry`]: +y is gravity (down),
//! ground plane at y = 0, objects above ground at negative y.

pub mod curation;

use crate::geometry::{pixel_center_ray, Camera, CameraIntrinsics, Ray};
use crate::img::Image;
use crate::scene::Aabb;
use crate::seeds;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryStyle {
    Orbit,
    Corridor,
    DrivingLine,
}

/// Everything needed to regenerate a scene and its trajectories
/// bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralSceneSpec {
    pub seed: u64,
    pub n_primitives: usize,
    /// Base colors sampled per primitive.
    pub palette: Vec<[f64; 3]>,
    /// World-space extent of scene content (also the fit bounds).
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
    pub trajectory_style: TrajectoryStyle,
    /// Frames per trajectory.
    pub n_frames: usize,
    /// Style-specific reference-to-target deviation: arc offset in degrees
    /// for orbit, lateral shift in meters for corridor/driving-line.
    pub target_deviation: f64,
    pub image_width: u32,
    pub image_height: u32,
}

pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [0.85, 0.25, 0.20],
        [0.20, 0.55, 0.85],
        [0.95, 0.75, 0.20],
        [0.25, 0.70, 0.35],
        [0.70, 0.30, 0.75],
        [0.90, 0.50, 0.15],
        [0.25, 0.75, 0.75],
        [0.80, 0.80, 0.80],
    ]
}

impl ProceduralSceneSpec {
    pub fn extent(&self) -> Aabb {
        Aabb::new(Vector3::from(self.extent_min), Vector3::from(self.extent_max))
    }

    /// A ready-to-use spec for one of the three styles.
    pub fn preset(style: TrajectoryStyle, seed: u64, res: u32, n_frames: usize) -> Self {
        let (extent_min, extent_max, deviation) = match style {
            TrajectoryStyle::Orbit => ([-2.0, -2.2, -2.0], [2.0, 0.0, 2.0], 70.0),
            TrajectoryStyle::Corridor => ([-2.5, -2.2, 0.0], [2.5, 0.0, 10.0], 1.6),
            TrajectoryStyle::DrivingLine => ([-6.0, -2.2, 0.0], [6.0, 0.0, 11.0], 2.0),
        };
        Self {
            seed,
            n_primitives: 7,
            palette: default_palette(),
            extent_min,
            extent_max,
            trajectory_style: style,
            n_frames,
            target_deviation: deviation,
            image_width: res,
            image_height: res,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64, color: [f64; 3] },
    Cuboid { min: Vector3<f64>, max: Vector3<f64>, color: [f64; 3] },
}

/// Analytic scene: primitives plus a checkered ground plane at y = 0.
#[derive(Debug, Clone)]
pub struct GroundTruthScene {
    pub primitives: Vec<Primitive>,
    pub extent: Aabb,
    pub background: [f64; 3],
    pub checker_colors: ([f64; 3], [f64; 3]),
    pub checker_size: f64,
    light: Vector3<f64>,
}

/// A hit along a ray.
struct Hit {
    t: f64,
    normal: Vector3<f64>,
    color: [f64; 3],
}

impl GroundTruthScene {
    fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |hit: Option<Hit>| {
            if let Some(h) = hit {
                if h.t > 1e-6 && best.as_ref().map_or(true, |b| h.t < b.t) {
                    best = Some(h);
                }
            }
        };

        // Ground plane y = 0 within the extent footprint.
        if ray.direction.y.abs() > 1e-12 {
            let t = -ray.origin.y / ray.direction.y;
            if t > 1e-6 {
                let p = ray.at(t);
                if p.x >= self.extent.min.x
                    && p.x <= self.extent.max.x
                    && p.z >= self.extent.min.z
                    && p.z <= self.extent.max.z
                {
                    let cell = (p.x / self.checker_size).floor() as i64
                        + (p.z / self.checker_size).floor() as i64;
                    let color = if cell.rem_euclid(2) == 0 {
                        self.checker_colors.0
                    } else {
                        self.checker_colors.1
                    };
                    consider(Some(Hit { t, normal: Vector3::new(0.0, -1.0, 0.0), color }));
                }
            }
        }

        for prim in &self.primitives {
            match prim {
                Primitive::Sphere { center, radius, color } => {
                    let oc = ray.origin - center;
                    let b = oc.dot(&ray.direction);
                    let c = oc.norm_squared() - radius * radius;
                    let disc = b * b - c;
                    if disc >= 0.0 {
                        let t = -b - disc.sqrt();
                        if t > 1e-6 {
                            let p = ray.at(t);
                            consider(Some(Hit {
                                t,
                                normal: (p - center).normalize(),
                                color: *color,
                            }));
                        }
                    }
                }
                Primitive::Cuboid { min, max, color } => {
                    let b = Aabb { min: *min, max: *max };
                    if let Some((t0, _t1)) = b.ray_interval(&ray.origin, &ray.direction) {
                        if t0 > 1e-6 {
                            let p = ray.at(t0);
                            // Face normal from the dominant boundary axis.
                            let mut normal = Vector3::zeros();
                            let mut best_d = f64::INFINITY;
                            for i in 0..3 {
                                let d_min = (p[i] - min[i]).abs();
                                let d_max = (p[i] - max[i]).abs();
                                if d_min < best_d {
                                    best_d = d_min;
                                    normal = Vector3::zeros();
                                    normal[i] = -1.0;
                                }
                                if d_max < best_d {
                                    best_d = d_max;
                                    normal = Vector3::zeros();
                                    normal[i] = 1.0;
                                }
                            }
                            consider(Some(Hit { t: t0, normal, color: *color }));
                        }
                    }
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let diffuse = (-self.light).dot(&hit.normal).max(0.0);
        let gain = 0.55 + 0.45 * diffuse;
        [hit.color[0] * gain, hit.color[1] * gain, hit.color[2] * gain]
    }

    /// Exact render.
    pub fn render(&self, camera: &Camera) -> Image {
        self.render_with_depth(camera).0
    }

    /// Exact render plus per-pixel hit depth (0 where the ray misses).
    pub fn render_with_depth(&self, camera: &Camera) -> (Image, Vec<f64>) {
        let (h, w) = (camera.height() as usize, camera.width() as usize);
        let mut img = Image::new(h, w);
        let mut depth = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let ray = pixel_center_ray(camera, x as u32, y as u32);
                match self.intersect(&ray) {
                    Some(hit) => {
                        img.set(y, x, self.shade(&hit));
                        depth[y * w + x] = hit.t;
                    }
                    None => img.set(y, x, self.background),
                }
            }
        }
        (img, depth)
    }

    /// World point seen at a pixel, if anything is hit.
    pub fn surface_point(&self, camera: &Camera, x: u32, y: u32) -> Option<Vector3<f64>> {
        let ray = pixel_center_ray(camera, x, y);
        self.intersect(&ray).map(|h| ray.at(h.t))
    }
}

/// Generates the scene and its reference/target trajectories. Everything
/// is a pure function of the spec.
pub fn generate_scene(
    spec: &ProceduralSceneSpec,
) -> (GroundTruthScene, Vec<Camera>, Vec<Camera>) {
    let mut rng = seeds::rng(spec.seed, "procgen/scene");
    let extent = spec.extent();
    let content_margin = 0.25;
    let mut primitives = Vec::with_capacity(spec.n_primitives);
    // Content occupies the central portion of the extent so that cameras
    // keep some standoff.
    let content_min = extent.min + (extent.max - extent.min) * content_margin;
    let content_max = extent.max - (extent.max - extent.min) * content_margin;
    for i in 0..spec.n_primitives {
        let color = spec.palette[i % spec.palette.len()];
        let px = rng.gen_range(content_min.x..content_max.x);
        let pz = rng.gen_range(content_min.z..content_max.z);
        if rng.gen_bool(0.5) {
            let radius = rng.gen_range(0.25..0.55);
            primitives.push(Primitive::Sphere {
                center: Vector3::new(px, -radius, pz),
                radius,
                color,
            });
        } else {
            let hx = rng.gen_range(0.2..0.5);
            let hy = rng.gen_range(0.3..0.9);
            let hz = rng.gen_range(0.2..0.5);
            primitives.push(Primitive::Cuboid {
                min: Vector3::new(px - hx, -2.0 * hy, pz - hz),
                max: Vector3::new(px + hx, 0.0, pz + hz),
                color,
            });
        }
    }
    let scene = GroundTruthScene {
        primitives,
        extent,
        background: [0.5, 0.5, 0.5],
        checker_colors: ([0.75, 0.72, 0.65], [0.35, 0.38, 0.42]),
        checker_size: 0.75,
        light: Vector3::new(0.35, 0.8, 0.2).normalize(),
    };

    let k = CameraIntrinsics::centered(
        spec.image_width,
        spec.image_height,
        0.9 * spec.image_width as f64,
    );
    let (reference, target) = match spec.trajectory_style {
        TrajectoryStyle::Orbit => orbit_trajectories(spec, &extent, k),
        TrajectoryStyle::Corridor => corridor_trajectories(spec, &extent, k),
        TrajectoryStyle::DrivingLine => driving_trajectories(spec, &extent, k),
    };
    (scene, reference, target)
}

fn orbit_trajectories(
    spec: &ProceduralSceneSpec,
    extent: &Aabb,
    k: CameraIntrinsics,
) -> (Vec<Camera>, Vec<Camera>) {
    let center = Vector3::new(extent.center().x, -0.55, extent.center().z);
    let radius = 0.5 * (extent.max.x - extent.min.x) + 1.6;
    let height = -1.0;
    let ref_arc_deg = 120.0;
    let make = |angle_deg: f64| {
        let a = angle_deg.to_radians();
        let eye = Vector3::new(
            center.x + radius * a.cos(),
            height,
            center.z + radius * a.sin(),
        );
        Camera::look_at(k, eye, center)
    };
    let n = spec.n_frames;
    let reference: Vec<Camera> = (0..n)
        .map(|i| make(ref_arc_deg * i as f64 / (n.max(2) - 1) as f64))
        .collect();
    let n_t = (n / 2).max(2);
    let target: Vec<Camera> = (0..n_t)
        .map(|i| {
            make(
                ref_arc_deg
                    + spec.target_deviation * (i + 1) as f64 / n_t as f64,
            )
        })
        .collect();
    (reference, target)
}

fn corridor_trajectories(
    spec: &ProceduralSceneSpec,
    extent: &Aabb,
    k: CameraIntrinsics,
) -> (Vec<Camera>, Vec<Camera>) {
    let n = spec.n_frames;
    let spacing = 0.45;
    let y = -0.9;
    let z0 = extent.min.z - 0.8;
    let make = |x: f64, z: f64| {
        let eye = Vector3::new(x, y, z);
        let target = Vector3::new(x * 0.5, y, z + 4.0);
        Camera::look_at(k, eye, target)
    };
    let reference: Vec<Camera> = (0..n).map(|i| make(0.0, z0 + spacing * i as f64)).collect();
    // Targets continue the path shifted laterally by the deviation.
    let n_t = (n / 2).max(2);
    let target: Vec<Camera> = (0..n_t)
        .map(|i| make(spec.target_deviation, z0 + spacing * (n + i) as f64 * 0.9))
        .collect();
    (reference, target)
}

fn driving_trajectories(
    spec: &ProceduralSceneSpec,
    extent: &Aabb,
    k: CameraIntrinsics,
) -> (Vec<Camera>, Vec<Camera>) {
    let n = spec.n_frames;
    let spacing = 0.5;
    let y = -1.1;
    let z0 = extent.min.z + 0.2;
    let x_line = 0.0;
    let make = |x: f64, z: f64| {
        let eye = Vector3::new(x, y, z);
        let look = Vector3::new(x, y + 0.08, z + 5.0);
        Camera::look_at(k, eye, look)
    };
    let reference: Vec<Camera> =
        (0..n).map(|i| make(x_line, z0 + spacing * i as f64)).collect();
    // Laterally shifted parallel line.
    let target: Vec<Camera> = (0..n)
        .map(|i| make(x_line + spec.target_deviation, z0 + spacing * i as f64))
        .collect();
    (reference, target)
}

/// Simulated multi-camera rig for the cross-reference strategy: the center
/// trajectory plus side cameras yawed by +-`separation_deg` at each frame.
pub fn rig_trajectories(
    reference: &[Camera],
    separation_deg: f64,
) -> Vec<Vec<Camera>> {
    let yaw = |cam: &Camera, angle_deg: f64| {
        let rot = nalgebra::UnitQuaternion::from_axis_angle(
            &Vector3::y_axis(),
            angle_deg.to_radians(),
        );
        Camera::new(
            cam.intrinsics,
            crate::geometry::Pose::new(cam.pose.rotation * rot, cam.pose.translation),
        )
    };
    let center = reference.to_vec();
    let left: Vec<Camera> = reference.iter().map(|c| yaw(c, -separation_deg)).collect();
    let right: Vec<Camera> = reference.iter().map(|c| yaw(c, separation_deg)).collect();
    vec![center, left, right]
}
