//! Cameras, rigid poses, rays, pose interpolation, and epipolar algebra.
//!
//! Conventions, fixed project-wide:
//! - Camera frame: +x right, +y down (image v axis), +z forward. Poses are
//!   camera-to-world. Rotations are proper (unit quaternions).
//! - World frame: +y is the gravity direction, so the ground plane sits at
//!   y = 0 and cameras above ground have negative y. "World up" is -y.
//! - Image origin is the top-left pixel corner; pixel centers are at
//!   integer + 0.5 offsets, and `camera_ray` takes continuous pixel
//!   coordinates directly.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({0}, {1}) outside image bounds {2}x{3}")]
    PixelOutOfBounds(f64, f64, u32, u32),
    #[error("interpolation parameter t={0} outside [0, 1]")]
    InterpolationOutOfRange(f64),
    #[error("camera poses are identical; epipolar geometry is degenerate")]
    DegenerateBaseline,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Symmetric intrinsics with the principal point at the image center.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self { rotation: inv_rot, translation: -(inv_rot * self.translation) }
    }

    /// `self` then `other` applied in world space: maps p through
    /// `other * (self * p)`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: other.rotation * self.rotation,
            translation: other.rotation * self.translation + other.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle (radians) plus translation distance. The scalar used
    /// for nearest-camera searches and progress tracking throughout.
    pub fn distance(&self, other: &Pose) -> f64 {
        let angle = self.rotation.angle_to(&other.rotation);
        let trans = (self.translation - other.translation).norm();
        angle + trans
    }
}

/// A posed pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    /// Camera placed at `eye` looking at `target`, with the image-down
    /// direction aligned to world +y (gravity).
    pub fn look_at(
        intrinsics: CameraIntrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Self {
        let forward = (target - eye).normalize();
        // Image-down defaults to gravity; fall back to +z when looking
        // straight down/up.
        let down_hint = Vector3::new(0.0, 1.0, 0.0);
        let right = if forward.cross(&down_hint).norm() < 1e-9 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            down_hint.cross(&forward).normalize()
        };
        let down = forward.cross(&right).normalize();
        let rot = Matrix3::from_columns(&[right, down, forward]);
        let rotation = UnitQuaternion::from_matrix(&rot);
        Self { intrinsics, pose: Pose::new(rotation, eye) }
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// World-space position of the camera center.
    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    /// World-space forward (+z) axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.pose.rotation * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Projects a world point to pixel coordinates and camera-space depth.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p_world: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let p_cam = self.pose.rotation.inverse() * (p_world - self.pose.translation);
        if p_cam.z <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k.fx * p_cam.x / p_cam.z + k.cx;
        let v = k.fy * p_cam.y / p_cam.z + k.cy;
        Some((Vector2::new(u, v), p_cam.z))
    }

    /// Inverse of [`Camera::project`] at a known camera-space depth.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let p_cam = Vector3::new(
            (pixel.x - k.cx) / k.fx * depth,
            (pixel.y - k.cy) / k.fy * depth,
            depth,
        );
        self.pose.transform_point(&p_cam)
    }
}

/// A world-space ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// World-space ray through the given (continuous) pixel coordinate.
pub fn camera_ray(camera: &Camera, pixel: Vector2<f64>) -> Result<Ray, GeometryError> {
    let k = &camera.intrinsics;
    if !(0.0..=k.width as f64).contains(&pixel.x) || !(0.0..=k.height as f64).contains(&pixel.y) {
        return Err(GeometryError::PixelOutOfBounds(pixel.x, pixel.y, k.width, k.height));
    }
    let dir_cam = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
    let dir_world = (camera.pose.rotation * dir_cam).normalize();
    Ok(Ray { origin: camera.pose.translation, direction: dir_world })
}

/// Ray through the center of pixel (x, y).
pub fn pixel_center_ray(camera: &Camera, x: u32, y: u32) -> Ray {
    // In-bounds by construction.
    camera_ray(camera, Vector2::new(x as f64 + 0.5, y as f64 + 0.5))
        .expect("pixel center is always in bounds")
}

/// Spherical-linear interpolation of rotations (shorter arc) with linear
/// interpolation of translations.
pub fn interpolate_pose(a: &Pose, b: &Pose, t: f64) -> Result<Pose, GeometryError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::InterpolationOutOfRange(t));
    }
    // Endpoints exact; avoids slerp round-off at the boundaries.
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    // Shorter arc: flip one quaternion when the dot product is negative,
    // otherwise interpolation can swing the long way around.
    let qa = a.rotation.into_inner();
    let mut qb = b.rotation.into_inner();
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let qa = UnitQuaternion::from_quaternion(qa);
    let qb = UnitQuaternion::from_quaternion(qb);
    let rotation = qa.slerp(&qb, t);
    let translation = a.translation.lerp(&b.translation, t);
    Ok(Pose { rotation, translation })
}

/// Fundamental matrix mapping pixels of `cam_a` to epipolar lines in
/// `cam_b`, computed analytically from the known poses and intrinsics:
/// x_b' F x_a = 0 for projections of a common world point.
pub fn fundamental_matrix(cam_a: &Camera, cam_b: &Camera) -> Result<Matrix3<f64>, GeometryError> {
    // Relative transform taking a-camera coordinates to b-camera
    // coordinates: p_b = R p_a + t.
    let rot_b_inv = cam_b.pose.rotation.inverse();
    let rel_rot = (rot_b_inv * cam_a.pose.rotation).to_rotation_matrix();
    let rel_t = rot_b_inv * (cam_a.pose.translation - cam_b.pose.translation);
    if rel_t.norm() < 1e-12 && cam_a.pose.rotation.angle_to(&cam_b.pose.rotation) < 1e-12 {
        return Err(GeometryError::DegenerateBaseline);
    }
    let t_cross = Matrix3::new(
        0.0, -rel_t.z, rel_t.y, //
        rel_t.z, 0.0, -rel_t.x, //
        -rel_t.y, rel_t.x, 0.0,
    );
    let essential = t_cross * rel_rot.matrix();
    let k_a_inv = cam_a
        .intrinsics
        .k_matrix()
        .try_inverse()
        .expect("pinhole K is invertible for positive focal lengths");
    let k_b_inv = cam_b
        .intrinsics
        .k_matrix()
        .try_inverse()
        .expect("pinhole K is invertible for positive focal lengths");
    Ok(k_b_inv.transpose() * essential * k_a_inv)
}

/// Mean of the two point-to-epipolar-line distances (pixels) for a
/// correspondence x (in A) and x' (in B) under fundamental matrix `f`.
///
/// Lines with near-zero gradient (point at an epipole) are guarded and
/// reported as a large finite distance rather than a division blow-up.
pub fn symmetric_epipolar_distance(
    f: &Matrix3<f64>,
    x: &Vector2<f64>,
    x_prime: &Vector2<f64>,
) -> f64 {
    const EPS: f64 = 1e-12;
    const DEGENERATE_DISTANCE: f64 = 1e9;
    let xh = Vector3::new(x.x, x.y, 1.0);
    let xph = Vector3::new(x_prime.x, x_prime.y, 1.0);
    let line_in_b = f * xh;
    let line_in_a = f.transpose() * xph;
    let residual = xph.dot(&line_in_b).abs();

    let grad_b = (line_in_b.x * line_in_b.x + line_in_b.y * line_in_b.y).sqrt();
    let grad_a = (line_in_a.x * line_in_a.x + line_in_a.y * line_in_a.y).sqrt();
    let d_b = if grad_b < EPS { DEGENERATE_DISTANCE } else { residual / grad_b };
    let d_a = if grad_a < EPS { DEGENERATE_DISTANCE } else { residual / grad_a };
    0.5 * (d_a + d_b)
}

/// Flat serialization record for a posed camera, one JSON object per
/// camera; trajectory files are arrays of these.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: u32,
    pub h: u32,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let q = c.pose.rotation.into_inner();
        CameraRecord {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            w: c.intrinsics.width,
            h: c.intrinsics.height,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            tx: c.pose.translation.x,
            ty: c.pose.translation.y,
            tz: c.pose.translation.z,
        }
    }
}

impl From<&CameraRecord> for Camera {
    fn from(r: &CameraRecord) -> Self {
        let q = nalgebra::Quaternion::new(r.qw, r.qx, r.qy, r.qz);
        Camera {
            intrinsics: CameraIntrinsics {
                fx: r.fx,
                fy: r.fy,
                cx: r.cx,
                cy: r.cy,
                width: r.w,
                height: r.h,
            },
            pose: Pose::new(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(r.tx, r.ty, r.tz),
            ),
        }
    }
}

/// Writes a trajectory as an array-of-cameras JSON file.
pub fn save_trajectory(path: &std::path::Path, cameras: &[Camera]) -> std::io::Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    let json = serde_json::to_string_pretty(&records).expect("camera records serialize");
    std::fs::write(path, json)
}

pub fn load_trajectory(path: &std::path::Path) -> std::io::Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok(records.iter().map(Camera::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-3.0..3.0);
        let rotation = if axis.norm() < 1e-6 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        let translation = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        Pose::new(rotation, translation)
    }

    #[test]
    fn ray_through_principal_point_is_forward_axis() {
        let cam = Camera::new(test_intrinsics(), Pose::identity());
        let ray = camera_ray(&cam, Vector2::new(16.0, 12.0)).unwrap();
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn ray_direction_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cam = Camera::new(test_intrinsics(), random_pose(&mut rng));
            let px = Vector2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..24.0));
            let ray = camera_ray(&cam, px).unwrap();
            assert_relative_eq!(ray.direction.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn ray_one_focal_length_off_axis() {
        // Pixel (cx + fx, cy) back-projects to camera direction (1, 0, 1)
        // before normalization; needs fx small enough to stay in bounds.
        let k = CameraIntrinsics::new(10.0, 10.0, 16.0, 12.0, 32, 24).unwrap();
        let cam = Camera::new(k, Pose::identity());
        let ray = camera_ray(&cam, Vector2::new(16.0 + 10.0, 12.0)).unwrap();
        let expected = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert_relative_eq!(ray.direction, expected, epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_domain_error() {
        let cam = Camera::new(test_intrinsics(), Pose::identity());
        assert!(matches!(
            camera_ray(&cam, Vector2::new(-1.0, 5.0)),
            Err(GeometryError::PixelOutOfBounds(..))
        ));
        assert!(matches!(
            camera_ray(&cam, Vector2::new(5.0, 25.0)),
            Err(GeometryError::PixelOutOfBounds(..))
        ));
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0usize;
        while checked < 1000 {
            let cam = Camera::new(test_intrinsics(), random_pose(&mut rng));
            let p = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            if let Some((px, depth)) = cam.project(&p) {
                let back = cam.unproject(&px, depth);
                assert!((back - p).norm() < 1e-6, "round trip error {:e}", (back - p).norm());
                checked += 1;
            }
        }
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let ident = pose.compose(&pose.inverse());
            assert!(ident.translation.norm() < 1e-9);
            assert!(ident.rotation.angle() < 1e-9);
        }
    }

    #[test]
    fn interpolate_pose_endpoints_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        assert_eq!(interpolate_pose(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_pose(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn interpolate_pose_half_yaw() {
        // Identity to a 90 degree yaw at t = 0.5 lands at 45 degrees.
        let a = Pose::identity();
        let b = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        );
        let mid = interpolate_pose(&a, &b, 0.5).unwrap();
        assert_relative_eq!(mid.rotation.angle(), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
        assert_relative_eq!(
            mid.rotation.axis().unwrap().into_inner(),
            Vector3::new(0.0, 1.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn interpolate_pose_rejects_out_of_range() {
        let a = Pose::identity();
        assert!(interpolate_pose(&a, &a, -0.1).is_err());
        assert!(interpolate_pose(&a, &a, 1.1).is_err());
    }

    #[test]
    fn interpolation_angle_grows_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let mut last = -1.0;
            for i in 0..=20 {
                let t = i as f64 / 20.0;
                let p = interpolate_pose(&a, &b, t).unwrap();
                let angle = a.rotation.angle_to(&p.rotation);
                assert!(
                    angle >= last - 1e-12,
                    "angle not monotone: {angle} after {last} at t={t}"
                );
                last = angle;
            }
        }
    }

    #[test]
    fn interpolation_takes_shorter_arc() {
        // b's quaternion negated must not change the path.
        let a = Pose::identity();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.4);
        let b_pos = Pose::new(rot, Vector3::zeros());
        let b_neg = Pose::new(UnitQuaternion::from_quaternion(-rot.into_inner()), Vector3::zeros());
        let p1 = interpolate_pose(&a, &b_pos, 0.5).unwrap();
        let p2 = interpolate_pose(&a, &b_neg, 0.5).unwrap();
        assert!(p1.rotation.angle_to(&p2.rotation) < 1e-12);
    }

    #[test]
    fn fundamental_matrix_defining_property_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let cam_a = Camera::new(test_intrinsics(), random_pose(&mut rng));
            let cam_b = Camera::new(test_intrinsics(), random_pose(&mut rng));
            let f = fundamental_matrix(&cam_a, &cam_b).unwrap();

            // Rank 2: smallest singular value vanishes relative to largest.
            let svd = f.svd(false, false);
            let s = svd.singular_values;
            assert!(s[2] < 1e-10 * s[0], "third singular value {:e} vs {:e}", s[2], s[0]);

            // Defining property on synthetic correspondences, normalized by
            // the projective scale.
            for _ in 0..20 {
                let p = Vector3::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                );
                let (Some((xa, _)), Some((xb, _))) = (cam_a.project(&p), cam_b.project(&p)) else {
                    continue;
                };
                let xah = Vector3::new(xa.x, xa.y, 1.0);
                let xbh = Vector3::new(xb.x, xb.y, 1.0);
                let residual = xbh.dot(&(f * xah)).abs() / f.norm();
                assert!(residual < 1e-8, "epipolar residual {residual:e}");
            }
        }
    }

    #[test]
    fn fundamental_matrix_pure_x_translation() {
        // Identity-like intrinsics (unit focal, principal point at the
        // image center offsets removed by construction below) and a pure
        // 1 m x-translation give F proportional to [[0,0,0],[0,0,-1],[0,1,0]].
        let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 2, height: 2 };
        let cam_a = Camera::new(k, Pose::identity());
        let cam_b = Camera::new(k, Pose::new(UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0)));
        let f = fundamental_matrix(&cam_a, &cam_b).unwrap();
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        // Proportionality: scale by the matching entry.
        let scale = f[(1, 2)] / expected[(1, 2)];
        assert!(scale.abs() > 1e-12);
        assert_relative_eq!(f, expected * scale, epsilon = 1e-12);
    }

    #[test]
    fn fundamental_matrix_identical_poses_degenerate() {
        let cam = Camera::new(test_intrinsics(), Pose::identity());
        assert!(matches!(
            fundamental_matrix(&cam, &cam),
            Err(GeometryError::DegenerateBaseline)
        ));
    }

    #[test]
    fn sed_zero_for_exact_correspondence_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cam_a = Camera::new(test_intrinsics(), random_pose(&mut rng));
        let cam_b = Camera::new(test_intrinsics(), random_pose(&mut rng));
        let f = fundamental_matrix(&cam_a, &cam_b).unwrap();
        for _ in 0..50 {
            let p = Vector3::new(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            );
            let (Some((xa, _)), Some((xb, _))) = (cam_a.project(&p), cam_b.project(&p)) else {
                continue;
            };
            let d = symmetric_epipolar_distance(&f, &xa, &xb);
            assert!(d < 1e-6, "exact correspondence distance {d:e}");
            let d_swapped = symmetric_epipolar_distance(&f.transpose(), &xb, &xa);
            assert_relative_eq!(d, d_swapped, epsilon = 1e-10);
        }
    }

    /// Point-to-line distance computed from scratch, as an oracle for the
    /// symmetric distance.
    fn point_line_distance(line: &Vector3<f64>, p: &Vector2<f64>) -> f64 {
        (line.x * p.x + line.y * p.y + line.z).abs() / (line.x * line.x + line.y * line.y).sqrt()
    }

    #[test]
    fn sed_perpendicular_perturbation_bounded() {
        // On a moderate stereo pair, perturbing x' by 3 px perpendicular to
        // its epipolar line gives a symmetric distance in [1.5, 3]: the
        // perturbed image sees the full 3 px, the other side at most that.
        // Also cross-checks SED against brute-force line distances.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut checked = 0;
        while checked < 25 {
            let cam_a = Camera::new(test_intrinsics(), Pose::identity());
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), rng.gen_range(-0.05..0.05));
            let cam_b = Camera::new(
                test_intrinsics(),
                Pose::new(yaw, Vector3::new(rng.gen_range(0.3..1.0), rng.gen_range(-0.2..0.2), 0.0)),
            );
            let f = fundamental_matrix(&cam_a, &cam_b).unwrap();
            let p = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(4.0..8.0),
            );
            let (Some((xa, _)), Some((xb, _))) = (cam_a.project(&p), cam_b.project(&p)) else {
                continue;
            };
            let xah = Vector3::new(xa.x, xa.y, 1.0);
            let line_b = f * xah;
            let grad = Vector2::new(line_b.x, line_b.y);
            if grad.norm() < 1e-9 {
                continue;
            }
            let normal = grad / grad.norm();
            let xb_shifted = xb + 3.0 * normal;
            let d = symmetric_epipolar_distance(&f, &xa, &xb_shifted);

            // Brute-force oracle: mean of the two hand-computed distances.
            let line_a = f.transpose() * Vector3::new(xb_shifted.x, xb_shifted.y, 1.0);
            let oracle = 0.5 * (point_line_distance(&line_b, &xb_shifted)
                + point_line_distance(&line_a, &xa));
            assert_relative_eq!(d, oracle, epsilon = 1e-10);
            // The band is exact for rectified pairs; rotation rescales the
            // far-image distance by the local epipolar gradient ratio, so a
            // small first-order slack applies above.
            assert!(
                (1.5..=3.0 * 1.01).contains(&d),
                "perturbed distance {d} outside [1.5, 3]"
            );
            checked += 1;
        }
    }

    #[test]
    fn camera_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cam = Camera::new(test_intrinsics(), random_pose(&mut rng));
        let rec = CameraRecord::from(&cam);
        let back = Camera::from(&rec);
        assert!(cam.pose.distance(&back.pose) < 1e-12);
        assert_eq!(cam.intrinsics, back.intrinsics);
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let k = test_intrinsics();
        let eye = Vector3::new(2.0, -1.5, -3.0);
        let target = Vector3::new(0.0, -0.5, 0.0);
        let cam = Camera::look_at(k, eye, target);
        // Target projects to the principal point.
        let (px, _) = cam.project(&target).unwrap();
        assert_relative_eq!(px, Vector2::new(k.cx, k.cy), epsilon = 1e-9);
        // Proper rotation.
        let det = cam.pose.rotation.to_rotation_matrix().matrix().determinant();
        assert_relative_eq!(det, 1.0, epsilon = 1e-12);
        // A point above the target (world -y) lands in the upper image half.
        let above = Vector3::new(0.0, -1.5, 0.0);
        let (px_above, _) = cam.project(&above).unwrap();
        assert!(px_above.y < k.cy);
    }
}
