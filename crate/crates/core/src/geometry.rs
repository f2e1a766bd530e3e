//! Pinhole camera model and rigid transforms used throughout the pipeline.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

/// Points at or behind this camera-frame depth cannot be projected.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point depth {0} is at or behind the camera plane")]
    NonPositiveDepth(f64),
}

/// Pinhole intrinsics: focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        debug_assert!(cx > 0.0 && cx < width as f64);
        debug_assert!(cy > 0.0 && cy < height as f64);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// From quaternion components (w, x, y, z); renormalizes.
    pub fn from_wxyz_t(qw: f64, qx: f64, qy: f64, qz: f64, t: Vec3) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Self {
            rotation: q,
            translation: t,
        }
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Right-multiplicative tangent update used by the optimizer:
    /// rotation <- Exp(dtheta) * R, translation <- t + dt.
    pub fn retract(&self, dtheta: &Vec3, dt: &Vec3) -> Self {
        let dq = UnitQuaternion::from_scaled_axis(*dtheta);
        Self {
            rotation: dq * self.rotation,
            translation: self.translation + dt,
        }
    }

    /// Geodesic rotation distance to `other` in radians.
    pub fn rotation_error(&self, other: &CameraPose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// `R * p + t`.
pub fn transform_to_camera(pose: &CameraPose, p_world: &Vec3) -> Vec3 {
    pose.rotation * p_world + pose.translation
}

/// Perspective projection of a camera-frame point onto the image plane.
pub fn project_pinhole(intr: &CameraIntrinsics, p_cam: &Vec3) -> Result<Pixel, GeometryError> {
    if p_cam.z <= DEPTH_EPSILON {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    Ok(Pixel::new(
        intr.fx * p_cam.x / p_cam.z + intr.cx,
        intr.fy * p_cam.y / p_cam.z + intr.cy,
    ))
}

/// Unit direction in the camera frame whose projection is `px`.
pub fn backproject_ray(intr: &CameraIntrinsics, px: &Pixel) -> Vec3 {
    Vec3::new((px.x - intr.cx) / intr.fx, (px.y - intr.cy) / intr.fy, 1.0).normalize()
}

/// Pixel coordinates mapped onto the normalized image plane.
pub fn normalized_plane_coords(intr: &CameraIntrinsics, px: &Pixel) -> Pixel {
    Pixel::new((px.x - intr.cx) / intr.fx, (px.y - intr.cy) / intr.fy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    fn random_pose(rng: &mut StdRng) -> CameraPose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle: f64 = rng.random_range(-3.0..3.0);
        let t = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        CameraPose::new(UnitQuaternion::from_scaled_axis(axis.normalize() * angle), t)
    }

    /// Quaternion-to-matrix reference for checking transform_to_camera.
    fn quat_to_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    #[test]
    fn transform_identity() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_to_camera(&CameraPose::identity(), &p), p);
    }

    #[test]
    fn transform_yaw_90() {
        let half = std::f64::consts::SQRT_2 / 2.0;
        let pose = CameraPose::from_wxyz_t(half, 0.0, 0.0, half, Vec3::zeros());
        let out = transform_to_camera(&pose, &Vec3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(out, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn transform_matches_matrix_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let p = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let expect = quat_to_matrix(&pose.rotation) * p + pose.translation;
            assert_relative_eq!(transform_to_camera(&pose, &p), expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn transform_preserves_distances() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let a = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0);
            let b = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 2.0);
            let da = (transform_to_camera(&pose, &a) - transform_to_camera(&pose, &b)).norm();
            assert_relative_eq!(da, (a - b).norm(), epsilon = 1e-10);
        }
    }

    #[test]
    fn project_optical_axis() {
        let intr = test_intrinsics();
        let px = project_pinhole(&intr, &Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert_relative_eq!(px, Pixel::new(50.0, 50.0), epsilon = 1e-12);
    }

    #[test]
    fn project_hand_value() {
        let intr = test_intrinsics();
        let px = project_pinhole(&intr, &Vec3::new(1.0, 1.0, 2.0)).unwrap();
        assert_relative_eq!(px, Pixel::new(100.0, 100.0), epsilon = 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let intr = test_intrinsics();
        assert!(project_pinhole(&intr, &Vec3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn backproject_principal_point() {
        let intr = test_intrinsics();
        let ray = backproject_ray(&intr, &Pixel::new(50.0, 50.0));
        assert_relative_eq!(ray, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_hand_value() {
        let intr = test_intrinsics();
        let ray = backproject_ray(&intr, &Pixel::new(100.0, 100.0));
        assert_relative_eq!(ray, Vec3::new(1.0, 1.0, 2.0).normalize(), epsilon = 1e-12);
    }

    #[test]
    fn project_backproject_roundtrip() {
        let intr = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..20.0),
            );
            let px = project_pinhole(&intr, &p).unwrap();
            let ray = backproject_ray(&intr, &px);
            let cross = ray.cross(&p.normalize()).norm();
            assert!(cross < 1e-9, "ray not parallel to point: {cross}");
        }
    }

    #[test]
    fn normalized_plane_hand_value() {
        let intr = CameraIntrinsics::new(2000.0, 2000.0, 2016.0, 1512.0, 4032, 3024);
        let n = normalized_plane_coords(&intr, &Pixel::new(2416.0, 1512.0));
        assert_relative_eq!(n.x, 0.2, epsilon = 1e-12);
        assert_relative_eq!(n.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn normalized_plane_consistent_with_projection() {
        let intr = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..20.0),
            );
            let px = project_pinhole(&intr, &p).unwrap();
            let n = normalized_plane_coords(&intr, &px);
            assert_relative_eq!(n.x, p.x / p.z, epsilon = 1e-12);
            assert_relative_eq!(n.y, p.y / p.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn quaternion_stays_unit_under_many_updates() {
        let mut pose = CameraPose::identity();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..10_000 {
            let d = Vec3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            );
            pose = pose.retract(&d, &Vec3::zeros());
        }
        assert!((pose.rotation.as_ref().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pose_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let ident = pose.compose(&pose.inverse());
            assert!(ident.rotation.angle() < 1e-9);
            assert!(ident.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn projection_scale_invariant() {
        let intr = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..10.0),
            );
            let lam: f64 = rng.random_range(0.1..10.0);
            let a = project_pinhole(&intr, &p).unwrap();
            let b = project_pinhole(&intr, &(p * lam)).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }
}
