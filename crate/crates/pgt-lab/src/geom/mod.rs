//! Camera poses, the pinhole model, and point-set alignment.
//!
//! Conventions used throughout the crate:
//!
//! - poses are camera-from-world, right-handed, camera looks down +z
//! - image x points right, image y points down, pixel origin at the top-left
//! - pixel centres sit on integer coordinates
//! - depth values are the camera-frame z coordinate in metres

mod align;

pub use align::{kabsch_align, robust_similarity_align, umeyama_similarity, RobustAlignment};

use nalgebra::{Matrix3, Point2, Point3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest camera-frame depth that still counts as "in front".
pub const MIN_PROJECT_DEPTH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point is behind the camera (z = {z:.3e})")]
    BehindCamera { z: f64 },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("mismatched point counts: {src} vs {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("robust alignment failed: only {inliers} inliers")]
    RobustAlignFailed { inliers: usize },
}

/// Rigid camera pose stored as the camera-from-world transform.
///
/// A world point `X` maps into the camera frame as `R * X + t`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Pose {
        Pose { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Pose {
        Pose { rotation, translation }
    }

    /// World point to camera frame.
    pub fn transform_point(&self, p_world: &Point3<f64>) -> Point3<f64> {
        self.rotation.transform_point(p_world) + self.translation
    }

    /// Camera-frame point back to world coordinates.
    pub fn inverse_transform_point(&self, p_cam: &Point3<f64>) -> Point3<f64> {
        self.rotation.inverse_transform_point(&(p_cam - self.translation))
    }

    /// Camera centre in world coordinates (`-R^T t`).
    pub fn centre(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.inverse_transform_vector(&self.translation)))
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose { rotation, translation: -(rotation.transform_vector(&self.translation)) }
    }

    /// Composition `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.transform_vector(&rhs.translation) + self.translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Applies a local update `[w, dt]`: rotation becomes `exp(w) * R` and
    /// translation becomes `t + dt`.
    ///
    /// This chart is the parameterisation used by every solver and every
    /// analytic Jacobian in the crate.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        Pose { rotation: UnitQuaternion::from_scaled_axis(w) * self.rotation, translation: self.translation + dt }
    }
}

/// Pinhole intrinsics shared by every image of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Projects a camera-frame point to pixel coordinates.
    ///
    /// Fails for points at or behind the camera plane; the caller decides
    /// what to do with pixels outside the image bounds.
    pub fn project(&self, p_cam: &Point3<f64>) -> Result<Point2<f64>, GeomError> {
        if p_cam.z <= MIN_PROJECT_DEPTH {
            return Err(GeomError::BehindCamera { z: p_cam.z });
        }
        Ok(Point2::new(self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy))
    }

    /// Lifts a pixel with known depth (camera-frame z) to a 3D point.
    pub fn backproject(&self, pixel: &Point2<f64>, depth: f64) -> Point3<f64> {
        Point3::new((pixel.x - self.cx) / self.fx * depth, (pixel.y - self.cy) / self.fy * depth, depth)
    }

    /// Unit-z ray direction through a pixel, in the camera frame.
    pub fn ray_direction(&self, pixel: &Point2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= f64::from(self.width) - 1.0 && pixel.y <= f64::from(self.height) - 1.0
    }

    /// Image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }
}

/// Rotation/position error between two poses of the same image.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub position_m: f64,
}

impl PoseError {
    /// Scalar summary used for error CDFs: the worse of the position error
    /// in centimetres and the rotation error in degrees.
    pub fn scalar(&self) -> f64 {
        (self.position_m * 100.0).max(self.rotation_deg)
    }
}

/// Rotation angle and camera-centre distance between two poses.
///
/// Position error is the distance between camera centres, not between
/// translation vectors, so it stays meaningful when rotations differ.
pub fn pose_error(a: &Pose, b: &Pose) -> PoseError {
    let rel = a.rotation * b.rotation.inverse();
    let cos = ((rel.to_rotation_matrix().into_inner().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError { rotation_deg: cos.acos().to_degrees(), position_m: (a.centre() - b.centre()).norm() }
}

/// Similarity transform `p -> scale * R * p + t`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> SimilarityTransform {
        SimilarityTransform { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation.transform_point(&(p * self.scale)) + self.translation
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let scale = 1.0 / self.scale;
        let rotation = self.rotation.inverse();
        SimilarityTransform { scale, rotation, translation: -(rotation.transform_vector(&self.translation) * scale) }
    }

    /// Re-expresses a camera-from-world pose after mapping world coordinates
    /// through this similarity. Projections are preserved: the new pose sees
    /// the transformed world exactly as the old pose saw the original one.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        let rotation = pose.rotation * self.rotation.inverse();
        let translation = self.scale * pose.translation - rotation.transform_vector(&self.translation);
        Pose { rotation, translation }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics { width: 101, height: 101, fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0 }
    }

    #[test]
    fn project_principal_axis_hits_principal_point() {
        let intr = test_intrinsics();
        let px = intr.project(&Point3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px.x, 50.0, epsilon = 1e-12);
        assert_relative_eq!(px.y, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn project_offset_point() {
        let intr = test_intrinsics();
        let px = intr.project(&Point3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px.x, 100.0, epsilon = 1e-12);
        assert_relative_eq!(px.y, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let intr = test_intrinsics();
        assert!(matches!(intr.project(&Point3::new(0.0, 0.0, -1.0)), Err(GeomError::BehindCamera { .. })));
        assert!(matches!(intr.project(&Point3::new(0.0, 0.0, 0.0)), Err(GeomError::BehindCamera { .. })));
    }

    #[test]
    fn backproject_inverts_project() {
        let intr = test_intrinsics();
        let p = intr.backproject(&Point2::new(100.0, 50.0), 2.0);
        assert_relative_eq!(p, Point3::new(1.0, 0.0, 2.0), epsilon = 1e-12);
        let px = intr.project(&p).unwrap();
        assert_relative_eq!(px, Point2::new(100.0, 50.0), epsilon = 1e-12);
    }

    #[test]
    fn pose_error_of_identical_poses_is_zero() {
        let pose = Pose::new(UnitQuaternion::from_euler_angles(0.3, -0.2, 0.9), Vector3::new(1.0, 2.0, 3.0));
        let e = pose_error(&pose, &pose);
        assert!(e.rotation_deg < 1e-9);
        assert!(e.position_m < 1e-12);
    }

    #[test]
    fn pose_error_recovers_known_rotation_angle() {
        let a = Pose::identity();
        let b = Pose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 10f64.to_radians()), Vector3::zeros());
        let e = pose_error(&a, &b);
        assert_relative_eq!(e.rotation_deg, 10.0, epsilon = 1e-9);
        assert!(e.position_m < 1e-12);
    }

    #[test]
    fn pose_error_uses_camera_centres() {
        // Same centre, different translation vectors: position error stays 0.
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.5);
        let centre = Vector3::new(1.0, -2.0, 0.5);
        let a = Pose::new(UnitQuaternion::identity(), -centre);
        let b = Pose::new(r, -(r.transform_vector(&centre)));
        let e = pose_error(&a, &b);
        assert!(e.position_m < 1e-12, "position error {}", e.position_m);
    }

    #[test]
    fn compose_and_inverse_round_trip() {
        let a = Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(0.5, -0.3, 1.0));
        let b = Pose::new(UnitQuaternion::from_euler_angles(-0.4, 0.1, 0.8), Vector3::new(-1.0, 0.2, 0.7));
        let ab = a.compose(&b);
        let p = Point3::new(0.3, 1.2, -0.8);
        assert_relative_eq!(ab.transform_point(&p), a.transform_point(&b.transform_point(&p)), epsilon = 1e-12);
        let id = a.compose(&a.inverse());
        let e = pose_error(&id, &Pose::identity());
        assert!(e.rotation_deg < 1e-9 && e.position_m < 1e-12);
    }

    #[test]
    fn retract_zero_is_identity() {
        let pose = Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(0.5, -0.3, 1.0));
        let same = pose.retract(&Vector6::zeros());
        let e = pose_error(&pose, &same);
        assert!(e.rotation_deg < 1e-12 && e.position_m < 1e-12);
    }

    #[test]
    fn similarity_apply_to_pose_preserves_projection() {
        let intr = test_intrinsics();
        let sim = SimilarityTransform {
            scale: 2.3,
            rotation: UnitQuaternion::from_euler_angles(0.2, -0.1, 0.4),
            translation: Vector3::new(0.4, 1.0, -0.6),
        };
        let pose = Pose::new(UnitQuaternion::from_euler_angles(0.5, 0.1, -0.2), Vector3::new(0.2, 0.1, 2.0));
        let p_world = Point3::new(0.3, -0.2, 1.5);
        let px_before = intr.project(&pose.transform_point(&p_world)).unwrap();
        let mapped_pose = sim.apply_to_pose(&pose);
        let mapped_point = sim.apply(&p_world);
        let px_after = intr.project(&mapped_pose.transform_point(&mapped_point)).unwrap();
        assert_relative_eq!(px_before, px_after, epsilon = 1e-9);
    }

    #[test]
    fn similarity_inverse_round_trips() {
        let sim = SimilarityTransform {
            scale: 0.7,
            rotation: UnitQuaternion::from_euler_angles(1.2, -0.3, 0.4),
            translation: Vector3::new(-2.0, 0.5, 3.0),
        };
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(sim.inverse().apply(&sim.apply(&p)), p, epsilon = 1e-12);
    }
}
