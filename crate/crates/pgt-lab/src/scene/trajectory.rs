//! Camera trajectory synthesis: smooth orbit sweeps through the room.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;

use super::{first_hit, SceneError, SyntheticScene, TrajFrame, Trajectory};
use crate::geom::Pose;

/// Shape of the synthesised camera paths.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryConfig {
    /// Number of independent sweeps through the scene.
    pub scans: u32,
    /// How many of the leading scans form the mapping (train) split.
    pub train_scans: u32,
    pub frames_per_scan: u32,
    /// Upper bound on the camera centre motion between consecutive frames
    /// of one scan, in metres.
    pub max_step: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { scans: 2, train_scans: 1, frames_per_scan: 60, max_step: 0.15 }
    }
}

/// Builds a camera-from-world pose at `centre` looking along `forward` with
/// the world +z axis as "up".
pub fn look_at(centre: &Point3<f64>, forward: &Vector3<f64>) -> Pose {
    let z_c = forward.normalize();
    let x_c = forward.cross(&Vector3::z()).normalize();
    let y_c = z_c.cross(&x_c);
    let rot = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), z_c.transpose()]);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    Pose { rotation, translation: -(rotation * centre.coords) }
}

fn orbit_scan(scene: &SyntheticScene, config: &TrajectoryConfig, scan: u32, rng: &mut impl Rng) -> Vec<TrajFrame> {
    let bounds = scene.bounds();
    let size = bounds.max - bounds.min;
    let room_centre = Point3::from(bounds.min.coords + size * 0.5);
    let min_side = size.x.min(size.y);

    let cx = room_centre.x + rng.gen_range(-0.15..0.15);
    let cy = room_centre.y + rng.gen_range(-0.15..0.15);
    let height = room_centre.z + rng.gen_range(-0.1..0.1);
    let mut rx = 0.24 * min_side * (1.0 + rng.gen_range(-0.15..0.15));
    let mut ry = 0.24 * min_side * (1.0 + rng.gen_range(-0.15..0.15));
    let height_swing = 0.13 * size.z;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let yaw_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let pitch_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let height_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // Keep the inter-frame step inside the configured bound by shrinking the
    // orbit if the sweep is sampled too sparsely.
    let dtheta = std::f64::consts::TAU / f64::from(config.frames_per_scan);
    let limit = 0.9 * config.max_step / dtheta;
    if rx.max(ry) > limit {
        let scale = limit / rx.max(ry);
        rx *= scale;
        ry *= scale;
    }

    let mut frames = Vec::with_capacity(config.frames_per_scan as usize);
    for i in 0..config.frames_per_scan {
        let theta = phase + dtheta * f64::from(i);
        let z = height + height_swing * (theta + height_phase).sin();
        let centre = Point3::new(cx + rx * theta.cos(), cy + ry * theta.sin(), z);
        let azimuth = (centre.y - cy).atan2(centre.x - cx) + 0.35 * (2.0 * theta + yaw_phase).sin();
        // Pitch sweeps three times per orbit so that its down- and up-looking
        // extremes land on three azimuths 120 degrees apart; at least one of
        // them faces across the room, which keeps floor and ceiling covered.
        let elevation = -0.1 + 0.55 * (3.0 * theta + pitch_phase).sin();
        let forward = Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        );
        frames.push(TrajFrame {
            id: Trajectory::frame_id(scan, i),
            scan,
            pose: look_at(&centre, &forward),
        });
    }
    frames
}

/// Checks that a patch is observed by at least a few sample points from at
/// least one of the given frames.
fn patch_covered(scene: &SyntheticScene, patch_index: usize, frames: &[&TrajFrame]) -> bool {
    let patch = &scene.patches[patch_index];
    let grid = 5;
    let mut seen = 0;
    for gi in 0..grid {
        for gj in 0..grid {
            let a = (f64::from(gi) + 0.5) / f64::from(grid);
            let b = (f64::from(gj) + 0.5) / f64::from(grid);
            let point = patch.point_at(a, b);
            let visible = frames.iter().any(|frame| {
                let p_cam = frame.pose.transform_point(&point);
                if p_cam.z <= super::render::NEAR_CLIP || p_cam.z > scene.max_range {
                    return false;
                }
                let Ok(pixel) = scene.intrinsics.project(&p_cam) else { return false };
                if !scene.intrinsics.contains(&pixel) {
                    return false;
                }
                let origin = frame.pose.centre();
                match first_hit(scene, &origin, &(point - origin)) {
                    Some(hit) => hit.t >= 1.0 - 1e-9,
                    None => false,
                }
            });
            if visible {
                seen += 1;
                if seen >= 3 {
                    return true;
                }
            }
        }
    }
    false
}

/// Generates the full multi-scan trajectory.
///
/// Orbits are re-drawn with fresh jitter (up to a retry budget) until every
/// patch is observed by the train split, so downstream mapping never starts
/// from structurally incomplete coverage.
pub fn generate_trajectory(scene: &SyntheticScene, config: &TrajectoryConfig, seed: u64) -> Result<Trajectory, SceneError> {
    if config.scans == 0 || config.frames_per_scan < 2 {
        return Err(SceneError::ConfigInvalid("need at least one scan of two frames".into()));
    }
    if config.train_scans == 0 || config.train_scans > config.scans {
        return Err(SceneError::ConfigInvalid(format!(
            "train_scans {} out of range 1..={}",
            config.train_scans, config.scans
        )));
    }
    if !(config.max_step > 0.0) {
        return Err(SceneError::ConfigInvalid("max_step must be positive".into()));
    }

    let bounds = scene.bounds();
    let min_side = (bounds.max.x - bounds.min.x).min(bounds.max.y - bounds.min.y);
    const ATTEMPTS: u64 = 20;
    let mut uncovered = 0;
    for attempt in 0..ATTEMPTS {
        let mut frames = Vec::new();
        let mut shrunk = false;
        for scan in 0..config.scans {
            let mut rng = crate::rng::substream(seed, "trajectory", attempt * 64 + u64::from(scan));
            let scan_frames = orbit_scan(scene, config, scan, &mut rng);
            let radius = (scan_frames[0].pose.centre().coords
                - scan_frames[config.frames_per_scan as usize / 2].pose.centre().coords)
                .norm()
                * 0.5;
            if radius < 0.08 * min_side {
                shrunk = true;
            }
            frames.extend(scan_frames);
        }
        if shrunk {
            return Err(SceneError::TrajectoryInfeasible(format!(
                "max_step {} forces the orbit below a useful radius; raise it or add frames",
                config.max_step
            )));
        }

        let trajectory = Trajectory { frames, train_scans: config.train_scans };
        for pair in trajectory.frames.windows(2) {
            if pair[0].scan != pair[1].scan {
                continue;
            }
            let step = (pair[0].pose.centre() - pair[1].pose.centre()).norm();
            if step > config.max_step {
                return Err(SceneError::TrajectoryInfeasible(format!(
                    "step {step:.3} m between {} and {} exceeds max_step {}",
                    pair[0].id, pair[1].id, config.max_step
                )));
            }
        }

        let train: Vec<&TrajFrame> = trajectory.train_frames().collect();
        match (0..scene.patches.len()).find(|&pi| !patch_covered(scene, pi, &train)) {
            None => return Ok(trajectory),
            Some(pi) => uncovered = pi,
        }
    }
    Err(SceneError::CoverageFailure { patch: uncovered as u32 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};
    use approx::assert_relative_eq;

    fn default_scene() -> SyntheticScene {
        generate_scene(&SceneConfig::default(), 5).unwrap()
    }

    #[test]
    fn generates_requested_frames_reproducibly() {
        let scene = default_scene();
        let config = TrajectoryConfig::default();
        let a = generate_trajectory(&scene, &config, 5).unwrap();
        let b = generate_trajectory(&scene, &config, 5).unwrap();
        assert_eq!(a.frames.len(), 120);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.id, fb.id);
            assert_eq!(fa.pose.translation, fb.pose.translation);
        }
        let c = generate_trajectory(&scene, &config, 6).unwrap();
        assert_ne!(a.frames[0].pose.translation, c.frames[0].pose.translation);
    }

    #[test]
    fn respects_max_step_within_scans() {
        let scene = default_scene();
        let config = TrajectoryConfig::default();
        let traj = generate_trajectory(&scene, &config, 7).unwrap();
        for pair in traj.frames.windows(2) {
            if pair[0].scan == pair[1].scan {
                let step = (pair[0].pose.centre() - pair[1].pose.centre()).norm();
                assert!(step <= config.max_step, "step {step}");
            }
        }
    }

    #[test]
    fn splits_train_and_test_by_scan() {
        let scene = default_scene();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 9).unwrap();
        assert!(traj.train_frames().all(|f| f.scan == 0));
        assert!(traj.test_frames().all(|f| f.scan == 1));
        assert_eq!(traj.train_frames().count() + traj.test_frames().count(), traj.frames.len());
    }

    #[test]
    fn camera_centres_stay_inside_the_room() {
        let scene = default_scene();
        let bounds = scene.bounds();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 13).unwrap();
        for frame in &traj.frames {
            let c = frame.pose.centre();
            assert!(c.x > bounds.min.x && c.x < bounds.max.x);
            assert!(c.y > bounds.min.y && c.y < bounds.max.y);
            assert!(c.z > bounds.min.z && c.z < bounds.max.z);
        }
    }

    #[test]
    fn train_split_covers_every_patch() {
        let scene = default_scene();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 17).unwrap();
        let train: Vec<&TrajFrame> = traj.train_frames().collect();
        for pi in 0..scene.patches.len() {
            assert!(patch_covered(&scene, pi, &train), "patch {pi} unseen");
        }
    }

    #[test]
    fn camera_up_never_flips() {
        // A y-down camera looking roughly horizontally in a z-up world keeps
        // its y axis pointing below the horizon.
        let scene = default_scene();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 19).unwrap();
        for frame in &traj.frames {
            let y_world = frame.pose.rotation.inverse().transform_vector(&Vector3::y());
            assert!(y_world.z < 0.0, "camera rolled at {}", frame.id);
        }
    }

    #[test]
    fn look_at_points_camera_z_along_forward() {
        let centre = Point3::new(1.0, 2.0, 1.5);
        let forward = Vector3::new(0.6, -0.7, 0.2);
        let pose = look_at(&centre, &forward);
        let z_world = pose.rotation.inverse().transform_vector(&Vector3::z());
        assert_relative_eq!(z_world, forward.normalize(), epsilon = 1e-12);
        assert_relative_eq!(pose.centre(), centre, epsilon = 1e-12);
    }

    #[test]
    fn rejects_infeasible_step_budget() {
        let scene = default_scene();
        let config = TrajectoryConfig { max_step: 1e-4, ..TrajectoryConfig::default() };
        match generate_trajectory(&scene, &config, 3) {
            Err(SceneError::TrajectoryInfeasible(_)) => {}
            other => panic!("expected infeasible trajectory, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_scan_counts() {
        let scene = default_scene();
        let config = TrajectoryConfig { train_scans: 3, ..TrajectoryConfig::default() };
        assert!(matches!(generate_trajectory(&scene, &config, 3), Err(SceneError::ConfigInvalid(_))));
    }
}
