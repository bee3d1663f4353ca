//! Exact depth rendering, surface tracing, and feature observation sampling.

use nalgebra::{Point2, Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DepthMap, NoiseModel, Observation, ObservationSet, SyntheticScene, Trajectory};
use crate::geom::Pose;

/// Cameras cannot see surfaces closer than this, in metres.
pub const NEAR_CLIP: f64 = 0.01;

/// Ray-surface intersection against the scene's patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub patch: u32,
    /// Patch-local coordinates in the unit square.
    pub a: f64,
    pub b: f64,
    /// Ray parameter: the hit point is `origin + t * dir`.
    pub t: f64,
}

/// First patch hit by the ray `origin + t * dir`, `t > NEAR_CLIP` relative
/// to a unit-z camera direction. Returns the smallest-`t` hit.
pub fn first_hit(scene: &SyntheticScene, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<SurfaceHit> {
    let mut best: Option<SurfaceHit> = None;
    for (pi, patch) in scene.patches.iter().enumerate() {
        let n = patch.edge_u.cross(&patch.edge_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = n.dot(&(patch.origin - origin)) / denom;
        if t <= NEAR_CLIP {
            continue;
        }
        if let Some(hit) = &best {
            if t >= hit.t {
                continue;
            }
        }
        let p = origin + dir * t;
        let rel = p - patch.origin;
        let a = rel.dot(&patch.edge_u) / patch.edge_u.norm_squared();
        let b = rel.dot(&patch.edge_v) / patch.edge_v.norm_squared();
        if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
            best = Some(SurfaceHit { patch: pi as u32, a, b, t });
        }
    }
    best
}

/// Per-pixel exact surface intersections for one camera.
///
/// This is the simulated "image content" channel: it records which physical
/// surface point each pixel observes, independent of any sensor noise. The
/// depth renderer is built on it, and the dense localisers use it as the
/// stand-in for appearance-based (learned or descriptor) association.
#[derive(Clone, Debug)]
pub struct SurfaceTrace {
    pub width: u32,
    pub height: u32,
    pub hits: Vec<Option<SurfaceHit>>,
}

impl SurfaceTrace {
    pub fn get(&self, x: u32, y: u32) -> Option<&SurfaceHit> {
        self.hits[(y * self.width + x) as usize].as_ref()
    }
}

/// Casts one ray per pixel centre from the given camera-from-world pose.
///
/// Hits beyond `scene.max_range` (in camera z) are discarded. Because rays
/// are normalised to unit camera z, the stored `t` equals the camera-frame
/// depth of the hit.
pub fn trace_surface(scene: &SyntheticScene, pose: &Pose) -> SurfaceTrace {
    let intr = &scene.intrinsics;
    let origin = pose.centre();
    let rot_inv = pose.rotation.inverse();
    let mut hits = Vec::with_capacity((intr.width * intr.height) as usize);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let dir_cam = intr.ray_direction(&Point2::new(f64::from(x), f64::from(y)));
            let dir_world = rot_inv.transform_vector(&dir_cam);
            let hit = first_hit(scene, &origin, &dir_world).filter(|h| h.t <= scene.max_range);
            hits.push(hit);
        }
    }
    SurfaceTrace { width: intr.width, height: intr.height, hits }
}

/// Renders a depth map, optionally with sensor noise.
///
/// `frame_index` selects the per-frame noise stream so that rendering order
/// never changes the noise a frame receives.
pub fn render_depth(scene: &SyntheticScene, pose: &Pose, noise: Option<&NoiseModel>, frame_index: u64) -> DepthMap {
    let trace = trace_surface(scene, pose);
    let mut depth = DepthMap::new_invalid(trace.width, trace.height);
    for y in 0..trace.height {
        for x in 0..trace.width {
            if let Some(hit) = trace.get(x, y) {
                depth.set(x, y, hit.t);
            }
        }
    }
    if let Some(noise) = noise {
        apply_depth_noise(&mut depth, noise, frame_index);
    }
    depth
}

/// Adds range-dependent Gaussian noise and pixel dropouts in place.
pub fn apply_depth_noise(depth: &mut DepthMap, noise: &NoiseModel, frame_index: u64) {
    if noise.is_noiseless() {
        return;
    }
    let mut rng = crate::rng::substream(noise.seed, "depth-noise", frame_index);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    for y in 0..depth.height {
        for x in 0..depth.width {
            let Some(d) = depth.get(x, y) else { continue };
            if noise.drop_rate > 0.0 && rng.gen::<f64>() < noise.drop_rate {
                depth.invalidate(x, y);
                continue;
            }
            let sigma = noise.depth_sigma(d);
            let noisy = d + sigma * gauss.sample(&mut rng);
            if noisy > NEAR_CLIP {
                depth.set(x, y, noisy);
            } else {
                depth.invalidate(x, y);
            }
        }
    }
}

/// Landmarks visible from a pose: projected inside the image, in front of
/// the camera, and not occluded by any patch.
pub fn visible_landmarks(scene: &SyntheticScene, pose: &Pose) -> Vec<(u64, Point2<f64>)> {
    let intr = &scene.intrinsics;
    let origin = pose.centre();
    let mut out = Vec::new();
    for lm in &scene.landmarks {
        let p_cam = pose.transform_point(&lm.position);
        if p_cam.z <= NEAR_CLIP || p_cam.z > scene.max_range {
            continue;
        }
        let Ok(pixel) = intr.project(&p_cam) else { continue };
        if !intr.contains(&pixel) {
            continue;
        }
        // Cast the exact ray to the landmark: its own patch sits at t = 1,
        // so any hit meaningfully closer occludes it.
        let dir = lm.position - origin;
        match first_hit(scene, &origin, &dir) {
            Some(hit) if hit.t < 1.0 - 1e-9 => {}
            _ => out.push((lm.id, pixel)),
        }
    }
    out
}

/// Samples feature observations for every frame of a trajectory.
///
/// Per visible landmark: drop with `drop_rate`, perturb the pixel with
/// Gaussian noise, or (with `outlier_rate`) replace it by a uniform random
/// in-image position, recording the audit flag. Observations whose noisy
/// pixel leaves the image are dropped, so consumers can rely on bounds.
pub fn sample_observations(scene: &SyntheticScene, trajectory: &Trajectory, noise: &NoiseModel) -> ObservationSet {
    let intr = &scene.intrinsics;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut set = ObservationSet::default();
    for (fi, frame) in trajectory.frames.iter().enumerate() {
        let mut rng = crate::rng::substream(noise.seed, "observations", fi as u64);
        let mut obs = Vec::new();
        for (landmark_id, pixel) in visible_landmarks(scene, &frame.pose) {
            if noise.drop_rate > 0.0 && rng.gen::<f64>() < noise.drop_rate {
                continue;
            }
            let (pixel, is_outlier) = if noise.outlier_rate > 0.0 && rng.gen::<f64>() < noise.outlier_rate {
                let u = rng.gen_range(0.0..f64::from(intr.width) - 1.0);
                let v = rng.gen_range(0.0..f64::from(intr.height) - 1.0);
                (Point2::new(u, v), true)
            } else if noise.pixel_sigma > 0.0 {
                let du = noise.pixel_sigma * gauss.sample(&mut rng);
                let dv = noise.pixel_sigma * gauss.sample(&mut rng);
                (Point2::new(pixel.x + du, pixel.y + dv), false)
            } else {
                (pixel, false)
            };
            if intr.contains(&pixel) {
                obs.push(Observation { landmark_id, pixel, is_outlier });
            }
        }
        set.frames.insert(frame.id.clone(), obs);
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Intrinsics;
    use crate::scene::{generate_scene, generate_trajectory, Patch, SceneConfig, TrajectoryConfig};
    use approx::assert_relative_eq;

    /// Single fronto-parallel patch at z = 2, camera at the origin looking
    /// straight at it.
    fn wall_scene() -> SyntheticScene {
        SyntheticScene {
            patches: vec![Patch {
                origin: Point3::new(-10.0, -10.0, 2.0),
                edge_u: Vector3::new(20.0, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 20.0, 0.0),
            }],
            landmarks: vec![],
            intrinsics: Intrinsics { width: 32, height: 24, fx: 40.0, fy: 40.0, cx: 15.5, cy: 11.5 },
            max_range: 10.0,
        }
    }

    #[test]
    fn fronto_parallel_wall_renders_constant_depth() {
        let scene = wall_scene();
        let depth = render_depth(&scene, &Pose::identity(), None, 0);
        assert_eq!(depth.valid_count(), (32 * 24) as usize);
        for (_, _, d) in depth.iter_valid() {
            assert_relative_eq!(d, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ray_through_landmark_pixel_hits_landmark_point() {
        let scene = generate_scene(&SceneConfig::default(), 11).unwrap();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 11).unwrap();
        let pose = &traj.frames[10].pose;
        let origin = pose.centre();
        let rot_inv = pose.rotation.inverse();
        let mut checked = 0;
        for (id, pixel) in visible_landmarks(&scene, pose) {
            let lm = scene.landmark(id).unwrap();
            let dir_world = rot_inv.transform_vector(&scene.intrinsics.ray_direction(&pixel));
            let hit = first_hit(&scene, &origin, &dir_world).expect("visible landmark ray must hit");
            assert_eq!(hit.patch, lm.patch);
            // Rays carry unit camera z, so the parameter is the z-depth.
            assert_relative_eq!(hit.t, pose.transform_point(&lm.position).z, epsilon = 1e-9);
            assert_relative_eq!(hit.a, lm.a, epsilon = 1e-9);
            assert_relative_eq!(hit.b, lm.b, epsilon = 1e-9);
            checked += 1;
        }
        assert!(checked > 10, "only {checked} landmarks checked");
    }

    #[test]
    fn occluded_landmarks_are_not_visible() {
        let mut scene = wall_scene();
        // Landmark on the far wall, blocked by a small occluder at z = 1.
        scene.patches.push(Patch {
            origin: Point3::new(-0.5, -0.5, 1.0),
            edge_u: Vector3::new(1.0, 0.0, 0.0),
            edge_v: Vector3::new(0.0, 1.0, 0.0),
        });
        scene.landmarks.push(crate::scene::Landmark {
            id: 0,
            patch: 0,
            a: 0.5,
            b: 0.5,
            position: Point3::new(0.0, 0.0, 2.0),
            token: 0,
        });
        scene.landmarks.push(crate::scene::Landmark {
            id: 1,
            patch: 0,
            a: 0.9,
            b: 0.5,
            position: Point3::new(8.0, 0.0, 2.0),
            token: 1,
        });
        let visible = visible_landmarks(&scene, &Pose::identity());
        let ids: Vec<u64> = visible.iter().map(|(id, _)| *id).collect();
        assert!(!ids.contains(&0), "occluded landmark leaked through");
        // Landmark 1 projects far outside this narrow camera, so nothing
        // else should appear either.
        assert!(ids.is_empty());
    }

    #[test]
    fn unoccluded_landmark_projects_exactly() {
        let mut scene = wall_scene();
        scene.landmarks.push(crate::scene::Landmark {
            id: 0,
            patch: 0,
            a: 0.5,
            b: 0.5,
            position: Point3::new(0.1, -0.2, 2.0),
            token: 0,
        });
        let visible = visible_landmarks(&scene, &Pose::identity());
        assert_eq!(visible.len(), 1);
        let expected = scene.intrinsics.project(&Point3::new(0.1, -0.2, 2.0)).unwrap();
        assert_relative_eq!(visible[0].1, expected, epsilon = 1e-12);
    }

    #[test]
    fn depth_noise_is_seeded_and_reproducible() {
        let scene = wall_scene();
        let noise =
            NoiseModel { pixel_sigma: 0.0, outlier_rate: 0.0, depth_sigma0: 0.01, depth_sigma_quad: 0.0, drop_rate: 0.1, seed: 3 };
        let a = render_depth(&scene, &Pose::identity(), Some(&noise), 7);
        let b = render_depth(&scene, &Pose::identity(), Some(&noise), 7);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = render_depth(&scene, &Pose::identity(), Some(&noise), 8);
        assert_ne!(a.as_slice(), c.as_slice());
        // Dropped fraction should be near the configured rate.
        let dropped = 1.0 - a.valid_count() as f64 / (32.0 * 24.0);
        assert!((dropped - 0.1).abs() < 0.05, "dropped {dropped}");
    }

    #[test]
    fn observations_stay_inside_image_bounds() {
        let scene = generate_scene(&SceneConfig::default(), 21).unwrap();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 21).unwrap();
        let noise = NoiseModel {
            pixel_sigma: 2.0,
            outlier_rate: 0.1,
            depth_sigma0: 0.0,
            depth_sigma_quad: 0.0,
            drop_rate: 0.2,
            seed: 21,
        };
        let obs = sample_observations(&scene, &traj, &noise);
        assert!(obs.total() > 0);
        let intr = &scene.intrinsics;
        for frame_obs in obs.frames.values() {
            for o in frame_obs {
                assert!(intr.contains(&o.pixel));
            }
        }
    }

    #[test]
    fn outlier_rate_flags_roughly_the_right_fraction() {
        let scene = generate_scene(&SceneConfig::default(), 22).unwrap();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 22).unwrap();
        let noise = NoiseModel {
            pixel_sigma: 0.5,
            outlier_rate: 0.2,
            depth_sigma0: 0.0,
            depth_sigma_quad: 0.0,
            drop_rate: 0.0,
            seed: 9,
        };
        let obs = sample_observations(&scene, &traj, &noise);
        let total = obs.total() as f64;
        let outliers = obs.frames.values().flatten().filter(|o| o.is_outlier_audit()).count() as f64;
        let rate = outliers / total;
        assert!((rate - 0.2).abs() < 0.03, "outlier rate {rate}");
    }

    #[test]
    fn noiseless_observations_project_landmarks_exactly() {
        let scene = generate_scene(&SceneConfig::default(), 23).unwrap();
        let traj = generate_trajectory(&scene, &TrajectoryConfig::default(), 23).unwrap();
        let obs = sample_observations(&scene, &traj, &NoiseModel::noiseless(0));
        let frame = &traj.frames[5];
        for o in &obs.frames[&frame.id] {
            let lm = scene.landmark(o.landmark_id).unwrap();
            let expected = scene.intrinsics.project(&frame.pose.transform_point(&lm.position)).unwrap();
            assert_relative_eq!(o.pixel, expected, epsilon = 1e-9);
        }
    }
}
