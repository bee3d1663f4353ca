//! Synthetic planar scenes, camera trajectories, and the simulated sensor
//! channels (depth maps and feature observations).
//!
//! Scenes are built entirely from finite planar rectangles, so depth can be
//! rendered by exact ray-plane intersection with no mesh or sampling error.
//! Whatever error a downstream pipeline shows is then attributable to the
//! pipeline itself (or to the injected noise), never to the renderer.

mod render;
mod trajectory;

pub use render::{
    apply_depth_noise, first_hit, render_depth, sample_observations, trace_surface, visible_landmarks, SurfaceHit,
    SurfaceTrace,
};
pub use trajectory::{generate_trajectory, look_at, TrajectoryConfig};

use std::collections::BTreeMap;

use nalgebra::{Point2, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Intrinsics, Pose};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    ConfigInvalid(String),
    #[error("trajectory infeasible: {0}")]
    TrajectoryInfeasible(String),
    #[error("coverage failure: patch {patch} is never observed by a training frame")]
    CoverageFailure { patch: u32 },
}

/// Finite planar rectangle: `origin + a * edge_u + b * edge_v` with
/// `(a, b)` in the unit square. Edges are orthogonal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Patch {
    pub origin: Point3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
}

impl Patch {
    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn area(&self) -> f64 {
        self.edge_u.norm() * self.edge_v.norm()
    }

    pub fn point_at(&self, a: f64, b: f64) -> Point3<f64> {
        self.origin + self.edge_u * a + self.edge_v * b
    }

    pub fn corners(&self) -> [Point3<f64>; 4] {
        [self.point_at(0.0, 0.0), self.point_at(1.0, 0.0), self.point_at(0.0, 1.0), self.point_at(1.0, 1.0)]
    }
}

/// Point feature pinned to a patch.
///
/// `token` models appearance: landmarks on duplicated patches share tokens
/// with their twins, which is what lets simulated matching confuse them.
/// For unique patches the token equals the landmark id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub patch: u32,
    pub a: f64,
    pub b: f64,
    pub position: Point3<f64>,
    pub token: u64,
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Room extent in metres: x, y, and height (z is up).
    pub room: [f64; 3],
    /// Landmarks per square metre of patch surface.
    pub feature_density: f64,
    /// Extra planar patches (tables, panels, dividers) inside the room.
    pub interior_patches: usize,
    /// Pairs of patches with identical feature layout, for repetitive
    /// structure stress tests.
    pub duplicate_patch_pairs: usize,
    pub intrinsics: Intrinsics,
    /// Depth readings beyond this range are invalid.
    pub max_range: f64,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            room: [5.0, 3.2, 2.6],
            feature_density: 9.0,
            interior_patches: 4,
            duplicate_patch_pairs: 0,
            intrinsics: Intrinsics { width: 160, height: 120, fx: 130.0, fy: 130.0, cx: 79.5, cy: 59.5 },
            max_range: 7.0,
        }
    }
}

/// Sensor noise parameters. All-zero sigmas and rates give exact data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Std-dev of isotropic Gaussian noise on feature pixels.
    pub pixel_sigma: f64,
    /// Probability that a feature observation is replaced by a uniform
    /// random in-image position.
    pub outlier_rate: f64,
    /// Depth noise std-dev at zero range, metres.
    pub depth_sigma0: f64,
    /// Quadratic range coefficient: sigma(d) = sigma0 + quad * d^2.
    pub depth_sigma_quad: f64,
    /// Probability that a depth pixel or feature observation is dropped.
    pub drop_rate: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless(seed: u64) -> NoiseModel {
        NoiseModel { pixel_sigma: 0.0, outlier_rate: 0.0, depth_sigma0: 0.0, depth_sigma_quad: 0.0, drop_rate: 0.0, seed }
    }

    pub fn is_noiseless(&self) -> bool {
        self.pixel_sigma == 0.0
            && self.outlier_rate == 0.0
            && self.depth_sigma0 == 0.0
            && self.depth_sigma_quad == 0.0
            && self.drop_rate == 0.0
    }

    pub fn depth_sigma(&self, depth: f64) -> f64 {
        self.depth_sigma0 + self.depth_sigma_quad * depth * depth
    }
}

impl Default for NoiseModel {
    fn default() -> NoiseModel {
        NoiseModel::noiseless(0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub patches: Vec<Patch>,
    pub landmarks: Vec<Landmark>,
    pub intrinsics: Intrinsics,
    pub max_range: f64,
}

impl SyntheticScene {
    /// Bounding box over all patch corners.
    pub fn bounds(&self) -> Aabb {
        let mut min = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for patch in &self.patches {
            for c in patch.corners() {
                for a in 0..3 {
                    min[a] = min[a].min(c[a]);
                    max[a] = max[a].max(c[a]);
                }
            }
        }
        Aabb { min, max }
    }

    pub fn landmark(&self, id: u64) -> Option<&Landmark> {
        self.landmarks.get(id as usize).filter(|l| l.id == id)
    }

    /// Landmark ids sharing each appearance token, for simulated matching.
    pub fn token_table(&self) -> BTreeMap<u64, Vec<u64>> {
        let mut table: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for lm in &self.landmarks {
            table.entry(lm.token).or_default().push(lm.id);
        }
        table
    }
}

/// Single feature detection in one frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    pub landmark_id: u64,
    pub pixel: Point2<f64>,
    /// Whether the pixel was replaced by outlier noise. Kept for audits and
    /// tests only; reference pipelines and localisers must not read it.
    pub(crate) is_outlier: bool,
}

impl Observation {
    pub fn new(landmark_id: u64, pixel: Point2<f64>) -> Observation {
        Observation { landmark_id, pixel, is_outlier: false }
    }

    /// Audit accessor for tests and reports; not for pipeline logic.
    pub fn is_outlier_audit(&self) -> bool {
        self.is_outlier
    }
}

/// Feature observations for a set of frames, keyed by image id.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ObservationSet {
    pub frames: BTreeMap<String, Vec<Observation>>,
}

impl ObservationSet {
    pub fn total(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }
}

/// Per-pixel depth with camera-frame z in metres; 0 marks invalid pixels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new_invalid(width: u32, height: u32) -> DepthMap {
        DepthMap { width, height, data: vec![0.0; (width * height) as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let v = self.data[(y * self.width + x) as usize];
        (v > 0.0 && v.is_finite()).then_some(v)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        self.data[(y * self.width + x) as usize] = depth;
    }

    pub fn invalidate(&mut self, x: u32, y: u32) {
        self.set(x, y, 0.0);
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    /// Iterates valid pixels as `(x, y, depth)` in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(move |(i, v)| (i as u32 % w, i as u32 / w, *v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One posed image of a trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajFrame {
    pub id: String,
    pub scan: u32,
    pub pose: Pose,
}

/// Multi-scan trajectory with a scan-level train/test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<TrajFrame>,
    /// Scans below this index are the training split.
    pub train_scans: u32,
}

impl Trajectory {
    pub fn train_frames(&self) -> impl Iterator<Item = &TrajFrame> {
        self.frames.iter().filter(move |f| f.scan < self.train_scans)
    }

    pub fn test_frames(&self) -> impl Iterator<Item = &TrajFrame> {
        self.frames.iter().filter(move |f| f.scan >= self.train_scans)
    }

    pub fn get(&self, id: &str) -> Option<&TrajFrame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn frame_id(scan: u32, index: u32) -> String {
        format!("scan{scan}-frame{index:04}")
    }
}

/// Builds the patch layout and scatters landmarks over it.
///
/// The room is an axis-aligned box (four walls, floor, ceiling) plus
/// `interior_patches` smaller rectangles near the walls and, optionally,
/// `duplicate_patch_pairs` pairs of panels with identical feature layouts.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene, SceneError> {
    let [w, d, h] = config.room;
    if !(w > 1.0 && d > 1.0 && h > 1.0) {
        return Err(SceneError::ConfigInvalid(format!("room {w} x {d} x {h} is too small")));
    }
    if (config.interior_patches > 0 || config.duplicate_patch_pairs > 0) && !(w >= 2.8 && d >= 2.8 && h >= 2.0) {
        return Err(SceneError::ConfigInvalid(
            "interior or duplicated patches need a room of at least 2.8 x 2.8 x 2.0".into(),
        ));
    }
    if config.feature_density <= 0.0 {
        return Err(SceneError::ConfigInvalid("feature_density must be positive".into()));
    }
    let mut rng = crate::rng::stream(seed, "scene");
    let mut patches = Vec::new();

    // Room shell, normals facing the interior.
    patches.push(Patch { origin: Point3::new(0.0, 0.0, 0.0), edge_u: Vector3::new(w, 0.0, 0.0), edge_v: Vector3::new(0.0, d, 0.0) });
    patches.push(Patch { origin: Point3::new(0.0, 0.0, h), edge_u: Vector3::new(0.0, d, 0.0), edge_v: Vector3::new(w, 0.0, 0.0) });
    patches.push(Patch { origin: Point3::new(0.0, 0.0, 0.0), edge_u: Vector3::new(0.0, d, 0.0), edge_v: Vector3::new(0.0, 0.0, h) });
    patches.push(Patch { origin: Point3::new(w, 0.0, 0.0), edge_u: Vector3::new(0.0, 0.0, h), edge_v: Vector3::new(0.0, d, 0.0) });
    patches.push(Patch { origin: Point3::new(0.0, 0.0, 0.0), edge_u: Vector3::new(0.0, 0.0, h), edge_v: Vector3::new(w, 0.0, 0.0) });
    patches.push(Patch { origin: Point3::new(0.0, d, 0.0), edge_u: Vector3::new(w, 0.0, 0.0), edge_v: Vector3::new(0.0, 0.0, h) });

    // Interior clutter hugging the wall midspans: near-wall keeps the camera
    // path clear, and mid-wall keeps each piece inside the outward gaze of
    // the orbiting camera (corners are its blind spot). Pieces are placed by
    // rejection sampling on their plan-view footprints so nothing stands in
    // front of anything else.
    let mut footprints: Vec<[f64; 4]> = Vec::new();
    let plan_rect = |patch: &Patch| -> [f64; 4] {
        let mut xs = [f64::INFINITY, f64::NEG_INFINITY];
        let mut ys = [f64::INFINITY, f64::NEG_INFINITY];
        for c in patch.corners() {
            xs = [xs[0].min(c.x), xs[1].max(c.x)];
            ys = [ys[0].min(c.y), ys[1].max(c.y)];
        }
        [xs[0], xs[1], ys[0], ys[1]]
    };
    let clear_of = |footprints: &[[f64; 4]], rect: &[f64; 4]| -> bool {
        const GAP: f64 = 0.35;
        footprints.iter().all(|f| {
            rect[1] + GAP <= f[0] || f[1] + GAP <= rect[0] || rect[3] + GAP <= f[2] || f[3] + GAP <= rect[2]
        })
    };
    let place = |rng: &mut rand_chacha::ChaCha8Rng,
                     footprints: &mut Vec<[f64; 4]>,
                     draw: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> Patch|
     -> Option<Patch> {
        for _ in 0..40 {
            let candidate = draw(rng);
            let rect = plan_rect(&candidate);
            if clear_of(footprints, &rect) {
                footprints.push(rect);
                return Some(candidate);
            }
        }
        None
    };
    // Duplicated panel pairs on opposite walls: same size, same layout. They
    // are placed before the clutter so the repetition experiments never lose
    // them to crowding.
    let mut duplicate_of: Vec<Option<u32>> = vec![None; patches.len()];
    for pair in 0..config.duplicate_patch_pairs {
        let lu = rng.gen_range(0.9..1.3);
        let lv = rng.gen_range(0.7..1.0);
        let z0 = rng.gen_range(0.7..1.3);
        // Pairs alternate between the two wall axes so they never compete
        // for the same wall span.
        let (primary, twin) = if pair % 2 == 0 {
            let primary = place(&mut rng, &mut footprints, &mut |rng| {
                let x0 = rng.gen_range((0.1 * w)..(0.9 * w - lu));
                Patch {
                    origin: Point3::new(x0, 0.02, z0),
                    edge_u: Vector3::new(lu, 0.0, 0.0),
                    edge_v: Vector3::new(0.0, 0.0, lv),
                }
            });
            let twin = place(&mut rng, &mut footprints, &mut |rng| {
                let x1 = rng.gen_range((0.1 * w)..(0.9 * w - lu));
                Patch {
                    origin: Point3::new(x1 + lu, d - 0.02, z0),
                    edge_u: Vector3::new(-lu, 0.0, 0.0),
                    edge_v: Vector3::new(0.0, 0.0, lv),
                }
            });
            (primary, twin)
        } else {
            let primary = place(&mut rng, &mut footprints, &mut |rng| {
                let y0 = rng.gen_range((0.1 * d)..(0.9 * d - lu));
                Patch {
                    origin: Point3::new(0.02, y0 + lu, z0),
                    edge_u: Vector3::new(0.0, -lu, 0.0),
                    edge_v: Vector3::new(0.0, 0.0, lv),
                }
            });
            let twin = place(&mut rng, &mut footprints, &mut |rng| {
                let y1 = rng.gen_range((0.1 * d)..(0.9 * d - lu));
                Patch {
                    origin: Point3::new(w - 0.02, y1, z0),
                    edge_u: Vector3::new(0.0, lu, 0.0),
                    edge_v: Vector3::new(0.0, 0.0, lv),
                }
            });
            (primary, twin)
        };
        let (Some(primary), Some(twin)) = (primary, twin) else {
            return Err(SceneError::ConfigInvalid(
                "no room left on the walls for the requested duplicated panel pairs".into(),
            ));
        };
        let primary_id = patches.len() as u32;
        patches.push(primary);
        duplicate_of.push(None);
        patches.push(twin);
        duplicate_of.push(Some(primary_id));
    }

    for i in 0..config.interior_patches {
        let patch = match i % 3 {
            0 => place(&mut rng, &mut footprints, &mut |rng| {
                // Table top near a wall.
                let lu = rng.gen_range(0.9..1.5);
                let lv = rng.gen_range(0.6..0.9);
                let height = rng.gen_range(0.65..0.85);
                let x0 = rng.gen_range((0.2 * w)..(0.8 * w - lu));
                let y0 = if rng.gen_bool(0.5) { 0.25 } else { d - lv - 0.25 };
                Patch {
                    origin: Point3::new(x0, y0, height),
                    edge_u: Vector3::new(lu, 0.0, 0.0),
                    edge_v: Vector3::new(0.0, lv, 0.0),
                }
            }),
            1 => place(&mut rng, &mut footprints, &mut |rng| {
                // Panel mounted just off a wall.
                let lu = rng.gen_range(0.8..1.4);
                let lv = rng.gen_range(0.6..1.0);
                let z0 = rng.gen_range(0.8..1.4);
                let off = rng.gen_range(0.02..0.06);
                if rng.gen_bool(0.5) {
                    let x0 = rng.gen_range((0.2 * w)..(0.8 * w - lu));
                    let y0 = if rng.gen_bool(0.5) { off } else { d - off };
                    Patch {
                        origin: Point3::new(x0, y0, z0),
                        edge_u: Vector3::new(lu, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 0.0, lv),
                    }
                } else {
                    let y0 = rng.gen_range((0.2 * d)..(0.8 * d - lu).max(0.2 * d + 0.1));
                    let x0 = if rng.gen_bool(0.5) { off } else { w - off };
                    Patch {
                        origin: Point3::new(x0, y0, z0),
                        edge_u: Vector3::new(0.0, lu, 0.0),
                        edge_v: Vector3::new(0.0, 0.0, lv),
                    }
                }
            }),
            _ => place(&mut rng, &mut footprints, &mut |rng| {
                // Board leaning against a wall: tilted in yaw, so its normal
                // is off-axis, but it stays flush enough to be observed by
                // the same frames that observe the wall behind it.
                let lu = rng.gen_range(0.8..1.1);
                let lv = rng.gen_range(0.8..1.4);
                let ang: f64 = rng.gen_range(0.1..0.3);
                let z0 = rng.gen_range(0.1..0.4);
                let off = rng.gen_range(0.05..0.15);
                let x0 = rng.gen_range((0.2 * w)..(0.8 * w - lu));
                let (y0, dir) = if rng.gen_bool(0.5) { (off, 1.0) } else { (d - off, -1.0) };
                Patch {
                    origin: Point3::new(x0, y0, z0),
                    edge_u: Vector3::new(lu * ang.cos(), dir * lu * ang.sin(), 0.0),
                    edge_v: Vector3::new(0.0, 0.0, lv),
                }
            }),
        };
        // A piece that cannot be placed without blocking something else is
        // simply skipped; the scene just ends up less cluttered.
        if let Some(patch) = patch {
            patches.push(patch);
            duplicate_of.push(None);
        }
    }

    // Landmarks: uniform in patch coordinates, with a margin so nothing
    // sits exactly on an edge. Twins copy the primary's layout.
    let mut landmarks: Vec<Landmark> = Vec::new();
    let mut primary_layout: BTreeMap<u32, Vec<(f64, f64, u64)>> = BTreeMap::new();
    for (pi, patch) in patches.iter().enumerate() {
        let pi = pi as u32;
        if let Some(primary) = duplicate_of[pi as usize] {
            let layout = primary_layout.get(&primary).expect("primary patch generated first").clone();
            for (a, b, token) in layout {
                let id = landmarks.len() as u64;
                landmarks.push(Landmark { id, patch: pi, a, b, position: patch.point_at(a, b), token });
            }
            continue;
        }
        let count = ((config.feature_density * patch.area()).round() as usize).max(4);
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let a = rng.gen_range(0.03..0.97);
            let b = rng.gen_range(0.03..0.97);
            let id = landmarks.len() as u64;
            landmarks.push(Landmark { id, patch: pi, a, b, position: patch.point_at(a, b), token: id });
            layout.push((a, b, id));
        }
        primary_layout.insert(pi, layout);
    }

    Ok(SyntheticScene { patches, landmarks, intrinsics: config.intrinsics, max_range: config.max_range })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_scene_is_reproducible() {
        let config = SceneConfig::default();
        let a = generate_scene(&config, 5).unwrap();
        let b = generate_scene(&config, 5).unwrap();
        assert_eq!(a.landmarks.len(), b.landmarks.len());
        for (la, lb) in a.landmarks.iter().zip(&b.landmarks) {
            assert_eq!(la.position, lb.position);
        }
        let c = generate_scene(&config, 6).unwrap();
        assert_ne!(a.landmarks[0].position, c.landmarks[0].position);
    }

    #[test]
    fn room_patches_enclose_the_bounds() {
        let scene = generate_scene(&SceneConfig::default(), 1).unwrap();
        let bounds = scene.bounds();
        assert_eq!(bounds.min, Point3::new(0.0, 0.0, 0.0));
        assert_eq!(bounds.max, Point3::new(5.0, 3.2, 2.6));
    }

    #[test]
    fn patch_edges_are_orthogonal() {
        let mut config = SceneConfig::default();
        config.duplicate_patch_pairs = 2;
        let scene = generate_scene(&config, 7).unwrap();
        for patch in &scene.patches {
            assert!(patch.edge_u.dot(&patch.edge_v).abs() < 1e-9);
        }
    }

    #[test]
    fn every_patch_gets_landmarks() {
        let scene = generate_scene(&SceneConfig::default(), 2).unwrap();
        for pi in 0..scene.patches.len() as u32 {
            let n = scene.landmarks.iter().filter(|l| l.patch == pi).count();
            assert!(n >= 4, "patch {pi} has only {n} landmarks");
        }
    }

    #[test]
    fn duplicate_patches_share_layout_and_tokens() {
        let mut config = SceneConfig::default();
        config.duplicate_patch_pairs = 2;
        let scene = generate_scene(&config, 3).unwrap();
        // Patches 6 and up start with the two primary/twin pairs.
        for pair in 0..2u32 {
            let primary = 6 + 2 * pair;
            let twin = primary + 1;
            let primaries: Vec<_> = scene.landmarks.iter().filter(|l| l.patch == primary).collect();
            let twins: Vec<_> = scene.landmarks.iter().filter(|l| l.patch == twin).collect();
            assert_eq!(primaries.len(), twins.len());
            for (p, t) in primaries.iter().zip(&twins) {
                assert_eq!((p.a, p.b), (t.a, t.b));
                assert_eq!(p.token, t.token);
                assert_ne!(p.id, t.id);
                assert_ne!(p.position, t.position);
            }
        }
    }

    #[test]
    fn landmark_positions_lie_on_their_patch() {
        let scene = generate_scene(&SceneConfig::default(), 4).unwrap();
        for lm in &scene.landmarks {
            let patch = &scene.patches[lm.patch as usize];
            let n = patch.normal();
            let dist = n.dot(&(lm.position - patch.origin));
            assert!(dist.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_config() {
        let mut config = SceneConfig::default();
        config.room = [0.5, 3.0, 2.0];
        assert!(matches!(generate_scene(&config, 0), Err(SceneError::ConfigInvalid(_))));
        let mut config = SceneConfig::default();
        config.feature_density = 0.0;
        assert!(matches!(generate_scene(&config, 0), Err(SceneError::ConfigInvalid(_))));
    }
}
