//! Truncated signed distance volume: fusion, sampling, raycasting, and
//! surface extraction.

use nalgebra::{Point2, Point3, Vector3};

use crate::geom::{Intrinsics, Pose, MIN_PROJECT_DEPTH};
use crate::scene::{Aabb, DepthMap};

/// Grid points per brick edge.
const BRICK: u32 = 8;
const BRICK_VOLUME: usize = (BRICK * BRICK * BRICK) as usize;
const NO_BRICK: u32 = u32::MAX;

#[derive(Clone, Copy, Default)]
struct Cell {
    /// Normalised truncated signed distance in [-1, 1].
    f: f64,
    /// Accumulated fusion weight; 0 marks an unobserved grid point.
    w: f64,
}

/// Voxel grid of truncated signed distances with per-voxel fusion weights.
///
/// Values live at grid vertices `origin + index * voxel_size` and are
/// positive in free space. Storage is allocated in 8x8x8 bricks on first
/// write, so the logical grid can be generous without paying for empty
/// space; only the truncation band around observed surfaces materialises.
pub struct TsdfVolume {
    pub origin: Point3<f64>,
    pub voxel_size: f64,
    pub truncation: f64,
    /// Logical grid-point counts per axis.
    pub dims: [u32; 3],
    brick_dims: [u32; 3],
    brick_dir: Vec<u32>,
    bricks: Vec<Box<[Cell; BRICK_VOLUME]>>,
}

/// Dense copy of the observed region, for export and inspection.
pub struct DenseTsdf {
    pub origin: Point3<f64>,
    pub dims: [u32; 3],
    pub voxel_size: f64,
    pub truncation: f64,
    /// Row-major (x fastest), normalised signed distance per grid point.
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
}

/// Rendered view of the implicit surface: per-pixel world-frame surface
/// point and unit normal (oriented toward the camera side).
pub struct ModelView {
    pub width: u32,
    pub height: u32,
    /// Camera-from-world pose the view was rendered from.
    pub pose: Pose,
    pub points: Vec<Option<(Point3<f64>, Vector3<f64>)>>,
}

impl ModelView {
    pub fn get(&self, x: u32, y: u32) -> Option<&(Point3<f64>, Vector3<f64>)> {
        self.points[(y * self.width + x) as usize].as_ref()
    }

    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

/// Per-pixel backprojection of a depth map with local surface normals.
///
/// Points and normals live in the camera frame; normals come from central
/// differences of neighbouring backprojections and point toward the camera,
/// so they are exact wherever the depth map samples a plane. `planar` marks
/// pixels whose neighbourhood is consistent with a single plane to
/// sub-micron tolerance.
pub struct DepthCloud {
    pub width: u32,
    pub height: u32,
    pub points: Vec<Option<Point3<f64>>>,
    pub normals: Vec<Option<Vector3<f64>>>,
    pub planar: Vec<bool>,
    /// Worst absolute out-of-plane deviation across the 4-neighbourhood,
    /// where a normal is defined. Honest surface pixels sit near the sensor
    /// noise floor; creases and occlusion boundaries stand far above it.
    pub off_plane: Vec<Option<f64>>,
}

impl DepthCloud {
    pub fn point(&self, x: u32, y: u32) -> Option<&Point3<f64>> {
        self.points[(y * self.width + x) as usize].as_ref()
    }

    pub fn normal(&self, x: u32, y: u32) -> Option<&Vector3<f64>> {
        self.normals[(y * self.width + x) as usize].as_ref()
    }

    pub fn is_planar(&self, x: u32, y: u32) -> bool {
        self.planar[(y * self.width + x) as usize]
    }

    pub fn off_plane(&self, x: u32, y: u32) -> Option<f64> {
        self.off_plane[(y * self.width + x) as usize]
    }
}

/// Backprojects a depth map and attaches finite-difference normals.
pub fn depth_cloud(depth: &DepthMap, intr: &Intrinsics) -> DepthCloud {
    let (w, h) = (depth.width, depth.height);
    let mut points: Vec<Option<Point3<f64>>> = vec![None; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth.get(x, y) {
                points[(y * w + x) as usize] =
                    Some(intr.backproject(&Point2::new(f64::from(x), f64::from(y)), d));
            }
        }
    }
    let mut normals: Vec<Option<Vector3<f64>>> = vec![None; (w * h) as usize];
    let mut planar = vec![false; (w * h) as usize];
    let mut off_plane: Vec<Option<f64>> = vec![None; (w * h) as usize];
    let at = |x: i64, y: i64| -> Option<Point3<f64>> {
        if x < 0 || y < 0 || x >= i64::from(w) || y >= i64::from(h) {
            return None;
        }
        points[(y * i64::from(w) + x) as usize]
    };
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let Some(centre) = points[idx] else { continue };
            let (xi, yi) = (i64::from(x), i64::from(y));
            let (Some(px), Some(mx), Some(py), Some(my)) =
                (at(xi + 1, yi), at(xi - 1, yi), at(xi, yi + 1), at(xi, yi - 1))
            else {
                continue;
            };
            let mut n = (px - mx).cross(&(py - my));
            if n.norm() < 1e-12 {
                continue;
            }
            n.normalize_mut();
            // Orient toward the camera, which sits at the origin.
            if n.dot(&centre.coords) > 0.0 {
                n = -n;
            }
            normals[idx] = Some(n);
            let worst = [px, mx, py, my]
                .iter()
                .map(|q| n.dot(&(q - centre)).abs())
                .fold(0.0f64, f64::max);
            planar[idx] = worst < 1e-7;
            off_plane[idx] = Some(worst);
        }
    }
    DepthCloud { width: w, height: h, points, normals, planar, off_plane }
}

impl TsdfVolume {
    /// Creates an empty volume whose grid covers `bounds` plus a margin of
    /// one truncation distance on every side.
    pub fn new(bounds: &Aabb, voxel_size: f64, truncation: f64) -> TsdfVolume {
        assert!(
            voxel_size > 0.0 && truncation > voxel_size,
            "truncation must exceed the voxel size"
        );
        let pad = truncation + voxel_size;
        let origin = bounds.min - Vector3::new(pad, pad, pad);
        let extent = bounds.max + Vector3::new(pad, pad, pad) - origin;
        let mut dims = [0u32; 3];
        let mut brick_dims = [0u32; 3];
        for a in 0..3 {
            let n = (extent[a] / voxel_size).ceil() as u32 + 2;
            brick_dims[a] = n.div_ceil(BRICK);
            dims[a] = brick_dims[a] * BRICK;
        }
        let dir_len = brick_dims.iter().map(|&b| b as usize).product();
        TsdfVolume {
            origin,
            voxel_size,
            truncation,
            dims,
            brick_dims,
            brick_dir: vec![NO_BRICK; dir_len],
            bricks: Vec::new(),
        }
    }

    fn dir_index(&self, bx: u32, by: u32, bz: u32) -> usize {
        ((bz * self.brick_dims[1] + by) * self.brick_dims[0] + bx) as usize
    }

    #[inline]
    fn cell(&self, ix: u32, iy: u32, iz: u32) -> Cell {
        let slot = self.brick_dir[self.dir_index(ix / BRICK, iy / BRICK, iz / BRICK)];
        if slot == NO_BRICK {
            return Cell::default();
        }
        let local = ((iz % BRICK) * BRICK + iy % BRICK) * BRICK + ix % BRICK;
        self.bricks[slot as usize][local as usize]
    }

    fn cell_mut(&mut self, ix: u32, iy: u32, iz: u32) -> &mut Cell {
        let dir = self.dir_index(ix / BRICK, iy / BRICK, iz / BRICK);
        if self.brick_dir[dir] == NO_BRICK {
            self.brick_dir[dir] = self.bricks.len() as u32;
            self.bricks.push(Box::new([Cell::default(); BRICK_VOLUME]));
        }
        let slot = self.brick_dir[dir] as usize;
        let local = ((iz % BRICK) * BRICK + iy % BRICK) * BRICK + ix % BRICK;
        &mut self.bricks[slot][local as usize]
    }

    /// Whether the brick containing `p` has been allocated; cheap emptiness
    /// test for space skipping.
    #[inline]
    fn has_brick_at(&self, p: &Point3<f64>) -> bool {
        let g = (p - self.origin) / self.voxel_size;
        if g.x < 0.0 || g.y < 0.0 || g.z < 0.0 {
            return false;
        }
        let (bx, by, bz) = ((g.x as u32) / BRICK, (g.y as u32) / BRICK, (g.z as u32) / BRICK);
        if bx >= self.brick_dims[0] || by >= self.brick_dims[1] || bz >= self.brick_dims[2] {
            return false;
        }
        self.brick_dir[self.dir_index(bx, by, bz)] != NO_BRICK
    }

    /// Number of observed grid points (weight > 0).
    pub fn observed_count(&self) -> usize {
        self.bricks.iter().flat_map(|b| b.iter()).filter(|c| c.w > 0.0).count()
    }

    /// Normalised TSDF value and weight at one grid point.
    pub fn grid_value(&self, ix: u32, iy: u32, iz: u32) -> (f64, f64) {
        let c = self.cell(ix, iy, iz);
        (c.f, c.w)
    }

    /// World position of a grid point.
    pub fn grid_point(&self, ix: u32, iy: u32, iz: u32) -> Point3<f64> {
        self.origin + Vector3::new(f64::from(ix), f64::from(iy), f64::from(iz)) * self.voxel_size
    }

    /// Cell containing `p` with interpolation fractions, if inside the grid.
    fn cell_of(&self, p: &Point3<f64>) -> Option<(u32, u32, u32, f64, f64, f64)> {
        let g = (p - self.origin) / self.voxel_size;
        if g.x < 0.0 || g.y < 0.0 || g.z < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (g.x.floor() as u32, g.y.floor() as u32, g.z.floor() as u32);
        if ix + 1 >= self.dims[0] || iy + 1 >= self.dims[1] || iz + 1 >= self.dims[2] {
            return None;
        }
        Some((ix, iy, iz, g.x - f64::from(ix), g.y - f64::from(iy), g.z - f64::from(iz)))
    }

    /// Trilinear TSDF sample; `None` outside the grid or when any corner of
    /// the enclosing cell is unobserved.
    pub fn sample(&self, p: &Point3<f64>) -> Option<f64> {
        let (ix, iy, iz, fx, fy, fz) = self.cell_of(p)?;
        let mut value = 0.0;
        for dz in 0..2u32 {
            for dy in 0..2u32 {
                for dx in 0..2u32 {
                    let c = self.cell(ix + dx, iy + dy, iz + dz);
                    if c.w <= 0.0 {
                        return None;
                    }
                    let wx = if dx == 1 { fx } else { 1.0 - fx };
                    let wy = if dy == 1 { fy } else { 1.0 - fy };
                    let wz = if dz == 1 { fz } else { 1.0 - fz };
                    value += wx * wy * wz * c.f;
                }
            }
        }
        Some(value)
    }

    /// Gradient of the trilinear interpolant, in field units per metre.
    pub fn gradient(&self, p: &Point3<f64>) -> Option<Vector3<f64>> {
        let (ix, iy, iz, fx, fy, fz) = self.cell_of(p)?;
        let mut corner = [0.0f64; 8];
        for dz in 0..2u32 {
            for dy in 0..2u32 {
                for dx in 0..2u32 {
                    let c = self.cell(ix + dx, iy + dy, iz + dz);
                    if c.w <= 0.0 {
                        return None;
                    }
                    corner[(dz * 4 + dy * 2 + dx) as usize] = c.f;
                }
            }
        }
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let dx = lerp(
            lerp(corner[1] - corner[0], corner[3] - corner[2], fy),
            lerp(corner[5] - corner[4], corner[7] - corner[6], fy),
            fz,
        );
        let dy = lerp(
            lerp(corner[2] - corner[0], corner[3] - corner[1], fx),
            lerp(corner[6] - corner[4], corner[7] - corner[5], fx),
            fz,
        );
        let dz = lerp(
            lerp(corner[4] - corner[0], corner[5] - corner[1], fx),
            lerp(corner[6] - corner[2], corner[7] - corner[3], fx),
            fy,
        );
        Some(Vector3::new(dx, dy, dz) / self.voxel_size)
    }

    /// Fuses one depth frame with unit measurement weight.
    pub fn integrate(&mut self, depth: &DepthMap, pose: &Pose, intr: &Intrinsics) {
        self.integrate_weighted(depth, pose, intr, 1.0);
    }

    /// Fuses one depth frame: every grid point in the truncation band around
    /// the measured surface receives the running weighted-average update
    /// `F <- (W*F + w*f) / (W + w)`, `W <- W + w`.
    ///
    /// The signed distance of a grid point is measured against the local
    /// surface plane of its associated pixel whenever that pixel's
    /// neighbourhood is planar (exact for flat geometry), and along the
    /// camera z axis otherwise; free space is positive.
    pub fn integrate_weighted(&mut self, depth: &DepthMap, pose: &Pose, intr: &Intrinsics, w: f64) {
        assert!(w > 0.0, "measurement weight must be positive");
        assert_eq!(
            (depth.width, depth.height),
            (intr.width, intr.height),
            "depth dims must match intrinsics"
        );
        let cloud = depth_cloud(depth, intr);

        // Pass 1: collect the bricks whose truncation band each pixel ray
        // crosses, then widen by one brick of margin.
        let brick_size = self.voxel_size * f64::from(BRICK);
        let mut touched: Vec<u32> = Vec::new();
        for y in 0..depth.height {
            for x in 0..depth.width {
                let Some(d) = depth.get(x, y) else { continue };
                let dir = intr.ray_direction(&Point2::new(f64::from(x), f64::from(y)));
                // Oblique surfaces stretch the fixed plane-distance band
                // along the viewing ray; widen conservatively.
                let cos = match cloud.normal(x, y) {
                    Some(n) => (n.dot(&dir) / dir.norm()).abs().max(0.25),
                    None => 0.25,
                };
                let half = self.truncation / cos + brick_size;
                let steps = (2.0 * half / (brick_size * 0.5)).ceil() as i32;
                for s in 0..=steps {
                    let z = d - half + f64::from(s) * (brick_size * 0.5);
                    if z <= 0.0 {
                        continue;
                    }
                    let p = pose.inverse_transform_point(&Point3::from(dir * z));
                    let g = (p - self.origin) / brick_size;
                    if g.x < 0.0 || g.y < 0.0 || g.z < 0.0 {
                        continue;
                    }
                    let (bx, by, bz) = (g.x as u32, g.y as u32, g.z as u32);
                    if bx >= self.brick_dims[0] || by >= self.brick_dims[1] || bz >= self.brick_dims[2] {
                        continue;
                    }
                    touched.push(self.dir_index(bx, by, bz) as u32);
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        let mut candidates: Vec<u32> = Vec::with_capacity(touched.len() * 27);
        for &dir_idx in &touched {
            let bx = i64::from(dir_idx % self.brick_dims[0]);
            let by = i64::from((dir_idx / self.brick_dims[0]) % self.brick_dims[1]);
            let bz = i64::from(dir_idx / (self.brick_dims[0] * self.brick_dims[1]));
            for nz in (bz - 1).max(0)..=(bz + 1).min(i64::from(self.brick_dims[2]) - 1) {
                for ny in (by - 1).max(0)..=(by + 1).min(i64::from(self.brick_dims[1]) - 1) {
                    for nx in (bx - 1).max(0)..=(bx + 1).min(i64::from(self.brick_dims[0]) - 1) {
                        candidates.push(self.dir_index(nx as u32, ny as u32, nz as u32) as u32);
                    }
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();

        // Pass 2: per candidate grid point, project into the frame and apply
        // the weighted-average update inside the truncation band.
        for dir_idx in candidates {
            let bx = dir_idx % self.brick_dims[0];
            let by = (dir_idx / self.brick_dims[0]) % self.brick_dims[1];
            let bz = dir_idx / (self.brick_dims[0] * self.brick_dims[1]);
            for lz in 0..BRICK {
                for ly in 0..BRICK {
                    for lx in 0..BRICK {
                        let (ix, iy, iz) = (bx * BRICK + lx, by * BRICK + ly, bz * BRICK + lz);
                        let p_cam = pose.transform_point(&self.grid_point(ix, iy, iz));
                        if p_cam.z <= MIN_PROJECT_DEPTH {
                            continue;
                        }
                        let Ok(pixel) = intr.project(&p_cam) else { continue };
                        let (px, py) = (pixel.x.round(), pixel.y.round());
                        if px < 0.0
                            || py < 0.0
                            || px >= f64::from(intr.width)
                            || py >= f64::from(intr.height)
                        {
                            continue;
                        }
                        let (px, py) = (px as u32, py as u32);
                        let Some(surface) = cloud.point(px, py) else { continue };
                        let sdf = if cloud.is_planar(px, py) {
                            let n = cloud.normal(px, py).expect("planar pixels carry normals");
                            n.dot(&(p_cam - surface))
                        } else {
                            surface.z - p_cam.z
                        };
                        if sdf.abs() > self.truncation {
                            continue;
                        }
                        let f = sdf / self.truncation;
                        let cell = self.cell_mut(ix, iy, iz);
                        cell.f = (cell.w * cell.f + w * f) / (cell.w + w);
                        cell.w += w;
                    }
                }
            }
        }
    }

    /// Renders the implicit surface from a camera pose: per pixel, the first
    /// positive-to-negative zero crossing along the ray, located by linear
    /// interpolation between the bracketing samples; misses stay invalid.
    pub fn raycast(&self, pose: &Pose, intr: &Intrinsics) -> ModelView {
        let origin = pose.centre();
        let rot_inv = pose.rotation.inverse();
        let coarse = self.truncation * 0.4;
        let t_max = self.ray_exit_bound(&origin);
        let mut points = Vec::with_capacity((intr.width * intr.height) as usize);
        for y in 0..intr.height {
            for x in 0..intr.width {
                let dir_cam = intr.ray_direction(&Point2::new(f64::from(x), f64::from(y)));
                let dir = rot_inv.transform_vector(&dir_cam).normalize();
                points.push(self.cast_ray(&origin, &dir, coarse, t_max));
            }
        }
        ModelView { width: intr.width, height: intr.height, pose: pose.clone(), points }
    }

    /// Upper bound on the ray parameter: distance to the farthest grid corner.
    fn ray_exit_bound(&self, origin: &Point3<f64>) -> f64 {
        let far = self.origin
            + Vector3::new(
                f64::from(self.dims[0]),
                f64::from(self.dims[1]),
                f64::from(self.dims[2]),
            ) * self.voxel_size;
        let mut bound = 0.0f64;
        for corner in 0..8 {
            let c = Point3::new(
                if corner & 1 == 0 { self.origin.x } else { far.x },
                if corner & 2 == 0 { self.origin.y } else { far.y },
                if corner & 4 == 0 { self.origin.z } else { far.z },
            );
            bound = bound.max((c - origin).norm());
        }
        bound
    }

    fn cast_ray(
        &self,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        coarse: f64,
        t_max: f64,
    ) -> Option<(Point3<f64>, Vector3<f64>)> {
        let mut prev: Option<(f64, f64)> = None;
        let mut t = 0.05;
        while t <= t_max {
            let p = origin + dir * t;
            // Cheap occupancy test before the full trilinear fetch.
            if !self.has_brick_at(&p) {
                prev = None;
                t += coarse;
                continue;
            }
            match self.sample(&p) {
                None => {
                    prev = None;
                    t += coarse;
                }
                Some(f) => {
                    if let Some((tp, fp)) = prev {
                        if fp > 0.0 && f <= 0.0 {
                            return self.refine_crossing(origin, dir, tp, fp, t, f);
                        }
                    }
                    prev = Some((t, f));
                    // March at voxel resolution once inside the band.
                    t += if f.abs() < 0.8 { self.voxel_size } else { coarse };
                }
            }
        }
        None
    }

    fn refine_crossing(
        &self,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        mut t_pos: f64,
        mut f_pos: f64,
        mut t_neg: f64,
        mut f_neg: f64,
    ) -> Option<(Point3<f64>, Vector3<f64>)> {
        // Secant steps; the field is affine along the ray for flat geometry,
        // so the first step already lands on the surface there.
        let mut t_star = t_pos;
        for _ in 0..8 {
            t_star = t_pos + (t_neg - t_pos) * f_pos / (f_pos - f_neg);
            let f = self.sample(&(origin + dir * t_star))?;
            if f.abs() < 1e-13 {
                break;
            }
            if f > 0.0 {
                t_pos = t_star;
                f_pos = f;
            } else {
                t_neg = t_star;
                f_neg = f;
            }
        }
        let p = origin + dir * t_star;
        let grad = self.gradient(&p)?;
        if grad.norm() < 1e-12 {
            return None;
        }
        // The field is positive on the free-space side, so its gradient
        // points off the surface toward the camera.
        Some((p, grad.normalize()))
    }

    /// Extracts surface samples at zero crossings along grid edges, with
    /// gradient normals, in deterministic grid order.
    pub fn extract_points(&self) -> Vec<(Point3<f64>, Vector3<f64>)> {
        let mut order: Vec<(u32, u32, u32)> = Vec::new();
        for (dir_idx, slot) in self.brick_dir.iter().enumerate() {
            if *slot == NO_BRICK {
                continue;
            }
            let dir_idx = dir_idx as u32;
            order.push((
                dir_idx % self.brick_dims[0],
                (dir_idx / self.brick_dims[0]) % self.brick_dims[1],
                dir_idx / (self.brick_dims[0] * self.brick_dims[1]),
            ));
        }
        order.sort_unstable_by_key(|&(bx, by, bz)| (bz, by, bx));
        let mut out = Vec::new();
        for (bx, by, bz) in order {
            for lz in 0..BRICK {
                for ly in 0..BRICK {
                    for lx in 0..BRICK {
                        let (ix, iy, iz) = (bx * BRICK + lx, by * BRICK + ly, bz * BRICK + lz);
                        let c = self.cell(ix, iy, iz);
                        if c.w <= 0.0 {
                            continue;
                        }
                        for (axis, (nx, ny, nz)) in
                            [(ix + 1, iy, iz), (ix, iy + 1, iz), (ix, iy, iz + 1)]
                                .into_iter()
                                .enumerate()
                        {
                            if nx >= self.dims[0] || ny >= self.dims[1] || nz >= self.dims[2] {
                                continue;
                            }
                            let n = self.cell(nx, ny, nz);
                            if n.w <= 0.0 || !(c.f > 0.0 && n.f <= 0.0) {
                                continue;
                            }
                            let t = c.f / (c.f - n.f);
                            if !t.is_finite() || !(0.0..=1.0).contains(&t) {
                                continue;
                            }
                            let mut p = self.grid_point(ix, iy, iz);
                            p[axis] += t * self.voxel_size;
                            if let Some(grad) = self.gradient(&p) {
                                if grad.norm() > 1e-12 {
                                    out.push((p, grad.normalize()));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Dense snapshot of the allocated region, or `None` for an empty volume.
    pub fn dense_snapshot(&self) -> Option<DenseTsdf> {
        let mut min = [u32::MAX; 3];
        let mut max = [0u32; 3];
        for (dir_idx, slot) in self.brick_dir.iter().enumerate() {
            if *slot == NO_BRICK {
                continue;
            }
            let dir_idx = dir_idx as u32;
            let b = [
                dir_idx % self.brick_dims[0],
                (dir_idx / self.brick_dims[0]) % self.brick_dims[1],
                dir_idx / (self.brick_dims[0] * self.brick_dims[1]),
            ];
            for a in 0..3 {
                min[a] = min[a].min(b[a] * BRICK);
                max[a] = max[a].max((b[a] + 1) * BRICK);
            }
        }
        if min[0] == u32::MAX {
            return None;
        }
        let dims = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        let len = dims.iter().map(|&d| d as usize).product();
        let mut tsdf = vec![0.0f32; len];
        let mut weight = vec![0.0f32; len];
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let c = self.cell(min[0] + ix, min[1] + iy, min[2] + iz);
                    let idx = ((iz * dims[1] + iy) * dims[0] + ix) as usize;
                    tsdf[idx] = c.f as f32;
                    weight[idx] = c.w as f32;
                }
            }
        }
        Some(DenseTsdf {
            origin: self.grid_point(min[0], min[1], min[2]),
            dims,
            voxel_size: self.voxel_size,
            truncation: self.truncation,
            tsdf,
            weight,
        })
    }
}
