//! Projective point-to-plane ICP against the fused model, frame-to-model
//! tracking, and coarse scan-to-scan registration.

use nalgebra::{Matrix3, Matrix6, Point3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector6};

use crate::geom::{Intrinsics, Pose, MIN_PROJECT_DEPTH};
use crate::scene::{Aabb, DepthMap};
use crate::spatial::KdTree;

use super::tsdf::{depth_cloud, DepthCloud, ModelView, TsdfVolume};
use super::{SlamConfig, SlamError};

/// One ICP solve: the refined pose plus convergence diagnostics.
pub struct IcpResult {
    pub pose: Pose,
    /// Root-mean-square point-to-plane residual at the returned pose.
    pub rms_residual: f64,
    /// Number of accepted Gauss-Newton steps.
    pub iterations: usize,
    /// (before, after) objective values of each accepted step, measured on
    /// that step's frozen association set.
    pub accepted_steps: Vec<(f64, f64)>,
}

#[derive(Clone)]
struct Correspondence {
    /// Live surface point, camera frame.
    source: Point3<f64>,
    /// Model surface point, world frame.
    target: Point3<f64>,
    /// Model surface normal, world frame, unit length.
    normal: Vector3<f64>,
}

/// Keeps correspondences whose absolute point-to-plane residual is within
/// three times the median residual. Pairs the association gates let through
/// that still straddle a surface boundary sit far above the bulk once the
/// estimate is near the surface, and fall out here at any noise level.
///
/// `floor` guards against over-trimming while the estimate is still moving:
/// planes that disagree with the current pose error carry residuals up to
/// that error, and cutting them would lock the bias in, so the gate never
/// drops below the scale of the last step. The 1e-9 floor keeps exact data
/// from gating on rounding dust.
fn trim_correspondences(corr: Vec<Correspondence>, pose: &Pose, floor: f64) -> Vec<Correspondence> {
    const TRIM_MIN: usize = 20;
    if corr.len() < TRIM_MIN {
        return corr;
    }
    let residuals: Vec<f64> = corr
        .iter()
        .map(|c| c.normal.dot(&(pose.inverse_transform_point(&c.source) - c.target)).abs())
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residual"));
    let gate = (3.0 * sorted[sorted.len() / 2]).max(floor).max(1e-9);
    corr.into_iter()
        .zip(residuals)
        .filter(|&(_, r)| r <= gate)
        .map(|(c, _)| c)
        .collect()
}

/// Live and model surface normals must agree at least this much (cosine).
/// Wide enough to survive the initial rotation error, tight enough to drop
/// pairings across perpendicular surfaces.
const ICP_MIN_NORMAL_DOT: f64 = 0.8;

/// Projective association: each live pixel's backprojection is mapped into
/// the world by the current estimate and reprojected into the model view,
/// pairing with the model surface at the pixel it lands on. Pairs further
/// apart than the gate, or whose surface normals disagree, are dropped.
fn associate(
    cloud: &DepthCloud,
    model: &ModelView,
    estimate: &Pose,
    intr: &Intrinsics,
    gate: f64,
) -> Vec<Correspondence> {
    let mut corr = Vec::new();
    for y in 0..cloud.height {
        for x in 0..cloud.width {
            let Some(source) = cloud.point(x, y) else { continue };
            let Some(n_live) = cloud.normal(x, y) else { continue };
            let world = estimate.inverse_transform_point(source);
            let in_model = model.pose.transform_point(&world);
            if in_model.z <= MIN_PROJECT_DEPTH {
                continue;
            }
            let Ok(pix) = intr.project(&in_model) else { continue };
            let (u, v) = (pix.x.round(), pix.y.round());
            if u < 0.0 || v < 0.0 || u >= f64::from(model.width) || v >= f64::from(model.height) {
                continue;
            }
            let Some((target, normal)) = model.get(u as u32, v as u32) else { continue };
            if (world - target).norm() > gate {
                continue;
            }
            if estimate.rotation.inverse_transform_vector(n_live).dot(normal) < ICP_MIN_NORMAL_DOT {
                continue;
            }
            corr.push(Correspondence { source: *source, target: *target, normal: *normal });
        }
    }
    corr
}

/// Squared point-to-plane objective over a frozen correspondence set.
fn objective(corr: &[Correspondence], pose: &Pose) -> f64 {
    corr.iter()
        .map(|c| {
            let r = c.normal.dot(&(pose.inverse_transform_point(&c.source) - c.target));
            r * r
        })
        .sum()
}

/// Gauss-Newton normal equations of the point-to-plane objective on the pose
/// chart `(exp(w)R, t + dt)`: with `X_w = R^T (x - t)`, the partials are
/// `dX_w/dw_k = R^T ((x - t) x e_k)` and `dX_w/dt_k = -R^T e_k`.
fn normal_equations(corr: &[Correspondence], pose: &Pose) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let rot_t = pose.rotation.inverse();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut sq = 0.0;
    for c in corr {
        let x_minus_t = c.source.coords - pose.translation;
        let r = c.normal.dot(&(rot_t.transform_vector(&x_minus_t) - c.target.coords));
        sq += r * r;
        let mut jac = Vector6::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            jac[k] = c.normal.dot(&rot_t.transform_vector(&x_minus_t.cross(&e)));
            jac[3 + k] = -c.normal.dot(&rot_t.transform_vector(&e));
        }
        h += jac * jac.transpose();
        g += jac * r;
    }
    (h, g, sq)
}

/// Objective and analytic gradient of the point-to-plane cost on a fixed
/// correspondence set: `sum_k (n_k . (P^-1(x_k) - q_k))^2` over the pose
/// chart `(exp(w)R, t + dt)`. Public so the derivatives can be audited
/// against finite differences.
pub fn point_plane_cost(
    sources: &[Point3<f64>],
    targets: &[Point3<f64>],
    normals: &[Vector3<f64>],
    pose: &Pose,
) -> (f64, Vector6<f64>) {
    assert!(sources.len() == targets.len() && targets.len() == normals.len());
    let corr: Vec<Correspondence> = sources
        .iter()
        .zip(targets)
        .zip(normals)
        .map(|((s, t), n)| Correspondence { source: *s, target: *t, normal: *n })
        .collect();
    let (_, g, sq) = normal_equations(&corr, pose);
    (sq, g * 2.0)
}

/// Condition number of the normal matrix; infinite when not positive.
fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Refines `init` so the live depth frame lands on the rendered model
/// surface, minimising the squared point-to-plane distance with projective
/// data association.
///
/// Each outer iteration re-associates, trims residual outliers against
/// three times the median, and takes one Gauss-Newton step with a halving
/// line search on the frozen associations, so the objective never
/// increases across accepted steps.
/// The reported residual is the root mean square over the kept pairs.
/// Under-constrained geometry (fewer than six correspondences, or normal
/// equations with condition number above 1e8, e.g. a single plane filling
/// the view) is reported as degenerate.
pub fn icp_point_plane(
    depth: &DepthMap,
    model: &ModelView,
    init: &Pose,
    intr: &Intrinsics,
    config: &SlamConfig,
) -> Result<IcpResult, SlamError> {
    config.validate()?;
    let cloud = depth_cloud(depth, intr);
    let mut pose = init.clone();
    let mut accepted_steps: Vec<(f64, f64)> = Vec::new();
    let mut iterations = 0;
    // Before the first step the median itself carries the initial pose
    // error, so the plain gate is already wide; the floor starts at zero.
    let mut step_floor = 0.0;

    loop {
        let full = associate(&cloud, model, &pose, intr, config.icp_max_correspondence);
        let trimmed = trim_correspondences(full.clone(), &pose, step_floor);
        if trimmed.len() < 6 {
            return Err(SlamError::IcpDegenerate(format!(
                "{} correspondences (need at least 6)",
                trimmed.len()
            )));
        }
        let (h_t, g_t, before_t) = normal_equations(&trimmed, &pose);
        let cond_t = condition_number(&h_t);
        let trimmed_ok = cond_t.is_finite() && cond_t <= 1e8;
        // Under a large initial motion the trim can strip a systematically
        // displaced plane wholesale; stepping on the full set pulls it back
        // into range. The fallback is only for stepping: if the inlier set
        // still does not constrain the pose once the estimate settles, the
        // leftover rank comes from cross-surface mismatches, and reporting
        // the pose they prefer would hand back a confident lie.
        let (corr, h, g, before) = if trimmed_ok {
            (trimmed, h_t, g_t, before_t)
        } else {
            let (h_f, g_f, before_f) = normal_equations(&full, &pose);
            let cond_f = condition_number(&h_f);
            if !cond_f.is_finite() || cond_f > 1e8 {
                return Err(SlamError::IcpDegenerate(
                    "rank-deficient normal equations (under-constrained geometry)".into(),
                ));
            }
            (full, h_f, g_f, before_f)
        };
        let rms = (before / corr.len() as f64).sqrt();
        if iterations >= config.icp_iterations {
            return finish(trimmed_ok, pose, rms, iterations, accepted_steps);
        }
        let chol = h.cholesky().ok_or_else(|| {
            SlamError::IcpDegenerate("normal equations are not positive definite".into())
        })?;
        let full_step = -chol.solve(&g);

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..10 {
            let candidate = pose.retract(&(full_step * scale));
            let after = objective(&corr, &candidate);
            if after < before {
                accepted = Some((candidate, after));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, after)) = accepted else {
            // No descent on the current associations: converged.
            return finish(trimmed_ok, pose, rms, iterations, accepted_steps);
        };
        accepted_steps.push((before, after));
        pose = next;
        iterations += 1;
        // Rotation entries move residuals by roughly the scene range, so the
        // factor leans generously toward keeping pairs.
        step_floor = 8.0 * (full_step * scale).norm();
        if before - after <= 1e-15 * before {
            let rms = (after / corr.len() as f64).sqrt();
            return finish(trimmed_ok, pose, rms, iterations, accepted_steps);
        }
    }
}

/// Terminal bookkeeping for `icp_point_plane`: convergence only counts when
/// the inlier set constrains all six degrees of freedom on its own.
fn finish(
    trimmed_ok: bool,
    pose: Pose,
    rms: f64,
    iterations: usize,
    accepted_steps: Vec<(f64, f64)>,
) -> Result<IcpResult, SlamError> {
    if trimmed_ok {
        Ok(IcpResult { pose, rms_residual: rms, iterations, accepted_steps })
    } else {
        Err(SlamError::IcpDegenerate(
            "inlier geometry leaves the pose under-constrained".into(),
        ))
    }
}

/// Decimation strides of the tracking pyramid, coarse to fine.
const TRACK_PYRAMID: [u32; 3] = [4, 2, 1];

/// Every k-th pixel of a depth map, preserving pixel-centre geometry.
fn decimate_depth(depth: &DepthMap, k: u32) -> DepthMap {
    let (w, h) = (depth.width / k, depth.height / k);
    let mut out = DepthMap::new_invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = depth.get(x * k, y * k) {
                out.set(x, y, d);
            }
        }
    }
    out
}

/// Intrinsics of a depth map decimated with stride `k`: sample `(kx, ky)`
/// of the input is pixel `(x, y)` of the output.
fn scale_intrinsics(intr: &Intrinsics, k: u32) -> Intrinsics {
    let kf = f64::from(k);
    Intrinsics {
        width: intr.width / k,
        height: intr.height / k,
        fx: intr.fx / kf,
        fy: intr.fy / kf,
        cx: intr.cx / kf,
        cy: intr.cy / kf,
    }
}

/// Frame-to-model tracking output.
pub struct TrackResult {
    /// Camera-from-world pose per frame, in the coordinate frame anchored at
    /// the first camera (whose pose is the identity).
    pub poses: Vec<Pose>,
    /// Frames whose alignment was degenerate; they keep the previous pose
    /// and are excluded from fusion.
    pub flagged: Vec<bool>,
    pub volume: TsdfVolume,
}

/// Tracks a depth sequence frame-to-model: fuse, raycast, align, repeat.
///
/// The first frame pins the coordinate frame. Depth noise perturbs each
/// alignment slightly and the errors compound, so the recovered trajectory
/// drifts from the truth as the sequence grows; nothing here corrects it.
///
/// Alignment starts each frame from a constant-velocity prediction and
/// refines it coarse-to-fine, so the true motion must stay within the
/// capture range of the coarsest level. Sequences that move much faster
/// than that can lock onto repeated structure elsewhere in the room and
/// come back confidently wrong, without a flag.
pub fn track_sequence(
    frames: &[DepthMap],
    intr: &Intrinsics,
    config: &SlamConfig,
) -> Result<TrackResult, SlamError> {
    config.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| SlamError::ConfigInvalid("tracking needs at least one frame".into()))?;

    // Size the volume from the first view: bounds centred on the visible
    // geometry with a generous margin enclose the whole room.
    let cloud = depth_cloud(first, intr);
    let mut centroid = Vector3::zeros();
    let mut count = 0.0;
    for p in cloud.points.iter().flatten() {
        centroid += p.coords;
        count += 1.0;
    }
    if count == 0.0 {
        return Err(SlamError::ConfigInvalid("first frame has no valid depth".into()));
    }
    centroid /= count;
    let mut radius: f64 = 0.0;
    for p in cloud.points.iter().flatten() {
        radius = radius.max((p.coords - centroid).norm());
    }
    let half = Vector3::repeat(radius + 3.0);
    let centre = Point3::from(centroid);
    let bounds = Aabb { min: centre - half, max: centre + half };
    let mut volume = TsdfVolume::new(&bounds, config.voxel_size, config.truncation);

    let mut poses = vec![Pose::identity()];
    let mut flagged = vec![false];
    volume.integrate(first, &poses[0], intr);

    // Coarse-to-fine alignment: at a quarter of the resolution an
    // inter-frame motion of many input pixels is within one pixel, so the
    // coarse levels absorb it and the full level polishes. The model is
    // re-rendered from the current estimate before each level so
    // association always starts in range.
    for frame in &frames[1..] {
        let previous = poses.last().expect("at least one pose").clone();
        // Constant-velocity prediction: replaying the last inter-frame
        // motion leaves only the trajectory's curvature as initial error.
        let prediction = if poses.len() >= 2 {
            let before = &poses[poses.len() - 2];
            previous.compose(&before.inverse()).compose(&previous)
        } else {
            previous.clone()
        };
        let mut aligned = prediction.clone();
        let mut flag = false;
        for (li, &k) in TRACK_PYRAMID.iter().enumerate() {
            let finest = li == TRACK_PYRAMID.len() - 1;
            let (lvl_depth, lvl_intr) = (decimate_depth(frame, k), scale_intrinsics(intr, k));
            let model = volume.raycast(&aligned, &lvl_intr);
            match icp_point_plane(&lvl_depth, &model, &aligned, &lvl_intr, config) {
                Ok(result) => aligned = result.pose,
                // A degenerate coarse level just passes the estimate on;
                // only the full level's verdict flags the frame.
                Err(SlamError::IcpDegenerate(_)) if !finest => {}
                Err(SlamError::IcpDegenerate(_)) => flag = true,
                Err(e) => return Err(e),
            }
        }
        if flag {
            poses.push(previous);
            flagged.push(true);
        } else {
            volume.integrate(frame, &aligned, intr);
            poses.push(aligned);
            flagged.push(false);
        }
    }
    Ok(TrackResult { poses, flagged, volume })
}

/// Registers every scan's surface cloud onto the first scan's frame.
///
/// The returned poses are rigid maps applied with `transform_point`: entry k
/// carries scan k coordinates into scan 0 coordinates, and entry 0 is the
/// identity. Initialisation tries every proper sign assignment of the two
/// principal-axis frames (scans cover the same room, so their covariance
/// frames agree up to axis flips); each hypothesis is refined with
/// point-to-plane ICP against the first cloud and the lowest residual wins.
pub fn register_scans(
    clouds: &[Vec<(Point3<f64>, Vector3<f64>)>],
    config: &SlamConfig,
) -> Result<Vec<Pose>, SlamError> {
    config.validate()?;
    if clouds.is_empty() {
        return Err(SlamError::ConfigInvalid("no scans to register".into()));
    }
    for (i, c) in clouds.iter().enumerate() {
        if c.len() < 100 {
            return Err(SlamError::RegistrationFailed(format!(
                "scan {i} has only {} surface points",
                c.len()
            )));
        }
    }

    let reference = subsample(&clouds[0], 20_000);
    let ref_points: Vec<Point3<f64>> = reference.iter().map(|(p, _)| *p).collect();
    let ref_normals: Vec<Vector3<f64>> = reference.iter().map(|(_, n)| *n).collect();
    let tree = KdTree::build(&ref_points);
    let (ref_centroid, ref_axes) = principal_axes(&ref_points);
    let final_gate = (config.voxel_size * 3.0).max(0.02);

    let mut transforms = vec![Pose::identity()];
    for cloud in &clouds[1..] {
        let moving: Vec<Point3<f64>> = subsample(cloud, 5_000).iter().map(|(p, _)| *p).collect();
        let (mov_centroid, mov_axes) = principal_axes(&moving);

        // Hypotheses are ranked by a coverage score over ALL moving points
        // (capped nearest-neighbour distance), not just the gated inliers:
        // a symmetry-flipped alignment can fit most of a boxy room perfectly
        // while stranding the asymmetric furniture, and the strands must
        // count against it.
        let mut best: Option<(f64, f64, Pose)> = None;
        for signs in 0..4u32 {
            let s = [
                if signs & 1 == 0 { 1.0 } else { -1.0 },
                if signs & 2 == 0 { 1.0 } else { -1.0 },
            ];
            let mut flipped = mov_axes;
            flipped.column_mut(0).scale_mut(s[0]);
            flipped.column_mut(1).scale_mut(s[1]);
            flipped.column_mut(2).scale_mut(s[0] * s[1]);
            let rot = ref_axes * flipped.transpose();
            let rotation =
                UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
            let translation = ref_centroid.coords - rot * mov_centroid.coords;
            let init = Pose::new(rotation, translation);
            if let Some((rms, pose)) =
                refine_hypothesis(&moving, &tree, &ref_points, &ref_normals, &init, final_gate)
            {
                let score = coverage_score(&moving, &tree, &pose);
                if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
                    best = Some((score, rms, pose));
                }
            }
        }
        let (score, rms, pose) = best.ok_or_else(|| {
            SlamError::RegistrationFailed("no principal-axis hypothesis converged".into())
        })?;
        // Two ways registration can be wrong: the gated inliers fit badly
        // (rms), or they fit well while most of the scan hangs in empty
        // space, as when a small shape nestles against one face of a larger
        // one (coverage).
        if rms > config.voxel_size * 1.5 || score > (3.0 * config.voxel_size).powi(2) {
            return Err(SlamError::RegistrationFailed(format!(
                "residual {rms:.4} m, coverage {score:.4} m^2; scans do not share \
                 enough surface"
            )));
        }
        transforms.push(pose);
    }
    Ok(transforms)
}

/// Point-to-plane refinement of one registration hypothesis, forward map
/// `p -> R p + t` with nearest-neighbour association and a shrinking gate;
/// returns (rms, pose) unless correspondences collapse.
fn refine_hypothesis(
    moving: &[Point3<f64>],
    tree: &KdTree,
    ref_points: &[Point3<f64>],
    ref_normals: &[Vector3<f64>],
    init: &Pose,
    final_gate: f64,
) -> Option<(f64, Pose)> {
    let mut pose = init.clone();
    let mut gate = 0.8f64;
    let mut rms = f64::INFINITY;
    for _ in 0..60 {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut sq = 0.0;
        let mut used = 0usize;
        for p in moving {
            let mapped = pose.transform_point(p);
            let (idx, dist) = tree.nearest(&mapped)?;
            if dist > gate {
                continue;
            }
            let n = ref_normals[idx];
            let r = n.dot(&(mapped - ref_points[idx]));
            sq += r * r;
            used += 1;
            // Forward-map chart (exp(w)R, t + dt): d(Rp + t)/dw_k = e_k x Rp.
            let rp = pose.rotation.transform_vector(&p.coords);
            let rxn = rp.cross(&n);
            let mut jac = Vector6::zeros();
            for k in 0..3 {
                jac[k] = rxn[k];
                jac[3 + k] = n[k];
            }
            h += jac * jac.transpose();
            g += jac * r;
        }
        if used < 50 {
            return None;
        }
        rms = (sq / used as f64).sqrt();
        let damped = h + Matrix6::identity() * (1e-9 * h.trace().max(1e-12));
        let step = -(damped.cholesky()?.solve(&g));
        pose = pose.retract(&step);
        gate = (gate * 0.7).max(final_gate);
        if step.norm() < 1e-13 {
            break;
        }
    }
    Some((rms, pose))
}

/// Mean squared capped nearest-neighbour distance over all moving points.
fn coverage_score(moving: &[Point3<f64>], tree: &KdTree, pose: &Pose) -> f64 {
    const CAP: f64 = 0.2;
    let mut total = 0.0;
    for p in moving {
        let d = match tree.nearest(&pose.transform_point(p)) {
            Some((_, dist)) => dist.min(CAP),
            None => CAP,
        };
        total += d * d;
    }
    total / moving.len() as f64
}

/// Deterministic stride subsampling.
fn subsample(cloud: &[(Point3<f64>, Vector3<f64>)], target: usize) -> Vec<(Point3<f64>, Vector3<f64>)> {
    let stride = (cloud.len() / target).max(1);
    cloud.iter().step_by(stride).cloned().collect()
}

/// Centroid plus covariance eigenvector frame (columns sorted by ascending
/// variance, right-handed).
fn principal_axes(points: &[Point3<f64>]) -> (Point3<f64>, Matrix3<f64>) {
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p.coords;
    }
    centroid /= points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).expect("finite variances")
    });
    let mut axes = Matrix3::zeros();
    for (k, &src) in order.iter().enumerate() {
        axes.set_column(k, &eig.eigenvectors.column(src));
    }
    if axes.determinant() < 0.0 {
        let flipped = -axes.column(2).clone_owned();
        axes.set_column(2, &flipped);
    }
    (Point3::from(centroid), axes)
}
