//! Joint pose refinement: Levenberg-Marquardt over all camera poses on a
//! weighted sum of a sparse 3D feature-distance term and a dense
//! point-to-plane term with frozen projective associations.

use nalgebra::{DMatrix, DVector, Point3, SMatrix, Vector3, Vector6};

use crate::geom::{Intrinsics, Pose, MIN_PROJECT_DEPTH};
use crate::scene::DepthMap;

use super::tsdf::{depth_cloud, DepthCloud};
use super::{SlamConfig, SlamError};

/// One matched feature seen in two frames, as camera-local 3D points.
#[derive(Clone, Debug)]
pub struct SparseMatch {
    pub frame_a: usize,
    pub frame_b: usize,
    pub point_a: Point3<f64>,
    pub point_b: Point3<f64>,
}

/// One dense surface pairing: a point of frame i associated with a surface
/// point and normal of frame j, all camera-local.
#[derive(Clone, Debug)]
pub struct GeoAssociation {
    pub frame_i: usize,
    pub frame_j: usize,
    pub point_i: Point3<f64>,
    pub point_j: Point3<f64>,
    pub normal_j: Vector3<f64>,
}

/// Partner frames considered per source frame.
const GEO_PARTNERS: usize = 4;
/// Pixel stride when sampling source points.
const GEO_PIXEL_STRIDE: u32 = 5;
/// Reject pairs further apart than this in space.
const GEO_MAX_POINT_DIST: f64 = 0.15;
/// Reject pairs whose surface normals disagree (cosine threshold).
const GEO_MIN_NORMAL_DOT: f64 = 0.9;
/// Reject pairs with a large out-of-plane offset; keeps points paired with
/// a parallel surface behind or in front of the right one out of the sum.
const GEO_MAX_PLANE_DIST: f64 = 0.04;

/// Noise-adaptive planarity gate. Honest surface pixels deviate from their
/// local tangent plane by roughly the depth noise, while creases and
/// occlusion boundaries deviate by the geometry itself, so three times the
/// frame-wide median separates the two regimes at any noise level. The
/// floor keeps exact synthetic depth from gating on rounding dust.
fn planarity_threshold(cloud: &DepthCloud) -> f64 {
    let mut vals: Vec<f64> = cloud.off_plane.iter().flatten().copied().collect();
    if vals.is_empty() {
        return f64::INFINITY;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite deviation"));
    (3.0 * vals[vals.len() / 2]).max(1e-7)
}

/// Builds dense point-to-plane associations between nearby frame pairs at
/// the given pose estimates.
///
/// Every frame is paired with its closest neighbours by camera centre (which
/// freely crosses scan boundaries), strided source pixels are mapped into
/// the partner frame projectively, and pairs survive distance, normal
/// agreement, and out-of-plane gates. Output order is deterministic.
pub fn build_geo_associations(
    poses: &[Pose],
    depths: &[DepthMap],
    intr: &Intrinsics,
    _config: &SlamConfig,
) -> Vec<GeoAssociation> {
    assert_eq!(poses.len(), depths.len(), "one pose per depth frame");
    let n = poses.len();
    let clouds: Vec<_> = depths.iter().map(|d| depth_cloud(d, intr)).collect();
    let flat_gate: Vec<f64> = clouds.iter().map(planarity_threshold).collect();
    let centres: Vec<Point3<f64>> = poses.iter().map(Pose::centre).collect();

    let mut out = Vec::new();
    for i in 0..n {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        partners.sort_by(|&a, &b| {
            let da = (centres[a] - centres[i]).norm();
            let db = (centres[b] - centres[i]).norm();
            da.partial_cmp(&db).expect("finite distances").then(a.cmp(&b))
        });
        partners.truncate(GEO_PARTNERS);

        for &j in &partners {
            for sy in (GEO_PIXEL_STRIDE / 2..intr.height).step_by(GEO_PIXEL_STRIDE as usize) {
                for sx in (GEO_PIXEL_STRIDE / 2..intr.width).step_by(GEO_PIXEL_STRIDE as usize) {
                    let Some(p_i) = clouds[i].point(sx, sy) else { continue };
                    let Some(n_i) = clouds[i].normal(sx, sy) else { continue };
                    if clouds[i].off_plane(sx, sy).expect("deviation set with normal")
                        > flat_gate[i]
                    {
                        continue;
                    }
                    let x_world = poses[i].inverse_transform_point(p_i);
                    let in_j = poses[j].transform_point(&x_world);
                    if in_j.z <= MIN_PROJECT_DEPTH {
                        continue;
                    }
                    let Ok(pix) = intr.project(&in_j) else { continue };
                    let (u, v) = (pix.x.round(), pix.y.round());
                    if u < 0.0 || v < 0.0 || u >= f64::from(intr.width) || v >= f64::from(intr.height) {
                        continue;
                    }
                    let (u, v) = (u as u32, v as u32);
                    let Some(y_j) = clouds[j].point(u, v) else { continue };
                    let Some(m_j) = clouds[j].normal(u, v) else { continue };
                    if clouds[j].off_plane(u, v).expect("deviation set with normal") > flat_gate[j] {
                        continue;
                    }
                    let y_world = poses[j].inverse_transform_point(y_j);
                    let m_world = poses[j].rotation.inverse_transform_vector(m_j);
                    let n_world = poses[i].rotation.inverse_transform_vector(n_i);
                    let d = x_world - y_world;
                    if d.norm() > GEO_MAX_POINT_DIST
                        || n_world.dot(&m_world) < GEO_MIN_NORMAL_DOT
                        || m_world.dot(&d).abs() > GEO_MAX_PLANE_DIST
                    {
                        continue;
                    }
                    out.push(GeoAssociation {
                        frame_i: i,
                        frame_j: j,
                        point_i: *p_i,
                        point_j: *y_j,
                        normal_j: *m_j,
                    });
                }
            }
        }
    }
    out
}

/// The refinement objective at the given poses, with frozen associations:
/// `w_sprs * sum |X_a - X_b|^2 + w_geo * sum (m . (X_i - Y_j))^2`, all in
/// world coordinates.
pub fn refine_objective(
    poses: &[Pose],
    matches: &[SparseMatch],
    geo: &[GeoAssociation],
    config: &SlamConfig,
) -> f64 {
    let mut obj = 0.0;
    if config.w_sprs > 0.0 {
        for m in matches {
            let a = poses[m.frame_a].inverse_transform_point(&m.point_a);
            let b = poses[m.frame_b].inverse_transform_point(&m.point_b);
            obj += config.w_sprs * (a - b).norm_squared();
        }
    }
    if config.w_geo > 0.0 {
        for gpair in geo {
            let x = poses[gpair.frame_i].inverse_transform_point(&gpair.point_i);
            let y = poses[gpair.frame_j].inverse_transform_point(&gpair.point_j);
            let m = poses[gpair.frame_j].rotation.inverse_transform_vector(&gpair.normal_j);
            let r = m.dot(&(x - y));
            obj += config.w_geo * r * r;
        }
    }
    obj
}

/// Analytic gradient of [`refine_objective`] with respect to the stacked
/// chart parameters of every pose after the first (6 per pose: rotation
/// then translation). Public so the derivatives can be audited against
/// finite differences.
pub fn refine_gradient(
    poses: &[Pose],
    matches: &[SparseMatch],
    geo: &[GeoAssociation],
    config: &SlamConfig,
) -> DVector<f64> {
    let (_, g, _) = accumulate(poses, matches, geo, config);
    g * 2.0
}

/// 3x6 Jacobian of `X_w = R^T (x - t)` on the chart `(exp(w)R, t + dt)`.
fn point_jacobian(pose: &Pose, point: &Point3<f64>) -> SMatrix<f64, 3, 6> {
    let rot_t = pose.rotation.inverse();
    let x_minus_t = point.coords - pose.translation;
    let mut jac = SMatrix::<f64, 3, 6>::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = 1.0;
        jac.set_column(k, &rot_t.transform_vector(&x_minus_t.cross(&e)));
        jac.set_column(3 + k, &(-rot_t.transform_vector(&e)));
    }
    jac
}

/// Accumulates the Gauss-Newton normal equations of [`refine_objective`]
/// over all free poses (every pose but the first, which fixes the gauge).
fn accumulate(
    poses: &[Pose],
    matches: &[SparseMatch],
    geo: &[GeoAssociation],
    config: &SlamConfig,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = poses.len();
    let params = 6 * (n - 1);
    let mut h = DMatrix::<f64>::zeros(params, params);
    let mut g = DVector::<f64>::zeros(params);
    let mut obj = 0.0;
    let offset = |frame: usize| 6 * (frame - 1);

    let add_block = |h: &mut DMatrix<f64>,
                         g: &mut DVector<f64>,
                         frame: usize,
                         jac: &Vector6<f64>,
                         weight: f64,
                         residual: f64,
                         other: Option<(usize, &Vector6<f64>)>| {
        if frame == 0 {
            return;
        }
        let off = offset(frame);
        for a in 0..6 {
            g[off + a] += weight * jac[a] * residual;
            for b in 0..6 {
                h[(off + a, off + b)] += weight * jac[a] * jac[b];
            }
        }
        if let Some((oframe, ojac)) = other {
            if oframe != 0 {
                let ooff = offset(oframe);
                for a in 0..6 {
                    for b in 0..6 {
                        h[(off + a, ooff + b)] += weight * jac[a] * ojac[b];
                    }
                }
            }
        }
    };

    if config.w_sprs > 0.0 {
        for m in matches {
            let ja = point_jacobian(&poses[m.frame_a], &m.point_a);
            let jb = -point_jacobian(&poses[m.frame_b], &m.point_b);
            let d = poses[m.frame_a].inverse_transform_point(&m.point_a)
                - poses[m.frame_b].inverse_transform_point(&m.point_b);
            obj += config.w_sprs * d.norm_squared();
            // Vector residual: treat each spatial component as one scalar row.
            for row in 0..3 {
                let ra: Vector6<f64> = ja.row(row).transpose();
                let rb: Vector6<f64> = jb.row(row).transpose();
                add_block(&mut h, &mut g, m.frame_a, &ra, config.w_sprs, d[row], Some((m.frame_b, &rb)));
                add_block(&mut h, &mut g, m.frame_b, &rb, config.w_sprs, d[row], Some((m.frame_a, &ra)));
            }
        }
    }

    if config.w_geo > 0.0 {
        for gpair in geo {
            let pi = &poses[gpair.frame_i];
            let pj = &poses[gpair.frame_j];
            let x_world = pi.inverse_transform_point(&gpair.point_i);
            let y_world = pj.inverse_transform_point(&gpair.point_j);
            let m_world = pj.rotation.inverse_transform_vector(&gpair.normal_j);
            let d = x_world - y_world;
            let r = m_world.dot(&d);
            obj += config.w_geo * r * r;

            let ji_full = point_jacobian(pi, &gpair.point_i);
            let mut jac_i = Vector6::zeros();
            for c in 0..6 {
                jac_i[c] = m_world.dot(&ji_full.column(c).clone_owned());
            }

            // Pose j moves both the surface point and the normal.
            let rot_tj = pj.rotation.inverse();
            let jj_point = point_jacobian(pj, &gpair.point_j);
            let mut jac_j = Vector6::zeros();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = 1.0;
                let dm = rot_tj.transform_vector(&gpair.normal_j.cross(&e));
                jac_j[k] = dm.dot(&d) - m_world.dot(&jj_point.column(k).clone_owned());
                jac_j[3 + k] = -m_world.dot(&jj_point.column(3 + k).clone_owned());
            }

            add_block(&mut h, &mut g, gpair.frame_i, &jac_i, config.w_geo, r, Some((gpair.frame_j, &jac_j)));
            add_block(&mut h, &mut g, gpair.frame_j, &jac_j, config.w_geo, r, Some((gpair.frame_i, &jac_i)));
        }
    }

    (h, g, obj)
}

/// Jointly refines all poses by Levenberg-Marquardt on the weighted
/// sparse-plus-geometric objective; associations are rebuilt between outer
/// rounds and frozen within each.
///
/// The first pose is held fixed as the gauge. The objective never increases
/// across accepted steps. Zero weights return the input unchanged; a pose
/// that no active residual touches leaves the system singular, which is
/// reported as an error.
pub fn global_refine(
    poses: &[Pose],
    matches: &[SparseMatch],
    depths: &[DepthMap],
    intr: &Intrinsics,
    config: &SlamConfig,
) -> Result<Vec<Pose>, SlamError> {
    config.validate()?;
    if poses.len() != depths.len() {
        return Err(SlamError::ConfigInvalid(format!(
            "{} poses for {} depth frames",
            poses.len(),
            depths.len()
        )));
    }
    if poses.len() <= 1 || (config.w_sprs == 0.0 && config.w_geo == 0.0) {
        return Ok(poses.to_vec());
    }
    for m in matches {
        if m.frame_a >= poses.len() || m.frame_b >= poses.len() || m.frame_a == m.frame_b {
            return Err(SlamError::ConfigInvalid("sparse match references bad frames".into()));
        }
    }

    let mut current = poses.to_vec();
    let mut last_obj: Option<f64> = None;
    for _ in 0..config.refine_iterations {
        let geo = if config.w_geo > 0.0 {
            build_geo_associations(&current, depths, intr, config)
        } else {
            Vec::new()
        };

        let mut touched = vec![false; current.len()];
        touched[0] = true;
        if config.w_sprs > 0.0 {
            for m in matches {
                touched[m.frame_a] = true;
                touched[m.frame_b] = true;
            }
        }
        for gpair in &geo {
            touched[gpair.frame_i] = true;
            touched[gpair.frame_j] = true;
        }
        if let Some(k) = touched.iter().position(|t| !t) {
            return Err(SlamError::RefineSingular(format!(
                "pose {k} is not constrained by any residual"
            )));
        }

        let (next, obj) = lm_minimise(&current, matches, &geo, config)?;
        current = next;
        if let Some(prev) = last_obj {
            if prev - obj <= 1e-12 * prev.max(1e-300) {
                break;
            }
        }
        last_obj = Some(obj);
    }
    Ok(current)
}

/// Levenberg-Marquardt on the frozen objective; returns the refined poses
/// and the final objective value.
fn lm_minimise(
    initial: &[Pose],
    matches: &[SparseMatch],
    geo: &[GeoAssociation],
    config: &SlamConfig,
) -> Result<(Vec<Pose>, f64), SlamError> {
    let n = initial.len();
    let params = 6 * (n - 1);
    let mut poses = initial.to_vec();
    let (mut h, mut g, mut obj) = accumulate(&poses, matches, geo, config);
    let mut lambda = 1e-6;

    for _ in 0..60 {
        // Gradient entries scale with the residuals, so the stopping
        // threshold follows sqrt(obj); at an exact minimum both are
        // floating-point dust and this fires immediately.
        if g.amax() <= 1e-12 * (1.0 + obj.sqrt()) {
            break;
        }
        let mut improved = false;
        for _ in 0..14 {
            let mut damped = h.clone();
            for k in 0..params {
                damped[(k, k)] = h[(k, k)] + lambda * h[(k, k)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -(chol.solve(&g));
            let mut candidate = poses.clone();
            for k in 1..n {
                let d: Vector6<f64> = delta.fixed_rows::<6>(6 * (k - 1)).into_owned();
                candidate[k] = poses[k].retract(&d);
            }
            let cand_obj = refine_objective(&candidate, matches, geo, config);
            if cand_obj < obj {
                let rel = (obj - cand_obj) / obj.max(1e-300);
                poses = candidate;
                obj = cand_obj;
                lambda = (lambda / 3.0).max(1e-12);
                let acc = accumulate(&poses, matches, geo, config);
                h = acc.0;
                g = acc.1;
                improved = true;
                if rel < 1e-15 {
                    return Ok((poses, obj));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No damping level yields descent. At a minimum that is plain
            // convergence; with a gradient well above the evaluation noise
            // floor it means the normal equations never produced a usable
            // step.
            if g.amax() > 1e-6 * (1.0 + obj.sqrt()) {
                return Err(SlamError::RefineSingular(
                    "no descent direction under any damping".into(),
                ));
            }
            break;
        }
    }
    Ok((poses, obj))
}
