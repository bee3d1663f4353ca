//! Closed-form and robust point-set alignment.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;

use super::{GeomError, SimilarityTransform};

/// Ratio below which the second singular value of the cross-covariance is
/// treated as zero, i.e. the points are (numerically) collinear.
const COLLINEAR_RATIO: f64 = 1e-10;

fn validate_pairs(src: &[Point3<f64>], dst: &[Point3<f64>], needed: usize) -> Result<(), GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < needed {
        return Err(GeomError::TooFewPoints { needed, got: src.len() });
    }
    for p in src.iter().chain(dst.iter()) {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(GeomError::NonFinite);
        }
    }
    Ok(())
}

struct Centred {
    src_centred: Vec<Vector3<f64>>,
    dst_centred: Vec<Vector3<f64>>,
    src_mean: Vector3<f64>,
    dst_mean: Vector3<f64>,
}

fn centre(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Centred {
    let n = src.len() as f64;
    let src_mean = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let dst_mean = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    Centred {
        src_centred: src.iter().map(|p| p.coords - src_mean).collect(),
        dst_centred: dst.iter().map(|p| p.coords - dst_mean).collect(),
        src_mean,
        dst_mean,
    }
}

/// Shared core of Kabsch and Umeyama: orientation via SVD of the
/// cross-covariance with a reflection guard, plus the optimal scale.
fn svd_alignment(c: &Centred) -> Result<(Rotation3<f64>, f64), GeomError> {
    let n = c.src_centred.len() as f64;
    let mut cov = Matrix3::zeros();
    for (s, d) in c.src_centred.iter().zip(&c.dst_centred) {
        cov += d * s.transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(GeomError::Degenerate("svd failed"))?;
    let v_t = svd.v_t.ok_or(GeomError::Degenerate("svd failed"))?;
    if svd.singular_values[1] <= svd.singular_values[0] * COLLINEAR_RATIO || svd.singular_values[0] == 0.0 {
        return Err(GeomError::Degenerate("points are collinear"));
    }
    let mut s = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[2] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s) * v_t;
    let src_var = c.src_centred.iter().map(|p| p.norm_squared()).sum::<f64>() / n;
    if src_var == 0.0 {
        return Err(GeomError::Degenerate("source points coincide"));
    }
    let scale = (svd.singular_values.component_mul(&s)).sum() / src_var;
    Ok((Rotation3::from_matrix_unchecked(r), scale))
}

fn alignment_rms(transform: &SimilarityTransform, src: &[Point3<f64>], dst: &[Point3<f64>]) -> f64 {
    let sum: f64 = src.iter().zip(dst).map(|(s, d)| (transform.apply(s) - d).norm_squared()).sum();
    (sum / src.len() as f64).sqrt()
}

/// Least-squares rigid transform mapping `src` onto `dst`.
///
/// Returns the transform (scale fixed at 1) and the RMS residual. Fails for
/// fewer than 3 pairs or a collinear configuration; planar sets are fine.
pub fn kabsch_align(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<(SimilarityTransform, f64), GeomError> {
    validate_pairs(src, dst, 3)?;
    let c = centre(src, dst);
    let (r, _) = svd_alignment(&c)?;
    let rotation = UnitQuaternion::from_rotation_matrix(&r);
    let translation = c.dst_mean - rotation.transform_vector(&c.src_mean);
    let transform = SimilarityTransform { scale: 1.0, rotation, translation };
    let rms = alignment_rms(&transform, src, dst);
    Ok((transform, rms))
}

/// Least-squares similarity transform (closed-form scale) mapping `src` onto
/// `dst`, with the RMS residual.
pub fn umeyama_similarity(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<(SimilarityTransform, f64), GeomError> {
    validate_pairs(src, dst, 3)?;
    let c = centre(src, dst);
    let (r, scale) = svd_alignment(&c)?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeomError::Degenerate("non-positive scale"));
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&r);
    let translation = c.dst_mean - rotation.transform_vector(&(c.src_mean * scale));
    let transform = SimilarityTransform { scale, rotation, translation };
    let rms = alignment_rms(&transform, src, dst);
    Ok((transform, rms))
}

/// Robust similarity alignment as returned by [`robust_similarity_align`].
#[derive(Clone, Debug)]
pub struct RobustAlignment {
    pub transform: SimilarityTransform,
    /// Per-correspondence inlier decision, in the caller's original order.
    pub inliers: Vec<bool>,
    /// RMS residual over the inliers.
    pub inlier_rms: f64,
}

/// RANSAC over 3-point similarity hypotheses with least-squares refits.
///
/// Correspondences are sorted into a canonical order before sampling, so the
/// result does not depend on how the caller happened to order them.
pub fn robust_similarity_align(
    correspondences: &[(Point3<f64>, Point3<f64>)],
    inlier_threshold: f64,
    seed: u64,
) -> Result<RobustAlignment, GeomError> {
    const ITERATIONS: usize = 1024;
    if !(inlier_threshold.is_finite() && inlier_threshold > 0.0) {
        return Err(GeomError::NonFinite);
    }
    let src: Vec<Point3<f64>> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<Point3<f64>> = correspondences.iter().map(|c| c.1).collect();
    validate_pairs(&src, &dst, 3)?;

    // Canonical sampling order: lexicographic by (src, dst) coordinates.
    let key = |i: usize| -> [f64; 6] {
        let (s, d) = &correspondences[i];
        [s.x, s.y, s.z, d.x, d.y, d.z]
    };
    let mut order: Vec<usize> = (0..correspondences.len()).collect();
    order.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b)));

    let mut rng = crate::rng::stream(seed, "robust-similarity-align");
    let n = order.len();
    let threshold2 = inlier_threshold * inlier_threshold;
    let count_inliers = |t: &SimilarityTransform| -> usize {
        correspondences.iter().filter(|(s, d)| (t.apply(s) - d).norm_squared() <= threshold2).count()
    };

    let mut best: Option<(usize, SimilarityTransform)> = None;
    for _ in 0..ITERATIONS {
        let mut pick = [0usize; 3];
        loop {
            for p in pick.iter_mut() {
                *p = rng.gen_range(0..n);
            }
            if pick[0] != pick[1] && pick[0] != pick[2] && pick[1] != pick[2] {
                break;
            }
        }
        let s3: Vec<Point3<f64>> = pick.iter().map(|&i| correspondences[order[i]].0).collect();
        let d3: Vec<Point3<f64>> = pick.iter().map(|&i| correspondences[order[i]].1).collect();
        let Ok((hypothesis, _)) = umeyama_similarity(&s3, &d3) else { continue };
        let count = count_inliers(&hypothesis);
        if count >= 3 && best.as_ref().map_or(true, |(c, _)| count > *c) {
            // Local optimisation: refit on the full consensus set.
            let mut current = (count, hypothesis);
            loop {
                let (s_in, d_in): (Vec<_>, Vec<_>) = correspondences
                    .iter()
                    .filter(|(s, d)| (current.1.apply(s) - d).norm_squared() <= threshold2)
                    .cloned()
                    .unzip();
                let Ok((refit, _)) = umeyama_similarity(&s_in, &d_in) else { break };
                let refit_count = count_inliers(&refit);
                if refit_count > current.0 {
                    current = (refit_count, refit);
                } else {
                    if refit_count == current.0 {
                        current.1 = refit;
                    }
                    break;
                }
            }
            best = Some(current);
        }
    }

    let (count, transform) = best.ok_or(GeomError::RobustAlignFailed { inliers: 0 })?;
    if count < 3 {
        return Err(GeomError::RobustAlignFailed { inliers: count });
    }
    let inliers: Vec<bool> =
        correspondences.iter().map(|(s, d)| (transform.apply(s) - d).norm_squared() <= threshold2).collect();
    let (s_in, d_in): (Vec<_>, Vec<_>) =
        correspondences.iter().zip(&inliers).filter(|(_, &keep)| keep).map(|(c, _)| (c.0, c.1)).unzip();
    let inlier_rms = alignment_rms(&transform, &s_in, &d_in);
    Ok(RobustAlignment { transform, inliers, inlier_rms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = crate::rng::stream(seed, "align-test");
        (0..n).map(|_| Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect()
    }

    fn example_similarity(scale: f64) -> SimilarityTransform {
        SimilarityTransform {
            scale,
            rotation: UnitQuaternion::from_euler_angles(0.4, -0.2, 1.1),
            translation: Vector3::new(0.3, -1.2, 2.0),
        }
    }

    #[test]
    fn kabsch_recovers_exact_rigid_motion() {
        let src = random_points(20, 1);
        let sim = example_similarity(1.0);
        let dst: Vec<_> = src.iter().map(|p| sim.apply(p)).collect();
        let (got, rms) = kabsch_align(&src, &dst).unwrap();
        assert!(rms < 1e-9, "rms {rms}");
        for (s, d) in src.iter().zip(&dst) {
            assert_relative_eq!(got.apply(s), *d, epsilon = 1e-9);
        }
        assert_relative_eq!(got.scale, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kabsch_handles_planar_sets() {
        let mut src = random_points(15, 2);
        for p in src.iter_mut() {
            p.z = 0.0;
        }
        let sim = example_similarity(1.0);
        let dst: Vec<_> = src.iter().map(|p| sim.apply(p)).collect();
        let (_, rms) = kabsch_align(&src, &dst).unwrap();
        assert!(rms < 1e-9);
    }

    #[test]
    fn kabsch_rejects_collinear_points() {
        let src: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 2.0 * i as f64, -i as f64)).collect();
        let dst = src.clone();
        assert!(matches!(kabsch_align(&src, &dst), Err(GeomError::Degenerate(_))));
    }

    #[test]
    fn kabsch_rejects_too_few_points() {
        let p = random_points(2, 3);
        assert!(matches!(kabsch_align(&p, &p), Err(GeomError::TooFewPoints { .. })));
    }

    #[test]
    fn umeyama_recovers_exact_scale() {
        let src = random_points(25, 4);
        let sim = example_similarity(2.0);
        let dst: Vec<_> = src.iter().map(|p| sim.apply(p)).collect();
        let (got, rms) = umeyama_similarity(&src, &dst).unwrap();
        assert!(rms < 1e-9);
        assert_relative_eq!(got.scale, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn robust_align_ignores_outliers() {
        let src = random_points(40, 5);
        let sim = example_similarity(1.4);
        let mut dst: Vec<_> = src.iter().map(|p| sim.apply(p)).collect();
        // Corrupt 30 percent of the correspondences.
        let mut rng = crate::rng::stream(6, "corrupt");
        let mut truth = vec![true; src.len()];
        for i in 0..12 {
            dst[i] += Vector3::new(rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
            truth[i] = false;
        }
        let corrs: Vec<_> = src.iter().cloned().zip(dst.iter().cloned()).collect();
        let got = robust_similarity_align(&corrs, 0.01, 99).unwrap();
        assert_eq!(got.inliers, truth);
        assert_relative_eq!(got.transform.scale, 1.4, epsilon = 1e-6);
        assert!(got.inlier_rms < 1e-9);
    }

    #[test]
    fn robust_align_is_order_invariant() {
        let src = random_points(30, 7);
        let sim = example_similarity(0.8);
        let mut corrs: Vec<_> = src.iter().map(|p| (*p, sim.apply(p))).collect();
        corrs[3].1 += Vector3::new(1.0, 0.0, 0.0);
        corrs[17].1 += Vector3::new(0.0, -1.5, 0.2);
        let a = robust_similarity_align(&corrs, 0.02, 12).unwrap();
        corrs.reverse();
        let b = robust_similarity_align(&corrs, 0.02, 12).unwrap();
        assert_relative_eq!(a.transform.scale, b.transform.scale, epsilon = 1e-6);
        assert_relative_eq!(a.transform.translation, b.transform.translation, epsilon = 1e-6);
        assert!(a.transform.rotation.angle_to(&b.transform.rotation) < 1e-6);
    }

    #[test]
    fn robust_align_fails_without_consensus() {
        // Pure noise on both sides: no 3-point hypothesis should gather
        // enough support at a tight threshold.
        let src = random_points(12, 8);
        let dst = random_points(12, 9);
        let corrs: Vec<_> = src.into_iter().zip(dst).collect();
        assert!(robust_similarity_align(&corrs, 1e-6, 1).is_err());
    }
}
