//! Shared helpers for the integration suites.
//!
//! The centrepiece is a generic least-squares minimiser with numerically
//! differentiated Jacobians and random restarts. It is deliberately
//! independent of every solver in the crate (no analytic derivatives, no
//! problem structure) so it can serve as an oracle: a solver under test and
//! the oracle minimise the same residual closure, and must land on the same
//! objective value.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Point3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn objective(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r * r).sum()
}

fn numeric_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let r0 = f(x);
    let m = r0.len();
    let n = x.len();
    let mut j = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    for c in 0..n {
        let h = 1e-6 * (1.0 + x[c].abs());
        xp[c] = x[c] + h;
        let rp = f(&xp);
        xp[c] = x[c] - h;
        let rm = f(&xp);
        xp[c] = x[c];
        for row in 0..m {
            j[(row, c)] = (rp[row] - rm[row]) / (2.0 * h);
        }
    }
    (j, DVector::from_vec(r0))
}

/// Damped least squares on `f` from `x0`. Returns the argmin and the final
/// sum of squared residuals.
pub fn numeric_lm(f: &dyn Fn(&[f64]) -> Vec<f64>, x0: &[f64], max_iters: usize) -> (Vec<f64>, f64) {
    let mut x = x0.to_vec();
    let mut fx = objective(&f(&x));
    let mut lambda = 1e-4;
    for _ in 0..max_iters {
        let (j, r) = numeric_jacobian(f, &x);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        if jtr.amax() < 1e-14 {
            break;
        }
        let mut improved = false;
        for _ in 0..60 {
            let mut h = jtj.clone();
            for i in 0..h.nrows() {
                h[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            if let Some(chol) = h.cholesky() {
                let delta = chol.solve(&(-&jtr));
                let xn: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                let fxn = objective(&f(&xn));
                if fxn.is_finite() && fxn < fx {
                    x = xn;
                    fx = fxn;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    break;
                }
            }
            lambda *= 4.0;
            if lambda > 1e15 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

/// Runs [`numeric_lm`] from `x0` and from `restarts` randomly perturbed
/// starting points, keeping the best final objective.
pub fn numeric_lm_restarts(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    spread: f64,
    restarts: usize,
    seed: u64,
    max_iters: usize,
) -> (Vec<f64>, f64) {
    let mut rng = pgt_lab::rng::stream(seed, "oracle-restarts");
    let mut best = numeric_lm(f, x0, max_iters);
    for _ in 0..restarts {
        let start: Vec<f64> = x0.iter().map(|v| v + rng.gen_range(-spread..spread)).collect();
        let run = numeric_lm(f, &start, max_iters);
        if run.1 < best.1 {
            best = run;
        }
    }
    best
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-1.5..1.5),
    ))
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, half_extent: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
            )
        })
        .collect()
}

/// Rotation parameterised as a full axis-angle vector, used by oracle
/// residual closures so they stay independent of the crate's pose chart.
pub fn rotation_from_params(w: &[f64]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(w[0], w[1], w[2]))
}
