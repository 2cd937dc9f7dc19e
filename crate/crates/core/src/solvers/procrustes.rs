//! Closed-form confidence-weighted similarity alignment between two
//! pointmaps of the same pixels.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::error::{Error, Result};
use crate::geom::{ConfidenceMap, PointMap};
use crate::solvers::ScaledPose;

/// Relative singular-value threshold below which the cross-covariance is
/// considered rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Weighted Umeyama fit of `target ≈ s R source + u` over paired points.
/// Returns the similarity in the `sigma (R p + t)` form.
pub fn weighted_similarity(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
) -> Result<ScaledPose> {
    let n = source.len();
    if target.len() != n || weights.len() != n {
        return Err(Error::invalid("procrustes inputs differ in length"));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "procrustes needs at least 3 points, got {n}"
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Degenerate("procrustes weights sum to zero".into()));
    }
    let mut mu_s = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for ((s, t), w) in source.iter().zip(target).zip(weights) {
        mu_s += s * *w;
        mu_t += t * *w;
    }
    mu_s /= wsum;
    mu_t /= wsum;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for ((s, t), w) in source.iter().zip(target).zip(weights) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += (dt * ds.transpose()) * *w;
        var_s += w * ds.norm_squared();
    }
    cov /= wsum;
    var_s /= wsum;

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD of cross-covariance failed".into())),
    };
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= RANK_TOL * sorted[0] || var_s <= 0.0 {
        return Err(Error::Degenerate(
            "points are collinear or coincident; rotation is not determined".into(),
        ));
    }
    // Flip the axis of the smallest singular value when the fit would reflect.
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        let (imin, _) = sv.argmin();
        d[imin] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let trace_ds: f64 = (0..3).map(|i| sv[i] * d[i]).sum();
    let scale = trace_ds / var_s;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("non-positive similarity scale".into()));
    }
    let shift = mu_t - rotation * mu_s * scale;
    Ok(ScaledPose {
        rotation,
        translation: shift / scale,
        scale,
    })
}

/// Scaled relative pose between the two predictions of image 2:
/// `argmin sum sqrt(C22 C21) || sigma (R X22 + t) - X21 ||^2` over the
/// pixels valid in both maps.
pub fn procrustes_pose(
    x22: &PointMap,
    x21: &PointMap,
    c22: &ConfidenceMap,
    c21: &ConfidenceMap,
) -> Result<ScaledPose> {
    if x22.dims() != x21.dims() || c22.dims() != x22.dims() || c21.dims() != x21.dims() {
        return Err(Error::DimensionMismatch {
            expected: x22.dims(),
            got: x21.dims(),
        });
    }
    let n = x22.points.len();
    let mut src = Vec::with_capacity(n);
    let mut dst = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for idx in 0..n {
        if x22.valid[idx] && x21.valid[idx] {
            src.push(x22.points[idx]);
            dst.push(x21.points[idx]);
            w.push((c22.values[idx] * c21.values[idx]).sqrt());
        }
    }
    weighted_similarity(&src, &dst, &w)
}

/// Value of the weighted objective at a given similarity.
pub fn procrustes_objective(
    pose: &ScaledPose,
    x22: &PointMap,
    x21: &PointMap,
    c22: &ConfidenceMap,
    c21: &ConfidenceMap,
) -> f64 {
    let terms: Vec<f64> = (0..x22.points.len())
        .filter(|&i| x22.valid[i] && x21.valid[i])
        .map(|i| {
            let w = (c22.values[i] * c21.values[i]).sqrt();
            w * (pose.apply(&x22.points[i]) - x21.points[i]).norm_squared()
        })
        .collect();
    crate::numeric::pairwise_sum(&terms)
}
