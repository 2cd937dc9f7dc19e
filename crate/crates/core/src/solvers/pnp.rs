//! RANSAC around a six-point direct linear transform, with a final linear
//! refit on the consensus set.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen, Vector2, Vector3, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, PixelGrid, PointMap};
use crate::solvers::ScaledPose;

const MIN_SAMPLE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 1000,
            threshold_px: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    /// Maps pointmap-frame coordinates into the camera frame; scale is 1.
    pub pose: ScaledPose,
    pub inliers: usize,
}

/// Similarity normalization of 3D points: centroid to origin, mean distance √3.
fn normalization(points: &[Vector3<f64>]) -> (Vector3<f64>, f64) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mean_d = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_d > 0.0 { 3f64.sqrt() / mean_d } else { 1.0 };
    (c, s)
}

/// DLT for a 3x4 projection acting on normalized image coordinates, solved
/// as the eigenvector of `A^T A` with the smallest eigenvalue.
fn dlt(points: &[Vector3<f64>], rays: &[Vector2<f64>]) -> Option<ScaledPose> {
    let (c, s) = normalization(points);
    let mut ata = SMatrix::<f64, 12, 12>::zeros();
    for (p, m) in points.iter().zip(rays) {
        let x = (p - c) * s;
        let xh = [x.x, x.y, x.z, 1.0];
        let mut r1 = SVector::<f64, 12>::zeros();
        let mut r2 = SVector::<f64, 12>::zeros();
        for k in 0..4 {
            r1[k] = xh[k];
            r1[8 + k] = -m.x * xh[k];
            r2[4 + k] = xh[k];
            r2[8 + k] = -m.y * xh[k];
        }
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig.eigenvalues.argmin();
    let v = eig.eigenvectors.column(imin);
    let pn = SMatrix::<f64, 3, 4>::from_row_slice(v.as_slice());
    // Undo the point normalization: P = Pn * [sI | -s c].
    let mut m = pn.fixed_view::<3, 3>(0, 0) * s;
    let mut p4 = pn.column(3) - m * c;
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let svd = SVD::new(m, true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let lambda = svd.singular_values.mean();
    if !(lambda > 0.0) || !lambda.is_finite() {
        return None;
    }
    let mut rotation: Matrix3<f64> = u * v_t;
    if rotation.determinant() < 0.0 {
        rotation = -rotation;
    }
    Some(ScaledPose {
        rotation,
        translation: p4 / lambda,
        scale: 1.0,
    })
}

#[inline]
fn reprojection_error(
    pose: &ScaledPose,
    k: &CameraIntrinsics,
    p: &Vector3<f64>,
    px: &Vector2<f64>,
) -> f64 {
    let q = pose.rotation * p + pose.translation;
    match k.project_point(&q) {
        Some(proj) => (proj - px).norm(),
        None => f64::INFINITY,
    }
}

/// Camera pose from 2D-3D correspondences.
pub fn pnp_ransac(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnpResult> {
    if points.len() != pixels.len() {
        return Err(Error::invalid("correspondence lists differ in length"));
    }
    if points.len() < 4 {
        return Err(Error::Degenerate(format!(
            "PnP needs at least 4 correspondences, got {}",
            points.len()
        )));
    }
    let kinv = k.inverse_matrix();
    let rays: Vec<Vector2<f64>> = pixels
        .iter()
        .map(|px| {
            let r = kinv * Vector3::new(px.x, px.y, 1.0);
            Vector2::new(r.x, r.y)
        })
        .collect();
    let sample_size = MIN_SAMPLE.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, ScaledPose)> = None;
    let mut sp = Vec::with_capacity(sample_size);
    let mut sr = Vec::with_capacity(sample_size);
    for _ in 0..cfg.iterations {
        sp.clear();
        sr.clear();
        for idx in sample(&mut rng, points.len(), sample_size).into_iter() {
            sp.push(points[idx]);
            sr.push(rays[idx]);
        }
        let Some(model) = dlt(&sp, &sr) else {
            continue;
        };
        let count = points
            .iter()
            .zip(pixels)
            .filter(|(p, px)| reprojection_error(&model, k, p, px) < cfg.threshold_px)
            .count();
        // Strictly greater: the earliest iteration wins ties.
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, model));
        }
    }
    let (count, model) = best.ok_or_else(|| Error::Degenerate("no PnP hypothesis".into()))?;
    if count < 4 {
        return Err(Error::Degenerate(format!(
            "best PnP hypothesis has only {count} inliers"
        )));
    }
    let (ip, ir): (Vec<_>, Vec<_>) = points
        .iter()
        .zip(pixels)
        .zip(&rays)
        .filter(|((p, px), _)| reprojection_error(&model, k, p, px) < cfg.threshold_px)
        .map(|((p, _), r)| (*p, *r))
        .unzip();
    let refined = if ip.len() >= MIN_SAMPLE {
        dlt(&ip, &ir).unwrap_or(model)
    } else {
        model
    };
    let inliers = points
        .iter()
        .zip(pixels)
        .filter(|(p, px)| reprojection_error(&refined, k, p, px) < cfg.threshold_px)
        .count();
    let (pose, inliers) = if inliers >= count {
        (refined, inliers)
    } else {
        (model, count)
    };
    Ok(PnpResult { pose, inliers })
}

/// PnP-RANSAC over the valid pixels of a pointmap and their image positions.
pub fn pnp_ransac_pose(
    pm: &PointMap,
    pixels: &PixelGrid,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnpResult> {
    if pixels.dims() != pm.dims() {
        return Err(Error::DimensionMismatch {
            expected: pm.dims(),
            got: pixels.dims(),
        });
    }
    let (pts, pxs): (Vec<_>, Vec<_>) = pm
        .points
        .iter()
        .zip(&pixels.data)
        .zip(&pm.valid)
        .filter_map(|((p, px), &v)| v.then_some((*p, *px)))
        .unzip();
    pnp_ransac(&pts, &pxs, k, cfg)
}
