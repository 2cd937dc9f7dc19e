//! Focal length from a self-frame pointmap by iteratively reweighted least
//! squares on the image-plane residuals (Weiszfeld iteration).

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geom::PointMap;

/// Residuals below this value are clamped before inversion.
const RESIDUAL_FLOOR: f64 = 1e-8;
const MIN_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalEstimate {
    pub focal: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Pixel offsets from the principal point and the matching normalized
/// image-plane coordinates `(x/z, y/z)`.
fn correspondences(pm: &PointMap, principal: (f64, f64)) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let mut out = Vec::with_capacity(pm.points.len());
    for j in 0..pm.height {
        for i in 0..pm.width {
            if let Some(p) = pm.get(i, j) {
                if p.z > 0.0 && p.iter().all(|c| c.is_finite()) {
                    out.push((
                        Vector2::new(i as f64 - principal.0, j as f64 - principal.1),
                        Vector2::new(p.x / p.z, p.y / p.z),
                    ));
                }
            }
        }
    }
    out
}

fn weighted_focal(corr: &[(Vector2<f64>, Vector2<f64>)], weights: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((q, u), w) in corr.iter().zip(weights) {
        num += w * q.dot(u);
        den += w * u.norm_squared();
    }
    (den > 0.0).then(|| num / den)
}

/// Ordinary least-squares focal `sum q.u / sum |u|^2`.
pub fn least_squares_focal(pm: &PointMap, principal: (f64, f64)) -> Result<Option<f64>> {
    let corr = correspondences(pm, principal);
    if corr.len() < MIN_POINTS {
        return Err(Error::invalid(format!(
            "focal estimation needs at least {MIN_POINTS} points in front of the camera, got {}",
            corr.len()
        )));
    }
    Ok(weighted_focal(&corr, std::iter::repeat(1.0)))
}

/// Minimizes `sum_p || (i - cx, j - cy) - f (x/z, y/z) ||` over `f`.
///
/// Starts from the least-squares focal and reweights each pixel by its
/// inverse residual until the relative change drops below `tol`.
pub fn weiszfeld_focal(
    pm: &PointMap,
    principal: (f64, f64),
    max_iter: usize,
    tol: f64,
) -> Result<FocalEstimate> {
    let corr = correspondences(pm, principal);
    if corr.len() < MIN_POINTS {
        return Err(Error::invalid(format!(
            "focal estimation needs at least {MIN_POINTS} points in front of the camera, got {}",
            corr.len()
        )));
    }
    let Some(mut f) = weighted_focal(&corr, std::iter::repeat(1.0)) else {
        // Every point lies on the principal ray.
        return Ok(FocalEstimate {
            focal: 0.0,
            iterations: 0,
            converged: false,
        });
    };
    for it in 1..=max_iter {
        let weights = corr
            .iter()
            .map(|(q, u)| 1.0 / (q - u * f).norm().max(RESIDUAL_FLOOR));
        let Some(next) = weighted_focal(&corr, weights) else {
            break;
        };
        let change = (next - f).abs() / f.abs().max(f64::MIN_POSITIVE);
        f = next;
        if change < tol {
            return Ok(FocalEstimate {
                focal: f,
                iterations: it,
                converged: f > 0.0,
            });
        }
    }
    Ok(FocalEstimate {
        focal: f,
        iterations: max_iter,
        converged: false,
    })
}
