//! Scale-invariant pointmap regression with confidence weighting.
//!
//! Each pointmap is divided by the mean norm of its frame's valid points
//! before comparison, so the loss ignores global scene scale. Confidences
//! `C >= 1` weight the per-pixel error and pay `alpha * log C`.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{ConfidenceMap, PointMap};
use crate::numeric::pairwise_sum;
use crate::prediction::PairPrediction;

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Divide each pointmap term by its valid-pixel count instead of summing.
    pub mean_reduce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            mean_reduce: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Mean Euclidean norm over the union of valid points of `maps`.
pub fn znorm(maps: &[&PointMap]) -> Result<f64> {
    let norms: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.valid_points().map(|p| p.norm()))
        .collect();
    if norms.is_empty() {
        return Err(Error::invalid("scale normalizer needs at least one valid point"));
    }
    Ok(pairwise_sum(&norms) / norms.len() as f64)
}

/// [`znorm`] restricted to pixels flagged in an external mask (used to
/// normalize dense predictions on the ground-truth valid set).
pub fn znorm_masked(maps: &[(&PointMap, &[bool])]) -> Result<f64> {
    let mut norms = Vec::new();
    for (m, mask) in maps {
        if mask.len() != m.points.len() {
            return Err(Error::invalid("mask does not match pointmap"));
        }
        norms.extend(
            m.points
                .iter()
                .zip(mask.iter())
                .filter_map(|(p, &v)| v.then(|| p.norm())),
        );
    }
    if norms.is_empty() {
        return Err(Error::invalid("scale normalizer needs at least one valid point"));
    }
    Ok(pairwise_sum(&norms) / norms.len() as f64)
}

/// Per-pixel regression error, defined on the ground-truth valid set.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub width: usize,
    pub height: usize,
    /// Zero outside the valid set.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// `|| X / z - Xgt / zgt ||` at every ground-truth valid pixel.
pub fn regression_loss(pred: &PointMap, gt: &PointMap, z_pred: f64, z_gt: f64) -> Result<Residuals> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            got: pred.dims(),
        });
    }
    if !(z_pred > 0.0 && z_gt > 0.0 && z_pred.is_finite() && z_gt.is_finite()) {
        return Err(Error::invalid(format!(
            "normalizers must be positive, got {z_pred} and {z_gt}"
        )));
    }
    let values = pred
        .points
        .iter()
        .zip(&gt.points)
        .zip(&gt.valid)
        .map(|((p, g), &v)| if v { (p / z_pred - g / z_gt).norm() } else { 0.0 })
        .collect();
    Ok(Residuals {
        width: gt.width,
        height: gt.height,
        values,
        valid: gt.valid.clone(),
    })
}

/// `sum_{valid} C * lreg - alpha * log C`.
pub fn confidence_loss(lreg: &Residuals, conf: &ConfidenceMap, alpha: f64) -> f64 {
    let terms: Vec<f64> = lreg
        .values
        .iter()
        .zip(&lreg.valid)
        .zip(&conf.values)
        .filter_map(|((l, &v), c)| v.then(|| c * l - alpha * c.ln()))
        .collect();
    pairwise_sum(&terms)
}

/// Minimizer over `C >= 1` of `C * lreg - alpha * log C`.
pub fn optimal_confidence(lreg: f64, alpha: f64) -> f64 {
    if lreg <= 0.0 {
        return f64::INFINITY;
    }
    (alpha / lreg).max(1.0)
}

/// Gradients of the total loss with respect to predicted points and confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub x11: Vec<Vector3<f64>>,
    pub x21: Vec<Vector3<f64>>,
    pub x22: Vec<Vector3<f64>>,
    pub c11: Vec<f64>,
    pub c21: Vec<f64>,
    pub c22: Vec<f64>,
}

struct Term<'a> {
    pred: &'a PointMap,
    gt: &'a PointMap,
    conf: &'a ConfidenceMap,
    weight: f64,
}

struct TermEval {
    /// Term value before the `weight` factor.
    unweighted: f64,
    d_points: Vec<Vector3<f64>>,
    d_conf: Vec<f64>,
}

/// Evaluates the terms sharing one normalizer pair, with gradients.
fn eval_group(terms: &[Term<'_>], cfg: &LossConfig) -> Result<Vec<TermEval>> {
    for t in terms {
        if t.pred.dims() != t.gt.dims() || t.conf.dims() != t.gt.dims() {
            return Err(Error::DimensionMismatch {
                expected: t.gt.dims(),
                got: t.pred.dims(),
            });
        }
    }
    let z_gt = znorm(&terms.iter().map(|t| t.gt).collect::<Vec<_>>())?;
    let masked: Vec<(&PointMap, &[bool])> = terms
        .iter()
        .map(|t| (t.pred, t.gt.valid.as_slice()))
        .collect();
    let z = znorm_masked(&masked)?;
    if z <= 0.0 {
        return Err(Error::Degenerate("predicted pointmaps collapse to the origin".into()));
    }
    let n_norm: usize = terms.iter().map(|t| t.gt.valid_count()).sum();

    let mut out = Vec::with_capacity(terms.len());
    // dL/dz accumulated across the group.
    let mut dz_terms = Vec::new();
    for t in terms {
        let lreg = regression_loss(t.pred, t.gt, z, z_gt)?;
        let count = t.gt.valid_count().max(1) as f64;
        let red = if cfg.mean_reduce { 1.0 / count } else { 1.0 };
        let scale = t.weight * red;
        let raw = confidence_loss(&lreg, t.conf, cfg.alpha);
        let n = t.pred.points.len();
        let mut d_points = vec![Vector3::zeros(); n];
        let mut d_conf = vec![0.0; n];
        for idx in 0..n {
            if !t.gt.valid[idx] {
                continue;
            }
            let c = t.conf.values[idx];
            let l = lreg.values[idx];
            d_conf[idx] = scale * (l - cfg.alpha / c);
            if l > 0.0 {
                let u = t.pred.points[idx] / z - t.gt.points[idx] / z_gt;
                let a = scale * c / l;
                d_points[idx] = u * (a / z);
                dz_terms.push(-a * u.dot(&t.pred.points[idx]) / (z * z));
            }
        }
        out.push(TermEval {
            unweighted: red * raw,
            d_points,
            d_conf,
        });
    }
    let dl_dz = pairwise_sum(&dz_terms);
    for (t, e) in terms.iter().zip(out.iter_mut()) {
        for idx in 0..t.pred.points.len() {
            if !t.gt.valid[idx] {
                continue;
            }
            let p = t.pred.points[idx];
            let pn = p.norm();
            if pn > 0.0 {
                e.d_points[idx] += p * (dl_dz / (n_norm as f64 * pn));
            }
        }
    }
    Ok(out)
}

/// `l11 + l21 + beta * l22` together with its gradients.
pub fn total_loss_with_grad(
    pred: &PairPrediction,
    gt: [&PointMap; 3],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    let g1 = eval_group(
        &[
            Term {
                pred: &pred.x11,
                gt: gt[0],
                conf: &pred.c11,
                weight: 1.0,
            },
            Term {
                pred: &pred.x21,
                gt: gt[1],
                conf: &pred.c21,
                weight: 1.0,
            },
        ],
        cfg,
    )?;
    let mut g2 = eval_group(
        &[Term {
            pred: &pred.x22,
            gt: gt[2],
            conf: &pred.c22,
            weight: cfg.beta,
        }],
        cfg,
    )?;
    let mut g1 = g1.into_iter();
    let (e11, e21) = (g1.next().unwrap(), g1.next().unwrap());
    let e22 = g2.remove(0);
    let (l11, l21, l22) = (e11.unweighted, e21.unweighted, e22.unweighted);
    let breakdown = LossBreakdown {
        l11,
        l21,
        l22,
        total: l11 + l21 + cfg.beta * l22,
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Divergence(format!("loss is {}", breakdown.total)));
    }
    Ok((
        breakdown,
        LossGradients {
            x11: e11.d_points,
            x21: e21.d_points,
            x22: e22.d_points,
            c11: e11.d_conf,
            c21: e21.d_conf,
            c22: e22.d_conf,
        },
    ))
}

/// Total confidence-aware loss over the three pointmaps of a pair.
pub fn total_loss(pred: &PairPrediction, gt: [&PointMap; 3], cfg: &LossConfig) -> Result<LossBreakdown> {
    total_loss_with_grad(pred, gt, cfg).map(|(b, _)| b)
}
