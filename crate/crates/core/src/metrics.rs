//! Depth, focal and pose accuracy metrics, and the serialized report row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::DepthMap;
use crate::numeric::{median_in_place, pairwise_sum};

pub const DEPTH_TAU_THRESHOLD: f64 = 1.03;
pub const FOCAL_THRESHOLD: f64 = 1.015;
pub const MAA_MAX_DEG: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthAlign {
    #[default]
    None,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthErrors {
    /// Mean absolute relative error, percent.
    pub rel: f64,
    /// Fraction of pixels with symmetric ratio below 1.03, percent.
    pub tau: f64,
}

/// Absolute relative error and inlier ratio over pixels valid in both maps.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, align: DepthAlign) -> Result<DepthErrors> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            got: pred.dims(),
        });
    }
    let pairs: Vec<(f64, f64)> = (0..gt.values.len())
        .filter(|&i| pred.mask[i] && gt.mask[i])
        .map(|i| (pred.values[i], gt.values[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no pixel is valid in both depth maps"));
    }
    let s = match align {
        DepthAlign::None => 1.0,
        DepthAlign::Median => {
            let mut ratios: Vec<f64> = pairs.iter().map(|(p, g)| g / p).collect();
            median_in_place(&mut ratios).unwrap_or(1.0)
        }
    };
    let rel: Vec<f64> = pairs.iter().map(|(p, g)| (s * p - g).abs() / g).collect();
    let inliers = pairs
        .iter()
        .filter(|(p, g)| {
            let p = s * p;
            (p / g).max(g / p) < DEPTH_TAU_THRESHOLD
        })
        .count();
    let n = pairs.len() as f64;
    Ok(DepthErrors {
        rel: 100.0 * pairwise_sum(&rel) / n,
        tau: 100.0 * inliers as f64 / n,
    })
}

/// Percentage of estimates within a symmetric ratio of 1.015.
pub fn focal_accuracy(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::invalid("focal lists differ in length"));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no focal estimates"));
    }
    if preds.iter().chain(gts).any(|f| !(*f > 0.0)) {
        return Err(Error::invalid("focal lengths must be positive"));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| (*p / *g).max(*g / *p) < FOCAL_THRESHOLD)
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Percentage of errors strictly below `threshold_deg`.
pub fn accuracy_at(errors: &[f64], threshold_deg: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|e| **e < threshold_deg).count() as f64 / errors.len() as f64
}

/// Mean over integer thresholds 1..=max_deg of the accuracy of
/// `max(rot, trans)`, percent.
pub fn maa(errors: &[(f64, f64)], max_deg: u32) -> f64 {
    if errors.is_empty() || max_deg == 0 {
        return 0.0;
    }
    let mut worst: Vec<f64> = errors.iter().map(|(r, t)| r.max(*t)).collect();
    worst.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for tau in 1..=max_deg {
        let below = worst.partition_point(|e| *e < tau as f64);
        acc += below as f64 / worst.len() as f64;
    }
    100.0 * acc / max_deg as f64
}

/// One row of a benchmark report. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub depth_rel: f64,
    pub depth_tau: f64,
    pub focal_acc: f64,
    pub rra_at: f64,
    pub rta_at: f64,
    pub maa30: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let pct = [
            self.depth_tau,
            self.focal_acc,
            self.rra_at,
            self.rta_at,
            self.maa30,
        ];
        if pct.iter().any(|v| !(0.0..=100.0).contains(v)) || !(self.depth_rel >= 0.0) {
            return Err(Error::invalid(format!("report {} out of range", self.label)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(v: Vec<f64>) -> DepthMap {
        let n = v.len();
        DepthMap::dense(n, 1, v).unwrap()
    }

    #[test]
    fn depth_examples() {
        let gt = dm(vec![1.0, 2.0, 3.0, 4.0]);
        let e = depth_metrics(&gt, &gt, DepthAlign::None).unwrap();
        assert_eq!((e.rel, e.tau), (0.0, 100.0));

        let e = depth_metrics(&gt.scaled(2.0), &gt, DepthAlign::Median).unwrap();
        assert!(e.rel.abs() < 1e-12);

        let e = depth_metrics(&gt.scaled(1.05), &gt, DepthAlign::None).unwrap();
        assert_eq!(e.tau, 0.0);
        assert!((e.rel - 5.0).abs() < 1e-9);
    }

    #[test]
    fn empty_overlap_rejected() {
        let a = DepthMap::new(2, 1, vec![1.0, 0.0], vec![true, false]).unwrap();
        let b = DepthMap::new(2, 1, vec![0.0, 1.0], vec![false, true]).unwrap();
        assert!(depth_metrics(&a, &b, DepthAlign::None).is_err());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_accuracy(&[500.0, 600.0], &[500.0, 600.0]).unwrap(), 100.0);
        assert_eq!(focal_accuracy(&[510.0, 612.0], &[500.0, 600.0]).unwrap(), 0.0);
        assert_eq!(focal_accuracy(&[500.0, 660.0], &[500.0, 600.0]).unwrap(), 50.0);
        assert!(focal_accuracy(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn maa_examples() {
        assert_eq!(maa(&[(0.0, 0.0); 4], 30), 100.0);
        assert_eq!(maa(&[(31.0, 40.0)], 30), 0.0);
        assert!((maa(&[(15.5, 3.0)], 30) - 50.0).abs() < 1e-12);
    }
}
