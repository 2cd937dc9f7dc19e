//! Held-out evaluation of a trained network under a fixed prior subset.

use pointmap_core::conditioning::ModalityMask;
use pointmap_core::metrics::{accuracy_at, depth_metrics, focal_accuracy, maa, DepthAlign, MetricReport, MAA_MAX_DEG};
use pointmap_core::solvers::{pose_metrics, procrustes_pose, weiszfeld_focal};
use pointmap_core::synth::{gen_synthetic_pair_with, PairConfig, SyntheticPair};
use pointmap_core::{PairPrediction, Result};

use crate::model::{NetInput, ToyNet};
use crate::train::full_aux;

/// Angular threshold for the reported rotation and translation accuracies.
pub const POSE_THRESHOLD_DEG: f64 = 2.0;

/// Per-pair quantities feeding a [`MetricReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub depth_rel: f64,
    pub depth_tau: f64,
    /// Estimated and true focal of both cameras.
    pub focals: [(f64, f64); 2],
    pub rra_deg: f64,
    /// 180 when undefined.
    pub rta_deg: f64,
}

/// Held-out pairs: seeds disjoint from training, no crops.
pub fn eval_pairs(seed: u64, count: usize, width: usize, height: usize) -> Result<Vec<SyntheticPair>> {
    let cfg = PairConfig {
        width,
        height,
        ..PairConfig::default()
    };
    (0..count as u64)
        .map(|k| gen_synthetic_pair_with(seed.wrapping_add(0xE7A1_0000_0000 + k), &cfg))
        .collect()
}

pub fn score_prediction(pred: &PairPrediction, pair: &SyntheticPair) -> Result<PairScores> {
    let mut rel = 0.0;
    let mut tau = 0.0;
    for (pm, gt) in [(&pred.x11, &pair.d1), (&pred.x22, &pair.d2)] {
        match depth_metrics(&pm.depth(), gt, DepthAlign::Median) {
            Ok(e) => {
                rel += e.rel / 2.0;
                tau += e.tau / 2.0;
            }
            // No pixel predicted in front of the camera.
            Err(_) => rel += 50.0,
        }
    }
    let focal = |pm, k: &pointmap_core::CameraIntrinsics| {
        weiszfeld_focal(pm, (k.cx, k.cy), 100, 1e-9).map_or(f64::MAX, |f| {
            if f.focal.is_finite() && f.focal > 0.0 {
                f.focal
            } else {
                f64::MAX
            }
        })
    };
    let focals = [
        (focal(&pred.x11, &pair.k1), pair.k1.fx),
        (focal(&pred.x22, &pair.k2), pair.k2.fx),
    ];
    let (rra_deg, rta_deg) = match procrustes_pose(&pred.x22, &pred.x21, &pred.c22, &pred.c21) {
        Ok(p) => {
            let e = pose_metrics(&p, &pair.p12);
            (e.rra_deg, e.rta_deg.unwrap_or(180.0))
        }
        Err(_) => (180.0, 180.0),
    };
    Ok(PairScores {
        depth_rel: rel,
        depth_tau: tau,
        focals,
        rra_deg,
        rta_deg,
    })
}

/// Scores for every pair with only the priors in `mask` supplied.
pub fn score_subset(net: &ToyNet, pairs: &[SyntheticPair], mask: ModalityMask) -> Result<Vec<PairScores>> {
    pairs
        .iter()
        .map(|p| {
            let input = NetInput::new(&p.rgb1, &p.rgb2, &full_aux(p).restrict(mask), net.cfg.patch_size)?;
            score_prediction(&net.predict(&input)?, p)
        })
        .collect()
}

pub fn report(label: &str, scores: &[PairScores]) -> Result<MetricReport> {
    let n = scores.len().max(1) as f64;
    let (pf, gf): (Vec<f64>, Vec<f64>) = scores.iter().flat_map(|s| s.focals).unzip();
    let focal_acc = if pf.is_empty() { 0.0 } else { focal_accuracy(&pf, &gf)? };
    let rra: Vec<f64> = scores.iter().map(|s| s.rra_deg).collect();
    let rta: Vec<f64> = scores.iter().map(|s| s.rta_deg).collect();
    let pairs: Vec<(f64, f64)> = rra.iter().copied().zip(rta.iter().copied()).collect();
    let r = MetricReport {
        label: label.to_string(),
        depth_rel: scores.iter().map(|s| s.depth_rel).sum::<f64>() / n,
        depth_tau: scores.iter().map(|s| s.depth_tau).sum::<f64>() / n,
        focal_acc,
        rra_at: accuracy_at(&rra, POSE_THRESHOLD_DEG),
        rta_at: accuracy_at(&rta, POSE_THRESHOLD_DEG),
        maa30: maa(&pairs, MAA_MAX_DEG),
    };
    r.validate()?;
    Ok(r)
}

/// One report per subset of the guidance study, in row order.
pub fn guidance_reports(net: &ToyNet, pairs: &[SyntheticPair]) -> Result<Vec<MetricReport>> {
    ModalityMask::guidance_rows()
        .iter()
        .map(|m| report(&m.label(), &score_subset(net, pairs, *m)?))
        .collect()
}
