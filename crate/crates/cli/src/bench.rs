//! Seeded synthetic benchmarks producing a JSON report plus SVG and PLY artifacts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use pointmap_core::align::{align, build_graph, extract_depth, AlignConfig, GlobalScene};
use pointmap_core::conditioning::{AuxiliaryBundle, ModalityMask};
use pointmap_core::geom::{compose_relative, project, rotation_angle_between, vector_angle};
use pointmap_core::io::write_pointmap_ply;
use pointmap_core::metrics::{
    accuracy_at, depth_metrics, focal_accuracy, maa, DepthAlign, MetricReport, MAA_MAX_DEG,
};
use pointmap_core::solvers::{pnp_ransac_pose, pose_metrics, RansacConfig};
use pointmap_core::stitch::{blend, resolve_scales, schedule_crops, BlendMode, TilePrediction};
use pointmap_core::synth::{gen_multiview, gen_synthetic_pair_with, MultiViewScene, PairConfig, SyntheticPair};
use pointmap_core::{ConfidenceMap, Error, PairPrediction, PointMap, Result};
use pointmap_net::checkpoint;
use pointmap_net::eval::{eval_pairs, report, score_prediction, PairScores, POSE_THRESHOLD_DEG};
use pointmap_net::{NetInput, ToyNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::plot::{line_chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    GuidingTrend,
    Stitch,
    Pose,
    Align,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::GuidingTrend, Suite::Stitch, Suite::Pose, Suite::Align];

    pub fn name(self) -> &'static str {
        match self {
            Suite::GuidingTrend => "guiding-trend",
            Suite::Stitch => "stitch",
            Suite::Pose => "pose",
            Suite::Align => "align",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::invalid(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    /// Trained network; required by `guiding-trend`.
    pub checkpoint: Option<PathBuf>,
    /// Number of synthetic items (pairs or scenes).
    pub items: usize,
    pub align_iters: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            checkpoint: None,
            items: 16,
            align_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: String,
    pub seed: u64,
    pub rows: Vec<MetricReport>,
}

/// Runs `suite` and writes `report.json` plus artifacts into `out_dir`.
pub fn run_benchmark(suite: Suite, seed: u64, out_dir: &Path, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.items == 0 {
        return Err(Error::invalid("benchmark needs at least one item"));
    }
    std::fs::create_dir_all(out_dir)?;
    let rows = match suite {
        Suite::GuidingTrend => guiding_trend(seed, out_dir, opts)?,
        Suite::Pose => pose_suite(seed, out_dir, opts)?,
        Suite::Stitch => stitch_suite(seed, out_dir, opts)?,
        Suite::Align => align_suite(seed, out_dir, opts)?,
    };
    let rep = BenchReport {
        suite: suite.name().to_string(),
        seed,
        rows,
    };
    let mut json = serde_json::to_string_pretty(&rep)?;
    json.push('\n');
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(rep)
}

fn item_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(k as u64)
}

/// Relative Gaussian noise on every valid point, plus a fraction of gross outliers.
pub fn perturb(pm: &PointMap, sigma: f64, outliers: f64, rng: &mut impl Rng) -> PointMap {
    let mut out = pm.clone();
    for (p, &v) in out.points.iter_mut().zip(&pm.valid) {
        if !v {
            continue;
        }
        let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        *p += n * sigma * p.norm();
        if outliers > 0.0 && rng.gen_bool(outliers) {
            *p *= rng.gen_range(0.5..1.5);
        }
    }
    out
}

fn load_net(opts: &BenchOptions) -> Result<ToyNet> {
    let path = opts.checkpoint.as_ref().ok_or_else(|| {
        Error::invalid(
            "suite guiding-trend needs a trained network: run `pointmap train-toy --out toy.ckpt` \
             and pass `--checkpoint toy.ckpt`",
        )
    })?;
    checkpoint::load(path)
}

/// Scores for every eval pair with only the priors in `mask`, in pair order.
pub fn subset_scores(net: &ToyNet, pairs: &[SyntheticPair], mask: ModalityMask) -> Result<Vec<PairScores>> {
    pairs
        .par_iter()
        .map(|p| {
            let aux = pointmap_net::train::full_aux(p).restrict(mask);
            let input = NetInput::new(&p.rgb1, &p.rgb2, &aux, net.cfg.patch_size)?;
            score_prediction(&net.predict(&input)?, p)
        })
        .collect()
}

fn guiding_trend(seed: u64, out: &Path, opts: &BenchOptions) -> Result<Vec<MetricReport>> {
    let net = load_net(opts)?;
    let pairs = eval_pairs(seed, opts.items, net.cfg.width, net.cfg.height)?;
    let mut rows = Vec::new();
    for m in ModalityMask::guidance_rows() {
        rows.push(report(&m.label(), &subset_scores(&net, &pairs, m)?)?);
    }
    let p = &pairs[0];
    for (tag, aux) in [("none", AuxiliaryBundle::default()), ("all", pointmap_net::train::full_aux(p))] {
        let pred = net.predict(&NetInput::new(&p.rgb1, &p.rgb2, &aux, net.cfg.patch_size)?)?;
        write_prediction(out, &format!("pair0_{tag}"), &pred)?;
    }
    let idx = |f: fn(&MetricReport) -> f64| -> Vec<(f64, f64)> {
        rows.iter().enumerate().map(|(k, r)| (k as f64, f(r))).collect()
    };
    line_chart(
        &out.join("guiding-trend.svg"),
        "Metrics per prior subset",
        "subset row",
        "percent",
        &[
            Series { name: "depth rel", points: idx(|r| r.depth_rel) },
            Series { name: "depth tau", points: idx(|r| r.depth_tau) },
            Series { name: "RRA", points: idx(|r| r.rra_at) },
            Series { name: "mAA", points: idx(|r| r.maa30) },
        ],
    )?;
    Ok(rows)
}

fn write_prediction(out: &Path, stem: &str, pred: &PairPrediction) -> Result<()> {
    for (name, pm, c) in [
        ("x11", &pred.x11, &pred.c11),
        ("x21", &pred.x21, &pred.c21),
        ("x22", &pred.x22, &pred.c22),
    ] {
        write_pointmap_ply(out.join(format!("{stem}_{name}.ply")), pm, Some(c))?;
    }
    Ok(())
}

fn accuracy_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    (1..=MAA_MAX_DEG)
        .map(|t| (t as f64, accuracy_at(errors, t as f64)))
        .collect()
}

/// Noisy ground-truth pointmaps; relative pose by Procrustes and by PnP-RANSAC.
fn pose_suite(seed: u64, out: &Path, opts: &BenchOptions) -> Result<Vec<MetricReport>> {
    let cfg = PairConfig {
        width: 48,
        height: 36,
        ..PairConfig::default()
    };
    let items: Vec<(PairScores, PairScores, PairPrediction)> = (0..opts.items)
        .into_par_iter()
        .map(|k| {
            let s = item_seed(seed, k);
            let p = gen_synthetic_pair_with(s, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5EED);
            let pred = PairPrediction::from_points(
                perturb(&p.x11, 0.005, 0.02, &mut rng),
                perturb(&p.x21, 0.005, 0.02, &mut rng),
                perturb(&p.x22, 0.005, 0.02, &mut rng),
            )?;
            let pro = score_prediction(&pred, &p)?;
            let (_, pixels) = project(&p.x22, &p.k2);
            let ransac = RansacConfig {
                iterations: 200,
                threshold_px: 1.0,
                seed: s,
            };
            let mut pnp = pro;
            match pnp_ransac_pose(&pred.x21, &pixels, &p.k2, &ransac) {
                Ok(r) => {
                    let e = pose_metrics(&r.pose.inverse_rigid(), &p.p12);
                    pnp.rra_deg = e.rra_deg;
                    pnp.rta_deg = e.rta_deg.unwrap_or(180.0);
                }
                Err(_) => (pnp.rra_deg, pnp.rta_deg) = (180.0, 180.0),
            }
            Ok((pro, pnp, pred))
        })
        .collect::<Result<_>>()?;
    let pro: Vec<PairScores> = items.iter().map(|x| x.0).collect();
    let pnp: Vec<PairScores> = items.iter().map(|x| x.1).collect();
    write_prediction(out, "pair0_noisy", &items[0].2)?;
    let worst = |s: &[PairScores]| -> Vec<f64> { s.iter().map(|x| x.rra_deg.max(x.rta_deg)).collect() };
    line_chart(
        &out.join("pose.svg"),
        "Pose accuracy vs threshold",
        "threshold (deg)",
        "accuracy (%)",
        &[
            Series { name: "procrustes", points: accuracy_curve(&worst(&pro)) },
            Series { name: "pnp-ransac", points: accuracy_curve(&worst(&pnp)) },
        ],
    )?;
    Ok(vec![report("procrustes", &pro)?, report("pnp-ransac", &pnp)?])
}

/// Oracle views cut into tiles with random per-tile scales and noise, then
/// re-assembled; the two stitched self-frame maps are scored as a pair.
fn stitch_suite(seed: u64, out: &Path, opts: &BenchOptions) -> Result<Vec<MetricReport>> {
    let cfg = PairConfig {
        width: 96,
        height: 72,
        ..PairConfig::default()
    };
    let modes = [BlendMode::WeightedMean, BlendMode::WinnerTakeAll];
    let items: Vec<Vec<(PairScores, PairPrediction)>> = (0..opts.items)
        .into_par_iter()
        .map(|k| {
            let s = item_seed(seed, k);
            let p = gen_synthetic_pair_with(s, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x711E);
            let tiles1 = noisy_tiles(&p.x11, &p.k1, &mut rng)?;
            let tiles2 = noisy_tiles(&p.x22, &p.k2, &mut rng)?;
            modes
                .iter()
                .map(|&mode| {
                    let (x11, c11) = stitch(&tiles1, (cfg.width, cfg.height), mode)?;
                    let (x22, c22) = stitch(&tiles2, (cfg.width, cfg.height), mode)?;
                    let c21 = ConfidenceMap::ones(cfg.width, cfg.height);
                    let pred = PairPrediction::new(x11, p.x21.clone(), x22.retagged(1, 1), c11, c21, c22)?;
                    Ok((score_prediction(&pred, &p)?, pred))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    write_prediction(out, "scene0_weighted", &items[0][0].1)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (m, name) in ["weighted-mean", "winner-take-all"].into_iter().enumerate() {
        let scores: Vec<PairScores> = items.iter().map(|v| v[m].0).collect();
        series.push(Series {
            name,
            points: scores.iter().enumerate().map(|(k, s)| (k as f64, s.depth_rel)).collect(),
        });
        rows.push(report(name, &scores)?);
    }
    line_chart(&out.join("stitch.svg"), "Stitched depth error", "scene", "rel (%)", &series)?;
    Ok(rows)
}

fn noisy_tiles(
    pm: &PointMap,
    k: &pointmap_core::CameraIntrinsics,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TilePrediction>> {
    schedule_crops(k, (48, 48), 16)?
        .into_iter()
        .map(|c| {
            let scale = rng.gen_range(-0.7f64..0.7).exp();
            let pts = c.cut(&pm.points, pm.width).into_iter().map(|p| p * scale).collect();
            let tile = PointMap::new(c.w, c.h, pts, c.cut(&pm.valid, pm.width), 0, 0)?;
            let conf = (0..c.w * c.h).map(|_| rng.gen_range(1.0..3.0)).collect();
            TilePrediction::new(c, perturb(&tile, 0.002, 0.0, rng), ConfidenceMap::new(c.w, c.h, conf)?)
        })
        .collect()
}

fn stitch(tiles: &[TilePrediction], parent: (usize, usize), mode: BlendMode) -> Result<(PointMap, ConfidenceMap)> {
    let scales = resolve_scales(tiles, 0)?;
    let scaled: Vec<TilePrediction> = tiles
        .iter()
        .zip(scales)
        .map(|(t, s)| TilePrediction {
            scale: Some(s),
            ..t.clone()
        })
        .collect();
    blend(&scaled, parent, mode)
}

/// Five cameras, every ordered pair as an edge with a random scale; aligned
/// once noise-free and once with noisy edges.
fn align_suite(seed: u64, out: &Path, opts: &BenchOptions) -> Result<Vec<MetricReport>> {
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (name, sigma) in [("noise-free", 0.0), ("noisy", 0.01)] {
        let mut scores = Vec::new();
        let mut focal_pairs = Vec::new();
        let mut trace = None;
        let scenes: Vec<(MultiViewScene, GlobalScene)> = (0..opts.items)
            .into_par_iter()
            .map(|k| {
                let s = item_seed(seed, k);
                let mv = gen_multiview(s, 5, 32, 24)?;
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xA116);
                let graph = build_graph(noisy_edges(&mv, sigma, &mut rng)?)?;
                let cfg = AlignConfig {
                    iters: opts.align_iters,
                    ..AlignConfig::default()
                };
                Ok((mv, align(&graph, &cfg)?))
            })
            .collect::<Result<_>>()?;
        for (k, (mv, scene)) in scenes.iter().enumerate() {
            let (s, f) = score_scene(mv, scene)?;
            scores.extend(s);
            focal_pairs.extend(f);
            if k == 0 {
                trace = Some(scene.energy_trace.clone());
                if sigma > 0.0 {
                    for (v, pm) in scene.points.iter().enumerate() {
                        write_pointmap_ply(out.join(format!("scene0_view{v}.ply")), pm, None)?;
                    }
                }
            }
        }
        rows.push(scene_report(name, &scores, &focal_pairs)?);
        traces.push((name, trace.unwrap_or_default()));
    }
    let series: Vec<Series> = traces
        .iter()
        .map(|(name, t)| Series {
            name,
            points: t
                .iter()
                .enumerate()
                .map(|(k, e)| (k as f64, e.max(1e-300).log10()))
                .collect(),
        })
        .collect();
    line_chart(&out.join("align.svg"), "Alignment energy", "accepted step", "log10 energy", &series)?;
    Ok(rows)
}

fn noisy_edges(mv: &MultiViewScene, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, PairPrediction)>> {
    let n = mv.poses.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = rng.gen_range(-0.5f64..0.5).exp();
            let x11 = perturb(&mv.pointmap(i, i)?.scaled(s), sigma, 0.0, rng).retagged(0, 0);
            let x21 = perturb(&mv.pointmap(j, i)?.scaled(s), sigma, 0.0, rng).retagged(1, 0);
            let x22 = perturb(&mv.pointmap(j, j)?.scaled(s), sigma, 0.0, rng).retagged(1, 1);
            edges.push((i, j, PairPrediction::from_points(x11, x21, x22)?));
        }
    }
    Ok(edges)
}

/// Per-view depth scores and per-camera relative pose errors against camera 0.
fn score_scene(mv: &MultiViewScene, scene: &GlobalScene) -> Result<(Vec<PairScores>, Vec<(f64, f64)>)> {
    let n = mv.poses.len();
    let mut out = Vec::new();
    let mut focals = Vec::new();
    for v in 0..n {
        focals.push((scene.focals[v], mv.intrinsics[v].fx));
        let e = depth_metrics(&extract_depth(scene, v)?, &mv.views[v].depth, DepthAlign::Median)?;
        let (rra, rta) = if v == 0 {
            (0.0, 0.0)
        } else {
            let est = compose_relative(&scene.poses[0], &scene.poses[v]);
            let gt = compose_relative(&mv.poses[0], &mv.poses[v]);
            (
                rotation_angle_between(&est.rotation, &gt.rotation).to_degrees(),
                vector_angle(&est.translation, &gt.translation).map_or(180.0, f64::to_degrees),
            )
        };
        out.push(PairScores {
            depth_rel: e.rel,
            depth_tau: e.tau,
            focals: [(scene.focals[v], mv.intrinsics[v].fx); 2],
            rra_deg: rra,
            rta_deg: rta,
        });
    }
    // Camera 0 is the reference and carries no pose error.
    out[0].rra_deg = f64::NAN;
    Ok((out, focals))
}

fn scene_report(label: &str, scores: &[PairScores], focals: &[(f64, f64)]) -> Result<MetricReport> {
    let n = scores.len() as f64;
    let posed: Vec<&PairScores> = scores.iter().filter(|s| !s.rra_deg.is_nan()).collect();
    let rra: Vec<f64> = posed.iter().map(|s| s.rra_deg).collect();
    let rta: Vec<f64> = posed.iter().map(|s| s.rta_deg).collect();
    let pairs: Vec<(f64, f64)> = rra.iter().copied().zip(rta.iter().copied()).collect();
    let (pf, gf): (Vec<f64>, Vec<f64>) = focals.iter().copied().unzip();
    let r = MetricReport {
        label: label.to_string(),
        depth_rel: scores.iter().map(|s| s.depth_rel).sum::<f64>() / n,
        depth_tau: scores.iter().map(|s| s.depth_tau).sum::<f64>() / n,
        focal_acc: focal_accuracy(&pf, &gf)?,
        rra_at: accuracy_at(&rra, POSE_THRESHOLD_DEG),
        rta_at: accuracy_at(&rta, POSE_THRESHOLD_DEG),
        maa30: maa(&pairs, MAA_MAX_DEG),
    };
    r.validate()?;
    Ok(r)
}
