//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use pointmap_core::align::{align, build_graph, extract_depth, AlignConfig};
use pointmap_core::conditioning::AuxiliaryBundle;
use pointmap_core::io::{
    read_depth, read_intrinsics, read_pointmap_ply, read_pose, write_depth, write_intrinsics, write_pointmap_ply,
    write_pose, PoseJson,
};
use pointmap_core::solvers::{procrustes_pose, weiszfeld_focal};
use pointmap_core::stitch::{blend, resolve_scales, schedule_crops, BlendMode, TilePrediction};
use pointmap_core::synth::{gen_multiview, gen_synthetic_pair_with, PairConfig};
use pointmap_core::{CameraIntrinsics, Error, PairPrediction, Result};
use pointmap_net::{checkpoint, NetConfig, NetInput, ToyNet, TrainConfig, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{run_benchmark, BenchOptions, Suite};
use crate::imageio::{crop_rgb, read_rgb, resize_rgb, write_rgb};

#[derive(Debug, Parser)]
#[command(name = "pointmap", version, about = "Two-view pointmap reconstruction with optional priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic pairs (or multi-view scenes) with ground truth.
    GenScenes(GenScenesArgs),
    /// Train the toy network on synthetic pairs and save a checkpoint.
    TrainToy(TrainArgs),
    /// Predict pointmaps for one image pair with any subset of priors.
    Infer(InferArgs),
    /// Tiled inference on an image larger than the network input.
    Stitch(StitchArgs),
    /// Fuse pairwise pointmaps listed in a manifest into one world frame.
    Align(AlignArgs),
    /// Run a seeded synthetic benchmark suite.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Cameras per scene; more than two writes an alignment manifest.
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 0.0)]
    pub crop_probability: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value = "inject1")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub dec_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub mlp_ratio: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub rgb1: PathBuf,
    #[arg(long)]
    pub rgb2: PathBuf,
    #[arg(long)]
    pub k1: Option<PathBuf>,
    #[arg(long)]
    pub k2: Option<PathBuf>,
    #[arg(long)]
    pub d1: Option<PathBuf>,
    #[arg(long)]
    pub d2: Option<PathBuf>,
    /// Camera-2 to camera-1 pose JSON.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// High-resolution image.
    #[arg(long)]
    pub rgb: PathBuf,
    /// Intrinsics of the high-resolution image; enables ray priors.
    #[arg(long)]
    pub k: Option<PathBuf>,
    /// Tile size `WxH`; must equal the network input size.
    #[arg(long, value_parser = parse_size)]
    pub tile: (usize, usize),
    #[arg(long, default_value_t = 8)]
    pub overlap: usize,
    #[arg(long, default_value_t = 0)]
    pub ref_tile: usize,
    /// Keep the most confident tile instead of averaging.
    #[arg(long)]
    pub winner_take_all: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pairs or scenes per suite.
    #[arg(long, default_value_t = 16)]
    pub items: usize,
    #[arg(long, default_value_t = 1000)]
    pub align_iters: usize,
}

pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("tile dimensions must be positive".into());
    }
    Ok((w, h))
}

/// Process exit status for an error: 3 for numeric divergence, 1 for I/O,
/// 2 for everything else (validation).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes(a) => gen_scenes(&a),
        Command::TrainToy(a) => train_toy(&a).map(|_| ()),
        Command::Infer(a) => infer(&a),
        Command::Stitch(a) => stitch(&a),
        Command::Align(a) => align_cmd(&a),
        Command::Eval(a) => {
            let opts = BenchOptions {
                checkpoint: a.checkpoint.clone(),
                items: a.items,
                align_iters: a.align_iters,
            };
            let rep = run_benchmark(a.suite, a.seed, &a.out, &opts)?;
            for r in &rep.rows {
                println!(
                    "{:<16} rel {:7.3}  tau {:6.2}  focal {:6.2}  RRA {:6.2}  RTA {:6.2}  mAA {:6.2}",
                    r.label, r.depth_rel, r.depth_tau, r.focal_acc, r.rra_at, r.rta_at, r.maa30
                );
            }
            Ok(())
        }
    }
}

/// One manifest edge: image indices and the three pointmap PLYs, relative
/// to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEdge {
    pub i: usize,
    pub j: usize,
    pub x11: String,
    pub x21: String,
    pub x22: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<ManifestEdge>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn gen_scenes(a: &GenScenesArgs) -> Result<()> {
    if a.views < 2 {
        return Err(Error::invalid("--views must be at least 2"));
    }
    std::fs::create_dir_all(&a.out)?;
    for k in 0..a.count {
        let seed = a.seed.wrapping_add(k as u64);
        if a.views == 2 {
            let cfg = PairConfig {
                width: a.width,
                height: a.height,
                crop_probability: a.crop_probability,
                ..PairConfig::default()
            };
            let p = gen_synthetic_pair_with(seed, &cfg)?;
            let dir = a.out.join(format!("pair_{k:03}"));
            std::fs::create_dir_all(&dir)?;
            write_rgb(dir.join("rgb1.png"), &p.rgb1)?;
            write_rgb(dir.join("rgb2.png"), &p.rgb2)?;
            write_intrinsics(dir.join("k1.json"), &p.k1)?;
            write_intrinsics(dir.join("k2.json"), &p.k2)?;
            write_depth(dir.join("d1.depth"), &p.d1)?;
            write_depth(dir.join("d2.depth"), &p.d2)?;
            write_pose(dir.join("p12.json"), &p.p12)?;
            write_pointmap_ply(dir.join("x11.ply"), &p.x11, None)?;
            write_pointmap_ply(dir.join("x21.ply"), &p.x21, None)?;
            write_pointmap_ply(dir.join("x22.ply"), &p.x22, None)?;
        } else {
            let mv = gen_multiview(seed, a.views, a.width, a.height)?;
            let dir = a.out.join(format!("scene_{k:03}"));
            std::fs::create_dir_all(&dir)?;
            for (v, view) in mv.views.iter().enumerate() {
                write_rgb(dir.join(format!("rgb{v}.png")), &view.rgb)?;
                write_intrinsics(dir.join(format!("k{v}.json")), &mv.intrinsics[v])?;
                write_depth(dir.join(format!("d{v}.depth")), &view.depth)?;
                write_pose(dir.join(format!("pose{v}.json")), &mv.poses[v])?;
            }
            let mut pairs = Vec::new();
            for i in 0..a.views {
                for j in 0..a.views {
                    if i == j {
                        continue;
                    }
                    let sub = format!("pair_{i}_{j}");
                    std::fs::create_dir_all(dir.join(&sub))?;
                    let maps = [
                        ("x11", mv.pointmap(i, i)?.retagged(0, 0)),
                        ("x21", mv.pointmap(j, i)?.retagged(1, 0)),
                        ("x22", mv.pointmap(j, j)?.retagged(1, 1)),
                    ];
                    for (name, pm) in &maps {
                        write_pointmap_ply(dir.join(&sub).join(format!("{name}.ply")), pm, None)?;
                    }
                    pairs.push(ManifestEdge {
                        i,
                        j,
                        x11: format!("{sub}/x11.ply"),
                        x21: format!("{sub}/x21.ply"),
                        x22: format!("{sub}/x22.ply"),
                    });
                }
            }
            write_json(&dir.join("manifest.json"), &Manifest { pairs })?;
        }
    }
    info!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

pub fn train_toy(a: &TrainArgs) -> Result<ToyNet> {
    let cfg = NetConfig {
        width: a.width,
        height: a.height,
        patch_size: a.patch,
        dim: a.dim,
        enc_blocks: a.enc_blocks,
        dec_blocks: a.dec_blocks,
        heads: a.heads,
        mlp_ratio: a.mlp_ratio,
        variant: a.variant,
        seed: a.seed,
        tie_decoders: false,
    };
    let tcfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        ..TrainConfig::default()
    };
    let mut net = ToyNet::new(cfg)?;
    info!("training {} parameters for {} steps", net.params.num_scalars(), a.steps);
    let every = a.log_every.max(1);
    let mut running = 0.0;
    pointmap_net::train(&mut net, a.steps, &tcfg, a.seed, |step, s| {
        running += s.loss.total;
        if (step + 1) % every == 0 {
            info!("step {} loss {:.4} grad-norm {:.3}", step + 1, running / every as f64, s.grad_norm);
            running = 0.0;
        }
    })?;
    checkpoint::save(&net, &a.out)?;
    info!("saved {}", a.out.display());
    Ok(net)
}

/// Summary written next to an inference result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub priors: String,
    /// Weiszfeld focal of each view, when a principal point is known.
    pub focal1: Option<f64>,
    pub focal2: Option<f64>,
    /// Camera-2 to camera-1 pose from Procrustes, with its scale.
    pub p12: Option<PoseJson>,
    pub p12_scale: Option<f64>,
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let net = checkpoint::load(&a.checkpoint)?;
    let rgb1 = read_rgb(&a.rgb1)?;
    let rgb2 = read_rgb(&a.rgb2)?;
    let aux = AuxiliaryBundle {
        k1: a.k1.as_ref().map(read_intrinsics).transpose()?,
        k2: a.k2.as_ref().map(read_intrinsics).transpose()?,
        d1: a.d1.as_ref().map(read_depth).transpose()?,
        d2: a.d2.as_ref().map(read_depth).transpose()?,
        p12: a.pose.as_ref().map(read_pose).transpose()?,
    };
    let pred = net.predict(&NetInput::new(&rgb1, &rgb2, &aux, net.cfg.patch_size)?)?;
    std::fs::create_dir_all(&a.out)?;
    write_pointmap_ply(a.out.join("x11.ply"), &pred.x11, Some(&pred.c11))?;
    write_pointmap_ply(a.out.join("x21.ply"), &pred.x21, Some(&pred.c21))?;
    write_pointmap_ply(a.out.join("x22.ply"), &pred.x22, Some(&pred.c22))?;
    write_depth(a.out.join("depth1.depth"), &pred.x11.depth())?;
    write_depth(a.out.join("depth2.depth"), &pred.x22.depth())?;
    let (w, h) = (net.cfg.width as f64, net.cfg.height as f64);
    let principal = |k: &Option<CameraIntrinsics>| k.map_or(((w - 1.0) / 2.0, (h - 1.0) / 2.0), |k| (k.cx, k.cy));
    let focal = |pm, k: &Option<CameraIntrinsics>| weiszfeld_focal(pm, principal(k), 100, 1e-9).ok().map(|f| f.focal);
    let pose = procrustes_pose(&pred.x22, &pred.x21, &pred.c22, &pred.c21).ok();
    let summary = InferSummary {
        priors: aux.mask().label(),
        focal1: focal(&pred.x11, &aux.k1),
        focal2: focal(&pred.x22, &aux.k2),
        p12: pose.as_ref().map(|p| PoseJson::from(&p.rigid())),
        p12_scale: pose.map(|p| p.scale),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    Ok(())
}

/// Each tile is view 1 and the downscaled full image is view 2; the tiles'
/// self-frame maps are scale-resolved and blended.
pub fn stitch(a: &StitchArgs) -> Result<()> {
    let net = checkpoint::load(&a.checkpoint)?;
    let (tw, th) = a.tile;
    if (tw, th) != (net.cfg.width, net.cfg.height) {
        return Err(Error::invalid(format!(
            "tile {tw}x{th} must equal the network input {}x{}",
            net.cfg.width, net.cfg.height
        )));
    }
    let parent = read_rgb(&a.rgb)?;
    let (pw, ph) = parent.dims();
    let parent_k = match &a.k {
        Some(p) => Some(read_intrinsics(p)?),
        None => None,
    };
    if let Some(k) = &parent_k {
        if (k.width, k.height) != (pw, ph) {
            return Err(Error::DimensionMismatch {
                expected: (pw, ph),
                got: (k.width, k.height),
            });
        }
    }
    let layout_k = match parent_k {
        Some(k) => k,
        None => CameraIntrinsics::centered(pw.max(ph) as f64, pw, ph)?,
    };
    let crops = schedule_crops(&layout_k, (tw, th), a.overlap)?;
    if a.ref_tile >= crops.len() {
        return Err(Error::invalid(format!(
            "--ref-tile {} out of range for {} tiles",
            a.ref_tile,
            crops.len()
        )));
    }
    let overview = resize_rgb(&parent, tw, th);
    let overview_k = parent_k.map(|k| scaled_intrinsics(&k, tw, th)).transpose()?;
    let tiles: Vec<TilePrediction> = crops
        .par_iter()
        .map(|c| {
            let rgb = crop_rgb(&parent, c.x0, c.y0, c.w, c.h)?;
            let aux = AuxiliaryBundle {
                k1: parent_k.map(|_| c.intrinsics()),
                k2: overview_k,
                ..AuxiliaryBundle::default()
            };
            let pred = net.predict(&NetInput::new(&rgb, &overview, &aux, net.cfg.patch_size)?)?;
            TilePrediction::new(*c, pred.x11, pred.c11)
        })
        .collect::<Result<_>>()?;
    let scales = resolve_scales(&tiles, a.ref_tile)?;
    let tiles: Vec<TilePrediction> = tiles
        .into_iter()
        .zip(scales)
        .map(|(t, s)| TilePrediction { scale: Some(s), ..t })
        .collect();
    let mode = if a.winner_take_all {
        BlendMode::WinnerTakeAll
    } else {
        BlendMode::WeightedMean
    };
    let (pm, conf) = blend(&tiles, (pw, ph), mode)?;
    std::fs::create_dir_all(&a.out)?;
    write_pointmap_ply(a.out.join("stitched.ply"), &pm, Some(&conf))?;
    write_depth(a.out.join("stitched.depth"), &pm.depth())?;
    info!("stitched {} tiles into {pw}x{ph}", tiles.len());
    Ok(())
}

/// Intrinsics of the image resized to `w x h`.
fn scaled_intrinsics(k: &CameraIntrinsics, w: usize, h: usize) -> Result<CameraIntrinsics> {
    let sx = w as f64 / k.width as f64;
    let sy = h as f64 / k.height as f64;
    CameraIntrinsics::new(
        k.fx * sx,
        k.fy * sy,
        (k.cx + 0.5) * sx - 0.5,
        (k.cy + 0.5) * sy - 0.5,
        w,
        h,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraOut {
    focal: f64,
    /// World to camera.
    pose: PoseJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AlignOut {
    energy: f64,
    cameras: Vec<CameraOut>,
}

pub fn align_cmd(a: &AlignArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.pairs)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let edges = manifest
        .pairs
        .iter()
        .map(|e| {
            let (x11, c11) = read_pointmap_ply(base.join(&e.x11))?;
            let (x21, c21) = read_pointmap_ply(base.join(&e.x21))?;
            let (x22, c22) = read_pointmap_ply(base.join(&e.x22))?;
            let c = |c: pointmap_core::ConfidenceMap| {
                // Files without confidences store zeros; treat those as unit weight.
                if c.values.iter().all(|v| *v == 0.0) {
                    pointmap_core::ConfidenceMap::ones(c.width, c.height)
                } else {
                    c
                }
            };
            let pred = PairPrediction::new(x11, x21, x22, c(c11), c(c21), c(c22))?;
            Ok((e.i, e.j, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = build_graph(edges)?;
    let scene = align(
        &graph,
        &AlignConfig {
            iters: a.iters,
            lr: a.lr,
            ..AlignConfig::default()
        },
    )?;
    if !scene.energy().is_finite() {
        return Err(Error::Divergence(format!("alignment energy is {}", scene.energy())));
    }
    std::fs::create_dir_all(&a.out)?;
    for (v, pm) in scene.points.iter().enumerate() {
        write_pointmap_ply(a.out.join(format!("world{v}.ply")), pm, None)?;
        write_depth(a.out.join(format!("depth{v}.depth")), &extract_depth(&scene, v)?)?;
    }
    let out = AlignOut {
        energy: scene.energy(),
        cameras: scene
            .poses
            .iter()
            .zip(&scene.focals)
            .map(|(p, f)| CameraOut {
                focal: *f,
                pose: PoseJson::from(p),
            })
            .collect(),
    };
    write_json(&a.out.join("poses.json"), &out)?;
    info!("aligned {} images, energy {:.3e}", scene.poses.len(), scene.energy());
    Ok(())
}
