use std::path::Path;
use std::process::Command;

use pointmap_cli::bench::{run_benchmark, BenchOptions, Suite};
use pointmap_cli::commands::Manifest;
use pointmap_core::conditioning::{AuxiliaryBundle, ModalityMask};
use pointmap_core::geom::{compose_relative, rotation_angle_between, RigidPose};
use pointmap_core::io::{read_depth, read_intrinsics, read_pointmap_ply, read_pose, PoseJson};
use pointmap_core::synth::{gen_synthetic_pair_with, PairConfig};
use pointmap_net::eval::{eval_pairs, report, score_prediction};
use pointmap_net::{checkpoint, NetConfig, NetInput, ToyNet};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pointmap"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_ok(args: &[&str]) {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn status(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

fn tiny_checkpoint(path: &Path, w: usize, h: usize) {
    let net = ToyNet::new(NetConfig {
        width: w,
        height: h,
        dim: 16,
        enc_blocks: 1,
        dec_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        ..NetConfig::default()
    })
    .unwrap();
    checkpoint::save(&net, path).unwrap();
}

#[test]
fn gen_scenes_writes_readable_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    run_ok(&["gen-scenes", "--out", out.to_str().unwrap(), "--count", "2", "--seed", "5", "--width", "24", "--height", "16"]);
    let p = gen_synthetic_pair_with(5, &PairConfig { width: 24, height: 16, ..PairConfig::default() }).unwrap();
    let d = out.join("pair_000");
    assert_eq!(read_intrinsics(d.join("k1.json")).unwrap(), p.k1);
    let pose = read_pose(d.join("p12.json")).unwrap();
    assert!((pose.rotation - p.p12.rotation).norm() < 1e-12);
    let depth = read_depth(d.join("d2.depth")).unwrap();
    assert_eq!(depth.mask, p.d2.mask);
    let (x21, _) = read_pointmap_ply(d.join("x21.ply")).unwrap();
    assert_eq!((x21.subject, x21.frame), (1, 0));
    assert_eq!(x21.valid, p.x21.valid);
    assert!(out.join("pair_001/rgb2.png").exists());
}

#[test]
fn multiview_manifest_aligns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mv");
    run_ok(&["gen-scenes", "--out", out.to_str().unwrap(), "--count", "1", "--views", "3", "--width", "16", "--height", "12"]);
    let manifest = out.join("scene_000/manifest.json");
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m.pairs.len(), 6);
    let res = dir.path().join("aligned");
    run_ok(&["align", "--pairs", manifest.to_str().unwrap(), "--iters", "500", "--out", res.to_str().unwrap()]);
    let poses: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(res.join("poses.json")).unwrap()).unwrap();
    // PLY coordinates are float32, so the energy floor is quantization noise.
    assert!(poses["energy"].as_f64().unwrap() < 1e-2);
    let cams = poses["cameras"].as_array().unwrap();
    assert_eq!(cams.len(), 3);
    let est: Vec<RigidPose> = cams
        .iter()
        .map(|c| RigidPose::try_from(&serde_json::from_value::<PoseJson>(c["pose"].clone()).unwrap()).unwrap())
        .collect();
    for v in 1..3 {
        let gt = compose_relative(
            &read_pose(out.join("scene_000/pose0.json")).unwrap(),
            &read_pose(out.join(format!("scene_000/pose{v}.json"))).unwrap(),
        );
        let e = compose_relative(&est[0], &est[v]);
        assert!(rotation_angle_between(&e.rotation, &gt.rotation) < 1e-4);
    }
    assert!(res.join("world2.ply").exists());
}

#[test]
fn train_infer_and_stitch_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    run_ok(&[
        "train-toy", "--steps", "2", "--variant", "embed", "--seed", "3", "--out", &p("t.ckpt"),
        "--width", "16", "--height", "16", "--dim", "16", "--enc-blocks", "1", "--dec-blocks", "1", "--heads", "2",
        "--batch", "1",
    ]);
    let net = checkpoint::load(&dir.path().join("t.ckpt")).unwrap();
    assert_eq!(net.cfg.width, 16);

    run_ok(&["gen-scenes", "--out", &p("s"), "--count", "1", "--width", "16", "--height", "16"]);
    let s = |f: &str| p(&format!("s/pair_000/{f}"));
    run_ok(&[
        "infer", "--checkpoint", &p("t.ckpt"), "--rgb1", &s("rgb1.png"), "--rgb2", &s("rgb2.png"),
        "--k1", &s("k1.json"), "--k2", &s("k2.json"), "--d1", &s("d1.depth"), "--d2", &s("d2.depth"),
        "--pose", &s("p12.json"), "--out", &p("inf"),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("inf/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["priors"], "K1+K2+D1+D2+RT");
    let (x22, c22) = read_pointmap_ply(p("inf/x22.ply")).unwrap();
    assert_eq!((x22.subject, x22.frame, x22.width), (1, 1, 16));
    assert!(c22.values.iter().all(|c| *c >= 1.0));
    run_ok(&["infer", "--checkpoint", &p("t.ckpt"), "--rgb1", &s("rgb1.png"), "--rgb2", &s("rgb2.png"), "--out", &p("inf0")]);

    // A 32x24 parent image split into 16x16 tiles.
    run_ok(&["gen-scenes", "--out", &p("big"), "--count", "1", "--width", "32", "--height", "24"]);
    let b = |f: &str| p(&format!("big/pair_000/{f}"));
    run_ok(&[
        "stitch", "--checkpoint", &p("t.ckpt"), "--rgb", &b("rgb1.png"), "--k", &b("k1.json"), "--tile", "16x16",
        "--overlap", "4", "--ref-tile", "1", "--out", &p("st"),
    ]);
    let (pm, _) = read_pointmap_ply(p("st/stitched.ply")).unwrap();
    assert_eq!(pm.dims(), (32, 24));
    assert_eq!(pm.valid_count(), 32 * 24);

    // Tile size must match the network.
    let code = status(&["stitch", "--checkpoint", &p("t.ckpt"), "--rgb", &b("rgb1.png"), "--tile", "8x8", "--out", &p("st2")]);
    assert_eq!(code, 2);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let out = out.to_str().unwrap();
    assert_eq!(status(&["eval", "--suite", "guiding-trend", "--out", out]), 2);
    assert_eq!(status(&["eval", "--suite", "nonsense", "--out", out]), 2);
    assert_eq!(status(&["align", "--pairs", "/nonexistent/manifest.json", "--out", out]), 1);
    assert_eq!(status(&["eval", "--suite", "stitch", "--items", "1", "--out", out]), 0);
}

#[test]
fn empty_subset_row_equals_direct_inference() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("n.ckpt");
    tiny_checkpoint(&ckpt, 16, 16);
    let opts = BenchOptions {
        checkpoint: Some(ckpt.clone()),
        items: 5,
        ..BenchOptions::default()
    };
    let rep = run_benchmark(Suite::GuidingTrend, 7, &dir.path().join("b"), &opts).unwrap();
    assert_eq!(rep.rows.len(), 12);
    let labels: Vec<String> = ModalityMask::guidance_rows().iter().map(|m| m.label()).collect();
    assert_eq!(rep.rows.iter().map(|r| r.label.clone()).collect::<Vec<_>>(), labels);

    let net = checkpoint::load(&ckpt).unwrap();
    let scores: Vec<_> = eval_pairs(7, 5, 16, 16)
        .unwrap()
        .iter()
        .map(|p| {
            let input = NetInput::new(&p.rgb1, &p.rgb2, &AuxiliaryBundle::default(), 8).unwrap();
            score_prediction(&net.predict(&input).unwrap(), p).unwrap()
        })
        .collect();
    let direct = report(&ModalityMask::NONE.label(), &scores).unwrap();
    let row = rep.rows.iter().find(|r| r.label == direct.label).unwrap();
    assert_eq!(*row, direct);
}

#[test]
fn seeded_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let opts = BenchOptions {
        items: 3,
        ..BenchOptions::default()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    run_benchmark(Suite::Pose, 11, &a, &opts).unwrap();
    run_benchmark(Suite::Pose, 11, &b, &opts).unwrap();
    run_benchmark(Suite::Pose, 12, &c, &opts).unwrap();
    let read = |d: &Path| std::fs::read(d.join("report.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(a.join("pose.svg").exists());
}
